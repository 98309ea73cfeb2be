//! Equispaced fan-beam filtered backprojection and its exact transpose.
//!
//! With `Q = ramp(cos-weighted p)`, each pixel accumulates
//! `Δβ · C / U² · Q(β, u(x))` over all views, where `U` is the pixel's distance
//! from the source along the central ray divided by `sod`, `u(x)` its detector
//! coordinate, and `C = Δu·sdd / (2·sod)` folds the kernel scaling for the
//! virtual detector at the isocenter.

use rayon::prelude::*;

use super::filter::{KernelSampling, RampFilter, RampWindow};
use super::{check_pair, Image, ImageRole, Sinogram};
use crate::error::{shape, Result};
use crate::geometry::{FanBeamGeometry, ImageGrid};

/// FBP bound to a grid and geometry, usable as a linear operator pair.
#[derive(Clone)]
pub struct FbpOperator {
    grid: ImageGrid,
    geom: FanBeamGeometry,
    filter: RampFilter,
    trig: Vec<(f64, f64)>,
    scale: f64,
}

impl FbpOperator {
    pub fn new(grid: ImageGrid, geom: FanBeamGeometry) -> Result<Self> {
        Self::with_filter(grid, geom, KernelSampling::Spatial, RampWindow::None)
    }

    pub fn with_filter(
        grid: ImageGrid,
        geom: FanBeamGeometry,
        sampling: KernelSampling,
        window: RampWindow,
    ) -> Result<Self> {
        check_pair(&grid, &geom)?;
        let filter = RampFilter::new(&geom, sampling, window);
        let trig = (0..geom.n_views).map(|v| geom.view_angle(v).sin_cos()).collect();
        let scale = geom.delta_beta() * 0.5 * geom.det_pitch_mm * geom.sdd_mm / geom.sod_mm;
        Ok(Self { grid, geom, filter, trig, scale })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geom
    }

    /// Detector index and backprojection weight of pixel center `(x, y)` in view `v`.
    #[inline]
    fn footprint(&self, v: usize, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.trig[v];
        let l = self.geom.sod_mm - (x * c + y * s);
        let u = self.geom.sdd_mm * (-x * s + y * c) / l;
        let big_u = l / self.geom.sod_mm;
        (self.geom.det_index(u), self.scale / (big_u * big_u))
    }

    fn check_sino(&self, sino: &Sinogram) -> Result<()> {
        if sino.geom != self.geom || sino.values.len() != self.geom.len() {
            return shape("sinogram geometry differs from the bound FBP geometry");
        }
        Ok(())
    }

    /// Pixel-driven weighted backprojection of an already filtered sinogram.
    pub fn backproject_filtered(&self, filtered: &Sinogram) -> Result<Image> {
        self.check_sino(filtered)?;
        let (nx, nd) = (self.grid.nx, self.geom.n_dets);
        let mut values = vec![0.0; self.grid.len()];
        values.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
            for v in 0..self.geom.n_views {
                let q = &filtered.values[v * nd..(v + 1) * nd];
                for (ix, out) in row.iter_mut().enumerate() {
                    let (x, y) = self.grid.pixel_center(ix, iy);
                    let (idx, w) = self.footprint(v, x, y);
                    *out += w * interp(q, idx);
                }
            }
        });
        Ok(Image { grid: self.grid, values, role: ImageRole::Fbp })
    }

    /// Transpose of [`FbpOperator::backproject_filtered`].
    pub fn backproject_filtered_adjoint(&self, img: &Image) -> Result<Sinogram> {
        if img.grid != self.grid {
            return shape("image grid differs from the bound FBP grid");
        }
        let (nx, nd) = (self.grid.nx, self.geom.n_dets);
        let mut out = Sinogram::zeros(self.geom);
        out.values.par_chunks_mut(nd).enumerate().for_each(|(v, row)| {
            for iy in 0..self.grid.ny {
                for ix in 0..nx {
                    let g = img.values[iy * nx + ix];
                    if g == 0.0 {
                        continue;
                    }
                    let (x, y) = self.grid.pixel_center(ix, iy);
                    let (idx, w) = self.footprint(v, x, y);
                    scatter(row, idx, w * g);
                }
            }
        });
        Ok(out)
    }

    /// Filtered backprojection `ℛ⁻¹ p`.
    pub fn apply(&self, sino: &Sinogram) -> Result<Image> {
        self.check_sino(sino)?;
        self.backproject_filtered(&self.filter.apply(sino))
    }

    /// Transpose of [`FbpOperator::apply`]: weighted projection, then the ramp
    /// filter and cosine weights in reverse order.
    pub fn adjoint(&self, img: &Image) -> Result<Sinogram> {
        let projected = self.backproject_filtered_adjoint(img)?;
        Ok(self.filter.apply_adjoint(&projected))
    }
}

#[inline]
fn interp(q: &[f64], idx: f64) -> f64 {
    let i0 = idx.floor();
    let f = idx - i0;
    let i0 = i0 as isize;
    let n = q.len() as isize;
    let mut acc = 0.0;
    if i0 >= 0 && i0 < n {
        acc += (1.0 - f) * q[i0 as usize];
    }
    if i0 + 1 >= 0 && i0 + 1 < n {
        acc += f * q[(i0 + 1) as usize];
    }
    acc
}

#[inline]
fn scatter(row: &mut [f64], idx: f64, val: f64) {
    let i0 = idx.floor();
    let f = idx - i0;
    let i0 = i0 as isize;
    let n = row.len() as isize;
    if i0 >= 0 && i0 < n {
        row[i0 as usize] += (1.0 - f) * val;
    }
    if i0 + 1 >= 0 && i0 + 1 < n {
        row[(i0 + 1) as usize] += f * val;
    }
}

/// Filtered backprojection with the default Ram-Lak filter.
pub fn fbp(sino: &Sinogram, grid: &ImageGrid) -> Result<Image> {
    FbpOperator::new(*grid, sino.geom)?.apply(sino)
}

pub fn fbp_with(sino: &Sinogram, grid: &ImageGrid, sampling: KernelSampling, window: RampWindow) -> Result<Image> {
    FbpOperator::with_filter(*grid, sino.geom, sampling, window)?.apply(sino)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scaled_geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sinogram() {
        let grid = ImageGrid::standard_extent(32).unwrap();
        let geom = scaled_geometry(0.05).unwrap();
        let img = fbp(&Sinogram::zeros(geom), &grid).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_transpose() {
        let grid = ImageGrid::standard_extent(32).unwrap();
        let geom = scaled_geometry(0.05).unwrap();
        let op = FbpOperator::new(grid, geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Sinogram::from_values(geom, (0..geom.len()).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let g = Image::from_values(grid, (0..grid.len()).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let lhs = op.apply(&s).unwrap().dot(&g);
        let rhs = s.dot(&op.adjoint(&g).unwrap());
        assert!(((lhs - rhs) / lhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn scaling_is_linear() {
        let grid = ImageGrid::standard_extent(32).unwrap();
        let geom = scaled_geometry(0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Sinogram::from_values(geom, (0..geom.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut s2 = s.clone();
        s2.values.iter_mut().for_each(|v| *v *= -2.5);
        let a = fbp(&s, &grid).unwrap();
        let b = fbp(&s2, &grid).unwrap();
        let scale = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((y + 2.5 * x).abs() <= 1e-6 * 2.5 * scale);
        }
    }
}
