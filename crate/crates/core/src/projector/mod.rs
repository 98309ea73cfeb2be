//! X-ray transform, its transpose, ramp filtering and fan-beam FBP.

mod fbp;
mod filter;
mod joseph;

pub use fbp::{fbp, fbp_with, FbpOperator};
pub use filter::{ramp_filter, KernelSampling, RampFilter, RampWindow};
pub use joseph::{back_project, forward_project};

use crate::error::{domain, shape, Result};
use crate::geometry::{FanBeamGeometry, ImageGrid};

/// What an image stands for in the reconstruction chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ImageRole {
    GroundTruth,
    Fbp,
    Noise,
    Cupping,
    #[default]
    Generic,
}

/// Image-domain scalar field, row-major with `ny` rows of `nx` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub grid: ImageGrid,
    pub values: Vec<f64>,
    pub role: ImageRole,
}

impl Image {
    pub fn zeros(grid: ImageGrid) -> Self {
        Self { grid, values: vec![0.0; grid.len()], role: ImageRole::Generic }
    }

    pub fn from_values(grid: ImageGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return shape(format!(
                "image holds {} values, grid {}x{} needs {}",
                values.len(),
                grid.nx,
                grid.ny,
                grid.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("image values must be finite");
        }
        Ok(Self { grid, values, role: ImageRole::Generic })
    }

    pub fn with_role(mut self, role: ImageRole) -> Self {
        self.role = role;
        self
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.nx + ix]
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Mirror top to bottom.
    pub fn flip_vertical(&self) -> Image {
        let nx = self.grid.nx;
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(nx).rev() {
            values.extend_from_slice(row);
        }
        Image { grid: self.grid, values, role: self.role }
    }
}

/// Projection-domain field, `n_views` rows of `n_dets` line integrals.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub geom: FanBeamGeometry,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geom: FanBeamGeometry) -> Self {
        Self { geom, values: vec![0.0; geom.len()] }
    }

    pub fn from_values(geom: FanBeamGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geom.len() {
            return shape(format!(
                "sinogram holds {} values, geometry needs {}x{}",
                values.len(),
                geom.n_views,
                geom.n_dets
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("sinogram values must be finite");
        }
        Ok(Self { geom, values })
    }

    pub fn view(&self, v: usize) -> &[f64] {
        let n = self.geom.n_dets;
        &self.values[v * n..(v + 1) * n]
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Sinogram of the vertically mirrored object on a full-turn scan:
    /// view `β` maps to `-β` and the detector axis reverses.
    pub fn flip_vertical(&self) -> Result<Sinogram> {
        let g = &self.geom;
        if !g.is_full_scan() || g.angle_start_rad != 0.0 {
            return domain("vertical flip needs a full turn starting at angle 0");
        }
        let (nv, nd) = (g.n_views, g.n_dets);
        let mut values = vec![0.0; self.values.len()];
        for v in 0..nv {
            let src = (nv - v) % nv;
            let from = &self.values[src * nd..(src + 1) * nd];
            for (k, out) in values[v * nd..(v + 1) * nd].iter_mut().enumerate() {
                *out = from[nd - 1 - k];
            }
        }
        Ok(Sinogram { geom: self.geom, values })
    }
}

pub(crate) fn check_pair(grid: &ImageGrid, geom: &FanBeamGeometry) -> Result<()> {
    geom.check_grid(grid)
}
