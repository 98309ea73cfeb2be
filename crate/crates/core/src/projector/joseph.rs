//! Ray-driven projector: each ray is marched at half-pixel steps and the image
//! is sampled bilinearly. The transpose scatters along the same samples with
//! the same weights, so the pair is an exact discrete adjoint.

use rayon::prelude::*;

use super::{check_pair, Image, Sinogram};
use crate::error::{shape, Result};
use crate::geometry::{FanBeamGeometry, ImageGrid};

/// Views handled per partial image in the transpose. Fixed so the reduction
/// order does not depend on the thread count.
const VIEWS_PER_CHUNK: usize = 8;

struct Ray {
    origin: (f64, f64),
    dir: (f64, f64),
    t0: f64,
    steps: usize,
    step: f64,
}

fn trace(geom: &FanBeamGeometry, grid: &ImageGrid, view: usize, det: usize) -> Option<Ray> {
    let beta = geom.view_angle(view);
    let (s, c) = beta.sin_cos();
    let src = (geom.sod_mm * c, geom.sod_mm * s);
    let u = geom.det_u(det);
    let back = geom.sdd_mm - geom.sod_mm;
    let target = (-back * c - u * s, -back * s + u * c);
    let (dx, dy) = (target.0 - src.0, target.1 - src.1);
    let len = dx.hypot(dy);
    let dir = (dx / len, dy / len);

    // Bilinear support extends half a pixel past the outer pixel centers.
    let hx = grid.half_width_mm() + grid.pixel_size_mm / 2.0;
    let hy = grid.half_height_mm() + grid.pixel_size_mm / 2.0;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for (o, d, h) in [(src.0, dir.0, hx), (src.1, dir.1, hy)] {
        if d.abs() < 1e-15 {
            if o.abs() >= h {
                return None;
            }
        } else {
            let a = (-h - o) / d;
            let b = (h - o) / d;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    if t1 <= t0 {
        return None;
    }
    let step = grid.pixel_size_mm / 2.0;
    let steps = ((t1 - t0) / step).ceil() as usize;
    Some(Ray { origin: src, dir, t0, steps, step })
}

/// Visits every bilinear tap along a ray with its weight (step length included).
#[inline]
fn walk(grid: &ImageGrid, ray: &Ray, mut visit: impl FnMut(usize, f64)) {
    let (nx, ny) = (grid.nx as isize, grid.ny as isize);
    let t = ray.t0 + 0.5 * ray.step;
    let (cx0, cy0) = grid.to_index(ray.origin.0 + t * ray.dir.0, ray.origin.1 + t * ray.dir.1);
    let dcx = ray.step * ray.dir.0 / grid.pixel_size_mm;
    let dcy = -ray.step * ray.dir.1 / grid.pixel_size_mm;
    let h = ray.step;
    for j in 0..ray.steps {
        let cx = cx0 + j as f64 * dcx;
        let cy = cy0 + j as f64 * dcy;
        let (fx0, fy0) = (cx.floor(), cy.floor());
        let (fx, fy) = (cx - fx0, cy - fy0);
        let (ix, iy) = (fx0 as isize, fy0 as isize);
        let (w00, w10, w01, w11) = ((1.0 - fx) * (1.0 - fy) * h, fx * (1.0 - fy) * h, (1.0 - fx) * fy * h, fx * fy * h);
        if ix >= 0 && iy >= 0 && ix + 1 < nx && iy + 1 < ny {
            let i = (iy * nx + ix) as usize;
            let n = nx as usize;
            visit(i, w00);
            visit(i + 1, w10);
            visit(i + n, w01);
            visit(i + n + 1, w11);
        } else {
            for (px, py, w) in [(ix, iy, w00), (ix + 1, iy, w10), (ix, iy + 1, w01), (ix + 1, iy + 1, w11)] {
                if px >= 0 && px < nx && py >= 0 && py < ny {
                    visit((py * nx + px) as usize, w);
                }
            }
        }
    }
}

/// Line integrals of `img` along every source-to-detector ray of `geom`.
pub fn forward_project(img: &Image, geom: &FanBeamGeometry) -> Result<Sinogram> {
    let grid = img.grid;
    check_pair(&grid, geom)?;
    let mut out = Sinogram::zeros(*geom);
    out.values
        .par_chunks_mut(geom.n_dets)
        .enumerate()
        .for_each(|(v, row)| {
            for (k, out) in row.iter_mut().enumerate() {
                if let Some(ray) = trace(geom, &grid, v, k) {
                    let mut acc = 0.0;
                    walk(&grid, &ray, |i, w| acc += w * img.values[i]);
                    *out = acc;
                }
            }
        });
    Ok(out)
}

/// Transpose of [`forward_project`].
pub fn back_project(sino: &Sinogram, grid: &ImageGrid) -> Result<Image> {
    let geom = sino.geom;
    check_pair(grid, &geom)?;
    if sino.values.len() != geom.len() {
        return shape("sinogram length does not match its geometry");
    }
    let n_chunks = geom.n_views.div_ceil(VIEWS_PER_CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; grid.len()];
            let end = ((c + 1) * VIEWS_PER_CHUNK).min(geom.n_views);
            for v in c * VIEWS_PER_CHUNK..end {
                for k in 0..geom.n_dets {
                    let val = sino.values[v * geom.n_dets + k];
                    if val == 0.0 {
                        continue;
                    }
                    if let Some(ray) = trace(&geom, grid, v, k) {
                        walk(grid, &ray, |i, w| acc[i] += w * val);
                    }
                }
            }
            acc
        })
        .collect();
    let mut values = vec![0.0; grid.len()];
    for p in &partials {
        for (o, x) in values.iter_mut().zip(p) {
            *o += x;
        }
    }
    Ok(Image { grid: *grid, values, role: Default::default() })
}
