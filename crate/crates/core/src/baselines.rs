//! Classical comparators: mirrored projection extrapolation and smoothed-TV
//! iterative reconstruction.

use std::f64::consts::FRAC_PI_2;

use crate::error::{config, domain, shape, Result};
use crate::geometry::{ImageGrid, ProjectionMask};
use crate::projector::{back_project, fbp, forward_project, Image, Sinogram};

/// Index inside `a..b` obtained by reflecting `i` at the span edges
/// (half-sample symmetric, repeating if the span is short).
fn reflect_into(i: isize, a: usize, b: usize) -> usize {
    let len = (b - a) as isize;
    let period = 2 * len;
    let r = (i - a as isize).rem_euclid(period);
    a + if r < len { r } else { period - 1 - r } as usize
}

/// Fills the unmeasured detectors of each view with the mirror image of the
/// measured ones, tapered by a quarter cosine that is 1 at the first
/// unmeasured bin and reaches 0 at the edge of the array.
pub fn extrapolate_sinogram(p: &Sinogram, t: &ProjectionMask) -> Result<Sinogram> {
    if !t.matches(&p.geom) {
        return shape("truncation mask does not match the sinogram");
    }
    let nd = p.geom.n_dets;
    let mut out = p.clone();
    for v in 0..p.geom.n_views {
        let row = &t.values()[v * nd..(v + 1) * nd];
        let (Some(a), Some(last)) = (row.iter().position(|&m| m == 1), row.iter().rposition(|&m| m == 1)) else {
            return domain(format!("view {v} has no measured detectors"));
        };
        let b = last + 1;
        let src = p.view(v);
        let dst = &mut out.values[v * nd..(v + 1) * nd];
        for j in b..nd {
            let w = (FRAC_PI_2 * (j - b) as f64 / (nd - b) as f64).cos();
            dst[j] = w * src[reflect_into(j as isize, a, b)];
        }
        for j in 0..a {
            let w = (FRAC_PI_2 * (a - 1 - j) as f64 / a as f64).cos();
            dst[j] = w * src[reflect_into(j as isize, a, b)];
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvConfig {
    pub lambda: f64,
    pub n_iters: usize,
    /// Gradient step; `None` uses the inverse of the data term's Lipschitz
    /// constant estimated by power iteration.
    pub step: Option<f64>,
    /// Charbonnier smoothing constant.
    pub epsilon: f64,
    /// Halve the step within an iteration until the objective does not increase.
    pub line_search: bool,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self { lambda: 1.0, n_iters: 100, step: None, epsilon: 1e-6, line_search: true }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config("TV weight must be non-negative");
        }
        if self.n_iters == 0 {
            return config("TV needs at least one iteration");
        }
        if self.step.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return config("TV step must be positive");
        }
        if !(self.epsilon > 0.0) {
            return config("TV smoothing constant must be positive");
        }
        Ok(())
    }
}

/// `Σ √(|∇f|² + ε²)` with forward differences (zero at the last row and
/// column) and its gradient.
pub fn tv_value_and_gradient(img: &Image, epsilon: f64) -> (f64, Vec<f64>) {
    let (nx, ny) = (img.grid.nx, img.grid.ny);
    let f = &img.values;
    let mut grad = vec![0.0; f.len()];
    let mut value = 0.0;
    for iy in 0..ny {
        for ix in 0..nx {
            let i = iy * nx + ix;
            let dx = if ix + 1 < nx { f[i + 1] - f[i] } else { 0.0 };
            let dy = if iy + 1 < ny { f[i + nx] - f[i] } else { 0.0 };
            let mag = (dx * dx + dy * dy + epsilon * epsilon).sqrt();
            value += mag;
            let (gx, gy) = (dx / mag, dy / mag);
            if ix + 1 < nx {
                grad[i + 1] += gx;
                grad[i] -= gx;
            }
            if iy + 1 < ny {
                grad[i + nx] += gy;
                grad[i] -= gy;
            }
        }
    }
    (value, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TvStatus {
    Completed,
    /// The objective stayed above its best value for ten consecutive iterations.
    Diverged { iteration: usize },
}

#[derive(Clone, Debug)]
pub struct TvOutcome {
    /// Final (or, after divergence, last) iterate.
    pub image: Image,
    /// Objective before the first iteration and after each one.
    pub objective: Vec<f64>,
    /// Data term `½‖T⊙(Pf − p)‖²` at the same points.
    pub data_term: Vec<f64>,
    /// Base step size used.
    pub step: f64,
    pub status: TvStatus,
}

struct Problem<'a> {
    p: &'a Sinogram,
    mask: Vec<f64>,
    grid: ImageGrid,
    lambda: f64,
    epsilon: f64,
}

impl Problem<'_> {
    fn residual(&self, f: &Image) -> Result<Sinogram> {
        let mut r = forward_project(f, &self.p.geom)?;
        for ((r, &p), &m) in r.values.iter_mut().zip(&self.p.values).zip(&self.mask) {
            *r = m * (*r - p);
        }
        Ok(r)
    }

    /// (objective, data term, residual).
    fn evaluate(&self, f: &Image) -> Result<(f64, f64, Sinogram)> {
        let r = self.residual(f)?;
        let data = 0.5 * r.dot(&r);
        let tv = if self.lambda > 0.0 { tv_value_and_gradient(f, self.epsilon).0 } else { 0.0 };
        Ok((data + self.lambda * tv, data, r))
    }

    fn gradient(&self, f: &Image, r: &Sinogram) -> Result<Vec<f64>> {
        let mut g = back_project(r, &self.grid)?.values;
        if self.lambda > 0.0 {
            let (_, tg) = tv_value_and_gradient(f, self.epsilon);
            g.iter_mut().zip(tg).for_each(|(g, t)| *g += self.lambda * t);
        }
        Ok(g)
    }

    /// Largest eigenvalue of `PᵀTP` by power iteration.
    fn data_lipschitz(&self, iters: usize) -> Result<f64> {
        let mut x = Image::from_values(self.grid, vec![1.0; self.grid.len()])?;
        let mut lambda = 0.0;
        for _ in 0..iters {
            let norm = x.dot(&x).sqrt();
            if norm == 0.0 {
                return Ok(0.0);
            }
            x.values.iter_mut().for_each(|v| *v /= norm);
            let mut y = forward_project(&x, &self.p.geom)?;
            y.values.iter_mut().zip(&self.mask).for_each(|(v, m)| *v *= m);
            let z = back_project(&y, &self.grid)?;
            lambda = z.dot(&x);
            x = z;
        }
        Ok(lambda)
    }
}

fn project_step(f: &Image, g: &[f64], step: f64) -> Image {
    let values = f.values.iter().zip(g).map(|(v, g)| (v - step * g).max(0.0)).collect();
    Image { grid: f.grid, values, role: f.role }
}

const DIVERGENCE_PATIENCE: usize = 10;
const MAX_HALVINGS: usize = 40;

/// Projected gradient descent on `½‖T⊙(Pf − p)‖² + λ·Σ√(|∇f|² + ε²)` with
/// `f ≥ 0`, started from the clamped FBP of the extrapolated sinogram.
pub fn tv_reconstruct(p: &Sinogram, t: &ProjectionMask, grid: &ImageGrid, cfg: &TvConfig) -> Result<TvOutcome> {
    cfg.validate()?;
    let start = fbp(&extrapolate_sinogram(p, t)?, grid)?;
    let init = Image { values: start.values.iter().map(|v| v.max(0.0)).collect(), ..start };
    tv_from(p, t, init, cfg)
}

/// As [`tv_reconstruct`] from a given starting image.
pub fn tv_from(p: &Sinogram, t: &ProjectionMask, init: Image, cfg: &TvConfig) -> Result<TvOutcome> {
    cfg.validate()?;
    if !t.matches(&p.geom) {
        return shape("truncation mask does not match the sinogram");
    }
    let grid = init.grid;
    let problem = Problem { p, mask: t.as_f64(), grid, lambda: cfg.lambda, epsilon: cfg.epsilon };
    let step = match cfg.step {
        Some(s) => s,
        None => {
            let l = problem.data_lipschitz(30)?;
            if !(l > 0.0) {
                return domain("projection operator vanishes on the measured region");
            }
            1.0 / l
        }
    };
    let mut f = init;
    let (mut obj, mut data, mut r) = problem.evaluate(&f)?;
    let mut outcome = TvOutcome { image: f.clone(), objective: vec![obj], data_term: vec![data], step, status: TvStatus::Completed };
    let (mut best, mut rising) = (obj, 0);
    for it in 0..cfg.n_iters {
        let g = problem.gradient(&f, &r)?;
        let mut s = step;
        let mut next = project_step(&f, &g, s);
        let mut eval = problem.evaluate(&next)?;
        if cfg.line_search {
            let mut halvings = 0;
            while eval.0 > obj && halvings < MAX_HALVINGS {
                s *= 0.5;
                next = project_step(&f, &g, s);
                eval = problem.evaluate(&next)?;
                halvings += 1;
            }
            if eval.0 > obj {
                // No descent even for a vanishing step: stationary to rounding.
                break;
            }
        }
        if eval.0 < best {
            best = eval.0;
            rising = 0;
        } else if eval.0 > best {
            rising += 1;
        }
        f = next;
        (obj, data, r) = eval;
        outcome.objective.push(obj);
        outcome.data_term.push(data);
        if rising >= DIVERGENCE_PATIENCE {
            outcome.status = TvStatus::Diverged { iteration: it + 1 };
            break;
        }
    }
    outcome.image = f;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_indices() {
        let idx: Vec<usize> = (-4..10).map(|i| reflect_into(i, 2, 5)).collect();
        assert_eq!(idx, vec![2, 3, 4, 4, 3, 2, 2, 3, 4, 4, 3, 2, 2, 3]);
    }

    #[test]
    fn flat_image_has_zero_tv_gradient() {
        let grid = ImageGrid::standard_extent(16).unwrap();
        let img = Image::from_values(grid, vec![0.3; grid.len()]).unwrap();
        let (v, g) = tv_value_and_gradient(&img, 1e-6);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!((v - grid.len() as f64 * 1e-6).abs() < 1e-15);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let grid = ImageGrid::standard_extent(8).unwrap();
        let img = Image::from_values(grid, (0..64).map(|i| ((i * 37) % 11) as f64 * 0.1).collect()).unwrap();
        let eps = 0.05;
        let (_, g) = tv_value_and_gradient(&img, eps);
        for k in [0, 9, 27, 63] {
            let (mut a, mut b) = (img.clone(), img.clone());
            a.values[k] += 1e-6;
            b.values[k] -= 1e-6;
            let num = (tv_value_and_gradient(&a, eps).0 - tv_value_and_gradient(&b, eps).0) / 2e-6;
            assert!((num - g[k]).abs() < 1e-6 * g[k].abs().max(1.0), "{k}: {num} vs {}", g[k]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TvConfig::default().validate().is_ok());
        assert!(TvConfig { n_iters: 0, ..Default::default() }.validate().is_err());
        assert!(TvConfig { step: Some(0.0), ..Default::default() }.validate().is_err());
        assert!(TvConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }
}
