//! Masked residual objectives for the four architectures.

use crate::error::{domain, shape, Result};
use crate::geometry::{ImageMask, ProjectionMask};
use crate::projector::{FbpOperator, Image, Sinogram};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Squared error averaged over the entries inside the mask.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossOptions {
    pub reduction: Reduction,
    /// Treat the noise estimate as a constant inside the extrapolation term.
    pub detach_noise: bool,
    /// Block gradients from the second stage into the first.
    pub stage_barrier: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { reduction: Reduction::Mean, detach_noise: true, stage_barrier: true }
    }
}

/// `‖M⊙target − M⊙pred‖²` and its gradient with respect to `pred`.
pub fn masked_sq_error(target: &[f64], pred: &[f64], mask: &[f64], reduction: Reduction) -> Result<(f64, Vec<f64>)> {
    if target.len() != pred.len() || target.len() != mask.len() {
        return shape(format!("loss operands have lengths {}, {}, {}", target.len(), pred.len(), mask.len()));
    }
    let count: f64 = mask.iter().sum();
    if count <= 0.0 {
        return domain("loss mask is empty");
    }
    let norm = match reduction {
        Reduction::Mean => 1.0 / count,
        Reduction::Sum => 1.0,
    };
    let mut value = 0.0;
    let grad = target
        .iter()
        .zip(pred)
        .zip(mask)
        .map(|((&t, &p), &m)| {
            let r = m * (t - p);
            value += r * r;
            -2.0 * norm * m * r
        })
        .collect();
    Ok((value * norm, grad))
}

/// `T⊙(p − h) + (1 − T)⊙z`.
pub fn compose_corrected_sinogram(p: &Sinogram, h: &Sinogram, z: &Sinogram, t: &ProjectionMask) -> Result<Sinogram> {
    if p.geom != h.geom || p.geom != z.geom || !t.matches(&p.geom) {
        return shape("sinograms and truncation mask must share one geometry");
    }
    let values = p
        .values
        .iter()
        .zip(&h.values)
        .zip(&z.values)
        .zip(t.values())
        .map(|(((&p, &h), &z), &m)| if m == 1 { p - h } else { z })
        .collect();
    Ok(Sinogram { geom: p.geom, values })
}

fn check_image(a: &Image, b: &Image, roi: &ImageMask) -> Result<()> {
    if a.grid != b.grid || !roi.matches(&a.grid) {
        return shape("images and ROI mask must share one grid");
    }
    Ok(())
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Residual image loss `‖ℐ⊙(q − f) − ℐ⊙out‖²`; returns the value and the
/// gradient with respect to `out`.
pub fn loss_image_unet(q: &Image, f: &Image, roi: &ImageMask, out: &Image, reduction: Reduction) -> Result<(f64, Image)> {
    check_image(q, f, roi)?;
    check_image(q, out, roi)?;
    let (value, grad) = masked_sq_error(&diff(&q.values, &f.values), &out.values, &roi.as_f64(), reduction)?;
    Ok((value, Image::from_values(q.grid, grad)?))
}

/// Both terms of the projection-domain objective with their gradients.
#[derive(Clone, Debug)]
pub struct ProjectionLoss {
    /// Noise term inside the measured region.
    pub noise: f64,
    /// Image term of the extrapolated, denoised sinogram.
    pub image: f64,
    pub grad_h: Sinogram,
    pub grad_z: Sinogram,
    /// Gradient of the noise term alone with respect to `h`.
    pub grad_noise: Sinogram,
    /// Gradient of the image term with respect to `corrected`.
    pub grad_corrected: Sinogram,
    /// `T⊙(p − h) + (1 − T)⊙z`.
    pub corrected: Sinogram,
    /// FBP of `corrected`, the first-stage image estimate.
    pub q_bar: Image,
    /// Gradient of the image term with respect to `q_bar`.
    pub grad_q_bar: Image,
}

impl ProjectionLoss {
    pub fn total(&self) -> f64 {
        self.noise + self.image
    }
}

/// Projection-domain objective:
/// `‖T⊙(p − y) − T⊙h‖² + ‖ℐ⊙f − ℐ⊙FBP(T⊙(p − h) + (1 − T)⊙z)‖²`.
#[allow(clippy::too_many_arguments)]
pub fn loss_projection_unet(
    fbp: &FbpOperator,
    p: &Sinogram,
    y: &Sinogram,
    f: &Image,
    t: &ProjectionMask,
    roi: &ImageMask,
    h: &Sinogram,
    z: &Sinogram,
    opts: LossOptions,
) -> Result<ProjectionLoss> {
    if p.geom != y.geom || fbp.geometry() != &p.geom || fbp.grid() != &f.grid || !roi.matches(&f.grid) {
        return shape("loss operands disagree with the bound geometry");
    }
    let tm = t.as_f64();
    let (noise, grad_h1) = masked_sq_error(&diff(&p.values, &y.values), &h.values, &tm, opts.reduction)?;
    let corrected = compose_corrected_sinogram(p, h, z, t)?;
    let q_bar = fbp.apply(&corrected)?;
    let (image, grad_q) = masked_sq_error(&f.values, &q_bar.values, &roi.as_f64(), opts.reduction)?;
    let grad_q_bar = Image::from_values(f.grid, grad_q)?;
    let grad_s = fbp.adjoint(&grad_q_bar)?;
    let grad_noise = Sinogram { geom: p.geom, values: grad_h1.clone() };
    let mut grad_h = Sinogram { geom: p.geom, values: grad_h1 };
    let mut grad_z = Sinogram::zeros(p.geom);
    for (i, &m) in t.values().iter().enumerate() {
        if m == 1 {
            if !opts.detach_noise {
                grad_h.values[i] -= grad_s.values[i];
            }
        } else {
            grad_z.values[i] = grad_s.values[i];
        }
    }
    Ok(ProjectionLoss { noise, image, grad_h, grad_z, grad_noise, grad_corrected: grad_s, corrected, q_bar, grad_q_bar })
}

/// Two-stage image objective; `q̄ = q − out1` is the first stage's estimate.
/// Returns the stage losses and the gradients with respect to each output,
/// treating `q̄` as a constant in the second term.
pub fn loss_wnet(q: &Image, f: &Image, roi: &ImageMask, out1: &Image, out2: &Image, reduction: Reduction) -> Result<(f64, f64, Image, Image)> {
    let (l1, g1) = loss_image_unet(q, f, roi, out1, reduction)?;
    let q_bar = Image::from_values(q.grid, diff(&q.values, &out1.values))?;
    let (l2, g2) = loss_image_unet(&q_bar, f, roi, out2, reduction)?;
    Ok((l1, l2, g1, g2))
}
