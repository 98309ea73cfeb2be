//! Hankel-matrix rank analysis and image quality metrics.

mod hankel;
mod metrics;

pub use hankel::{
    effective_rank, framelet_identity_check, framelet_residual, hankel, hankel_rank, singular_spectrum, spectrum_area,
    FrameletBases, HankelMatrix, RANK_TOL,
};
pub use metrics::{
    body_mask, nmse, psnr, ssim, ssim_windowed, MetricOptions, MetricsReport, PsnrConvention, Region, SsimOptions,
};

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{domain, Result};

/// Real signal of length `n` whose DFT is supported on the frequencies
/// `lo ≤ |k| ≤ hi`, with magnitudes uniform in `[amp/2, amp]` and random phases.
pub fn band_limited_signal<R: Rng + ?Sized>(n: usize, lo: usize, hi: usize, amp: f64, rng: &mut R) -> Result<Vec<f64>> {
    if n < 2 || lo > hi || hi > n / 2 {
        return domain(format!("band {lo}..={hi} does not fit a signal of length {n}"));
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in lo..=hi {
        let mag = amp * rng.random_range(0.5..=1.0);
        let c = if k == 0 || 2 * k == n {
            Complex64::new(if rng.random_bool(0.5) { mag } else { -mag }, 0.0)
        } else {
            Complex64::from_polar(mag, rng.random_range(0.0..std::f64::consts::TAU))
        };
        spec[k] = c;
        spec[(n - k) % n] = c.conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    Ok(spec.iter().map(|c| c.re / n as f64).collect())
}

/// A synthetic cupping profile (low-frequency support) and a synthetic
/// high-frequency noise profile a tenth of its strength.
pub fn synthetic_artifacts<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let cupping = band_limited_signal(n, 0, n / 16, 1.0, rng)?;
    let noise = band_limited_signal(n, 3 * n / 8, n / 2, 0.1, rng)?;
    Ok((cupping, noise))
}
