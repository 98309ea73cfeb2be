//! Cosine pre-weighting and Ram-Lak ramp filtering for flat-detector fan beams.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Sinogram;
use crate::geometry::FanBeamGeometry;

/// How the ramp's transfer function is obtained on the padded FFT grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelSampling {
    /// Discrete Ram-Lak kernel sampled in detector space: exact taps
    /// `1/(4Δ²)`, `0` for even and `-1/(π²k²Δ²)` for odd offsets.
    #[default]
    Spatial,
    /// `|ν|/Δ²` sampled on the FFT grid; exactly zero response at DC.
    Frequency,
}

/// Optional apodization applied to the transfer function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RampWindow {
    #[default]
    None,
    Hann,
}

/// A ramp filter bound to one detector layout.
#[derive(Clone)]
pub struct RampFilter {
    n_dets: usize,
    padded: usize,
    cos_weights: Vec<f64>,
    transfer: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(geom: &FanBeamGeometry, sampling: KernelSampling, window: RampWindow) -> Self {
        let n = geom.n_dets;
        let padded = (2 * n).next_power_of_two();
        let du2 = geom.det_pitch_mm * geom.det_pitch_mm;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(padded);
        let inv = planner.plan_fft_inverse(padded);

        let mut transfer: Vec<f64> = match sampling {
            KernelSampling::Spatial => {
                let mut h: Vec<Complex64> = (0..padded)
                    .map(|k| {
                        let o = if k <= padded / 2 { k as i64 } else { k as i64 - padded as i64 };
                        Complex64::new(ram_lak_tap(o, du2), 0.0)
                    })
                    .collect();
                fwd.process(&mut h);
                h.iter().map(|c| c.re).collect()
            }
            KernelSampling::Frequency => (0..padded)
                .map(|m| {
                    let m = m.min(padded - m) as f64;
                    m / padded as f64 / du2
                })
                .collect(),
        };
        if window == RampWindow::Hann {
            for (m, t) in transfer.iter_mut().enumerate() {
                let nu = m.min(padded - m) as f64 / padded as f64;
                *t *= 0.5 * (1.0 + (2.0 * PI * nu).cos());
            }
        }
        let cos_weights = (0..n)
            .map(|k| {
                let u = geom.det_u(k);
                geom.sdd_mm / geom.sdd_mm.hypot(u)
            })
            .collect();
        Self { n_dets: n, padded, cos_weights, transfer, fwd, inv }
    }

    pub fn cos_weights(&self) -> &[f64] {
        &self.cos_weights
    }

    /// Zero-padded convolution of one view with the ramp kernel.
    pub fn convolve(&self, view: &[f64], out: &mut [f64]) {
        debug_assert_eq!(view.len(), self.n_dets);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.padded];
        for (b, &x) in buf.iter_mut().zip(view) {
            b.re = x;
        }
        self.fwd.process(&mut buf);
        for (b, &t) in buf.iter_mut().zip(&self.transfer) {
            *b *= t;
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }

    /// Cosine weighting followed by ramp convolution, view by view.
    pub fn apply(&self, sino: &Sinogram) -> Sinogram {
        let mut out = Sinogram::zeros(sino.geom);
        let mut weighted = vec![0.0; self.n_dets];
        for (src, dst) in sino
            .values
            .chunks_exact(self.n_dets)
            .zip(out.values.chunks_exact_mut(self.n_dets))
        {
            for ((w, &x), &c) in weighted.iter_mut().zip(src).zip(&self.cos_weights) {
                *w = x * c;
            }
            self.convolve(&weighted, dst);
        }
        out
    }

    /// Transpose of [`RampFilter::apply`]: the kernel is symmetric, so the
    /// convolution is its own transpose and the cosine weights move last.
    pub fn apply_adjoint(&self, sino: &Sinogram) -> Sinogram {
        let mut out = Sinogram::zeros(sino.geom);
        for (src, dst) in sino
            .values
            .chunks_exact(self.n_dets)
            .zip(out.values.chunks_exact_mut(self.n_dets))
        {
            self.convolve(src, dst);
            for (d, &c) in dst.iter_mut().zip(&self.cos_weights) {
                *d *= c;
            }
        }
        out
    }
}

fn ram_lak_tap(offset: i64, du2: f64) -> f64 {
    if offset == 0 {
        1.0 / (4.0 * du2)
    } else if offset % 2 == 0 {
        0.0
    } else {
        -1.0 / (PI * PI * (offset * offset) as f64 * du2)
    }
}

/// Ram-Lak filtering with spatial kernel sampling and no window.
pub fn ramp_filter(sino: &Sinogram) -> Sinogram {
    RampFilter::new(&sino.geom, KernelSampling::Spatial, RampWindow::None).apply(sino)
}
