use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{domain, Result};
use crate::projector::Sinogram;

/// Transmission counts are Poisson with mean `i0·exp(-y)`, floored at one
/// count, then log-converted back to line integrals. `i0 = ∞` returns `y`.
///
/// Only the quantum (Poisson) term is modelled; an electronic-noise term
/// would be added to the counts before the floor.
pub fn simulate_low_dose<R: Rng + ?Sized>(y: &Sinogram, i0: f64, rng: &mut R) -> Result<Sinogram> {
    if !(i0 > 0.0) {
        return domain(format!("incident photon count must be positive, got {i0}"));
    }
    if y.values.iter().any(|&v| v < 0.0) {
        return domain("line integrals must be non-negative");
    }
    if i0.is_infinite() {
        return Ok(y.clone());
    }
    let log_i0 = i0.ln();
    let mut out = Sinogram::zeros(y.geom);
    for (p, &v) in out.values.iter_mut().zip(&y.values) {
        let mean = i0 * (-v).exp();
        let counts = if mean > 0.0 {
            Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(0.0)
        } else {
            0.0
        };
        *p = log_i0 - counts.max(1.0).ln();
    }
    Ok(out)
}

/// Incident photon count `10^u`, `u ~ U(5, 8)`.
pub fn sample_i0<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    10f64.powf(rng.random_range(5.0..8.0))
}

/// One entry of the truncation-ratio schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RatioEntry {
    Fixed(f64),
    Uniform(f64, f64),
}

impl RatioEntry {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RatioEntry::Fixed(r) => r,
            RatioEntry::Uniform(a, b) => rng.random_range(a..b),
        }
    }
}

/// Seven-entry truncation schedule: fixed ratios interleaved with uniform
/// draws between them.
pub const TRUNCATION_SCHEDULE: [RatioEntry; 7] = [
    RatioEntry::Fixed(0.0),
    RatioEntry::Uniform(0.0, 0.58),
    RatioEntry::Fixed(0.58),
    RatioEntry::Uniform(0.58, 0.74),
    RatioEntry::Fixed(0.74),
    RatioEntry::Uniform(0.74, 0.83),
    RatioEntry::Fixed(0.83),
];

pub fn sample_truncation_ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let entry = TRUNCATION_SCHEDULE[rng.random_range(0..TRUNCATION_SCHEDULE.len())];
    entry.sample(rng)
}
