//! Wrap-around Hankel lifting, its numerical rank and the framelet
//! decomposition built from its SVD.

use nalgebra::{ComplexField, DMatrix};

use crate::error::{domain, Result};

/// Default relative threshold for [`hankel_rank`].
pub const RANK_TOL: f64 = 1e-8;

/// `n×d` matrix with `H[i][j] = x[(i + j) mod n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix<T: ComplexField = f64> {
    pub n: usize,
    pub d: usize,
    pub matrix: DMatrix<T>,
}

impl<T: ComplexField<RealField = f64>> HankelMatrix<T> {
    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        self.matrix.clone().svd(false, false).singular_values.iter().copied().collect()
    }

    /// Number of singular values above `rel_tol · σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        count_above(&self.singular_values(), rel_tol)
    }
}

pub fn hankel<T: ComplexField>(signal: &[T], d: usize) -> Result<HankelMatrix<T>> {
    let n = signal.len();
    if d == 0 || d > n {
        return domain(format!("pencil parameter {d} must lie in 1..={n}"));
    }
    let matrix = DMatrix::from_fn(n, d, |i, j| signal[(i + j) % n].clone());
    Ok(HankelMatrix { n, d, matrix })
}

fn count_above(sv: &[f64], rel_tol: f64) -> usize {
    let max = sv.iter().fold(0.0f64, |m, &s| m.max(s));
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Numerical rank of the lifting with `d` columns (`None` means `d = n`),
/// counting singular values above `1e-8 · σ_max`.
pub fn hankel_rank<T: ComplexField<RealField = f64>>(signal: &[T], d: Option<usize>) -> Result<usize> {
    Ok(hankel(signal, d.unwrap_or(signal.len()))?.rank(RANK_TOL))
}

/// Non-local bases `Φ, Φ̃` (n×n) and local bases `Ψ, Ψ̃` (d×r).
#[derive(Clone, Debug)]
pub struct FrameletBases {
    pub phi: DMatrix<f64>,
    pub phi_tilde: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub psi_tilde: DMatrix<f64>,
    pub rank: usize,
}

impl FrameletBases {
    /// Identity non-local bases and the leading `rank` right singular
    /// vectors of `h` as local bases.
    pub fn from_svd(h: &HankelMatrix, rank: usize) -> Result<Self> {
        if rank > h.d {
            return domain(format!("rank {rank} exceeds pencil parameter {}", h.d));
        }
        let v_t = h.matrix.clone().svd(false, true).v_t.expect("right singular vectors");
        let psi = v_t.rows(0, rank).transpose();
        Ok(Self {
            phi: DMatrix::identity(h.n, h.n),
            phi_tilde: DMatrix::identity(h.n, h.n),
            psi_tilde: psi.clone(),
            psi,
            rank,
        })
    }

    /// `Φ̃ Φᵀ H Ψ Ψ̃ᵀ`.
    pub fn reconstruct(&self, h: &HankelMatrix) -> DMatrix<f64> {
        &self.phi_tilde * self.phi.transpose() * &h.matrix * &self.psi * self.psi_tilde.transpose()
    }

    /// Max deviation of `Φ̃Φᵀ` from the identity.
    pub fn nonlocal_error(&self) -> f64 {
        let p = &self.phi_tilde * self.phi.transpose();
        max_abs(&(p - DMatrix::identity(self.phi.nrows(), self.phi.nrows())))
    }

    /// Max deviation of `ΨΨ̃ᵀ` from an orthogonal projector (symmetric and idempotent).
    pub fn projector_error(&self) -> f64 {
        let p = &self.psi * self.psi_tilde.transpose();
        max_abs(&(&p - p.transpose())).max(max_abs(&(&p * &p - &p)))
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// `H − Φ̃ΦᵀHΨΨ̃ᵀ` for the SVD bases truncated to `rank` (`None` keeps all).
pub fn framelet_residual(signal: &[f64], d: usize, rank: Option<usize>) -> Result<DMatrix<f64>> {
    let h = hankel(signal, d)?;
    let bases = FrameletBases::from_svd(&h, rank.unwrap_or(d))?;
    Ok(&h.matrix - bases.reconstruct(&h))
}

/// Max absolute entry of [`framelet_residual`].
pub fn framelet_identity_check(signal: &[f64], d: usize, rank: Option<usize>) -> Result<f64> {
    Ok(max_abs(&framelet_residual(signal, d, rank)?))
}

/// Normalised Hankel spectrum of a set of feature maps. Each channel is
/// flattened row-major, its central `n` samples are lifted with `d`
/// columns, and the per-channel spectra (each divided by its own `σ_max`)
/// are averaged and renormalised so the leading value is 1. All-zero
/// channels are skipped; if every channel is zero the result is all zeros.
pub fn singular_spectrum(channels: &[&[f64]], n: usize, d: usize) -> Result<Vec<f64>> {
    if channels.is_empty() {
        return domain("no feature maps");
    }
    if d == 0 || d > n {
        return domain(format!("pencil parameter {d} must lie in 1..={n}"));
    }
    let mut acc = vec![0.0; d];
    let mut used = 0usize;
    for c in channels {
        if c.len() < n {
            return domain(format!("feature map of {} samples is shorter than the window {n}", c.len()));
        }
        let start = (c.len() - n) / 2;
        let sv = hankel(&c[start..start + n], d)?.singular_values();
        if sv[0] > 0.0 {
            acc.iter_mut().zip(&sv).for_each(|(a, s)| *a += s / sv[0]);
            used += 1;
        }
    }
    if used > 0 {
        let top = acc[0];
        acc.iter_mut().for_each(|a| *a /= top);
    }
    Ok(acc)
}

/// Number of spectrum entries above `rel · max`.
pub fn effective_rank(spectrum: &[f64], rel: f64) -> usize {
    count_above(spectrum, rel)
}

/// Mean of a normalised spectrum; smaller means faster decay.
pub fn spectrum_area(spectrum: &[f64]) -> f64 {
    spectrum.iter().sum::<f64>() / spectrum.len().max(1) as f64
}
