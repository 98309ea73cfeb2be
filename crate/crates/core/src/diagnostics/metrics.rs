//! Image quality metrics over an optional binary region.

use std::fmt;
use std::str::FromStr;

use crate::error::{domain, shape, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PsnrConvention {
    /// `20·log10(N·M·‖f*‖∞ / ‖f* − f̄‖₂)`.
    #[default]
    PixelCount,
    /// `20·log10(√(N·M)·‖f*‖∞ / ‖f* − f̄‖₂)`, i.e. peak over RMSE.
    Standard,
}

impl PsnrConvention {
    pub fn name(self) -> &'static str {
        match self {
            Self::PixelCount => "nm",
            Self::Standard => "sqrt-nm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimOptions {
    /// Dynamic range; `None` uses `max − min` of the reference over the region.
    pub l: Option<f64>,
    pub k1: f64,
    pub k2: f64,
    /// Gaussian-windowed (11×11, σ = 1.5) mean SSIM instead of global statistics.
    pub windowed: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self { l: None, k1: 0.01, k2: 0.03, windowed: false }
    }
}

fn check(a: &[f64], b: &[f64], mask: Option<&[u8]>) -> Result<()> {
    if a.len() != b.len() || mask.is_some_and(|m| m.len() != a.len()) {
        return shape("metric operands have different lengths");
    }
    Ok(())
}

fn selected<'a>(a: &'a [f64], b: &'a [f64], mask: Option<&'a [u8]>) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i] != 0))
        .map(|(_, (&x, &y))| (x, y))
}

/// `‖f* − f̄‖² / ‖f*‖²` over the region.
pub fn nmse(f_star: &[f64], f_bar: &[f64], mask: Option<&[u8]>) -> Result<f64> {
    check(f_star, f_bar, mask)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (r, e) in selected(f_star, f_bar, mask) {
        num += (r - e) * (r - e);
        den += r * r;
    }
    if den == 0.0 {
        return domain("reference has zero norm on the region");
    }
    Ok(num / den)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
/// `N·M` is the number of pixels in the region.
pub fn psnr(f_star: &[f64], f_bar: &[f64], mask: Option<&[u8]>, convention: PsnrConvention) -> Result<f64> {
    check(f_star, f_bar, mask)?;
    let (mut err, mut peak, mut count) = (0.0, 0.0f64, 0usize);
    for (r, e) in selected(f_star, f_bar, mask) {
        err += (r - e) * (r - e);
        peak = peak.max(r.abs());
        count += 1;
    }
    if count == 0 {
        return domain("empty region");
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let nm = match convention {
        PsnrConvention::PixelCount => count as f64,
        PsnrConvention::Standard => (count as f64).sqrt(),
    };
    Ok(20.0 * (nm * peak / err.sqrt()).log10())
}

fn dynamic_range(f_star: &[f64], mask: Option<&[u8]>, opts: &SsimOptions) -> Result<f64> {
    let l = match opts.l {
        Some(l) => l,
        None => {
            let (lo, hi) = selected(f_star, f_star, mask).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| (lo.min(v), hi.max(v)));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    };
    if !(l > 0.0 && l.is_finite()) {
        return domain(format!("SSIM dynamic range must be positive, got {l}"));
    }
    Ok(l)
}

fn ssim_from_stats(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Structural similarity from single (population) means, variances and
/// covariance over the region.
pub fn ssim(f_star: &[f64], f_bar: &[f64], mask: Option<&[u8]>, opts: &SsimOptions) -> Result<f64> {
    check(f_star, f_bar, mask)?;
    let l = dynamic_range(f_star, mask, opts)?;
    let (c1, c2) = ((opts.k1 * l).powi(2), (opts.k2 * l).powi(2));
    let pairs: Vec<(f64, f64)> = selected(f_star, f_bar, mask).collect();
    if pairs.is_empty() {
        return domain("empty region");
    }
    let n = pairs.len() as f64;
    let mu_a = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mu_b = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for &(a, b) in &pairs {
        va += (a - mu_a) * (a - mu_a);
        vb += (b - mu_b) * (b - mu_b);
        cov += (a - mu_a) * (b - mu_b);
    }
    Ok(ssim_from_stats(mu_a, mu_b, va / n, vb / n, cov / n, c1, c2))
}

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

/// Mean of the local SSIM map over window centres inside the region whose
/// window lies inside the image.
pub fn ssim_windowed(f_star: &[f64], f_bar: &[f64], nx: usize, mask: Option<&[u8]>, opts: &SsimOptions) -> Result<f64> {
    check(f_star, f_bar, mask)?;
    if nx == 0 || f_star.len() % nx != 0 {
        return shape("image width does not divide the pixel count");
    }
    let ny = f_star.len() / nx;
    let l = dynamic_range(f_star, mask, opts)?;
    let (c1, c2) = ((opts.k1 * l).powi(2), (opts.k2 * l).powi(2));
    let half = WINDOW / 2;
    let g: Vec<f64> = (0..WINDOW).map(|i| (-((i as f64 - half as f64).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()).collect();
    let gsum: f64 = g.iter().sum();
    let w: Vec<f64> = g.iter().map(|v| v / gsum).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for cy in half..ny.saturating_sub(half) {
        for cx in half..nx.saturating_sub(half) {
            if mask.is_some_and(|m| m[cy * nx + cx] == 0) {
                continue;
            }
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let k = w[dy] * w[dx];
                    let i = (cy + dy - half) * nx + cx + dx - half;
                    let (a, b) = (f_star[i], f_bar[i]);
                    ma += k * a;
                    mb += k * b;
                    saa += k * a * a;
                    sbb += k * b * b;
                    sab += k * a * b;
                }
            }
            total += ssim_from_stats(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb, c1, c2);
            count += 1;
        }
    }
    if count == 0 {
        return domain("no complete SSIM window inside the region");
    }
    Ok(total / count as f64)
}

/// Pixels where the reference exceeds `rel · max(reference)`.
pub fn body_mask(f_star: &[f64], rel: f64) -> Vec<u8> {
    let max = f_star.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    f_star.iter().map(|&v| u8::from(v > rel * max)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Full,
    Roi,
    Body,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Roi => "roi",
            Self::Body => "body",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "roi" => Ok(Self::Roi),
            "body" => Ok(Self::Body),
            _ => Err(Error::Format(format!("unknown region '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricOptions {
    pub psnr: PsnrConvention,
    pub ssim: SsimOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub sample: String,
    pub region: Region,
    pub nmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub psnr_convention: PsnrConvention,
    pub ssim_windowed: bool,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "sample,region,nmse,psnr_db,ssim,psnr_convention,ssim_mode";

    /// All three metrics of `f_bar` against `f_star` over `mask`.
    pub fn compute(
        sample: impl Into<String>,
        region: Region,
        f_star: &[f64],
        f_bar: &[f64],
        nx: usize,
        mask: Option<&[u8]>,
        opts: &MetricOptions,
    ) -> Result<Self> {
        let ssim = if opts.ssim.windowed {
            ssim_windowed(f_star, f_bar, nx, mask, &opts.ssim)?
        } else {
            ssim(f_star, f_bar, mask, &opts.ssim)?
        };
        Ok(Self {
            sample: sample.into(),
            region,
            nmse: nmse(f_star, f_bar, mask)?,
            psnr_db: psnr(f_star, f_bar, mask, opts.psnr)?,
            ssim,
            psnr_convention: opts.psnr,
            ssim_windowed: opts.ssim.windowed,
        })
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.sample,
            self.region,
            self.nmse,
            self.psnr_db,
            self.ssim,
            self.psnr_convention.name(),
            if self.ssim_windowed { "windowed" } else { "global" }
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let cols: Vec<&str> = row.trim().split(',').collect();
        let bad = || Error::Format(format!("malformed metrics row '{row}'"));
        if cols.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            sample: cols[0].to_string(),
            region: cols[1].parse()?,
            nmse: num(cols[2])?,
            psnr_db: num(cols[3])?,
            ssim: num(cols[4])?,
            psnr_convention: match cols[5] {
                "nm" => PsnrConvention::PixelCount,
                "sqrt-nm" => PsnrConvention::Standard,
                _ => return Err(bad()),
            },
            ssim_windowed: match cols[6] {
                "windowed" => true,
                "global" => false,
                _ => return Err(bad()),
            },
        })
    }
}
