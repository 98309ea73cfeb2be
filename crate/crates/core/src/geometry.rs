//! Scanner geometry, reconstruction lattice and the projection/image masks.
//!
//! Coordinates are in millimetres with the rotation isocenter at the origin.
//! Pixel `(ix, iy)` has its center at
//! `x = (ix + 0.5 - nx/2)·Δ`, `y = (ny/2 - iy - 0.5)·Δ`, so row 0 is the top row.
//!
//! For view angle `β` the source sits at `sod·(cos β, sin β)`, the flat detector
//! is perpendicular to the central ray at distance `sdd` from the source, and
//! detector coordinate `u` runs along `(-sin β, cos β)`.

use std::f64::consts::PI;

use crate::error::{config, domain, Result};

const STANDARD_VIEWS: usize = 720;
const STANDARD_DETS: usize = 1440;
const STANDARD_PITCH_MM: f64 = 1.0;
const STANDARD_SOD_MM: f64 = 1000.0;
const STANDARD_SDD_MM: f64 = 1500.0;

/// Square-pixel reconstruction lattice centered on the isocenter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageGrid {
    pub nx: usize,
    pub ny: usize,
    pub pixel_size_mm: f64,
}

impl ImageGrid {
    pub fn new(nx: usize, ny: usize, pixel_size_mm: f64) -> Result<Self> {
        if nx < 8 || ny < 8 {
            return domain(format!("grid must be at least 8x8, got {nx}x{ny}"));
        }
        if !(pixel_size_mm > 0.0 && pixel_size_mm.is_finite()) {
            return domain(format!("pixel size must be positive, got {pixel_size_mm}"));
        }
        Ok(Self { nx, ny, pixel_size_mm })
    }

    /// The 512×512, 1 mm lattice of the reference protocol.
    pub fn standard() -> Self {
        Self { nx: 512, ny: 512, pixel_size_mm: 1.0 }
    }

    /// A lattice with the same physical extent as [`ImageGrid::standard`] and `n`×`n` pixels.
    pub fn standard_extent(n: usize) -> Result<Self> {
        Self::new(n, n, 512.0 / n as f64)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn half_width_mm(&self) -> f64 {
        self.nx as f64 * self.pixel_size_mm / 2.0
    }

    pub fn half_height_mm(&self) -> f64 {
        self.ny as f64 * self.pixel_size_mm / 2.0
    }

    /// Radius of the largest disc inscribed in the lattice.
    pub fn inscribed_radius_mm(&self) -> f64 {
        self.half_width_mm().min(self.half_height_mm())
    }

    /// Physical center of pixel `(ix, iy)`.
    #[inline]
    pub fn pixel_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let d = self.pixel_size_mm;
        (
            (ix as f64 + 0.5 - self.nx as f64 / 2.0) * d,
            (self.ny as f64 / 2.0 - iy as f64 - 0.5) * d,
        )
    }

    /// Continuous pixel-index coordinates (column, row) of a physical point.
    #[inline]
    pub fn to_index(&self, x: f64, y: f64) -> (f64, f64) {
        let d = self.pixel_size_mm;
        (
            x / d + self.nx as f64 / 2.0 - 0.5,
            self.ny as f64 / 2.0 - 0.5 - y / d,
        )
    }
}

/// Equispaced flat-detector fan-beam scanner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FanBeamGeometry {
    pub n_views: usize,
    pub angle_start_rad: f64,
    pub angle_extent_rad: f64,
    pub n_dets: usize,
    pub det_pitch_mm: f64,
    pub sod_mm: f64,
    pub sdd_mm: f64,
}

impl FanBeamGeometry {
    pub fn new(
        n_views: usize,
        angle_start_rad: f64,
        angle_extent_rad: f64,
        n_dets: usize,
        det_pitch_mm: f64,
        sod_mm: f64,
        sdd_mm: f64,
    ) -> Result<Self> {
        let g = Self {
            n_views,
            angle_start_rad,
            angle_extent_rad,
            n_dets,
            det_pitch_mm,
            sod_mm,
            sdd_mm,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 1 {
            return domain("at least one view is required");
        }
        if self.n_dets < 2 {
            return domain(format!("at least two detectors are required, got {}", self.n_dets));
        }
        if !(self.det_pitch_mm > 0.0 && self.det_pitch_mm.is_finite()) {
            return domain(format!("detector pitch must be positive, got {}", self.det_pitch_mm));
        }
        if !(self.sod_mm > 0.0 && self.sdd_mm > self.sod_mm && self.sdd_mm.is_finite()) {
            return domain(format!(
                "need sdd > sod > 0, got sod={} sdd={}",
                self.sod_mm, self.sdd_mm
            ));
        }
        if !(self.angle_extent_rad > 0.0 && self.angle_extent_rad <= 2.0 * PI + 1e-12) {
            return domain(format!("angular extent must lie in (0, 2π], got {}", self.angle_extent_rad));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_views * self.n_dets
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Angular increment between consecutive views.
    pub fn delta_beta(&self) -> f64 {
        self.angle_extent_rad / self.n_views as f64
    }

    #[inline]
    pub fn view_angle(&self, view: usize) -> f64 {
        self.angle_start_rad + view as f64 * self.delta_beta()
    }

    /// Detector-plane coordinate of the center of bin `k`.
    #[inline]
    pub fn det_u(&self, k: usize) -> f64 {
        (k as f64 + 0.5 - self.n_dets as f64 / 2.0) * self.det_pitch_mm
    }

    /// Continuous bin index of detector coordinate `u`.
    #[inline]
    pub fn det_index(&self, u: f64) -> f64 {
        u / self.det_pitch_mm + self.n_dets as f64 / 2.0 - 0.5
    }

    pub fn detector_half_width_mm(&self) -> f64 {
        self.n_dets as f64 * self.det_pitch_mm / 2.0
    }

    pub fn half_fan_angle(&self) -> f64 {
        (self.detector_half_width_mm() / self.sdd_mm).atan()
    }

    /// Radius of the circle seen by every view of the full detector.
    pub fn fov_radius_mm(&self) -> f64 {
        self.sod_mm * self.half_fan_angle().sin()
    }

    /// Whether the views cover a full turn.
    pub fn is_full_scan(&self) -> bool {
        (self.angle_extent_rad - 2.0 * PI).abs() < 1e-9
    }

    /// Errors unless the grid's inscribed disc lies within the full field of view.
    pub fn check_grid(&self, grid: &ImageGrid) -> Result<()> {
        self.validate()?;
        let r = grid.inscribed_radius_mm();
        if r > self.fov_radius_mm() * (1.0 + 1e-12) {
            return domain(format!(
                "grid inscribed radius {r:.3} mm exceeds field of view {:.3} mm",
                self.fov_radius_mm()
            ));
        }
        if grid.half_width_mm().hypot(grid.half_height_mm()) >= self.sod_mm {
            return domain("source orbit intersects the image grid");
        }
        Ok(())
    }
}

/// The reference scanner: 720 views over a full turn, 1440 detectors at 1 mm pitch,
/// 1000 mm source-to-isocenter and 1500 mm source-to-detector.
pub fn standard_geometry() -> FanBeamGeometry {
    FanBeamGeometry {
        n_views: STANDARD_VIEWS,
        angle_start_rad: 0.0,
        angle_extent_rad: 2.0 * PI,
        n_dets: STANDARD_DETS,
        det_pitch_mm: STANDARD_PITCH_MM,
        sod_mm: STANDARD_SOD_MM,
        sdd_mm: STANDARD_SDD_MM,
    }
}

/// Shrinks view and detector counts by `scale` while keeping the detector's
/// physical width, and therefore the fan angle, unchanged.
pub fn scaled_geometry(scale: f64) -> Result<FanBeamGeometry> {
    if !(scale > 0.0 && scale <= 1.0) {
        return domain(format!("scale must lie in (0, 1], got {scale}"));
    }
    let n_views = (STANDARD_VIEWS as f64 * scale).round() as usize;
    let n_dets = (STANDARD_DETS as f64 * scale).round() as usize;
    if n_views < 8 {
        return domain(format!("scale {scale} leaves only {n_views} views"));
    }
    let width = STANDARD_DETS as f64 * STANDARD_PITCH_MM;
    Ok(FanBeamGeometry {
        n_views,
        n_dets,
        det_pitch_mm: width / n_dets as f64,
        ..standard_geometry()
    })
}

/// Binary projection-domain mask selecting the measured detectors of each view.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMask {
    n_views: usize,
    n_dets: usize,
    values: Vec<u8>,
}

impl ProjectionMask {
    /// Builds a mask whose rows all keep the same centered span `[start, start+count)`.
    pub fn centered(n_views: usize, n_dets: usize, kept: usize) -> Result<Self> {
        if kept > n_dets || (n_dets - kept) % 2 != 0 {
            return domain(format!("cannot center {kept} kept detectors on {n_dets}"));
        }
        let start = (n_dets - kept) / 2;
        let mut values = vec![0u8; n_views * n_dets];
        for row in values.chunks_exact_mut(n_dets) {
            row[start..start + kept].fill(1);
        }
        Ok(Self { n_views, n_dets, values })
    }

    /// Validates an arbitrary field against the mask invariants.
    pub fn from_values(n_views: usize, n_dets: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != n_views * n_dets {
            return domain("mask length does not match its dimensions");
        }
        if values.iter().any(|&v| v > 1) {
            return domain("mask values must be 0 or 1");
        }
        let first = &values[..n_dets];
        if values.chunks_exact(n_dets).any(|row| row != first) {
            return domain("all mask rows must be identical");
        }
        let kept: usize = first.iter().map(|&v| v as usize).sum();
        let m = Self::centered(n_views, n_dets, kept)?;
        if m.values != values {
            return domain("kept span must be contiguous and centered");
        }
        Ok(m)
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_dets(&self) -> usize {
        self.n_dets
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn kept_count(&self) -> usize {
        self.values[..self.n_dets].iter().map(|&v| v as usize).sum()
    }

    /// Half-open detector range kept in every view.
    pub fn kept_span(&self) -> std::ops::Range<usize> {
        let kept = self.kept_count();
        let start = (self.n_dets - kept) / 2;
        start..start + kept
    }

    #[inline]
    pub fn get(&self, view: usize, det: usize) -> bool {
        self.values[view * self.n_dets + det] != 0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn matches(&self, geom: &FanBeamGeometry) -> bool {
        self.n_views == geom.n_views && self.n_dets == geom.n_dets
    }
}

/// Kept detector count for a truncation ratio: round half up, then drop one
/// detector if the parity differs from the array so the span stays centered.
pub fn kept_detectors(n_dets: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return domain(format!("truncation ratio must lie in [0, 1), got {ratio}"));
    }
    let mut kept = (n_dets as f64 * (1.0 - ratio) + 0.5).floor() as usize;
    kept = kept.min(n_dets);
    if kept % 2 != n_dets % 2 {
        kept = kept.saturating_sub(1);
    }
    if kept < 2 {
        return domain(format!("truncation ratio {ratio} keeps fewer than two detectors"));
    }
    Ok(kept)
}

pub fn truncation_mask(geom: &FanBeamGeometry, ratio: f64) -> Result<ProjectionMask> {
    let kept = kept_detectors(geom.n_dets, ratio)?;
    ProjectionMask::centered(geom.n_views, geom.n_dets, kept)
}

/// Binary centered disc on the image lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMask {
    nx: usize,
    ny: usize,
    radius_mm: f64,
    values: Vec<u8>,
}

impl ImageMask {
    pub fn disc(grid: &ImageGrid, radius_mm: f64) -> Result<Self> {
        if !(radius_mm > 0.0) {
            return domain(format!("ROI radius must be positive, got {radius_mm}"));
        }
        let mut values = vec![0u8; grid.len()];
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (x, y) = grid.pixel_center(ix, iy);
                if x.hypot(y) < radius_mm {
                    values[iy * grid.nx + ix] = 1;
                }
            }
        }
        Ok(Self { nx: grid.nx, ny: grid.ny, radius_mm, values })
    }

    /// Mask selecting every pixel.
    pub fn full(grid: &ImageGrid) -> Self {
        Self {
            nx: grid.nx,
            ny: grid.ny,
            radius_mm: f64::INFINITY,
            values: vec![1; grid.len()],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn radius_mm(&self) -> f64 {
        self.radius_mm
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn matches(&self, grid: &ImageGrid) -> bool {
        self.nx == grid.nx && self.ny == grid.ny
    }
}

/// Radius of the region every view measures through the kept detector span.
pub fn roi_radius(geom: &FanBeamGeometry, mask: &ProjectionMask) -> Result<f64> {
    if !mask.matches(geom) {
        return config("projection mask does not match the geometry");
    }
    let kept = mask.kept_count();
    if kept == 0 {
        return domain("kept detector span is empty");
    }
    let w = kept as f64 * geom.det_pitch_mm / 2.0;
    Ok(geom.sod_mm * (w / geom.sdd_mm).atan().sin())
}

pub fn roi_mask(grid: &ImageGrid, geom: &FanBeamGeometry, mask: &ProjectionMask) -> Result<ImageMask> {
    ImageMask::disc(grid, roi_radius(geom, mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_values() {
        let g = standard_geometry();
        assert_eq!((g.n_views, g.n_dets), (720, 1440));
        assert_eq!(g.det_pitch_mm, 1.0);
        assert_eq!((g.sod_mm, g.sdd_mm), (1000.0, 1500.0));
        assert_eq!(g.angle_start_rad, 0.0);
        assert!((g.angle_extent_rad - 2.0 * PI).abs() < 1e-15);
        g.check_grid(&ImageGrid::standard()).unwrap();
    }

    #[test]
    fn scaled_quarter() {
        let g = scaled_geometry(0.25).unwrap();
        assert_eq!((g.n_views, g.n_dets), (180, 360));
        assert_eq!(g.det_pitch_mm, 4.0);
        let expected = (720.0f64 / 1500.0).atan();
        assert!((g.half_fan_angle() - expected).abs() < 1e-12);
        g.check_grid(&ImageGrid::standard_extent(128).unwrap()).unwrap();
    }

    #[test]
    fn scaled_identity_and_errors() {
        assert_eq!(scaled_geometry(1.0).unwrap(), standard_geometry());
        assert!(scaled_geometry(0.0).is_err());
        assert!(scaled_geometry(1.5).is_err());
        assert!(scaled_geometry(0.005).is_err());
    }

    #[test]
    fn scaled_preserves_fan_angle() {
        let reference = standard_geometry().half_fan_angle();
        for s in [0.125, 0.25, 0.5, 1.0] {
            let a = scaled_geometry(s).unwrap().half_fan_angle();
            assert!(((a - reference) / reference).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_rule() {
        let g = standard_geometry();
        let full = truncation_mask(&g, 0.0).unwrap();
        assert!(full.values().iter().all(|&v| v == 1));
        let m = truncation_mask(&g, 0.58).unwrap();
        assert_eq!(m.kept_count(), 604);
        assert_eq!(m.kept_span(), 418..1022);
        assert!(truncation_mask(&g, 0.9999).is_err());
        assert!(truncation_mask(&g, 1.0).is_err());
        assert!(truncation_mask(&g, -0.1).is_err());
    }

    #[test]
    fn truncation_monotone() {
        let g = scaled_geometry(0.25).unwrap();
        let ratios: Vec<f64> = (0..100).map(|i| i as f64 * 0.0099).collect();
        for w in ratios.windows(2) {
            let a = truncation_mask(&g, w[0]).unwrap();
            let b = truncation_mask(&g, w[1]).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!(x >= y, "kept({}) must contain kept({})", w[0], w[1]);
            }
        }
    }

    #[test]
    fn roi_radius_closed_form() {
        let g = standard_geometry();
        let m = truncation_mask(&g, 0.58).unwrap();
        let mu = roi_radius(&g, &m).unwrap();
        let expected = 1000.0 * (302.0f64 / 1500.0).atan().sin();
        assert!((mu - expected).abs() < 1e-9);
        assert!((mu - 197.4).abs() < 0.05);
    }

    #[test]
    fn roi_full_detector_is_fov() {
        let g = scaled_geometry(0.25).unwrap();
        let grid = ImageGrid::standard_extent(128).unwrap();
        let m = truncation_mask(&g, 0.0).unwrap();
        let roi = roi_mask(&grid, &g, &m).unwrap();
        assert!((roi.radius_mm() - g.fov_radius_mm()).abs() < 1e-9);
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (x, y) = grid.pixel_center(ix, iy);
                if x.hypot(y) < g.fov_radius_mm() {
                    assert_eq!(roi.values()[iy * grid.nx + ix], 1);
                }
            }
        }
    }

    #[test]
    fn roi_radius_strictly_decreasing() {
        let g = standard_geometry();
        let mut last = f64::INFINITY;
        for i in 0..40 {
            let r = i as f64 * 0.02;
            let mu = roi_radius(&g, &truncation_mask(&g, r).unwrap()).unwrap();
            assert!(mu < last);
            last = mu;
        }
    }

    #[test]
    fn masks_are_idempotent() {
        let g = scaled_geometry(0.25).unwrap();
        let grid = ImageGrid::standard_extent(128).unwrap();
        let t = truncation_mask(&g, 0.5).unwrap();
        assert!(t.values().iter().all(|&v| v * v == v));
        let i = roi_mask(&grid, &g, &t).unwrap();
        assert!(i.values().iter().all(|&v| v * v == v));
    }

    #[test]
    fn mask_validation() {
        let m = ProjectionMask::from_values(2, 4, vec![0, 1, 1, 0, 0, 1, 1, 0]).unwrap();
        assert_eq!(m.kept_span(), 1..3);
        assert!(ProjectionMask::from_values(2, 4, vec![1, 1, 0, 0, 1, 1, 0, 0]).is_err());
        assert!(ProjectionMask::from_values(2, 4, vec![0, 1, 1, 0, 1, 1, 1, 1]).is_err());
        assert!(ProjectionMask::from_values(1, 4, vec![0, 2, 1, 0]).is_err());
        let empty = ProjectionMask::from_values(1, 4, vec![0; 4]).unwrap();
        assert!(roi_radius(&scaled_geometry(1.0).unwrap(), &empty).is_err());
    }

    #[test]
    fn fov_rejects_oversized_grid() {
        let g = scaled_geometry(0.25).unwrap();
        assert!(g.check_grid(&ImageGrid::new(256, 256, 4.0).unwrap()).is_err());
    }
}
