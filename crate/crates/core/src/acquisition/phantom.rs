use std::f64::consts::PI;

use rand::Rng;

use crate::error::{domain, Result};
use crate::geometry::ImageGrid;
use crate::projector::{Image, ImageRole};

/// An ellipse in coordinates normalized to the grid half-extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub angle_rad: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_rad.sin_cos();
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.semi_x).powi(2) + (yr / self.semi_y).powi(2) <= 1.0
    }
}

/// Modified Shepp-Logan ellipse table (intensities rescaled to a [0, 1] range).
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    e(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    e(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    e(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    e(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    e(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    e(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    e(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    e(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    e(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    e(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

const fn e(intensity: f64, semi_x: f64, semi_y: f64, center_x: f64, center_y: f64, deg: f64) -> Ellipse {
    Ellipse { intensity, semi_x, semi_y, center_x, center_y, angle_rad: deg * PI / 180.0 }
}

/// Rasterizes a sum of ellipses at pixel centers.
pub fn render_ellipses(grid: &ImageGrid, ellipses: &[Ellipse]) -> Image {
    let (hw, hh) = (grid.half_width_mm(), grid.half_height_mm());
    let mut values = vec![0.0; grid.len()];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, y) = grid.pixel_center(ix, iy);
            let (xn, yn) = (x / hw, y / hh);
            values[iy * grid.nx + ix] = ellipses
                .iter()
                .filter(|el| el.contains(xn, yn))
                .map(|el| el.intensity)
                .sum();
        }
    }
    Image { grid: *grid, values, role: ImageRole::GroundTruth }
}

pub fn shepp_logan(grid: &ImageGrid) -> Image {
    let mut img = render_ellipses(grid, &SHEPP_LOGAN);
    // Overlapping tables can round a hair below zero.
    for v in &mut img.values {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Intensity of the fixed body ellipse that hosts the random inserts.
pub const BODY_INTENSITY: f64 = 0.2;
pub const BODY_SEMI_AXES: (f64, f64) = (0.9, 0.72);

pub fn random_ellipse_phantom<R: Rng + ?Sized>(grid: &ImageGrid, rng: &mut R, n_ellipses: usize) -> Result<Image> {
    if n_ellipses == 0 {
        return domain("at least one random ellipse is required");
    }
    let mut ellipses = vec![Ellipse {
        intensity: BODY_INTENSITY,
        semi_x: BODY_SEMI_AXES.0,
        semi_y: BODY_SEMI_AXES.1,
        center_x: 0.0,
        center_y: 0.0,
        angle_rad: 0.0,
    }];
    for _ in 0..n_ellipses {
        // Centers uniformly inside the inner 75% of the body.
        let (cx, cy) = loop {
            let x: f64 = rng.random_range(-1.0..1.0);
            let y: f64 = rng.random_range(-1.0..1.0);
            if x * x + y * y <= 1.0 {
                break (0.75 * BODY_SEMI_AXES.0 * x, 0.75 * BODY_SEMI_AXES.1 * y);
            }
        };
        ellipses.push(Ellipse {
            intensity: rng.random_range(-0.3..0.5),
            semi_x: rng.random_range(0.04..0.25),
            semi_y: rng.random_range(0.04..0.25),
            center_x: cx,
            center_y: cy,
            angle_rad: rng.random_range(0.0..PI),
        });
    }
    let mut img = render_ellipses(grid, &ellipses);
    for v in &mut img.values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Centered uniform disc with `supersample`² samples per pixel for partial-volume edges.
pub fn disc_phantom(grid: &ImageGrid, radius_mm: f64, value: f64, supersample: usize) -> Image {
    disc_at(grid, (0.0, 0.0), radius_mm, value, supersample)
}

pub fn disc_at(grid: &ImageGrid, center: (f64, f64), radius_mm: f64, value: f64, supersample: usize) -> Image {
    let s = supersample.max(1);
    let d = grid.pixel_size_mm;
    let mut values = vec![0.0; grid.len()];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, y) = grid.pixel_center(ix, iy);
            let mut hits = 0usize;
            for sy in 0..s {
                for sx in 0..s {
                    let px = x + ((sx as f64 + 0.5) / s as f64 - 0.5) * d - center.0;
                    let py = y + ((sy as f64 + 0.5) / s as f64 - 0.5) * d - center.1;
                    if px.hypot(py) < radius_mm {
                        hits += 1;
                    }
                }
            }
            values[iy * grid.nx + ix] = value * hits as f64 / (s * s) as f64;
        }
    }
    Image { grid: *grid, values, role: ImageRole::GroundTruth }
}
