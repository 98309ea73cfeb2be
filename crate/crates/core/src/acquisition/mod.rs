//! Phantoms, low-dose and truncated measurement simulation, and datasets.

mod dataset;
mod noise;
mod phantom;

pub use dataset::{
    build_dataset, make_sample, stream_rng, Dataset, DatasetConfig, DoseMode, PhantomKind, RatioMode, Sample, Split,
};
pub use noise::{sample_i0, sample_truncation_ratio, simulate_low_dose, RatioEntry, TRUNCATION_SCHEDULE};
pub use phantom::{
    disc_at, disc_phantom, random_ellipse_phantom, render_ellipses, shepp_logan, Ellipse, BODY_INTENSITY,
    BODY_SEMI_AXES, SHEPP_LOGAN,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::io::Container;
use crate::projector::Image;

/// Reads a 2-D container (`[ny, nx]`) into an image on `grid`.
pub fn ingest_raw_image(path: impl AsRef<Path>, grid: &ImageGrid) -> Result<Image> {
    let c = Container::read(path)?;
    if c.dims != [grid.ny, grid.nx] {
        return Err(Error::Format(format!(
            "image dims {:?} do not match grid {}x{}",
            c.dims, grid.ny, grid.nx
        )));
    }
    if c.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("image contains non-finite values".into()));
    }
    Image::from_values(*grid, c.to_f64())
}

/// Writes an image as a 2-D container.
pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    Container::from_f64(vec![img.grid.ny, img.grid.nx], &img.values)?.write(path)
}
