//! Shared inputs for the benchmarks.

use ctdl_core::acquisition::{build_dataset, Dataset, DatasetConfig, DoseMode, PhantomKind, RatioMode, Split};
use ctdl_core::geometry::scaled_geometry;
use ctdl_core::ImageGrid;

/// `n` random-ellipse samples on an `nx×nx` grid with the scanner scaled by
/// `scale`, 40% truncation and 1e5 photons per ray.
pub fn dataset(nx: usize, scale: f64, n: usize) -> Dataset {
    let cfg = DatasetConfig {
        grid: ImageGrid::standard_extent(nx).expect("grid"),
        geom: scaled_geometry(scale).expect("geometry"),
        n_phantoms: n,
        phantom: PhantomKind::RandomEllipses { n_ellipses: 6 },
        ratios: RatioMode::Choice(vec![0.4]),
        dose: DoseMode::Choice(vec![1e5]),
        flip: false,
        attenuation_scale: 0.02,
        split: Split::Train,
    };
    build_dataset(&cfg, 0).expect("dataset")
}
