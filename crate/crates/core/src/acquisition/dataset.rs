use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::noise::{sample_i0, simulate_low_dose, TRUNCATION_SCHEDULE};
use super::phantom::{random_ellipse_phantom, shepp_logan};
use crate::error::{config, Result};
use crate::geometry::{roi_mask, truncation_mask, FanBeamGeometry, ImageGrid, ImageMask, ProjectionMask};
use crate::projector::{forward_project, Image, ImageRole, Sinogram};

/// One training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Ground-truth attenuation map.
    pub f: Image,
    /// Noise-free full sinogram.
    pub y: Sinogram,
    /// Noisy sinogram with unmeasured detectors set to zero.
    pub p: Sinogram,
    pub truncation: ProjectionMask,
    pub roi: ImageMask,
    /// Incident photons per ray; `f64::INFINITY` for noise-free data.
    pub i0: f64,
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses { n_ellipses: usize },
}

/// How truncation ratios are assigned to samples.
#[derive(Clone, Debug, PartialEq)]
pub enum RatioMode {
    /// One draw per phantom from the seven-entry schedule.
    Schedule,
    /// Every schedule entry once per phantom (sevenfold expansion).
    Enumerate,
    /// Uniform pick from a list.
    Choice(Vec<f64>),
}

/// How incident photon counts are assigned to samples.
#[derive(Clone, Debug, PartialEq)]
pub enum DoseMode {
    /// `10^U(5, 8)`.
    Schedule,
    Choice(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub grid: ImageGrid,
    pub geom: FanBeamGeometry,
    pub n_phantoms: usize,
    pub phantom: PhantomKind,
    pub ratios: RatioMode,
    pub dose: DoseMode,
    /// Mirror each phantom top-to-bottom with probability 1/2 before projection.
    pub flip: bool,
    /// Attenuation (mm⁻¹) per unit phantom intensity.
    pub attenuation_scale: f64,
    pub split: Split,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.geom.check_grid(&self.grid).map_err(|e| crate::Error::Config(e.to_string()))?;
        if self.n_phantoms == 0 {
            return config("dataset needs at least one phantom");
        }
        if !(self.attenuation_scale > 0.0 && self.attenuation_scale.is_finite()) {
            return config("attenuation scale must be positive");
        }
        if let PhantomKind::RandomEllipses { n_ellipses: 0 } = self.phantom {
            return config("random phantoms need at least one ellipse");
        }
        match &self.ratios {
            RatioMode::Choice(v) if v.is_empty() => return config("empty ratio list"),
            RatioMode::Choice(v) if v.iter().any(|r| !(0.0..1.0).contains(r)) => {
                return config("ratios must lie in [0, 1)")
            }
            _ => {}
        }
        match &self.dose {
            DoseMode::Choice(v) if v.is_empty() => return config("empty dose list"),
            DoseMode::Choice(v) if v.iter().any(|&d| !(d > 0.0)) => return config("doses must be positive"),
            _ => {}
        }
        Ok(())
    }

    fn slots_per_phantom(&self) -> usize {
        match self.ratios {
            RatioMode::Enumerate => TRUNCATION_SCHEDULE.len(),
            _ => 1,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.n_phantoms * self.slots_per_phantom()
    }
}

/// Independent stream per (seed, index) so results do not depend on scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PHANTOM_STREAM_BASE: u64 = 1 << 40;

pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let slots = cfg.slots_per_phantom();

    let phantoms: Vec<Image> = (0..cfg.n_phantoms)
        .into_par_iter()
        .map(|j| -> Result<Image> {
            let mut rng = stream_rng(seed, PHANTOM_STREAM_BASE + j as u64);
            let mut img = match cfg.phantom {
                PhantomKind::SheppLogan => shepp_logan(&cfg.grid),
                PhantomKind::RandomEllipses { n_ellipses } => random_ellipse_phantom(&cfg.grid, &mut rng, n_ellipses)?,
            };
            if cfg.flip && rng.random_bool(0.5) {
                img = img.flip_vertical();
            }
            img.values.iter_mut().for_each(|v| *v *= cfg.attenuation_scale);
            Ok(img.with_role(ImageRole::GroundTruth))
        })
        .collect::<Result<_>>()?;

    let clean: Vec<Sinogram> = phantoms
        .par_iter()
        .map(|f| forward_project(f, &cfg.geom))
        .collect::<Result<_>>()?;

    let samples = (0..cfg.sample_count())
        .into_par_iter()
        .map(|idx| {
            let (j, slot) = (idx / slots, idx % slots);
            let mut rng = stream_rng(seed, idx as u64);
            let ratio = match &cfg.ratios {
                RatioMode::Schedule => super::sample_truncation_ratio(&mut rng),
                RatioMode::Enumerate => TRUNCATION_SCHEDULE[slot].sample(&mut rng),
                RatioMode::Choice(v) => v[rng.random_range(0..v.len())],
            };
            let i0 = match &cfg.dose {
                DoseMode::Schedule => sample_i0(&mut rng),
                DoseMode::Choice(v) => v[rng.random_range(0..v.len())],
            };
            make_sample(&phantoms[j], &clean[j], ratio, i0, &mut rng)
        })
        .collect::<Result<_>>()?;

    Ok(Dataset { samples, seed, split: cfg.split })
}

/// Simulates one measurement of `f` whose noise-free sinogram is `y`.
pub fn make_sample<R: Rng + ?Sized>(f: &Image, y: &Sinogram, ratio: f64, i0: f64, rng: &mut R) -> Result<Sample> {
    let truncation = truncation_mask(&y.geom, ratio)?;
    let roi = roi_mask(&f.grid, &y.geom, &truncation)?;
    let mut p = simulate_low_dose(y, i0, rng)?;
    for (v, &m) in p.values.iter_mut().zip(truncation.values()) {
        if m == 0 {
            *v = 0.0;
        }
    }
    Ok(Sample { f: f.clone(), y: y.clone(), p, truncation, roi, i0, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scaled_geometry;

    fn small_cfg(ratios: RatioMode) -> DatasetConfig {
        DatasetConfig {
            grid: ImageGrid::standard_extent(32).unwrap(),
            geom: FanBeamGeometry { n_views: 16, ..scaled_geometry(0.05).unwrap() },
            n_phantoms: 4,
            phantom: PhantomKind::RandomEllipses { n_ellipses: 3 },
            ratios,
            dose: DoseMode::Schedule,
            flip: true,
            attenuation_scale: 0.05,
            split: Split::Train,
        }
    }

    #[test]
    fn enumerate_expands_sevenfold() {
        let ds = build_dataset(&small_cfg(RatioMode::Enumerate), 11).unwrap();
        assert_eq!(ds.len(), 28);
        assert_eq!(ds.samples[2].ratio, 0.58);
        assert_eq!(ds.samples[7 + 6].ratio, 0.83);
    }

    #[test]
    fn masked_entries_are_zero_and_masks_consistent() {
        let cfg = small_cfg(RatioMode::Choice(vec![0.0, 0.4, 0.6]));
        let ds = build_dataset(&cfg, 3).unwrap();
        for s in &ds.samples {
            for (v, &m) in s.p.values.iter().zip(s.truncation.values()) {
                assert!(m == 1 || *v == 0.0);
            }
            assert_eq!(s.truncation, truncation_mask(&cfg.geom, s.ratio).unwrap());
            assert_eq!(s.roi, roi_mask(&cfg.grid, &cfg.geom, &s.truncation).unwrap());
            assert!((1e5..=1e8).contains(&s.i0));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small_cfg(RatioMode::Schedule);
        assert_eq!(build_dataset(&cfg, 99).unwrap(), build_dataset(&cfg, 99).unwrap());
        assert_ne!(build_dataset(&cfg, 99).unwrap(), build_dataset(&cfg, 100).unwrap());
    }

    #[test]
    fn config_errors() {
        let mut cfg = small_cfg(RatioMode::Schedule);
        cfg.n_phantoms = 0;
        assert!(matches!(build_dataset(&cfg, 0), Err(crate::Error::Config(_))));
        let mut cfg = small_cfg(RatioMode::Choice(vec![]));
        assert!(build_dataset(&cfg, 0).is_err());
        cfg.ratios = RatioMode::Choice(vec![1.2]);
        assert!(build_dataset(&cfg, 0).is_err());
        cfg.ratios = RatioMode::Schedule;
        cfg.grid = ImageGrid::new(32, 32, 40.0).unwrap();
        assert!(matches!(build_dataset(&cfg, 0), Err(crate::Error::Config(_))));
    }
}
