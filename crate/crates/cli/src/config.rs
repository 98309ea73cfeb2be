//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use ctdl_core::acquisition::{DatasetConfig, DoseMode, PhantomKind, RatioMode, Split, BODY_INTENSITY};
use ctdl_core::baselines::TvConfig;
use ctdl_core::geometry::{scaled_geometry, FanBeamGeometry, ImageGrid};
use ctdl_core::pipelines::{parse_reduction, ArchitectureKind, LossOptions, TrainConfig};
use ctdl_core::{Error, Result};

/// Every accepted key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("grid.nx", "image width in pixels"),
    ("grid.ny", "image height in pixels (default: grid.nx)"),
    ("grid.pixel_mm", "pixel size in mm (default: 512 mm / grid.nx)"),
    ("geom.scale", "view and detector count relative to the 720x1440 reference scanner"),
    ("geom.views", "number of views (overrides the scaled count)"),
    ("geom.dets", "number of detectors (overrides the scaled count)"),
    ("geom.pitch_mm", "detector pitch in mm (overrides the scaled pitch)"),
    ("geom.sod_mm", "source to isocenter distance in mm"),
    ("geom.sdd_mm", "source to detector distance in mm"),
    ("sim.i0", "incident photons per ray; a comma list, `inf` for noise-free"),
    ("sim.ratio", "truncation ratio in [0, 1); a comma list"),
    ("sim.seed", "base random seed"),
    ("sim.schedule_mode", "fixed (use sim.ratio/sim.i0), schedule or enumerate"),
    ("sim.phantom", "shepp-logan or ellipses"),
    ("sim.ellipses", "inner ellipses per random phantom"),
    ("sim.attenuation", "attenuation in 1/mm per unit phantom intensity"),
    ("sim.train_phantoms", "phantoms in the training set"),
    ("sim.val_phantoms", "phantoms in the validation set (0 disables validation)"),
    ("sim.test_phantoms", "phantoms in the test set"),
    ("train.arch", "unet, projection, wnet or dualnet"),
    ("train.depth", "encoder levels"),
    ("train.base_channels", "channels at the first level"),
    ("train.width_factor", "channel multiplier of the single image U-Net"),
    ("train.lr", "initial learning rate"),
    ("train.batch", "minibatch size"),
    ("train.epochs", "training epochs"),
    ("train.flip", "random vertical flips"),
    ("train.detach_h", "stop gradients into the noise head through the image loss"),
    ("train.stage_barrier", "train the two stages of a cascade independently"),
    ("train.zero_heads", "initialise output heads to zero so training starts from plain FBP"),
    ("train.reduction", "mean or sum"),
    ("train.seed", "initialisation and shuffling seed (default: sim.seed)"),
    ("tv.lambda", "TV weight"),
    ("tv.iters", "TV iterations"),
    ("render.low_hu", "display window low end in HU"),
    ("render.high_hu", "display window high end in HU"),
    ("render.mu_water", "attenuation of water in 1/mm (default: body intensity times sim.attenuation)"),
    ("diag.window", "samples of each flattened feature map lifted to a Hankel matrix"),
    ("diag.pencil", "Hankel matrix columns"),
    ("diag.samples", "probe inputs per model"),
    ("paths.out_dir", "directory receiving every output file"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    Fixed,
    Schedule,
    Enumerate,
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "schedule" => Ok(Self::Schedule),
            "enumerate" => Ok(Self::Enumerate),
            _ => Err(Error::Config(format!("unknown schedule mode '{s}' (expected fixed, schedule or enumerate)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomChoice {
    SheppLogan,
    Ellipses,
}

impl FromStr for PhantomChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan" => Ok(Self::SheppLogan),
            "ellipses" => Ok(Self::Ellipses),
            _ => Err(Error::Config(format!("unknown phantom kind '{s}' (expected shepp-logan or ellipses)"))),
        }
    }
}

impl fmt::Display for PhantomChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SheppLogan => "shepp-logan",
            Self::Ellipses => "ellipses",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub grid_nx: usize,
    pub grid_ny: Option<usize>,
    pub grid_pixel_mm: Option<f64>,
    pub geom_scale: f64,
    pub geom_views: Option<usize>,
    pub geom_dets: Option<usize>,
    pub geom_pitch_mm: Option<f64>,
    pub geom_sod_mm: Option<f64>,
    pub geom_sdd_mm: Option<f64>,
    pub sim_i0: Vec<f64>,
    pub sim_ratio: Vec<f64>,
    pub sim_seed: u64,
    pub sim_schedule_mode: ScheduleMode,
    pub sim_phantom: PhantomChoice,
    pub sim_ellipses: usize,
    pub sim_attenuation: f64,
    pub sim_train_phantoms: usize,
    pub sim_val_phantoms: usize,
    pub sim_test_phantoms: usize,
    pub train_arch: ArchitectureKind,
    pub train_depth: usize,
    pub train_base_channels: usize,
    pub train_width_factor: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_epochs: usize,
    pub train_flip: bool,
    pub train_detach_h: bool,
    pub train_stage_barrier: bool,
    pub train_zero_heads: bool,
    pub train_reduction: String,
    pub train_seed: Option<u64>,
    pub tv_lambda: f64,
    pub tv_iters: usize,
    pub render_low_hu: f64,
    pub render_high_hu: f64,
    pub render_mu_water: Option<f64>,
    pub diag_window: usize,
    pub diag_pencil: usize,
    pub diag_samples: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid_nx: 64,
            grid_ny: None,
            grid_pixel_mm: None,
            geom_scale: 0.125,
            geom_views: None,
            geom_dets: None,
            geom_pitch_mm: None,
            geom_sod_mm: None,
            geom_sdd_mm: None,
            sim_i0: vec![1e6],
            sim_ratio: vec![0.0],
            sim_seed: 0,
            sim_schedule_mode: ScheduleMode::Fixed,
            sim_phantom: PhantomChoice::Ellipses,
            sim_ellipses: 6,
            sim_attenuation: 0.02,
            sim_train_phantoms: 32,
            sim_val_phantoms: 8,
            sim_test_phantoms: 8,
            train_arch: ArchitectureKind::DualNet,
            train_depth: 3,
            train_base_channels: 8,
            train_width_factor: 2,
            train_lr: 1e-3,
            train_batch: 4,
            train_epochs: 10,
            train_flip: true,
            train_detach_h: true,
            train_stage_barrier: true,
            train_zero_heads: true,
            train_reduction: "mean".into(),
            train_seed: None,
            tv_lambda: 1.0,
            tv_iters: 100,
            render_low_hu: -150.0,
            render_high_hu: 400.0,
            render_mu_water: None,
            diag_window: 64,
            diag_pencil: 32,
            diag_samples: 4,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn number(key: &str, v: &str) -> Result<f64> {
    match v.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "∞" => Ok(f64::INFINITY),
        _ => value(key, v),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|t| number(key, t.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{v}' for {key} (expected true or false)"))),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "grid.nx" => self.grid_nx = value(key, v)?,
            "grid.ny" => self.grid_ny = Some(value(key, v)?),
            "grid.pixel_mm" => self.grid_pixel_mm = Some(value(key, v)?),
            "geom.scale" => self.geom_scale = value(key, v)?,
            "geom.views" => self.geom_views = Some(value(key, v)?),
            "geom.dets" => self.geom_dets = Some(value(key, v)?),
            "geom.pitch_mm" => self.geom_pitch_mm = Some(value(key, v)?),
            "geom.sod_mm" => self.geom_sod_mm = Some(value(key, v)?),
            "geom.sdd_mm" => self.geom_sdd_mm = Some(value(key, v)?),
            "sim.i0" => self.sim_i0 = list(key, v)?,
            "sim.ratio" => self.sim_ratio = list(key, v)?,
            "sim.seed" => self.sim_seed = value(key, v)?,
            "sim.schedule_mode" => self.sim_schedule_mode = v.parse()?,
            "sim.phantom" => self.sim_phantom = v.parse()?,
            "sim.ellipses" => self.sim_ellipses = value(key, v)?,
            "sim.attenuation" => self.sim_attenuation = value(key, v)?,
            "sim.train_phantoms" => self.sim_train_phantoms = value(key, v)?,
            "sim.val_phantoms" => self.sim_val_phantoms = value(key, v)?,
            "sim.test_phantoms" => self.sim_test_phantoms = value(key, v)?,
            "train.arch" => self.train_arch = v.parse()?,
            "train.depth" => self.train_depth = value(key, v)?,
            "train.base_channels" => self.train_base_channels = value(key, v)?,
            "train.width_factor" => self.train_width_factor = value(key, v)?,
            "train.lr" => self.train_lr = value(key, v)?,
            "train.batch" => self.train_batch = value(key, v)?,
            "train.epochs" => self.train_epochs = value(key, v)?,
            "train.flip" => self.train_flip = flag(key, v)?,
            "train.detach_h" => self.train_detach_h = flag(key, v)?,
            "train.stage_barrier" => self.train_stage_barrier = flag(key, v)?,
            "train.zero_heads" => self.train_zero_heads = flag(key, v)?,
            "train.reduction" => {
                parse_reduction(v)?;
                self.train_reduction = v.to_string();
            }
            "train.seed" => self.train_seed = Some(value(key, v)?),
            "tv.lambda" => self.tv_lambda = value(key, v)?,
            "tv.iters" => self.tv_iters = value(key, v)?,
            "render.low_hu" => self.render_low_hu = value(key, v)?,
            "render.high_hu" => self.render_high_hu = value(key, v)?,
            "render.mu_water" => self.render_mu_water = Some(value(key, v)?),
            "diag.window" => self.diag_window = value(key, v)?,
            "diag.pencil" => self.diag_pencil = value(key, v)?,
            "diag.samples" => self.diag_samples = value(key, v)?,
            "paths.out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Parses config text: one `key = value` per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Image grid with `nx×ny` pixels, using `grid.pixel_mm` when set.
    pub fn grid_with(&self, nx: usize, ny: usize) -> Result<ImageGrid> {
        ImageGrid::new(nx, ny, self.grid_pixel_mm.unwrap_or(512.0 / nx as f64)).map_err(to_config)
    }

    pub fn grid(&self) -> Result<ImageGrid> {
        self.grid_with(self.grid_nx, self.grid_ny.unwrap_or(self.grid_nx))
    }

    pub fn geometry(&self) -> Result<FanBeamGeometry> {
        let mut g = scaled_geometry(self.geom_scale).map_err(to_config)?;
        let width = g.n_dets as f64 * g.det_pitch_mm;
        if let Some(v) = self.geom_views {
            g.n_views = v;
        }
        if let Some(d) = self.geom_dets {
            g.n_dets = d;
            g.det_pitch_mm = width / d as f64;
        }
        if let Some(p) = self.geom_pitch_mm {
            g.det_pitch_mm = p;
        }
        if let Some(s) = self.geom_sod_mm {
            g.sod_mm = s;
        }
        if let Some(s) = self.geom_sdd_mm {
            g.sdd_mm = s;
        }
        g.validate().map_err(to_config)?;
        Ok(g)
    }

    /// The single (ratio, i0) pair used by one-off simulation.
    pub fn single_scan(&self) -> Result<(f64, f64)> {
        match (&self.sim_ratio[..], &self.sim_i0[..]) {
            ([r], [d]) => Ok((*r, *d)),
            _ => Err(Error::Config("sim.ratio and sim.i0 must each hold a single value here".into())),
        }
    }

    pub fn dataset(&self, split: Split) -> Result<(DatasetConfig, u64)> {
        let n_phantoms = match split {
            Split::Train => self.sim_train_phantoms,
            Split::Val => self.sim_val_phantoms,
            Split::Test => self.sim_test_phantoms,
        };
        let (ratios, dose) = match self.sim_schedule_mode {
            ScheduleMode::Fixed => (RatioMode::Choice(self.sim_ratio.clone()), DoseMode::Choice(self.sim_i0.clone())),
            ScheduleMode::Schedule => (RatioMode::Schedule, DoseMode::Schedule),
            ScheduleMode::Enumerate => (RatioMode::Enumerate, DoseMode::Schedule),
        };
        let cfg = DatasetConfig {
            grid: self.grid()?,
            geom: self.geometry()?,
            n_phantoms,
            phantom: self.phantom_kind(),
            ratios,
            dose,
            flip: false,
            attenuation_scale: self.sim_attenuation,
            split,
        };
        let offset = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        Ok((cfg, self.sim_seed.wrapping_add(offset)))
    }

    pub fn phantom_kind(&self) -> PhantomKind {
        match self.sim_phantom {
            PhantomChoice::SheppLogan => PhantomKind::SheppLogan,
            PhantomChoice::Ellipses => PhantomKind::RandomEllipses { n_ellipses: self.sim_ellipses },
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            arch: self.train_arch,
            base_channels: self.train_base_channels,
            depth: self.train_depth,
            unet_width_factor: self.train_width_factor,
            epochs: self.train_epochs,
            batch_size: self.train_batch,
            lr: self.train_lr,
            flip: self.train_flip,
            loss: LossOptions {
                reduction: parse_reduction(&self.train_reduction)?,
                detach_noise: self.train_detach_h,
                stage_barrier: self.train_stage_barrier,
            },
            zero_heads: self.train_zero_heads,
            seed: self.train_seed.unwrap_or(self.sim_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tv_config(&self) -> Result<TvConfig> {
        let cfg = TvConfig { lambda: self.tv_lambda, n_iters: self.tv_iters, ..TvConfig::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mu_water(&self) -> f64 {
        self.render_mu_water.unwrap_or(BODY_INTENSITY * self.sim_attenuation)
    }

    /// `name` resolved inside the output directory. Absolute names and
    /// names that climb out of the directory are refused.
    pub fn output(&self, name: &str) -> Result<PathBuf> {
        let rel = Path::new(name);
        if name.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(Error::Config(format!("output name '{name}' must be a relative path inside paths.out_dir")));
        }
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::Config(format!("cannot create {}: {e}", parent.display())))?;
        }
        Ok(path)
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}
