//! Subcommand implementations. Each writes only below `paths.out_dir`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ctdl_core::acquisition::{
    build_dataset, make_sample, random_ellipse_phantom, shepp_logan, stream_rng, Dataset, Sample, Split,
};
use ctdl_core::baselines::{extrapolate_sinogram, tv_reconstruct, TvStatus};
use ctdl_core::diagnostics::{singular_spectrum, spectrum_area, MetricOptions, MetricsReport, Region};
use ctdl_core::geometry::{roi_mask, FanBeamGeometry, ImageGrid, ProjectionMask};
use ctdl_core::pipelines::{load_checkpoint, load_session, save_session, TrainedModel, TrainingSession};
use ctdl_core::projector::{fbp, forward_project, Image, Sinogram};
use ctdl_core::{Container, Error, Result};

use crate::config::{ExperimentConfig, PhantomChoice};

const PHANTOM_STREAM: u64 = 5 << 40;
const SIMULATE_STREAM: u64 = 6 << 40;

fn read_container(path: &Path) -> Result<Container> {
    Container::read(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Reads a 2-D image container; the grid takes its size from the file.
pub fn read_image(cfg: &ExperimentConfig, path: &Path) -> Result<Image> {
    let c = read_container(path)?;
    let [ny, nx] = c.dims[..] else {
        return Err(Error::Format(format!("{} is not a 2-D image", path.display())));
    };
    Image::from_values(cfg.grid_with(nx, ny)?, c.to_f64())
}

pub fn read_sinogram(path: &Path, geom: &FanBeamGeometry) -> Result<Sinogram> {
    let c = read_container(path)?;
    if c.dims != [geom.n_views, geom.n_dets] {
        return Err(Error::Config(format!(
            "{} has dims {:?}, the geometry needs [{}, {}]",
            path.display(),
            c.dims,
            geom.n_views,
            geom.n_dets
        )));
    }
    Sinogram::from_values(*geom, c.to_f64())
}

pub fn read_mask(path: &Path, geom: &FanBeamGeometry) -> Result<ProjectionMask> {
    let s = read_sinogram(path, geom)?;
    let values = s
        .values
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0),
            1.0 => Ok(1),
            _ => Err(Error::Format(format!("{} holds a non-binary value {v}", path.display()))),
        })
        .collect::<Result<_>>()?;
    ProjectionMask::from_values(geom.n_views, geom.n_dets, values)
}

fn write_image(path: &Path, img: &Image) -> Result<()> {
    Container::from_f64(vec![img.grid.ny, img.grid.nx], &img.values)?.write(path)
}

fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    Container::from_f64(vec![s.geom.n_views, s.geom.n_dets], &s.values)?.write(path)
}

fn range(values: &[f64]) -> (f64, f64) {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (lo + 0.0, hi + 0.0)
}

pub fn cmd_phantom(cfg: &ExperimentConfig, kind: PhantomChoice, nx: Option<usize>, output: &str) -> Result<PathBuf> {
    let grid = match nx {
        Some(n) => cfg.grid_with(n, cfg.grid_ny.unwrap_or(n))?,
        None => cfg.grid()?,
    };
    let mut img = match kind {
        PhantomChoice::SheppLogan => shepp_logan(&grid),
        PhantomChoice::Ellipses => {
            random_ellipse_phantom(&grid, &mut stream_rng(cfg.sim_seed, PHANTOM_STREAM), cfg.sim_ellipses)?
        }
    };
    img.values.iter_mut().for_each(|v| *v *= cfg.sim_attenuation);
    let path = cfg.output(output)?;
    write_image(&path, &img)?;
    let (lo, hi) = range(&img.values);
    println!("{}: {kind} phantom {}x{}, values in [{lo}, {hi}] 1/mm", path.display(), grid.nx, grid.ny);
    Ok(path)
}

/// File names written by [`cmd_simulate`] for a prefix.
pub fn scan_files(prefix: &str) -> [String; 4] {
    ["y", "p", "mask", "roi"].map(|s| format!("{prefix}_{s}.ctdl"))
}

pub fn cmd_simulate(cfg: &ExperimentConfig, image: &Path, prefix: &str) -> Result<Sample> {
    let f = read_image(cfg, image)?;
    let geom = cfg.geometry()?;
    geom.check_grid(&f.grid).map_err(|e| Error::Config(e.to_string()))?;
    let (ratio, i0) = cfg.single_scan()?;
    let y = forward_project(&f, &geom)?;
    let sample = make_sample(&f, &y, ratio, i0, &mut stream_rng(cfg.sim_seed, SIMULATE_STREAM))?;
    let [py, pp, pm, pr] = scan_files(prefix).map(|n| cfg.output(&n));
    write_sinogram(&py?, &sample.y)?;
    write_sinogram(&pp?, &sample.p)?;
    let mask: Vec<f64> = sample.truncation.values().iter().map(|&m| m as f64).collect();
    Container::from_f64(vec![geom.n_views, geom.n_dets], &mask)?.write(pm?)?;
    let roi: Vec<f64> = sample.roi.values().iter().map(|&m| m as f64).collect();
    Container::from_f64(vec![f.grid.ny, f.grid.nx], &roi)?.write(pr?)?;
    println!(
        "{} views x {} detectors, ratio {ratio}, i0 {i0}: kept {} of {} detectors, ROI radius {:.1} mm",
        geom.n_views,
        geom.n_dets,
        sample.truncation.kept_span().len(),
        geom.n_dets,
        sample.roi.radius_mm()
    );
    Ok(sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReconMethod {
    Fbp,
    ExtrapolateFbp,
    Tv,
    Model,
}

impl ReconMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fbp => "fbp",
            Self::ExtrapolateFbp => "extrapolate-fbp",
            Self::Tv => "tv",
            Self::Model => "model",
        }
    }
}

/// Classical reconstruction and whether it converged (only TV can fail to).
fn classical(cfg: &ExperimentConfig, method: ReconMethod, p: &Sinogram, t: &ProjectionMask, grid: &ImageGrid) -> Result<(Image, bool)> {
    Ok(match method {
        ReconMethod::Fbp => (fbp(p, grid)?, true),
        ReconMethod::ExtrapolateFbp => (fbp(&extrapolate_sinogram(p, t)?, grid)?, true),
        ReconMethod::Tv => {
            let out = tv_reconstruct(p, t, grid, &cfg.tv_config()?)?;
            (out.image, out.status == TvStatus::Completed)
        }
        ReconMethod::Model => unreachable!("models are handled by the caller"),
    })
}

fn append_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = if path.exists() { std::fs::read_to_string(path)? } else { String::new() };
    if text.is_empty() {
        text.push_str(header);
        text.push('\n');
    } else if text.lines().next() != Some(header) {
        return Err(Error::Config(format!("{} exists with a different header", path.display())));
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub struct ReconArgs<'a> {
    pub method: ReconMethod,
    pub sino: &'a Path,
    pub mask: Option<&'a Path>,
    pub truth: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub output: Option<&'a str>,
    pub metrics: &'a str,
    pub label: Option<&'a str>,
}

pub fn cmd_recon(cfg: &ExperimentConfig, args: &ReconArgs) -> Result<Image> {
    let truth = args.truth.map(|p| read_image(cfg, p)).transpose()?;
    let model = match (args.method, args.checkpoint) {
        (ReconMethod::Model, Some(c)) => Some(load_checkpoint(c)?),
        (ReconMethod::Model, None) => return Err(Error::Config("method 'model' needs --checkpoint".into())),
        _ => None,
    };
    let (grid, geom) = match &model {
        Some(m) => (m.grid, m.geom),
        None => (truth.as_ref().map_or_else(|| cfg.grid(), |f| Ok(f.grid))?, cfg.geometry()?),
    };
    if truth.as_ref().is_some_and(|f| f.grid != grid) {
        return Err(Error::Config("reference image does not match the reconstruction grid".into()));
    }
    let p = read_sinogram(args.sino, &geom)?;
    let t = match args.mask {
        Some(m) => read_mask(m, &geom)?,
        None => ProjectionMask::centered(geom.n_views, geom.n_dets, geom.n_dets)?,
    };
    let (image, converged) = match &model {
        Some(m) => (m.reconstruct(&p, &t)?, true),
        None => classical(cfg, args.method, &p, &t, &grid)?,
    };
    let name = args.output.map_or_else(|| format!("recon_{}.ctdl", args.method.name()), str::to_string);
    let path = cfg.output(&name)?;
    write_image(&path, &image)?;
    println!("{}: {} reconstruction {}x{}", path.display(), args.method.name(), grid.nx, grid.ny);
    if let Some(f) = &truth {
        let roi = roi_mask(&grid, &geom, &t)?;
        let label = args.label.unwrap_or(args.method.name());
        let opts = MetricOptions::default();
        let rows = [
            MetricsReport::compute(label, Region::Full, &f.values, &image.values, grid.nx, None, &opts)?,
            MetricsReport::compute(label, Region::Roi, &f.values, &image.values, grid.nx, Some(roi.values()), &opts)?,
        ];
        for r in &rows {
            println!("  {:<4} nmse {:.4e}  psnr {:.2} dB  ssim {:.4}", r.region, r.nmse, r.psnr_db, r.ssim);
        }
        let lines: Vec<String> = rows.iter().map(MetricsReport::to_csv_row).collect();
        append_csv(&cfg.output(args.metrics)?, MetricsReport::CSV_HEADER, &lines)?;
    }
    if !converged {
        return Err(Error::Numerical(format!("TV iteration diverged; last iterate written to {}", path.display())));
    }
    Ok(image)
}

pub const LOSS_CSV_HEADER: &str = "epoch,train_loss,val_loss";

fn loss_csv(s: &TrainingSession) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for (i, (t, v)) in s.curves.train.iter().zip(&s.curves.val).enumerate() {
        writeln!(out, "{},{t},{v}", i + 1).unwrap();
    }
    out
}

pub fn cmd_train(cfg: &ExperimentConfig, checkpoint: &str, curves: &str, resume: bool) -> Result<TrainingSession> {
    let tcfg = cfg.train_config()?;
    let (train_cfg, seed) = cfg.dataset(Split::Train)?;
    let train = build_dataset(&train_cfg, seed)?;
    let val = if cfg.sim_val_phantoms > 0 {
        let (c, s) = cfg.dataset(Split::Val)?;
        Some(build_dataset(&c, s)?)
    } else {
        None
    };
    let ckpt = cfg.output(checkpoint)?;
    let curves_path = cfg.output(curves)?;
    let mut session = if resume && ckpt.exists() {
        let mut s = load_session(&ckpt)?;
        let same = ctdl_core::TrainConfig { epochs: tcfg.epochs, ..s.model.config.clone() };
        if same != tcfg {
            return Err(Error::Config(format!("{} was trained with a different configuration", ckpt.display())));
        }
        s.model.config.epochs = tcfg.epochs;
        eprintln!("resuming {} after epoch {}", ckpt.display(), s.model.epochs_run);
        s
    } else {
        TrainingSession::start(&tcfg, &train)?
    };
    eprintln!(
        "training {} ({} parameters) on {} samples, {} validation",
        tcfg.arch.name(),
        session.model.param_count(),
        train.len(),
        val.as_ref().map_or(0, Dataset::len)
    );
    session.run(&train, val.as_ref(), tcfg.epochs, |r, s| {
        save_session(s, &ckpt)?;
        std::fs::write(&curves_path, loss_csv(s))?;
        eprintln!(
            "epoch {:>3}  train {:.4e}  val {:.4e}  lr {:.1e}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        );
        Ok(())
    })?;
    save_session(&session, &ckpt)?;
    std::fs::write(&curves_path, loss_csv(&session))?;
    println!("{}: {} after {} epochs", ckpt.display(), tcfg.arch.name(), session.model.epochs_run);
    Ok(session)
}

pub const EVAL_CSV_HEADER: &str = "sample,method,ratio,i0,region,nmse,psnr_db,ssim";

/// Methods compared by `eval`; models are labelled by their file stem.
pub enum Evaluated {
    Classical(ReconMethod),
    Model(String, TrainedModel),
}

impl Evaluated {
    fn label(&self) -> &str {
        match self {
            Self::Classical(m) => m.name(),
            Self::Model(l, _) => l,
        }
    }
}

fn stem_labels(paths: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let n = seen.entry(stem.clone()).or_default();
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}_{n}")
            }
        })
        .collect()
}

pub struct EvalRow {
    pub sample: String,
    pub method: String,
    pub ratio: f64,
    pub i0: f64,
    pub metrics: MetricsReport,
}

impl EvalRow {
    fn to_csv(&self, region: Region) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.sample, self.method, self.ratio, self.i0, region, self.metrics.nmse, self.metrics.psnr_db, self.metrics.ssim
        )
    }
}

fn region_mask(region: Region, s: &Sample) -> Option<Vec<u8>> {
    match region {
        Region::Full => None,
        Region::Roi => Some(s.roi.values().to_vec()),
        Region::Body => Some(ctdl_core::diagnostics::body_mask(&s.f.values, 0.05)),
    }
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    methods: &[ReconMethod],
    checkpoints: &[PathBuf],
    region: Region,
    output: &str,
) -> Result<Vec<EvalRow>> {
    if cfg.sim_test_phantoms == 0 {
        return Err(Error::Config("test set is empty (sim.test_phantoms = 0)".into()));
    }
    let mut evaluated: Vec<Evaluated> = methods
        .iter()
        .filter(|&&m| m != ReconMethod::Model)
        .map(|&m| Evaluated::Classical(m))
        .collect();
    for (label, path) in stem_labels(checkpoints).into_iter().zip(checkpoints) {
        evaluated.push(Evaluated::Model(label, load_checkpoint(path)?));
    }
    if evaluated.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let (test_cfg, seed) = cfg.dataset(Split::Test)?;
    for e in &evaluated {
        if let Evaluated::Model(l, m) = e {
            if m.grid != test_cfg.grid || m.geom != test_cfg.geom {
                return Err(Error::Config(format!("model '{l}' was trained on a different grid or geometry")));
            }
        }
    }
    let test = build_dataset(&test_cfg, seed)?;
    let grid = test_cfg.grid;
    let opts = MetricOptions::default();
    let mut rows = Vec::new();
    for (i, s) in test.samples.iter().enumerate() {
        let mask = region_mask(region, s);
        for e in &evaluated {
            let image = match e {
                Evaluated::Classical(m) => classical(cfg, *m, &s.p, &s.truncation, &grid)?.0,
                Evaluated::Model(_, model) => model.reconstruct(&s.p, &s.truncation)?,
            };
            let metrics = MetricsReport::compute(i.to_string(), region, &s.f.values, &image.values, grid.nx, mask.as_deref(), &opts)?;
            rows.push(EvalRow { sample: i.to_string(), method: e.label().to_string(), ratio: s.ratio, i0: s.i0, metrics });
        }
    }
    let mut cells: BTreeMap<(String, String, String), Vec<&EvalRow>> = BTreeMap::new();
    for r in &rows {
        cells.entry((r.method.clone(), r.ratio.to_string(), r.i0.to_string())).or_default().push(r);
    }
    let mut lines: Vec<String> = rows.iter().map(|r| r.to_csv(region)).collect();
    println!("{:<18} {:>6} {:>10} {:>11} {:>9} {:>8}", "method", "ratio", "i0", "nmse", "psnr_db", "ssim");
    for ((method, ratio, i0), group) in &cells {
        let n = group.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| group.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        let (nmse, psnr, ssim) = (mean(|m| m.nmse), mean(|m| m.psnr_db), mean(|m| m.ssim));
        lines.push(format!("mean,{method},{ratio},{i0},{region},{nmse},{psnr},{ssim}"));
        println!("{method:<18} {ratio:>6} {i0:>10} {nmse:>11.4e} {psnr:>9.2} {ssim:>8.4}");
    }
    let path = cfg.output(output)?;
    let mut text = format!("{EVAL_CSV_HEADER}\n");
    lines.iter().for_each(|l| writeln!(text, "{l}").unwrap());
    std::fs::write(&path, text)?;
    println!("{}: {} rows over {} samples", path.display(), lines.len(), test.len());
    Ok(rows)
}

/// Stage-1 backbone spectrum of each model, averaged over probe inputs.
pub fn cmd_diagnose(cfg: &ExperimentConfig, checkpoints: &[PathBuf], output: &str) -> Result<Vec<Vec<f64>>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("diagnose needs at least one --checkpoint".into()));
    }
    if cfg.diag_samples == 0 {
        return Err(Error::Config("diag.samples must be positive".into()));
    }
    let models: Vec<TrainedModel> = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    let (grid, geom) = (models[0].grid, models[0].geom);
    if models.iter().any(|m| m.grid != grid || m.geom != geom) {
        return Err(Error::Config("checkpoints disagree on grid or geometry".into()));
    }
    let (mut probe_cfg, seed) = cfg.dataset(Split::Test)?;
    (probe_cfg.grid, probe_cfg.geom, probe_cfg.n_phantoms) = (grid, geom, cfg.diag_samples);
    let probes = build_dataset(&probe_cfg, seed)?;
    let labels = stem_labels(checkpoints);
    let mut spectra = Vec::new();
    for (label, m) in labels.iter().zip(&models) {
        let mut maps = Vec::new();
        for s in &probes.samples {
            maps.extend(m.stage1_features(&s.p, &s.truncation)?);
        }
        let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
        let spec = singular_spectrum(&refs, cfg.diag_window, cfg.diag_pencil)?;
        println!("{label}: {} stage-1 feature maps, spectrum area {:.4}", maps.len(), spectrum_area(&spec));
        spectra.push(spec);
    }
    let mut text = format!("index,{}\n", labels.join(","));
    for i in 0..cfg.diag_pencil {
        let cols: Vec<String> = spectra.iter().map(|s| s[i].to_string()).collect();
        writeln!(text, "{},{}", i + 1, cols.join(",")).unwrap();
    }
    let path = cfg.output(output)?;
    std::fs::write(&path, text)?;
    println!("{}: {} spectra of length {}", path.display(), spectra.len(), cfg.diag_pencil);
    Ok(spectra)
}

/// Display window in stored units.
pub fn window(cfg: &ExperimentConfig, low: f64, high: f64, raw: bool) -> Result<(f64, f64)> {
    if !(low < high) {
        return Err(Error::Config(format!("window low {low} must be below high {high}")));
    }
    if raw {
        return Ok((low, high));
    }
    let mu = cfg.mu_water();
    if !(mu > 0.0) {
        return Err(Error::Config("water attenuation must be positive".into()));
    }
    Ok((mu * (1.0 + low / 1000.0), mu * (1.0 + high / 1000.0)))
}

/// Linear map of `[lo, hi]` onto `0..=255` with clamping.
pub fn to_gray(v: f64, lo: f64, hi: f64) -> u8 {
    if v <= lo {
        0
    } else if v >= hi {
        255
    } else {
        (255.0 * (v - lo) / (hi - lo)).round() as u8
    }
}

pub fn cmd_render(cfg: &ExperimentConfig, image: &Path, output: &str, low: Option<f64>, high: Option<f64>, raw: bool) -> Result<PathBuf> {
    let c = read_container(image)?;
    let [ny, nx] = c.dims[..] else {
        return Err(Error::Format(format!("{} is not a 2-D image", image.display())));
    };
    let (wl, wh) = (low.unwrap_or(cfg.render_low_hu), high.unwrap_or(cfg.render_high_hu));
    let (lo, hi) = window(cfg, wl, wh, raw)?;
    let unit = if raw { "stored units" } else { "HU" };
    let mut bytes = format!("P5\n# window {wl} {wh} {unit}; reference display window -150 400 HU\n{nx} {ny}\n255\n").into_bytes();
    bytes.extend(c.data.iter().map(|&v| to_gray(v as f64, lo, hi)));
    let path = cfg.output(output)?;
    std::fs::write(&path, bytes)?;
    println!("{}: {nx}x{ny} grayscale, window [{wl}, {wh}] {unit}", path.display());
    Ok(path)
}
