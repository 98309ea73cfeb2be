//! Model checkpoints: one container holding every array back to back, and a
//! text manifest at `<path>.manifest` with the configuration and one
//! `layer_id shape offset` line per array. Training sessions add
//! `<path>.session` (optimiser scalars and loss history) and
//! `<path>.moments` (Adam moments as little-endian f64).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::losses::{LossOptions, Reduction};
use super::model::{parse_reduction, LossCurves, TrainConfig, TrainedModel, TrainingSession};
use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, ImageGrid};
use crate::io::Container;
use crate::nn::{NetworkGraph, OptimState};

const FORMAT: &str = "ctdl-checkpoint-1";
const SESSION_FORMAT: &str = "ctdl-session-1";

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(path, ".manifest")
}

/// Writes through a temporary sibling and renames it into place.
fn replace_file(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = with_suffix(path, ".tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Entry {
    id: String,
    dims: Vec<usize>,
}

fn net_arrays<'a>(stage: &str, net: &'a NetworkGraph<f32>) -> Vec<(Entry, &'a [f32])> {
    let mut out: Vec<(Entry, &[f32])> = net
        .params()
        .iter()
        .map(|p| (Entry { id: format!("{stage}/{}", p.name), dims: p.dims.clone() }, &p.values[..]))
        .collect();
    for (i, s) in net.bn_states().iter().enumerate() {
        out.push((Entry { id: format!("{stage}/bn{i}.running_mean"), dims: vec![s.mean.len()] }, &s.mean[..]));
        out.push((Entry { id: format!("{stage}/bn{i}.running_var"), dims: vec![s.var.len()] }, &s.var[..]));
    }
    out
}

fn net_arrays_mut<'a>(net: &'a mut NetworkGraph<f32>) -> Vec<&'a mut Vec<f32>> {
    // Same order as `net_arrays`.
    let (params, states) = net.state_mut();
    let mut out: Vec<&mut Vec<f32>> = params.iter_mut().map(|p| &mut p.values).collect();
    for s in states.iter_mut() {
        out.push(&mut s.mean);
        out.push(&mut s.var);
    }
    out
}

fn all_arrays(model: &TrainedModel) -> Vec<(Entry, &[f32])> {
    let mut v = net_arrays("stage1", &model.stage1);
    if let Some(n) = &model.stage2 {
        v.extend(net_arrays("stage2", n));
    }
    v
}

fn header(model: &TrainedModel) -> String {
    let c = &model.config;
    let g = &model.geom;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
    kv("format", FORMAT.into());
    kv("arch", c.arch.name().into());
    kv("grid", format!("{} {} {}", model.grid.nx, model.grid.ny, model.grid.pixel_size_mm));
    kv(
        "geometry",
        format!(
            "{} {} {} {} {} {} {}",
            g.n_views, g.angle_start_rad, g.angle_extent_rad, g.n_dets, g.det_pitch_mm, g.sod_mm, g.sdd_mm
        ),
    );
    kv("sino_scale", model.sino_scale.to_string());
    kv("image_scale", model.image_scale.to_string());
    kv("base_channels", c.base_channels.to_string());
    kv("depth", c.depth.to_string());
    kv("unet_width_factor", c.unet_width_factor.to_string());
    kv("epochs", c.epochs.to_string());
    kv("batch_size", c.batch_size.to_string());
    kv("lr", c.lr.to_string());
    kv("flip", c.flip.to_string());
    kv("reduction", match c.loss.reduction {
        Reduction::Mean => "mean".into(),
        Reduction::Sum => "sum".into(),
    });
    kv("detach_noise", c.loss.detach_noise.to_string());
    kv("stage_barrier", c.loss.stage_barrier.to_string());
    kv("zero_heads", c.zero_heads.to_string());
    kv("seed", c.seed.to_string());
    kv("epochs_run", model.epochs_run.to_string());
    s
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let arrays = all_arrays(model);
    let mut manifest = header(model);
    manifest.push_str("[arrays]\n");
    let mut data = Vec::new();
    for (entry, values) in &arrays {
        let dims: Vec<String> = entry.dims.iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "{} {} {}", entry.id, dims.join("x"), data.len()).unwrap();
        data.extend_from_slice(values);
    }
    let container = Container::new(vec![data.len()], data)?;
    replace_file(path, |p| container.write(p))?;
    replace_file(&manifest_path(path), |p| Ok(std::fs::write(p, manifest)?))
}

fn optim_line(o: &OptimState) -> String {
    format!("{} {} {} {} {} {} {}", o.lr, o.beta1, o.beta2, o.eps, o.step, o.best, o.plateau)
}

fn parse_optim(map: &BTreeMap<String, String>, key: &str, lens: &[usize]) -> Result<OptimState> {
    let v = numbers(map, key, 7)?;
    let mut o = OptimState::for_shapes(lens, v[0]);
    (o.beta1, o.beta2, o.eps, o.step, o.best, o.plateau) = (v[1], v[2], v[3], v[4] as u64, v[5], v[6] as usize);
    Ok(o)
}

/// Saves the model with [`save_checkpoint`] plus everything needed to
/// resume training.
pub fn save_session(session: &TrainingSession, path: &Path) -> Result<()> {
    save_checkpoint(&session.model, path)?;
    let mut text = String::new();
    writeln!(text, "format = {SESSION_FORMAT}").unwrap();
    writeln!(text, "opt1 = {}", optim_line(&session.opt1)).unwrap();
    if let Some(o) = &session.opt2 {
        writeln!(text, "opt2 = {}", optim_line(o)).unwrap();
    }
    text.push_str("[curves]\n");
    text.push_str(&session.curves.to_csv());
    let mut bytes = Vec::new();
    for o in std::iter::once(&session.opt1).chain(&session.opt2) {
        for a in o.m.iter().chain(&o.v) {
            a.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes()));
        }
    }
    replace_file(&with_suffix(path, ".moments"), |p| Ok(std::fs::write(p, bytes)?))?;
    replace_file(&with_suffix(path, ".session"), |p| Ok(std::fs::write(p, text)?))
}

/// Loads a session written by [`save_session`]. A checkpoint without session
/// files resumes with fresh optimiser states and an empty loss history.
pub fn load_session(path: &Path) -> Result<TrainingSession> {
    let model = load_checkpoint(path)?;
    let session_file = with_suffix(path, ".session");
    if !session_file.exists() {
        return Ok(TrainingSession::from_model(model));
    }
    let text = std::fs::read_to_string(session_file)?;
    let (head, curves) = text.split_once("[curves]\n").ok_or_else(|| bad("session file has no [curves] section"))?;
    let map = key_values(head)?;
    if map.get("format").map(String::as_str) != Some(SESSION_FORMAT) {
        return Err(bad("not a session file"));
    }
    let lens = |n: &NetworkGraph<f32>| n.params().iter().map(|p| p.values.len()).collect::<Vec<_>>();
    let mut opt1 = parse_optim(&map, "opt1", &lens(&model.stage1))?;
    let mut opt2 = match &model.stage2 {
        Some(n) => Some(parse_optim(&map, "opt2", &lens(n))?),
        None => None,
    };
    let bytes = std::fs::read(with_suffix(path, ".moments"))?;
    let mut words = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let total: usize = std::iter::once(&opt1).chain(&opt2).map(|o| 2 * o.m.iter().map(Vec::len).sum::<usize>()).sum();
    if bytes.len() != 8 * total {
        return Err(bad(format!("moments file holds {} bytes, expected {}", bytes.len(), 8 * total)));
    }
    for o in std::iter::once(&mut opt1).chain(opt2.as_mut()) {
        for a in o.m.iter_mut().chain(o.v.iter_mut()) {
            a.iter_mut().for_each(|x| *x = words.next().expect("length checked"));
        }
    }
    let curves = LossCurves::from_csv(curves)?;
    if curves.epochs() != model.epochs_run {
        return Err(bad(format!("session has {} epochs of history, model has run {}", curves.epochs(), model.epochs_run)));
    }
    Ok(TrainingSession { model, opt1, opt2, curves })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| bad(format!("manifest is missing '{key}'")))?
        .parse()
        .map_err(|_| bad(format!("manifest value for '{key}' is malformed")))
}

fn numbers(map: &BTreeMap<String, String>, key: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = map
        .get(key)
        .ok_or_else(|| bad(format!("manifest is missing '{key}'")))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("manifest value for '{key}' is malformed"))))
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(bad(format!("'{key}' needs {n} numbers")));
    }
    Ok(v)
}

fn key_values(head: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in head.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(manifest_path(path))?;
    let (head, arrays) = text.split_once("[arrays]\n").ok_or_else(|| bad("manifest has no [arrays] section"))?;
    let map = key_values(head)?;
    if map.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(bad("not a checkpoint manifest"));
    }
    let g = numbers(&map, "grid", 3)?;
    let grid = ImageGrid::new(g[0] as usize, g[1] as usize, g[2])?;
    let e = numbers(&map, "geometry", 7)?;
    let geom = FanBeamGeometry::new(e[0] as usize, e[1], e[2], e[3] as usize, e[4], e[5], e[6])?;
    let config = TrainConfig {
        arch: parse(&map, "arch")?,
        base_channels: parse(&map, "base_channels")?,
        depth: parse(&map, "depth")?,
        unet_width_factor: parse(&map, "unet_width_factor")?,
        epochs: parse(&map, "epochs")?,
        batch_size: parse(&map, "batch_size")?,
        lr: parse(&map, "lr")?,
        flip: parse(&map, "flip")?,
        loss: LossOptions {
            reduction: parse_reduction(map.get("reduction").map(String::as_str).unwrap_or(""))?,
            detach_noise: parse(&map, "detach_noise")?,
            stage_barrier: parse(&map, "stage_barrier")?,
        },
        zero_heads: parse(&map, "zero_heads")?,
        seed: parse(&map, "seed")?,
    };
    let mut model = TrainedModel::new(config, grid, geom, parse(&map, "sino_scale")?, parse(&map, "image_scale")?)?;
    model.epochs_run = parse(&map, "epochs_run")?;

    let container = Container::read(path)?;
    let expected: Vec<(String, Vec<usize>)> = all_arrays(&model).into_iter().map(|(e, _)| (e.id, e.dims)).collect();
    let lines: Vec<&str> = arrays.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != expected.len() {
        return Err(bad(format!("manifest lists {} arrays, architecture has {}", lines.len(), expected.len())));
    }
    let mut offsets = Vec::with_capacity(lines.len());
    for (line, (id, dims)) in lines.iter().zip(&expected) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        let shape = dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        if cols.len() != 3 || cols[0] != id || cols[1] != shape {
            return Err(bad(format!("manifest entry '{line}' does not match {id} {shape}")));
        }
        offsets.push(cols[2].parse::<usize>().map_err(|_| bad(format!("bad offset in '{line}'")))?);
    }
    let mut targets = net_arrays_mut(&mut model.stage1);
    if let Some(n) = model.stage2.as_mut() {
        targets.extend(net_arrays_mut(n));
    }
    for (dst, &off) in targets.into_iter().zip(&offsets) {
        let src = container
            .data
            .get(off..off + dst.len())
            .ok_or_else(|| bad("checkpoint data is shorter than its manifest"))?;
        dst.copy_from_slice(src);
    }
    Ok(model)
}
