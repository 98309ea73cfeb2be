use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use super::losses::{loss_projection_unet, masked_sq_error, LossOptions, Reduction};
use crate::acquisition::{stream_rng, Dataset, Sample};
use crate::error::{config, domain, shape, Error, Result};
use crate::geometry::{roi_mask, FanBeamGeometry, ImageGrid, ImageMask, ProjectionMask};
use crate::nn::{adam_step_net, attach_bridge, build_backbone, Mode, NetworkGraph, OptimState, Tensor};
use crate::projector::{FbpOperator, Image, ImageRole, Sinogram};

const INIT_STREAM: u64 = 2 << 40;
const TRAIN_STREAM: u64 = 3 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchitectureKind {
    /// Image-domain U-Net on the FBP image.
    ImageUNet,
    /// Projection-domain net with noise and extrapolation heads, then FBP.
    ProjectionCNN,
    /// Two image-domain U-Nets in sequence.
    WNet,
    /// Projection-domain net, FBP layer, image-domain net.
    DualNet,
}

impl ArchitectureKind {
    pub const ALL: [Self; 4] = [Self::ImageUNet, Self::ProjectionCNN, Self::WNet, Self::DualNet];

    pub fn name(self) -> &'static str {
        match self {
            Self::ImageUNet => "unet",
            Self::ProjectionCNN => "projection",
            Self::WNet => "wnet",
            Self::DualNet => "dualnet",
        }
    }

    pub fn has_second_stage(self) -> bool {
        matches!(self, Self::WNet | Self::DualNet)
    }

    /// Whether the first network runs on sinograms.
    pub fn projection_first(self) -> bool {
        matches!(self, Self::ProjectionCNN | Self::DualNet)
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown architecture '{s}' (expected unet, projection, wnet or dualnet)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchitectureKind,
    pub base_channels: usize,
    pub depth: usize,
    /// Channel multiplier of the single-network image U-Net, so that it
    /// roughly matches the capacity of the two-network architectures.
    pub unet_width_factor: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random vertical flips of each training example.
    pub flip: bool,
    pub loss: LossOptions,
    /// Start each output head's final convolution at zero.
    pub zero_heads: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Batch 4, 30 epochs, learning rate 1e-4 with tenfold plateau decay,
    /// vertical-flip augmentation.
    pub fn full_scale(arch: ArchitectureKind) -> Self {
        Self {
            arch,
            base_channels: 32,
            depth: 4,
            unet_width_factor: 2,
            epochs: 30,
            batch_size: 4,
            lr: 1e-4,
            flip: true,
            loss: LossOptions::default(),
            zero_heads: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.unet_width_factor == 0 {
            return config("channel widths must be positive");
        }
        if self.depth == 0 || self.depth > 8 {
            return config(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if self.batch_size == 0 {
            return config("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config("learning rate must be positive");
        }
        Ok(())
    }

    fn stage1_width(&self) -> usize {
        match self.arch {
            ArchitectureKind::ImageUNet => self.base_channels * self.unet_width_factor,
            _ => self.base_channels,
        }
    }
}

/// One training example with its FBP image precomputed.
#[derive(Clone, Debug)]
pub struct Example {
    pub p: Sinogram,
    pub y: Sinogram,
    pub f: Image,
    /// `fbp(p)`.
    pub q: Image,
    pub t: ProjectionMask,
    pub roi: ImageMask,
}

impl Example {
    pub fn from_sample(s: &Sample, fbp: &FbpOperator) -> Result<Self> {
        if s.p.geom != *fbp.geometry() || s.f.grid != *fbp.grid() {
            return shape("sample does not match the model geometry");
        }
        Ok(Self {
            p: s.p.clone(),
            y: s.y.clone(),
            f: s.f.clone(),
            q: fbp.apply(&s.p)?.with_role(ImageRole::Fbp),
            t: s.truncation.clone(),
            roi: s.roi.clone(),
        })
    }

    /// Top-to-bottom mirror of the object; masks are symmetric and unchanged.
    pub fn flipped(&self) -> Result<Self> {
        Ok(Self {
            p: self.p.flip_vertical()?,
            y: self.y.flip_vertical()?,
            f: self.f.flip_vertical(),
            q: self.q.flip_vertical(),
            t: self.t.clone(),
            roi: self.roi.clone(),
        })
    }
}

/// Per-epoch training and validation losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurves {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub lr: Vec<f64>,
}

impl LossCurves {
    pub fn epochs(&self) -> usize {
        self.train.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for i in 0..self.train.len() {
            s.push_str(&format!("{},{},{},{}\n", i + 1, self.train[i], self.val[i], self.lr[i]));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("epoch,train_loss,val_loss,lr") {
            return Err(Error::Format("loss curve CSV has an unexpected header".into()));
        }
        let mut curves = Self::default();
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("malformed loss curve row {}", i + 1));
            if cols.len() != 4 || cols[0].trim().parse::<usize>().map_err(|_| bad())? != i + 1 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            curves.train.push(num(cols[1])?);
            curves.val.push(num(cols[2])?);
            curves.lr.push(num(cols[3])?);
        }
        Ok(curves)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Mean objective over a batch; `terms` holds the individual objective
/// terms in physical units in stage order (unused entries are zero).
/// `total` and the gradients weight each term by the inverse squared
/// normalisation scale of its domain.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub terms: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepGradients {
    pub stage1: Vec<Vec<f32>>,
    pub stage2: Option<Vec<Vec<f32>>>,
}

/// Result of [`TrainedModel::reconstruct_stages`].
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// First-stage image estimate (`q̄`) for two-stage models.
    pub intermediate: Option<Image>,
    pub image: Image,
    pub roi: ImageMask,
}

/// Networks bound to a scan geometry, plus what is needed to rebuild them.
#[derive(Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub grid: ImageGrid,
    pub geom: FanBeamGeometry,
    pub stage1: NetworkGraph<f32>,
    pub stage2: Option<NetworkGraph<f32>>,
    /// Sinogram values are divided by this before entering a network.
    pub sino_scale: f64,
    /// Image values are divided by this before entering a network.
    pub image_scale: f64,
    pub epochs_run: usize,
    fbp: FbpOperator,
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * n - 2 - i
    }
}

fn padded(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Stacks `h×w` arrays into an `(N, 1, H, W)` tensor, reflect-padded at the
/// bottom and right to multiples of `m`, multiplied by `gain`.
fn pack(items: &[&[f64]], h: usize, w: usize, m: usize, gain: f64) -> Tensor<f32> {
    let (hp, wp) = (padded(h, m), padded(w, m));
    let mut data = Vec::with_capacity(items.len() * hp * wp);
    for src in items {
        for i in 0..hp {
            let row = &src[reflect(i, h) * w..][..w];
            data.extend((0..wp).map(|j| (row[reflect(j, w)] * gain) as f32));
        }
    }
    Tensor::from_vec([items.len(), 1, hp, wp], data).expect("packed dims")
}

/// Adjoint of [`pack`] for one item: folds padded entries back onto their sources.
fn unpack_adjoint(t: &Tensor<f32>, item: usize, h: usize, w: usize, gain: f64) -> Vec<f64> {
    let (hp, wp) = (t.height(), t.width());
    let src = t.item(item);
    let mut out = vec![0.0; h * w];
    for i in 0..hp {
        for j in 0..wp {
            out[reflect(i, h) * w + reflect(j, w)] += src[i * wp + j] as f64 * gain;
        }
    }
    out
}

/// Crops one item back to `h×w`, multiplied by `gain`.
fn crop(t: &Tensor<f32>, item: usize, h: usize, w: usize, gain: f64) -> Vec<f64> {
    let wp = t.width();
    let src = t.item(item);
    (0..h).flat_map(|i| src[i * wp..i * wp + w].iter().map(move |&v| v as f64 * gain)).collect()
}

/// Adjoint of [`crop`]: zero-pads gradients to the padded size.
fn crop_adjoint(grads: &[Vec<f64>], h: usize, w: usize, m: usize, gain: f64) -> Tensor<f32> {
    let (hp, wp) = (padded(h, m), padded(w, m));
    let mut t = Tensor::zeros([grads.len(), 1, hp, wp]);
    for (b, g) in grads.iter().enumerate() {
        let dst = t.item_mut(b);
        for i in 0..h {
            for j in 0..w {
                dst[i * wp + j] = (g[i * w + j] * gain) as f32;
            }
        }
    }
    t
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

/// Output head whose final 1×1 convolution starts at zero, so an untrained
/// residual net passes its input through unchanged.
fn attach_head<R: Rng + ?Sized>(net: &mut NetworkGraph<f32>, zero: bool, rng: &mut R) -> Result<()> {
    attach_bridge(net, 1, rng)?;
    if zero {
        let n = net.params().len();
        net.params_mut()[n - 2].values.iter_mut().for_each(|w| *w = 0.0);
    }
    Ok(())
}

fn image_net<R: Rng + ?Sized>(width: usize, depth: usize, zero: bool, rng: &mut R) -> Result<NetworkGraph<f32>> {
    let mut net = build_backbone(1, width, depth, rng)?;
    attach_head(&mut net, zero, rng)?;
    Ok(net)
}

impl TrainedModel {
    /// Freshly initialised networks for `config`; deterministic in `config.seed`.
    pub fn new(cfg: TrainConfig, grid: ImageGrid, geom: FanBeamGeometry, sino_scale: f64, image_scale: f64) -> Result<Self> {
        cfg.validate()?;
        if !(sino_scale > 0.0 && image_scale > 0.0 && sino_scale.is_finite() && image_scale.is_finite()) {
            return config("normalisation scales must be positive");
        }
        let fbp = FbpOperator::new(grid, geom)?;
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let stage1 = if cfg.arch.projection_first() {
            let mut net = build_backbone(1, cfg.stage1_width(), cfg.depth, &mut rng)?;
            attach_head(&mut net, cfg.zero_heads, &mut rng)?;
            attach_head(&mut net, cfg.zero_heads, &mut rng)?;
            net
        } else {
            image_net(cfg.stage1_width(), cfg.depth, cfg.zero_heads, &mut rng)?
        };
        let stage2 = if cfg.arch.has_second_stage() {
            Some(image_net(cfg.base_channels, cfg.depth, cfg.zero_heads, &mut rng)?)
        } else {
            None
        };
        let m = stage1.size_multiple();
        for (n, what) in [(grid.ny, "image height"), (grid.nx, "image width"), (geom.n_views, "views"), (geom.n_dets, "detectors")] {
            if n < m {
                return config(format!("{what} {n} is smaller than the network's size multiple {m}"));
            }
        }
        Ok(Self { config: cfg, grid, geom, stage1, stage2, sino_scale, image_scale, epochs_run: 0, fbp })
    }

    pub fn arch(&self) -> ArchitectureKind {
        self.config.arch
    }

    pub fn fbp(&self) -> &FbpOperator {
        &self.fbp
    }

    pub fn param_count(&self) -> usize {
        self.stage1.param_count() + self.stage2.as_ref().map_or(0, |n| n.param_count())
    }

    pub fn examples(&self, data: &Dataset) -> Result<Vec<Example>> {
        data.samples.iter().map(|s| Example::from_sample(s, &self.fbp)).collect()
    }

    /// Objective and (optionally) parameter gradients for one minibatch.
    /// Per-example objectives are averaged over the batch.
    pub fn batch_step(&mut self, batch: &[&Example], mode: Mode, with_grads: bool) -> Result<(BatchLoss, Option<StepGradients>)> {
        if batch.is_empty() {
            return domain("empty batch");
        }
        if self.config.arch.projection_first() {
            self.projection_step(batch, mode, with_grads)
        } else {
            self.image_step(batch, mode, with_grads)
        }
    }

    fn image_step(&mut self, batch: &[&Example], mode: Mode, with_grads: bool) -> Result<(BatchLoss, Option<StepGradients>)> {
        let opts = self.config.loss;
        let inv_b = 1.0 / batch.len() as f64;
        let (ny, nx, s) = (self.grid.ny, self.grid.nx, self.image_scale);
        let m1 = self.stage1.size_multiple();
        let x1 = pack(&batch.iter().map(|e| &e.q.values[..]).collect::<Vec<_>>(), ny, nx, m1, 1.0 / s);
        let tr1 = self.stage1.forward(&x1, mode)?;
        let mut loss = BatchLoss::default();
        let w = inv_b / (s * s);
        let mut g1 = Vec::with_capacity(batch.len());
        let mut q_bars = Vec::new();
        let rois: Vec<Vec<f64>> = batch.iter().map(|e| e.roi.as_f64()).collect();
        for (i, e) in batch.iter().enumerate() {
            let out = crop(tr1.output(0), i, ny, nx, s);
            let (l, g) = masked_sq_error(&sub(&e.q.values, &e.f.values), &out, &rois[i], opts.reduction)?;
            loss.terms[0] += l * inv_b;
            g1.push(scaled(g, w));
            if self.stage2.is_some() {
                q_bars.push(sub(&e.q.values, &out));
            }
        }
        let mut grads2 = None;
        if let Some(net2) = self.stage2.as_mut() {
            let m2 = net2.size_multiple();
            let x2 = pack(&q_bars.iter().map(|v| &v[..]).collect::<Vec<_>>(), ny, nx, m2, 1.0 / s);
            let tr2 = net2.forward(&x2, mode)?;
            let mut g2 = Vec::with_capacity(batch.len());
            for (i, e) in batch.iter().enumerate() {
                let out = crop(tr2.output(0), i, ny, nx, s);
                let (l, g) = masked_sq_error(&sub(&q_bars[i], &e.f.values), &out, &rois[i], opts.reduction)?;
                loss.terms[1] += l * inv_b;
                g2.push(scaled(g, w));
            }
            if with_grads {
                let gr = net2.backward(&tr2, &[Some(&crop_adjoint(&g2, ny, nx, m2, s))])?;
                if !opts.stage_barrier {
                    // q̄ = q − out1 feeds both the stage-2 target and its input.
                    for i in 0..batch.len() {
                        let through_input = unpack_adjoint(&gr.input, i, ny, nx, 1.0 / s);
                        for (k, g) in g1[i].iter_mut().enumerate() {
                            *g -= -g2[i][k] + through_input[k];
                        }
                    }
                }
                grads2 = Some(gr.params);
            }
        }
        loss.total = (loss.terms[0] + loss.terms[1]) / (s * s);
        if !with_grads {
            return Ok((loss, None));
        }
        let gr1 = self.stage1.backward(&tr1, &[Some(&crop_adjoint(&g1, ny, nx, m1, s))])?;
        Ok((loss, Some(StepGradients { stage1: gr1.params, stage2: grads2 })))
    }

    fn projection_step(&mut self, batch: &[&Example], mode: Mode, with_grads: bool) -> Result<(BatchLoss, Option<StepGradients>)> {
        let opts = self.config.loss;
        let inv_b = 1.0 / batch.len() as f64;
        let (nv, nd, ss) = (self.geom.n_views, self.geom.n_dets, self.sino_scale);
        let (ny, nx, si) = (self.grid.ny, self.grid.nx, self.image_scale);
        let m1 = self.stage1.size_multiple();
        let x1 = pack(&batch.iter().map(|e| &e.p.values[..]).collect::<Vec<_>>(), nv, nd, m1, 1.0 / ss);
        let tr1 = self.stage1.forward(&x1, mode)?;
        let mut loss = BatchLoss::default();
        let (wn, wi) = (inv_b / (ss * ss), inv_b / (si * si));
        let (mut gh, mut gz, mut q_bars) = (Vec::new(), Vec::new(), Vec::new());
        for (i, e) in batch.iter().enumerate() {
            let h = Sinogram { geom: self.geom, values: crop(tr1.output(0), i, nv, nd, ss) };
            let z = Sinogram { geom: self.geom, values: crop(tr1.output(1), i, nv, nd, ss) };
            let pl = loss_projection_unet(&self.fbp, &e.p, &e.y, &e.f, &e.t, &e.roi, &h, &z, opts)?;
            loss.terms[0] += pl.noise * inv_b;
            loss.terms[1] += pl.image * inv_b;
            let (mut h_grad, mut z_grad) = (scaled(pl.grad_noise.values, wn), vec![0.0; pl.grad_corrected.values.len()]);
            for (k, &m) in e.t.values().iter().enumerate() {
                if m == 0 {
                    z_grad[k] = wi * pl.grad_corrected.values[k];
                } else if !opts.detach_noise {
                    h_grad[k] -= wi * pl.grad_corrected.values[k];
                }
            }
            gh.push(h_grad);
            gz.push(z_grad);
            q_bars.push(pl.q_bar.values);
        }
        let mut grads2 = None;
        if let Some(net2) = self.stage2.as_mut() {
            let m2 = net2.size_multiple();
            let x2 = pack(&q_bars.iter().map(|v| &v[..]).collect::<Vec<_>>(), ny, nx, m2, 1.0 / si);
            let tr2 = net2.forward(&x2, mode)?;
            let mut g2 = Vec::with_capacity(batch.len());
            for (i, e) in batch.iter().enumerate() {
                let out = crop(tr2.output(0), i, ny, nx, si);
                let (l, g) = masked_sq_error(&sub(&q_bars[i], &e.f.values), &out, &e.roi.as_f64(), opts.reduction)?;
                loss.terms[2] += l * inv_b;
                g2.push(scaled(g, wi));
            }
            if with_grads {
                let gr = net2.backward(&tr2, &[Some(&crop_adjoint(&g2, ny, nx, m2, si))])?;
                if !opts.stage_barrier {
                    for (i, e) in batch.iter().enumerate() {
                        let through_input = unpack_adjoint(&gr.input, i, ny, nx, 1.0 / si);
                        let dq: Vec<f64> = g2[i].iter().zip(&through_input).map(|(a, b)| -a + b).collect();
                        let ds = self.fbp.adjoint(&Image::from_values(self.grid, dq)?)?;
                        for (k, &m) in e.t.values().iter().enumerate() {
                            if m == 1 {
                                gh[i][k] -= ds.values[k];
                            } else {
                                gz[i][k] += ds.values[k];
                            }
                        }
                    }
                }
                grads2 = Some(gr.params);
            }
        }
        loss.total = loss.terms[0] / (ss * ss) + (loss.terms[1] + loss.terms[2]) / (si * si);
        if !with_grads {
            return Ok((loss, None));
        }
        let gh_t = crop_adjoint(&gh, nv, nd, m1, ss);
        let gz_t = crop_adjoint(&gz, nv, nd, m1, ss);
        let gr1 = self.stage1.backward(&tr1, &[Some(&gh_t), Some(&gz_t)])?;
        Ok((loss, Some(StepGradients { stage1: gr1.params, stage2: grads2 })))
    }

    /// Mean objective over `examples` without updating anything.
    pub fn dataset_loss(&self, examples: &[Example], mode: Mode) -> Result<f64> {
        let mut scratch = self.clone();
        let bs = self.config.batch_size;
        let mut total = 0.0;
        for chunk in examples.chunks(bs) {
            let refs: Vec<&Example> = chunk.iter().collect();
            total += scratch.batch_step(&refs, mode, false)?.0.total * chunk.len() as f64;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    fn predict_image(net: &NetworkGraph<f32>, img: &[f64], grid: &ImageGrid, scale: f64) -> Result<Vec<f64>> {
        let x = pack(&[img], grid.ny, grid.nx, net.size_multiple(), 1.0 / scale);
        Ok(crop(net.predict(&x)?.output(0), 0, grid.ny, grid.nx, scale))
    }

    /// Reconstruction with the first-stage estimate exposed.
    pub fn reconstruct_stages(&self, p: &Sinogram, t: &ProjectionMask) -> Result<Reconstruction> {
        if p.geom != self.geom || !t.matches(&self.geom) {
            return shape("sinogram or mask does not match the model geometry");
        }
        let roi = roi_mask(&self.grid, &self.geom, t)?;
        let first = if self.config.arch.projection_first() {
            let (nv, nd) = (self.geom.n_views, self.geom.n_dets);
            let x = pack(&[&p.values], nv, nd, self.stage1.size_multiple(), 1.0 / self.sino_scale);
            let tr = self.stage1.predict(&x)?;
            let h = Sinogram { geom: self.geom, values: crop(tr.output(0), 0, nv, nd, self.sino_scale) };
            let z = Sinogram { geom: self.geom, values: crop(tr.output(1), 0, nv, nd, self.sino_scale) };
            self.fbp.apply(&super::compose_corrected_sinogram(p, &h, &z, t)?)?.values
        } else {
            let q = self.fbp.apply(p)?.values;
            let out = Self::predict_image(&self.stage1, &q, &self.grid, self.image_scale)?;
            sub(&q, &out)
        };
        let (intermediate, mut values) = match &self.stage2 {
            Some(net2) => {
                let out = Self::predict_image(net2, &first, &self.grid, self.image_scale)?;
                (Some(Image::from_values(self.grid, first.clone())?), sub(&first, &out))
            }
            None => (None, first),
        };
        for (v, &m) in values.iter_mut().zip(roi.values()) {
            if m == 0 {
                *v = 0.0;
            }
        }
        Ok(Reconstruction { intermediate, image: Image::from_values(self.grid, values)?, roi })
    }

    /// Last backbone feature maps of the first stage for one input, one
    /// row-major `h×w` map per channel with the padding cropped away.
    pub fn stage1_features(&self, p: &Sinogram, t: &ProjectionMask) -> Result<Vec<Vec<f64>>> {
        if p.geom != self.geom || !t.matches(&self.geom) {
            return shape("sinogram or mask does not match the model geometry");
        }
        let m = self.stage1.size_multiple();
        let (x, h, w) = if self.config.arch.projection_first() {
            let (nv, nd) = (self.geom.n_views, self.geom.n_dets);
            (pack(&[&p.values], nv, nd, m, 1.0 / self.sino_scale), nv, nd)
        } else {
            let q = self.fbp.apply(p)?.values;
            (pack(&[&q], self.grid.ny, self.grid.nx, m, 1.0 / self.image_scale), self.grid.ny, self.grid.nx)
        };
        let tr = self.stage1.predict(&x)?;
        let f = tr.features();
        let (c, wp) = (f.channels(), f.width());
        let item = f.item(0);
        Ok((0..c)
            .map(|k| {
                let plane = &item[k * f.plane()..(k + 1) * f.plane()];
                (0..h).flat_map(|i| plane[i * wp..i * wp + w].iter().map(|&v| v as f64)).collect()
            })
            .collect())
    }

    /// Final image estimate inside the ROI implied by `t`; zero outside.
    pub fn reconstruct(&self, p: &Sinogram, t: &ProjectionMask) -> Result<Image> {
        Ok(self.reconstruct_stages(p, t)?.image)
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}

/// Data-derived normalisation: RMS of the clean sinograms and of the images.
pub fn data_scales(data: &Dataset) -> Result<(f64, f64)> {
    let sino = rms(data.samples.iter().flat_map(|s| s.y.values.iter().copied()));
    let image = rms(data.samples.iter().flat_map(|s| s.f.values.iter().copied()));
    if !(sino > 0.0 && image > 0.0) {
        return domain("training data is identically zero");
    }
    Ok((sino, image))
}

pub fn train(cfg: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<(TrainedModel, LossCurves)> {
    train_with_progress(cfg, train, val, |_| {})
}

/// Minibatch Adam with plateau learning-rate decay. The plateau schedule
/// watches the validation loss, or the training loss when no validation set
/// is given. Deterministic for a fixed seed.
pub fn train_with_progress(
    cfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<(TrainedModel, LossCurves)> {
    let mut session = TrainingSession::start(cfg, train)?;
    session.run(train, val, cfg.epochs, |r, _| {
        on_epoch(r);
        Ok(())
    })?;
    Ok((session.model, session.curves))
}

/// Model, optimiser states and loss history of a training run; everything
/// needed to continue it bit-for-bit after an interruption.
#[derive(Clone)]
pub struct TrainingSession {
    pub model: TrainedModel,
    pub opt1: OptimState,
    pub opt2: Option<OptimState>,
    pub curves: LossCurves,
}

impl TrainingSession {
    /// Fresh model with scales taken from `train`.
    pub fn start(cfg: &TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let Some(first) = train.samples.first() else {
            return config("training set is empty");
        };
        let (sino_scale, image_scale) = data_scales(train)?;
        let model = TrainedModel::new(cfg.clone(), first.f.grid, first.y.geom, sino_scale, image_scale)?;
        Ok(Self::from_model(model))
    }

    /// Session around an existing model with fresh optimiser states.
    pub fn from_model(model: TrainedModel) -> Self {
        let lr = model.config.lr;
        let opt1 = OptimState::new(&model.stage1, lr);
        let opt2 = model.stage2.as_ref().map(|n| OptimState::new(n, lr));
        Self { model, opt1, opt2, curves: LossCurves::default() }
    }

    /// Trains until `model.epochs_run == until`. `on_epoch` runs after each
    /// epoch with the updated session; an error from it stops training.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        until: usize,
        mut on_epoch: impl FnMut(&EpochReport, &TrainingSession) -> Result<()>,
    ) -> Result<()> {
        let (grid, geom) = (self.model.grid, self.model.geom);
        let consistent = |d: &Dataset| d.samples.iter().all(|s| s.f.grid == grid && s.y.geom == geom);
        if train.is_empty() {
            return config("training set is empty");
        }
        if !consistent(train) || !val.is_none_or(consistent) {
            return config("all samples must share the model's grid and geometry");
        }
        let examples = self.model.examples(train)?;
        let val_examples = match val {
            Some(v) if !v.is_empty() => Some(self.model.examples(v)?),
            _ => None,
        };
        let cfg = self.model.config.clone();
        for epoch in self.model.epochs_run..until {
            let start = Instant::now();
            let mut rng = stream_rng(cfg.seed, TRAIN_STREAM + epoch as u64);
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Cow<Example>> = chunk
                    .iter()
                    .map(|&i| -> Result<Cow<Example>> {
                        if cfg.flip && rng.random_bool(0.5) {
                            Ok(Cow::Owned(examples[i].flipped()?))
                        } else {
                            Ok(Cow::Borrowed(&examples[i]))
                        }
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&Example> = batch.iter().map(|c| c.as_ref()).collect();
                let (loss, grads) = self.model.batch_step(&refs, Mode::Train, true)?;
                if !loss.total.is_finite() {
                    return Err(Error::Numerical(format!("training loss became {} in epoch {}", loss.total, epoch + 1)));
                }
                let grads = grads.expect("gradients requested");
                adam_step_net(&mut self.model.stage1, &grads.stage1, &mut self.opt1)?;
                if let (Some(net2), Some(g2), Some(o2)) = (self.model.stage2.as_mut(), grads.stage2.as_ref(), self.opt2.as_mut()) {
                    adam_step_net(net2, g2, o2)?;
                }
                sum += loss.total * chunk.len() as f64;
            }
            let train_loss = sum / examples.len() as f64;
            let val_loss = match &val_examples {
                Some(v) => self.model.dataset_loss(v, Mode::Eval)?,
                None => train_loss,
            };
            let lr = self.opt1.lr;
            self.opt1.observe_validation(val_loss);
            if let Some(o2) = self.opt2.as_mut() {
                o2.observe_validation(val_loss);
            }
            self.model.epochs_run = epoch + 1;
            self.curves.train.push(train_loss);
            self.curves.val.push(val_loss);
            self.curves.lr.push(lr);
            let report = EpochReport { epoch: epoch + 1, train_loss, val_loss, lr, seconds: start.elapsed().as_secs_f64() };
            on_epoch(&report, self)?;
        }
        Ok(())
    }
}

/// Whether `reduction` names a known mode.
pub fn parse_reduction(s: &str) -> Result<Reduction> {
    match s {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        _ => config(format!("unknown reduction '{s}' (expected mean or sum)")),
    }
}
