//! Layer kernels with explicit forward and backward passes.

use super::{Scalar, Tensor};
use crate::error::{domain, shape, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients of a convolution.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn check_conv<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Result<()> {
    if k != 1 && k != 3 {
        return shape(format!("unsupported kernel size {k}"));
    }
    let cin = x.channels();
    if weight.len() != cout * cin * k * k {
        return shape(format!("weight has {} values, expected {cout}x{cin}x{k}x{k}", weight.len()));
    }
    if bias.len() != cout {
        return shape(format!("bias has {} values, expected {cout}", bias.len()));
    }
    Ok(())
}

/// Unfolds one item (C×H×W) into a (C·9)×(H·W) patch matrix with zero padding.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: accumulates patch columns back into the item.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    x.fill(T::zero());
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Same-padded cross-correlation with a `k×k` kernel, `k ∈ {1, 3}`.
/// `weight` is laid out as `[cout][cin][k][k]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Result<Tensor<T>> {
    check_conv(x, weight, bias, cout, k)?;
    let [n, cin, h, w] = x.dims();
    let hw = h * w;
    let kk = cin * k * k;
    let mut y = Tensor::zeros([n, cout, h, w]);
    let mut col = if k == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for b in 0..n {
        let out = y.item_mut(b);
        for (co, plane) in out.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        let src = if k == 3 {
            im2col(x.item(b), cin, h, w, &mut col);
            &col[..]
        } else {
            x.item(b)
        };
        T::gemm(cout, kk, hw, weight, false, src, false, out, T::one());
    }
    Ok(y)
}

pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, weight: &[T], cout: usize, k: usize, dy: &Tensor<T>) -> Result<ConvGrads<T>> {
    let [n, cin, h, w] = x.dims();
    if dy.dims() != [n, cout, h, w] {
        return shape(format!("output gradient {:?} does not match {:?}", dy.dims(), [n, cout, h, w]));
    }
    let hw = h * w;
    let kk = cin * k * k;
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = vec![T::zero(); cout * kk];
    let mut db = vec![T::zero(); cout];
    let mut col = vec![T::zero(); if k == 3 { kk * hw } else { 0 }];
    let mut dcol = vec![T::zero(); if k == 3 { kk * hw } else { 0 }];
    for b in 0..n {
        let g = dy.item(b);
        for (co, plane) in g.chunks_exact(hw).enumerate() {
            db[co] += plane.iter().copied().sum::<T>();
        }
        let src = if k == 3 {
            im2col(x.item(b), cin, h, w, &mut col);
            &col[..]
        } else {
            x.item(b)
        };
        // dW += dY · colᵀ ; dcol = Wᵀ · dY
        T::gemm(cout, hw, kk, g, false, src, true, &mut dw, T::one());
        if k == 3 {
            T::gemm(kk, cout, hw, weight, true, g, false, &mut dcol, T::zero());
            col2im(&dcol, cin, h, w, dx.item_mut(b));
        } else {
            T::gemm(kk, cout, hw, weight, true, g, false, dx.item_mut(b), T::zero());
        }
    }
    Ok(ConvGrads { input: dx, weight: dw, bias: db })
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Returns the output, the cache and, in train mode, the batch mean and
/// biased variance per channel (for the running-statistics update).
#[allow(clippy::type_complexity)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    state: &BnState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>, Option<(Vec<T>, Vec<T>)>)> {
    let [n, c, h, w] = x.dims();
    if gamma.len() != c || beta.len() != c || state.mean.len() != c {
        return shape(format!("batch norm over {} channels applied to {c}", gamma.len()));
    }
    let hw = h * w;
    let count = n * hw;
    if count == 0 {
        return domain("batch norm over an empty batch");
    }
    let eps = T::from_f64(BN_EPS);
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for b in 0..n {
                for (ci, plane) in x.item(b).chunks_exact(hw).enumerate() {
                    mean[ci] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for b in 0..n {
                for (ci, plane) in x.item(b).chunks_exact(hw).enumerate() {
                    let m = mean[ci];
                    var[ci] += plane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean.into_iter().map(T::from_f64).collect::<Vec<_>>(), var.into_iter().map(T::from_f64).collect::<Vec<_>>())
        }
        Mode::Eval => (state.mean.clone(), state.var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.dims());
    let mut y = Tensor::zeros(x.dims());
    for b in 0..n {
        let src = x.item(b);
        let xh = xhat.item_mut(b);
        for ci in 0..c {
            let r = ci * hw..(ci + 1) * hw;
            for (d, &s) in xh[r.clone()].iter_mut().zip(&src[r]) {
                *d = (s - mean[ci]) * inv_std[ci];
            }
        }
        let out = y.item_mut(b);
        for ci in 0..c {
            let r = ci * hw..(ci + 1) * hw;
            for (d, &s) in out[r.clone()].iter_mut().zip(&xhat.item(b)[r]) {
                *d = gamma[ci] * s + beta[ci];
            }
        }
    }
    let stats = (mode == Mode::Train).then_some((mean, var));
    Ok((y, BnCache { xhat, inv_std, mode }, stats))
}

/// Exponential running-average update with unbiased batch variance.
pub fn update_running_stats<T: Scalar>(state: &mut BnState<T>, mean: &[T], var: &[T], count: usize) {
    let mom = T::from_f64(BN_MOMENTUM);
    let unbias = if count > 1 { T::from_f64(count as f64 / (count - 1) as f64) } else { T::one() };
    for c in 0..mean.len() {
        state.mean[c] = (T::one() - mom) * state.mean[c] + mom * mean[c];
        state.var[c] = (T::one() - mom) * state.var[c] + mom * var[c] * unbias;
    }
}

pub fn batch_norm_backward<T: Scalar>(cache: &BnCache<T>, gamma: &[T], dy: &Tensor<T>) -> BnGrads<T> {
    let [n, c, h, w] = dy.dims();
    let hw = h * w;
    let count = T::from_f64((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        let g = dy.item(b);
        let xh = cache.xhat.item(b);
        for ci in 0..c {
            let r = ci * hw..(ci + 1) * hw;
            for (&gv, &xv) in g[r.clone()].iter().zip(&xh[r]) {
                dbeta[ci] += gv;
                dgamma[ci] += gv * xv;
            }
        }
    }
    let mut dx = Tensor::zeros(dy.dims());
    for b in 0..n {
        let g = dy.item(b);
        let xh = cache.xhat.item(b);
        let out = dx.item_mut(b);
        for ci in 0..c {
            let r = ci * hw..(ci + 1) * hw;
            let scale = gamma[ci] * cache.inv_std[ci];
            match cache.mode {
                Mode::Eval => {
                    for (d, &gv) in out[r.clone()].iter_mut().zip(&g[r]) {
                        *d = scale * gv;
                    }
                }
                Mode::Train => {
                    let (mb, mg) = (dbeta[ci] / count, dgamma[ci] / count);
                    for ((d, &gv), &xv) in out[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                        *d = scale * (gv - mb - xv * mg);
                    }
                }
            }
        }
    }
    BnGrads { input: dx, gamma: dgamma, beta: dbeta }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Backward through ReLU given its output; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return shape(format!("cannot pool odd dims {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    for (src, dst) in x.data().chunks_exact(h * w).zip(y.data_mut().chunks_exact_mut(ho * wo)) {
        for i in 0..ho {
            for j in 0..wo {
                let a = 2 * i * w + 2 * j;
                dst[i * wo + j] = (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]) * quarter;
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = unpool2(dy);
    dx.scale(T::from_f64(0.25));
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn unpool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    for (src, dst) in x.data().chunks_exact(h * w).zip(y.data_mut().chunks_exact_mut(ho * wo)) {
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    y
}

/// Transpose of [`unpool2`]: sums each 2×2 block.
pub fn unpool2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dy.dims();
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros([n, c, ho, wo]);
    for (src, dst) in dy.data().chunks_exact(h * w).zip(dx.data_mut().chunks_exact_mut(ho * wo)) {
        for i in 0..ho {
            for j in 0..wo {
                let a = 2 * i * w + 2 * j;
                dst[i * wo + j] = src[a] + src[a + 1] + src[a + w] + src[a + w + 1];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if na != nb || ha != hb || wa != wb {
        return shape(format!("cannot concatenate {:?} and {:?}", a.dims(), b.dims()));
    }
    if ca == 0 || cb == 0 {
        return shape("cannot concatenate an empty-channel tensor");
    }
    let mut y = Tensor::zeros([na, ca + cb, ha, wa]);
    for i in 0..na {
        let (la, lb) = (a.item(i).len(), b.item(i).len());
        let dst = y.item_mut(i);
        dst[..la].copy_from_slice(a.item(i));
        dst[la..la + lb].copy_from_slice(b.item(i));
    }
    Ok(y)
}

/// Splits a concatenation gradient back into its two parts.
pub fn concat_backward<T: Scalar>(dy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dy.dims();
    let mut da = Tensor::zeros([n, ca, h, w]);
    let mut db = Tensor::zeros([n, c - ca, h, w]);
    for i in 0..n {
        let split = ca * h * w;
        da.item_mut(i).copy_from_slice(&dy.item(i)[..split]);
        db.item_mut(i).copy_from_slice(&dy.item(i)[split..]);
    }
    (da, db)
}
