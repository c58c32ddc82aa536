//! The layer set: convolution, batch normalisation, activations, resampling,
//! pooling, affine maps, dropout, plus the small reductions used to combine
//! losses.

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{BatchStats, Graph, Mode, NodeId, Op};
use super::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// conv2d

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, wd] = x[..] else {
            return Err(Error::shape(format!("conv2d input must be [N,C,H,W], got {x:?}")));
        };
        let [cout, wcin, kh, kw] = w[..] else {
            return Err(Error::shape(format!("conv2d weight must be [Cout,Cin,kH,kW], got {w:?}")));
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but weight expects Cin={wcin}"
            )));
        }
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {ph}x{pw} (H={h}, W={wd}, pad={pad})"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d output extent is not integral: (H+2·pad−kH)={} and (W+2·pad−kW)={} with stride {stride}",
                ph - kh,
                pw - kw
            )));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 stride-1 unpadded convolutions read the input directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output column range `[lo, hi)` for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.wo && (lo * self.stride + kx) < self.pad {
            lo += 1;
        }
        let mut hi = self.wo;
        while hi > lo && (hi - 1) * self.stride + kx >= self.pad + self.w {
            hi -= 1;
        }
        (lo, hi)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[ix] = dst[ix] + s[ox];
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geom: ConvGeom,
}

impl<T: Scalar> Op<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (k, p) = (g.k(), g.p());
        let in_sz = g.cin * g.h * g.w;
        let out_sz = g.cout * p;
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        let mut dcol = if g.is_pointwise() || dx.is_none() { Vec::new() } else { vec![T::zero(); k * p] };
        for s in 0..g.n {
            let xs = &x[s * in_sz..(s + 1) * in_sz];
            let gys = &gy[s * out_sz..(s + 1) * out_sz];
            if let Some(dw) = dw.as_mut() {
                let colv: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, &mut col);
                    &col
                };
                // dW[co,k] += Σ_p gy[co,p] · col[k,p]
                T::gemm(g.cout, p, k, gys, (p, 1), colv, (1, p), dw, k, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
                if g.is_pointwise() {
                    T::gemm(k, g.cout, p, w, (1, k), gys, (p, 1), dxs, p, true);
                } else {
                    T::gemm(k, g.cout, p, w, (1, k), gys, (p, 1), &mut dcol, p, false);
                    col2im_add(&dcol, g, dxs);
                }
            }
        }
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0f64; g.cout];
                for s in 0..g.n {
                    for (co, acc) in db.iter_mut().enumerate() {
                        let base = s * out_sz + co * p;
                        *acc += gy[base..base + p].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                db.into_iter().map(T::from_f64).collect()
            }));
        }
        out
    }
}

/// Cross-correlation of `x: [N,Cin,H,W]` with `weight: [Cout,Cin,kH,kW]`.
pub fn conv2d<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let geom = ConvGeom::new(g.shape(x), g.shape(weight), stride, pad)?;
    if let Some(b) = bias {
        if g.shape(b) != [geom.cout] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{}], got {:?}",
                geom.cout,
                g.shape(b)
            )));
        }
    }
    let value = conv2d_forward(g.value(x), g.value(weight), bias.map(|b| g.value(b)), &geom);
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(g.push(value, inputs, Box::new(Conv2dOp { geom })))
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_sz];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..g.n {
        let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
        let colv: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        let os = &mut out[s * out_sz..(s + 1) * out_sz];
        T::gemm(g.cout, k, p, w.data(), (k, 1), colv, (p, 1), os, p, false);
        if let Some(b) = b {
            for (co, bv) in b.data().iter().enumerate() {
                for v in &mut os[co * p..(co + 1) * p] {
                    *v = *v + *bv;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out).expect("conv2d output shape")
}

/// Direct nested-loop convolution. Slow; used as a reference.
pub fn conv2d_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let od = out.data_mut();
    for s in 0..g.n {
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co].as_f64());
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = w.data()[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                                acc += xv.as_f64() * wv.as_f64();
                            }
                        }
                    }
                    od[((s * g.cout + co) * g.ho + oy) * g.wo + ox] = T::from_f64(acc);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// batch normalisation

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { eps: 1e-5, momentum: 0.1 }
    }
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + m * *b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

struct BatchNormOp<T> {
    train: bool,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    dims: (usize, usize, usize),
}

impl<T: Scalar> Op<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, hw) = self.dims;
        let gamma = inputs[1].data();
        let m = (n * hw) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    sum_dy[ch] += gy[i].as_f64();
                    sum_dy_xhat[ch] += (gy[i] * self.xhat[i]).as_f64();
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); gy.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let scale = gamma[ch] * self.inv_std[ch];
                    if self.train {
                        let mean_dy = T::from_f64(sum_dy[ch] / m);
                        let mean_dyx = T::from_f64(sum_dy_xhat[ch] / m);
                        for i in base..base + hw {
                            dx[i] = scale * (gy[i] - mean_dy - self.xhat[i] * mean_dyx);
                        }
                    } else {
                        for i in base..base + hw {
                            dx[i] = scale * gy[i];
                        }
                    }
                }
            }
            dx
        });
        let dgamma = needs[1].then(|| sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect());
        let dbeta = needs[2].then(|| sum_dy.iter().map(|&v| T::from_f64(v)).collect());
        vec![dx, dgamma, dbeta]
    }
}

/// Per-channel normalisation of `x: [N,C,H,W]`.
///
/// Train mode normalises with the biased batch statistics and, when `slot`
/// is given, records them on the graph for a later running-stat update.
/// Eval mode normalises with `running`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    running: &RunningStats<T>,
    config: BatchNormConfig,
    mode: Mode,
    slot: Option<usize>,
) -> Result<NodeId> {
    let (n, c, h, w) = g.value(x).dims4()?;
    for (what, node) in [("gamma", gamma), ("beta", beta)] {
        if g.shape(node) != [c] {
            return Err(Error::shape(format!("batch_norm2d {what} must be [{c}], got {:?}", g.shape(node))));
        }
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape(format!("batch_norm2d running stats do not have {c} channels")));
    }
    let hw = h * w;
    let train = mode == Mode::Train;
    if train && n * hw < 2 {
        return Err(Error::invalid(format!(
            "batch_norm2d in train mode needs at least 2 values per channel, got N·H·W = {}",
            n * hw
        )));
    }
    let xd = g.value(x).data();
    let (mean, var): (Vec<T>, Vec<T>) = if train {
        let m = (n * hw) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                mean[ch] += xd[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                var[ch] += xd[base..base + hw]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean[ch];
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m;
        }
        (
            mean.into_iter().map(T::from_f64).collect(),
            var.into_iter().map(T::from_f64).collect(),
        )
    } else {
        (running.mean.clone(), running.var.clone())
    };
    let eps = T::from_f64(config.eps);
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let gd = g.value(gamma).data();
    let bd = g.value(beta).data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
    }
    let value = Tensor::new(vec![n, c, h, w], out)?;
    let node = g.push(
        value,
        vec![x, gamma, beta],
        Box::new(BatchNormOp {
            train,
            xhat,
            inv_std,
            dims: (n, c, hw),
        }),
    );
    if let (true, Some(slot)) = (train, slot) {
        g.record_batch_stats(BatchStats { slot, mean, var });
    }
    Ok(node)
}

// ---------------------------------------------------------------------------
// activations

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    ChannelSoftmax,
}

pub fn activation<T: Scalar>(g: &mut Graph<T>, x: NodeId, kind: Activation) -> Result<NodeId> {
    match kind {
        Activation::Relu => Ok(relu(g, x)),
        Activation::ChannelSoftmax => channel_softmax(g, x),
    }
}

struct ReluOp;

impl<T: Scalar> Op<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![Some(
            x.iter()
                .zip(gy)
                .map(|(xv, g)| if *xv > T::zero() { *g } else { T::zero() })
                .collect(),
        )]
    }
}

pub fn relu<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let xv = g.value(x);
    let out = Tensor::new(
        xv.shape().to_vec(),
        xv.data().iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect(),
    )
    .expect("relu shape");
    g.push(out, vec![x], Box::new(ReluOp))
}

/// `(N, C, inner)` layout for softmax over axis 1.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("channel softmax needs a channel axis, got shape {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Softmax over axis 1 of `x: [N,C,...]`, stabilised by max subtraction.
pub fn softmax_channels<T: Scalar>(x: &[T], n: usize, c: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        let base = s * c * inner;
        for i in 0..inner {
            let mut mx = T::neg_infinity();
            for k in 0..c {
                mx = mx.max(x[base + k * inner + i]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (x[base + k * inner + i] - mx).exp();
                out[base + k * inner + i] = e;
                z = z + e;
            }
            for k in 0..c {
                let j = base + k * inner + i;
                out[j] = out[j] / z;
            }
        }
    }
    out
}

struct ChannelSoftmaxOp {
    layout: (usize, usize, usize),
}

impl<T: Scalar> Op<T> for ChannelSoftmaxOp {
    fn name(&self) -> &'static str {
        "channel_softmax"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, inner) = self.layout;
        let y = output.data();
        let mut dx = vec![T::zero(); y.len()];
        for s in 0..n {
            let base = s * c * inner;
            for i in 0..inner {
                let mut dot = T::zero();
                for k in 0..c {
                    let j = base + k * inner + i;
                    dot = dot + y[j] * gy[j];
                }
                for k in 0..c {
                    let j = base + k * inner + i;
                    dx[j] = y[j] * (gy[j] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

pub fn channel_softmax<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let layout = channel_layout(g.shape(x))?;
    let xv = g.value(x);
    let out = Tensor::new(xv.shape().to_vec(), softmax_channels(xv.data(), layout.0, layout.1, layout.2))?;
    Ok(g.push(out, vec![x], Box::new(ChannelSoftmaxOp { layout })))
}

// ---------------------------------------------------------------------------
// resampling, concatenation, pooling

struct Upsample2xOp {
    dims: (usize, usize, usize, usize),
}

impl<T: Scalar> Op<T> for Upsample2xOp {
    fn name(&self) -> &'static str {
        "upsample_nearest2x"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, h, w) = self.dims;
        let w2 = 2 * w;
        let mut dx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let src = &gy[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let a = 2 * y * w2 + 2 * x;
                    dst[y * w + x] = src[a] + src[a + 1] + src[a + w2] + src[a + w2 + 1];
                }
            }
        }
        vec![Some(dx)]
    }
}

pub fn upsample_nearest2x<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let (n, c, h, w) = g.value(x).dims4()?;
    let xd = g.value(x).data();
    let w2 = 2 * w;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let a = 2 * y * w2 + 2 * x;
                dst[a] = v;
                dst[a + 1] = v;
                dst[a + w2] = v;
                dst[a + w2 + 1] = v;
            }
        }
    }
    let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
    Ok(g.push(value, vec![x], Box::new(Upsample2xOp { dims: (n, c, h, w) })))
}

struct ConcatOp {
    n: usize,
    a_len: usize,
    b_len: usize,
}

impl<T: Scalar> Op<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a_len, b_len) = (self.a_len, self.b_len);
        let mut da = needs[0].then(|| Vec::with_capacity(self.n * a_len));
        let mut db = needs[1].then(|| Vec::with_capacity(self.n * b_len));
        for s in 0..self.n {
            let row = &gy[s * (a_len + b_len)..(s + 1) * (a_len + b_len)];
            if let Some(da) = da.as_mut() {
                da.extend_from_slice(&row[..a_len]);
            }
            if let Some(db) = db.as_mut() {
                db.extend_from_slice(&row[a_len..]);
            }
        }
        vec![da, db]
    }
}

/// Concatenate `[N,Ca,H,W]` and `[N,Cb,H,W]` along channels.
pub fn concat_channels<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (na, ca, ha, wa) = g.value(a).dims4()?;
    let (nb, cb, hb, wb) = g.value(b).dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels needs matching N,H,W: got {:?} and {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let (a_len, b_len) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(na * (a_len + b_len));
    {
        let (ad, bd) = (g.value(a).data(), g.value(b).data());
        for s in 0..na {
            out.extend_from_slice(&ad[s * a_len..(s + 1) * a_len]);
            out.extend_from_slice(&bd[s * b_len..(s + 1) * b_len]);
        }
    }
    let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
    Ok(g.push(value, vec![a, b], Box::new(ConcatOp { n: na, a_len, b_len })))
}

struct GapOp {
    hw: usize,
}

impl<T: Scalar> Op<T> for GapOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let inv = T::from_f64(1.0 / self.hw as f64);
        let mut dx = Vec::with_capacity(gy.len() * self.hw);
        for g in gy {
            dx.extend(std::iter::repeat_n(*g * inv, self.hw));
        }
        vec![Some(dx)]
    }
}

/// Spatial mean of `[N,C,H,W]`, giving `[N,C]`.
pub fn global_avg_pool<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let (n, c, h, w) = g.value(x).dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("global_avg_pool needs H,W ≥ 1"));
    }
    let out: Vec<T> = g
        .value(x)
        .data()
        .chunks(hw)
        .map(|plane| T::from_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
        .collect();
    let value = Tensor::new(vec![n, c], out)?;
    Ok(g.push(value, vec![x], Box::new(GapOp { hw })))
}

// ---------------------------------------------------------------------------
// linear

struct LinearOp {
    n: usize,
    din: usize,
    dout: usize,
}

impl<T: Scalar> Op<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, din, dout) = (self.n, self.din, self.dout);
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * din];
            T::gemm(n, dout, din, gy, (dout, 1), w, (din, 1), &mut dx, din, false);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); dout * din];
            T::gemm(dout, n, din, gy, (1, dout), x, (din, 1), &mut dw, din, false);
            dw
        });
        let db = needs[2].then(|| {
            (0..dout)
                .map(|o| T::from_f64((0..n).map(|s| gy[s * dout + o].as_f64()).sum()))
                .collect()
        });
        vec![dx, dw, db]
    }
}

/// `x·Wᵀ + b` for `x: [N,Din]`, `W: [Dout,Din]`, `b: [Dout]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let (n, din) = g.value(x).dims2()?;
    let (dout, wdin) = g.value(weight).dims2()?;
    if wdin != din {
        return Err(Error::shape(format!("linear input has Din={din} but weight is {dout}x{wdin}")));
    }
    if g.shape(bias) != [dout] {
        return Err(Error::shape(format!("linear bias must be [{dout}], got {:?}", g.shape(bias))));
    }
    let mut out = vec![T::zero(); n * dout];
    T::gemm(n, din, dout, g.value(x).data(), (din, 1), g.value(weight).data(), (1, din), &mut out, dout, false);
    let bd = g.value(bias).data();
    for row in out.chunks_mut(dout.max(1)) {
        for (v, b) in row.iter_mut().zip(bd) {
            *v = *v + *b;
        }
    }
    let value = Tensor::new(vec![n, dout], out)?;
    Ok(g.push(value, vec![x, weight, bias], Box::new(LinearOp { n, din, dout })))
}

// ---------------------------------------------------------------------------
// dropout

struct DropoutOp<T> {
    mask: Vec<T>,
}

impl<T: Scalar> Op<T> for DropoutOp<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(gy.iter().zip(&self.mask).map(|(g, m)| *g * *m).collect())]
    }

    fn is_stochastic(&self) -> bool {
        true
    }
}

/// Inverted dropout. The identity in eval mode or at rate 0.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: NodeId, rate: f64) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must lie in [0,1), got {rate}")));
    }
    if g.mode() == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let numel = g.value(x).numel();
    let mask: Vec<T> = (0..numel)
        .map(|_| if g.rng().random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let xv = g.value(x);
    let out = Tensor::new(
        xv.shape().to_vec(),
        xv.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect(),
    )?;
    Ok(g.push(out, vec![x], Box::new(DropoutOp { mask })))
}

// ---------------------------------------------------------------------------
// plumbing: row selection and reductions

struct SelectRowsOp {
    indices: Vec<usize>,
    rows: usize,
    stride: usize,
}

impl<T: Scalar> Op<T> for SelectRowsOp {
    fn name(&self) -> &'static str {
        "select_rows"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); self.rows * self.stride];
        for (j, &i) in self.indices.iter().enumerate() {
            let src = &gy[j * self.stride..(j + 1) * self.stride];
            for (d, s) in dx[i * self.stride..(i + 1) * self.stride].iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
        vec![Some(dx)]
    }
}

/// Gather leading-axis rows; gradients scatter back.
pub fn select_rows<T: Scalar>(g: &mut Graph<T>, x: NodeId, indices: &[usize]) -> Result<NodeId> {
    let value = g.value(x).select_rows(indices)?;
    let rows = g.shape(x)[0];
    let stride = if rows == 0 { 0 } else { g.value(x).numel() / rows };
    Ok(g.push(
        value,
        vec![x],
        Box::new(SelectRowsOp {
            indices: indices.to_vec(),
            rows,
            stride,
        }),
    ))
}

struct WeightedSumOp<T> {
    weights: Vec<T>,
}

impl<T: Scalar> Op<T> for WeightedSumOp<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.weights.iter().map(|w| *w * gy[0]).collect())]
    }
}

/// `Σ wᵢ·xᵢ` over all elements, as a scalar.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
    if weights.len() != g.value(x).numel() {
        return Err(Error::shape(format!(
            "weighted_sum has {} weights for {} values",
            weights.len(),
            g.value(x).numel()
        )));
    }
    let total = g
        .value(x)
        .data()
        .iter()
        .zip(&weights)
        .map(|(v, w)| (*v * *w).as_f64())
        .sum::<f64>();
    Ok(g.push(Tensor::scalar(T::from_f64(total)), vec![x], Box::new(WeightedSumOp { weights })))
}

pub fn sum<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let n = g.value(x).numel();
    weighted_sum(g, x, vec![T::one(); n]).expect("matching weights")
}

pub fn mean<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let n = g.value(x).numel();
    let w = T::from_f64(1.0 / n.max(1) as f64);
    weighted_sum(g, x, vec![w; n]).expect("matching weights")
}

struct AddOp;

impl<T: Scalar> Op<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| gy.to_vec()), needs[1].then(|| gy.to_vec())]
    }
}

pub fn add<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!("add needs equal shapes, got {:?} and {:?}", g.shape(a), g.shape(b))));
    }
    let out = Tensor::new(
        g.shape(a).to_vec(),
        g.value(a).data().iter().zip(g.value(b).data()).map(|(x, y)| *x + *y).collect(),
    )?;
    Ok(g.push(out, vec![a, b], Box::new(AddOp)))
}

/// Sum of scalar nodes; `None` when the list is empty.
pub fn add_all<T: Scalar>(g: &mut Graph<T>, nodes: &[NodeId]) -> Result<Option<NodeId>> {
    let mut it = nodes.iter();
    let Some(&first) = it.next() else { return Ok(None) };
    let mut acc = first;
    for &n in it {
        acc = add(g, acc, n)?;
    }
    Ok(Some(acc))
}

struct ScaleOp<T> {
    factor: T,
}

impl<T: Scalar> Op<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(gy.iter().map(|g| *g * self.factor).collect())]
    }
}

pub fn scale<T: Scalar>(g: &mut Graph<T>, x: NodeId, factor: T) -> NodeId {
    let xv = g.value(x);
    let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| *v * factor).collect()).expect("scale shape");
    g.push(out, vec![x], Box::new(ScaleOp { factor }))
}
