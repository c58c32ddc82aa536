//! Training objectives.
//!
//! Every loss is a fused graph op. The per-sample variants return an `[N]`
//! node so [`multi_task_loss`] can zero out rows that belong to other tasks.
//! Values and gradients are accumulated in `f64` whatever the graph scalar.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Graph, NodeId, Op, Scalar, Tensor};
use crate::instances::InstanceMap;
use crate::{Error, Result};

pub const DEFAULT_W0: f64 = 10.0;
pub const DEFAULT_SIGMA: f64 = 5.0;
pub const DEFAULT_DICE_EPS: f64 = 1.0;

/// Distance used for the second-nearest instance when a map has fewer than two.
pub const FAR_DISTANCE: f64 = 1.0e6;

fn layout<T: Scalar>(g: &Graph<T>, logits: NodeId) -> Result<(usize, usize, usize)> {
    let shape = g.shape(logits);
    if shape.len() < 2 {
        return Err(Error::shape(format!("logits need at least [N,K], got {shape:?}")));
    }
    let inner = shape[2..].iter().product::<usize>();
    Ok((shape[0], shape[1], inner))
}

fn log_softmax_at<T: Scalar>(x: &[T], base: usize, k: usize, inner: usize, i: usize, out: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for c in 0..k {
        mx = mx.max(x[base + c * inner + i].as_f64());
    }
    let mut z = 0.0;
    for c in 0..k {
        let v = x[base + c * inner + i].as_f64() - mx;
        out[c] = v;
        z += v.exp();
    }
    let lz = z.ln();
    for v in out.iter_mut() {
        *v -= lz;
    }
}

/// `out[n] = Σᵢ coef[n,i] · ce[n,i]` over the elements of sample `n`.
struct CrossEntropyOp {
    layout: (usize, usize, usize),
    targets: Vec<u32>,
    coef: Vec<f64>,
}

impl<T: Scalar> Op<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, k, inner) = self.layout;
        let x = inputs[0].data();
        let mut dx = vec![T::zero(); x.len()];
        let mut lp = vec![0.0; k];
        for s in 0..n {
            let base = s * k * inner;
            let go = gy[s].as_f64();
            for i in 0..inner {
                let e = s * inner + i;
                let c = self.coef[e] * go;
                if c == 0.0 {
                    continue;
                }
                log_softmax_at(x, base, k, inner, i, &mut lp);
                for (ch, l) in lp.iter().enumerate() {
                    let hit = if ch as u32 == self.targets[e] { 1.0 } else { 0.0 };
                    dx[base + ch * inner + i] = T::from_f64(c * (l.exp() - hit));
                }
            }
        }
        vec![Some(dx)]
    }
}

fn check_targets(targets: &[u32], k: usize, expected: usize) -> Result<()> {
    if targets.len() != expected {
        return Err(Error::shape(format!("{} targets for {expected} positions", targets.len())));
    }
    if let Some(t) = targets.iter().find(|t| **t as usize >= k) {
        return Err(Error::invalid(format!("target {t} outside [0, {k})")));
    }
    Ok(())
}

fn check_weights(weights: &[f64], expected: usize) -> Result<()> {
    if weights.len() != expected {
        return Err(Error::shape(format!("{} weights for {expected} positions", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::invalid(format!("weights must be positive and finite, found {w}")));
    }
    Ok(())
}

fn ce_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[u32],
    coef: Vec<f64>,
    (n, k, inner): (usize, usize, usize),
) -> NodeId {
    let x = g.value(logits).data();
    let mut out = vec![0.0; n];
    let mut lp = vec![0.0; k];
    for (s, o) in out.iter_mut().enumerate() {
        let base = s * k * inner;
        for i in 0..inner {
            let e = s * inner + i;
            if coef[e] == 0.0 {
                continue;
            }
            log_softmax_at(x, base, k, inner, i, &mut lp);
            *o -= coef[e] * lp[targets[e] as usize];
        }
    }
    let value = Tensor::new(vec![n], out.into_iter().map(T::from_f64).collect()).expect("loss shape");
    g.push(
        value,
        vec![logits],
        Box::new(CrossEntropyOp {
            layout: (n, k, inner),
            targets: targets.to_vec(),
            coef,
        }),
    )
}

/// Mean of `−log softmax(logits)[target]` over every sample and position.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
    let (n, k, inner) = layout(g, logits)?;
    check_targets(targets, k, n * inner)?;
    let c = 1.0 / (n * inner).max(1) as f64;
    let per = ce_node(g, logits, targets, vec![c; n * inner], (n, k, inner));
    Ok(ops::sum(g, per))
}

/// `Σ w·ce / Σ w` over every sample and position.
pub fn weighted_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[u32],
    weights: &[f64],
) -> Result<NodeId> {
    let (n, k, inner) = layout(g, logits)?;
    check_targets(targets, k, n * inner)?;
    check_weights(weights, n * inner)?;
    let total: f64 = weights.iter().sum();
    let coef = weights.iter().map(|w| w / total).collect();
    let per = ce_node(g, logits, targets, coef, (n, k, inner));
    Ok(ops::sum(g, per))
}

/// Per-sample weighted mean cross-entropy, shape `[N]`.
///
/// Without weights every position of a sample counts equally.
pub fn cross_entropy_per_sample<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[u32],
    weights: Option<&[f64]>,
) -> Result<NodeId> {
    let (n, k, inner) = layout(g, logits)?;
    check_targets(targets, k, n * inner)?;
    let mut coef = match weights {
        Some(w) => {
            check_weights(w, n * inner)?;
            w.to_vec()
        }
        None => vec![1.0; n * inner],
    };
    for chunk in coef.chunks_mut(inner.max(1)) {
        let total: f64 = chunk.iter().sum();
        chunk.iter_mut().for_each(|c| *c /= total);
    }
    Ok(ce_node(g, logits, targets, coef, (n, k, inner)))
}

/// Per-pixel loss weights for an instance map.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
    /// Class-balance floor for background and foreground.
    pub class_weights: [f64; 2],
}

impl WeightMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    pub fn min(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `w_c + w0·exp(−(d1+d2)²/(2σ²))`.
pub fn unet_weight(wc: f64, d1: f64, d2: f64, w0: f64, sigma: f64) -> f64 {
    let s = d1 + d2;
    wc + w0 * (-(s * s) / (2.0 * sigma * sigma)).exp()
}

/// Inverse-frequency weights for `[background, foreground]`, normalised so
/// that the expected weight under `freq` is one. Absent classes get one.
pub fn class_balance(freq: [f64; 2]) -> [f64; 2] {
    let present = freq.iter().filter(|f| **f > 0.0).count().max(1) as f64;
    freq.map(|f| if f > 0.0 { 1.0 / (present * f) } else { 1.0 })
}

/// Pixel frequencies `[background, foreground]` of a set of maps.
pub fn pixel_frequencies<'a>(maps: impl IntoIterator<Item = &'a InstanceMap>) -> [f64; 2] {
    let (mut fg, mut total) = (0usize, 0usize);
    for m in maps {
        fg += m.ids().iter().filter(|v| **v != 0).count();
        total += m.ids().len();
    }
    if total == 0 {
        return [1.0, 0.0];
    }
    let f = fg as f64 / total as f64;
    [1.0 - f, f]
}

/// Per-instance Euclidean distance from every pixel to the instance, computed
/// against the instance's boundary pixels. Pixels inside get 0.
fn instance_distances(map: &InstanceMap) -> Vec<Vec<f64>> {
    let (h, w) = (map.height(), map.width());
    let ids = map.ids();
    let mut borders: Vec<Vec<(f64, f64)>> = vec![Vec::new(); map.count() as usize];
    for r in 0..h {
        for c in 0..w {
            let id = ids[r * w + c];
            if id == 0 {
                continue;
            }
            let edge = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 || ids[rr as usize * w + cc as usize] != id
            });
            if edge {
                borders[id as usize - 1].push((r as f64, c as f64));
            }
        }
    }
    borders
        .iter()
        .enumerate()
        .map(|(k, border)| {
            let id = k as u32 + 1;
            (0..h * w)
                .map(|p| {
                    if ids[p] == id {
                        return 0.0;
                    }
                    let (r, c) = ((p / w) as f64, (p % w) as f64);
                    border
                        .iter()
                        .map(|(br, bc)| (br - r) * (br - r) + (bc - c) * (bc - c))
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

/// U-Net style weight map. `freq` is `[background, foreground]` pixel
/// frequency; when absent it is measured on `map` itself.
pub fn build_unet_weights(map: &InstanceMap, w0: f64, sigma: f64, freq: Option<[f64; 2]>) -> WeightMap {
    let wc = class_balance(freq.unwrap_or_else(|| pixel_frequencies([map])));
    let dist = instance_distances(map);
    let ids = map.ids();
    let weights = (0..ids.len())
        .map(|p| {
            let floor = wc[usize::from(ids[p] != 0)];
            if dist.is_empty() {
                return floor;
            }
            let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
            for d in &dist {
                let v = d[p];
                if v < d1 {
                    d2 = d1;
                    d1 = v;
                } else if v < d2 {
                    d2 = v;
                }
            }
            if !d2.is_finite() {
                d2 = FAR_DISTANCE;
            }
            unet_weight(floor, d1, d2, w0, sigma)
        })
        .collect();
    WeightMap {
        height: map.height(),
        width: map.width(),
        weights,
        class_weights: wc,
    }
}

struct DiceOp {
    layout: (usize, usize, usize),
    /// Per class: `(2I + eps, Y + P + eps)`.
    terms: Vec<(f64, f64)>,
    targets: Vec<u32>,
}

impl<T: Scalar> Op<T> for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, k, inner) = self.layout;
        let go = gy[0].as_f64();
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for s in 0..n {
            for c in 0..k {
                let (num, den) = self.terms[c];
                if den == 0.0 {
                    continue;
                }
                for i in 0..inner {
                    let y = if self.targets[s * inner + i] as usize == c { 1.0 } else { 0.0 };
                    dx[(s * k + c) * inner + i] = T::from_f64(-go * (2.0 * y * den - num) / (den * den));
                }
            }
        }
        vec![Some(dx)]
    }
}

/// `Σ_k 1 − (2·Σ y·p + eps)/(Σ y + Σ p + eps)`, sums over every sample and
/// position. A class whose denominator is zero contributes nothing.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: NodeId, targets: &[u32], eps: f64) -> Result<NodeId> {
    let (n, k, inner) = layout(g, probs)?;
    check_targets(targets, k, n * inner)?;
    if eps < 0.0 {
        return Err(Error::invalid(format!("dice eps must be non-negative, got {eps}")));
    }
    let p = g.value(probs).data();
    let mut acc = vec![(0.0, 0.0, 0.0); k];
    for s in 0..n {
        for c in 0..k {
            for i in 0..inner {
                let v = p[(s * k + c) * inner + i].as_f64();
                let y = targets[s * inner + i] as usize == c;
                let a = &mut acc[c];
                a.1 += v;
                if y {
                    a.0 += v;
                    a.2 += 1.0;
                }
            }
        }
    }
    let terms: Vec<(f64, f64)> = acc.iter().map(|(i, p, y)| (2.0 * i + eps, y + p + eps)).collect();
    let loss: f64 = terms.iter().filter(|(_, d)| *d > 0.0).map(|(num, den)| 1.0 - num / den).sum();
    Ok(g.push(
        Tensor::scalar(T::from_f64(loss)),
        vec![probs],
        Box::new(DiceOp {
            layout: (n, k, inner),
            terms,
            targets: targets.to_vec(),
        }),
    ))
}

struct MaskedCeDiceOp {
    layout: (usize, usize, usize),
    targets: Vec<u32>,
    fg: Vec<bool>,
    eps: f64,
    /// Per sample and class: `(|ν_k|, Σ_{ν_k} p_k)`.
    stats: Vec<(f64, f64)>,
}

impl<T: Scalar> Op<T> for MaskedCeDiceOp {
    fn name(&self) -> &'static str {
        "masked_ce_dice"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, k, inner) = self.layout;
        let x = inputs[0].data();
        let mut dx = vec![T::zero(); x.len()];
        let mut lp = vec![0.0; k];
        for s in 0..n {
            let go = gy[s].as_f64();
            let base = s * k * inner;
            for i in 0..inner {
                let e = s * inner + i;
                if !self.fg[e] {
                    continue;
                }
                let t = self.targets[e] as usize;
                let (count, sum) = self.stats[s * k + t];
                let den = count + sum + self.eps;
                let g_dice = -(2.0 * count + self.eps) / (den * den);
                log_softmax_at(x, base, k, inner, i, &mut lp);
                let pt = lp[t].exp();
                for (c, l) in lp.iter().enumerate() {
                    let p = l.exp();
                    let hit = if c == t { 1.0 } else { 0.0 };
                    let d = (p - hit) / count + g_dice * pt * (hit - p);
                    dx[base + c * inner + i] = T::from_f64(go * d);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Foreground-masked cross-entropy plus Dice, per sample, shape `[N]`.
///
/// `logits` are `[N,K,...]`; softmax is taken over the K channels. Only
/// positions with `fg` set contribute; `ν_k` is the set of those whose target
/// is `k`. Positions outside the mask are never read.
pub fn masked_ce_dice<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[u32],
    fg: &[bool],
    eps: f64,
) -> Result<NodeId> {
    let (n, k, inner) = layout(g, logits)?;
    if fg.len() != n * inner {
        return Err(Error::shape(format!("mask has {} positions, expected {}", fg.len(), n * inner)));
    }
    if targets.len() != n * inner {
        return Err(Error::shape(format!("{} targets for {} positions", targets.len(), n * inner)));
    }
    if let Some(t) = targets.iter().zip(fg).find(|(t, m)| **m && **t as usize >= k) {
        return Err(Error::invalid(format!("target {} outside [0, {k})", t.0)));
    }
    if eps < 0.0 {
        return Err(Error::invalid(format!("dice eps must be non-negative, got {eps}")));
    }
    let x = g.value(logits).data();
    let mut stats = vec![(0.0, 0.0); n * k];
    let mut ce = vec![0.0; n * k];
    let mut lp = vec![0.0; k];
    for s in 0..n {
        for i in 0..inner {
            let e = s * inner + i;
            if !fg[e] {
                continue;
            }
            let t = targets[e] as usize;
            log_softmax_at(x, s * k * inner, k, inner, i, &mut lp);
            let st = &mut stats[s * k + t];
            st.0 += 1.0;
            st.1 += lp[t].exp();
            ce[s * k + t] -= lp[t];
        }
    }
    let out: Vec<T> = (0..n)
        .map(|s| {
            let mut total = 0.0;
            for c in 0..k {
                let (count, sum) = stats[s * k + c];
                if count == 0.0 {
                    continue;
                }
                total += ce[s * k + c] / count;
                total += 1.0 - (2.0 * sum + eps) / (count + sum + eps);
            }
            T::from_f64(total)
        })
        .collect();
    Ok(g.push(
        Tensor::new(vec![n], out)?,
        vec![logits],
        Box::new(MaskedCeDiceOp {
            layout: (n, k, inner),
            targets: targets.to_vec(),
            fg: fg.to_vec(),
            eps,
            stats,
        }),
    ))
}

/// How per-task sums are combined into the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossAgg {
    /// Sum over every contributing sample.
    #[default]
    Sum,
    /// Each task's sum divided by its sample count.
    TaskMean,
}

/// Target of one row of a task output.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleTarget {
    /// Per-pixel classes with optional per-pixel weights.
    Pixels { classes: Vec<u32>, weights: Option<Vec<f64>> },
    /// Image-level label.
    Label(u32),
    /// Per-pixel subtype channel index, valid where `fg` is set.
    Subtype { classes: Vec<u32>, fg: Vec<bool> },
    /// Row belongs to another task; it is evaluated on a placeholder target
    /// and masked out.
    Masked,
}

/// Per-sample loss vector `[M]` for one decoder output of `M` rows.
pub fn sample_losses<T: Scalar>(g: &mut Graph<T>, logits: NodeId, targets: &[SampleTarget], eps: f64) -> Result<NodeId> {
    let (n, _, inner) = layout(g, logits)?;
    if targets.len() != n {
        return Err(Error::shape(format!("{} targets for {n} rows", targets.len())));
    }
    let kind = targets.iter().find(|t| !matches!(t, SampleTarget::Masked));
    match kind {
        None | Some(SampleTarget::Masked | SampleTarget::Pixels { .. } | SampleTarget::Label(_)) => {
            let mut classes = Vec::with_capacity(n * inner);
            let mut weights = Vec::with_capacity(n * inner);
            for t in targets {
                match t {
                    SampleTarget::Pixels { classes: c, weights: w } => {
                        if c.len() != inner || w.as_ref().is_some_and(|w| w.len() != inner) {
                            return Err(Error::shape(format!("pixel target does not cover {inner} positions")));
                        }
                        classes.extend_from_slice(c);
                        match w {
                            Some(w) => weights.extend_from_slice(w),
                            None => weights.extend(std::iter::repeat_n(1.0, inner)),
                        }
                    }
                    SampleTarget::Label(l) => {
                        classes.extend(std::iter::repeat_n(*l, inner));
                        weights.extend(std::iter::repeat_n(1.0, inner));
                    }
                    SampleTarget::Masked => {
                        classes.extend(std::iter::repeat_n(0, inner));
                        weights.extend(std::iter::repeat_n(1.0, inner));
                    }
                    SampleTarget::Subtype { .. } => {
                        return Err(Error::invalid("subtype and plain targets mixed in one output"));
                    }
                }
            }
            cross_entropy_per_sample(g, logits, &classes, Some(&weights))
        }
        Some(SampleTarget::Subtype { .. }) => {
            let mut classes = Vec::with_capacity(n * inner);
            let mut fg = Vec::with_capacity(n * inner);
            for t in targets {
                match t {
                    SampleTarget::Subtype { classes: c, fg: m } => {
                        if c.len() != inner || m.len() != inner {
                            return Err(Error::shape(format!("subtype target does not cover {inner} positions")));
                        }
                        classes.extend_from_slice(c);
                        fg.extend_from_slice(m);
                    }
                    SampleTarget::Masked => {
                        classes.extend(std::iter::repeat_n(0, inner));
                        fg.extend(std::iter::repeat_n(false, inner));
                    }
                    _ => return Err(Error::invalid("subtype and plain targets mixed in one output")),
                }
            }
            masked_ce_dice(g, logits, &classes, &fg, eps)
        }
    }
}

/// Per-sample losses of one task over some rows of the batch.
#[derive(Clone, Debug)]
pub struct TaskLoss {
    pub task: String,
    /// `[M]` per-sample losses.
    pub losses: NodeId,
    /// Batch row of each entry of `losses`.
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: NodeId,
    pub per_task: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

/// Multi-task aggregate over a batch whose row `i` belongs to `batch_tasks[i]`.
///
/// Each entry of a [`TaskLoss`] is multiplied by one when its row belongs to
/// that task and by zero otherwise, so the same code serves outputs computed
/// on a task's own rows and outputs computed densely on the whole batch.
pub fn multi_task_loss<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &[TaskLoss],
    batch_tasks: &[&str],
    agg: LossAgg,
) -> Result<LossValue> {
    for (row, task) in batch_tasks.iter().enumerate() {
        if !outputs.iter().any(|o| o.task == *task) {
            return Err(Error::invalid(format!("batch row {row} has task {task} with no loss")));
        }
    }
    let mut per_task = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut parts = Vec::new();
    for out in outputs {
        if g.shape(out.losses) != [out.rows.len()] {
            return Err(Error::shape(format!(
                "task {} has {} rows but losses of shape {:?}",
                out.task,
                out.rows.len(),
                g.shape(out.losses)
            )));
        }
        let mut mask = Vec::with_capacity(out.rows.len());
        for &r in &out.rows {
            let task = batch_tasks
                .get(r)
                .ok_or_else(|| Error::invalid(format!("row {r} outside a batch of {}", batch_tasks.len())))?;
            mask.push(*task == out.task);
        }
        let count = batch_tasks.iter().filter(|t| **t == out.task).count();
        let norm = match agg {
            LossAgg::Sum => 1.0,
            LossAgg::TaskMean => 1.0 / count.max(1) as f64,
        };
        let weights = mask.iter().map(|m| T::from_f64(if *m { norm } else { 0.0 })).collect();
        let part = ops::weighted_sum(g, out.losses, weights)?;
        let value = if count == 0 { 0.0 } else { g.value(part).data()[0].as_f64() };
        *per_task.entry(out.task.clone()).or_insert(0.0) += value;
        *counts.entry(out.task.clone()).or_insert(0) += mask.iter().filter(|m| **m).count();
        parts.push(part);
    }
    let total = match ops::add_all(g, &parts)? {
        Some(t) => t,
        None => g.input(Tensor::scalar(T::zero())),
    };
    Ok(LossValue { total, per_task, counts })
}
