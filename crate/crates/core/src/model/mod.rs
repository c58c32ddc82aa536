//! The shared-encoder network.
//!
//! Stage 1 of the encoder keeps full resolution; every later stage halves it
//! with a 4×4 stride-2 convolution. Each segmentation decoder climbs back up,
//! one level per downsampling stage: nearest ×2 upsample, concatenate the
//! encoder skip, two 3×3 conv+BN+relu, and finally a 1×1 classifier.
//!
//! Forward code is generic over the scalar so the same graph can be evaluated
//! in `f64` for gradient checking.

mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ops, BatchNormConfig, Graph, Mode, NodeId, ParamId, ParamStore, RunningStats, Scalar, Tensor};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

pub const ENCODER: &str = "encoder";
pub const HEAD: &str = "head";
pub const SUBTYPE: &str = "subtype";

pub fn decoder_group(task: &str) -> String {
    format!("decoder.{task}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub task: String,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Width of the first fully connected layer.
    pub hidden: usize,
    pub dropout: f64,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubtypeVariant {
    /// One classification conv on the parent decoder's last upsampled features.
    PixelA,
    /// A full decoder of its own.
    PixelB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtypeSpec {
    pub parent: String,
    pub classes: usize,
    pub variant: SubtypeVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub in_channels: usize,
    pub stages: Vec<usize>,
    pub decoders: Vec<DecoderSpec>,
    pub head: Option<HeadSpec>,
    pub subtype: Option<SubtypeSpec>,
    pub segmentation_input: [usize; 2],
    pub classification_input: [usize; 2],
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig::desk()
    }
}

impl ArchitectureConfig {
    /// Three segmentation tasks with eroded two-class targets plus the tissue head.
    pub fn desk() -> Self {
        ArchitectureConfig {
            in_channels: 3,
            stages: vec![16, 32, 64],
            decoders: ["glands", "lumen", "nuclei"]
                .iter()
                .map(|t| DecoderSpec {
                    task: t.to_string(),
                    classes: 2,
                })
                .collect(),
            head: Some(HeadSpec {
                hidden: 64,
                dropout: 0.3,
                classes: 4,
            }),
            subtype: None,
            segmentation_input: [64, 64],
            classification_input: [32, 32],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Widths and input sizes at the published scale. Not trained here.
    pub fn paper() -> Self {
        ArchitectureConfig {
            stages: vec![64, 64, 128, 256, 512],
            head: Some(HeadSpec {
                hidden: 256,
                dropout: 0.3,
                classes: 4,
            }),
            segmentation_input: [448, 448],
            classification_input: [144, 144],
            ..ArchitectureConfig::desk()
        }
    }

    /// Spatial reduction of the deepest stage.
    pub fn downsampling(&self) -> usize {
        1 << self.stages.len().saturating_sub(1)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("encoder needs at least one stage".into());
        }
        if let Some(i) = self.stages.iter().position(|c| *c == 0) {
            return bad(format!("encoder stage {} has zero channels", i + 1));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.decoders {
            if d.task.is_empty() || d.task == SUBTYPE {
                return bad(format!("decoder task id {:?} is reserved or empty", d.task));
            }
            if !seen.insert(d.task.as_str()) {
                return bad(format!("duplicate decoder task {}", d.task));
            }
            if d.classes < 2 {
                return bad(format!("decoder {} needs at least 2 classes", d.task));
            }
        }
        if let Some(h) = &self.head {
            if h.hidden == 0 || h.classes < 2 {
                return bad("head needs hidden > 0 and at least 2 classes".into());
            }
            if !(0.0..1.0).contains(&h.dropout) {
                return bad(format!("head dropout {} outside [0,1)", h.dropout));
            }
        }
        if let Some(s) = &self.subtype {
            if !self.decoders.iter().any(|d| d.task == s.parent) {
                return bad(format!("subtype parent {} has no decoder", s.parent));
            }
            if s.classes < 2 {
                return bad("subtype decoder needs at least 2 classes".into());
            }
        }
        let f = self.downsampling();
        for (what, [h, w]) in [("segmentation", self.segmentation_input), ("classification", self.classification_input)] {
            if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
                return bad(format!("{what} input {h}x{w} is not a positive multiple of {f}"));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch norm eps must be positive and momentum in [0,1]".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Largest pixel offset an output pixel can depend on, on either side.
    pub fn receptive_radius(&self) -> usize {
        // Support of a cell at index j of a map at scale f: pixels [j·f + lo, j·f + hi].
        #[derive(Clone, Copy)]
        struct Span {
            f: i64,
            lo: i64,
            hi: i64,
        }
        let conv = |s: Span, k: i64, stride: i64, pad: i64| Span {
            f: s.f * stride,
            lo: s.lo - pad * s.f,
            hi: s.hi + (k - 1 - pad) * s.f,
        };
        let mut skips = Vec::new();
        let mut cur = Span { f: 1, lo: 0, hi: 0 };
        for i in 0..self.stages.len() {
            cur = if i == 0 { conv(cur, 3, 1, 1) } else { conv(cur, 4, 2, 1) };
            skips.push(cur);
        }
        let mut split = cur;
        for skip in skips.iter().rev().skip(1) {
            cur = Span {
                f: cur.f / 2,
                lo: (cur.lo - cur.f / 2).min(skip.lo),
                hi: cur.hi.max(skip.hi),
            };
            split = cur;
            cur = conv(conv(cur, 3, 1, 1), 3, 1, 1);
        }
        let mut r = (-cur.lo).max(cur.hi);
        if self.subtype.as_ref().is_some_and(|s| s.variant == SubtypeVariant::PixelA) {
            let c = conv(split, 3, 1, 1);
            r = r.max((-c.lo).max(c.hi));
        }
        r as usize
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    slot: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    pad: usize,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    first: ConvBn,
    second: ConvBn,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Deepest level first.
    levels: Vec<DecoderLevel>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Head {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    dropout: f64,
}

#[derive(Clone, Debug)]
enum SubtypeLayers {
    PixelA(Conv),
    PixelB(Decoder),
}

/// Parameter and running-statistic views used by a forward pass.
#[derive(Clone, Copy)]
pub struct Weights<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    pub running: &'a [RunningStats<T>],
}

/// Output of [`ModelGraph::forward_all`].
#[derive(Clone, Debug)]
pub struct AllOutputs {
    pub outputs: BTreeMap<String, NodeId>,
    pub skipped: Vec<String>,
    pub encoder_calls: usize,
}

/// Parameters, running statistics and layer layout of one network.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub config: ArchitectureConfig,
    pub store: ParamStore<f32>,
    pub running: Vec<RunningStats<f32>>,
    encoder: Vec<ConvBn>,
    decoders: BTreeMap<String, Decoder>,
    head: Option<Head>,
    subtype: Option<SubtypeLayers>,
    groups: BTreeMap<String, Vec<ParamId>>,
    bn_groups: Vec<String>,
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    running: &'a mut Vec<RunningStats<f32>>,
    groups: &'a mut BTreeMap<String, Vec<ParamId>>,
    bn_groups: &'a mut Vec<String>,
    rng: &'a mut ChaCha8Rng,
    group: String,
}

impl Builder<'_> {
    fn param(&mut self, name: &str, tensor: Tensor<f32>) -> Result<ParamId> {
        let id = self.store.add(format!("{}.{name}", self.group), tensor)?;
        self.groups.entry(self.group.clone()).or_default().push(id);
        Ok(id)
    }

    /// Fan-in scaled uniform: U(−√(6/fan_in), √(6/fan_in)).
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound) as f32)
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<ConvBn> {
        let w = self.uniform(&[cout, cin, k, k], cin * k * k);
        let weight = self.param(&format!("{name}.weight"), w)?;
        let gamma = self.param(&format!("{name}.gamma"), Tensor::full(&[cout], 1.0))?;
        let beta = self.param(&format!("{name}.beta"), Tensor::zeros(&[cout]))?;
        self.running.push(RunningStats::new(cout));
        self.bn_groups.push(self.group.clone());
        Ok(ConvBn {
            weight,
            gamma,
            beta,
            slot: self.running.len() - 1,
            stride,
            pad,
        })
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<Conv> {
        let w = self.uniform(&[cout, cin, k, k], cin * k * k);
        let weight = self.param(&format!("{name}.weight"), w)?;
        let bias = self.param(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv { weight, bias, pad: k / 2 })
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<(ParamId, ParamId)> {
        let w = self.uniform(&[dout, din], din);
        Ok((
            self.param(&format!("{name}.weight"), w)?,
            self.param(&format!("{name}.bias"), Tensor::zeros(&[dout]))?,
        ))
    }

    fn decoder(&mut self, stages: &[usize], classes: usize) -> Result<Decoder> {
        let mut levels = Vec::new();
        let mut cin = *stages.last().expect("at least one stage");
        for level in (0..stages.len() - 1).rev() {
            let width = stages[level];
            levels.push(DecoderLevel {
                first: self.conv_bn(&format!("up{}.conv1", level + 1), cin + width, width, 3, 1, 1)?,
                second: self.conv_bn(&format!("up{}.conv2", level + 1), width, width, 3, 1, 1)?,
            });
            cin = width;
        }
        let out = self.conv("out", cin, classes, 1)?;
        Ok(Decoder { levels, out })
    }
}

fn conv_bn<T: Scalar>(g: &mut Graph<T>, w: Weights<T>, layer: &ConvBn, x: NodeId, bn: BatchNormConfig) -> Result<NodeId> {
    let weight = g.param(w.store, layer.weight);
    let y = ops::conv2d(g, x, weight, None, layer.stride, layer.pad)?;
    let gamma = g.param(w.store, layer.gamma);
    let beta = g.param(w.store, layer.beta);
    // Frozen layers normalise with their running statistics and leave them alone.
    let train = g.mode() == Mode::Train && w.store.get(layer.gamma).trainable;
    let (mode, slot) = if train { (Mode::Train, Some(layer.slot)) } else { (Mode::Eval, None) };
    let y = ops::batch_norm2d(g, y, gamma, beta, &w.running[layer.slot], bn, mode, slot)?;
    Ok(ops::relu(g, y))
}

fn conv<T: Scalar>(g: &mut Graph<T>, w: Weights<T>, layer: &Conv, x: NodeId) -> Result<NodeId> {
    let weight = g.param(w.store, layer.weight);
    let bias = g.param(w.store, layer.bias);
    ops::conv2d(g, x, weight, Some(bias), 1, layer.pad)
}

/// Runs a decoder; also returns the features right after its last upsample
/// and skip concatenation.
fn decode<T: Scalar>(g: &mut Graph<T>, w: Weights<T>, dec: &Decoder, feats: &[NodeId], bn: BatchNormConfig) -> Result<(NodeId, NodeId)> {
    let mut x = *feats.last().expect("encoder output");
    let mut split = x;
    for (i, level) in dec.levels.iter().enumerate() {
        let skip = feats[feats.len() - 2 - i];
        let up = ops::upsample_nearest2x(g, x)?;
        split = ops::concat_channels(g, up, skip)?;
        x = conv_bn(g, w, &level.first, split, bn)?;
        x = conv_bn(g, w, &level.second, x, bn)?;
    }
    Ok((conv(g, w, &dec.out, x)?, split))
}

impl ModelGraph {
    pub fn build(config: &ArchitectureConfig, seed: u64) -> Result<ModelGraph> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut running = Vec::new();
        let mut groups = BTreeMap::new();
        let mut bn_groups = Vec::new();
        let mut b = Builder {
            store: &mut store,
            running: &mut running,
            groups: &mut groups,
            bn_groups: &mut bn_groups,
            rng: &mut rng,
            group: ENCODER.into(),
        };
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for (i, &c) in config.stages.iter().enumerate() {
            let (k, stride) = if i == 0 { (3, 1) } else { (4, 2) };
            encoder.push(b.conv_bn(&format!("stage{}", i + 1), cin, c, k, stride, 1)?);
            cin = c;
        }
        let mut decoders = BTreeMap::new();
        for d in &config.decoders {
            b.group = decoder_group(&d.task);
            decoders.insert(d.task.clone(), b.decoder(&config.stages, d.classes)?);
        }
        let head = match &config.head {
            Some(h) => {
                b.group = HEAD.into();
                let last = *config.stages.last().expect("checked");
                Some(Head {
                    fc1: b.linear("fc1", last, h.hidden)?,
                    fc2: b.linear("fc2", h.hidden, h.classes)?,
                    dropout: h.dropout,
                })
            }
            None => None,
        };
        let mut model = ModelGraph {
            config: ArchitectureConfig {
                subtype: None,
                ..config.clone()
            },
            store,
            running,
            encoder,
            decoders,
            head,
            subtype: None,
            groups,
            bn_groups,
        };
        if let Some(s) = &config.subtype {
            model.add_subtype(s.clone(), &mut rng)?;
        }
        Ok(model)
    }

    fn add_subtype(&mut self, spec: SubtypeSpec, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.subtype.is_some() {
            return Err(Error::invalid("model already has a subtype decoder"));
        }
        if !self.decoders.contains_key(&spec.parent) {
            return Err(Error::invalid(format!("subtype parent {} has no decoder", spec.parent)));
        }
        if spec.classes < 2 {
            return Err(Error::invalid("subtype decoder needs at least 2 classes"));
        }
        let stages = self.config.stages.clone();
        let mut b = Builder {
            store: &mut self.store,
            running: &mut self.running,
            groups: &mut self.groups,
            bn_groups: &mut self.bn_groups,
            rng,
            group: SUBTYPE.into(),
        };
        let layers = match spec.variant {
            SubtypeVariant::PixelA => {
                let cin = if stages.len() > 1 { stages[1] + stages[0] } else { stages[0] };
                SubtypeLayers::PixelA(b.conv("classify", cin, spec.classes, 3)?)
            }
            SubtypeVariant::PixelB => SubtypeLayers::PixelB(b.decoder(&stages, spec.classes)?),
        };
        self.subtype = Some(layers);
        self.config.subtype = Some(spec);
        Ok(())
    }

    /// Adds the subtype decoder and freezes everything else.
    pub fn attach_subtype_decoder(&mut self, parent: &str, classes: usize, variant: SubtypeVariant, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.add_subtype(
            SubtypeSpec {
                parent: parent.to_string(),
                classes,
                variant,
            },
            &mut rng,
        )?;
        let groups: Vec<String> = self.groups.keys().cloned().collect();
        for group in groups {
            self.set_group_trainable(&group, group == SUBTYPE);
        }
        Ok(())
    }

    pub fn weights(&self) -> Weights<'_, f32> {
        Weights {
            store: &self.store,
            running: &self.running,
        }
    }

    pub fn groups(&self) -> &BTreeMap<String, Vec<ParamId>> {
        &self.groups
    }

    pub fn group_of(&self, id: ParamId) -> Option<&str> {
        self.groups.iter().find(|(_, ids)| ids.contains(&id)).map(|(g, _)| g.as_str())
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) {
        if let Some(ids) = self.groups.get(group) {
            for id in ids.clone() {
                self.store.set_trainable(id, trainable);
            }
        }
    }

    pub fn trainable_groups(&self) -> Vec<String> {
        self.groups
            .iter()
            .filter(|(_, ids)| ids.iter().all(|id| self.store.get(*id).trainable))
            .map(|(g, _)| g.clone())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.decoders.contains_key(task)
    }

    pub fn tasks(&self) -> Vec<String> {
        self.decoders.keys().cloned().collect()
    }

    /// Copy of the model with head dropout disabled.
    pub fn without_dropout(&self) -> ModelGraph {
        let mut m = self.clone();
        if let Some(h) = m.head.as_mut() {
            h.dropout = 0.0;
        }
        if let Some(h) = m.config.head.as_mut() {
            h.dropout = 0.0;
        }
        m
    }

    fn bn(&self) -> BatchNormConfig {
        BatchNormConfig {
            eps: self.config.bn_eps,
            momentum: self.config.bn_momentum,
        }
    }

    fn check_segmentation_input<T: Scalar>(&self, g: &Graph<T>, x: NodeId) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let f = self.config.downsampling();
        if c != self.config.in_channels {
            return Err(Error::shape(format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!("input {h}x{w} is not a positive multiple of {f}")));
        }
        Ok(())
    }

    /// Encoder stage outputs, shallowest first.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, w: Weights<T>, x: NodeId) -> Result<Vec<NodeId>> {
        let bn = self.bn();
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut cur = x;
        for (i, layer) in self.encoder.iter().enumerate() {
            cur = conv_bn(g, w, layer, cur, bn).map_err(|e| Error::shape(format!("encoder stage {}: {e}", i + 1)))?;
            feats.push(cur);
        }
        Ok(feats)
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, w: Weights<T>, task: &str, feats: &[NodeId]) -> Result<NodeId> {
        let dec = self
            .decoders
            .get(task)
            .ok_or_else(|| Error::invalid(format!("no decoder for task {task}")))?;
        Ok(decode(g, w, dec, feats, self.bn())?.0)
    }

    pub fn decode_subtype<T: Scalar>(&self, g: &mut Graph<T>, w: Weights<T>, feats: &[NodeId]) -> Result<NodeId> {
        let (Some(layers), Some(spec)) = (&self.subtype, &self.config.subtype) else {
            return Err(Error::invalid("model has no subtype decoder"));
        };
        match layers {
            SubtypeLayers::PixelA(c) => {
                let parent = &self.decoders[&spec.parent];
                let (_, split) = decode(g, w, parent, feats, self.bn())?;
                conv(g, w, c, split)
            }
            SubtypeLayers::PixelB(dec) => Ok(decode(g, w, dec, feats, self.bn())?.0),
        }
    }

    pub fn classify_features<T: Scalar>(&self, g: &mut Graph<T>, w: Weights<T>, feats: &[NodeId]) -> Result<NodeId> {
        let head = self.head.as_ref().ok_or_else(|| Error::invalid("model has no classification head"))?;
        let pooled = ops::global_avg_pool(g, *feats.last().expect("encoder output"))?;
        let (w1, b1) = (g.param(w.store, head.fc1.0), g.param(w.store, head.fc1.1));
        let h = ops::linear(g, pooled, w1, b1)?;
        let h = ops::relu(g, h);
        let h = ops::dropout(g, h, head.dropout)?;
        let (w2, b2) = (g.param(w.store, head.fc2.0), g.param(w.store, head.fc2.1));
        ops::linear(g, h, w2, b2)
    }

    /// `[N,K_t,H,W]` logits of one segmentation task.
    pub fn forward_segmentation<T: Scalar>(&self, g: &mut Graph<T>, w: Weights<T>, task: &str, x: NodeId) -> Result<NodeId> {
        let known = if task == SUBTYPE { self.subtype.is_some() } else { self.decoders.contains_key(task) };
        if !known {
            return Err(Error::invalid(format!("no decoder for task {task}")));
        }
        self.check_segmentation_input(g, x)?;
        let feats = self.encode(g, w, x)?;
        if task == SUBTYPE {
            return self.decode_subtype(g, w, &feats);
        }
        self.decode(g, w, task, &feats)
    }

    /// `[N,K_c]` tissue logits.
    pub fn forward_classification<T: Scalar>(&self, g: &mut Graph<T>, w: Weights<T>, x: NodeId) -> Result<NodeId> {
        let (_, c, h, wd) = g.value(x).dims4()?;
        if [h, wd] != self.config.classification_input || c != self.config.in_channels {
            return Err(Error::shape(format!(
                "classification expects {}x{}x{}, got {c}x{h}x{wd}",
                self.config.in_channels, self.config.classification_input[0], self.config.classification_input[1]
            )));
        }
        let feats = self.encode(g, w, x)?;
        self.classify_features(g, w, &feats)
    }

    /// Every branch from one encoder pass.
    pub fn forward_all<T: Scalar>(&self, g: &mut Graph<T>, w: Weights<T>, x: NodeId) -> Result<AllOutputs> {
        self.check_segmentation_input(g, x)?;
        let feats = self.encode(g, w, x)?;
        let mut outputs = BTreeMap::new();
        for task in self.decoders.keys() {
            outputs.insert(task.clone(), self.decode(g, w, task, &feats)?);
        }
        if self.subtype.is_some() {
            outputs.insert(SUBTYPE.to_string(), self.decode_subtype(g, w, &feats)?);
        }
        let mut skipped = Vec::new();
        if self.head.is_some() {
            let (_, _, h, wd) = g.value(x).dims4()?;
            if [h, wd] == self.config.classification_input {
                outputs.insert(HEAD.to_string(), self.classify_features(g, w, &feats)?);
            } else {
                skipped.push(HEAD.to_string());
            }
        }
        Ok(AllOutputs {
            outputs,
            skipped,
            encoder_calls: 1,
        })
    }

    /// Global-average-pooled encoder features of the listed 1-based stages, concatenated.
    pub fn extract_features<T: Scalar>(&self, g: &mut Graph<T>, w: Weights<T>, x: NodeId, stages: &[usize]) -> Result<NodeId> {
        if stages.is_empty() {
            return Err(Error::invalid("no encoder stages requested"));
        }
        if let Some(s) = stages.iter().find(|s| **s == 0 || **s > self.encoder.len()) {
            return Err(Error::invalid(format!("encoder stage {s} outside 1..={}", self.encoder.len())));
        }
        let feats = self.encode(g, w, x)?;
        let pooled: Vec<Tensor<T>> = stages
            .iter()
            .map(|s| {
                let p = ops::global_avg_pool(g, feats[s - 1])?;
                Ok(g.value(p).clone())
            })
            .collect::<Result<_>>()?;
        let n = pooled[0].shape()[0];
        let d: usize = pooled.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(n * d);
        for row in 0..n {
            for p in &pooled {
                let c = p.shape()[1];
                data.extend_from_slice(&p.data()[row * c..(row + 1) * c]);
            }
        }
        // read-only: detached from the graph
        Ok(g.input(Tensor::new(vec![n, d], data)?))
    }

    /// Fold batch statistics recorded in `g` into the running statistics.
    /// Layers of frozen groups keep theirs.
    pub fn commit_batch_stats<T: Scalar>(&mut self, g: &Graph<T>) {
        let momentum = self.config.bn_momentum;
        let trainable = self.trainable_groups();
        for stats in g.batch_stats() {
            if !trainable.contains(&self.bn_groups[stats.slot]) {
                continue;
            }
            let mean: Vec<f32> = stats.mean.iter().map(|v| v.as_f64() as f32).collect();
            let var: Vec<f32> = stats.var.iter().map(|v| v.as_f64() as f32).collect();
            self.running[stats.slot].update(&mean, &var, momentum);
        }
    }

    /// Group owning each running-statistics slot.
    pub fn bn_groups(&self) -> &[String] {
        &self.bn_groups
    }

    /// Runs `f` on a fresh eval-mode graph over the model's own weights.
    pub fn eval<R>(&self, f: impl FnOnce(&mut Graph<f32>, Weights<f32>) -> Result<R>) -> Result<R> {
        let mut g = Graph::new(Mode::Eval);
        f(&mut g, self.weights())
    }

    /// Eval-mode logits of one task for `[N,3,H,W]` input.
    pub fn predict_segmentation(&self, task: &str, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.eval(|g, w| {
            let xn = g.input(x.clone());
            let y = self.forward_segmentation(g, w, task, xn)?;
            Ok(g.value(y).clone())
        })
    }

    /// Eval-mode probabilities of every branch for `[1,3,H,W]` input.
    pub fn predict_all(&self, x: &Tensor<f32>) -> Result<(BTreeMap<String, Tensor<f32>>, Vec<String>)> {
        self.eval(|g, w| {
            let xn = g.input(x.clone());
            let all = self.forward_all(g, w, xn)?;
            let mut out = BTreeMap::new();
            for (task, node) in all.outputs {
                let p = ops::channel_softmax(g, node)?;
                out.insert(task, g.value(p).clone());
            }
            Ok((out, all.skipped))
        })
    }
}
