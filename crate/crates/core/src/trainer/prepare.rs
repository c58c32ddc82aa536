//! Training targets computed once per sample.
//!
//! Eroded targets and U-Net weights are equivariant under flips and quarter
//! turns, so they are built on the untransformed maps and then moved along
//! with the image by [`augment`].

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{photometric, AugmentConfig, Geometric};
use crate::autodiff::Tensor;
use crate::data::{TaskData, TaskKind, Target};
use crate::instances::Recovery;
use crate::losses::{build_unet_weights, SampleTarget, DEFAULT_DICE_EPS, DEFAULT_SIGMA, DEFAULT_W0};
use crate::model::SUBTYPE;
use crate::{Error, Result};

/// Erosion radius used at 64×64: nuclei have radius 3–4 px.
pub const DESK_EROSION_RADIUS: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// Target scheme per segmentation task; unlisted tasks use eroded targets.
    pub schemes: BTreeMap<String, Recovery>,
    pub unet_weights: bool,
    pub w0: f64,
    pub sigma: f64,
    pub dice_eps: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            schemes: BTreeMap::new(),
            unet_weights: true,
            w0: DEFAULT_W0,
            sigma: DEFAULT_SIGMA,
            dice_eps: DEFAULT_DICE_EPS,
        }
    }
}

impl TargetConfig {
    pub fn scheme(&self, task: &str) -> Recovery {
        self.schemes.get(task).copied().unwrap_or(Recovery::Eroded2 {
            radius: DESK_EROSION_RADIUS,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreparedTarget {
    Pixels { classes: Vec<u32>, weights: Option<Vec<f64>> },
    Label(u32),
    /// Channel `class − 1` on instance pixels.
    Subtype { classes: Vec<u32>, fg: Vec<bool> },
}

impl PreparedTarget {
    pub fn to_sample_target(&self) -> SampleTarget {
        match self {
            PreparedTarget::Pixels { classes, weights } => SampleTarget::Pixels {
                classes: classes.clone(),
                weights: weights.clone(),
            },
            PreparedTarget::Label(l) => SampleTarget::Label(*l),
            PreparedTarget::Subtype { classes, fg } => SampleTarget::Subtype {
                classes: classes.clone(),
                fg: fg.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    /// `[3,H,W]`.
    pub image: Tensor<f32>,
    pub target: PreparedTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTask {
    pub task: String,
    pub super_task: String,
    pub input: [usize; 2],
    pub samples: Vec<PreparedSample>,
    pub patients: Vec<u32>,
}

pub fn prepare_task(data: &TaskData, targets: &TargetConfig) -> Result<PreparedTask> {
    let task = data.manifest.task_id.clone();
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let target = match (&s.target, data.manifest.kind) {
                (Target::Label(l), TaskKind::Classification) => PreparedTarget::Label(*l),
                (Target::Instances(map), TaskKind::Segmentation) => {
                    let t = targets.scheme(&task).target(map)?;
                    let weights = targets.unet_weights.then(|| {
                        build_unet_weights(map, targets.w0, targets.sigma, data.manifest.pixel_frequencies).weights
                    });
                    PreparedTarget::Pixels {
                        classes: t.classes.iter().map(|c| *c as u32).collect(),
                        weights,
                    }
                }
                _ => return Err(Error::invalid(format!("sample {} does not match its task kind", s.id))),
            };
            Ok(PreparedSample {
                id: s.id.clone(),
                image: s.image.clone(),
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedTask {
        task,
        super_task: data.manifest.super_task_id.clone(),
        input: data.manifest.input,
        samples,
        patients: data.samples.iter().map(|s| s.patient).collect(),
    })
}

/// Subtype targets from class-labelled instance maps; samples without
/// classes are rejected.
pub fn prepare_subtype_task(data: &TaskData, classes: usize) -> Result<PreparedTask> {
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let map = s
                .instances()
                .ok_or_else(|| Error::invalid(format!("sample {} has no instance map", s.id)))?;
            let labels = map
                .classes()
                .ok_or_else(|| Error::invalid(format!("sample {} has no instance classes", s.id)))?;
            if let Some(bad) = labels.iter().find(|c| **c == 0 || **c as usize > classes) {
                return Err(Error::invalid(format!("sample {} has class {bad} outside 1..={classes}", s.id)));
            }
            let fg: Vec<bool> = map.ids().iter().map(|&id| id > 0).collect();
            let cls = map
                .ids()
                .iter()
                .map(|&id| if id == 0 { 0 } else { labels[id as usize - 1] - 1 })
                .collect();
            Ok(PreparedSample {
                id: s.id.clone(),
                image: s.image.clone(),
                target: PreparedTarget::Subtype { classes: cls, fg },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedTask {
        task: SUBTYPE.into(),
        super_task: data.manifest.super_task_id.clone(),
        input: data.manifest.input,
        samples,
        patients: data.samples.iter().map(|s| s.patient).collect(),
    })
}

/// Random flips and quarter turns on image and targets, then photometric
/// changes on the image.
pub fn augment(sample: &PreparedSample, rng: &mut ChaCha8Rng, config: &AugmentConfig) -> PreparedSample {
    let geo = Geometric::draw(rng, config);
    let (_, h, w) = match *sample.image.shape() {
        [c, h, w] => (c, h, w),
        _ => unreachable!("prepared images are [C,H,W]"),
    };
    let target = if geo.is_identity() {
        sample.target.clone()
    } else {
        match &sample.target {
            PreparedTarget::Pixels { classes, weights } => PreparedTarget::Pixels {
                classes: geo.apply(classes, h, w),
                weights: weights.as_ref().map(|wt| geo.apply(wt, h, w)),
            },
            PreparedTarget::Label(l) => PreparedTarget::Label(*l),
            PreparedTarget::Subtype { classes, fg } => PreparedTarget::Subtype {
                classes: geo.apply(classes, h, w),
                fg: geo.apply(fg, h, w),
            },
        }
    };
    let image = if geo.is_identity() { sample.image.clone() } else { geo.apply_image(&sample.image) };
    PreparedSample {
        id: sample.id.clone(),
        image: photometric(&image, rng, config),
        target,
    }
}
