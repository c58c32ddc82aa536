//! Run configuration file.
//!
//! A config names its preset; every field it leaves out takes that preset's
//! value. Unknown keys anywhere are rejected with their full path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cerberus::autodiff::AdamConfig;
use cerberus::data::scene::splitmix64;
use cerberus::data::{CorpusSpec, Range, CLASSIFICATION, GLANDS, LUMEN, NUCLEI, SEGMENTATION, TISSUE};
use cerberus::instances::Recovery;
use cerberus::losses::LossAgg;
use cerberus::model::{ArchitectureConfig, SubtypeVariant};
use cerberus::sampler::BatchMode;
use cerberus::trainer::{AugmentConfig, LrSchedule, Preset, TargetConfig, TrainConfig};
use cerberus::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub mode: BatchMode,
    pub batch_size: usize,
    pub super_task_probabilities: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub steps: u64,
    pub lr: LrSchedule,
    pub augment: AugmentConfig,
    pub checkpoint_every: u64,
    pub loss_agg: LossAgg,
    pub targets: TargetConfig,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset written by `gen-data`; relative paths resolve against the
    /// config file's directory.
    pub root: Option<PathBuf>,
    pub tasks: Vec<String>,
    /// Folds used for training; all folds when absent.
    pub folds: Option<Vec<usize>>,
}

/// Second-stage training of a subtype decoder on a frozen base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtypeSection {
    pub base_checkpoint: PathBuf,
    pub parent: String,
    pub classes: usize,
    pub variant: SubtypeVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    /// Spatial size of the random check batch.
    pub input: [usize; 2],
    pub subtype_classes: usize,
    pub subtype_variant: SubtypeVariant,
    pub step: f64,
    pub tolerance: f64,
    pub coords_per_param: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    pub task: String,
    pub scheme: Recovery,
    pub corpus: CorpusSpec,
    pub pool_tiles: usize,
    pub validation_tiles: usize,
    pub initial_labelled: usize,
    /// Stop once a round gains less validation Dice than this.
    pub min_gain: Option<f64>,
    pub warm_start: bool,
    /// Chance that the scripted annotator drops an instance from its labels.
    pub label_noise: f64,
    /// Allowed drop below the running best validation Dice.
    pub monotone_slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub preset: Preset,
    pub seed: u64,
    pub model: ArchitectureConfig,
    pub sampler: SamplerSection,
    pub trainer: TrainerSection,
    pub data: DataSection,
    pub subtype: Option<SubtypeSection>,
    pub gradcheck: GradcheckSection,
    pub refine: RefineSection,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> RunConfig {
        let (model, train) = match preset {
            Preset::Desk => (ArchitectureConfig::desk(), TrainConfig::desk()),
            Preset::Paper => (ArchitectureConfig::paper(), TrainConfig::paper()),
        };
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            preset,
            seed: 0,
            model,
            sampler: SamplerSection {
                mode: train.mode,
                batch_size: train.batch_size,
                super_task_probabilities: train.super_task_probabilities.clone(),
            },
            trainer: TrainerSection {
                steps: train.steps,
                lr: train.lr,
                augment: train.augment,
                checkpoint_every: train.checkpoint_every,
                loss_agg: train.loss_agg,
                targets: train.targets,
                adam: train.adam,
            },
            data: DataSection {
                root: None,
                tasks: [GLANDS, LUMEN, NUCLEI, TISSUE].map(String::from).to_vec(),
                folds: None,
            },
            subtype: None,
            gradcheck: GradcheckSection {
                input: [16, 16],
                subtype_classes: 3,
                subtype_variant: SubtypeVariant::PixelA,
                step: 1e-6,
                tolerance: 1e-3,
                coords_per_param: 3,
            },
            refine: RefineSection {
                task: LUMEN.into(),
                scheme: Recovery::Eroded2 {
                    radius: cerberus::trainer::DESK_EROSION_RADIUS,
                },
                corpus: refine_corpus(),
                pool_tiles: 24,
                validation_tiles: 16,
                initial_labelled: 4,
                min_gain: None,
                warm_start: true,
                label_noise: 0.0,
                monotone_slack: 0.02,
            },
        }
    }

    /// Parses a config, filling omitted fields from its preset.
    pub fn from_json(text: &str, context: &str) -> Result<RunConfig> {
        let user: Value = serde_json::from_str(text).map_err(|source| Error::Json {
            context: context.to_string(),
            source,
        })?;
        let preset = match user.get("preset") {
            Some(p) => strict::<Preset>(p.clone(), &format!("{context}: preset"))?,
            None => Preset::Desk,
        };
        let mut merged = serde_json::to_value(RunConfig::for_preset(preset)).expect("config serializes");
        merge(&mut merged, user);
        let cfg: RunConfig = strict(merged, context)?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths become relative to its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = RunConfig::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(root) = &cfg.data.root {
            cfg.data.root = Some(base.join(root));
        }
        if let Some(sub) = &mut cfg.subtype {
            sub.base_checkpoint = base.join(&sub.base_checkpoint);
        }
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "field `schema_version`: {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.check()?;
        self.train_config().check()?;
        for t in &self.data.tasks {
            if ![GLANDS, LUMEN, NUCLEI, TISSUE].contains(&t.as_str()) {
                return Err(Error::Config(format!("field `data.tasks`: unknown task {t:?}")));
            }
        }
        for k in self.sampler.super_task_probabilities.keys() {
            if k != SEGMENTATION && k != CLASSIFICATION {
                return Err(Error::Config(format!("field `sampler.super_task_probabilities`: unknown super task {k:?}")));
            }
        }
        let r = &self.refine;
        if r.initial_labelled == 0 || r.initial_labelled > r.pool_tiles || r.validation_tiles == 0 {
            return Err(Error::Config(
                "field `refine`: need 1 ≤ initial_labelled ≤ pool_tiles and at least one validation tile".into(),
            ));
        }
        if !(0.0..=1.0).contains(&r.label_noise) {
            return Err(Error::Config(format!("field `refine.label_noise`: {} outside [0,1]", r.label_noise)));
        }
        Ok(())
    }

    /// Trainer settings with the run seed folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            preset: self.preset,
            steps: self.trainer.steps,
            lr: self.trainer.lr.clone(),
            batch_size: self.sampler.batch_size,
            mode: self.sampler.mode,
            super_task_probabilities: self.sampler.super_task_probabilities.clone(),
            augment: self.trainer.augment.clone(),
            seed: derive_seed(self.seed, "trainer"),
            checkpoint_every: self.trainer.checkpoint_every,
            loss_agg: self.trainer.loss_agg,
            targets: self.trainer.targets.clone(),
            adam: self.trainer.adam,
        }
    }
}

/// Every tile carries at least one gland with a lumen, so no tile's Dice
/// hinges on a single stray pixel.
fn refine_corpus() -> CorpusSpec {
    let mut spec = CorpusSpec::default();
    spec.scene.glands = Range::new(1, 2);
    spec.scene.lumen_probability = 1.0;
    spec
}

fn strict<T: DeserializeOwned>(value: Value, context: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{context}: field `{path}`: {}", e.into_inner()))
    })
}

/// Overlays `user` on `base`, recursing into objects; everything else is replaced.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Independent sub-seed for a named consumer of the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(splitmix64(seed), |h, b| splitmix64(h ^ u64::from(b)))
}
