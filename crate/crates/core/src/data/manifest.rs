//! Per-task dataset manifests with patient-level fold assignment, corpus
//! writing, loading and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::container::{read_container, write_container, Container};
use super::scene::{box_downsample, generate_scene, scene_violations, splitmix64, Profile, Scene, SceneSpec, Tissue};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::instances::InstanceMap;

pub const MANIFEST_VERSION: u32 = 1;

pub const SEGMENTATION: &str = "segmentation";
pub const CLASSIFICATION: &str = "classification";
pub const GLANDS: &str = "glands";
pub const LUMEN: &str = "lumen";
pub const NUCLEI: &str = "nuclei";
pub const TISSUE: &str = "tissue";
pub const SEG_TASKS: [&str; 3] = [GLANDS, LUMEN, NUCLEI];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Paths are relative to the dataset root.
    pub image: String,
    pub target: Option<String>,
    /// JSON list of per-instance classes for class-labelled instance maps.
    pub classes: Option<String>,
    pub label: Option<u32>,
    pub patient: u32,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub task_id: String,
    pub super_task_id: String,
    pub kind: TaskKind,
    /// Instance classes (segmentation) or label classes (classification); 0 when unlabelled.
    pub num_classes: usize,
    /// Input extent `[H, W]` shared by the super task.
    pub input: [usize; 2],
    pub folds: usize,
    /// Background and foreground pixel fractions over the whole dataset.
    pub pixel_frequencies: Option<[f64; 2]>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn samples_in(&self, folds: &[usize]) -> Vec<&SampleRecord> {
        self.samples.iter().filter(|s| folds.contains(&s.fold)).collect()
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Patients go to folds largest-first (shuffled order breaks size ties),
/// each to the fold currently holding the fewest samples.
pub fn assign_folds(samples_per_patient: &BTreeMap<u32, usize>, n_folds: usize, rng: &mut ChaCha8Rng) -> Result<BTreeMap<u32, usize>> {
    if n_folds == 0 {
        return Err(Error::invalid("at least one fold is required"));
    }
    if samples_per_patient.len() < n_folds {
        return Err(Error::invalid(format!(
            "{} patients cannot fill {n_folds} folds",
            samples_per_patient.len()
        )));
    }
    let mut patients: Vec<(u32, usize)> = samples_per_patient.iter().map(|(&p, &n)| (p, n)).collect();
    patients.shuffle(rng);
    patients.sort_by(|a, b| b.1.cmp(&a.1));
    let mut load = vec![0usize; n_folds];
    let mut out = BTreeMap::new();
    for (p, n) in patients {
        let f = (0..n_folds).min_by_key(|&f| (load[f], f)).unwrap();
        load[f] += n;
        out.insert(p, f);
    }
    Ok(out)
}

/// Assigns each record's fold from its patient.
pub fn build_manifest(mut manifest: DatasetManifest, n_folds: usize, rng: &mut ChaCha8Rng) -> Result<DatasetManifest> {
    let mut counts = BTreeMap::new();
    for s in &manifest.samples {
        *counts.entry(s.patient).or_insert(0) += 1;
    }
    let folds = assign_folds(&counts, n_folds, rng)?;
    for s in &mut manifest.samples {
        s.fold = folds[&s.patient];
    }
    manifest.folds = n_folds;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub scene: SceneSpec,
    pub patients: usize,
    pub folds: usize,
    /// Cycle scene count ranges through the tissue profiles so every class occurs.
    pub cycle_profiles: bool,
    /// Side length of the classification inputs (box-downsampled scenes).
    pub classification_size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            scene: SceneSpec::default(),
            patients: 6,
            folds: 3,
            cycle_profiles: true,
            classification_size: 32,
        }
    }
}

impl CorpusSpec {
    pub fn scene_spec(&self, index: usize, seed: u64) -> SceneSpec {
        let mut s = if self.cycle_profiles {
            Profile::CYCLE[index % Profile::CYCLE.len()].apply(&self.scene)
        } else {
            self.scene.clone()
        };
        s.seed = splitmix64(seed ^ splitmix64(index as u64 + 1));
        s.patient = (index % self.patients.max(1)) as u32;
        s
    }

    pub fn check(&self) -> Result<()> {
        self.scene.check()?;
        if self.patients < self.folds || self.folds == 0 {
            return Err(Error::Config(format!(
                "corpus spec field `patients`: {} patients cannot fill {} folds",
                self.patients, self.folds
            )));
        }
        let (h, w) = (self.scene.height, self.scene.width);
        if self.classification_size == 0 || h % self.classification_size != 0 || w % self.classification_size != 0 || h != w {
            return Err(Error::Config(format!(
                "corpus spec field `classification_size`: {} must evenly divide a square {h}×{w} canvas",
                self.classification_size
            )));
        }
        Ok(())
    }
}

pub fn generate_corpus(spec: &CorpusSpec, n_scenes: usize, seed: u64) -> Result<Vec<Scene>> {
    spec.check()?;
    (0..n_scenes).map(|i| generate_scene(&spec.scene_spec(i, seed))).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub scenes: usize,
    pub manifests: Vec<String>,
    pub scene_violations: Vec<String>,
    pub validation: Vec<ValidationReport>,
}

impl CorpusReport {
    pub fn violation_count(&self) -> usize {
        self.scene_violations.len() + self.validation.iter().map(|v| v.violations.len()).sum::<usize>()
    }
}

/// Generates, writes and validates a full corpus: scene images and three
/// label planes under `scenes/fold<k>/`, downsampled tissue inputs under
/// `tissue/fold<k>/`, one manifest per task under `manifests/`.
pub fn write_corpus(root: &Path, spec: &CorpusSpec, n_scenes: usize, seed: u64) -> Result<CorpusReport> {
    let scenes = generate_corpus(spec, n_scenes, seed)?;
    let mut counts = BTreeMap::new();
    for s in &scenes {
        *counts.entry(s.patient).or_insert(0) += 1;
    }
    let folds = assign_folds(&counts, spec.folds, &mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xF01D)))?;
    let (h, w) = (spec.scene.height, spec.scene.width);
    let factor = h / spec.classification_size;

    let mut records: BTreeMap<&str, Vec<SampleRecord>> = BTreeMap::new();
    let mut fg = BTreeMap::<&str, usize>::new();
    let mut report = CorpusReport {
        scenes: scenes.len(),
        ..CorpusReport::default()
    };
    for (i, scene) in scenes.iter().enumerate() {
        let id = format!("scene{i:05}");
        let fold = folds[&scene.patient];
        let image = format!("scenes/fold{fold}/images/{id}.cbrs");
        write_container(&root.join(&image), &Container::image_u8(&scene.image))?;
        for v in scene_violations(scene, &spec.scene) {
            report.scene_violations.push(format!("{id}: {v}"));
        }
        for (task, map) in [(GLANDS, &scene.glands), (LUMEN, &scene.lumen), (NUCLEI, &scene.nuclei)] {
            let target = format!("scenes/fold{fold}/labels/{task}/{id}.cbrs");
            write_container(&root.join(&target), &Container::from_instance_map(map))?;
            *fg.entry(task).or_default() += map.ids().iter().filter(|&&v| v > 0).count();
            let classes = match map.classes() {
                Some(c) => {
                    let rel = format!("scenes/fold{fold}/labels/{task}/{id}.json");
                    write_json(&root.join(&rel), &c.to_vec())?;
                    Some(rel)
                }
                None => None,
            };
            records.entry(task).or_default().push(SampleRecord {
                id: id.clone(),
                image: image.clone(),
                target: Some(target),
                classes,
                label: None,
                patient: scene.patient,
                fold,
            });
        }
        let small = format!("tissue/fold{fold}/images/{id}.cbrs");
        write_container(&root.join(&small), &Container::image_u8(&box_downsample(&scene.image, factor)?))?;
        records.entry(TISSUE).or_default().push(SampleRecord {
            id,
            image: small,
            target: None,
            classes: None,
            label: Some(scene.tissue as u32),
            patient: scene.patient,
            fold,
        });
    }
    let total_px = (scenes.len() * h * w).max(1) as f64;
    for task in SEG_TASKS.into_iter().chain([TISSUE]) {
        let seg = task != TISSUE;
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            dataset_id: "synthetic".into(),
            task_id: task.into(),
            super_task_id: if seg { SEGMENTATION } else { CLASSIFICATION }.into(),
            kind: if seg { TaskKind::Segmentation } else { TaskKind::Classification },
            num_classes: match task {
                NUCLEI => spec.scene.nucleus_classes,
                TISSUE => Tissue::COUNT,
                _ => 0,
            },
            input: if seg { [h, w] } else { [spec.classification_size; 2] },
            folds: spec.folds,
            pixel_frequencies: seg.then(|| {
                let f = fg[task] as f64 / total_px;
                [1.0 - f, f]
            }),
            samples: records.remove(task).unwrap_or_default(),
        };
        let rel = format!("manifests/{task}.json");
        manifest.save(&root.join(&rel))?;
        report.validation.push(validate_dataset(root, &manifest));
        report.manifests.push(rel);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    MissingFile,
    Integrity,
    Dimension,
    LabelRange,
    InstanceMap,
    PatientOverlap,
    FoldRange,
    Version,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub path: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub task: String,
    pub samples: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reads every referenced file and lists every problem found; never fails.
pub fn validate_dataset(root: &Path, manifest: &DatasetManifest) -> ValidationReport {
    let mut v = Vec::new();
    let mut push = |kind, path: Option<&str>, message: String| {
        v.push(Violation {
            kind,
            path: path.map(str::to_string),
            message,
        })
    };
    if manifest.format_version != MANIFEST_VERSION {
        push(
            ViolationKind::Version,
            None,
            format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.format_version),
        );
    }
    let mut patient_folds: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for s in &manifest.samples {
        patient_folds.entry(s.patient).or_default().insert(s.fold);
        if s.fold >= manifest.folds {
            push(ViolationKind::FoldRange, None, format!("sample {} in fold {} of {}", s.id, s.fold, manifest.folds));
        }
        let image_path = root.join(&s.image);
        if !image_path.exists() {
            push(ViolationKind::MissingFile, Some(&s.image), "image file missing".into());
        } else {
            match read_container(&image_path).and_then(|c| c.into_image(&s.image)) {
                Err(e) => push(ViolationKind::Integrity, Some(&s.image), e.to_string()),
                Ok(img) => {
                    let [h, w] = manifest.input;
                    if img.shape() != [3, h, w] {
                        push(
                            ViolationKind::Dimension,
                            Some(&s.image),
                            format!("image extents {:?}, super task requires [3, {h}, {w}]", img.shape()),
                        );
                    }
                }
            }
        }
        match manifest.kind {
            TaskKind::Classification => match s.label {
                Some(l) if (l as usize) < manifest.num_classes => {}
                Some(l) => push(
                    ViolationKind::LabelRange,
                    Some(&s.image),
                    format!("label {l} outside 0..{}", manifest.num_classes),
                ),
                None => push(ViolationKind::LabelRange, Some(&s.image), "classification sample without a label".into()),
            },
            TaskKind::Segmentation => {
                let Some(target) = &s.target else {
                    push(ViolationKind::MissingFile, None, format!("sample {} has no target", s.id));
                    continue;
                };
                let path = root.join(target);
                if !path.exists() {
                    push(ViolationKind::MissingFile, Some(target), "label file missing".into());
                    continue;
                }
                let map = match read_container(&path) {
                    Err(e) => {
                        push(ViolationKind::Integrity, Some(target), e.to_string());
                        continue;
                    }
                    Ok(c) => match c.into_instance_map(target) {
                        Err(e) => {
                            push(ViolationKind::InstanceMap, Some(target), e.to_string());
                            continue;
                        }
                        Ok(m) => m,
                    },
                };
                if [map.height(), map.width()] != manifest.input {
                    push(
                        ViolationKind::Dimension,
                        Some(target),
                        format!("label extents {}×{}, super task requires {:?}", map.height(), map.width(), manifest.input),
                    );
                }
                if let Some(rel) = &s.classes {
                    match read_classes(&root.join(rel)) {
                        Err(e) => push(ViolationKind::Integrity, Some(rel), e.to_string()),
                        Ok(c) => {
                            if c.len() != map.count() {
                                push(
                                    ViolationKind::InstanceMap,
                                    Some(rel),
                                    format!("{} class labels for {} instances", c.len(), map.count()),
                                );
                            }
                            if let Some(&bad) = c.iter().find(|&&k| k == 0 || k as usize > manifest.num_classes) {
                                push(
                                    ViolationKind::LabelRange,
                                    Some(rel),
                                    format!("class {bad} outside 1..={}", manifest.num_classes),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    for (patient, folds) in patient_folds {
        if folds.len() > 1 {
            push(
                ViolationKind::PatientOverlap,
                None,
                format!("patient {patient} appears in folds {folds:?}"),
            );
        }
    }
    ValidationReport {
        task: manifest.task_id.clone(),
        samples: manifest.samples.len(),
        violations: v,
    }
}

fn read_classes(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Instances(InstanceMap),
    Label(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub target: Target,
    pub patient: u32,
    pub fold: usize,
}

impl Sample {
    pub fn instances(&self) -> Option<&InstanceMap> {
        match &self.target {
            Target::Instances(m) => Some(m),
            Target::Label(_) => None,
        }
    }

    pub fn label(&self) -> Option<u32> {
        match self.target {
            Target::Label(l) => Some(l),
            Target::Instances(_) => None,
        }
    }
}

/// A task's samples held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl TaskData {
    pub fn load(root: &Path, manifest: &DatasetManifest, folds: Option<&[usize]>) -> Result<Self> {
        let mut samples = Vec::new();
        for s in &manifest.samples {
            if folds.is_some_and(|f| !f.contains(&s.fold)) {
                continue;
            }
            let image = read_container(&root.join(&s.image))?.into_image(&s.image)?;
            let target = match manifest.kind {
                TaskKind::Classification => Target::Label(
                    s.label
                        .ok_or_else(|| Error::invalid(format!("sample {} has no label", s.id)))?,
                ),
                TaskKind::Segmentation => {
                    let rel = s
                        .target
                        .as_ref()
                        .ok_or_else(|| Error::invalid(format!("sample {} has no target", s.id)))?;
                    let mut map = read_container(&root.join(rel))?.into_instance_map(rel)?;
                    if let Some(c) = &s.classes {
                        map = map.with_classes(read_classes(&root.join(c))?)?;
                    }
                    Target::Instances(map)
                }
            };
            samples.push(Sample {
                id: s.id.clone(),
                image,
                target,
                patient: s.patient,
                fold: s.fold,
            });
        }
        Ok(TaskData {
            manifest: manifest.clone(),
            samples,
        })
    }

    /// In-memory task data straight from generated scenes.
    pub fn from_scenes(task: &str, scenes: &[Scene], folds: &[usize], classification_size: usize) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::invalid("no scenes"))?;
        let (h, w) = (first.glands.height(), first.glands.width());
        let seg = task != TISSUE;
        let mut fg = 0usize;
        let samples = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let target = match task {
                    GLANDS => Target::Instances(s.glands.clone()),
                    LUMEN => Target::Instances(s.lumen.clone()),
                    NUCLEI => Target::Instances(s.nuclei.clone()),
                    TISSUE => Target::Label(s.tissue as u32),
                    other => return Err(Error::invalid(format!("unknown task {other}"))),
                };
                if let Target::Instances(m) = &target {
                    fg += m.ids().iter().filter(|&&v| v > 0).count();
                }
                let image = if seg { s.image.clone() } else { box_downsample(&s.image, h / classification_size)? };
                Ok(Sample {
                    id: format!("scene{i:05}"),
                    image,
                    target,
                    patient: s.patient,
                    fold: folds.get(i).copied().unwrap_or(0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let f = fg as f64 / (scenes.len() * h * w) as f64;
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            dataset_id: "in-memory".into(),
            task_id: task.into(),
            super_task_id: if seg { SEGMENTATION } else { CLASSIFICATION }.into(),
            kind: if seg { TaskKind::Segmentation } else { TaskKind::Classification },
            num_classes: match task {
                NUCLEI => first.nuclei.classes().map_or(0, |_| 3),
                TISSUE => Tissue::COUNT,
                _ => 0,
            },
            input: if seg { [h, w] } else { [classification_size; 2] },
            folds: folds.iter().copied().max().map_or(1, |m| m + 1),
            pixel_frequencies: seg.then_some([1.0 - f, f]),
            samples: Vec::new(),
        };
        Ok(TaskData { manifest, samples })
    }
}

pub fn manifest_path(root: &Path, task: &str) -> PathBuf {
    root.join("manifests").join(format!("{task}.json"))
}
