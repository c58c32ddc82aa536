//! Evaluation suite: Dice, IoU matching, PQ/DQ/SQ, mPQ and mPQ⁺, AP, F1 and
//! FROC area, plus a serialisable report that keeps the counts behind every
//! ratio so it can be audited.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::InstanceMap;

/// Raw overlap counts behind a Dice value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiceCounts {
    pub intersection: usize,
    pub pred: usize,
    pub gt: usize,
}

impl DiceCounts {
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("dice: {} predicted vs {} reference pixels", pred.len(), gt.len())));
        }
        let mut c = DiceCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            c.intersection += (p && g) as usize;
            c.pred += p as usize;
            c.gt += g as usize;
        }
        Ok(c)
    }

    /// Both-empty masks score 1.
    pub fn value(&self) -> f64 {
        if self.pred + self.gt == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / (self.pred + self.gt) as f64
        }
    }
}

pub fn dice_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(DiceCounts::of(pred, gt)?.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: Vec<MatchedPair>,
    pub fp: Vec<u32>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u32>,
}

/// Pairs every predicted and reference instance whose IoU strictly exceeds
/// 0.5. Above that threshold a pairing is necessarily one-to-one.
pub fn match_instances(pred: &InstanceMap, gt: &InstanceMap) -> Result<MatchResult> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "matching {}×{} predictions against {}×{} reference",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (pa, ga) = (pred.areas(), gt.areas());
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if p > 0 && g > 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let mut tp: Vec<MatchedPair> = inter
        .into_iter()
        .filter_map(|((p, g), n)| {
            let iou = n as f64 / (pa[p as usize - 1] + ga[g as usize - 1] - n) as f64;
            (iou > 0.5).then_some(MatchedPair { pred: p, gt: g, iou })
        })
        .collect();
    tp.sort_by_key(|m| m.gt);
    let fp = (1..=pred.count() as u32).filter(|&p| !tp.iter().any(|m| m.pred == p)).collect();
    let fn_ = (1..=gt.count() as u32).filter(|&g| !tp.iter().any(|m| m.gt == g)).collect();
    Ok(MatchResult { tp, fp, fn_ })
}

/// Counts from which DQ, SQ and PQ follow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pq {
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    /// No instances on either side; the value 1 is a convention.
    pub empty: bool,
}

impl PqCounts {
    pub fn of(m: &MatchResult) -> Self {
        PqCounts {
            tp: m.tp.len(),
            fp: m.fp.len(),
            fn_: m.fn_.len(),
            iou_sum: m.tp.iter().map(|p| p.iou).sum(),
        }
    }

    pub fn add(&mut self, other: &PqCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn value(&self) -> Pq {
        if self.is_empty() {
            return Pq {
                pq: 1.0,
                dq: 1.0,
                sq: 1.0,
                empty: true,
            };
        }
        if self.tp == 0 {
            return Pq {
                pq: 0.0,
                dq: 0.0,
                sq: 0.0,
                empty: false,
            };
        }
        let dq = self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        let sq = self.iou_sum / self.tp as f64;
        Pq {
            pq: dq * sq,
            dq,
            sq,
            empty: false,
        }
    }
}

pub fn panoptic_quality(m: &MatchResult) -> Pq {
    PqCounts::of(m).value()
}

/// One image of a class-labelled corpus: predictions and reference both carry
/// per-instance classes in `1..=K`.
#[derive(Debug, Clone)]
pub struct LabelledPair {
    pub pred: InstanceMap,
    pub gt: InstanceMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpqReport {
    /// Class mean; `None` when no class qualified.
    pub value: Option<f64>,
    /// Per-class PQ, indexed by `class - 1`.
    pub per_class: Vec<Option<f64>>,
    /// Per-class pooled counts (only meaningful for mPQ⁺).
    pub counts: Vec<PqCounts>,
}

fn class_counts(pair: &LabelledPair, class: u32) -> Result<(PqCounts, usize)> {
    let p = pair.pred.filter_class(class)?;
    let g = pair.gt.filter_class(class)?;
    Ok((PqCounts::of(&match_instances(&p, &g)?), g.count()))
}

/// Per-image, per-class PQ. (image, class) pairs without reference instances
/// of that class are skipped even when the class was predicted there.
pub fn mpq(corpus: &[LabelledPair], num_classes: usize) -> Result<MpqReport> {
    let mut per_class = Vec::with_capacity(num_classes);
    let mut counts = vec![PqCounts::default(); num_classes];
    for c in 1..=num_classes as u32 {
        let mut values = Vec::new();
        for pair in corpus {
            let (k, n_gt) = class_counts(pair, c)?;
            if n_gt > 0 {
                values.push(k.value().pq);
                counts[c as usize - 1].add(&k);
            }
        }
        if values.is_empty() {
            warn!("class {c} has no reference instance in any image; excluded from mPQ");
            per_class.push(None);
        } else {
            per_class.push(Some(values.iter().sum::<f64>() / values.len() as f64));
        }
    }
    Ok(MpqReport {
        value: mean_some(&per_class),
        per_class,
        counts,
    })
}

/// Class-wise counts pooled over every image, PQ computed once per class.
/// Classes with no instance on either side anywhere are excluded.
pub fn mpq_plus(corpus: &[LabelledPair], num_classes: usize) -> Result<MpqReport> {
    let mut counts = vec![PqCounts::default(); num_classes];
    for pair in corpus {
        for c in 1..=num_classes as u32 {
            counts[c as usize - 1].add(&class_counts(pair, c)?.0);
        }
    }
    let per_class: Vec<Option<f64>> = counts
        .iter()
        .map(|k| (!k.is_empty()).then(|| k.value().pq))
        .collect();
    Ok(MpqReport {
        value: mean_some(&per_class),
        per_class,
        counts,
    })
}

fn mean_some(v: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = v.iter().flatten().copied().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub const AP_THRESHOLDS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub positives: Vec<usize>,
    pub map: Option<f64>,
}

/// One-vs-rest AP per class: Σ (Re_n − Re_{n−1}) · Pr_n over thresholds
/// 1.00, 0.99, …, 0.00, a sample counting as positive when its score ≥ the
/// threshold. Precision with no positive predictions is taken as 1.
pub fn average_precision(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<ApReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| s.len() != num_classes) {
        return Err(Error::shape(format!("score row of length {} for {num_classes} classes", bad.len())));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut positives = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let pos = labels.iter().filter(|&&l| l == c).count();
        positives.push(pos);
        if pos == 0 {
            warn!("class {c} has no positive sample; AP undefined and excluded");
            per_class.push(None);
            continue;
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for n in 0..AP_THRESHOLDS {
            let t = (AP_THRESHOLDS - 1 - n) as f64 / (AP_THRESHOLDS - 1) as f64;
            let (mut tp, mut fp) = (0usize, 0usize);
            for (s, &l) in scores.iter().zip(labels) {
                if s[c] >= t {
                    if l == c {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let recall = tp as f64 / pos as f64;
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        per_class.push(Some(ap));
    }
    Ok(ApReport {
        map: mean_some(&per_class),
        per_class,
        positives,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Mode {
    /// 2·Pr·Re / (Pr + Re).
    #[default]
    Standard,
    /// Pr·Re / (Pr + Re), without the factor 2.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn f1(&self, mode: F1Mode) -> f64 {
        let pr = ratio(self.tp, self.tp + self.fp);
        let re = ratio(self.tp, self.tp + self.fn_);
        if pr + re == 0.0 {
            return 0.0;
        }
        let f = pr * re / (pr + re);
        match mode {
            F1Mode::Standard => 2.0 * f,
            F1Mode::AsPrinted => f,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub mode: F1Mode,
    pub counts: Vec<ClassCounts>,
    pub per_class: Vec<f64>,
    pub mf1: f64,
}

pub fn f1_scores(pred: &[usize], gt: &[usize], num_classes: usize, mode: F1Mode) -> Result<F1Report> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
    }
    let mut counts = vec![ClassCounts::default(); num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            counts[p].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[g].fn_ += 1;
        }
    }
    let per_class: Vec<f64> = counts.iter().map(|c| c.f1(mode)).collect();
    let mf1 = if num_classes == 0 {
        0.0
    } else {
        per_class.iter().sum::<f64>() / num_classes as f64
    };
    Ok(F1Report {
        mode,
        counts,
        per_class,
        mf1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub row: f64,
    pub col: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrocImage {
    pub detections: Vec<Detection>,
    pub gt: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocConfig {
    pub match_radius: f64,
    pub fp_levels: Vec<f64>,
}

impl Default for FrocConfig {
    fn default() -> Self {
        FrocConfig {
            match_radius: 8.0,
            fp_levels: vec![0.5, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocReport {
    pub area: f64,
    pub sensitivities: Vec<f64>,
    pub total_gt: usize,
    pub images: usize,
}

/// Greedy score-descending matching inside one image; returns a TP flag per
/// detection in the original order. Each detection takes the nearest free
/// reference point within the radius, lowest index on ties.
pub fn froc_match(image: &FrocImage, radius: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..image.detections.len()).collect();
    order.sort_by(|&a, &b| image.detections[b].score.total_cmp(&image.detections[a].score));
    let mut taken = vec![false; image.gt.len()];
    let mut hit = vec![false; image.detections.len()];
    for i in order {
        let d = image.detections[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, &(r, c)) in image.gt.iter().enumerate() {
            let dist = ((r - d.row).powi(2) + (c - d.col).powi(2)).sqrt();
            if !taken[j] && dist <= radius && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            hit[i] = true;
        }
    }
    hit
}

/// Mean sensitivity over the configured average-false-positives-per-image
/// levels. Sensitivity at a level is the best one reached by any score
/// threshold whose FP rate does not exceed it.
pub fn froc_area(images: &[FrocImage], config: &FrocConfig) -> Result<FrocReport> {
    if images.is_empty() {
        return Err(Error::invalid("FROC needs at least one image"));
    }
    if config.fp_levels.is_empty() || config.fp_levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("FROC false-positive levels must be non-empty and ascending"));
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for img in images {
        let hits = froc_match(img, config.match_radius);
        scored.extend(img.detections.iter().zip(hits).map(|(d, h)| (d.score, h)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_gt: usize = images.iter().map(|i| i.gt.len()).sum();
    let n_img = images.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == scored.len() || scored[i + 1].0 != score {
            points.push((fp as f64 / n_img, sensitivity(tp, total_gt)));
        }
    }
    let sensitivities: Vec<f64> = config
        .fp_levels
        .iter()
        .map(|&lvl| {
            points
                .iter()
                .filter(|p| p.0 <= lvl)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(FrocReport {
        area: sensitivities.iter().sum::<f64>() / sensitivities.len() as f64,
        sensitivities,
        total_gt,
        images: images.len(),
    })
}

/// With no reference points there is nothing to miss.
fn sensitivity(tp: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        tp as f64 / total as f64
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSegmentation {
    pub image: String,
    pub dice_counts: DiceCounts,
    pub dice: f64,
    pub pq_counts: PqCounts,
    pub pq: Pq,
}

impl ImageSegmentation {
    pub fn evaluate(image: impl Into<String>, pred: &InstanceMap, gt: &InstanceMap) -> Result<Self> {
        let dice_counts = DiceCounts::of(&pred.foreground(), &gt.foreground())?;
        let pq_counts = PqCounts::of(&match_instances(pred, gt)?);
        Ok(ImageSegmentation {
            image: image.into(),
            dice: dice_counts.value(),
            dice_counts,
            pq: pq_counts.value(),
            pq_counts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub task: String,
    pub images: Vec<ImageSegmentation>,
    /// Mean per-image Dice.
    pub dice: f64,
    /// Means over images that contain at least one instance on either side.
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
}

impl SegmentationMetrics {
    pub fn from_images(task: impl Into<String>, images: Vec<ImageSegmentation>) -> Self {
        let (dice, pq, dq, sq) = segmentation_means(&images);
        SegmentationMetrics {
            task: task.into(),
            images,
            dice,
            pq,
            dq,
            sq,
        }
    }
}

fn segmentation_means(images: &[ImageSegmentation]) -> (f64, f64, f64, f64) {
    let dice = if images.is_empty() {
        1.0
    } else {
        images.iter().map(|i| i.dice_counts.value()).sum::<f64>() / images.len() as f64
    };
    let scored: Vec<Pq> = images.iter().map(|i| i.pq_counts.value()).filter(|p| !p.empty).collect();
    if scored.is_empty() {
        return (dice, 1.0, 1.0, 1.0);
    }
    let n = scored.len() as f64;
    (
        dice,
        scored.iter().map(|p| p.pq).sum::<f64>() / n,
        scored.iter().map(|p| p.dq).sum::<f64>() / n,
        scored.iter().map(|p| p.sq).sum::<f64>() / n,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtypeMetrics {
    pub task: String,
    pub mpq: MpqReport,
    pub mpq_plus: MpqReport,
    /// Instance-level class F1 over reference instances matched by a prediction.
    pub f1: F1Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub task: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub ap: ApReport,
    pub f1: F1Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub segmentation: Vec<SegmentationMetrics>,
    pub subtype: Option<SubtypeMetrics>,
    pub classification: Option<ClassificationMetrics>,
    pub froc: Option<FrocReport>,
}

impl MetricReport {
    /// Recomputes every stored ratio from its counts; returns the mismatches.
    pub fn audit(&self) -> Vec<String> {
        const TOL: f64 = 1e-12;
        let mut bad = Vec::new();
        let mut check = |what: String, stored: f64, recomputed: f64| {
            let off = (stored - recomputed).abs() > TOL || recomputed.is_nan();
            if off || !(0.0..=1.0).contains(&stored) {
                bad.push(format!("{what}: stored {stored}, recomputed {recomputed}"));
            }
        };
        for seg in &self.segmentation {
            for img in &seg.images {
                let pq = img.pq_counts.value();
                check(format!("{}/{} dice", seg.task, img.image), img.dice, img.dice_counts.value());
                check(format!("{}/{} pq", seg.task, img.image), img.pq.pq, pq.pq);
                check(format!("{}/{} dq", seg.task, img.image), img.pq.dq, pq.dq);
                check(format!("{}/{} sq", seg.task, img.image), img.pq.sq, pq.sq);
            }
            let (dice, pq, dq, sq) = segmentation_means(&seg.images);
            check(format!("{} dice", seg.task), seg.dice, dice);
            check(format!("{} pq", seg.task), seg.pq, pq);
            check(format!("{} dq", seg.task), seg.dq, dq);
            check(format!("{} sq", seg.task), seg.sq, sq);
        }
        let check_f1 = |what: &str, f1: &F1Report, bad: &mut Vec<String>| {
            for (c, (counts, &v)) in f1.counts.iter().zip(&f1.per_class).enumerate() {
                if (counts.f1(f1.mode) - v).abs() > TOL {
                    bad.push(format!("{what} f1 class {c}: stored {v}, recomputed {}", counts.f1(f1.mode)));
                }
            }
        };
        if let Some(sub) = &self.subtype {
            check_f1(&sub.task, &sub.f1, &mut bad);
            for (c, (k, v)) in sub.mpq_plus.counts.iter().zip(&sub.mpq_plus.per_class).enumerate() {
                if let Some(v) = v {
                    if (k.value().pq - v).abs() > TOL {
                        bad.push(format!("{} mpq+ class {}: stored {v}, recomputed {}", sub.task, c + 1, k.value().pq));
                    }
                }
            }
        }
        if let Some(cls) = &self.classification {
            check_f1(&cls.task, &cls.f1, &mut bad);
            if (cls.accuracy - ratio(cls.correct, cls.total)).abs() > TOL {
                bad.push(format!("{} accuracy: stored {}, recomputed", cls.task, cls.accuracy));
            }
        }
        bad
    }

    /// Flat `metric,task,value` projection of the aggregate values.
    pub fn to_csv(&self) -> String {
        let mut rows = vec!["metric,task,value".to_string()];
        for s in &self.segmentation {
            for (name, v) in [("dice", s.dice), ("pq", s.pq), ("dq", s.dq), ("sq", s.sq)] {
                rows.push(format!("{name},{},{v}", s.task));
            }
        }
        if let Some(sub) = &self.subtype {
            for (name, v) in [("mpq", sub.mpq.value), ("mpq_plus", sub.mpq_plus.value)] {
                rows.push(format!("{name},{},{}", sub.task, v.map_or("".into(), |v| v.to_string())));
            }
            rows.push(format!("mf1,{},{}", sub.task, sub.f1.mf1));
        }
        if let Some(c) = &self.classification {
            rows.push(format!("accuracy,{},{}", c.task, c.accuracy));
            rows.push(format!("map,{},{}", c.task, c.ap.map.map_or("".into(), |v| v.to_string())));
            rows.push(format!("mf1,{},{}", c.task, c.f1.mf1));
        }
        if let Some(f) = &self.froc {
            rows.push(format!("froc_area,nuclei,{}", f.area));
        }
        rows.join("\n") + "\n"
    }
}
