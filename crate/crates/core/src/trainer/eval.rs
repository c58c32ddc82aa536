//! Evaluation of a trained model on in-memory task data.

use crate::autodiff::{ops, Tensor};
use crate::data::TaskData;
use crate::instances::{argmax_channels, centroids, majority_vote_subtype, recover_instances, InstanceMap, Recovery};
use crate::metrics::{
    average_precision, f1_scores, match_instances, mpq, mpq_plus, ClassificationMetrics, Detection, F1Mode,
    FrocImage, ImageSegmentation, LabelledPair, SegmentationMetrics, SubtypeMetrics,
};
use crate::model::{ModelGraph, SUBTYPE};
use crate::{Error, Result};

const EVAL_BATCH: usize = 8;

fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images"))?;
    let mut dims = vec![images.len()];
    dims.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape(format!("image shape {:?} differs from {:?}", im.shape(), first.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(dims, data)
}

fn split_rows(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let n = t.shape()[0];
    let per = t.numel() / n.max(1);
    let shape = t.shape()[1..].to_vec();
    t.data()
        .chunks(per)
        .map(|c| Tensor::new(shape.clone(), c.to_vec()).expect("row shape"))
        .collect()
}

/// Eval-mode softmax output per image: `[K,H,W]` for a segmentation task or
/// [`SUBTYPE`], `[K]` for the classification head (`task == HEAD`).
pub fn predict_probabilities(model: &ModelGraph, task: &str, images: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = stack(chunk)?;
        let probs = model.eval(|g, w| {
            let xn = g.input(x);
            let logits = if task == crate::model::HEAD {
                model.forward_classification(g, w, xn)?
            } else {
                model.forward_segmentation(g, w, task, xn)?
            };
            let p = ops::channel_softmax(g, logits)?;
            Ok(g.value(p).clone())
        })?;
        out.extend(split_rows(&probs));
    }
    Ok(out)
}

pub fn evaluate_segmentation(model: &ModelGraph, data: &TaskData, scheme: Recovery) -> Result<(SegmentationMetrics, Vec<InstanceMap>)> {
    let task = &data.manifest.task_id;
    let images: Vec<&Tensor<f32>> = data.samples.iter().map(|s| &s.image).collect();
    let probs = predict_probabilities(model, task, &images)?;
    let mut per_image = Vec::with_capacity(probs.len());
    let mut preds = Vec::with_capacity(probs.len());
    for (s, p) in data.samples.iter().zip(&probs) {
        let gt = s
            .instances()
            .ok_or_else(|| Error::invalid(format!("sample {} has no instance map", s.id)))?;
        let pred = recover_instances(p, scheme)?;
        per_image.push(ImageSegmentation::evaluate(&s.id, &pred, gt)?);
        preds.push(pred);
    }
    Ok((SegmentationMetrics::from_images(task.clone(), per_image), preds))
}

pub fn evaluate_classification(model: &ModelGraph, data: &TaskData) -> Result<ClassificationMetrics> {
    let k = model
        .config
        .head
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no classification head"))?
        .classes;
    let images: Vec<&Tensor<f32>> = data.samples.iter().map(|s| &s.image).collect();
    let probs = predict_probabilities(model, crate::model::HEAD, &images)?;
    let labels: Vec<usize> = data
        .samples
        .iter()
        .map(|s| {
            s.label()
                .map(|l| l as usize)
                .ok_or_else(|| Error::invalid(format!("sample {} has no label", s.id)))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<Vec<f64>> = probs.iter().map(|p| p.data().iter().map(|v| *v as f64).collect()).collect();
    let pred: Vec<usize> = scores
        .iter()
        .map(|s| {
            // first maximum wins
            s.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect();
    let correct = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(ClassificationMetrics {
        task: data.manifest.task_id.clone(),
        correct,
        total: labels.len(),
        accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
        ap: average_precision(&scores, &labels, k)?,
        f1: f1_scores(&pred, &labels, k, F1Mode::Standard)?,
    })
}

/// Per-pixel subtype classes `1..=K` from `[K,H,W]` subtype probabilities.
pub fn subtype_classes(probs: &Tensor<f32>) -> Result<Vec<u32>> {
    Ok(argmax_channels(probs)?.into_iter().map(|c| c as u32 + 1).collect())
}

/// Instances come from the parent decoder, their classes from a majority
/// vote of the subtype decoder over each instance's pixels.
pub fn evaluate_subtype(model: &ModelGraph, data: &TaskData, parent_scheme: Recovery) -> Result<(SubtypeMetrics, Vec<FrocImage>)> {
    let spec = model
        .config
        .subtype
        .clone()
        .ok_or_else(|| Error::invalid("model has no subtype decoder"))?;
    let k = spec.classes;
    let images: Vec<&Tensor<f32>> = data.samples.iter().map(|s| &s.image).collect();
    let parent = predict_probabilities(model, &spec.parent, &images)?;
    let sub = predict_probabilities(model, SUBTYPE, &images)?;
    let mut corpus = Vec::with_capacity(images.len());
    let (mut pred_cls, mut gt_cls) = (Vec::new(), Vec::new());
    let mut froc = Vec::with_capacity(images.len());
    for ((s, pp), sp) in data.samples.iter().zip(&parent).zip(&sub) {
        let gt = s
            .instances()
            .ok_or_else(|| Error::invalid(format!("sample {} has no instance map", s.id)))?;
        if gt.classes().is_none() {
            return Err(Error::invalid(format!("sample {} has no instance classes", s.id)));
        }
        let inst = recover_instances(pp, parent_scheme)?;
        let labels = majority_vote_subtype(&inst, &subtype_classes(sp)?)?;
        let pred = inst.clone().with_classes(labels)?;
        let m = match_instances(&pred, gt)?;
        for pair in &m.tp {
            pred_cls.push(pred.class_of(pair.pred).expect("classed") as usize - 1);
            gt_cls.push(gt.class_of(pair.gt).expect("classed") as usize - 1);
        }
        froc.push(detections(&pred, pp, gt));
        corpus.push(LabelledPair { pred, gt: gt.clone() });
    }
    Ok((
        SubtypeMetrics {
            task: SUBTYPE.into(),
            mpq: mpq(&corpus, k)?,
            mpq_plus: mpq_plus(&corpus, k)?,
            f1: f1_scores(&pred_cls, &gt_cls, k, F1Mode::Standard)?,
        },
        froc,
    ))
}

/// Instance centroids scored by mean foreground probability.
pub fn detections(pred: &InstanceMap, probs: &Tensor<f32>, gt: &InstanceMap) -> FrocImage {
    let hw = pred.height() * pred.width();
    let fg = &probs.data()[hw..];
    let mut sums = vec![0.0f64; pred.count()];
    for (p, &id) in pred.ids().iter().enumerate() {
        if id > 0 {
            // foreground is every non-background channel
            let mut v = 0.0;
            for c in 0..probs.shape()[0] - 1 {
                v += fg[c * hw + p] as f64;
            }
            sums[id as usize - 1] += v;
        }
    }
    let areas = pred.areas();
    let points = |m: &InstanceMap| -> Vec<(f64, f64)> { centroids(m).into_iter().map(|(r, c)| (r as f64, c as f64)).collect() };
    FrocImage {
        detections: points(pred)
            .into_iter()
            .enumerate()
            .map(|(i, (row, col))| Detection {
                row,
                col,
                score: sums[i] / areas[i].max(1) as f64,
            })
            .collect(),
        gt: points(gt),
    }
}
