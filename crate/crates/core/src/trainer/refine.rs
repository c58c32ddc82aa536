//! Extract-refine-retrain with a scripted annotator.
//!
//! Each round trains on the labelled pool, scores the validation tiles,
//! ranks the unlabelled tiles by Dice against the annotator's labels and
//! moves the `k` worst into the labelled pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{prepare::PreparedTarget, train, PreparedSample, PreparedTask, TrainConfig, TrainRun};
use crate::autodiff::Tensor;
use crate::instances::{recover_instances, InstanceMap, Recovery};
use crate::losses::{build_unet_weights, pixel_frequencies};
use crate::metrics::DiceCounts;
use crate::model::ModelGraph;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub id: usize,
    /// `[3,H,W]`.
    pub image: Tensor<f32>,
    /// Reference labels the annotator consults.
    pub truth: InstanceMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTile {
    pub id: usize,
    pub dice: f64,
}

fn tile_dice(model: &ModelGraph, task: &str, tiles: &[&Tile], labels: &[&InstanceMap], scheme: Recovery) -> Result<Vec<f64>> {
    let images: Vec<&Tensor<f32>> = tiles.iter().map(|t| &t.image).collect();
    let probs = super::predict_probabilities(model, task, &images)?;
    probs
        .iter()
        .zip(labels)
        .map(|(p, gt)| {
            let pred = recover_instances(p, scheme)?;
            Ok(DiceCounts::of(&pred.foreground(), &gt.foreground())?.value())
        })
        .collect()
}

/// Tiles by ascending Dice against `labels`; equal scores keep tile-id order.
pub fn rank_regions_by_error(
    model: &ModelGraph,
    task: &str,
    tiles: &[&Tile],
    labels: &[&InstanceMap],
    scheme: Recovery,
) -> Result<Vec<RankedTile>> {
    if tiles.len() != labels.len() {
        return Err(Error::shape(format!("{} tiles with {} label maps", tiles.len(), labels.len())));
    }
    let dice = tile_dice(model, task, tiles, labels, scheme)?;
    let mut ranked: Vec<RankedTile> = tiles.iter().zip(dice).map(|(t, dice)| RankedTile { id: t.id, dice }).collect();
    ranked.sort_by(|a, b| a.dice.total_cmp(&b.dice).then(a.id.cmp(&b.id)));
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineState {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub round: usize,
    pub validation_dice: Vec<f64>,
}

impl RefineState {
    pub fn new(labelled: Vec<usize>, unlabelled: Vec<usize>) -> Result<Self> {
        if let Some(id) = labelled.iter().find(|id| unlabelled.contains(id)) {
            return Err(Error::invalid(format!("tile {id} is in both pools")));
        }
        Ok(RefineState {
            labelled,
            unlabelled,
            round: 0,
            validation_dice: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub task: String,
    pub super_task: String,
    pub scheme: Recovery,
    pub rounds: usize,
    pub k_per_round: usize,
    /// Stop once a round improves validation Dice by less than this.
    pub min_gain: Option<f64>,
    /// Keep training the previous round's model instead of a fresh one.
    pub warm_start: bool,
    /// Training run per round; its seed is offset by the round index.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineRound {
    pub round: usize,
    pub trained_on: usize,
    pub validation_dice: f64,
    /// Full ranking of the unlabelled pool at the end of the round.
    pub ranking: Vec<RankedTile>,
    pub extracted: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    PoolExhausted,
    Converged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub rounds: Vec<RefineRound>,
    pub stop: StopReason,
}

fn labelled_task(config: &RefineConfig, tiles: &[(&Tile, InstanceMap)]) -> Result<PreparedTask> {
    let freq = pixel_frequencies(tiles.iter().map(|(_, m)| m));
    let targets = &config.train.targets;
    let samples = tiles
        .iter()
        .map(|(t, m)| {
            let classes = config.scheme.target(m)?.classes.iter().map(|c| *c as u32).collect();
            let weights = targets
                .unet_weights
                .then(|| build_unet_weights(m, targets.w0, targets.sigma, Some(freq)).weights);
            Ok(PreparedSample {
                id: format!("tile{:05}", t.id),
                image: t.image.clone(),
                target: PreparedTarget::Pixels { classes, weights },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &tiles.first().ok_or_else(|| Error::invalid("labelled pool is empty"))?.0.image;
    Ok(PreparedTask {
        task: config.task.clone(),
        super_task: config.super_task.clone(),
        input: [first.shape()[1], first.shape()[2]],
        samples,
        patients: vec![0; tiles.len()],
    })
}

/// Runs up to `config.rounds` rounds. `oracle` supplies the labels of a tile
/// when it is ranked or extracted; `factory` builds the model to train.
pub fn refine_loop(
    mut state: RefineState,
    tiles: &[Tile],
    validation: &[Tile],
    config: &RefineConfig,
    mut factory: impl FnMut(usize) -> Result<ModelGraph>,
    oracle: impl Fn(&Tile) -> InstanceMap,
) -> Result<(RefineState, RefineReport)> {
    if config.rounds == 0 {
        return Err(Error::invalid("refinement needs at least one round"));
    }
    if config.k_per_round == 0 {
        return Err(Error::invalid("k_per_round must be at least 1"));
    }
    let by_id: BTreeMap<usize, &Tile> = tiles.iter().map(|t| (t.id, t)).collect();
    let lookup = |id: usize| by_id.get(&id).copied().ok_or_else(|| Error::invalid(format!("unknown tile {id}")));
    let val_tiles: Vec<&Tile> = validation.iter().collect();
    let val_labels: Vec<&InstanceMap> = validation.iter().map(|t| &t.truth).collect();
    let mut labels: BTreeMap<usize, InstanceMap> = BTreeMap::new();
    for &id in &state.labelled {
        labels.insert(id, oracle(lookup(id)?));
    }
    let mut rounds = Vec::new();
    let mut model: Option<ModelGraph> = None;
    let mut stop = StopReason::Completed;
    for r in 0..config.rounds {
        let pool: Vec<(&Tile, InstanceMap)> = state
            .labelled
            .iter()
            .map(|&id| Ok((lookup(id)?, labels[&id].clone())))
            .collect::<Result<_>>()?;
        let task = labelled_task(config, &pool)?;
        let start = match model.take() {
            Some(m) if config.warm_start => m,
            _ => factory(r)?,
        };
        let mut train_cfg = config.train.clone();
        train_cfg.seed = config.train.seed.wrapping_add(r as u64);
        let tasks = BTreeMap::from([(config.task.clone(), task)]);
        let trained = train(&train_cfg, &tasks, start, TrainRun::default())?.model;
        let scores = tile_dice(&trained, &config.task, &val_tiles, &val_labels, config.scheme)?;
        let val = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        state.round = r + 1;
        state.validation_dice.push(val);

        let mut round = RefineRound {
            round: r + 1,
            trained_on: state.labelled.len(),
            validation_dice: val,
            ranking: Vec::new(),
            extracted: Vec::new(),
        };
        let converged = r > 0
            && config
                .min_gain
                .is_some_and(|d| val - state.validation_dice[r - 1] < d);
        if state.unlabelled.is_empty() || converged {
            stop = if converged { StopReason::Converged } else { StopReason::PoolExhausted };
            rounds.push(round);
            break;
        }
        let candidates: Vec<&Tile> = state.unlabelled.iter().map(|&id| lookup(id)).collect::<Result<_>>()?;
        let answers: Vec<InstanceMap> = candidates.iter().map(|t| oracle(t)).collect();
        let answer_refs: Vec<&InstanceMap> = answers.iter().collect();
        round.ranking = rank_regions_by_error(&trained, &config.task, &candidates, &answer_refs, config.scheme)?;
        round.extracted = round.ranking.iter().take(config.k_per_round).map(|t| t.id).collect();
        for &id in &round.extracted {
            let at = candidates.iter().position(|t| t.id == id).expect("ranked tile");
            labels.insert(id, answers[at].clone());
        }
        state.unlabelled.retain(|id| !round.extracted.contains(id));
        state.labelled.extend(&round.extracted);
        rounds.push(round);
        model = Some(trained);
    }
    Ok((state, RefineReport { rounds, stop }))
}
