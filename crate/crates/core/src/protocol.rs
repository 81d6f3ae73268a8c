//! Experiment protocol: patient-level splits, training loops, replicate
//! selection, top-k ensembling and the weighted joint loss.
//!
//! All randomness is drawn from streams derived from the master seed and
//! the `(split, replicate, epoch)` path, so parallel and sequential runs
//! produce identical models.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::milnet::{
    self, gma_backward, tile_supervised_score, FeatureBag, GmaModel, Objective, TileScorer,
};
use crate::numkit::{derive_seed, OptimSpec, OptimState, Tensor2D};

// stream tags for derive_seed paths
const TAG_SPLIT: u64 = 0x51;
const TAG_INIT: u64 = 0x1217;
const TAG_EPOCH: u64 = 0xe9;
const TAG_HALF: u64 = 0x4a1f;

/// One train/validation partition of patient ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_splits: usize,
    pub train_frac: f64,
    pub seed: u64,
    pub splits: Vec<Split>,
}

/// Random patient-level splits. Each split shuffles the distinct patient
/// ids independently and puts `round(train_frac · n)` of them in training.
pub fn make_splits(patient_ids: &[String], n_splits: usize, train_frac: f64, seed: u64) -> Result<SplitPlan> {
    let unique: Vec<String> = patient_ids
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = unique.len();
    if n < 5 {
        return Err(invalid(format!("need at least 5 patients to split, got {n}")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(invalid(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    if n_splits == 0 {
        return Err(invalid("n_splits must be >= 1"));
    }
    let n_train = (train_frac * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(invalid(format!(
            "train_frac {train_frac} leaves an empty side with {n} patients"
        )));
    }
    let splits = (0..n_splits)
        .map(|i| {
            let mut ids = unique.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SPLIT, i as u64]));
            ids.shuffle(&mut rng);
            let mut train = ids[..n_train].to_vec();
            let mut validation = ids[n_train..].to_vec();
            train.sort();
            validation.sort();
            Split { train, validation }
        })
        .collect();
    Ok(SplitPlan {
        n_splits,
        train_frac,
        seed,
        splits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Tile-level classifier trained with the slide label, mean pooled.
    #[value(name = "tile")]
    TileSupervised,
    /// Gated-attention MIL on tile features.
    Gma,
    /// Gated-attention MIL with covariate fusion.
    #[value(name = "gma-multimodal")]
    GmaMultimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub optimizer: OptimSpec,
    pub pos_weight: f64,
    /// Fraction of tiles per slide (tile mode) or of training slides (MIL
    /// modes) drawn each epoch, without replacement.
    pub sample_fraction: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Attention hidden width.
    pub d2: usize,
    /// Tiles per optimizer step in tile mode.
    pub tile_batch_size: usize,
    /// Encoded covariates fed to the fusion layer; `None` keeps all.
    pub covariate_columns: Option<Vec<usize>>,
    /// Weight of the histology and fused terms in the multimodal loss.
    pub joint_alpha: f64,
    /// Drop a seeded half of the training patients before training, as
    /// when that half was spent pretraining a feature extractor.
    pub holdout_half: bool,
}

impl TrainConfig {
    /// Published hyperparameters: SGD at 0.05 with ×0.1 decay every 10
    /// epochs for 30 epochs on 10% of tiles; Adam at 1e-4 for 50 epochs on
    /// 10% of slides.
    pub fn published_defaults(mode: TrainMode) -> Self {
        let base = TrainConfig {
            mode,
            epochs: 50,
            optimizer: OptimSpec::adam(1e-4),
            pos_weight: 0.7,
            sample_fraction: 0.1,
            replicates: 3,
            seed: 0,
            d2: 512,
            tile_batch_size: 32,
            covariate_columns: None,
            joint_alpha: 0.4,
            holdout_half: false,
        };
        match mode {
            TrainMode::TileSupervised => TrainConfig {
                epochs: 30,
                optimizer: OptimSpec::sgd_step_decay(0.05),
                ..base
            },
            _ => base,
        }
    }

    /// Settings for small synthetic cohorts (hundreds of slides, D1 ≈ 64):
    /// every slide or tile is visited each epoch and the MIL learning rate
    /// is raised so training converges in a few dozen epochs.
    pub fn desk_scale(mode: TrainMode) -> Self {
        let published = TrainConfig::published_defaults(mode);
        match mode {
            TrainMode::TileSupervised => TrainConfig {
                sample_fraction: 1.0,
                ..published
            },
            _ => TrainConfig {
                epochs: 30,
                optimizer: OptimSpec::adam(1e-3),
                sample_fraction: 1.0,
                d2: 32,
                ..published
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(invalid(format!(
                "sample_fraction must lie in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if !(self.pos_weight > 0.0 && self.pos_weight < 1.0) {
            return Err(invalid(format!("pos_weight must lie in (0, 1), got {}", self.pos_weight)));
        }
        if self.replicates == 0 {
            return Err(invalid("replicates must be >= 1"));
        }
        if self.d2 == 0 || self.tile_batch_size == 0 {
            return Err(invalid("d2 and tile_batch_size must be >= 1"));
        }
        if !(self.joint_alpha > 0.0) {
            return Err(invalid("joint_alpha must be positive"));
        }
        self.optimizer.validate()
    }
}

/// `α·l_hist + (α/2)·l_aux + α·l_fused`.
pub fn joint_loss(l_hist: f64, l_aux: f64, l_fused: f64, alpha: f64) -> Result<f64> {
    if ![l_hist, l_aux, l_fused, alpha].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if alpha <= 0.0 {
        return Err(invalid("alpha must be positive"));
    }
    Ok(alpha * l_hist + alpha / 2.0 * l_aux + alpha * l_fused)
}

/// A trained slide classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Tile { scorer: TileScorer },
    Gma { model: GmaModel },
    Multimodal {
        model: GmaModel,
        /// Encoded covariate indices the fusion layer consumes.
        covariate_columns: Option<Vec<usize>>,
    },
}

impl TrainedModel {
    pub fn d1(&self) -> usize {
        match self {
            TrainedModel::Tile { scorer } => scorer.d1(),
            TrainedModel::Gma { model } | TrainedModel::Multimodal { model, .. } => model.d1(),
        }
    }

    pub fn gma(&self) -> Option<&GmaModel> {
        match self {
            TrainedModel::Tile { .. } => None,
            TrainedModel::Gma { model } | TrainedModel::Multimodal { model, .. } => Some(model),
        }
    }

    /// Positive-class probability for one bag.
    pub fn predict(&self, bag: &FeatureBag) -> Result<f64> {
        match self {
            TrainedModel::Tile { scorer } => tile_supervised_score(bag, scorer, None),
            TrainedModel::Gma { model } => {
                Ok(milnet::positive_probability(milnet::gma_forward(bag, model)?.logits))
            }
            TrainedModel::Multimodal {
                model,
                covariate_columns,
            } => {
                let hist = milnet::gma_forward(bag, model)?.logits;
                let cov = pick_covariates(bag, covariate_columns.as_deref())?;
                let fused = milnet::fuse_logits(hist, &cov, model)?;
                Ok(milnet::positive_probability(fused))
            }
        }
    }
}

fn pick_covariates(bag: &FeatureBag, columns: Option<&[usize]>) -> Result<Vec<f64>> {
    match columns {
        None => Ok(bag.covariates.clone()),
        Some(cols) => cols
            .iter()
            .map(|&c| {
                bag.covariates.get(c).copied().ok_or_else(|| {
                    Error::Dimension(format!(
                        "bag {} has {} covariates, column {c} requested",
                        bag.slide_id,
                        bag.covariates.len()
                    ))
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// NaN when the validation set lacks a class.
    pub val_auc: f64,
    pub slides_visited: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
}

impl TrainedRun {
    pub fn final_val_auc(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.val_auc)
    }
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "val_auc"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            metrics::format_float(h.loss),
            if h.val_auc.is_nan() {
                "NA".to_string()
            } else {
                metrics::format_float(h.val_auc)
            },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `round(fraction · n)` (at least 1) distinct indices of `0..n` in random
/// order.
pub fn epoch_sample(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).clamp(1.min(n), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx
}

fn bags_of(bags: &[FeatureBag], patients: &[String]) -> Vec<usize> {
    let set: BTreeSet<&str> = patients.iter().map(String::as_str).collect();
    (0..bags.len())
        .filter(|&i| set.contains(bags[i].patient_id.as_str()))
        .collect()
}

fn validation_auc(model: &TrainedModel, bags: &[FeatureBag], idx: &[usize]) -> Result<f64> {
    let mut scores = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        scores.push(model.predict(&bags[i])?);
        labels.push(bags[i].label);
    }
    Ok(metrics::auc_raw(&scores, &labels).unwrap_or(f64::NAN))
}

/// Trains one replicate on one split.
pub fn train(
    bags: &[FeatureBag],
    split: &Split,
    config: &TrainConfig,
    split_index: usize,
    replicate: usize,
) -> Result<TrainedRun> {
    config.validate()?;
    let d1 = bags.first().map(FeatureBag::d1).ok_or_else(|| invalid("empty dataset"))?;
    for b in bags {
        b.validate()?;
        if b.d1() != d1 {
            return Err(Error::Dimension(format!(
                "bag {} has D1={} but the dataset uses D1={d1}",
                b.slide_id,
                b.d1()
            )));
        }
    }
    let path = [split_index as u64, replicate as u64];
    let mut train_patients = split.train.clone();
    if config.holdout_half {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_HALF, path[0]]));
        train_patients.shuffle(&mut rng);
        train_patients.truncate(train_patients.len().div_ceil(2));
    }
    let train_idx = bags_of(bags, &train_patients);
    let val_idx = bags_of(bags, &split.validation);
    if train_idx.is_empty() {
        return Err(invalid("empty training set"));
    }
    let init_seed = derive_seed(config.seed, &[TAG_INIT, path[0], path[1]]);
    let epoch_rng = |e: usize| {
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_EPOCH, path[0], path[1], e as u64]))
    };

    let mut history = Vec::with_capacity(config.epochs);
    let model = match config.mode {
        TrainMode::TileSupervised => {
            let mut scorer = TileScorer::new(d1, init_seed);
            let mut states = [
                config.optimizer.state_for(scorer.w.shape()),
                config.optimizer.state_for(scorer.b.shape()),
            ];
            for epoch in 0..config.epochs {
                let mut rng = epoch_rng(epoch);
                states.iter_mut().for_each(|s| s.set_epoch(epoch));
                let mut pairs: Vec<(usize, usize)> = Vec::new();
                for &i in &train_idx {
                    for k in epoch_sample(bags[i].n_tiles(), config.sample_fraction, &mut rng) {
                        pairs.push((i, k));
                    }
                }
                pairs.shuffle(&mut rng);
                let mut total = 0.0;
                for batch in pairs.chunks(config.tile_batch_size) {
                    let scale = 1.0 / batch.len() as f64;
                    let mut gw = Tensor2D::zeros(2, d1);
                    let mut gb = Tensor2D::zeros(1, 2);
                    for &(i, k) in batch {
                        let tile = bags[i].features.row(k);
                        let (l, g) = scorer.backward(&[tile], bags[i].label, config.pos_weight)?;
                        total += l;
                        gw.axpy(scale, &g.w)?;
                        gb.axpy(scale, &g.b)?;
                    }
                    states[0].step(&mut scorer.w, &gw)?;
                    states[1].step(&mut scorer.b, &gb)?;
                }
                let trained = TrainedModel::Tile { scorer: scorer.clone() };
                history.push(EpochRecord {
                    epoch,
                    loss: total / pairs.len().max(1) as f64,
                    val_auc: validation_auc(&trained, bags, &val_idx)?,
                    slides_visited: train_idx.len(),
                });
            }
            TrainedModel::Tile { scorer }
        }
        TrainMode::Gma | TrainMode::GmaMultimodal => {
            let multimodal = config.mode == TrainMode::GmaMultimodal;
            let columns = if multimodal {
                config.covariate_columns.clone()
            } else {
                Some(Vec::new())
            };
            // bag views carrying only the covariates the fusion layer sees
            let view: Vec<FeatureBag> = bags
                .iter()
                .map(|b| {
                    Ok(FeatureBag {
                        covariates: pick_covariates(b, columns.as_deref())?,
                        ..b.clone()
                    })
                })
                .collect::<Result<_>>()?;
            let n_cov = view[0].covariates.len();
            if view.iter().any(|b| b.covariates.len() != n_cov) {
                return Err(Error::Dimension("bags disagree on covariate count".into()));
            }
            let objective = if multimodal {
                Objective::Joint {
                    alpha: config.joint_alpha,
                }
            } else {
                Objective::Histology
            };
            let wrap = |model: GmaModel| {
                if multimodal {
                    TrainedModel::Multimodal {
                        model,
                        covariate_columns: columns.clone(),
                    }
                } else {
                    TrainedModel::Gma { model }
                }
            };
            let mut model = GmaModel::new(d1, config.d2, n_cov, init_seed);
            let mut states: Vec<OptimState> = model
                .tensors()
                .iter()
                .map(|t| config.optimizer.state_for(t.shape()))
                .collect();
            for epoch in 0..config.epochs {
                let mut rng = epoch_rng(epoch);
                states.iter_mut().for_each(|s| s.set_epoch(epoch));
                let picks = epoch_sample(train_idx.len(), config.sample_fraction, &mut rng);
                let mut total = 0.0;
                for &p in &picks {
                    let bag = &view[train_idx[p]];
                    let (loss, grads) = gma_backward(bag, &model, bag.label, config.pos_weight, objective)?;
                    total += loss;
                    for ((param, grad), state) in model
                        .tensors_mut()
                        .into_iter()
                        .zip(grads.tensors())
                        .zip(states.iter_mut())
                    {
                        state.step(param, grad)?;
                    }
                }
                let current = wrap(model.clone());
                history.push(EpochRecord {
                    epoch,
                    loss: total / picks.len() as f64,
                    val_auc: validation_auc(&current, &view, &val_idx)?,
                    slides_visited: picks.len(),
                });
            }
            wrap(model)
        }
    };
    Ok(TrainedRun { model, history })
}

/// Index of the replicate with the best final validation AUC; ties go to
/// the lowest index and NaN ranks last.
pub fn select_replicate(final_aucs: &[f64]) -> Result<usize> {
    if final_aucs.is_empty() {
        return Err(invalid("no replicates to select from"));
    }
    let mut best = 0;
    for (i, &a) in final_aucs.iter().enumerate().skip(1) {
        let b = final_aucs[best];
        if !a.is_nan() && (b.is_nan() || a > b) {
            best = i;
        }
    }
    Ok(best)
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// A split winner with its validation AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub split: usize,
    pub replicate: usize,
    /// NaN (stored as `null`) when the validation set lacks a class.
    #[serde(with = "nan_as_null")]
    pub val_auc: f64,
    pub model: TrainedModel,
}

/// Indices of the `k` best models by validation AUC (stable on ties).
pub fn rank_models(models: &[RankedModel], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    if k > models.len() {
        return Err(invalid(format!("k={k} exceeds the {} available models", models.len())));
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (models[a].val_auc, models[b].val_auc);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => y.total_cmp(&x),
        }
    });
    order.truncate(k);
    Ok(order)
}

/// Mean positive probability of the `k` best models for every bag.
pub fn topk_ensemble(models: &[RankedModel], k: usize, bags: &[FeatureBag]) -> Result<Vec<f64>> {
    let chosen = rank_models(models, k)?;
    bags.iter()
        .map(|bag| {
            let mut s = 0.0;
            for &i in &chosen {
                s += models[i].model.predict(bag)?;
            }
            Ok(s / chosen.len() as f64)
        })
        .collect()
}

/// Result of one split: all replicate histories and the kept replicate.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub split: usize,
    pub histories: Vec<Vec<EpochRecord>>,
    pub winner: RankedModel,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub splits: Vec<SplitOutcome>,
}

impl ProtocolOutcome {
    pub fn winners(&self) -> Vec<RankedModel> {
        self.splits.iter().map(|s| s.winner.clone()).collect()
    }

    /// Mean over splits of the kept replicate's validation AUC (NaN splits
    /// skipped).
    pub fn mean_val_auc(&self) -> f64 {
        let v: Vec<f64> = self
            .splits
            .iter()
            .map(|s| s.winner.val_auc)
            .filter(|a| !a.is_nan())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains every (split, replicate) pair in parallel and keeps the best
/// replicate per split.
pub fn run_protocol(bags: &[FeatureBag], plan: &SplitPlan, config: &TrainConfig) -> Result<ProtocolOutcome> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..plan.splits.len())
        .flat_map(|s| (0..config.replicates).map(move |r| (s, r)))
        .collect();
    let runs: Vec<Result<TrainedRun>> = jobs
        .par_iter()
        .map(|&(s, r)| train(bags, &plan.splits[s], config, s, r))
        .collect();
    let mut by_split: BTreeMap<usize, Vec<TrainedRun>> = BTreeMap::new();
    for (&(s, _), run) in jobs.iter().zip(runs) {
        by_split.entry(s).or_default().push(run?);
    }
    let splits = by_split
        .into_iter()
        .map(|(split, runs)| {
            let finals: Vec<f64> = runs.iter().map(TrainedRun::final_val_auc).collect();
            let best = select_replicate(&finals)?;
            let histories = runs.iter().map(|r| r.history.clone()).collect();
            let run = &runs[best];
            Ok(SplitOutcome {
                split,
                histories,
                winner: RankedModel {
                    split,
                    replicate: best,
                    val_auc: run.final_val_auc(),
                    model: run.model.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolOutcome { splits })
}
