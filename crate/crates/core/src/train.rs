//! The two training stages: clause classifier first, then the generation
//! pipeline with the classifier frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::car;
use crate::decoder::BCE_CLAMP;
use crate::error::{Error, Result};
use crate::model::{clause_pairs, clause_probs, episode_loss, predict_ctrf, ModelConfig, Prepared};
use crate::tensor_core::{AdamConfig, Graph, ParameterStore, Rng};

/// Parameter groups updated in stage 1.
pub const STAGE1_GROUPS: [&str; 2] = ["text.embed", "cls."];
/// Parameter groups updated in stage 2.
pub const STAGE2_GROUPS: [&str; 5] = ["ter.", "proj.", "scf", "textmap.", "dec."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage1_batch: usize,
    /// Validation clause accuracy at which stage 1 stops early.
    pub stage1_target: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    /// Global gradient-norm ceiling.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            stage1_epochs: 50,
            stage1_lr: 1e-2,
            stage1_batch: 32,
            stage1_target: 0.99,
            stage2_epochs: 15,
            stage2_lr: 2e-3,
            stage2_batch: 8,
            clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_batch == 0 || self.stage2_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0 && self.clip > 0.0) {
            return Err(Error::config("learning rates and clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub summary: BTreeMap<String, f64>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig { lr, ..AdamConfig::default() }
}

fn clip_and_step(store: &mut ParameterStore, n: usize, clip: f64, lr: f64) -> Result<()> {
    store.scale_grads(1.0 / n as f64);
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    if norm > clip {
        store.scale_grads(clip / norm);
    }
    store.adam_step(&adam(lr))
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Fraction of clauses `1..` classified correctly at `threshold`.
pub fn clause_accuracy(store: &ParameterStore, threshold: f64, preps: &[Prepared]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for prep in preps {
        for (p, y) in clause_probs(store, prep)?.iter().zip(&prep.labels) {
            right += ((*p > threshold) == (*y == 1.0)) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("no clauses to classify".into()));
    }
    Ok(right as f64 / total as f64)
}

/// Trains the clause embeddings and classifier with binary cross-entropy.
/// Every other parameter is left bit-identical.
pub fn train_stage1(
    store: &mut ParameterStore,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Prepared],
    val: &[Prepared],
) -> Result<TrainReport> {
    tc.validate()?;
    let labels: Vec<f64> = train.iter().flat_map(|p| p.labels.iter().copied()).collect();
    if !labels.contains(&0.0) || !labels.contains(&1.0) {
        return Err(Error::Training("stage 1 needs both counterfactual and normal clauses".into()));
    }
    let usable: Vec<&Prepared> = train.iter().filter(|p| !p.labels.is_empty()).collect();
    store.train_only(&STAGE1_GROUPS);
    let mut rng = Rng::new(tc.seed).fork(0x51);
    let mut report = TrainReport { stage: 1, seed: tc.seed, epoch_losses: Vec::new(), summary: BTreeMap::new() };
    let mut val_acc = f64::NAN;
    for epoch in 0..tc.stage1_epochs {
        let order = shuffled(usable.len(), &mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(tc.stage1_batch) {
            let mut g = Graph::new();
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for &i in chunk {
                if let Some(pairs) = clause_pairs(&mut g, store, usable[i])? {
                    rows.push(pairs);
                    ys.extend(&usable[i].labels);
                }
            }
            let pairs = g.concat_rows(&rows)?;
            let probs = car::classify_pairs(&mut g, store, pairs)?;
            let loss = g.bce(probs, &ys, BCE_CLAMP)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("stage 1 loss is {value} at epoch {epoch}")));
            }
            g.backward(loss, store)?;
            clip_and_step(store, 1, f64::INFINITY, tc.stage1_lr)?;
            sum += value;
            batches += 1;
        }
        let mean = sum / batches as f64;
        report.epoch_losses.push(mean);
        val_acc = if val.is_empty() { f64::NAN } else { clause_accuracy(store, cfg.threshold, val)? };
        log::info!("stage 1 epoch {epoch}: loss {mean:.5} val acc {val_acc:.4}");
        if val_acc >= tc.stage1_target {
            break;
        }
    }
    store.set_trainable_all(true);
    report.summary.insert("epochs".into(), report.epoch_losses.len() as f64);
    report.summary.insert("train_acc".into(), clause_accuracy(store, cfg.threshold, &train_with_clauses(train))?);
    if !val.is_empty() {
        report.summary.insert("val_acc".into(), val_acc);
    }
    Ok(report)
}

fn train_with_clauses(train: &[Prepared]) -> Vec<Prepared> {
    train.iter().filter(|p| !p.labels.is_empty()).cloned().collect()
}

/// Trains the reranker, projector, prompt token, text map and decoder with
/// the teacher-forced language-modelling loss. The classifier must already
/// be present and stays frozen.
pub fn train_stage2(
    store: &mut ParameterStore,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Prepared],
) -> Result<TrainReport> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Data("stage 2 needs at least one episode".into()));
    }
    for name in [car::W1, car::B1, car::W2, car::B2] {
        if !store.contains(name) {
            return Err(Error::config(format!("stage 2 needs a stage-1 classifier (missing {name})")));
        }
    }
    let ctrf: Vec<Vec<usize>> = train
        .iter()
        .map(|p| if cfg.gold_ctrf { Ok(p.gold_ctrf.clone()) } else { predict_ctrf(store, cfg, p) })
        .collect::<Result<_>>()?;
    store.train_only(&STAGE2_GROUPS);
    let mut rng = Rng::new(tc.seed).fork(0x52);
    let mut report = TrainReport { stage: 2, seed: tc.seed, epoch_losses: Vec::new(), summary: BTreeMap::new() };
    for epoch in 0..tc.stage2_epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(tc.stage2_batch) {
            for &i in chunk {
                let mut g = Graph::new();
                let loss = episode_loss(&mut g, store, cfg, &train[i], &ctrf[i])?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence(format!("stage 2 loss is {value} at epoch {epoch}")));
                }
                g.backward(loss, store)?;
                sum += value;
            }
            clip_and_step(store, chunk.len(), tc.clip, tc.stage2_lr)?;
        }
        let mean = sum / train.len() as f64;
        report.epoch_losses.push(mean);
        log::info!("stage 2 epoch {epoch}: loss {mean:.5}");
    }
    store.set_trainable_all(true);
    report.summary.insert("epochs".into(), report.epoch_losses.len() as f64);
    if let Some(&last) = report.epoch_losses.last() {
        report.summary.insert("final_loss".into(), last);
    }
    Ok(report)
}
