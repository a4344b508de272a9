//! End-to-end wiring: frozen features and masks per episode, the reranker,
//! counterfactual retrieval, input assembly and decoding.

use serde::{Deserialize, Serialize};

use crate::assembly;
use crate::car;
use crate::decoder::{self, DecoderConfig};
use crate::encoders::{encode_image, TextVocab, TEXT_EMBED};
use crate::error::{Error, Result};
use crate::maskgrid::{build_ctrf_mask, build_global_mask, pool_mask, PatchWeights};
use crate::planeval::{evaluate_batch, ActionSequence, EvalCase, GoalPredicate, MetricReport, Split};
use crate::tensor_core::{Graph, ParameterStore, Rng, Tensor, Var};
use crate::ter;
use crate::worldgen::{oracle_segment, Episode, WorldState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_grid: usize,
    pub channels: usize,
    pub width: usize,
    pub ter_heads: usize,
    pub dec_heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub proj_hidden: usize,
    pub cls_hidden: usize,
    pub k: usize,
    pub max_len: usize,
    pub threshold: f64,
    pub no_ter: bool,
    pub no_car: bool,
    pub per_image_attention: bool,
    /// Train the decoder on annotated counterfactual clauses rather than the
    /// classifier's selection.
    pub gold_ctrf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_grid: 8,
            channels: 32,
            width: 32,
            ter_heads: 8,
            dec_heads: 2,
            layers: 2,
            ff: 128,
            proj_hidden: 64,
            cls_hidden: 64,
            k: 4,
            max_len: 96,
            threshold: 0.5,
            no_ter: false,
            no_car: false,
            per_image_attention: false,
            gold_ctrf: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("patch_grid", self.patch_grid),
            ("channels", self.channels),
            ("width", self.width),
            ("ter_heads", self.ter_heads),
            ("dec_heads", self.dec_heads),
            ("layers", self.layers),
            ("ff", self.ff),
            ("proj_hidden", self.proj_hidden),
            ("cls_hidden", self.cls_hidden),
            ("k", self.k),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = pos.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.channels.is_multiple_of(self.ter_heads) {
            return Err(Error::config(format!(
                "reranker heads {} do not divide channels {}",
                self.ter_heads, self.channels
            )));
        }
        if !self.width.is_multiple_of(self.dec_heads) {
            return Err(Error::config(format!(
                "decoder heads {} do not divide width {}",
                self.dec_heads, self.width
            )));
        }
        if !self.patch_grid.is_multiple_of(self.k) {
            return Err(Error::config(format!(
                "patch grid {} is not divisible by K = {}",
                self.patch_grid, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("classifier threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d: self.width,
            heads: self.dec_heads,
            layers: self.layers,
            ff: self.ff,
            max_len: self.max_len,
        }
    }
}

/// Fresh parameters for every group; each group draws from its own stream so
/// adding a group never perturbs the others.
pub fn init_params(cfg: &ModelConfig, vocab_len: usize, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let mut store = ParameterStore::new();
    store.insert(TEXT_EMBED, root.fork(1).normal_tensor(&[vocab_len, cfg.channels], 1.0))?;
    car::init_classifier(&mut store, &mut root.fork(2), cfg.channels, cfg.cls_hidden)?;
    ter::init(&mut store, &mut root.fork(3), cfg.channels)?;
    assembly::init(&mut store, &mut root.fork(4), cfg.channels, cfg.proj_hidden, cfg.width)?;
    decoder::init(&mut store, &mut root.fork(5), &cfg.decoder())?;
    Ok(store)
}

/// Everything about an episode that does not depend on trainable parameters.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub split: Split,
    pub features: Tensor,
    /// Token ids per clause; index 0 is the goal.
    pub clause_ids: Vec<Vec<usize>>,
    pub task_ids: Vec<usize>,
    /// Labels of clauses `1..`.
    pub labels: Vec<f64>,
    /// Patch weights indexed `[image][clause]`.
    pub per_clause: Vec<Vec<PatchWeights>>,
    pub ter_bias: Tensor,
    /// Annotated counterfactual clause indices.
    pub gold_ctrf: Vec<usize>,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub world: WorldState,
    pub goal: Vec<GoalPredicate>,
    pub reference: ActionSequence,
}

pub fn prepare(ep: &Episode, vocab: &TextVocab, cfg: &ModelConfig) -> Result<Prepared> {
    let p = cfg.patch_grid;
    let clauses: Vec<String> = std::iter::once(ep.task.goal_text.clone())
        .chain(ep.task.clause_texts.iter().cloned())
        .collect();
    let mut per_clause = vec![Vec::with_capacity(clauses.len()); ep.scene.images.len()];
    for clause in &clauses {
        for (img, mask) in oracle_segment(&ep.scene, clause).iter().enumerate() {
            per_clause[img].push(pool_mask(mask, p)?);
        }
    }
    let global = build_global_mask(&per_clause)?;
    let (inputs, targets) = decoder::teacher_pair(&ep.task.reference_plan, cfg.max_len)?;
    Ok(Prepared {
        seed: ep.seed,
        split: ep.task.split(),
        features: encode_image(&ep.scene, p, cfg.channels)?,
        clause_ids: clauses.iter().map(|c| vocab.tokenize(c)).collect(),
        task_ids: vocab.task_tokens(&clauses),
        labels: ep.task.clause_labels.iter().map(|&y| y as f64).collect(),
        ter_bias: ter::attention_bias(&global, cfg.per_image_attention),
        per_clause,
        gold_ctrf: ep.task.ctrf_indices(),
        inputs,
        targets,
        world: ep.world.clone(),
        goal: ep.task.goal_condition.clone(),
        reference: ep.task.reference_plan.clone(),
    })
}

pub fn prepare_all(eps: &[Episode], vocab: &TextVocab, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    eps.iter().map(|e| prepare(e, vocab, cfg)).collect()
}

/// Classifier inputs `[s0; sk]` for clauses `1..` (`n × 2C`), or `None` when
/// the task has no clauses beyond the goal.
pub fn clause_pairs(g: &mut Graph, store: &ParameterStore, prep: &Prepared) -> Result<Option<Var>> {
    if prep.clause_ids.len() < 2 {
        return Ok(None);
    }
    let embeds = prep
        .clause_ids
        .iter()
        .map(|ids| crate::encoders::embed_clause(g, store, ids))
        .collect::<Result<Vec<_>>>()?;
    let rows = embeds[1..]
        .iter()
        .map(|&sk| g.concat_cols(&[embeds[0], sk]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(g.concat_rows(&rows)?))
}

/// Counterfactual probabilities of clauses `1..`.
pub fn clause_probs(store: &ParameterStore, prep: &Prepared) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    match clause_pairs(&mut g, store, prep)? {
        None => Ok(Vec::new()),
        Some(pairs) => {
            let p = car::classify_pairs(&mut g, store, pairs)?;
            Ok(g.value(p).data().to_vec())
        }
    }
}

pub fn predict_ctrf(store: &ParameterStore, cfg: &ModelConfig, prep: &Prepared) -> Result<Vec<usize>> {
    Ok(car::select_ctrf(&clause_probs(store, prep)?, cfg.threshold))
}

/// Counterfactual patch weights for the given clause selection, all zero
/// when retrieval is disabled.
pub fn ctrf_weights(cfg: &ModelConfig, prep: &Prepared, ctrf: &[usize]) -> Result<PatchWeights> {
    if cfg.no_car {
        Ok(PatchWeights::zeros(cfg.patch_grid, prep.per_clause.len()))
    } else {
        build_ctrf_mask(&prep.per_clause, ctrf)
    }
}

/// Assembled decoder input for one episode.
pub fn build_prefix(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    prep: &Prepared,
    ctrf: &[usize],
) -> Result<Var> {
    let v = g.constant(prep.features.clone());
    let v_rerank = if cfg.no_ter {
        v
    } else {
        ter::forward(g, store, v, &prep.ter_bias, cfg.ter_heads)?.0
    };
    let w_cf = ctrf_weights(cfg, prep, ctrf)?;
    let v_cf = car::conditional_pool(g, v_rerank, &w_cf, cfg.k)?;
    let text = assembly::text_tokens(g, store, &prep.task_ids)?;
    Ok(assembly::assemble_input(g, store, v_rerank, v_cf, text)?.tokens)
}

/// Teacher-forced mean token NLL of the reference plan.
pub fn episode_loss(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    prep: &Prepared,
    ctrf: &[usize],
) -> Result<Var> {
    let prefix = build_prefix(g, store, cfg, prep, ctrf)?;
    let logits = decoder::forward(g, store, &cfg.decoder(), prefix, &prep.inputs)?;
    g.cross_entropy(logits, &prep.targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub ctrf: Vec<usize>,
    pub plan: ActionSequence,
}

pub fn predict(store: &ParameterStore, cfg: &ModelConfig, prep: &Prepared) -> Result<Prediction> {
    let ctrf = if cfg.no_car { Vec::new() } else { predict_ctrf(store, cfg, prep)? };
    let mut g = Graph::new();
    let prefix = build_prefix(&mut g, store, cfg, prep, &ctrf)?;
    let plan = decoder::decode(store, &cfg.decoder(), g.value(prefix), cfg.max_len)?;
    Ok(Prediction { ctrf, plan })
}

/// Scores `plans[i]` against `preps[i]`.
pub fn score(preps: &[Prepared], plans: Vec<ActionSequence>) -> Result<MetricReport> {
    if preps.len() != plans.len() {
        return Err(Error::contract("one plan per episode is required"));
    }
    let cases = preps.iter()
        .zip(plans)
        .map(|(p, plan)| EvalCase {
            split: p.split,
            world: &p.world,
            goal: &p.goal,
            reference: &p.reference,
            prediction: plan,
        });
    evaluate_batch(cases)
}

pub fn evaluate(store: &ParameterStore, cfg: &ModelConfig, preps: &[Prepared]) -> Result<MetricReport> {
    let plans = preps
        .iter()
        .map(|p| predict(store, cfg, p).map(|x| x.plan))
        .collect::<Result<Vec<_>>>()?;
    score(preps, plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_episode, GenConfig};

    fn small() -> (ModelConfig, Vec<Prepared>, ParameterStore) {
        let cfg = ModelConfig::default();
        let vocab = TextVocab::builtin();
        let eps: Vec<Episode> = (0..4).map(|s| generate_episode(s, &GenConfig::default()).unwrap()).collect();
        let preps = prepare_all(&eps, &vocab, &cfg).unwrap();
        (cfg.clone(), preps, init_params(&cfg, vocab.len(), 1).unwrap())
    }

    #[test]
    fn shapes_through_the_pipeline() {
        let (cfg, preps, store) = small();
        for prep in &preps {
            assert_eq!(prep.features.shape(), &[128, 32]);
            assert_eq!(prep.labels.len() + 1, prep.clause_ids.len());
            let mut g = Graph::new();
            let prefix = build_prefix(&mut g, &store, &cfg, prep, &prep.gold_ctrf).unwrap();
            assert_eq!(g.value(prefix).rows(), 128 + 1 + 32 + prep.task_ids.len());
            let loss = episode_loss(&mut g, &store, &cfg, prep, &prep.gold_ctrf).unwrap();
            assert!(g.value(loss).item().is_finite());
            let pred = predict(&store, &cfg, prep).unwrap();
            assert!(pred.plan.len() <= cfg.max_len / 4);
        }
    }

    #[test]
    fn disabled_retrieval_zeroes_the_pooled_tokens() {
        let (mut cfg, preps, _) = small();
        cfg.no_car = true;
        let w = ctrf_weights(&cfg, &preps[0], &[0]).unwrap();
        assert!(w.is_all_zero());
    }

    #[test]
    fn reference_plans_score_perfectly() {
        let (_, preps, _) = small();
        let report = score(&preps, preps.iter().map(|p| p.reference.clone()).collect()).unwrap();
        let total = report.get("total").unwrap();
        assert_eq!((total.exec, total.lcs, total.corr), (100.0, 1.0, 100.0));
    }

    #[test]
    fn config_checks() {
        let mut cfg = ModelConfig::default();
        cfg.k = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg = ModelConfig::default();
        cfg.ter_heads = 5;
        assert!(cfg.validate().is_err());
        let text = serde_json::to_string(&ModelConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), ModelConfig::default());
        assert!(serde_json::from_str::<ModelConfig>("{\"bogus\": 1}").is_err());
    }
}
