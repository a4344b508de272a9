//! Command implementations behind the `ctrfplan` binary. Every command is a
//! pure function of its configuration and input files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::encoders::TextVocab;
use crate::error::{Error, Result};
use crate::model::{evaluate, init_params, predict, prepare_all, score, ModelConfig, Prepared};
use crate::planeval::{ActionSequence, MetricReport, Split};
use crate::tensor_core::{Checkpoint, ParameterStore};
use crate::train::{train_stage1, train_stage2, TrainConfig, TrainReport};
use crate::worldgen::{generate_episode_with, read_jsonl, write_jsonl, Episode, GenConfig};

/// Seed-space offsets keeping the three splits disjoint.
const SPLIT_STRIDE: u64 = 1 << 32;
const TRAIN_FILE: &str = "train.jsonl";
const VAL_FILE: &str = "val.jsonl";
const TEST_FILE: &str = "test.jsonl";
const DATA_CONFIG: &str = "config.json";
const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    /// Patch grid used by the K sweep (must be divisible by every K).
    pub sweep_patch_grid: usize,
    pub sweep_train: usize,
    pub sweep_test: usize,
    pub sweep_epochs: usize,
}

impl AblationConfig {
    fn or_defaults(mut self) -> Self {
        if self.seeds.is_empty() {
            self.seeds = vec![1, 2, 3];
        }
        if self.ks.is_empty() {
            self.ks = vec![2, 4, 8, 16];
        }
        if self.sweep_patch_grid == 0 {
            self.sweep_patch_grid = 16;
        }
        if self.sweep_train == 0 {
            self.sweep_train = 100;
        }
        if self.sweep_test == 0 {
            self.sweep_test = 40;
        }
        if self.sweep_epochs == 0 {
            self.sweep_epochs = 2;
        }
        self
    }
}

/// Optional JSON configuration file; command-line flags override it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctrfplan", version, about = "Counterfactual-aware procedural planning on a synthetic household world")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, env = "CTRFPLAN_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test episode files.
    Gen(GenArgs),
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or an oracle) on the test split.
    Eval(EvalArgs),
    /// Train and compare the component ablations and the K sweep.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training episodes.
    #[arg(long)]
    pub n: usize,
    /// Validation episodes.
    #[arg(long, default_value_t = 200)]
    pub val: usize,
    /// Test episodes, half counterfactual and half normal.
    #[arg(long, default_value_t = 400)]
    pub test: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ctrf_prob: Option<f64>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch_grid: Option<usize>,
    #[arg(long)]
    pub max_facts: Option<usize>,
    /// Overwrite existing files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ModelFlags {
    /// Sub-grid count per side for counterfactual pooling.
    #[arg(long)]
    pub k: Option<usize>,
    /// Patch grid side (defaults to the dataset's).
    #[arg(long)]
    pub patch_grid: Option<usize>,
    /// Skip the reranker (identity pass-through).
    #[arg(long)]
    pub no_ter: bool,
    /// Zero the counterfactual token segment.
    #[arg(long)]
    pub no_car: bool,
    /// Restrict reranker attention to tokens of the same image.
    #[arg(long)]
    pub per_image_attention: bool,
    /// Train stage 2 on the classifier's clause selection instead of labels.
    #[arg(long)]
    pub predicted_ctrf: bool,
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, m: &mut ModelConfig) {
        if let Some(k) = self.k {
            m.k = k;
        }
        if let Some(p) = self.patch_grid {
            m.patch_grid = p;
        }
        if let Some(l) = self.max_len {
            m.max_len = l;
        }
        m.no_ter |= self.no_ter;
        m.no_car |= self.no_car;
        m.per_image_attention |= self.per_image_attention;
        if self.predicted_ctrf {
            m.gold_ctrf = false;
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs for the selected stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Use at most this many training episodes.
    #[arg(long)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 checkpoint (required for stage 2).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Ctrf,
    Norm,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate (not needed for oracle modes).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,
    /// Score the reference plans themselves.
    #[arg(long, conflicts_with = "predict_empty")]
    pub predict_reference: bool,
    /// Score empty plans.
    #[arg(long)]
    pub predict_empty: bool,
    /// Write global and counterfactual masks of the first N episodes as PGM.
    #[arg(long, default_value_t = 0)]
    pub dump_masks: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub variants: Vec<Variant>,
    /// Comma-separated K values for the sweep.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// Skip the K sweep.
    #[arg(long)]
    pub no_sweep: bool,
    /// Train seeds on separate threads.
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoCar,
    NoTer,
    OnlySft,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoCar, Variant::NoTer, Variant::OnlySft];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCar => "no-car",
            Variant::NoTer => "no-ter",
            Variant::OnlySft => "only-sft",
        }
    }

    pub fn apply(self, m: &mut ModelConfig) {
        m.no_car = matches!(self, Variant::NoCar | Variant::OnlySft);
        m.no_ter = matches!(self, Variant::NoTer | Variant::OnlySft);
    }
}

/// Architecture and training settings stored inside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_size: usize,
}

/// Maps an error to the process exit status. Contract and dimension errors
/// are internal faults and exit with 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Generation(_) => 2,
        Error::Data(_)
        | Error::Training(_)
        | Error::Parse { .. }
        | Error::Vocabulary { .. }
        | Error::Io(_)
        | Error::Json(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let rc = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&rc, &a),
        Command::Train(a) => cmd_train(&rc, &a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&rc, &a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&rc, &a).map(|_| ()),
    }
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn split_seed(base: u64, split: u64, i: usize) -> u64 {
    base.wrapping_mul(3).wrapping_add(split).wrapping_mul(SPLIT_STRIDE).wrapping_add(i as u64)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    seed: u64,
    gen: GenConfig,
    sizes: BTreeMap<String, usize>,
}

/// Generates the three splits. Test episodes alternate between forced
/// counterfactual (first half) and forced normal.
pub fn cmd_gen(rc: &RunConfig, a: &GenArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::config("--n must be at least 1"));
    }
    let mut gen = rc.gen.clone();
    let seed = a.seed.unwrap_or(rc.seed);
    if let Some(p) = a.ctrf_prob {
        gen.ctrf_prob = p;
    }
    if let Some(m) = a.images {
        gen.images = m;
    }
    if let Some(s) = a.image_size {
        gen.image_size = s;
    }
    if let Some(p) = a.patch_grid {
        gen.patch_grid = p;
    }
    if let Some(f) = a.max_facts {
        gen.max_facts = f;
    }
    gen.validate()?;
    let files = [TRAIN_FILE, VAL_FILE, TEST_FILE, DATA_CONFIG, VOCAB_FILE];
    if !a.force {
        if let Some(f) = files.iter().find(|f| a.out.join(f).exists()) {
            return Err(Error::config(format!(
                "{} already exists; pass --force to overwrite",
                a.out.join(f).display()
            )));
        }
    }
    fs::create_dir_all(&a.out)?;
    let make = |split: u64, n: usize, force: &dyn Fn(usize) -> Option<bool>| -> Result<Vec<Episode>> {
        (0..n).map(|i| generate_episode_with(split_seed(seed, split, i), &gen, force(i))).collect()
    };
    let train = make(0, a.n, &|_| None)?;
    let val = make(1, a.val, &|_| None)?;
    let half = a.test / 2;
    let test = make(2, a.test, &|i| Some(i < half))?;
    write_jsonl(&a.out.join(TRAIN_FILE), &train)?;
    write_jsonl(&a.out.join(VAL_FILE), &val)?;
    write_jsonl(&a.out.join(TEST_FILE), &test)?;
    let sizes = BTreeMap::from([
        ("train".to_string(), a.n),
        ("val".to_string(), a.val),
        ("test".to_string(), a.test),
    ]);
    let dc = DataConfig { seed, gen, sizes };
    fs::write(a.out.join(DATA_CONFIG), serde_json::to_string_pretty(&dc)? + "\n")?;
    fs::write(a.out.join(VOCAB_FILE), TextVocab::builtin().to_text())?;
    for (name, eps) in [("train", &train), ("val", &val), ("test", &test)] {
        println!("{}", split_stats(name, eps));
    }
    Ok(())
}

/// One line of corpus statistics for a split.
pub fn split_stats(name: &str, eps: &[Episode]) -> String {
    let ctrf = eps.iter().filter(|e| e.task.is_ctrf()).count();
    let labels: Vec<u8> = eps.iter().flat_map(|e| e.task.clause_labels.iter().copied()).collect();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    format!(
        "{name}: {} episodes, {ctrf} counterfactual ({:.3}); clauses {} ({} counterfactual, {} normal)",
        eps.len(),
        ctrf as f64 / eps.len().max(1) as f64,
        labels.len(),
        pos,
        labels.len() - pos
    )
}

/// A dataset directory loaded back into memory.
pub struct Dataset {
    pub gen: GenConfig,
    pub vocab: TextVocab,
    pub dir: PathBuf,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(DATA_CONFIG);
        if !cfg_path.exists() {
            return Err(Error::config(format!("{} not found; run `gen` first", cfg_path.display())));
        }
        let dc: DataConfig = serde_json::from_str(&fs::read_to_string(&cfg_path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", cfg_path.display())))?;
        dc.gen.validate()?;
        Ok(Dataset {
            gen: dc.gen,
            vocab: TextVocab::load(&dir.join(VOCAB_FILE))?,
            dir: dir.to_path_buf(),
        })
    }

    pub fn split(&self, file: &str) -> Result<Vec<Episode>> {
        let path = self.dir.join(file);
        if !path.exists() {
            return Err(Error::config(format!("{} not found", path.display())));
        }
        read_jsonl(&path, &self.gen)
    }

    pub fn train(&self) -> Result<Vec<Episode>> {
        self.split(TRAIN_FILE)
    }

    pub fn val(&self) -> Result<Vec<Episode>> {
        self.split(VAL_FILE)
    }

    pub fn test(&self) -> Result<Vec<Episode>> {
        self.split(TEST_FILE)
    }
}

fn train_config(rc: &RunConfig, f: &TrainFlags, stage: u8) -> TrainConfig {
    let mut tc = rc.train.clone();
    tc.seed = f.seed.unwrap_or(rc.seed);
    match stage {
        1 => {
            if let Some(e) = f.epochs {
                tc.stage1_epochs = e;
            }
            if let Some(lr) = f.lr {
                tc.stage1_lr = lr;
            }
            if let Some(b) = f.batch {
                tc.stage1_batch = b;
            }
        }
        _ => {
            if let Some(e) = f.epochs {
                tc.stage2_epochs = e;
            }
            if let Some(lr) = f.lr {
                tc.stage2_lr = lr;
            }
            if let Some(b) = f.batch {
                tc.stage2_batch = b;
            }
        }
    }
    tc
}

fn limit(mut eps: Vec<Episode>, n: Option<usize>) -> Vec<Episode> {
    if let Some(n) = n {
        eps.truncate(n);
    }
    eps
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, CheckpointMeta, u8)> {
    if !path.exists() {
        return Err(Error::config(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = ckpt.config_as()?;
    Ok((ParameterStore::from_checkpoint(&ckpt)?, meta, ckpt.stage))
}

fn save_checkpoint(path: &Path, store: &ParameterStore, meta: &CheckpointMeta, stage: u8) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    store.to_checkpoint(meta, stage)?.save(path)
}

fn report_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_stem().unwrap_or_default().to_os_string();
    name.push(".report.json");
    ckpt.with_file_name(name)
}

/// Runs one training stage; writes the checkpoint and `<stem>.report.json`.
pub fn cmd_train(rc: &RunConfig, a: &TrainArgs) -> Result<TrainReport> {
    let data = Dataset::open(&a.data)?;
    let tc = train_config(rc, &a.train, a.stage);
    tc.validate()?;
    let (store, meta, report) = match a.stage {
        1 => {
            let mut model = rc.model.clone();
            model.patch_grid = data.gen.patch_grid;
            a.model.apply(&mut model);
            model.validate()?;
            let mut store = init_params(&model, data.vocab.len(), tc.seed)?;
            let train = prepare_all(&limit(data.train()?, a.train.train_limit), &data.vocab, &model)?;
            let val = prepare_all(&data.val()?, &data.vocab, &model)?;
            let report = train_stage1(&mut store, &model, &tc, &train, &val)?;
            let meta = CheckpointMeta { model, train: tc, vocab_size: data.vocab.len() };
            (store, meta, report)
        }
        _ => {
            let init = a
                .init
                .as_deref()
                .ok_or_else(|| Error::config("stage 2 needs --init <stage-1 checkpoint>"))?;
            let (mut store, mut meta, _) = load_checkpoint(init)?;
            a.model.apply(&mut meta.model);
            meta.model.validate()?;
            if meta.vocab_size != data.vocab.len() {
                return Err(Error::config("checkpoint vocabulary does not match the dataset"));
            }
            let train = prepare_all(&limit(data.train()?, a.train.train_limit), &data.vocab, &meta.model)?;
            let report = train_stage2(&mut store, &meta.model, &tc, &train)?;
            meta.train = tc;
            (store, meta, report)
        }
    };
    save_checkpoint(&a.out, &store, &meta, a.stage)?;
    write_new(&report_path(&a.out), report.to_json().as_bytes())?;
    println!(
        "stage {} done: {} epochs, last loss {:.6}",
        a.stage,
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(report)
}

fn keep(split: SplitChoice, s: Split) -> bool {
    match split {
        SplitChoice::All => true,
        SplitChoice::Ctrf => s == Split::Ctrf,
        SplitChoice::Norm => s == Split::Norm,
    }
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    seed: u64,
    split: &'a str,
    ctrf: Vec<usize>,
    plan: String,
}

/// Scores the test split; writes `metrics.json`, `metrics.csv` and
/// `predictions.jsonl` under `--out`.
pub fn cmd_eval(rc: &RunConfig, a: &EvalArgs) -> Result<MetricReport> {
    let data = Dataset::open(&a.data)?;
    let test: Vec<Episode> = data.test()?.into_iter().filter(|e| keep(a.split, e.task.split())).collect();
    if test.is_empty() {
        return Err(Error::Data("no test episodes in the selected split".into()));
    }
    let oracle = a.predict_reference || a.predict_empty;
    let (store, model) = match (&a.ckpt, oracle) {
        (Some(p), _) => {
            let (s, meta, _) = load_checkpoint(p)?;
            (Some(s), meta.model)
        }
        (None, true) => {
            let mut m = rc.model.clone();
            m.patch_grid = data.gen.patch_grid;
            (None, m)
        }
        (None, false) => return Err(Error::config("eval needs --ckpt unless an oracle mode is selected")),
    };
    model.validate()?;
    let preps = prepare_all(&test, &data.vocab, &model)?;
    let mut lines = String::new();
    let mut plans = Vec::with_capacity(preps.len());
    for p in &preps {
        let (plan, ctrf) = if a.predict_reference {
            (p.reference.clone(), p.gold_ctrf.clone())
        } else if a.predict_empty {
            (ActionSequence::default(), Vec::new())
        } else {
            let pred = predict(store.as_ref().expect("checked above"), &model, p)?;
            (pred.plan, pred.ctrf)
        };
        let rec = PredictionRecord { seed: p.seed, split: p.split.name(), ctrf, plan: plan.to_string() };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
        plans.push(plan);
    }
    let report = score(&preps, plans)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("metrics.json"), report.to_json())?;
    fs::write(a.out.join("metrics.csv"), report.to_csv())?;
    fs::write(a.out.join("predictions.jsonl"), lines)?;
    if a.dump_masks > 0 {
        dump_masks(&a.out.join("masks"), &preps, store.as_ref(), &model, a.dump_masks)?;
    }
    print!("{}", report.to_csv());
    Ok(report)
}

fn dump_masks(
    dir: &Path,
    preps: &[Prepared],
    store: Option<&ParameterStore>,
    model: &ModelConfig,
    n: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for p in preps.iter().take(n) {
        let global = crate::maskgrid::build_global_mask(&p.per_clause)?;
        let ctrf = match store {
            Some(s) if !model.no_car => crate::model::predict_ctrf(s, model, p)?,
            _ => p.gold_ctrf.clone(),
        };
        let cf = crate::model::ctrf_weights(model, p, &ctrf)?;
        for img in 0..global.images() {
            fs::write(dir.join(format!("{}_img{img}_global.pgm", p.seed)), global.to_pgm(img))?;
            fs::write(dir.join(format!("{}_img{img}_ctrf.pgm", p.seed)), cf.to_pgm(img))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub exec: f64,
    pub lcs: f64,
    pub corr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub tokens_per_image: usize,
    pub final_loss: f64,
    pub exec: f64,
    pub lcs: f64,
    pub corr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub sweep: Vec<SweepRow>,
}

impl AblationReport {
    /// Mean of `metric` over seeds for a variant and split.
    pub fn mean(&self, variant: &str, split: &str, metric: fn(&AblationRow) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.split == split)
            .map(metric)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Per-variant means over seeds, one row per variant and split.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,split,exec,lcs,corr,seeds\n");
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.variant.clone(), r.split.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        for (v, s) in keys {
            let seeds = self.rows.iter().filter(|r| r.variant == v && r.split == s).count();
            let _ = writeln!(
                out,
                "{v},{s},{:.2},{:.4},{:.2},{seeds}",
                self.mean(&v, &s, |r| r.exec).unwrap_or(f64::NAN),
                self.mean(&v, &s, |r| r.lcs).unwrap_or(f64::NAN),
                self.mean(&v, &s, |r| r.corr).unwrap_or(f64::NAN),
            );
        }
        out
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("variant,seed,split,exec,lcs,corr,n\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.2},{:.4},{:.2},{}", r.variant, r.seed, r.split, r.exec, r.lcs, r.corr, r.n);
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("k,tokens_per_image,final_loss,exec,lcs,corr\n");
        for r in &self.sweep {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.2},{:.4},{:.2}",
                r.k, r.tokens_per_image, r.final_loss, r.exec, r.lcs, r.corr
            );
        }
        out
    }
}

fn rows_for(variant: &str, seed: u64, report: &MetricReport) -> Vec<AblationRow> {
    report
        .splits
        .iter()
        .map(|(split, m)| AblationRow {
            variant: variant.to_string(),
            seed,
            split: split.clone(),
            exec: m.exec,
            lcs: m.lcs,
            corr: m.corr,
            n: m.n,
        })
        .collect()
}

/// Stage 1 once per seed, then stage 2 per variant; checkpoints already in
/// `out/ckpt` are reused.
fn ablate_seed(
    rc: &RunConfig,
    a: &AblateArgs,
    data: &Dataset,
    variants: &[Variant],
    seed: u64,
    train_eps: &[Episode],
    val_eps: &[Episode],
    test_eps: &[Episode],
) -> Result<Vec<AblationRow>> {
    let ckdir = a.out.join("ckpt");
    let mut flags = a.train.clone();
    flags.seed = Some(seed);
    let mut base = rc.model.clone();
    base.patch_grid = data.gen.patch_grid;
    base.validate()?;
    let s1_path = ckdir.join(format!("stage1_s{seed}.json"));
    let (s1, meta) = if s1_path.exists() {
        let (s, m, _) = load_checkpoint(&s1_path)?;
        (s, m)
    } else {
        let tc = train_config(rc, &TrainFlags { epochs: None, lr: None, batch: None, ..flags.clone() }, 1);
        let mut store = init_params(&base, data.vocab.len(), seed)?;
        let train = prepare_all(train_eps, &data.vocab, &base)?;
        let val = prepare_all(val_eps, &data.vocab, &base)?;
        train_stage1(&mut store, &base, &tc, &train, &val)?;
        let meta = CheckpointMeta { model: base.clone(), train: tc, vocab_size: data.vocab.len() };
        save_checkpoint(&s1_path, &store, &meta, 1)?;
        (store, meta)
    };
    let mut rows = Vec::new();
    for &v in variants {
        let mut model = meta.model.clone();
        v.apply(&mut model);
        let path = ckdir.join(format!("{}_s{seed}.json", v.name()));
        let store = if path.exists() {
            load_checkpoint(&path)?.0
        } else {
            let tc = train_config(rc, &flags, 2);
            let mut store = s1.clone();
            let train = prepare_all(train_eps, &data.vocab, &model)?;
            let report = train_stage2(&mut store, &model, &tc, &train)?;
            let meta = CheckpointMeta { model: model.clone(), train: tc, vocab_size: data.vocab.len() };
            save_checkpoint(&path, &store, &meta, 2)?;
            write_new(&report_path(&path), report.to_json().as_bytes())?;
            store
        };
        let test = prepare_all(test_eps, &data.vocab, &model)?;
        let report = evaluate(&store, &model, &test)?;
        log::info!("seed {seed} {}: {}", v.name(), report.to_csv().replace('\n', " | "));
        rows.extend(rows_for(v.name(), seed, &report));
    }
    Ok(rows)
}

/// K sweep at a finer patch grid on a reduced corpus: one row per K.
pub fn k_sweep(rc: &RunConfig, a: &AblateArgs, data: &Dataset, ab: &AblationConfig) -> Result<Vec<SweepRow>> {
    let mut gen = data.gen.clone();
    gen.patch_grid = ab.sweep_patch_grid;
    gen.validate()?;
    let train_eps: Vec<Episode> = data.train()?.into_iter().take(ab.sweep_train).collect();
    let test_eps: Vec<Episode> = data.test()?.into_iter().take(ab.sweep_test).collect();
    let seed = ab.seeds[0];
    let ks = if a.ks.is_empty() { ab.ks.clone() } else { a.ks.clone() };
    let mut rows = Vec::new();
    for k in ks {
        let mut model = rc.model.clone();
        model.patch_grid = gen.patch_grid;
        model.k = k;
        model.validate()?;
        let mut tc = train_config(rc, &TrainFlags { seed: Some(seed), ..TrainFlags::default() }, 2);
        tc.stage2_epochs = ab.sweep_epochs;
        let mut store = init_params(&model, data.vocab.len(), seed)?;
        let train = prepare_all(&train_eps, &data.vocab, &model)?;
        let test = prepare_all(&test_eps, &data.vocab, &model)?;
        train_stage1(&mut store, &model, &tc, &train, &[])?;
        let report = train_stage2(&mut store, &model, &tc, &train)?;
        let metrics = evaluate(&store, &model, &test)?;
        let total = metrics
            .get("total")
            .ok_or_else(|| Error::Data("sweep produced no total row".into()))?;
        rows.push(SweepRow {
            k,
            tokens_per_image: k * k,
            final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            exec: total.exec,
            lcs: total.lcs,
            corr: total.corr,
        });
        log::info!("K = {k}: {:?}", rows.last());
    }
    Ok(rows)
}

/// Writes `ablation.csv` (per seed), `ablation_summary.csv` (seed means),
/// `ksweep.csv` and `ablation.json` under `--out`.
pub fn cmd_ablate(rc: &RunConfig, a: &AblateArgs) -> Result<AblationReport> {
    let data = Dataset::open(&a.data)?;
    let mut ab = rc.ablation.clone().or_defaults();
    if !a.seeds.is_empty() {
        ab.seeds = a.seeds.clone();
    }
    let variants: Vec<Variant> = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() };
    let train_eps = limit(data.train()?, a.train.train_limit);
    let (val_eps, test_eps) = (data.val()?, data.test()?);
    let per_seed: Vec<Result<Vec<AblationRow>>> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = ab
                .seeds
                .iter()
                .map(|&seed| {
                    let (data, variants) = (&data, &variants);
                    let (tr, va, te) = (&train_eps, &val_eps, &test_eps);
                    s.spawn(move || ablate_seed(rc, a, data, variants, seed, tr, va, te))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        })
    } else {
        ab.seeds
            .iter()
            .map(|&seed| ablate_seed(rc, a, &data, &variants, seed, &train_eps, &val_eps, &test_eps))
            .collect()
    };
    let mut report = AblationReport::default();
    for rows in per_seed {
        report.rows.extend(rows?);
    }
    if !a.no_sweep {
        report.sweep = k_sweep(rc, a, &data, &ab)?;
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("ablation.csv"), report.rows_csv())?;
    fs::write(a.out.join("ablation_summary.csv"), report.summary_csv())?;
    fs::write(a.out.join("ksweep.csv"), report.sweep_csv())?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{}", report.summary_csv());
    if !report.sweep.is_empty() {
        print!("{}", report.sweep_csv());
    }
    Ok(report)
}
