//! Desk-scale evaluation: multiple-choice accuracy, task loss, windowed
//! perplexity, generation throughput, the per-layer remove test and the
//! end-to-end pruning experiments built on them.
//!
//! Every experiment that compares prunings reports mean per-token task
//! loss (lower is better).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{solve_schedule, LogisticParams, SparsitySchedule};
use crate::corpus::{self, Corpora, SynthSpec, TaskCorpus, TaskRecord, Tokenizer};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, TinyModel, TrainConfig, TrainReport};
use crate::pruner::{compact, make_plan};
use crate::scalar::Scalar;
use crate::scoring::{aggregate_general, select_expert, Method, Origin, ScoreArchive, ScoreSet};

// ── Multiple choice ───────────────────────────────────────────────────────

/// Index of the option with the highest length-normalized log-probability
/// given the question; the lower index wins ties.
pub fn mc_prediction<F: Scalar>(model: &TinyModel<F>, tokenizer: &Tokenizer, record: &TaskRecord) -> Result<usize> {
    if record.options().len() < 2 {
        return Err(invalid(format!(
            "record {:?} needs at least two options",
            record.question()
        )));
    }
    let context = tokenizer.encode(record.question())?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, option) in record.options().iter().enumerate() {
        let continuation = tokenizer.encode(&format!(" {option}"))?;
        let (sum, n) = model.sequence_logprob(&context, &continuation)?;
        let score = sum / n as f64;
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// Fraction of records whose predicted option is the answer.
pub fn eval_multiple_choice<F: Scalar>(
    model: &TinyModel<F>,
    tokenizer: &Tokenizer,
    records: &[TaskRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let mut correct = 0;
    for record in records {
        let answer = record
            .answer_index()
            .ok_or_else(|| invalid(format!("record {:?} has no options", record.question())))?;
        if mc_prediction(model, tokenizer, record)? == answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

// ── Loss and perplexity ───────────────────────────────────────────────────

/// Mean next-token negative log-likelihood over every prompt of `corpus`.
pub fn eval_loss<F: Scalar>(model: &TinyModel<F>, corpus: &TaskCorpus) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for tokens in corpus.token_sequences() {
        let tokens = &tokens[..tokens.len().min(model.config.max_seq)];
        if tokens.len() < 2 {
            continue;
        }
        let lp = model.token_logprobs(tokens)?;
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    if count == 0 {
        return Err(invalid(format!("corpus {} has nothing to predict", corpus.task_id())));
    }
    Ok(total / count as f64)
}

pub fn eval_task_losses<F: Scalar>(model: &TinyModel<F>, corpora: &Corpora) -> Result<BTreeMap<String, f64>> {
    corpora
        .iter()
        .map(|(task, c)| Ok((task.clone(), eval_loss(model, c)?)))
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplConfig {
    pub context_len: usize,
    pub window_len: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for PplConfig {
    fn default() -> Self {
        Self {
            context_len: 256,
            window_len: 64,
            n_samples: 32,
            seed: 0,
        }
    }
}

/// `exp(-mean logprob)` of `window_len` tokens following `context_len`
/// tokens, over `n_samples` random windows of `tokens`.
pub fn eval_ppl<F: Scalar>(model: &TinyModel<F>, tokens: &[u32], config: &PplConfig) -> Result<f64> {
    let PplConfig {
        context_len,
        window_len,
        n_samples,
        seed,
    } = *config;
    if window_len == 0 || context_len == 0 || n_samples == 0 {
        return Err(invalid("context, window and sample count must be positive"));
    }
    let span = context_len + window_len;
    if span > model.config.max_seq {
        return Err(invalid(format!(
            "context plus window ({span}) exceeds max_seq {}",
            model.config.max_seq
        )));
    }
    if tokens.len() < span {
        return Err(invalid(format!(
            "text of {} tokens is shorter than one sample ({span})",
            tokens.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_samples {
        let start = rng.random_range(0..=tokens.len() - span);
        let (ctx, win) = tokens[start..start + span].split_at(context_len);
        total += model.sequence_logprob(ctx, win)?.0;
    }
    Ok((-total / (n_samples * window_len) as f64).exp())
}

// ── Throughput ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedConfig {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            prompt_len: 32,
            gen_len: 32,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSample {
    /// Tokens per second of each timed repeat.
    pub runs: Vec<f64>,
    pub median: f64,
}

impl SpeedSample {
    pub fn speedup(&self, baseline: &SpeedSample) -> f64 {
        self.median / baseline.median
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times greedy generation for each model, interleaving the models within
/// every repeat so that drifting machine load hits them alike. One untimed
/// warmup run per model precedes the measurements.
pub fn compare_speed<F: Scalar>(models: &[&TinyModel<F>], config: &SpeedConfig) -> Result<Vec<SpeedSample>> {
    if config.gen_len == 0 || config.repeats < 3 || config.prompt_len == 0 {
        return Err(invalid("timing needs gen_len ≥ 1, prompt_len ≥ 1 and at least 3 repeats"));
    }
    let Some(first) = models.first() else {
        return Err(invalid("no model to time"));
    };
    if config.prompt_len + config.gen_len > first.config.max_seq {
        return Err(invalid("prompt plus generation exceeds max_seq"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = first.config.vocab as u32;
    let prompt: Vec<u32> = (0..config.prompt_len).map(|_| rng.random_range(0..vocab)).collect();
    for m in models {
        m.generate_greedy(&prompt, config.gen_len)?;
    }
    let mut runs = vec![Vec::with_capacity(config.repeats); models.len()];
    for r in 0..config.repeats {
        for j in 0..models.len() {
            let idx = (j + r) % models.len();
            let start = Instant::now();
            models[idx].generate_greedy(&prompt, config.gen_len)?;
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            runs[idx].push(config.gen_len as f64 / secs);
        }
    }
    Ok(runs
        .into_iter()
        .map(|runs| SpeedSample {
            median: median(&runs),
            runs,
        })
        .collect())
}

pub fn eval_speed<F: Scalar>(model: &TinyModel<F>, config: &SpeedConfig) -> Result<SpeedSample> {
    Ok(compare_speed(&[model], config)?.remove(0))
}

// ── Reports ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Loss,
    Ppl,
    TokensPerSec,
    RemoveGrid,
    StrategyTable,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Loss => "loss",
            MetricKind::Ppl => "ppl",
            MetricKind::TokensPerSec => "tokens_per_sec",
            MetricKind::RemoveGrid => "remove_grid",
            MetricKind::StrategyTable => "strategy_table",
        }
    }
}

/// Per-task values of one metric plus the fingerprints of the artifacts
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: MetricKind,
    pub values: BTreeMap<String, f64>,
    pub fingerprints: BTreeMap<String, String>,
    pub wall_secs: f64,
}

impl EvalReport {
    pub fn new(kind: MetricKind, values: BTreeMap<String, f64>) -> Result<Self> {
        for (task, &v) in &values {
            let ok = match kind {
                MetricKind::Accuracy => (0.0..=1.0).contains(&v),
                MetricKind::Ppl => v >= 1.0 - 1e-9,
                MetricKind::TokensPerSec => v > 0.0,
                _ => v.is_finite(),
            };
            if !ok {
                return Err(Error::Numeric(format!("{} of {task} is {v}", kind.as_str())));
            }
        }
        Ok(Self {
            kind,
            values,
            fingerprints: BTreeMap::new(),
            wall_secs: 0.0,
        })
    }

    pub fn with_fingerprint(mut self, what: &str, fp: impl Into<String>) -> Self {
        self.fingerprints.insert(what.to_string(), fp.into());
        self
    }

    /// The wall clock goes into the struct only, never into the CSV, so
    /// reruns produce identical files.
    pub fn to_csv(&self) -> String {
        let mut out = fingerprint_line(&self.fingerprints);
        out.push_str(&format!("task,{}\n", self.kind.as_str()));
        for (task, v) in &self.values {
            let _ = writeln!(out, "{task},{v:.6}");
        }
        out
    }
}

/// `# key=value ...` header line of every emitted CSV.
pub fn fingerprint_line(fingerprints: &BTreeMap<String, String>) -> String {
    let body: Vec<String> = fingerprints.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", body.join(" "))
}

/// `stem_<method>_<origin>_G<g>.csv`.
pub fn report_file_name(stem: &str, method: Method, origin: &Origin, g: f64) -> String {
    let origin = match origin {
        Origin::General => "general".to_string(),
        Origin::Task(t) => t.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_"),
    };
    format!("{stem}_{method}_{origin}_G{g:.2}.csv")
}

// ── Remove test ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoveGrid {
    pub layers: Vec<usize>,
    pub sparsities: Vec<f64>,
    /// Mean task loss of the unpruned model.
    pub dense: f64,
    /// `values[i][j]`: mean task loss with only `layers[i]` pruned at
    /// `sparsities[j]`.
    pub values: Vec<Vec<f64>>,
}

impl RemoveGrid {
    /// Mean loss increase over `layers` at sparsity column `col`.
    pub fn mean_degradation(&self, layers: &[usize], col: usize) -> f64 {
        mean(
            self.layers
                .iter()
                .zip(&self.values)
                .filter(|(l, _)| layers.contains(l))
                .map(|(_, row)| row[col] - self.dense),
        )
    }

    pub fn to_csv(&self, fingerprints: &BTreeMap<String, String>) -> String {
        let mut out = fingerprint_line(fingerprints);
        out.push_str("layer");
        for s in &self.sparsities {
            let _ = write!(out, ",rho={s}");
        }
        out.push('\n');
        for (l, row) in self.layers.iter().zip(&self.values) {
            let _ = write!(out, "{l}");
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

fn pruned_loss<F: Scalar>(
    model: &TinyModel<F>,
    scores: &ScoreSet,
    schedule: &SparsitySchedule,
    eval: &Corpora,
) -> Result<BTreeMap<String, f64>> {
    if schedule.rho.iter().all(|&r| r == 0.0) {
        return eval_task_losses(model, eval);
    }
    let plan = make_plan(scores, schedule, &model.config)?;
    eval_task_losses(&compact(model, &plan)?.model, eval)
}

/// Prunes one layer at a time at each sparsity and records the mean task
/// loss over `eval`.
pub fn remove_test<F: Scalar>(
    model: &TinyModel<F>,
    eval: &Corpora,
    layers: &[usize],
    sparsities: &[f64],
    scores: &ScoreSet,
) -> Result<RemoveGrid> {
    let n_layers = model.config.n_layers;
    if let Some(l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(invalid(format!("layer {l} out of range")));
    }
    let dense = mean(eval_task_losses(model, eval)?.into_values());
    let mut values = Vec::with_capacity(layers.len());
    for &layer in layers {
        let mut row = Vec::with_capacity(sparsities.len());
        for &rho in sparsities {
            let schedule = SparsitySchedule::single_layer(n_layers, layer, rho)?;
            row.push(mean(pruned_loss(model, scores, &schedule, eval)?.into_values()));
        }
        values.push(row);
    }
    Ok(RemoveGrid {
        layers: layers.to_vec(),
        sparsities: sparsities.to_vec(),
        dense,
        values,
    })
}

// ── Strategy comparison ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub rho: Vec<f64>,
    pub losses: BTreeMap<String, f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTable {
    pub target: f64,
    pub rows: Vec<StrategyRow>,
}

impl StrategyTable {
    pub fn row(&self, strategy: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_csv(&self, fingerprints: &BTreeMap<String, String>) -> String {
        let mut out = fingerprint_line(fingerprints);
        let tasks: Vec<&String> = self.rows.first().map(|r| r.losses.keys().collect()).unwrap_or_default();
        out.push_str("strategy,G");
        for t in &tasks {
            let _ = write!(out, ",{t}");
        }
        out.push_str(",mean\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.strategy, self.target);
            for t in &tasks {
                let _ = write!(out, ",{:.6}", r.losses[*t]);
            }
            let _ = writeln!(out, ",{:.6}", r.mean_loss);
        }
        out
    }
}

/// Dense, uniform-per-layer and logistic schedules at mean sparsity `g`,
/// all pruning with the same `scores`.
pub fn compare_strategies<F: Scalar>(
    model: &TinyModel<F>,
    scores: &ScoreSet,
    eval: &Corpora,
    g: f64,
    params: LogisticParams,
) -> Result<StrategyTable> {
    let n_layers = model.config.n_layers;
    let schedules = [
        ("dense", SparsitySchedule::uniform(n_layers, 0.0)?),
        ("UL", SparsitySchedule::uniform(n_layers, g)?),
        ("LB", solve_schedule(n_layers, g, params)?),
    ];
    let mut rows = Vec::with_capacity(schedules.len());
    for (name, schedule) in schedules {
        let losses = pruned_loss(model, scores, &schedule, eval)?;
        rows.push(StrategyRow {
            strategy: name.to_string(),
            rho: schedule.rho.clone(),
            mean_loss: mean(losses.values().copied()),
            losses,
        });
    }
    Ok(StrategyTable { target: g, rows })
}

// ── Expert masks ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMatrix {
    pub tasks: Vec<String>,
    pub method: Method,
    pub target: f64,
    /// `losses[i][j]`: loss on `tasks[i]` under the expert plan of `tasks[j]`.
    pub losses: Vec<Vec<f64>>,
    /// Loss on each task under the general plan.
    pub general: Vec<f64>,
    pub dense: Vec<f64>,
}

impl ExpertMatrix {
    /// Every task is served best by its own expert plan.
    pub fn diagonal_dominates(&self) -> bool {
        self.losses
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &v)| i == j || row[i] < v))
    }

    pub fn to_csv(&self, fingerprints: &BTreeMap<String, String>) -> String {
        let mut out = fingerprint_line(fingerprints);
        out.push_str("eval_task");
        for t in &self.tasks {
            let _ = write!(out, ",mask={t}");
        }
        out.push_str(",mask=general,dense\n");
        for (i, t) in self.tasks.iter().enumerate() {
            let _ = write!(out, "{t}");
            for v in &self.losses[i] {
                let _ = write!(out, ",{v:.6}");
            }
            let _ = writeln!(out, ",{:.6},{:.6}", self.general[i], self.dense[i]);
        }
        out
    }
}

/// Evaluates every task under every task's expert plan, the general plan
/// (weighted by `weights`) and the dense model. All plans share one
/// logistic schedule at mean sparsity `g`.
pub fn expert_vs_mismatch<F: Scalar>(
    model: &TinyModel<F>,
    scores: &ScoreArchive,
    eval: &Corpora,
    g: f64,
    method: Method,
    params: LogisticParams,
    weights: &BTreeMap<String, f64>,
) -> Result<ExpertMatrix> {
    let tasks: Vec<String> = eval.keys().cloned().collect();
    if tasks.len() < 2 {
        return Err(invalid("the expert matrix needs at least two tasks"));
    }
    let schedule = solve_schedule(model.config.n_layers, g, params)?;
    let dense_losses = eval_task_losses(model, eval)?;
    let mut columns = Vec::with_capacity(tasks.len());
    for mask in &tasks {
        let expert = select_expert(scores, mask, method)?;
        columns.push(pruned_loss(model, &expert, &schedule, eval)?);
    }
    let general = pruned_loss(model, &aggregate_general(scores, weights, method)?, &schedule, eval)?;
    Ok(ExpertMatrix {
        losses: tasks
            .iter()
            .map(|t| columns.iter().map(|c| c[t]).collect())
            .collect(),
        general: tasks.iter().map(|t| general[t]).collect(),
        dense: tasks.iter().map(|t| dense_losses[t]).collect(),
        tasks,
        method,
        target: g,
    })
}

// ── Desk setup ────────────────────────────────────────────────────────────

/// A synthetic multi-task workload and a tiny model trained on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub synth: SynthSpec,
    /// Fraction of each task's records used for training and statistics.
    pub train_frac: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl DeskConfig {
    pub fn standard(n_tasks: usize, seed: u64) -> Self {
        Self {
            synth: SynthSpec::standard(n_tasks).with_records(96),
            train_frac: 2.0 / 3.0,
            model: ModelConfig::new(4, 32, 4, 128, 256, 320).expect("valid shape"),
            train: TrainConfig {
                steps: 400,
                lr: 0.3,
                seed,
                batch_size: 8,
                max_len: 64,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Desk<F> {
    pub tokenizer: Tokenizer,
    pub train: Corpora,
    pub eval: Corpora,
    pub eval_records: Vec<TaskRecord>,
    pub model: TinyModel<F>,
    pub report: TrainReport,
}

/// Per task, the first `train_frac` of the records (rounded) go to the
/// training side and the rest to evaluation. Both sides keep every task.
pub fn split_records(records: &[TaskRecord], train_frac: f64) -> Result<(Vec<TaskRecord>, Vec<TaskRecord>)> {
    let mut by_task: BTreeMap<&str, Vec<&TaskRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task()).or_default().push(r);
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (task, rs) in by_task {
        let n_train = ((rs.len() as f64) * train_frac).round() as usize;
        if n_train == 0 || n_train >= rs.len() {
            return Err(invalid(format!(
                "train fraction {train_frac} leaves task {task:?} without train or eval records"
            )));
        }
        train.extend(rs[..n_train].iter().map(|r| (*r).clone()));
        eval.extend(rs[n_train..].iter().map(|r| (*r).clone()));
    }
    Ok((train, eval))
}

pub fn build_desk<F: Scalar>(config: &DeskConfig) -> Result<Desk<F>> {
    let tokenizer = Tokenizer::byte_level();
    let records = corpus::synth_records(&config.synth, config.seed)?;
    let (train_records, eval_records) = split_records(&records, config.train_frac)?;
    let train = corpus::corpora_from_records(&train_records, &tokenizer)?;
    let eval = corpus::corpora_from_records(&eval_records, &tokenizer)?;
    let init = TinyModel::init_random(config.model.clone(), config.seed)?;
    let (model, report) = crate::model::train_tiny(init, &train, &config.train)?;
    Ok(Desk {
        tokenizer,
        train,
        eval,
        eval_records,
        model,
        report,
    })
}
