//! `taskprune`: the pruning pipeline as a chain of file-producing
//! subcommands.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use taskprune::allocator::{solve_schedule, LogisticParams, SparsitySchedule};
use taskprune::classifier::FitConfig;
use taskprune::corpus::{self, Corpora, CorpusFile, SynthSpec, Tokenizer};
use taskprune::error::ErrorClass;
use taskprune::fingerprint;
use taskprune::harness::{self, EvalReport, MetricKind, PplConfig, SpeedConfig};
use taskprune::model::{load_checkpoint, save_checkpoint, ModelConfig, TinyModel, TrainConfig};
use taskprune::pruner::{apply_mask, compact, make_plan, PrunePlan};
use taskprune::scoring::{aggregate_general, default_general_weights, select_expert, Method, Origin, ScoreArchive, ScoreSet};
use taskprune::stats::{self, Pooling, StatsArchive};
use taskprune::{Classifier, Error, Model};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "taskprune", version, about = "Task-adaptive structured pruning pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output artifacts (default: current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerKind {
    Byte,
    Char,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Tokens,
    PromptMean,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Logistic,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Loss,
    Accuracy,
    Ppl,
    Speed,
}

/// Flags that choose which scores drive a plan.
#[derive(Args)]
struct Selection {
    /// Scoring method: sF or sW.
    #[arg(long)]
    method: Option<String>,
    /// A task id, or `general` for the weighted mix of all tasks.
    #[arg(long)]
    origin: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize task records (JSONL) and an optional plain-text corpus.
    BuildCorpus {
        /// Record file; repeatable.
        #[arg(long, visible_alias = "in", required = true)]
        input: Vec<PathBuf>,
        /// Plain-text file; each nonempty line becomes one prompt.
        #[arg(long)]
        text: Option<PathBuf>,
        /// Task id of the plain-text corpus.
        #[arg(long, default_value = "lm")]
        lm_task: String,
        #[arg(long, value_enum)]
        tokenizer: Option<TokenizerKind>,
        /// Fraction of each task's records held out into eval.json.
        #[arg(long)]
        eval_frac: Option<f64>,
    },
    /// Generate synthetic tasks with disjoint vocabularies.
    SynthCorpus {
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        eval_frac: Option<f64>,
    },
    /// Train the tiny decoder on a corpus.
    TrainTiny {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        n_layers: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        n_heads: Option<usize>,
        #[arg(long)]
        d_ff: Option<usize>,
    },
    /// Accumulate per-task activation statistics at every prunable site.
    CollectStats {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tokens")]
        pooling: PoolingArg,
    },
    /// Turn statistics into per-task channel and head scores.
    Score {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Comma-separated methods.
        #[arg(long, default_value = "sF,sW")]
        methods: String,
    },
    /// Solve a layer-wise sparsity schedule.
    Allocate {
        /// Number of layers; read from the model when absent.
        #[arg(long = "L")]
        n_layers: Option<usize>,
        /// Mean sparsity over layers.
        #[arg(long = "G")]
        g: Option<f64>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        x0: Option<f64>,
        #[arg(long)]
        n_frozen: Option<usize>,
        #[arg(long)]
        rho_cap: Option<f64>,
        #[arg(long, value_enum, default_value = "logistic")]
        strategy: Strategy,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Build a prune plan and write the pruned model.
    Prune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Uniform ratio for every layer, instead of a schedule file.
        #[arg(long)]
        rho: Option<f64>,
        #[command(flatten)]
        select: Selection,
        /// Zero the pruned weights instead of removing them.
        #[arg(long)]
        mask: bool,
    },
    /// Evaluate a model, optionally after applying a plan.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Record file for multiple-choice accuracy.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "loss")]
        metric: Metric,
    },
    /// Prune one layer at a time over a grid of ratios.
    RemoveTest {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated layers (default: all).
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value = "0,0.25,0.5,0.75")]
        sparsities: String,
        #[command(flatten)]
        select: Selection,
    },
    /// Uniform against logistic schedules at one mean sparsity.
    CompareStrategies {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "G")]
        g: Option<f64>,
        #[command(flatten)]
        select: Selection,
    },
    /// Loss of every task under every task's expert plan.
    ExpertMatrix {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "G")]
        g: Option<f64>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Train the task classifier on mean-pooled token embeddings.
    FitClassifier {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Predict the task of a piece of text.
    ClassifyTask {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        clf: Option<PathBuf>,
        #[arg(long)]
        text: String,
    },
    /// Per-dimension normalized ℓ2 heatmap as CSV.
    ExportHeatmap {
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Comma-separated tasks (default: all).
        #[arg(long)]
        tasks: Option<String>,
    },
    /// Two-dimensional principal-component projection of hidden states.
    ProjectStates {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Block whose output is projected (default: last).
        #[arg(long)]
        layer: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    seed: u64,
}

impl Ctx {
    fn new(common: &Common) -> Outcome<Self> {
        let cfg = match &common.config {
            Some(path) => RunConfig::load(path).map_err(Failure::Usage)?,
            None => RunConfig::default(),
        };
        let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
        let seed = common.seed.or(cfg.seed).unwrap_or(0);
        Ok(Self { cfg, out, seed })
    }

    fn output(&self, flag: Option<&PathBuf>, configured: &Option<PathBuf>, name: &str) -> Outcome<PathBuf> {
        fs::create_dir_all(&self.out)?;
        Ok(flag.cloned().or_else(|| configured.clone()).unwrap_or_else(|| self.out.join(name)))
    }

    /// An upstream artifact; its absence is an artifact error naming the
    /// expected file and the command that produces it.
    fn input(&self, flag: Option<&PathBuf>, configured: &Option<PathBuf>, name: &str, producer: &str) -> Outcome<PathBuf> {
        let path = flag.cloned().or_else(|| configured.clone()).unwrap_or_else(|| self.out.join(name));
        if !path.exists() {
            return Err(Error::Missing(format!(
                "expected {} (produced by `taskprune {producer}`)",
                path.display()
            ))
            .into());
        }
        Ok(path)
    }

    fn model(&self, flag: Option<&PathBuf>) -> Outcome<(Model, PathBuf)> {
        let path = self.input(flag, &self.cfg.paths.model, "model.tpck", "train-tiny")?;
        Ok((load_checkpoint::<f32>(&path)?, path))
    }

    fn corpus(&self, flag: Option<&PathBuf>) -> Outcome<CorpusFile> {
        let path = self.input(flag, &self.cfg.paths.corpus, "corpus.json", "synth-corpus")?;
        Ok(CorpusFile::load(path)?)
    }

    fn eval_corpus(&self, flag: Option<&PathBuf>) -> Outcome<CorpusFile> {
        let path = self.input(flag, &self.cfg.paths.eval_corpus, "eval.json", "synth-corpus")?;
        Ok(CorpusFile::load(path)?)
    }

    fn scores(&self, flag: Option<&PathBuf>, model: &Model) -> Outcome<ScoreArchive> {
        let path = self.input(flag, &self.cfg.paths.scores, "scores.json", "score")?;
        let archive = ScoreArchive::load(path)?;
        fingerprint::check("model of score archive", &model.fingerprint(), &archive.model_fingerprint)?;
        Ok(archive)
    }

    fn method(&self, flag: Option<&String>) -> Outcome<Method> {
        Ok(flag.or(self.cfg.prune.method.as_ref()).map_or("sF", String::as_str).parse()?)
    }

    fn origin(&self, flag: Option<&String>) -> Origin {
        match flag.or(self.cfg.prune.origin.as_ref()).map(String::as_str) {
            None | Some("general") => Origin::General,
            Some(task) => Origin::Task(task.to_string()),
        }
    }

    fn g(&self, flag: Option<f64>) -> f64 {
        flag.or(self.cfg.prune.g).unwrap_or(0.5)
    }

    fn params(&self) -> LogisticParams {
        let d = LogisticParams::default();
        let p = &self.cfg.prune;
        LogisticParams {
            k: p.k.unwrap_or(d.k),
            x0: p.x0.unwrap_or(d.x0),
            n_frozen: p.n_frozen.unwrap_or(d.n_frozen),
            rho_cap: p.rho_cap.unwrap_or(d.rho_cap),
        }
    }

    fn weights(&self, archive: &ScoreArchive) -> BTreeMap<String, f64> {
        self.cfg
            .prune
            .weights
            .clone()
            .unwrap_or_else(|| default_general_weights(&archive.tasks(), self.cfg.prune.lm_task.as_deref()))
    }

    fn select(&self, archive: &ScoreArchive, method: Method, origin: &Origin) -> Outcome<ScoreSet> {
        Ok(match origin {
            Origin::General => aggregate_general(archive, &self.weights(archive), method)?,
            Origin::Task(task) => select_expert(archive, task, method)?,
        })
    }
}

fn fingerprints(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn write(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Outcome<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad {what} {s:?}"))))
        .collect()
}

fn save_corpora(ctx: &Ctx, tokenizer: &Tokenizer, train: Corpora, eval: Option<Corpora>) -> Outcome<String> {
    let train_file = CorpusFile::new(tokenizer.clone(), train);
    let path = ctx.output(None, &ctx.cfg.paths.corpus, "corpus.json")?;
    train_file.save(&path)?;
    let mut summary = format!(
        "{} tasks, {} prompts -> {} ({})",
        train_file.corpora.len(),
        train_file.corpora.values().map(|c| c.len()).sum::<usize>(),
        path.display(),
        train_file.fingerprint()
    );
    if let Some(eval) = eval {
        let eval_file = CorpusFile::new(tokenizer.clone(), eval);
        let eval_path = ctx.output(None, &ctx.cfg.paths.eval_corpus, "eval.json")?;
        eval_file.save(&eval_path)?;
        summary.push_str(&format!(
            "; {} held-out prompts -> {}",
            eval_file.corpora.values().map(|c| c.len()).sum::<usize>(),
            eval_path.display()
        ));
    }
    Ok(summary)
}

fn run(cli: Cli) -> Outcome {
    let ctx = Ctx::new(&cli.common)?;
    match cli.cmd {
        Cmd::BuildCorpus {
            input,
            text,
            lm_task,
            tokenizer,
            eval_frac,
        } => {
            let mut records = Vec::new();
            for path in &input {
                if !path.exists() {
                    return Err(Error::Missing(format!("record file {}", path.display())).into());
                }
                records.extend(corpus::read_records(path)?);
            }
            let lm_text = text.as_ref().map(fs::read_to_string).transpose()?;
            let kind = tokenizer.unwrap_or(match ctx.cfg.corpus.tokenizer.as_deref() {
                Some("char") => TokenizerKind::Char,
                Some("byte") | None => TokenizerKind::Byte,
                Some(other) => return Err(usage(format!("unknown tokenizer {other:?}"))),
            });
            let tok = match kind {
                TokenizerKind::Byte => Tokenizer::byte_level(),
                TokenizerKind::Char => {
                    let mut all: String = records.iter().map(corpus::format_prompt).collect::<Vec<_>>().join("\n");
                    if let Some(t) = &lm_text {
                        all.push_str(t);
                    }
                    Tokenizer::char_level(&all)
                }
            };
            let frac = eval_frac.or(ctx.cfg.corpus.eval_frac).unwrap_or(0.0);
            let (train_records, eval_records) = if frac > 0.0 {
                let (a, b) = harness::split_records(&records, 1.0 - frac)?;
                (a, Some(b))
            } else {
                (records, None)
            };
            let mut train = corpus::corpora_from_records(&train_records, &tok)?;
            if let Some(path) = &text {
                if train.contains_key(&lm_task) {
                    return Err(usage(format!("task id {lm_task:?} is already used by the records")));
                }
                train.insert(lm_task.clone(), corpus::ingest_text(path, &lm_task, &tok)?);
            }
            let eval = eval_records.map(|r| corpus::corpora_from_records(&r, &tok)).transpose()?;
            println!("build-corpus: {}", save_corpora(&ctx, &tok, train, eval)?);
        }
        Cmd::SynthCorpus {
            tasks,
            records,
            eval_frac,
        } => {
            let n_tasks = tasks.or(ctx.cfg.corpus.tasks).unwrap_or(2);
            let n_records = records.or(ctx.cfg.corpus.records_per_task).unwrap_or(96);
            let frac = eval_frac.or(ctx.cfg.corpus.eval_frac).unwrap_or(1.0 / 3.0);
            let spec = SynthSpec::standard(n_tasks).with_records(n_records);
            let all = corpus::synth_records(&spec, ctx.seed)?;
            let (train_records, eval_records) = harness::split_records(&all, 1.0 - frac)?;
            let tok = Tokenizer::byte_level();
            let records_path = ctx.output(None, &ctx.cfg.paths.records, "eval_records.jsonl")?;
            corpus::write_records(&records_path, &eval_records)?;
            let train = corpus::corpora_from_records(&train_records, &tok)?;
            let eval = corpus::corpora_from_records(&eval_records, &tok)?;
            println!(
                "synth-corpus: {}; records -> {}",
                save_corpora(&ctx, &tok, train, Some(eval))?,
                records_path.display()
            );
        }
        Cmd::TrainTiny {
            corpus,
            steps,
            lr,
            n_layers,
            d_model,
            n_heads,
            d_ff,
        } => {
            let file = ctx.corpus(corpus.as_ref())?;
            let m = &ctx.cfg.model;
            let config = ModelConfig::new(
                n_layers.or(m.n_layers).unwrap_or(4),
                d_model.or(m.d_model).unwrap_or(32),
                n_heads.or(m.n_heads).unwrap_or(4),
                d_ff.or(m.d_ff).unwrap_or(128),
                file.tokenizer.vocab_size(),
                m.max_seq.unwrap_or(320),
            )?;
            let t = &ctx.cfg.train;
            let d = TrainConfig::default();
            let train = TrainConfig {
                steps: steps.or(t.steps).unwrap_or(400),
                lr: lr.or(t.lr).unwrap_or(d.lr),
                seed: ctx.seed,
                batch_size: t.batch_size.unwrap_or(d.batch_size),
                max_len: t.max_len.unwrap_or(d.max_len),
            };
            let init = TinyModel::<f32>::init_random(config, ctx.seed)?;
            let (model, report) = taskprune::model::train_tiny(init, &file.corpora, &train)?;
            let path = ctx.output(None, &ctx.cfg.paths.model, "model.tpck")?;
            save_checkpoint(&model, &path)?;
            println!(
                "train-tiny: {} steps, loss {:.4} -> {:.4}, {} params -> {} ({})",
                train.steps,
                report.first_loss().unwrap_or(f64::NAN),
                report.tail_loss(20).unwrap_or(f64::NAN),
                model.param_count(),
                path.display(),
                model.fingerprint()
            );
        }
        Cmd::CollectStats { model, corpus, pooling } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let file = ctx.corpus(corpus.as_ref())?;
            let pooling = match pooling {
                PoolingArg::Tokens => Pooling::Tokens,
                PoolingArg::PromptMean => Pooling::PromptMean,
            };
            let archive = StatsArchive::build(&model, &file.corpora, &file.tokenizer_fingerprint, pooling)?;
            let path = ctx.output(None, &ctx.cfg.paths.stats, "stats.json")?;
            archive.save(&path)?;
            println!(
                "collect-stats: {} entries over {} tasks -> {} ({})",
                archive.entries().len(),
                archive.tasks().len(),
                path.display(),
                archive.fingerprint()
            );
        }
        Cmd::Score { model, stats, methods } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let stats_path = ctx.input(stats.as_ref(), &ctx.cfg.paths.stats, "stats.json", "collect-stats")?;
            let archive = StatsArchive::load(stats_path)?;
            let methods: Vec<Method> = methods
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<taskprune::Result<_>>()?;
            let scores = ScoreArchive::build(&model, &archive, &methods)?;
            let path = ctx.output(None, &ctx.cfg.paths.scores, "scores.json")?;
            scores.save(&path)?;
            println!(
                "score: {} score sets -> {} ({})",
                scores.entries().len(),
                path.display(),
                scores.fingerprint()
            );
        }
        Cmd::Allocate {
            n_layers,
            g,
            k,
            x0,
            n_frozen,
            rho_cap,
            strategy,
            model,
        } => {
            let n_layers = match n_layers.or(ctx.cfg.model.n_layers) {
                Some(l) => l,
                None => ctx.model(model.as_ref())?.0.config.n_layers,
            };
            let g = ctx.g(g);
            let base = ctx.params();
            let params = LogisticParams {
                k: k.unwrap_or(base.k),
                x0: x0.unwrap_or(base.x0),
                n_frozen: n_frozen.unwrap_or(base.n_frozen),
                rho_cap: rho_cap.unwrap_or(base.rho_cap),
            };
            let schedule = match strategy {
                Strategy::Logistic => solve_schedule(n_layers, g, params)?,
                Strategy::Uniform => SparsitySchedule::uniform(n_layers, g)?,
            };
            let path = ctx.output(None, &ctx.cfg.paths.schedule, "schedule.json")?;
            schedule.save(&path)?;
            let rho: Vec<String> = schedule.rho.iter().map(|r| format!("{r:.3}")).collect();
            println!(
                "allocate: mean {:.6}, rho [{}] -> {} ({})",
                schedule.mean(),
                rho.join(", "),
                path.display(),
                schedule.fingerprint()
            );
        }
        Cmd::Prune {
            model,
            scores,
            schedule,
            rho,
            select,
            mask,
        } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let archive = ctx.scores(scores.as_ref(), &model)?;
            let schedule = match rho {
                Some(r) => SparsitySchedule::uniform(model.config.n_layers, r)?,
                None => SparsitySchedule::load(ctx.input(
                    schedule.as_ref(),
                    &ctx.cfg.paths.schedule,
                    "schedule.json",
                    "allocate",
                )?)?,
            };
            let method = ctx.method(select.method.as_ref())?;
            let origin = ctx.origin(select.origin.as_ref());
            let set = ctx.select(&archive, method, &origin)?;
            let mut plan = make_plan(&set, &schedule, &model.config)?;
            plan.source.scores_fingerprint = Some(archive.fingerprint());
            plan.source.model_fingerprint = Some(model.fingerprint());
            let plan_path = ctx.output(None, &ctx.cfg.paths.plan, "plan.json")?;
            plan.save(&plan_path)?;
            let pruned = if mask {
                apply_mask(&model, &plan)?
            } else {
                compact(&model, &plan)?.model
            };
            let model_path = ctx.output(None, &ctx.cfg.paths.pruned, "pruned.tpck")?;
            save_checkpoint(&pruned, &model_path)?;
            println!(
                "prune: {method}/{origin}, {} units removed, {} of {} params kept -> {}, {} ({})",
                plan.pruned_units(),
                pruned.param_count(),
                model.param_count(),
                plan_path.display(),
                model_path.display(),
                plan.fingerprint()
            );
        }
        Cmd::Eval {
            model,
            plan,
            corpus,
            records,
            metric,
        } => {
            let (mut model, _) = ctx.model(model.as_ref())?;
            let mut fps = vec![("model", model.fingerprint())];
            if let Some(plan_path) = plan.as_ref() {
                let plan = PrunePlan::load(ctx.input(Some(plan_path), &None, "plan.json", "prune")?)?;
                if let Some(expected) = &plan.source.model_fingerprint {
                    fingerprint::check("model of plan", &model.fingerprint(), expected)?;
                }
                fps.push(("plan", plan.fingerprint()));
                model = compact(&model, &plan)?.model;
            }
            let (kind, values) = match metric {
                Metric::Loss | Metric::Ppl => {
                    let file = ctx.eval_corpus(corpus.as_ref())?;
                    fps.push(("corpus", file.fingerprint()));
                    if matches!(metric, Metric::Loss) {
                        (MetricKind::Loss, harness::eval_task_losses(&model, &file.corpora)?)
                    } else {
                        let e = &ctx.cfg.eval;
                        let d = PplConfig::default();
                        let cfg = PplConfig {
                            context_len: e.context_len.unwrap_or(d.context_len),
                            window_len: e.window_len.unwrap_or(d.window_len),
                            n_samples: e.n_samples.unwrap_or(d.n_samples),
                            seed: ctx.seed,
                        };
                        let mut values = BTreeMap::new();
                        for (task, c) in &file.corpora {
                            let stream = c.token_stream(file.tokenizer.encode("\n")?.first().copied());
                            values.insert(task.clone(), harness::eval_ppl(&model, &stream, &cfg)?);
                        }
                        (MetricKind::Ppl, values)
                    }
                }
                Metric::Accuracy => {
                    let path = ctx.input(records.as_ref(), &ctx.cfg.paths.records, "eval_records.jsonl", "synth-corpus")?;
                    let all = corpus::read_records(&path)?;
                    fps.push(("records", fingerprint::fingerprint(&fs::read(&path)?)));
                    let tok = ctx.eval_corpus(corpus.as_ref()).map(|f| f.tokenizer).unwrap_or_else(|_| Tokenizer::byte_level());
                    let mut by_task: BTreeMap<String, Vec<_>> = BTreeMap::new();
                    for r in all {
                        by_task.entry(r.task().to_string()).or_default().push(r);
                    }
                    let mut values = BTreeMap::new();
                    for (task, rs) in by_task {
                        values.insert(task, harness::eval_multiple_choice(&model, &tok, &rs)?);
                    }
                    (MetricKind::Accuracy, values)
                }
                Metric::Speed => {
                    let e = &ctx.cfg.eval;
                    let d = SpeedConfig::default();
                    let cfg = SpeedConfig {
                        prompt_len: e.prompt_len.unwrap_or(d.prompt_len),
                        gen_len: e.gen_len.unwrap_or(d.gen_len),
                        repeats: e.repeats.unwrap_or(d.repeats),
                        seed: ctx.seed,
                    };
                    let s = harness::eval_speed(&model, &cfg)?;
                    (MetricKind::TokensPerSec, BTreeMap::from([("all".to_string(), s.median)]))
                }
            };
            let report = EvalReport::new(kind, values)?;
            let report = fps.into_iter().fold(report, |r, (k, v)| r.with_fingerprint(k, v));
            let path = ctx.output(None, &None, &format!("eval_{}.csv", kind.as_str()))?;
            write(&path, &report.to_csv())?;
            let cells: Vec<String> = report.values.iter().map(|(t, v)| format!("{t}={v:.4}")).collect();
            println!("eval: {} {} -> {}", kind.as_str(), cells.join(" "), path.display());
        }
        Cmd::RemoveTest {
            model,
            scores,
            corpus,
            layers,
            sparsities,
            select,
        } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let archive = ctx.scores(scores.as_ref(), &model)?;
            let file = ctx.eval_corpus(corpus.as_ref())?;
            let method = ctx.method(select.method.as_ref())?;
            let origin = ctx.origin(select.origin.as_ref());
            let set = ctx.select(&archive, method, &origin)?;
            let layers: Vec<usize> = match layers {
                Some(l) => parse_list(&l, "layer")?,
                None => (0..model.config.n_layers).collect(),
            };
            let sparsities: Vec<f64> = parse_list(&sparsities, "sparsity")?;
            let grid = harness::remove_test(&model, &file.corpora, &layers, &sparsities, &set)?;
            let fps = fingerprints(&[
                ("model", model.fingerprint()),
                ("scores", archive.fingerprint()),
                ("corpus", file.fingerprint()),
            ]);
            let path = ctx.output(None, &None, &format!("remove_test_{method}_{origin}.csv"))?;
            write(&path, &grid.to_csv(&fps))?;
            println!(
                "remove-test: {}x{} grid, dense loss {:.4} -> {}",
                layers.len(),
                sparsities.len(),
                grid.dense,
                path.display()
            );
        }
        Cmd::CompareStrategies {
            model,
            scores,
            corpus,
            g,
            select,
        } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let archive = ctx.scores(scores.as_ref(), &model)?;
            let file = ctx.eval_corpus(corpus.as_ref())?;
            let method = ctx.method(select.method.as_ref())?;
            let origin = ctx.origin(select.origin.as_ref());
            let set = ctx.select(&archive, method, &origin)?;
            let g = ctx.g(g);
            let table = harness::compare_strategies(&model, &set, &file.corpora, g, ctx.params())?;
            let fps = fingerprints(&[
                ("model", model.fingerprint()),
                ("scores", archive.fingerprint()),
                ("corpus", file.fingerprint()),
            ]);
            let path = ctx.output(None, &None, &harness::report_file_name("strategies", method, &origin, g))?;
            write(&path, &table.to_csv(&fps))?;
            let cells: Vec<String> = table.rows.iter().map(|r| format!("{}={:.4}", r.strategy, r.mean_loss)).collect();
            println!("compare-strategies: mean loss {} -> {}", cells.join(" "), path.display());
        }
        Cmd::ExpertMatrix {
            model,
            scores,
            corpus,
            g,
            method,
        } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let archive = ctx.scores(scores.as_ref(), &model)?;
            let file = ctx.eval_corpus(corpus.as_ref())?;
            let method = ctx.method(method.as_ref())?;
            let g = ctx.g(g);
            let weights = ctx.weights(&archive);
            let m = harness::expert_vs_mismatch(&model, &archive, &file.corpora, g, method, ctx.params(), &weights)?;
            let fps = fingerprints(&[
                ("model", model.fingerprint()),
                ("scores", archive.fingerprint()),
                ("corpus", file.fingerprint()),
            ]);
            let path = ctx.output(None, &None, &harness::report_file_name("expert_matrix", method, &Origin::General, g))?;
            write(&path, &m.to_csv(&fps))?;
            println!(
                "expert-matrix: {} tasks, diagonal dominates: {} -> {}",
                m.tasks.len(),
                m.diagonal_dominates(),
                path.display()
            );
        }
        Cmd::FitClassifier {
            model,
            corpus,
            epochs,
            lr,
        } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let file = ctx.corpus(corpus.as_ref())?;
            let d = FitConfig::default();
            let cfg = FitConfig {
                epochs: epochs.or(ctx.cfg.classifier.epochs).unwrap_or(d.epochs),
                lr: lr.or(ctx.cfg.classifier.lr).unwrap_or(d.lr),
                seed: ctx.seed,
                init_scale: d.init_scale,
            };
            let clf = Classifier::fit(&model, &file.corpora, &cfg)?;
            let train_acc = clf.evaluate(&model, &file.corpora)?.accuracy;
            let path = ctx.output(None, &ctx.cfg.paths.classifier, "classifier.json")?;
            clf.save(&path)?;
            let mut summary = format!("training accuracy {train_acc:.4}");
            let eval_path = ctx.cfg.paths.eval_corpus.clone().unwrap_or_else(|| ctx.out.join("eval.json"));
            if eval_path.exists() {
                let held = CorpusFile::load(&eval_path)?;
                let report = clf.evaluate(&model, &held.corpora)?;
                let report_path = ctx.output(None, &None, "classifier_report.csv")?;
                let comment = format!("model={} classifier={}", model.fingerprint(), clf.fingerprint());
                write(&report_path, &report.to_csv(Some(&comment)))?;
                summary.push_str(&format!(", held-out accuracy {:.4} -> {}", report.accuracy, report_path.display()));
            }
            println!("fit-classifier: {summary}; classifier -> {}", path.display());
        }
        Cmd::ClassifyTask { model, clf, text } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let path = ctx.input(clf.as_ref(), &ctx.cfg.paths.classifier, "classifier.json", "fit-classifier")?;
            let clf = Classifier::load(path)?;
            if let Some(expected) = &clf.model_fingerprint {
                fingerprint::check("model of classifier", &model.fingerprint(), expected)?;
            }
            let tok = ctx.corpus(None).map(|f| f.tokenizer).unwrap_or_else(|_| Tokenizer::byte_level());
            let (best, probs) = clf.classify(&model, &tok.encode(&text)?)?;
            let cells: Vec<String> = clf.labels.iter().zip(probs.iter()).map(|(l, p)| format!("{l}={p:.4}")).collect();
            println!("{} {}", clf.label(best), cells.join(" "));
        }
        Cmd::ExportHeatmap { stats, tasks } => {
            let path = ctx.input(stats.as_ref(), &ctx.cfg.paths.stats, "stats.json", "collect-stats")?;
            let archive = StatsArchive::load(path)?;
            let tasks: Vec<String> = match tasks {
                Some(t) => t.split(',').map(|s| s.trim().to_string()).collect(),
                None => archive.tasks(),
            };
            let refs: Vec<&str> = tasks.iter().map(String::as_str).collect();
            let heatmap = stats::export_heatmap(&archive, &refs)?;
            let comment = format!("model={} stats={}", archive.model_fingerprint, archive.fingerprint());
            let out = ctx.output(None, &None, "heatmap.csv")?;
            write(&out, &heatmap.to_csv(Some(&comment)))?;
            println!("export-heatmap: {} rows -> {}", heatmap.rows.len(), out.display());
        }
        Cmd::ProjectStates { model, corpus, layer } => {
            let (model, _) = ctx.model(model.as_ref())?;
            let file = ctx.corpus(corpus.as_ref())?;
            let layer = layer.unwrap_or(model.config.n_layers - 1);
            let points = stats::project_hidden_states(&model, &file.corpora, layer, ctx.seed)?;
            let (between, within) = stats::cluster_separation(&points);
            let comment = format!("model={} corpus={} layer={layer}", model.fingerprint(), file.fingerprint());
            let out = ctx.output(None, &None, "projection.csv")?;
            write(&out, &stats::projection_csv(&points, Some(&comment)))?;
            println!(
                "project-states: {} points, nearest centroids {between:.4} apart, mean spread {within:.4} -> {}",
                points.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Artifact => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
