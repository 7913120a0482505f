//! Per-dimension activation statistics at the prunable sites.
//!
//! Each [`ActivationStats`] pools every token position of every prompt of
//! one task at one `(layer, site)`. Accumulators are kept in a mergeable
//! form (count, sum, sum of squares and centered second moment), so shards
//! collected independently combine into the single-pass result.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpora, TaskCorpus};
use crate::error::{invalid, shape, Error, Result};
use crate::fingerprint;
use crate::model::{ForwardTrace, TinyModel};
use crate::scalar::Scalar;

/// A prunable site: the input of an attention output projection or of an
/// MLP down projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Attn,
    Mlp,
}

impl Site {
    pub const ALL: [Site; 2] = [Site::Attn, Site::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Attn => "attn",
            Site::Mlp => "mlp",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(Site::Attn),
            "mlp" => Ok(Site::Mlp),
            _ => Err(invalid(format!("unknown site {s:?}"))),
        }
    }
}

/// How token positions pool into samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every token position of every prompt is one sample.
    #[default]
    Tokens,
    /// Each prompt contributes its token-mean as a single sample.
    PromptMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "A: Scalar")]
pub struct ActivationStats<A> {
    pub layer: usize,
    pub site: Site,
    pub task_id: String,
    n: u64,
    n_prompts: u64,
    sum: Vec<A>,
    sum_sq: Vec<A>,
    /// Σ (x − mean)², kept alongside `sum_sq` for a cancellation-free variance.
    m2: Vec<A>,
}

impl<A: Scalar> ActivationStats<A> {
    pub fn empty(layer: usize, site: Site, task_id: impl Into<String>, width: usize) -> Self {
        Self {
            layer,
            site,
            task_id: task_id.into(),
            n: 0,
            n_prompts: 0,
            sum: vec![A::zero(); width],
            sum_sq: vec![A::zero(); width],
            m2: vec![A::zero(); width],
        }
    }

    pub fn width(&self) -> usize {
        self.sum.len()
    }

    /// Number of pooled samples.
    pub fn n(&self) -> u64 {
        self.n
    }

    /// Number of prompts that contributed samples.
    pub fn n_prompts(&self) -> u64 {
        self.n_prompts
    }

    pub fn sum(&self) -> &[A] {
        &self.sum
    }

    pub fn sum_sq(&self) -> &[A] {
        &self.sum_sq
    }

    /// Adds the rows of `samples` (`[n, width]`) as one prompt.
    pub fn add_prompt<F: Scalar>(&mut self, samples: &Array2<F>) -> Result<()> {
        if samples.ncols() != self.width() {
            return Err(shape(format!(
                "samples of width {} for statistics of width {}",
                samples.ncols(),
                self.width()
            )));
        }
        if samples.nrows() == 0 {
            return Ok(());
        }
        let mut batch = Self::empty(self.layer, self.site, self.task_id.clone(), self.width());
        batch.n = samples.nrows() as u64;
        batch.n_prompts = 1;
        let nb = A::of(batch.n as f64);
        for (j, col) in samples.axis_iter(Axis(1)).enumerate() {
            let (mut s, mut sq) = (A::zero(), A::zero());
            for &v in col {
                let v = A::of(v.as_f64());
                s += v;
                sq += v * v;
            }
            let mean = s / nb;
            let m2 = col
                .iter()
                .map(|&v| {
                    let d = A::of(v.as_f64()) - mean;
                    d * d
                })
                .sum();
            batch.sum[j] = s;
            batch.sum_sq[j] = sq;
            batch.m2[j] = m2;
        }
        self.absorb(&batch);
        Ok(())
    }

    fn absorb(&mut self, other: &Self) {
        if other.n == 0 {
            self.n_prompts += other.n_prompts;
            return;
        }
        if self.n == 0 {
            self.n = other.n;
            self.n_prompts += other.n_prompts;
            self.sum.clone_from(&other.sum);
            self.sum_sq.clone_from(&other.sum_sq);
            self.m2.clone_from(&other.m2);
            return;
        }
        let (na, nb) = (A::of(self.n as f64), A::of(other.n as f64));
        let n = na + nb;
        for j in 0..self.width() {
            let delta = other.sum[j] / nb - self.sum[j] / na;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
            self.sum[j] += other.sum[j];
            self.sum_sq[j] += other.sum_sq[j];
        }
        self.n += other.n;
        self.n_prompts += other.n_prompts;
    }

    /// Statistics of the union of both sample sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.layer != other.layer
            || self.site != other.site
            || self.task_id != other.task_id
            || self.width() != other.width()
        {
            return Err(invalid(format!(
                "cannot merge statistics of ({}, {}, {:?}, C={}) with ({}, {}, {:?}, C={})",
                self.layer,
                self.site,
                self.task_id,
                self.width(),
                other.layer,
                other.site,
                other.task_id,
                other.width()
            )));
        }
        let mut out = self.clone();
        out.absorb(other);
        Ok(out)
    }

    fn per_dim(&self, f: impl Fn(usize) -> A) -> Array1<A> {
        (0..self.width()).map(f).collect()
    }

    pub fn mean(&self) -> Array1<A> {
        let n = A::of(self.n.max(1) as f64);
        self.per_dim(|j| self.sum[j] / n)
    }

    /// Population variance (divides by the sample count).
    pub fn variance(&self) -> Array1<A> {
        let n = A::of(self.n.max(1) as f64);
        self.per_dim(|j| (self.m2[j] / n).max(A::zero()))
    }

    /// ℓ2 norm of each dimension over all pooled samples.
    pub fn raw_l2(&self) -> Array1<A> {
        self.per_dim(|j| self.sum_sq[j].sqrt())
    }

    /// Raw ℓ2 norm divided by the prompt count.
    pub fn normalized_l2(&self) -> Array1<A> {
        let n = A::of(self.n_prompts.max(1) as f64);
        self.per_dim(|j| self.sum_sq[j].sqrt() / n)
    }

    /// Raw ℓ2 norm divided by the pooled sample count.
    pub fn per_token_l2(&self) -> Array1<A> {
        let n = A::of(self.n.max(1) as f64);
        self.per_dim(|j| self.sum_sq[j].sqrt() / n)
    }
}

/// Site activations of one layer from a trace.
pub fn site_activations<F>(trace: &ForwardTrace<F>, layer: usize, site: Site) -> &Array2<F> {
    match site {
        Site::Attn => &trace.layers[layer].attn,
        Site::Mlp => &trace.layers[layer].mlp,
    }
}

/// Statistics for every `(layer, site)` of the model over one corpus, in
/// `(layer, site)` order.
pub fn collect<F: Scalar, A: Scalar>(
    model: &TinyModel<F>,
    corpus: &TaskCorpus,
    pooling: Pooling,
) -> Result<Vec<ActivationStats<A>>> {
    if corpus.is_empty() {
        return Err(invalid("empty corpus"));
    }
    let mut out: Vec<ActivationStats<A>> = Vec::with_capacity(2 * model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        out.push(ActivationStats::empty(l, Site::Attn, corpus.task_id(), layer.attn_width()));
        out.push(ActivationStats::empty(l, Site::Mlp, corpus.task_id(), layer.d_ff()));
    }
    for tokens in corpus.token_sequences() {
        let tokens = &tokens[..tokens.len().min(model.config.max_seq)];
        let (_, trace) = model.forward_with_taps(tokens)?;
        for stats in &mut out {
            let acts = site_activations(&trace, stats.layer, stats.site);
            match pooling {
                Pooling::Tokens => stats.add_prompt(acts)?,
                Pooling::PromptMean => {
                    let mean = acts.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
                    stats.add_prompt(&mean)?
                }
            }
        }
    }
    Ok(out)
}

/// [`collect`] with prompts sharded over `workers` threads and merged.
pub fn collect_parallel<F: Scalar, A: Scalar>(
    model: &TinyModel<F>,
    corpus: &TaskCorpus,
    pooling: Pooling,
    workers: usize,
) -> Result<Vec<ActivationStats<A>>> {
    let workers = workers.clamp(1, corpus.len().max(1));
    if workers == 1 {
        return collect(model, corpus, pooling);
    }
    let chunk = corpus.len().div_ceil(workers);
    let shards: Vec<TaskCorpus> = (0..corpus.len())
        .collect::<Vec<_>>()
        .chunks(chunk)
        .map(|idx| corpus.subset(idx))
        .collect::<Result<_>>()?;
    let parts: Vec<Result<Vec<ActivationStats<A>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| scope.spawn(move || collect(model, shard, pooling)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut parts = parts.into_iter();
    let mut acc = parts.next().expect("at least one shard")?;
    for part in parts {
        for (a, b) in acc.iter_mut().zip(part?) {
            *a = a.merge(&b)?;
        }
    }
    Ok(acc)
}

// ── Archive ───────────────────────────────────────────────────────────────

pub type StatsKey = (usize, Site, String);

/// Statistics of several tasks gathered from one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsArchive {
    pub version: u32,
    pub model_fingerprint: String,
    pub tokenizer_fingerprint: String,
    pub pooling: Pooling,
    entries: Vec<ActivationStats<f64>>,
}

impl StatsArchive {
    pub const VERSION: u32 = 1;

    pub fn new(
        model_fingerprint: impl Into<String>,
        tokenizer_fingerprint: impl Into<String>,
        pooling: Pooling,
    ) -> Self {
        Self {
            version: Self::VERSION,
            model_fingerprint: model_fingerprint.into(),
            tokenizer_fingerprint: tokenizer_fingerprint.into(),
            pooling,
            entries: Vec::new(),
        }
    }

    /// Collects every corpus from `model` into a new archive.
    pub fn build<F: Scalar>(
        model: &TinyModel<F>,
        corpora: &Corpora,
        tokenizer_fingerprint: &str,
        pooling: Pooling,
    ) -> Result<Self> {
        let mut archive = Self::new(model.fingerprint(), tokenizer_fingerprint, pooling);
        for corpus in corpora.values() {
            for stats in collect(model, corpus, pooling)? {
                archive.insert(stats);
            }
        }
        Ok(archive)
    }

    /// Inserts, merging with an existing entry under the same key.
    pub fn insert(&mut self, stats: ActivationStats<f64>) {
        match self.entries.iter_mut().find(|e| {
            e.layer == stats.layer && e.site == stats.site && e.task_id == stats.task_id
        }) {
            Some(existing) => existing.absorb(&stats),
            None => {
                self.entries.push(stats);
                self.entries
                    .sort_by(|a, b| (&a.task_id, a.layer, a.site).cmp(&(&b.task_id, b.layer, b.site)));
            }
        }
    }

    pub fn get(&self, layer: usize, site: Site, task: &str) -> Result<&ActivationStats<f64>> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.site == site && e.task_id == task)
            .ok_or_else(|| Error::Missing(format!("statistics for ({layer}, {site}, {task:?})")))
    }

    pub fn entries(&self) -> &[ActivationStats<f64>] {
        &self.entries
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut tasks: Vec<String> = self.entries.iter().map(|e| e.task_id.clone()).collect();
        tasks.dedup();
        tasks.sort();
        tasks.dedup();
        tasks
    }

    /// Sorted `(layer, site)` pairs present for `task`.
    pub fn sites(&self, task: &str) -> Vec<(usize, Site)> {
        self.entries
            .iter()
            .filter(|e| e.task_id == task)
            .map(|e| (e.layer, e.site))
            .collect()
    }

    pub fn check_model<F: Scalar>(&self, model: &TinyModel<F>) -> Result<()> {
        fingerprint::check("model", &self.model_fingerprint, &model.fingerprint())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::fingerprint_json(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive: Self = serde_json::from_slice(&fs::read(path.as_ref())?)?;
        if archive.version != Self::VERSION {
            return Err(Error::Format(format!("stats archive version {}", archive.version)));
        }
        Ok(archive)
    }
}

// ── Heatmap ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRow {
    pub layer: usize,
    pub site: Site,
    pub task: String,
    pub values: Vec<f64>,
}

/// Normalized-ℓ2 profiles, min-max scaled to `[0, 1]` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: Vec<HeatmapRow>,
}

fn min_max_scale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn export_heatmap(archive: &StatsArchive, tasks: &[&str]) -> Result<Heatmap> {
    let known = archive.tasks();
    let mut rows = Vec::new();
    for &task in tasks {
        if !known.iter().any(|t| t == task) {
            return Err(Error::Missing(format!("task {task:?} in statistics archive")));
        }
        for (layer, site) in archive.sites(task) {
            let stats = archive.get(layer, site, task)?;
            rows.push(HeatmapRow {
                layer,
                site,
                task: task.to_string(),
                values: min_max_scale(&stats.normalized_l2().to_vec()),
            });
        }
    }
    Ok(Heatmap { rows })
}

impl Heatmap {
    /// CSV with columns `layer,site,task,0,1,…`; short rows are padded.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let width = self.rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("layer,site,task");
        for j in 0..width {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{},{}", row.layer, row.site, row.task));
            for j in 0..width {
                match row.values.get(j) {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// All rows of `task`, concatenated in `(layer, site)` order.
    pub fn profile(&self, task: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.task == task)
            .flat_map(|r| r.values.iter().copied())
            .collect()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ── Hidden-state projection ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub task: String,
    pub x: f64,
    pub y: f64,
}

/// Leading eigenvectors of a symmetric matrix by power iteration with
/// deflation. Each vector's largest-magnitude entry is made positive.
pub fn top_eigenvectors(cov: &Array2<f64>, k: usize, seed: u64) -> Vec<Array1<f64>> {
    let d = cov.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = cov.clone();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Array1<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        v /= v.dot(&v).sqrt();
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = work.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                break;
            }
            let next = &w / norm;
            let converged = (&next - &v).iter().all(|x| x.abs() < 1e-12)
                || (&next + &v).iter().all(|x| x.abs() < 1e-12);
            v = next;
            lambda = norm;
            if converged {
                break;
            }
        }
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        let outer = v
            .view()
            .insert_axis(Axis(1))
            .dot(&v.view().insert_axis(Axis(0)));
        work = work - outer * lambda;
        out.push(v);
    }
    out
}

/// Mean-pooled residual stream after block `layer` for every prompt,
/// projected on its top two principal components.
pub fn project_hidden_states<F: Scalar>(
    model: &TinyModel<F>,
    corpora: &Corpora,
    layer: usize,
    seed: u64,
) -> Result<Vec<ProjectedPoint>> {
    if layer >= model.layers.len() {
        return Err(invalid(format!("layer {layer} out of range")));
    }
    let mut labels = Vec::new();
    let mut rows: Vec<Array1<f64>> = Vec::new();
    for corpus in corpora.values() {
        for tokens in corpus.token_sequences() {
            let tokens = &tokens[..tokens.len().min(model.config.max_seq)];
            let (_, trace) = model.forward_with_taps(tokens)?;
            let pooled = trace.layers[layer].residual.mean_axis(Axis(0)).expect("nonempty");
            rows.push(pooled.mapv(|v| v.as_f64()));
            labels.push(corpus.task_id().to_string());
        }
    }
    if rows.len() < 3 {
        return Err(invalid("projection needs at least three prompts"));
    }
    let d = rows[0].len();
    let mut data = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        data.row_mut(i).assign(r);
    }
    let mean = data.mean_axis(Axis(0)).expect("nonempty");
    let centered = &data - &mean;
    let cov = centered.t().dot(&centered) / rows.len() as f64;
    let pcs = top_eigenvectors(&cov, 2, seed);
    let xs = centered.dot(&pcs[0]);
    let ys = centered.dot(&pcs[1]);
    Ok(labels
        .into_iter()
        .zip(xs.iter().zip(ys.iter()))
        .map(|(task, (&x, &y))| ProjectedPoint { task, x, y })
        .collect())
}

/// Smallest centroid distance between tasks and the mean distance of a
/// point to its own task centroid.
pub fn cluster_separation(points: &[ProjectedPoint]) -> (f64, f64) {
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points {
        groups.entry(&p.task).or_default().push((p.x, p.y));
    }
    let centroids: Vec<(f64, f64)> = groups
        .values()
        .map(|g| {
            let n = g.len() as f64;
            (g.iter().map(|p| p.0).sum::<f64>() / n, g.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect();
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let mut min_between = f64::INFINITY;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            min_between = min_between.min(dist(centroids[i], centroids[j]));
        }
    }
    let spread: f64 = groups
        .values()
        .zip(&centroids)
        .flat_map(|(g, &c)| g.iter().map(move |&p| dist(p, c)))
        .sum::<f64>()
        / points.len() as f64;
    (min_between, spread)
}

pub fn projection_csv(points: &[ProjectedPoint], comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str("task,x,y\n");
    for p in points {
        out.push_str(&format!("{},{:.6},{:.6}\n", p.task, p.x, p.y));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SynthSpec, Tokenizer};
    use crate::model::ModelConfig;
    use ndarray::array;

    fn stats_of(rows: &Array2<f64>) -> ActivationStats<f64> {
        let mut s = ActivationStats::empty(0, Site::Mlp, "t", rows.ncols());
        s.add_prompt(rows).unwrap();
        s
    }

    #[test]
    fn hand_computed_moments() {
        let s = stats_of(&array![[1.0], [3.0]]);
        assert_eq!(s.mean()[0], 2.0);
        assert!((s.variance()[0] - 1.0).abs() < 1e-12);
        assert!((s.raw_l2()[0] - 10f64.sqrt()).abs() < 1e-12);
        assert!((s.normalized_l2()[0] - 10f64.sqrt()).abs() < 1e-12);

        let zero = stats_of(&Array2::zeros((4, 3)));
        assert!(zero.mean().iter().chain(zero.variance().iter()).chain(zero.raw_l2().iter()).all(|&v| v == 0.0));

        let constant = stats_of(&Array2::from_elem((5, 2), 2.5));
        assert!(constant.variance().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_identity_and_key_mismatch() {
        let x = stats_of(&array![[1.0, -2.0], [0.5, 4.0]]);
        let e = ActivationStats::empty(0, Site::Mlp, "t", 2);
        assert_eq!(x.merge(&e).unwrap(), x);
        assert_eq!(e.merge(&x).unwrap(), x);
        let other = ActivationStats::<f64>::empty(1, Site::Mlp, "t", 2);
        assert!(x.merge(&other).is_err());
        let other = ActivationStats::<f64>::empty(0, Site::Mlp, "u", 2);
        assert!(x.merge(&other).is_err());
    }

    #[test]
    fn split_collection_equals_whole() {
        let config = ModelConfig::new(2, 16, 2, 24, 256, 64).unwrap();
        let model = TinyModel::<f32>::init_random(config, 2).unwrap();
        let corpora = crate::corpus::synth_tasks(
            &SynthSpec::standard(2).with_records(10),
            1,
            &Tokenizer::byte_level(),
        )
        .unwrap();
        let corpus = &corpora["task0"];
        let whole: Vec<ActivationStats<f64>> = collect(&model, corpus, Pooling::Tokens).unwrap();
        let sharded: Vec<ActivationStats<f64>> =
            collect_parallel(&model, corpus, Pooling::Tokens, 3).unwrap();
        for (a, b) in whole.iter().zip(&sharded) {
            assert_eq!(a.n(), b.n());
            assert_eq!(a.n_prompts(), 10);
            for (x, y) in a.variance().iter().zip(b.variance().iter()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-12), "{x} vs {y}");
            }
        }
        let pm: Vec<ActivationStats<f64>> = collect(&model, corpus, Pooling::PromptMean).unwrap();
        assert_eq!(pm[0].n(), 10);
    }

    #[test]
    fn heatmap_scaling_and_unknown_task() {
        assert_eq!(min_max_scale(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
        assert_eq!(min_max_scale(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);

        let mut archive = StatsArchive::new("m", "t", Pooling::Tokens);
        archive.insert(stats_of(&array![[1.0, 2.0, 3.0]]));
        let hm = export_heatmap(&archive, &["t"]).unwrap();
        assert_eq!(hm.rows.len(), 1);
        let csv = hm.to_csv(Some("model=m"));
        assert!(csv.starts_with("# model=m\nlayer,site,task,0,1,2\n0,mlp,t,0.000000,0.500000,1.000000"));
        assert!(export_heatmap(&archive, &["nope"]).is_err());
    }

    #[test]
    fn power_iteration_finds_principal_axes() {
        let cov = array![[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.25]];
        let v = top_eigenvectors(&cov, 2, 3);
        assert!((v[0][0] - 1.0).abs() < 1e-9);
        assert!((v[1][1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_counts_and_duplication_invariance() {
        let config = ModelConfig::new(2, 16, 2, 24, 256, 64).unwrap();
        let model = TinyModel::<f32>::init_random(config, 2).unwrap();
        let tok = Tokenizer::byte_level();
        let corpora =
            crate::corpus::synth_tasks(&SynthSpec::standard(2).with_records(6), 1, &tok).unwrap();
        let points = project_hidden_states(&model, &corpora, 1, 0).unwrap();
        assert_eq!(points.len(), 12);

        let doubled: Corpora = corpora
            .iter()
            .map(|(k, c)| {
                let mut prompts = c.prompts().to_vec();
                prompts.extend_from_slice(c.prompts());
                (k.clone(), TaskCorpus::from_prompts(k.clone(), prompts, &tok).unwrap())
            })
            .collect();
        let again = project_hidden_states(&model, &doubled, 1, 0).unwrap();
        // each task's prompts appear twice in a row
        let firsts = again.chunks(12).flat_map(|c| &c[..6]);
        for (p, q) in points.iter().zip(firsts) {
            assert_eq!(p.task, q.task);
            assert!((p.x.abs() - q.x.abs()).abs() < 1e-6);
            assert!((p.y.abs() - q.y.abs()).abs() < 1e-6);
        }

        let one = Corpora::from([("a".into(), corpora["task0"].subset(&[0, 1]).unwrap())]);
        assert!(project_hidden_states(&model, &one, 0, 0).is_err());
        assert!(project_hidden_states(&model, &corpora, 2, 0).is_err());
    }
}
