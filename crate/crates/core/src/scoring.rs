//! Channel and head importance from activation statistics and weight norms.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::fingerprint;
use crate::model::TinyModel;
use crate::scalar::Scalar;
use crate::stats::{ActivationStats, Site, StatsArchive};

/// Importance metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Activation variance × squared ℓ2 norm of the weight slice.
    #[serde(rename = "sF")]
    Fluctuation,
    /// Activation energy (sum of squares) × ℓ1 norm of the weight slice.
    #[serde(rename = "sW")]
    Wanda,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fluctuation => "sF",
            Method::Wanda => "sW",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sF" | "sf" | "s_f" => Ok(Method::Fluctuation),
            "sW" | "sw" | "s_w" => Ok(Method::Wanda),
            _ => Err(invalid(format!("unknown scoring method {s:?} (expected sF or sW)"))),
        }
    }
}

/// Where a set of scores came from: one task, or a weighted mix of tasks.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Task(String),
    General,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Task(t) => f.write_str(t),
            Origin::General => f.write_str("general"),
        }
    }
}

/// The weights that read input dimension `channel` of a site: column
/// `channel` of `wo` (attention) or of `w_down` (MLP).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSlice<A> {
    pub layer: usize,
    pub site: Site,
    pub channel: usize,
    pub w: Vec<A>,
    pub l1: A,
    pub l2sq: A,
}

impl<A: Scalar> WeightSlice<A> {
    pub fn new(layer: usize, site: Site, channel: usize, w: Vec<A>) -> Self {
        let l1 = w.iter().map(|v| v.abs()).sum();
        let l2sq = w.iter().map(|&v| v * v).sum();
        Self {
            layer,
            site,
            channel,
            w,
            l1,
            l2sq,
        }
    }
}

pub fn weight_slices<F: Scalar, A: Scalar>(
    model: &TinyModel<F>,
    layer: usize,
    site: Site,
) -> Result<Vec<WeightSlice<A>>> {
    let weights = model
        .layers
        .get(layer)
        .ok_or_else(|| invalid(format!("layer {layer} out of range")))?;
    let matrix = match site {
        Site::Attn => &weights.wo,
        Site::Mlp => &weights.w_down,
    };
    Ok(matrix
        .columns()
        .into_iter()
        .enumerate()
        .map(|(i, col)| WeightSlice::new(layer, site, i, col.iter().map(|v| A::of(v.as_f64())).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "A: Scalar")]
pub struct ImportanceScores<A> {
    pub layer: usize,
    pub site: Site,
    pub origin: Origin,
    pub method: Method,
    pub channel_scores: Vec<A>,
    /// Per-head sums of channel scores; attention sites only.
    pub head_scores: Option<Vec<A>>,
}

fn check_slices<A: Scalar>(stats: &ActivationStats<A>, slices: &[WeightSlice<A>]) -> Result<()> {
    if stats.n() == 0 {
        return Err(invalid(format!(
            "statistics for ({}, {}) hold no samples",
            stats.layer, stats.site
        )));
    }
    if slices.len() != stats.width() {
        return Err(shape(format!(
            "{} weight slices for {} channels at ({}, {})",
            slices.len(),
            stats.width(),
            stats.layer,
            stats.site
        )));
    }
    Ok(())
}

fn scores_from<A: Scalar>(
    stats: &ActivationStats<A>,
    method: Method,
    channel_scores: Vec<A>,
) -> ImportanceScores<A> {
    ImportanceScores {
        layer: stats.layer,
        site: stats.site,
        origin: Origin::Task(stats.task_id.clone()),
        method,
        channel_scores,
        head_scores: None,
    }
}

/// `var_i × ‖w_i‖₂²`
pub fn score_sf<A: Scalar>(
    stats: &ActivationStats<A>,
    slices: &[WeightSlice<A>],
) -> Result<ImportanceScores<A>> {
    check_slices(stats, slices)?;
    let var = stats.variance();
    let scores = var.iter().zip(slices).map(|(&v, s)| v * s.l2sq).collect();
    Ok(scores_from(stats, Method::Fluctuation, scores))
}

/// `‖h_i‖₂² × ‖w_i‖₁`, with `‖h_i‖₂²` the pooled sum of squares.
pub fn score_sw<A: Scalar>(
    stats: &ActivationStats<A>,
    slices: &[WeightSlice<A>],
) -> Result<ImportanceScores<A>> {
    check_slices(stats, slices)?;
    let scores = stats.sum_sq().iter().zip(slices).map(|(&e, s)| e * s.l1).collect();
    Ok(scores_from(stats, Method::Wanda, scores))
}

pub fn score<A: Scalar>(
    method: Method,
    stats: &ActivationStats<A>,
    slices: &[WeightSlice<A>],
) -> Result<ImportanceScores<A>> {
    match method {
        Method::Fluctuation => score_sf(stats, slices),
        Method::Wanda => score_sw(stats, slices),
    }
}

/// Sums channel scores over each head's contiguous block of `d_head` channels.
pub fn aggregate_heads<A: Scalar>(
    scores: &ImportanceScores<A>,
    n_heads: usize,
    d_head: usize,
) -> Result<ImportanceScores<A>> {
    if scores.site != Site::Attn {
        return Err(invalid("head aggregation applies to attention sites only"));
    }
    if scores.channel_scores.len() != n_heads * d_head {
        return Err(shape(format!(
            "{} channels cannot form {n_heads} heads of width {d_head}",
            scores.channel_scores.len()
        )));
    }
    let heads = scores
        .channel_scores
        .chunks(d_head)
        .map(|c| c.iter().copied().sum())
        .collect();
    Ok(ImportanceScores {
        head_scores: Some(heads),
        ..scores.clone()
    })
}

/// Scores of one origin for every `(layer, site)`.
pub type ScoreSet = BTreeMap<(usize, Site), ImportanceScores<f64>>;

/// Scores every `(layer, site)` of `model` from the statistics of `task`.
pub fn score_task<F: Scalar>(
    model: &TinyModel<F>,
    archive: &StatsArchive,
    task: &str,
    method: Method,
) -> Result<ScoreSet> {
    let mut out = ScoreSet::new();
    for (layer, weights) in model.layers.iter().enumerate() {
        for site in Site::ALL {
            let stats = archive.get(layer, site, task)?;
            let slices = weight_slices(model, layer, site)?;
            let mut s = score(method, stats, &slices)?;
            if site == Site::Attn {
                let d_head = model.config.d_head;
                s = aggregate_heads(&s, weights.n_heads(d_head), d_head)?;
            }
            out.insert((layer, site), s);
        }
    }
    Ok(out)
}

/// Scores for several origins and methods, keyed by `(layer, site, origin, method)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreArchive {
    pub version: u32,
    pub model_fingerprint: String,
    pub stats_fingerprint: String,
    entries: Vec<ImportanceScores<f64>>,
}

impl ScoreArchive {
    pub const VERSION: u32 = 1;

    pub fn new(model_fingerprint: impl Into<String>, stats_fingerprint: impl Into<String>) -> Self {
        Self {
            version: Self::VERSION,
            model_fingerprint: model_fingerprint.into(),
            stats_fingerprint: stats_fingerprint.into(),
            entries: Vec::new(),
        }
    }

    /// Per-task scores of every task in `stats`, for each method.
    pub fn build<F: Scalar>(
        model: &TinyModel<F>,
        stats: &StatsArchive,
        methods: &[Method],
    ) -> Result<Self> {
        stats.check_model(model)?;
        let mut archive = Self::new(model.fingerprint(), stats.fingerprint());
        for task in stats.tasks() {
            for &method in methods {
                archive.extend(score_task(model, stats, &task, method)?);
            }
        }
        Ok(archive)
    }

    pub fn extend(&mut self, set: ScoreSet) {
        for s in set.into_values() {
            self.entries.retain(|e| {
                !(e.layer == s.layer && e.site == s.site && e.origin == s.origin && e.method == s.method)
            });
            self.entries.push(s);
        }
        self.entries.sort_by(|a, b| {
            (&a.origin, a.method, a.layer, a.site).cmp(&(&b.origin, b.method, b.layer, b.site))
        });
    }

    pub fn entries(&self) -> &[ImportanceScores<f64>] {
        &self.entries
    }

    pub fn sites(&self) -> Vec<(usize, Site)> {
        let mut sites: Vec<(usize, Site)> = self.entries.iter().map(|e| (e.layer, e.site)).collect();
        sites.sort();
        sites.dedup();
        sites
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut tasks: Vec<String> = self
            .entries
            .iter()
            .filter_map(|e| match &e.origin {
                Origin::Task(t) => Some(t.clone()),
                Origin::General => None,
            })
            .collect();
        tasks.sort();
        tasks.dedup();
        tasks
    }

    pub fn get(
        &self,
        layer: usize,
        site: Site,
        origin: &Origin,
        method: Method,
    ) -> Option<&ImportanceScores<f64>> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.site == site && &e.origin == origin && e.method == method)
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
            return Err(Error::Format(format!("score archive version {}", archive.version)));
        }
        Ok(archive)
    }
}

/// The stored scores of `task` for every site.
pub fn select_expert(archive: &ScoreArchive, task: &str, method: Method) -> Result<ScoreSet> {
    let origin = Origin::Task(task.to_string());
    let sites = archive.sites();
    if sites.is_empty() {
        return Err(Error::Missing("score archive is empty".into()));
    }
    sites
        .into_iter()
        .map(|(layer, site)| {
            archive
                .get(layer, site, &origin, method)
                .cloned()
                .map(|s| ((layer, site), s))
                .ok_or_else(|| {
                    Error::Missing(format!("{method} scores of task {task:?} at ({layer}, {site})"))
                })
        })
        .collect()
}

/// Task weights: 3 for the plain-text language-modeling corpus, 2 for
/// every other task.
pub fn default_general_weights(tasks: &[String], lm_task: Option<&str>) -> BTreeMap<String, f64> {
    tasks
        .iter()
        .map(|t| (t.clone(), if Some(t.as_str()) == lm_task { 3.0 } else { 2.0 }))
        .collect()
}

/// `Σ_τ α_τ s^τ` at every site (an unnormalized weighted sum).
pub fn aggregate_general(
    archive: &ScoreArchive,
    weights: &BTreeMap<String, f64>,
    method: Method,
) -> Result<ScoreSet> {
    if weights.is_empty() {
        return Err(invalid("no task weights given"));
    }
    if let Some((t, w)) = weights.iter().find(|(_, &w)| !(w >= 0.0) || !w.is_finite()) {
        return Err(invalid(format!("weight {w} of task {t:?} is not a nonnegative number")));
    }
    if weights.values().all(|&w| w == 0.0) {
        return Err(invalid("all task weights are zero"));
    }
    let experts: Vec<(f64, ScoreSet)> = weights
        .iter()
        .map(|(t, &w)| Ok((w, select_expert(archive, t, method)?)))
        .collect::<Result<_>>()?;
    let mut out = ScoreSet::new();
    for (key, first) in &experts[0].1 {
        let mut channel = vec![0.0; first.channel_scores.len()];
        let mut heads = first.head_scores.as_ref().map(|h| vec![0.0; h.len()]);
        for (w, set) in &experts {
            let s = &set[key];
            for (acc, v) in channel.iter_mut().zip(&s.channel_scores) {
                *acc += w * v;
            }
            if let (Some(acc), Some(h)) = (heads.as_mut(), s.head_scores.as_ref()) {
                for (a, v) in acc.iter_mut().zip(h) {
                    *a += w * v;
                }
            }
        }
        out.insert(
            *key,
            ImportanceScores {
                origin: Origin::General,
                channel_scores: channel,
                head_scores: heads,
                ..first.clone()
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats(rows: ndarray::Array2<f64>) -> ActivationStats<f64> {
        let mut s = ActivationStats::empty(0, Site::Attn, "t", rows.ncols());
        s.add_prompt(&rows).unwrap();
        s
    }

    fn slice(w: Vec<f64>) -> WeightSlice<f64> {
        WeightSlice::new(0, Site::Attn, 0, w)
    }

    #[test]
    fn fluctuation_score_by_hand() {
        // samples {0, 2√2}: variance 2; slice (2, 0) has ‖w‖₂² = 4
        let s = stats(array![[0.0], [2.0 * 2f64.sqrt()]]);
        let out = score_sf(&s, &[slice(vec![2.0, 0.0])]).unwrap();
        assert!((out.channel_scores[0] - 8.0).abs() < 1e-12);

        let constant = stats(array![[3.0], [3.0]]);
        assert_eq!(score_sf(&constant, &[slice(vec![5.0])]).unwrap().channel_scores[0], 0.0);
        assert_eq!(score_sf(&s, &[slice(vec![0.0, 0.0])]).unwrap().channel_scores[0], 0.0);
    }

    #[test]
    fn wanda_score_by_hand() {
        // sum of squares 9, ‖w‖₁ = 2
        let s = stats(array![[3.0]]);
        let out = score_sw(&s, &[slice(vec![1.5, -0.5])]).unwrap();
        assert!((out.channel_scores[0] - 18.0).abs() < 1e-12);
        let dead = stats(array![[0.0], [0.0]]);
        assert_eq!(score_sw(&dead, &[slice(vec![1.0])]).unwrap().channel_scores[0], 0.0);
    }

    #[test]
    fn score_dimension_mismatch() {
        let s = stats(array![[1.0, 2.0]]);
        assert!(score_sf(&s, &[slice(vec![1.0])]).is_err());
        let empty = ActivationStats::<f64>::empty(0, Site::Mlp, "t", 1);
        assert!(score_sw(&empty, &[slice(vec![1.0])]).is_err());
    }

    #[test]
    fn head_sums() {
        let s = ImportanceScores {
            layer: 0,
            site: Site::Attn,
            origin: Origin::General,
            method: Method::Fluctuation,
            channel_scores: vec![1.0, 2.0, 0.5, 0.5],
            head_scores: None,
        };
        assert_eq!(aggregate_heads(&s, 2, 2).unwrap().head_scores.unwrap(), vec![3.0, 1.0]);
        assert_eq!(aggregate_heads(&s, 1, 4).unwrap().head_scores.unwrap(), vec![4.0]);
        let zero = ImportanceScores {
            channel_scores: vec![0.0; 4],
            ..s.clone()
        };
        assert_eq!(aggregate_heads(&zero, 2, 2).unwrap().head_scores.unwrap(), vec![0.0, 0.0]);
        let mlp = ImportanceScores {
            site: Site::Mlp,
            ..s
        };
        assert!(aggregate_heads(&mlp, 2, 2).is_err());
    }

    fn archive_with(tasks: &[(&str, Vec<f64>)]) -> ScoreArchive {
        let mut a = ScoreArchive::new("m", "s");
        for (t, scores) in tasks {
            let mut set = ScoreSet::new();
            set.insert(
                (0, Site::Mlp),
                ImportanceScores {
                    layer: 0,
                    site: Site::Mlp,
                    origin: Origin::Task(t.to_string()),
                    method: Method::Fluctuation,
                    channel_scores: scores.clone(),
                    head_scores: None,
                },
            );
            a.extend(set);
        }
        a
    }

    #[test]
    fn expert_selection() {
        let a = archive_with(&[("math", vec![1.0, 2.0]), ("qa", vec![3.0, 4.0]), ("lm", vec![5.0, 0.0])]);
        let math = select_expert(&a, "math", Method::Fluctuation).unwrap();
        assert_eq!(math[&(0, Site::Mlp)].channel_scores, vec![1.0, 2.0]);
        assert_eq!(math[&(0, Site::Mlp)].origin, Origin::Task("math".into()));
        let err = select_expert(&a, "absent", Method::Fluctuation).unwrap_err();
        assert!(err.to_string().contains("(0, mlp)"));
        assert!(select_expert(&a, "math", Method::Wanda).is_err());
    }

    #[test]
    fn general_weighted_sum() {
        let a = archive_with(&[("A", vec![1.0]), ("B", vec![2.0])]);
        let w = BTreeMap::from([("A".to_string(), 3.0), ("B".to_string(), 2.0)]);
        let g = aggregate_general(&a, &w, Method::Fluctuation).unwrap();
        assert_eq!(g[&(0, Site::Mlp)].channel_scores, vec![7.0]);
        assert_eq!(g[&(0, Site::Mlp)].origin, Origin::General);

        let one = BTreeMap::from([("A".to_string(), 1.0)]);
        assert_eq!(
            aggregate_general(&a, &one, Method::Fluctuation).unwrap()[&(0, Site::Mlp)].channel_scores,
            vec![1.0]
        );
        assert!(aggregate_general(&a, &BTreeMap::new(), Method::Fluctuation).is_err());
        let neg = BTreeMap::from([("A".to_string(), -1.0), ("B".to_string(), 2.0)]);
        assert!(aggregate_general(&a, &neg, Method::Fluctuation).is_err());
    }

    #[test]
    fn default_weights() {
        let tasks = vec!["lm".to_string(), "qa".to_string()];
        let w = default_general_weights(&tasks, Some("lm"));
        assert_eq!(w["lm"], 3.0);
        assert_eq!(w["qa"], 2.0);
    }
}
