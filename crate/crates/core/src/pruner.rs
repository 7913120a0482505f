//! Prune plans and their two realizations: zeroing weights in place, or
//! physically removing rows and columns.
//!
//! A plan removes exactly `⌊ρ·C⌋` of the lowest-scoring units of a site,
//! where units are MLP channels or whole attention heads. Equal scores are
//! broken toward the lower index, which makes plans deterministic and
//! nested in `ρ`.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::allocator::SparsitySchedule;
use crate::error::{invalid, shape, Error, Result};
use crate::fingerprint;
use crate::model::{LayerWeights, ModelConfig, TinyModel};
use crate::scalar::Scalar;
use crate::scoring::{Method, Origin, ScoreSet};
use crate::stats::Site;

/// `⌊ρ·units⌋`, tolerant of products like `0.3 × 10` landing just below
/// an integer.
pub fn pruned_count(rho: f64, units: usize) -> usize {
    let raw = (rho * units as f64 + 1e-9).floor();
    (raw.max(0.0) as usize).min(units)
}

/// Indices of the `count` lowest scores; ties prune the lower index first.
pub fn lowest_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut pruned = order[..count.min(scores.len())].to_vec();
    pruned.sort_unstable();
    pruned
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePlan {
    pub layer: usize,
    pub site: Site,
    /// Channel count (MLP) or head count (attention) before pruning.
    pub units: usize,
    /// Kept channel (MLP) or head (attention) indices, increasing.
    pub kept: Vec<usize>,
}

impl SitePlan {
    pub fn pruned(&self) -> Vec<usize> {
        let kept: BTreeSet<usize> = self.kept.iter().copied().collect();
        (0..self.units).filter(|i| !kept.contains(i)).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.kept.is_empty() {
            return Err(invalid(format!(
                "plan empties site ({}, {})",
                self.layer, self.site
            )));
        }
        if !self.kept.windows(2).all(|w| w[0] < w[1]) || self.kept[self.kept.len() - 1] >= self.units
        {
            return Err(invalid(format!(
                "kept indices of ({}, {}) are not increasing and in range",
                self.layer, self.site
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSource {
    pub method: Option<Method>,
    pub origin: Option<Origin>,
    pub schedule_fingerprint: String,
    pub scores_fingerprint: Option<String>,
    pub model_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub version: u32,
    pub n_layers: usize,
    pub d_head: usize,
    pub sites: Vec<SitePlan>,
    pub source: PlanSource,
}

impl PrunePlan {
    pub const VERSION: u32 = 1;

    /// Keeps everything.
    pub fn identity(config: &ModelConfig) -> Self {
        let mut sites = Vec::new();
        for layer in 0..config.n_layers {
            sites.push(SitePlan {
                layer,
                site: Site::Attn,
                units: config.n_heads,
                kept: (0..config.n_heads).collect(),
            });
            sites.push(SitePlan {
                layer,
                site: Site::Mlp,
                units: config.d_ff,
                kept: (0..config.d_ff).collect(),
            });
        }
        Self {
            version: Self::VERSION,
            n_layers: config.n_layers,
            d_head: config.d_head,
            sites,
            source: PlanSource {
                method: None,
                origin: None,
                schedule_fingerprint: String::new(),
                scores_fingerprint: None,
                model_fingerprint: None,
            },
        }
    }

    pub fn site(&self, layer: usize, site: Site) -> Option<&SitePlan> {
        self.sites.iter().find(|s| s.layer == layer && s.site == site)
    }

    pub fn pruned_units(&self) -> usize {
        self.sites.iter().map(|s| s.units - s.kept.len()).sum()
    }

    fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers != config.n_layers || self.d_head != config.d_head {
            return Err(shape("plan was built for a different model shape"));
        }
        for s in &self.sites {
            let expected = match s.site {
                Site::Attn => config.n_heads,
                Site::Mlp => config.d_ff,
            };
            if s.units != expected || s.layer >= config.n_layers {
                return Err(shape(format!(
                    "plan site ({}, {}) has {} units, model has {expected}",
                    s.layer, s.site, s.units
                )));
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::fingerprint_json(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let plan: Self = serde_json::from_slice(&fs::read(path.as_ref())?)?;
        if plan.version != Self::VERSION {
            return Err(Error::Format(format!("plan version {}", plan.version)));
        }
        for s in &plan.sites {
            s.validate()?;
        }
        Ok(plan)
    }
}

/// Removes the `⌊ρ_ℓ·C⌋` lowest-scoring channels (MLP) and
/// `⌊ρ_ℓ·n_heads⌋` lowest-scoring heads (attention) of every layer.
pub fn make_plan(
    scores: &ScoreSet,
    schedule: &SparsitySchedule,
    config: &ModelConfig,
) -> Result<PrunePlan> {
    if schedule.n_layers() != config.n_layers {
        return Err(shape(format!(
            "schedule has {} layers, model has {}",
            schedule.n_layers(),
            config.n_layers
        )));
    }
    let mut plan = PrunePlan::identity(config);
    let mut provenance: Option<(Method, Origin)> = None;
    for site_plan in &mut plan.sites {
        let (layer, site) = (site_plan.layer, site_plan.site);
        let s = scores
            .get(&(layer, site))
            .ok_or_else(|| Error::Missing(format!("scores for ({layer}, {site})")))?;
        let unit_scores = match site {
            Site::Mlp => &s.channel_scores,
            Site::Attn => s
                .head_scores
                .as_ref()
                .ok_or_else(|| invalid(format!("no head scores at ({layer}, {site})")))?,
        };
        if unit_scores.len() != site_plan.units {
            return Err(shape(format!(
                "{} scores for {} units at ({layer}, {site})",
                unit_scores.len(),
                site_plan.units
            )));
        }
        let count = pruned_count(schedule.rho[layer], site_plan.units);
        let pruned: BTreeSet<usize> = lowest_indices(unit_scores, count).into_iter().collect();
        site_plan.kept = (0..site_plan.units).filter(|i| !pruned.contains(i)).collect();
        if site_plan.kept.is_empty() {
            return Err(invalid(format!("plan would empty site ({layer}, {site})")));
        }
        provenance.get_or_insert((s.method, s.origin.clone()));
    }
    plan.source = PlanSource {
        method: provenance.as_ref().map(|p| p.0),
        origin: provenance.map(|p| p.1),
        schedule_fingerprint: schedule.fingerprint(),
        scores_fingerprint: None,
        model_fingerprint: None,
    };
    Ok(plan)
}

/// Zeroes the gate and up rows and the down column of MLP channel `i`.
pub fn zero_mlp_channel<F: Scalar>(layer: &mut LayerWeights<F>, i: usize) {
    layer.w_gate.row_mut(i).fill(F::zero());
    layer.w_up.row_mut(i).fill(F::zero());
    layer.w_down.column_mut(i).fill(F::zero());
}

/// Zeroes the query, key and value rows and the output columns of head `h`.
pub fn zero_head<F: Scalar>(layer: &mut LayerWeights<F>, h: usize, d_head: usize) {
    for c in h * d_head..(h + 1) * d_head {
        layer.wq.row_mut(c).fill(F::zero());
        layer.wk.row_mut(c).fill(F::zero());
        layer.wv.row_mut(c).fill(F::zero());
        layer.wo.column_mut(c).fill(F::zero());
    }
}

fn check_dense<F: Scalar>(model: &TinyModel<F>, plan: &PrunePlan) -> Result<()> {
    if !model.is_dense() {
        return Err(shape("plans apply to dense models only"));
    }
    plan.check_config(&model.config)
}

/// Zeroes every pruned channel and head; all other weights are untouched.
pub fn apply_mask<F: Scalar>(model: &TinyModel<F>, plan: &PrunePlan) -> Result<TinyModel<F>> {
    check_dense(model, plan)?;
    let mut out = model.clone();
    let d_head = model.config.d_head;
    for s in &plan.sites {
        let layer = &mut out.layers[s.layer];
        for i in s.pruned() {
            match s.site {
                Site::Mlp => zero_mlp_channel(layer, i),
                Site::Attn => zero_head(layer, i, d_head),
            }
        }
    }
    Ok(out)
}

/// A model whose pruned rows and columns have been removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel<F> {
    pub model: TinyModel<F>,
    pub plan: PrunePlan,
}

impl<F> Deref for CompactModel<F> {
    type Target = TinyModel<F>;

    fn deref(&self) -> &TinyModel<F> {
        &self.model
    }
}

pub fn compact<F: Scalar>(model: &TinyModel<F>, plan: &PrunePlan) -> Result<CompactModel<F>> {
    check_dense(model, plan)?;
    let mut out = model.clone();
    let d_head = model.config.d_head;
    for s in &plan.sites {
        let layer = &mut out.layers[s.layer];
        match s.site {
            Site::Mlp => {
                layer.w_gate = layer.w_gate.select(Axis(0), &s.kept);
                layer.w_up = layer.w_up.select(Axis(0), &s.kept);
                layer.w_down = layer.w_down.select(Axis(1), &s.kept);
            }
            Site::Attn => {
                let cols: Vec<usize> = s
                    .kept
                    .iter()
                    .flat_map(|&h| h * d_head..(h + 1) * d_head)
                    .collect();
                layer.wq = layer.wq.select(Axis(0), &cols);
                layer.wk = layer.wk.select(Axis(0), &cols);
                layer.wv = layer.wv.select(Axis(0), &cols);
                layer.wo = layer.wo.select(Axis(1), &cols);
            }
        }
    }
    Ok(CompactModel {
        model: out,
        plan: plan.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteOverlap {
    pub layer: usize,
    pub site: Site,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiff {
    pub sites: Vec<SiteOverlap>,
    pub mean_jaccard: f64,
}

/// Jaccard overlap of the pruned sets of two plans, per site. Two empty
/// pruned sets count as identical.
pub fn plan_diff(a: &PrunePlan, b: &PrunePlan) -> Result<PlanDiff> {
    if a.n_layers != b.n_layers || a.d_head != b.d_head || a.sites.len() != b.sites.len() {
        return Err(shape("plans describe different models"));
    }
    let mut sites = Vec::with_capacity(a.sites.len());
    for sa in &a.sites {
        let sb = b
            .site(sa.layer, sa.site)
            .filter(|sb| sb.units == sa.units)
            .ok_or_else(|| shape(format!("site ({}, {}) differs between plans", sa.layer, sa.site)))?;
        let pa: BTreeSet<usize> = sa.pruned().into_iter().collect();
        let pb: BTreeSet<usize> = sb.pruned().into_iter().collect();
        let union = pa.union(&pb).count();
        let jaccard = if union == 0 {
            1.0
        } else {
            pa.intersection(&pb).count() as f64 / union as f64
        };
        sites.push(SiteOverlap {
            layer: sa.layer,
            site: sa.site,
            jaccard,
        });
    }
    let mean_jaccard = sites.iter().map(|s| s.jaccard).sum::<f64>() / sites.len().max(1) as f64;
    Ok(PlanDiff { sites, mean_jaccard })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ImportanceScores;

    fn config() -> ModelConfig {
        ModelConfig::new(2, 16, 4, 10, 32, 16).unwrap()
    }

    fn flat_scores(config: &ModelConfig, mlp: Vec<f64>, heads: Vec<f64>) -> ScoreSet {
        let mut set = ScoreSet::new();
        for layer in 0..config.n_layers {
            for site in Site::ALL {
                let (channel_scores, head_scores) = match site {
                    Site::Mlp => (mlp.clone(), None),
                    Site::Attn => (vec![0.0; config.d_model], Some(heads.clone())),
                };
                set.insert(
                    (layer, site),
                    ImportanceScores {
                        layer,
                        site,
                        origin: Origin::General,
                        method: Method::Fluctuation,
                        channel_scores,
                        head_scores,
                    },
                );
            }
        }
        set
    }

    #[test]
    fn sort_and_take() {
        assert_eq!(lowest_indices(&[5.0, 1.0, 3.0, 2.0, 4.0], pruned_count(0.4, 5)), vec![1, 3]);
        assert_eq!(lowest_indices(&[1.0; 4], pruned_count(0.5, 4)), vec![0, 1]);
        assert_eq!(lowest_indices(&[1.0, 2.0], 0), Vec::<usize>::new());
    }

    #[test]
    fn floor_counts() {
        for i in 0..10 {
            for units in [1usize, 4, 5, 7, 10, 100, 1000] {
                assert_eq!(pruned_count(i as f64 / 10.0, units), i * units / 10);
            }
        }
    }

    #[test]
    fn plan_counts_and_identity() {
        let c = config();
        let scores = flat_scores(&c, (0..10).map(|i| i as f64).collect(), vec![4.0, 3.0, 2.0, 1.0]);
        let zero = SparsitySchedule::uniform(2, 0.0).unwrap();
        let plan = make_plan(&scores, &zero, &c).unwrap();
        assert_eq!(plan.sites, PrunePlan::identity(&c).sites);

        let half = SparsitySchedule::uniform(2, 0.5).unwrap();
        let plan = make_plan(&scores, &half, &c).unwrap();
        assert_eq!(plan.site(0, Site::Mlp).unwrap().kept, vec![5, 6, 7, 8, 9]);
        assert_eq!(plan.site(1, Site::Attn).unwrap().kept, vec![0, 1]);
        assert_eq!(plan.source.origin, Some(Origin::General));
    }

    #[test]
    fn mask_and_compact_shapes() {
        let c = config();
        let model = TinyModel::<f32>::init_random(c.clone(), 3).unwrap();
        let id = PrunePlan::identity(&c);
        assert_eq!(apply_mask(&model, &id).unwrap(), model);
        assert_eq!(compact(&model, &id).unwrap().param_count(), model.param_count());

        let scores = flat_scores(&c, (0..10).map(|i| (i * 7 % 10) as f64).collect(), vec![1.0, 0.0, 3.0, 2.0]);
        let plan = make_plan(&scores, &SparsitySchedule::uniform(2, 0.5).unwrap(), &c).unwrap();
        let masked = apply_mask(&model, &plan).unwrap();
        assert_eq!(apply_mask(&masked, &plan).unwrap(), masked);
        let small = compact(&model, &plan).unwrap();
        assert_eq!(small.layers[0].d_ff(), 5);
        assert_eq!(small.layers[0].n_heads(c.d_head), 2);
        let removed = 2 * (5 * 3 * c.d_model + 2 * 4 * c.d_head * c.d_model);
        assert_eq!(small.param_count(), model.param_count() - removed);
        assert!(compact(&small.model, &plan).is_err());
    }

    #[test]
    fn diff_of_plans() {
        let c = config();
        let a = make_plan(
            &flat_scores(&c, (0..10).map(|i| i as f64).collect(), vec![1.0, 2.0, 3.0, 4.0]),
            &SparsitySchedule::uniform(2, 0.5).unwrap(),
            &c,
        )
        .unwrap();
        let b = make_plan(
            &flat_scores(&c, (0..10).map(|i| -(i as f64)).collect(), vec![4.0, 3.0, 2.0, 1.0]),
            &SparsitySchedule::uniform(2, 0.5).unwrap(),
            &c,
        )
        .unwrap();
        assert_eq!(plan_diff(&a, &a).unwrap().mean_jaccard, 1.0);
        assert_eq!(plan_diff(&a, &b).unwrap().mean_jaccard, 0.0);
        let id = PrunePlan::identity(&c);
        assert_eq!(plan_diff(&id, &id).unwrap().mean_jaccard, 1.0);
    }
}
