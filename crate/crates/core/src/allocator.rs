//! Layer-wise sparsity: a logistic curve over normalized depth whose
//! amplitude is searched so that the layer average hits a global target.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fingerprint;
use crate::scalar::Scalar;

/// Bisection steps of the amplitude search.
const BISECTION_STEPS: usize = 60;

/// `lambda / (1 + exp(-k (x - x0)))` with `x = layer / (n_layers - 1)`
/// (layers counted from 0).
pub fn logistic_rho<A: Scalar>(layer: usize, n_layers: usize, lambda: A, k: A, x0: A) -> A {
    let x = A::of(layer as f64) / A::of((n_layers - 1) as f64);
    lambda / (A::one() + (-k * (x - x0)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub k: f64,
    pub x0: f64,
    /// Number of final layers kept dense.
    pub n_frozen: usize,
    /// Per-layer ceiling on the sparsity ratio.
    pub rho_cap: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            k: 1.0,
            x0: 0.3,
            n_frozen: 1,
            rho_cap: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Logistic { lambda: f64, params: LogisticParams },
    Uniform,
    SingleLayer { layer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    /// Sparsity ratio of each layer.
    pub rho: Vec<f64>,
    /// Requested layer-average sparsity.
    pub target: f64,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

fn check_ratio(name: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(invalid(format!("{name} {v} must lie in [0, 1)")));
    }
    Ok(())
}

/// Logistic schedule over the first `n_layers - n_frozen` layers, zero on
/// the frozen tail, with mean ratio `target` over all layers.
pub fn solve_schedule(n_layers: usize, target: f64, params: LogisticParams) -> Result<SparsitySchedule> {
    if n_layers < 2 {
        return Err(invalid("a schedule needs at least two layers"));
    }
    if !(params.k.is_finite() && params.x0.is_finite()) {
        return Err(invalid("k and x0 must be finite"));
    }
    if !(params.rho_cap > 0.0 && params.rho_cap < 1.0) {
        return Err(invalid(format!("rho_cap {} must lie in (0, 1)", params.rho_cap)));
    }
    if params.n_frozen > n_layers {
        return Err(invalid(format!(
            "cannot freeze {} of {n_layers} layers",
            params.n_frozen
        )));
    }
    if !(target >= 0.0) {
        return Err(invalid(format!("target sparsity {target} is negative")));
    }
    let active = n_layers - params.n_frozen;
    let max_mean = params.rho_cap * active as f64 / n_layers as f64;
    let schedule = |lambda: f64, rho: Vec<f64>| SparsitySchedule {
        rho,
        target,
        kind: ScheduleKind::Logistic { lambda, params },
    };
    if target == 0.0 {
        return Ok(schedule(0.0, vec![0.0; n_layers]));
    }
    if target >= max_mean {
        return Err(Error::Infeasible(format!(
            "target sparsity {target} is unreachable: with {} frozen layers and a per-layer cap of {} \
             the mean cannot reach {max_mean:.6}",
            params.n_frozen, params.rho_cap
        )));
    }

    let shape: Vec<f64> = (0..active)
        .map(|l| logistic_rho(l, n_layers, 1.0, params.k, params.x0))
        .collect();
    let ratios = |lambda: f64| -> Vec<f64> {
        let mut rho: Vec<f64> = shape.iter().map(|s| (lambda * s).min(params.rho_cap)).collect();
        rho.resize(n_layers, 0.0);
        rho
    };
    let mean = |lambda: f64| ratios(lambda).iter().sum::<f64>() / n_layers as f64;

    // mean(·) is nondecreasing in lambda and saturates at max_mean once
    // every active layer hits the cap.
    let min_shape = shape.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0, params.rho_cap / min_shape);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    Ok(schedule(lambda, ratios(lambda)))
}

impl SparsitySchedule {
    /// The same ratio on every layer.
    pub fn uniform(n_layers: usize, target: f64) -> Result<Self> {
        check_ratio("target sparsity", target)?;
        Ok(Self {
            rho: vec![target; n_layers],
            target,
            kind: ScheduleKind::Uniform,
        })
    }

    /// `rho` on one layer, zero elsewhere.
    pub fn single_layer(n_layers: usize, layer: usize, rho: f64) -> Result<Self> {
        check_ratio("sparsity", rho)?;
        if layer >= n_layers {
            return Err(invalid(format!("layer {layer} out of range")));
        }
        let mut ratios = vec![0.0; n_layers];
        ratios[layer] = rho;
        Ok(Self {
            rho: ratios,
            target: rho / n_layers as f64,
            kind: ScheduleKind::SingleLayer { layer },
        })
    }

    pub fn n_layers(&self) -> usize {
        self.rho.len()
    }

    pub fn mean(&self) -> f64 {
        self.rho.iter().sum::<f64>() / self.rho.len() as f64
    }

    pub fn lambda(&self) -> Option<f64> {
        match self.kind {
            ScheduleKind::Logistic { lambda, .. } => Some(lambda),
            _ => None,
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::fingerprint_json(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = serde_json::from_slice(&fs::read(path.as_ref())?)?;
        if s.rho.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Format("schedule ratio outside [0, 1)".into()));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n_frozen: usize) -> LogisticParams {
        LogisticParams {
            n_frozen,
            ..LogisticParams::default()
        }
    }

    #[test]
    fn logistic_values() {
        assert_eq!(logistic_rho::<f64>(3, 8, 0.0, 1.0, 0.3), 0.0);
        let l0 = 1.0 / (1.0 + 0.3f64.exp());
        let l1 = 1.0 / (1.0 + (-0.7f64).exp());
        assert!((logistic_rho(0, 2, 1.0, 1.0, 0.3) - l0).abs() < 1e-15);
        assert!((logistic_rho(1, 2, 1.0, 1.0, 0.3) - l1).abs() < 1e-15);
        assert!((l0 - 0.42556).abs() < 1e-5 && (l1 - 0.66819).abs() < 1e-5);
        // steep limit
        assert!(logistic_rho::<f64>(0, 5, 0.8, 500.0, 0.3) < 1e-12);
        assert!((logistic_rho::<f64>(4, 5, 0.8, 500.0, 0.3) - 0.8).abs() < 1e-12);
        assert!((logistic_rho::<f32>(1, 2, 1.0, 1.0, 0.3) - l1 as f32).abs() < 1e-6);
    }

    #[test]
    fn two_layer_amplitude() {
        let s = solve_schedule(2, 0.5, params(0)).unwrap();
        let shape_mean: f64 = (logistic_rho(0, 2, 1.0, 1.0, 0.3) + logistic_rho(1, 2, 1.0, 1.0, 0.3)) / 2.0;
        assert!((shape_mean - 0.546872).abs() < 1e-6);
        let lambda = s.lambda().unwrap();
        assert!((lambda - 0.5 / shape_mean).abs() < 1e-9);
        assert!((lambda - 0.91428).abs() < 1e-4);
        assert!((s.mean() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_target_and_infeasible() {
        let s = solve_schedule(6, 0.0, params(1)).unwrap();
        assert_eq!(s.lambda(), Some(0.0));
        assert!(s.rho.iter().all(|&r| r == 0.0));
        assert!(solve_schedule(4, 0.0, params(4)).is_ok());
        let err = solve_schedule(4, 0.1, params(4)).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        let err = solve_schedule(4, 0.8, params(1)).unwrap_err();
        assert!(err.to_string().contains("0.7125"), "{err}");
    }

    #[test]
    fn frozen_tail_and_monotone_prefix() {
        let s = solve_schedule(12, 0.5, params(2)).unwrap();
        assert_eq!(&s.rho[10..], &[0.0, 0.0]);
        assert!(s.rho[..10].windows(2).all(|w| w[0] <= w[1]));
        assert!(s.rho.iter().all(|&r| r <= 0.95));
        assert!((s.mean() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cap_binds_but_mean_still_met() {
        let s = solve_schedule(4, 0.85, params(0)).unwrap();
        assert!(s.rho.iter().any(|&r| r == 0.95));
        assert!((s.mean() - 0.85).abs() < 1e-6);
    }

    #[test]
    fn deterministic_and_linear() {
        let a = solve_schedule(16, 0.2, params(1)).unwrap();
        let b = solve_schedule(16, 0.2, params(1)).unwrap();
        assert_eq!(a.lambda().unwrap().to_bits(), b.lambda().unwrap().to_bits());
        let c = solve_schedule(16, 0.4, params(1)).unwrap();
        let ratio = c.lambda().unwrap() / a.lambda().unwrap();
        assert!((ratio - 2.0).abs() < 2e-6, "{ratio}");
    }

    #[test]
    fn other_schedules() {
        let u = SparsitySchedule::uniform(4, 0.5).unwrap();
        assert_eq!(u.rho, vec![0.5; 4]);
        let single = SparsitySchedule::single_layer(4, 2, 0.5).unwrap();
        assert_eq!(single.rho, vec![0.0, 0.0, 0.5, 0.0]);
        assert!(SparsitySchedule::single_layer(4, 4, 0.5).is_err());
        assert!(SparsitySchedule::uniform(4, 1.0).is_err());
    }
}
