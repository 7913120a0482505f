//! Routes a prompt to a task: mean-pooled token embeddings followed by one
//! linear layer and a softmax.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpora;
use crate::error::{invalid, shape, Error, Result};
use crate::fingerprint;
use crate::model::TinyModel;
use crate::scalar::Scalar;

/// Mean of the embedding rows of `tokens`.
pub fn embed<F: Scalar, A: Scalar>(model: &TinyModel<F>, tokens: &[u32]) -> Result<Array1<A>> {
    if tokens.is_empty() {
        return Err(invalid("cannot embed an empty sequence"));
    }
    let vocab = model.config.vocab;
    if let Some(&token) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { token, vocab });
    }
    let mut acc = Array1::<A>::zeros(model.config.d_model);
    for &t in tokens {
        for (a, &e) in acc.iter_mut().zip(model.embed.row(t as usize)) {
            *a += A::of(e.as_f64());
        }
    }
    Ok(acc / A::of(tokens.len() as f64))
}

fn softmax<A: Scalar>(logits: &Array1<A>) -> Array1<A> {
    let max = logits.iter().copied().fold(A::neg_infinity(), A::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Std of the Gaussian initial weights; zero starts from all-zero weights.
    pub init_scale: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.1,
            seed: 0,
            init_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskClassifier<A> {
    /// `d_model × K`.
    pub weight: Array2<A>,
    pub bias: Array1<A>,
    pub labels: Vec<String>,
    /// Checkpoint the embeddings were read from.
    #[serde(default)]
    pub model_fingerprint: Option<String>,
}

/// Embeddings and label indices of every prompt in `corpora`, in corpus
/// order.
fn design<F: Scalar, A: Scalar>(
    model: &TinyModel<F>,
    corpora: &Corpora,
    labels: &[String],
) -> Result<(Array2<A>, Vec<usize>)> {
    let n: usize = corpora.values().map(|c| c.len()).sum();
    let mut x = Array2::<A>::zeros((n, model.config.d_model));
    let mut y = Vec::with_capacity(n);
    let mut row = 0;
    for (task, corpus) in corpora {
        let class = labels
            .iter()
            .position(|l| l == task)
            .ok_or_else(|| invalid(format!("task {task} is not a classifier label")))?;
        for tokens in corpus.token_sequences() {
            x.row_mut(row).assign(&embed::<F, A>(model, tokens)?);
            y.push(class);
            row += 1;
        }
    }
    Ok((x, y))
}

impl<A: Scalar> TaskClassifier<A> {
    /// Multinomial logistic regression by full-batch gradient descent on
    /// the mean cross-entropy.
    pub fn fit<F: Scalar>(model: &TinyModel<F>, corpora: &Corpora, config: &FitConfig) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};

        if corpora.len() < 2 {
            return Err(invalid("a classifier needs at least two tasks"));
        }
        if let Some((task, _)) = corpora.iter().find(|(_, c)| c.len() < 2) {
            return Err(invalid(format!("task {task} has fewer than two prompts")));
        }
        let labels: Vec<String> = corpora.keys().cloned().collect();
        let (x, y) = design::<F, A>(model, corpora, &labels)?;
        let (n, d, k) = (x.nrows(), x.ncols(), labels.len());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let mut weight = Array2::<A>::zeros((d, k));
        if config.init_scale > 0.0 {
            weight.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                A::of(z * config.init_scale)
            });
        }
        let mut bias = Array1::<A>::zeros(k);
        let lr = A::of(config.lr);
        let inv_n = A::of(1.0 / n as f64);

        for epoch in 0..config.epochs {
            let logits = x.dot(&weight) + &bias;
            let mut grad = Array2::<A>::zeros((n, k));
            let mut loss = 0.0;
            for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
                let p = softmax(&row.to_owned());
                loss -= p[y[i]].as_f64().max(f64::MIN_POSITIVE).ln();
                let mut g = grad.row_mut(i);
                g.assign(&p);
                g[y[i]] -= A::one();
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("classifier loss diverged at epoch {epoch}")));
            }
            grad *= inv_n;
            let gw = x.t().dot(&grad);
            let gb = grad.sum_axis(Axis(0));
            weight.scaled_add(-lr, &gw);
            bias.scaled_add(-lr, &gb);
        }
        let clf = Self {
            weight,
            bias,
            labels,
            model_fingerprint: Some(model.fingerprint()),
        };
        clf.validate()?;
        Ok(clf)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.labels.len();
        if k < 2 || self.weight.ncols() != k || self.bias.len() != k {
            return Err(shape("classifier needs at least two labels matching its weights"));
        }
        if !self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric("classifier weights are not finite".into()));
        }
        Ok(())
    }

    pub fn logits(&self, features: &Array1<A>) -> Array1<A> {
        features.dot(&self.weight) + &self.bias
    }

    /// Predicted label index (first maximum on ties) and class probabilities.
    pub fn classify<F: Scalar>(&self, model: &TinyModel<F>, tokens: &[u32]) -> Result<(usize, Array1<A>)> {
        let features = embed::<F, A>(model, tokens)?;
        if features.len() != self.weight.nrows() {
            return Err(shape(format!(
                "classifier expects width {}, model has {}",
                self.weight.nrows(),
                features.len()
            )));
        }
        let logits = self.logits(&features);
        let best = crate::model::argmax(logits.iter().copied());
        Ok((best, softmax(&logits)))
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn evaluate<F: Scalar>(&self, model: &TinyModel<F>, held_out: &Corpora) -> Result<ClassReport> {
        let mut truth = Vec::new();
        let mut predicted = Vec::new();
        for (task, corpus) in held_out {
            let class = self
                .labels
                .iter()
                .position(|l| l == task)
                .ok_or_else(|| invalid(format!("task {task} is not a classifier label")))?;
            for tokens in corpus.token_sequences() {
                truth.push(class);
                predicted.push(self.classify(model, tokens)?.0);
            }
        }
        ClassReport::from_predictions(&self.labels, &truth, &predicted)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::fingerprint_json(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let clf: Self = serde_json::from_slice(&fs::read(path.as_ref())?)?;
        clf.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(clf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: ClassMetrics,
    pub weighted_avg: ClassMetrics,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassReport {
    /// Standard counting definitions; an undefined precision or recall
    /// (empty denominator) is reported as 0.
    pub fn from_predictions(labels: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.is_empty() {
            return Err(invalid("empty held-out set"));
        }
        if truth.len() != predicted.len() {
            return Err(shape("truth and predictions differ in length"));
        }
        let k = labels.len();
        let mut tp = vec![0usize; k];
        let mut n_true = vec![0usize; k];
        let mut n_pred = vec![0usize; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(invalid("class index out of range"));
            }
            n_true[t] += 1;
            n_pred[p] += 1;
            if t == p {
                tp[t] += 1;
            }
        }
        let total = truth.len();
        let mut per_class = BTreeMap::new();
        let (mut macro_sum, mut weighted_sum) = ([0.0; 3], [0.0; 3]);
        for c in 0..k {
            let precision = ratio(tp[c], n_pred[c]);
            let recall = ratio(tp[c], n_true[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            let w = n_true[c] as f64 / total as f64;
            for (i, v) in [precision, recall, f1].into_iter().enumerate() {
                macro_sum[i] += v / k as f64;
                weighted_sum[i] += v * w;
            }
            per_class.insert(
                labels[c].clone(),
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support: n_true[c],
                },
            );
        }
        let avg = |s: [f64; 3]| ClassMetrics {
            precision: s[0],
            recall: s[1],
            f1: s[2],
            support: total,
        };
        Ok(Self {
            per_class,
            accuracy: ratio(tp.iter().sum(), total),
            macro_avg: avg(macro_sum),
            weighted_avg: avg(weighted_sum),
        })
    }

    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("class,precision,recall,f1,support\n");
        let rows = self
            .per_class
            .iter()
            .map(|(k, m)| (k.as_str(), m))
            .chain([("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)]);
        for (name, m) in rows {
            out.push_str(&format!(
                "{name},{:.6},{:.6},{:.6},{}\n",
                m.precision, m.recall, m.f1, m.support
            ));
        }
        out.push_str(&format!("accuracy,,,{:.6},{}\n", self.accuracy, self.macro_avg.support));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SynthSpec, TaskCorpus, Tokenizer};
    use crate::model::ModelConfig;

    fn model() -> TinyModel<f32> {
        TinyModel::init_random(ModelConfig::new(2, 16, 2, 24, 256, 64).unwrap(), 5).unwrap()
    }

    #[test]
    fn embedding_is_a_mean() {
        let m = model();
        let single: Array1<f64> = embed(&m, &[7]).unwrap();
        assert_eq!(single, m.embed.row(7).mapv(|v| v as f64));
        let a: Array1<f64> = embed(&m, &[1, 2, 3]).unwrap();
        let b: Array1<f64> = embed(&m, &[3, 1, 2]).unwrap();
        let c: Array1<f64> = embed(&m, &[1, 2, 3, 1, 2, 3]).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
        assert!((&a - &c).iter().all(|d| d.abs() < 1e-12));
        assert!(embed::<f32, f64>(&m, &[]).is_err());
    }

    #[test]
    fn report_counts() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let r = ClassReport::from_predictions(&labels, &[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class["a"].recall, 1.0);
        assert_eq!(r.per_class["b"].recall, 0.0);
        let macro_f1 = (r.per_class["a"].f1 + r.per_class["b"].f1) / 2.0;
        assert!((r.macro_avg.f1 - macro_f1).abs() < 1e-12);
        let perfect = ClassReport::from_predictions(&labels, &[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.weighted_avg.f1, 1.0);
        assert!(ClassReport::from_predictions(&labels, &[], &[]).is_err());
    }

    #[test]
    fn fit_separates_and_is_deterministic() {
        let m = model();
        let tok = Tokenizer::byte_level();
        let corpora = crate::corpus::synth_tasks(&SynthSpec::standard(3).with_records(20), 4, &tok).unwrap();
        let cfg = FitConfig::default();
        let a = TaskClassifier::<f64>::fit(&m, &corpora, &cfg).unwrap();
        let b = TaskClassifier::<f64>::fit(&m, &corpora, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.evaluate(&m, &corpora).unwrap().accuracy > 0.9);

        let (_, p) = a.classify(&m, &corpora["task1"].token_sequences()[0]).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-9 && p.iter().all(|&v| v >= 0.0));

        let untrained = TaskClassifier::<f64>::fit(&m, &corpora, &FitConfig { epochs: 0, ..cfg }).unwrap();
        let acc = untrained.evaluate(&m, &corpora).unwrap().accuracy;
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_corpora_give_chance() {
        let m = model();
        let tok = Tokenizer::byte_level();
        let base = &crate::corpus::synth_tasks(&SynthSpec::standard(2).with_records(10), 0, &tok).unwrap()["task0"];
        let twin = |id: &str| TaskCorpus::from_prompts(id, base.prompts().to_vec(), &tok).unwrap();
        let corpora = Corpora::from([("x".into(), twin("x")), ("y".into(), twin("y"))]);
        let clf = TaskClassifier::<f64>::fit(&m, &corpora, &FitConfig::default()).unwrap();
        assert!((clf.evaluate(&m, &corpora).unwrap().accuracy - 0.5).abs() <= 0.1);
    }

    #[test]
    fn bias_shift_keeps_prediction() {
        let m = model();
        let tok = Tokenizer::byte_level();
        let corpora = crate::corpus::synth_tasks(&SynthSpec::standard(2).with_records(8), 2, &tok).unwrap();
        let clf = TaskClassifier::<f64>::fit(&m, &corpora, &FitConfig::default()).unwrap();
        let mut shifted = clf.clone();
        shifted.bias += 12.5;
        for tokens in corpora["task0"].token_sequences() {
            assert_eq!(clf.classify(&m, tokens).unwrap().0, shifted.classify(&m, tokens).unwrap().0);
        }
    }
}
