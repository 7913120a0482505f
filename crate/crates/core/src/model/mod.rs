//! A minimal Llama-style decoder: RMSNorm, rotary multi-head attention,
//! SiLU-gated MLP, no biases.
//!
//! Linear weights are stored `[out, in]`, so a layer computes `x · Wᵀ`.
//! Layers carry their own head count and MLP width so that physically
//! compacted models share this type with dense ones.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train_tiny, TrainConfig, TrainReport};

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Config with `d_head = d_model / n_heads` and default rope/eps.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab: usize,
        max_seq: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(invalid(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let config = Self {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads,
            d_ff,
            vocab,
            max_seq,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(invalid(format!(
                "n_heads {} × d_head {} != d_model {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.n_layers < 2 {
            return Err(invalid("a model needs at least two layers"));
        }
        if [self.d_model, self.n_heads, self.d_head, self.d_ff, self.vocab, self.max_seq]
            .contains(&0)
        {
            return Err(invalid("all model dimensions must be at least 1"));
        }
        if self.d_head % 2 != 0 {
            return Err(invalid("rotary embeddings need an even d_head"));
        }
        if !(self.rope_base > 0.0 && self.norm_eps > 0.0) {
            return Err(invalid("rope_base and norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F> {
    pub attn_norm: Array1<F>,
    /// `[n_heads·d_head, d_model]`
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    /// `[d_model, n_heads·d_head]`
    pub wo: Array2<F>,
    pub mlp_norm: Array1<F>,
    /// `[d_ff, d_model]`
    pub w_gate: Array2<F>,
    pub w_up: Array2<F>,
    /// `[d_model, d_ff]`
    pub w_down: Array2<F>,
}

impl<F: Scalar> LayerWeights<F> {
    pub fn attn_width(&self) -> usize {
        self.wq.nrows()
    }

    pub fn n_heads(&self, d_head: usize) -> usize {
        self.wq.nrows() / d_head
    }

    pub fn d_ff(&self) -> usize {
        self.w_gate.nrows()
    }

    fn param_count(&self) -> usize {
        self.attn_norm.len()
            + self.wq.len()
            + self.wk.len()
            + self.wv.len()
            + self.wo.len()
            + self.mlp_norm.len()
            + self.w_gate.len()
            + self.w_up.len()
            + self.w_down.len()
    }

    pub fn mlp_param_count(&self) -> usize {
        self.w_gate.len() + self.w_up.len() + self.w_down.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel<F> {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub embed: Array2<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: Array1<F>,
    /// `[vocab, d_model]`
    pub head: Array2<F>,
}

fn gaussian<F: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        F::of(z * std)
    })
}

impl<F: Scalar> TinyModel<F> {
    /// Gaussian weights with standard deviation `1/√fan_in`; unit norm gains.
    /// The embedding table sees one-hot inputs, so its fan-in is 1.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let attn = config.n_heads * config.d_head;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let embed = gaussian(config.vocab, d, 1.0, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Array1::ones(d),
                wq: gaussian(attn, d, inv(d), &mut rng),
                wk: gaussian(attn, d, inv(d), &mut rng),
                wv: gaussian(attn, d, inv(d), &mut rng),
                wo: gaussian(d, attn, inv(attn), &mut rng),
                mlp_norm: Array1::ones(d),
                w_gate: gaussian(config.d_ff, d, inv(d), &mut rng),
                w_up: gaussian(config.d_ff, d, inv(d), &mut rng),
                w_down: gaussian(d, config.d_ff, inv(config.d_ff), &mut rng),
            })
            .collect();
        let head = gaussian(config.vocab, d, inv(d), &mut rng);
        Ok(Self {
            final_norm: Array1::ones(d),
            config,
            embed,
            layers,
            head,
        })
    }

    /// Same shapes, every weight zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(F::zero());
        }
        out
    }

    /// Named views of every weight tensor in canonical order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![("embed".to_string(), self.embed.view().into_dyn())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm.view().into_dyn()));
            out.push((format!("layers.{i}.wq"), l.wq.view().into_dyn()));
            out.push((format!("layers.{i}.wk"), l.wk.view().into_dyn()));
            out.push((format!("layers.{i}.wv"), l.wv.view().into_dyn()));
            out.push((format!("layers.{i}.wo"), l.wo.view().into_dyn()));
            out.push((format!("layers.{i}.mlp_norm"), l.mlp_norm.view().into_dyn()));
            out.push((format!("layers.{i}.w_gate"), l.w_gate.view().into_dyn()));
            out.push((format!("layers.{i}.w_up"), l.w_up.view().into_dyn()));
            out.push((format!("layers.{i}.w_down"), l.w_down.view().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view().into_dyn()));
        out.push(("head".to_string(), self.head.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![("embed".to_string(), self.embed.view_mut().into_dyn())];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm.view_mut().into_dyn()));
            out.push((format!("layers.{i}.wq"), l.wq.view_mut().into_dyn()));
            out.push((format!("layers.{i}.wk"), l.wk.view_mut().into_dyn()));
            out.push((format!("layers.{i}.wv"), l.wv.view_mut().into_dyn()));
            out.push((format!("layers.{i}.wo"), l.wo.view_mut().into_dyn()));
            out.push((format!("layers.{i}.mlp_norm"), l.mlp_norm.view_mut().into_dyn()));
            out.push((format!("layers.{i}.w_gate"), l.w_gate.view_mut().into_dyn()));
            out.push((format!("layers.{i}.w_up"), l.w_up.view_mut().into_dyn()));
            out.push((format!("layers.{i}.w_down"), l.w_down.view_mut().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view_mut().into_dyn()));
        out.push(("head".to_string(), self.head.view_mut().into_dyn()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.embed.len()
            + self.layers.iter().map(LayerWeights::param_count).sum::<usize>()
            + self.final_norm.len()
            + self.head.len()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// True when every layer has the configured head count and MLP width.
    pub fn is_dense(&self) -> bool {
        self.layers.iter().all(|l| {
            l.attn_width() == self.config.n_heads * self.config.d_head
                && l.d_ff() == self.config.d_ff
        })
    }

    /// Checks weight shapes against the config. Layer widths may be reduced.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        if self.embed.dim() != (c.vocab, d) || self.head.dim() != (c.vocab, d) {
            return Err(shape("embedding or head does not match [vocab, d_model]"));
        }
        if self.final_norm.len() != d || self.layers.len() != c.n_layers {
            return Err(shape("final norm or layer count does not match config"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let attn = l.wq.nrows();
            let ff = l.w_gate.nrows();
            let ok = attn % c.d_head == 0
                && attn <= c.n_heads * c.d_head
                && ff <= c.d_ff
                && l.attn_norm.len() == d
                && l.mlp_norm.len() == d
                && l.wq.dim() == (attn, d)
                && l.wk.dim() == (attn, d)
                && l.wv.dim() == (attn, d)
                && l.wo.dim() == (d, attn)
                && l.w_gate.dim() == (ff, d)
                && l.w_up.dim() == (ff, d)
                && l.w_down.dim() == (d, ff);
            if !ok {
                return Err(shape(format!("layer {i} weights are inconsistent")));
            }
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(invalid(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Per-token logits, `[T, vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Array2<F>> {
        self.check_tokens(tokens)?;
        Ok(self.run(tokens, None))
    }

    /// Logits plus activations at every prunable site.
    pub fn forward_with_taps(&self, tokens: &[u32]) -> Result<(Array2<F>, ForwardTrace<F>)> {
        self.check_tokens(tokens)?;
        let mut trace = ForwardTrace {
            embeddings: Array2::zeros((0, 0)),
            layers: Vec::with_capacity(self.layers.len()),
        };
        let logits = self.run(tokens, Some(&mut trace));
        Ok((logits, trace))
    }

    fn run(&self, tokens: &[u32], mut trace: Option<&mut ForwardTrace<F>>) -> Array2<F> {
        let c = &self.config;
        let eps = F::of(c.norm_eps);
        let rope = Rope::new(tokens.len(), c.d_head, c.rope_base);
        let mut x = self.embed.select(Axis(0), &token_indices(tokens));
        if let Some(t) = trace.as_deref_mut() {
            t.embeddings = x.clone();
        }
        for layer in &self.layers {
            let (a, _) = rms_norm(&x, &layer.attn_norm, eps);
            let mut q = a.dot(&layer.wq.t());
            let mut k = a.dot(&layer.wk.t());
            let v = a.dot(&layer.wv.t());
            rope.apply(&mut q, false);
            rope.apply(&mut k, false);
            let (attn, _) = attention(&q, &k, &v, c.d_head, false);
            x += &attn.dot(&layer.wo.t());

            let (m, _) = rms_norm(&x, &layer.mlp_norm, eps);
            let gate = m.dot(&layer.w_gate.t());
            let up = m.dot(&layer.w_up.t());
            let hidden = swiglu(&gate, &up);
            x += &hidden.dot(&layer.w_down.t());

            if let Some(t) = trace.as_deref_mut() {
                t.layers.push(LayerTrace {
                    attn,
                    mlp: hidden,
                    residual: x.clone(),
                });
            }
        }
        let (z, _) = rms_norm(&x, &self.final_norm, eps);
        z.dot(&self.head.t())
    }

    /// Sum of log-probabilities of `continuation` given `context`.
    /// The context must hold at least one token.
    pub fn sequence_logprob(&self, context: &[u32], continuation: &[u32]) -> Result<(f64, usize)> {
        if continuation.is_empty() {
            return Err(invalid("empty continuation"));
        }
        if context.is_empty() {
            return Err(invalid("empty context: the first token has no prediction"));
        }
        let mut tokens = Vec::with_capacity(context.len() + continuation.len());
        tokens.extend_from_slice(context);
        tokens.extend_from_slice(continuation);
        let logits = self.forward(&tokens)?;
        let start = context.len() - 1;
        let lp = token_logprobs(logits.slice(s![start..tokens.len() - 1, ..]), continuation);
        Ok((lp.iter().sum(), continuation.len()))
    }

    /// Log-probability of each token after the first, given its prefix.
    pub fn token_logprobs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let logits = self.forward(tokens)?;
        Ok(token_logprobs(
            logits.slice(s![..tokens.len() - 1, ..]),
            &tokens[1..],
        ))
    }

    /// Greedy decoding without caching: each step reruns the full prefix.
    pub fn generate_greedy(&self, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
        let mut tokens = prompt.to_vec();
        for _ in 0..n_new {
            let logits = self.forward(&tokens)?;
            let last = logits.row(logits.nrows() - 1);
            let next = argmax(last.iter().copied());
            tokens.push(next as u32);
        }
        Ok(tokens)
    }
}

/// Activations captured by [`TinyModel::forward_with_taps`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    /// Layer-0 token embeddings, `[T, d_model]`.
    pub embeddings: Array2<F>,
    pub layers: Vec<LayerTrace<F>>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace<F> {
    /// Concatenated head outputs, the input of `wo`: `[T, n_heads·d_head]`.
    pub attn: Array2<F>,
    /// Gated MLP hidden state, the input of `w_down`: `[T, d_ff]`.
    pub mlp: Array2<F>,
    /// Residual stream after the block, `[T, d_model]`.
    pub residual: Array2<F>,
}

fn token_indices(tokens: &[u32]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

pub(crate) fn argmax<F: PartialOrd>(values: impl Iterator<Item = F>) -> usize {
    let mut best: Option<(usize, F)> = None;
    for (i, v) in values.enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Row-wise log-softmax evaluated at `targets`, computed in f64.
pub(crate) fn token_logprobs<F: Scalar>(logits: ArrayView2<'_, F>, targets: &[u32]) -> Vec<f64> {
    logits
        .outer_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            row[t as usize].as_f64() - lse
        })
        .collect()
}

/// RMSNorm over rows. Returns the output and each row's `1/rms`.
pub(crate) fn rms_norm<F: Scalar>(x: &Array2<F>, gain: &Array1<F>, eps: F) -> (Array2<F>, Array1<F>) {
    let d = F::of(x.ncols() as f64);
    let inv: Array1<F> = x
        .outer_iter()
        .map(|row| (row.iter().map(|v| *v * *v).sum::<F>() / d + eps).sqrt().recip())
        .collect();
    let mut y = x.clone();
    Zip::from(y.rows_mut()).and(&inv).for_each(|mut row, &r| {
        Zip::from(&mut row).and(gain).for_each(|v, &g| *v = *v * r * g);
    });
    (y, inv)
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `silu(gate) ⊙ up`
pub(crate) fn swiglu<F: Scalar>(gate: &Array2<F>, up: &Array2<F>) -> Array2<F> {
    let mut out = gate.clone();
    Zip::from(&mut out).and(up).for_each(|g, &u| *g = *g * sigmoid(*g) * u);
    out
}

/// Rotary position embedding tables for positions `0..t`.
pub(crate) struct Rope<F> {
    cos: Array2<F>,
    sin: Array2<F>,
    d_head: usize,
}

impl<F: Scalar> Rope<F> {
    pub(crate) fn new(t: usize, d_head: usize, base: f64) -> Self {
        let half = d_head / 2;
        let mut cos = Array2::zeros((t, half));
        let mut sin = Array2::zeros((t, half));
        for p in 0..t {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
                cos[[p, i]] = F::of(theta.cos());
                sin[[p, i]] = F::of(theta.sin());
            }
        }
        Self { cos, sin, d_head }
    }

    /// Rotates each head's dimension pairs `(2i, 2i+1)` in place;
    /// `inverse` applies the transpose rotation.
    pub(crate) fn apply(&self, x: &mut Array2<F>, inverse: bool) {
        let half = self.d_head / 2;
        let n_heads = x.ncols() / self.d_head;
        for (p, mut row) in x.outer_iter_mut().enumerate() {
            for h in 0..n_heads {
                let base = h * self.d_head;
                for i in 0..half {
                    let (c, mut s) = (self.cos[[p, i]], self.sin[[p, i]]);
                    if inverse {
                        s = -s;
                    }
                    let a = row[base + 2 * i];
                    let b = row[base + 2 * i + 1];
                    row[base + 2 * i] = a * c - b * s;
                    row[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Causal multi-head attention over rotated `q`, `k` and `v`.
/// Optionally returns each head's attention probabilities.
pub(crate) fn attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    d_head: usize,
    keep_probs: bool,
) -> (Array2<F>, Vec<Array2<F>>) {
    let t = q.nrows();
    let n_heads = q.ncols() / d_head;
    let scale = F::of(1.0 / (d_head as f64).sqrt());
    let mut out = Array2::zeros((t, q.ncols()));
    let mut all_probs = Vec::new();
    for h in 0..n_heads {
        let cols = s![.., h * d_head..(h + 1) * d_head];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        causal_softmax(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        if keep_probs {
            all_probs.push(scores);
        }
    }
    (out, all_probs)
}

/// In-place row softmax over positions `j <= i`; later positions become 0.
pub(crate) fn causal_softmax<F: Scalar>(scores: &mut Array2<F>) {
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        let max = row
            .iter()
            .take(i + 1)
            .fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = F::zero();
            }
        }
        row.mapv_inplace(|v| v / total);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::new(2, 16, 4, 24, 32, 32).unwrap()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(ModelConfig::new(2, 10, 3, 8, 16, 8).is_err());
        assert!(ModelConfig::new(1, 8, 2, 8, 16, 8).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = TinyModel::<f32>::init_random(small(), 1).unwrap();
        let b = TinyModel::<f32>::init_random(small(), 1).unwrap();
        let c = TinyModel::<f32>::init_random(small(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers[0].wq, c.layers[0].wq);
    }

    #[test]
    fn zero_model_gives_uniform_logits() {
        let m = TinyModel::<f32>::init_random(small(), 3).unwrap().zeros_like();
        let logits = m.forward(&[1, 2, 3]).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let (lp, n) = m.sequence_logprob(&[1], &[4, 5, 6]).unwrap();
        assert_eq!(n, 3);
        assert!((lp + 3.0 * (32f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn taps_match_forward_and_shapes() {
        let m = TinyModel::<f32>::init_random(small(), 4).unwrap();
        let tokens = [3, 1, 4];
        let (logits, trace) = m.forward_with_taps(&tokens).unwrap();
        assert_eq!(logits, m.forward(&tokens).unwrap());
        assert_eq!(logits.dim(), (3, 32));
        assert_eq!(trace.embeddings.dim(), (3, 16));
        assert_eq!(trace.layers.len(), 2);
        for l in &trace.layers {
            assert_eq!(l.mlp.dim(), (3, 24));
            assert_eq!(l.attn.dim(), (3, 16));
            assert_eq!(l.residual.dim(), (3, 16));
        }
        assert_eq!(m.forward(&[7]).unwrap().nrows(), 1);
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = TinyModel::<f32>::init_random(small(), 4).unwrap();
        assert!(matches!(m.forward(&[32]), Err(Error::TokenOutOfRange { .. })));
        assert!(m.forward(&[0; 33]).is_err());
        assert!(m.sequence_logprob(&[1], &[]).is_err());
    }

    #[test]
    fn causal() {
        let m = TinyModel::<f64>::init_random(small(), 5).unwrap();
        let a = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward(&[1, 2, 3, 9, 0]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn rms_norm_has_unit_rms() {
        let x = Array2::from_shape_fn((4, 16), |(i, j)| (i as f64 + 1.0) * ((j as f64) - 7.3));
        let (y, _) = rms_norm(&x, &Array1::ones(16), 1e-6);
        for row in y.outer_iter() {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5, "{rms}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = TinyModel::<f32>::init_random(small(), 6).unwrap();
        let x = m.embed.select(Axis(0), &[1, 5, 9, 2]);
        let q = x.dot(&m.layers[0].wq.t());
        let k = x.dot(&m.layers[0].wk.t());
        let (_, probs) = attention(&q, &k, &q, m.config.d_head, true);
        for p in probs {
            for (i, row) in p.outer_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().skip(i + 1).all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rope_inverse_round_trips() {
        let rope = Rope::<f64>::new(5, 4, 10_000.0);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 1.0);
        let mut y = x.clone();
        rope.apply(&mut y, false);
        rope.apply(&mut y, true);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn appending_tokens_never_raises_logprob() {
        let m = TinyModel::<f64>::init_random(small(), 8).unwrap();
        let (short, _) = m.sequence_logprob(&[1, 2], &[3, 4]).unwrap();
        let (long, _) = m.sequence_logprob(&[1, 2], &[3, 4, 5]).unwrap();
        assert!(long <= short);
    }
}
