//! Plain-SGD next-token trainer with hand-written backpropagation.
//!
//! Pruning itself never trains; this only exists to turn a random model into
//! one whose activations depend on the task it reads.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{attention, rms_norm, sigmoid, swiglu, token_indices, Rope, TinyModel};
use crate::corpus::Corpora;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Sequences per step.
    pub batch_size: usize,
    /// Sequences are truncated to this many tokens (and to `max_seq`).
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.3,
            seed: 0,
            batch_size: 8,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token cross-entropy of each step's batch, before its update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean of the last `n` batch losses.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

/// Trains `model` on prompts sampled uniformly from all corpora.
pub fn train_tiny<F: Scalar>(
    mut model: TinyModel<F>,
    corpora: &Corpora,
    config: &TrainConfig,
) -> Result<(TinyModel<F>, TrainReport)> {
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let max_len = config.max_len.min(model.config.max_seq);
    let pool: Vec<&[u32]> = corpora
        .values()
        .flat_map(|c| c.token_sequences())
        .map(|seq| &seq[..seq.len().min(max_len)])
        .filter(|seq| seq.len() >= 2)
        .collect();
    if pool.is_empty() && config.steps > 0 {
        return Err(invalid("no training sequence has two or more tokens"));
    }
    for seq in &pool {
        model.check_tokens(seq)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lr = F::of(config.lr);
    let mut report = TrainReport::default();
    let mut grads = model.zeros_like();
    for step in 0..config.steps {
        let batch: Vec<&[u32]> = (0..config.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let n_targets: usize = batch.iter().map(|s| s.len() - 1).sum();
        let scale = F::of(1.0 / n_targets as f64);
        for (_, mut g) in grads.tensors_mut() {
            g.fill(F::zero());
        }
        let mut loss = 0.0;
        for seq in &batch {
            loss += accumulate_gradients(&model, seq, scale, &mut grads);
        }
        loss /= n_targets as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        report.losses.push(loss);
        sgd_step(&mut model, &grads, lr);
    }
    if !model.is_finite() {
        return Err(Error::Numeric("training produced non-finite weights".into()));
    }
    Ok((model, report))
}

fn sgd_step<F: Scalar>(model: &mut TinyModel<F>, grads: &TinyModel<F>, lr: F) {
    for ((_, mut p), (_, g)) in model.tensors_mut().into_iter().zip(grads.tensors()) {
        Zip::from(&mut p).and(&g).for_each(|p, &g| *p -= lr * g);
    }
}

struct LayerCache<F> {
    x_in: Array2<F>,
    a: Array2<F>,
    r_attn: Array1<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    x_mid: Array2<F>,
    m: Array2<F>,
    r_mlp: Array1<F>,
    gate: Array2<F>,
    up: Array2<F>,
    hidden: Array2<F>,
}

/// Adds `scale · ∂(Σ token cross-entropy)/∂θ` of one sequence into `grads`
/// and returns the unscaled summed cross-entropy.
pub(crate) fn accumulate_gradients<F: Scalar>(
    model: &TinyModel<F>,
    tokens: &[u32],
    scale: F,
    grads: &mut TinyModel<F>,
) -> f64 {
    let c = &model.config;
    let eps = F::of(c.norm_eps);
    let t_len = tokens.len();
    let rope = Rope::new(t_len, c.d_head, c.rope_base);

    // Forward, caching what the backward pass needs.
    let mut x = model.embed.select(Axis(0), &token_indices(tokens));
    let mut caches = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let x_in = x.clone();
        let (a, r_attn) = rms_norm(&x, &layer.attn_norm, eps);
        let mut q = a.dot(&layer.wq.t());
        let mut k = a.dot(&layer.wk.t());
        let v = a.dot(&layer.wv.t());
        rope.apply(&mut q, false);
        rope.apply(&mut k, false);
        let (attn, probs) = attention(&q, &k, &v, c.d_head, true);
        x += &attn.dot(&layer.wo.t());
        let x_mid = x.clone();
        let (m, r_mlp) = rms_norm(&x, &layer.mlp_norm, eps);
        let gate = m.dot(&layer.w_gate.t());
        let up = m.dot(&layer.w_up.t());
        let hidden = swiglu(&gate, &up);
        x += &hidden.dot(&layer.w_down.t());
        caches.push(LayerCache {
            x_in,
            a,
            r_attn,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            m,
            r_mlp,
            gate,
            up,
            hidden,
        });
    }
    let (z, r_final) = rms_norm(&x, &model.final_norm, eps);
    let logits = z.dot(&model.head.t());

    // Softmax cross-entropy; the last position has no target.
    let mut dlogits = Array2::<F>::zeros(logits.dim());
    let mut loss = 0.0;
    for t in 0..t_len - 1 {
        let row = logits.row(t);
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        let target = tokens[t + 1] as usize;
        loss -= (exps[target] / total).as_f64().ln();
        for (j, e) in exps.into_iter().enumerate() {
            let p = e / total;
            let y = if j == target { F::one() } else { F::zero() };
            dlogits[[t, j]] = (p - y) * scale;
        }
    }

    // Backward.
    grads.head += &dlogits.t().dot(&z);
    let dz = dlogits.dot(&model.head);
    let mut dx = rms_norm_backward(&x, &model.final_norm, &r_final, &dz, &mut grads.final_norm);

    for (li, (layer, cache)) in model.layers.iter().zip(&caches).enumerate().rev() {
        let g = &mut grads.layers[li];

        // MLP block: x = x_mid + hidden · w_downᵀ
        g.w_down += &dx.t().dot(&cache.hidden);
        let dhidden = dx.dot(&layer.w_down);
        let mut dgate = dhidden.clone();
        let mut dup = dhidden;
        Zip::from(&mut dgate)
            .and(&mut dup)
            .and(&cache.gate)
            .and(&cache.up)
            .for_each(|dg, du, &gv, &uv| {
                let sg = sigmoid(gv);
                let silu = gv * sg;
                let dsilu = sg * (F::one() + gv * (F::one() - sg));
                let upstream = *dg;
                *dg = upstream * uv * dsilu;
                *du = upstream * silu;
            });
        g.w_gate += &dgate.t().dot(&cache.m);
        g.w_up += &dup.t().dot(&cache.m);
        let dm = dgate.dot(&layer.w_gate) + dup.dot(&layer.w_up);
        dx += &rms_norm_backward(&cache.x_mid, &layer.mlp_norm, &cache.r_mlp, &dm, &mut g.mlp_norm);

        // Attention block: x_mid = x_in + attn · woᵀ
        g.wo += &dx.t().dot(&cache.attn);
        let dattn = dx.dot(&layer.wo);
        let (mut dq, mut dk, dv) = attention_backward(cache, &dattn, c.d_head);
        rope.apply(&mut dq, true);
        rope.apply(&mut dk, true);
        g.wq += &dq.t().dot(&cache.a);
        g.wk += &dk.t().dot(&cache.a);
        g.wv += &dv.t().dot(&cache.a);
        let da = dq.dot(&layer.wq) + dk.dot(&layer.wk) + dv.dot(&layer.wv);
        dx += &rms_norm_backward(&cache.x_in, &layer.attn_norm, &cache.r_attn, &da, &mut g.attn_norm);
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = grads.embed.row_mut(tok as usize);
        row += &dx.row(t);
    }
    loss
}

fn rms_norm_backward<F: Scalar>(
    x: &Array2<F>,
    gain: &Array1<F>,
    inv: &Array1<F>,
    dy: &Array2<F>,
    dgain: &mut Array1<F>,
) -> Array2<F> {
    let d = F::of(x.ncols() as f64);
    let mut dx = Array2::zeros(x.dim());
    for (((xr, dyr), &r), mut dxr) in x
        .outer_iter()
        .zip(dy.outer_iter())
        .zip(inv)
        .zip(dx.outer_iter_mut())
    {
        let mut dot = F::zero();
        for ((&xv, &dyv), (dgv, &gv)) in xr.iter().zip(&dyr).zip(dgain.iter_mut().zip(gain)) {
            *dgv += dyv * xv * r;
            dot += dyv * gv * xv;
        }
        let coeff = r * r * r * dot / d;
        for (((dxv, &xv), &dyv), &gv) in dxr.iter_mut().zip(&xr).zip(&dyr).zip(gain) {
            *dxv = r * gv * dyv - coeff * xv;
        }
    }
    dx
}

/// Gradients with respect to the rotated `q`, `k` and to `v`.
fn attention_backward<F: Scalar>(
    cache: &LayerCache<F>,
    dattn: &Array2<F>,
    d_head: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let scale = F::of(1.0 / (d_head as f64).sqrt());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * d_head..(h + 1) * d_head];
        let dout = dattn.slice(cols);
        let dprobs = dout.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dout));
        let mut dscores = probs.clone();
        for (mut row, drow) in dscores.outer_iter_mut().zip(dprobs.outer_iter()) {
            let inner: F = row.iter().zip(&drow).map(|(&p, &dp)| p * dp).sum();
            Zip::from(&mut row)
                .and(&drow)
                .for_each(|p, &dp| *p = *p * (dp - inner) * scale);
        }
        dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    (dq, dk, dv)
}
