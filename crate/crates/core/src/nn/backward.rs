use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::forward::{gelu_grad, BlockCache, NormCache, SampleCache};
use super::{Block, LayerNorm, Linear, Model};
use crate::error::{Result, TapError};
use crate::stats::log_sum_exp;

/// Which parameters receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    Head,
    /// Head, patch embedding, class token and positional embeddings.
    HeadAndEmbedding,
    All,
}

/// Gradients laid out exactly like the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads(pub Model);

impl ModelGrads {
    fn zeros_like(model: &Model) -> Self {
        let mut g = model.clone();
        g.map_params(|_| 0.0);
        Self(g)
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.0.map_params(|p| p * factor);
        self
    }

    /// `self + factor * other`, parameter by parameter.
    pub fn add_scaled(mut self, other: &ModelGrads, factor: f64) -> Self {
        let flat = other.flatten();
        let mut i = 0;
        self.0.for_each_param_mut(|p| {
            *p += factor * flat[i];
            i += 1;
        });
        self
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut g = self.0.clone();
        let mut out = Vec::new();
        g.for_each_param_mut(|p| out.push(*p));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Mean cross-entropy of `logits` rows against `labels`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row.as_slice().expect("contiguous")) - row[y])
        .sum();
    total / labels.len().max(1) as f64
}

fn softmax_minus_onehot(logits: &Array1<f64>, label: usize) -> Array1<f64> {
    let lse = log_sum_exp(logits.as_slice().expect("contiguous"));
    let mut g = logits.mapv(|v| (v - lse).exp());
    g[label] -= 1.0;
    g
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(TapError::shape("labels", rows, labels.len()));
    }
    if labels.is_empty() {
        return Err(TapError::invalid("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(TapError::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn accumulate_linear(grad: &mut Linear, input: &Array2<f64>, dout: &Array2<f64>) {
    grad.weight += &input.t().dot(dout);
    grad.bias += &dout.sum_axis(Axis(0));
}

fn layer_norm_backward(dy: &Array2<f64>, cache: &NormCache, ln: &LayerNorm, grad: Option<&mut LayerNorm>) -> Array2<f64> {
    if let Some(g) = grad {
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * &ln.gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let dh = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        let inv = cache.inv_std[t];
        for j in 0..dy.ncols() {
            dx[[t, j]] = inv * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    dx
}

/// Backpropagates `dx2` through one block; block parameter gradients are
/// accumulated into `grad` when given.
fn block_backward(block: &Block, cache: &BlockCache, dx2: Array2<f64>, mut grad: Option<&mut Block>) -> Array2<f64> {
    let attn = &block.attn;
    // FFN branch
    if let Some(g) = grad.as_deref_mut() {
        accumulate_linear(&mut g.ffn.fc2, &cache.h, &dx2);
    }
    let dh = dx2.dot(&block.ffn.fc2.weight.t());
    let dh_pre = &dh * &cache.h_pre.mapv(gelu_grad);
    if let Some(g) = grad.as_deref_mut() {
        accumulate_linear(&mut g.ffn.fc1, &cache.y2, &dh_pre);
    }
    let dy2 = dh_pre.dot(&block.ffn.fc1.weight.t());
    let dx1 = &dx2 + &layer_norm_backward(&dy2, &cache.ln2, &block.norm2, grad.as_deref_mut().map(|g| &mut g.norm2));

    // attention branch
    if let Some(g) = grad.as_deref_mut() {
        accumulate_linear(&mut g.attn.output, &cache.o, &dx1);
    }
    let d_o = dx1.dot(&attn.output.weight.t());
    let scale = 1.0 / (attn.head_dim as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, &width) in attn.value_widths.iter().enumerate() {
        let qk = s![.., h * attn.head_dim..(h + 1) * attn.head_dim];
        let off = attn.value_offset(h);
        let vs = s![.., off..off + width];
        let p = &cache.probs[h];
        let do_h = d_o.slice(vs);
        let dp = do_h.dot(&cache.v.slice(vs).t());
        dv.slice_mut(vs).assign(&p.t().dot(&do_h));
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = p * &(&dp - &row_dot) * scale;
        dq.slice_mut(qk).assign(&ds.dot(&cache.k.slice(qk)));
        dk.slice_mut(qk).assign(&ds.t().dot(&cache.q.slice(qk)));
    }
    if let Some(g) = grad.as_deref_mut() {
        accumulate_linear(&mut g.attn.query, &cache.y1, &dq);
        accumulate_linear(&mut g.attn.key, &cache.y1, &dk);
        accumulate_linear(&mut g.attn.value, &cache.y1, &dv);
    }
    let dy1 = dq.dot(&attn.query.weight.t()) + dk.dot(&attn.key.weight.t()) + dv.dot(&attn.value.weight.t());
    &dx1 + &layer_norm_backward(&dy1, &cache.ln1, &block.norm1, grad.map(|g| &mut g.norm1))
}

impl Model {
    fn backward_sample(&self, cache: &SampleCache, dlogits: &Array1<f64>, grads: &mut Model, scope: TrainScope) {
        let cls = cache.final_tokens.row(0);
        grads.head.weight += &cls.insert_axis(Axis(1)).dot(&dlogits.view().insert_axis(Axis(0)));
        grads.head.bias += dlogits;
        if scope == TrainScope::Head {
            return;
        }
        let mut dx = Array2::zeros(cache.final_tokens.raw_dim());
        dx.row_mut(0).assign(&self.head.weight.dot(dlogits));
        for (l, block) in self.blocks.iter().enumerate().rev() {
            if let Some(bc) = &cache.blocks[l] {
                let g = (scope == TrainScope::All).then(|| &mut grads.blocks[l]);
                dx = block_backward(block, bc, dx, g);
            }
        }
        grads.pos_embed += &dx;
        grads.class_token += &dx.row(0);
        let dpatch = dx.slice(s![1.., ..]).to_owned();
        accumulate_linear(&mut grads.patch_embed, &cache.patches, &dpatch);
    }

    /// Mean cross-entropy over the batch and its gradient for parameters in `scope`.
    /// Gradients outside the scope are left at zero.
    pub fn loss_and_grads(&self, batch: ArrayView2<f64>, labels: &[usize], scope: TrainScope) -> Result<(f64, ModelGrads)> {
        check_labels(labels, batch.nrows(), self.num_classes())?;
        if batch.ncols() != self.config.input_dim() {
            return Err(TapError::shape("patch_embed input", self.config.input_dim(), batch.ncols()));
        }
        self.validate()?;
        let mut grads = ModelGrads::zeros_like(self);
        let n = labels.len() as f64;
        let mut loss = 0.0;
        for (sample, &y) in batch.rows().into_iter().zip(labels) {
            let cache = self.forward_cached(sample, None);
            loss += log_sum_exp(cache.logits.as_slice().expect("contiguous")) - cache.logits[y];
            let dlogits = softmax_minus_onehot(&cache.logits, y) / n;
            self.backward_sample(&cache, &dlogits, &mut grads.0, scope);
        }
        Ok((loss / n, grads))
    }

    /// One plain gradient-descent step on the head only; returns the batch
    /// loss before the step.
    pub fn head_finetune_step(&mut self, batch: ArrayView2<f64>, labels: &[usize], learning_rate: f64) -> Result<f64> {
        let features = self.class_embeddings(batch, self.num_layers())?;
        head_step(&mut self.head, &features, labels, learning_rate)
    }
}

/// Loss and gradient of mean cross-entropy for a linear head over fixed features.
pub fn head_gradient(head: &Linear, features: &Array2<f64>, labels: &[usize]) -> Result<(f64, HeadGradient)> {
    check_labels(labels, features.nrows(), head.output_dim())?;
    if features.ncols() != head.input_dim() {
        return Err(TapError::shape("head input", head.input_dim(), features.ncols()));
    }
    let logits = features.dot(&head.weight) + &head.bias;
    let n = labels.len() as f64;
    let mut delta = Array2::zeros(logits.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        delta.row_mut(i).assign(&softmax_minus_onehot(&logits.row(i).to_owned(), y));
    }
    delta /= n;
    let grad = HeadGradient {
        weight: features.t().dot(&delta),
        bias: delta.sum_axis(Axis(0)),
    };
    Ok((cross_entropy(&logits, labels), grad))
}

/// In-place gradient-descent step on a head; returns the loss before the step.
pub fn head_step(head: &mut Linear, features: &Array2<f64>, labels: &[usize], learning_rate: f64) -> Result<f64> {
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(TapError::invalid(format!(
            "learning rate {learning_rate} must be finite and >= 0"
        )));
    }
    let (loss, g) = head_gradient(head, features, labels)?;
    head.weight.scaled_add(-learning_rate, &g.weight);
    head.bias.scaled_add(-learning_rate, &g.bias);
    Ok(loss)
}

/// Adam state over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, scope: TrainScope) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let flat = grads.flatten();
        let mask = scope_mask(model, scope);
        let mut i = 0;
        let (m, v, lr) = (&mut self.m, &mut self.v, self.lr);
        model.for_each_param_mut(|p| {
            if mask[i] {
                let g = flat[i];
                m[i] = B1 * m[i] + (1.0 - B1) * g;
                v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
            i += 1;
        });
    }
}

/// Flags, in parameter order, which scalars belong to `scope`.
fn scope_mask(model: &Model, scope: TrainScope) -> Vec<bool> {
    let embed = model.patch_embed.param_count() + model.class_token.len() + model.pos_embed.len();
    let blocks: usize = model.blocks.iter().map(Block::param_count).sum();
    let head = model.head.param_count();
    let (e, b) = match scope {
        TrainScope::Head => (false, false),
        TrainScope::HeadAndEmbedding => (true, false),
        TrainScope::All => (true, true),
    };
    let mut mask = Vec::with_capacity(embed + blocks + head);
    mask.extend(std::iter::repeat_n(e, embed));
    mask.extend(std::iter::repeat_n(b, blocks));
    mask.extend(std::iter::repeat_n(true, head));
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tiny_config;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, 16), || rng.random_range(-1.0..1.0));
        let y = (0..n).map(|_| rng.random_range(0..3)).collect();
        (x, y)
    }

    fn loss(m: &Model, x: &Array2<f64>, y: &[usize]) -> f64 {
        cross_entropy(&m.forward(x.view(), false).unwrap().logits, y)
    }

    /// Central finite differences on a sample of every parameter, against
    /// the full backward pass.
    #[test]
    fn full_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = Model::init(tiny_config(2, 4)).unwrap();
        m.map_params(|p| p * 2.0);
        // a pruned-looking head layout
        m.blocks[1].attn.value_widths = vec![1, 2];
        m.blocks[1].attn.value.weight = m.blocks[1].attn.value.weight.slice(s![.., 1..]).to_owned();
        m.blocks[1].attn.value.bias = m.blocks[1].attn.value.bias.slice(s![1..]).to_owned();
        m.blocks[1].attn.output.weight = m.blocks[1].attn.output.weight.slice(s![1.., ..]).to_owned();
        let (x, y) = batch(3, 1);
        let (_, grads) = m.loss_and_grads(x.view(), &y, TrainScope::All).unwrap();
        let analytic = grads.flatten();
        let total = analytic.len();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..120 {
            let idx = rng.random_range(0..total);
            let eval = |delta: f64| {
                let mut mm = m.clone();
                let mut i = 0;
                mm.for_each_param_mut(|p| {
                    if i == idx {
                        *p += delta;
                    }
                    i += 1;
                });
                loss(&mm, &x, &y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            // absolute slack covers cancellation noise on near-zero entries
            let err = ((numeric - analytic[idx]).abs() - 1e-9).max(0.0) / numeric.abs().max(analytic[idx].abs()).max(1e-12);
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn head_gradient_is_softmax_minus_onehot_outer_features() {
        let feats = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let head = Linear {
            weight: Array2::from_shape_vec((3, 2), vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap(),
            bias: Array1::from(vec![0.05, -0.05]),
        };
        let (_, g) = head_gradient(&head, &feats, &[1]).unwrap();
        let logits = feats.dot(&head.weight) + &head.bias;
        let p = crate::stats::softmax(logits.row(0).as_slice().unwrap());
        let delta = [p[0], p[1] - 1.0];
        for i in 0..3 {
            for k in 0..2 {
                assert!((g.weight[[i, k]] - delta[k] * feats[[0, i]]).abs() < 1e-15);
            }
        }
        // finite differences
        let h = 1e-4;
        for i in 0..3 {
            for k in 0..2 {
                let mut plus = head.clone();
                plus.weight[[i, k]] += h;
                let mut minus = head.clone();
                minus.weight[[i, k]] -= h;
                let f = |l: &Linear| cross_entropy(&(feats.dot(&l.weight) + &l.bias), &[1]);
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!((num - g.weight[[i, k]]).abs() <= 1e-5 * num.abs().max(1e-8));
            }
        }
    }

    #[test]
    fn head_step_only_changes_head_and_rejects_bad_labels() {
        let mut m = Model::init(tiny_config(1, 2)).unwrap();
        let before = m.clone();
        let (x, y) = batch(4, 2);
        m.head_finetune_step(x.view(), &y, 0.1).unwrap();
        assert_ne!(m.head, before.head);
        let mut body = m.clone();
        body.head = before.head.clone();
        assert_eq!(body, before);
        assert!(m.head_finetune_step(x.view(), &[0, 1, 2, 3], 0.1).is_err());
    }

    #[test]
    fn saturated_correct_predictions_leave_head_fixed() {
        let feats = Array2::from_shape_vec((2, 1), vec![1.0, -1.0]).unwrap();
        let mut head = Linear {
            weight: Array2::from_shape_vec((1, 2), vec![-500.0, 500.0]).unwrap(),
            bias: Array1::zeros(2),
        };
        let before = head.clone();
        head_step(&mut head, &feats, &[1, 0], 1e-3).unwrap();
        for (a, b) in head.weight.iter().zip(before.weight.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_head_steps_do_not_increase_loss() {
        let mut m = Model::init(tiny_config(1, 6)).unwrap();
        let (x, y) = batch(8, 3);
        let mut prev = loss(&m, &x, &y);
        for _ in 0..20 {
            m.head_finetune_step(x.view(), &y, 1e-3).unwrap();
            let now = loss(&m, &x, &y);
            assert!(now <= prev + 1e-12);
            prev = now;
        }
    }

    #[test]
    fn separable_two_class_head_training_reaches_full_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let feats = Array2::from_shape_fn((n, 2), |(i, j)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 {
                sign * (1.0 + rng.random_range(0.0..1.0))
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut head = Linear::zeros(2, 2);
        for _ in 0..50 {
            head_step(&mut head, &feats, &labels, 0.5).unwrap();
        }
        let logits = feats.dot(&head.weight) + &head.bias;
        let pred = crate::nn::forward::argmax_rows(&logits);
        assert_eq!(pred, labels);
    }
}
