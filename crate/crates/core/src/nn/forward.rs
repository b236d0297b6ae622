use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use super::{Block, LayerNorm, Linear, Model, LN_EPS};
use crate::error::{Result, TapError};

/// Per-sample unit values of one block, averaged over all tokens (class token
/// included). `ffn` holds post-GELU hidden activations, `mha` the attention
/// output channels that feed the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub ffn: Array2<f64>,
    pub mha: Array2<f64>,
}

impl LayerTrace {
    pub fn unit_count(&self) -> usize {
        self.ffn.ncols() + self.mha.ncols()
    }

    /// Column `unit` of the combined `[ffn | mha]` unit layout.
    pub fn unit(&self, unit: usize) -> ArrayView1<'_, f64> {
        let f = self.ffn.ncols();
        if unit < f {
            self.ffn.column(unit)
        } else {
            self.mha.column(unit - f)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `None` for disabled blocks.
    pub layers: Vec<Option<LayerTrace>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `(batch, num_classes)`.
    pub logits: Array2<f64>,
    pub trace: Option<ActivationTrace>,
}

impl ForwardOutput {
    pub fn probabilities(&self) -> Array2<f64> {
        softmax_rows(&self.logits)
    }
}

/// Intermediate values of one block, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub ln1: NormCache,
    pub y1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub o: Array2<f64>,
    pub ln2: NormCache,
    pub y2: Array2<f64>,
    pub h_pre: Array2<f64>,
    pub h: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Forward state for one sample: token matrices per block plus the final one.
#[derive(Debug, Clone)]
pub(crate) struct SampleCache {
    pub patches: Array2<f64>,
    pub blocks: Vec<Option<BlockCache>>,
    pub final_tokens: Array2<f64>,
    pub logits: Array1<f64>,
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub(crate) fn linear(x: &Array2<f64>, lin: &Linear) -> Array2<f64> {
    x.dot(&lin.weight) + &lin.bias
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, NormCache { xhat, inv_std })
}

/// Runs one enabled block on a `(tokens, d)` matrix.
pub(crate) fn block_forward(block: &Block, x0: &Array2<f64>) -> (Array2<f64>, BlockCache) {
    let attn = &block.attn;
    let (y1, ln1) = layer_norm(x0, &block.norm1);
    let q = linear(&y1, &attn.query);
    let k = linear(&y1, &attn.key);
    let v = linear(&y1, &attn.value);
    let scale = 1.0 / (attn.head_dim as f64).sqrt();
    let tokens = x0.nrows();
    let mut o = Array2::zeros((tokens, attn.channels()));
    let mut probs = Vec::with_capacity(attn.heads());
    for (h, &width) in attn.value_widths.iter().enumerate() {
        let qk = s![.., h * attn.head_dim..(h + 1) * attn.head_dim];
        let off = attn.value_offset(h);
        let vs = s![.., off..off + width];
        let scores = q.slice(qk).dot(&k.slice(qk).t()) * scale;
        let p = softmax_rows(&scores);
        o.slice_mut(vs).assign(&p.dot(&v.slice(vs)));
        probs.push(p);
    }
    let x1 = x0 + &linear(&o, &attn.output);
    let (y2, ln2) = layer_norm(&x1, &block.norm2);
    let h_pre = linear(&y2, &block.ffn.fc1);
    let h = h_pre.mapv(gelu);
    let x2 = &x1 + &linear(&h, &block.ffn.fc2);
    let cache = BlockCache {
        ln1,
        y1,
        q,
        k,
        v,
        probs,
        o,
        ln2,
        y2,
        h_pre,
        h,
    };
    (x2, cache)
}

impl Model {
    fn check_batch(&self, batch: &ArrayView2<f64>) -> Result<()> {
        let want = self.config.input_dim();
        if batch.ncols() != want {
            return Err(TapError::shape(
                "patch_embed input",
                format!("{want} values per sample"),
                batch.ncols(),
            ));
        }
        self.validate()
    }

    /// Token matrix entering the first block.
    pub(crate) fn embed(&self, sample: ArrayView1<f64>) -> (Array2<f64>, Array2<f64>) {
        let patches = self.patchify(sample.as_slice().expect("contiguous sample"));
        let d = self.d();
        let mut x = Array2::zeros((patches.nrows() + 1, d));
        x.row_mut(0).assign(&self.class_token);
        x.slice_mut(s![1.., ..]).assign(&linear(&patches, &self.patch_embed));
        x += &self.pos_embed;
        (x, patches)
    }

    /// Full forward for one sample, keeping everything backprop needs.
    pub(crate) fn forward_cached(&self, sample: ArrayView1<f64>, bypass: Option<usize>) -> SampleCache {
        let (mut x, patches) = self.embed(sample);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if !block.enabled || bypass == Some(l) {
                blocks.push(None);
                continue;
            }
            let (next, cache) = block_forward(block, &x);
            blocks.push(Some(cache));
            x = next;
        }
        let logits = self.head.weight.t().dot(&x.row(0)) + &self.head.bias;
        SampleCache {
            patches,
            blocks,
            final_tokens: x,
            logits,
        }
    }

    fn tokens_after(&self, sample: ArrayView1<f64>, layers: usize, bypass: Option<usize>) -> Array2<f64> {
        let (mut x, _) = self.embed(sample);
        for (l, block) in self.blocks.iter().enumerate().take(layers) {
            if block.enabled && bypass != Some(l) {
                x = block_forward(block, &x).0;
            }
        }
        x
    }

    /// Logits for every row of `batch`, optionally with a unit activation trace.
    pub fn forward(&self, batch: ArrayView2<f64>, trace: bool) -> Result<ForwardOutput> {
        self.forward_with_bypass(batch, trace, None)
    }

    /// Like [`Model::forward`], but treats block `bypass` as disabled.
    pub fn forward_with_bypass(&self, batch: ArrayView2<f64>, trace: bool, bypass: Option<usize>) -> Result<ForwardOutput> {
        self.check_batch(&batch)?;
        if let Some(l) = bypass {
            if l >= self.blocks.len() {
                return Err(TapError::invalid(format!("bypass layer {l} out of range")));
            }
        }
        let n = batch.nrows();
        let mut logits = Array2::zeros((n, self.num_classes()));
        let mut layers: Vec<Option<LayerTrace>> = if trace {
            self.blocks
                .iter()
                .enumerate()
                .map(|(l, b)| {
                    (b.enabled && bypass != Some(l)).then(|| LayerTrace {
                        ffn: Array2::zeros((n, b.ffn.width())),
                        mha: Array2::zeros((n, b.attn.channels())),
                    })
                })
                .collect()
        } else {
            Vec::new()
        };
        let per_sample: Vec<(Array1<f64>, Vec<Option<(Array1<f64>, Array1<f64>)>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (mut x, _) = self.embed(batch.row(i));
                let mut units = Vec::with_capacity(if trace { self.blocks.len() } else { 0 });
                for (l, block) in self.blocks.iter().enumerate() {
                    if !block.enabled || bypass == Some(l) {
                        if trace {
                            units.push(None);
                        }
                        continue;
                    }
                    let (next, cache) = block_forward(block, &x);
                    if trace {
                        units.push(Some((
                            cache.h.mean_axis(Axis(0)).expect("tokens > 0"),
                            cache.o.mean_axis(Axis(0)).expect("tokens > 0"),
                        )));
                    }
                    x = next;
                }
                (self.head.weight.t().dot(&x.row(0)) + &self.head.bias, units)
            })
            .collect();
        for (i, (out, units)) in per_sample.into_iter().enumerate() {
            logits.row_mut(i).assign(&out);
            for (l, u) in units.into_iter().enumerate() {
                if let (Some((ffn, mha)), Some(Some(t))) = (u, layers.get_mut(l)) {
                    t.ffn.row_mut(i).assign(&ffn);
                    t.mha.row_mut(i).assign(&mha);
                }
            }
        }
        Ok(ForwardOutput {
            logits,
            trace: trace.then_some(ActivationTrace { layers }),
        })
    }

    /// Class-token representation after the first `layers` blocks, one row per sample.
    /// `layers == num_layers()` gives the features the head sees.
    pub fn class_embeddings(&self, batch: ArrayView2<f64>, layers: usize) -> Result<Array2<f64>> {
        self.check_batch(&batch)?;
        if layers > self.blocks.len() {
            return Err(TapError::invalid(format!(
                "embedding layer {layers} exceeds model depth {}",
                self.blocks.len()
            )));
        }
        let rows: Vec<Array1<f64>> = (0..batch.nrows())
            .into_par_iter()
            .map(|i| self.tokens_after(batch.row(i), layers, None).row(0).to_owned())
            .collect();
        let mut out = Array2::zeros((batch.nrows(), self.d()));
        for (i, row) in rows.iter().enumerate() {
            out.row_mut(i).assign(row);
        }
        Ok(out)
    }

    /// Attention probability matrices `(tokens, tokens)` of block `layer`, one per head.
    pub fn attention_maps(&self, sample: ArrayView1<f64>, layer: usize) -> Result<Vec<Array2<f64>>> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| TapError::invalid(format!("layer {layer} out of range")))?;
        let x = self.tokens_after(sample, layer, None);
        Ok(block_forward(block, &x).1.probs)
    }

    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Vec<usize>> {
        let out = self.forward(batch, false)?;
        Ok(argmax_rows(&out.logits))
    }

    pub fn accuracy(&self, batch: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        if labels.len() != batch.nrows() {
            return Err(TapError::shape("labels", batch.nrows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(TapError::invalid("accuracy of an empty batch"));
        }
        let pred = self.predict(batch)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

pub fn argmax_rows(x: &Array2<f64>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
