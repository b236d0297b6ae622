//! Minimal deterministic vision transformer.
//!
//! Pre-norm encoder blocks (`x + MHA(LN(x))`, then `x + FFN(LN(x))`), a class
//! token read out by a linear head, and no final norm. Linear maps store their
//! weight as `(in, out)` so a row vector is multiplied on the left.
//!
//! Prunable units per block are the FFN hidden units followed by the
//! attention value channels (the inputs of the output projection). Value
//! channels can be removed one at a time; a head disappears together with its
//! query/key columns once it has no value channels left.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{cross_entropy, head_gradient, head_step, Adam, HeadGradient, ModelGrads, TrainScope};
pub use forward::{ActivationTrace, ForwardOutput, LayerTrace};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters of an unpruned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Token dimension.
    pub d: usize,
    /// FFN hidden width before pruning.
    pub d_prime: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 || self.num_classes == 0 || self.channels == 0 {
            return Err(TapError::invalid("d, d_prime, channels and num_classes must be >= 1"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(TapError::invalid(format!(
                "head count {} must be >= 1 and divide d = {}",
                self.heads, self.d
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TapError::invalid(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        Ok(())
    }
}

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn uniform(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((input, output), || rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..=bound));
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

/// Multi-head self-attention with per-head value widths.
///
/// `query`/`key` map `d -> heads * head_dim`; `value` maps `d -> sum(value_widths)`
/// and `output` maps that back to `d`. Head `h` owns value columns
/// `value_offset(h) .. value_offset(h) + value_widths[h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub head_dim: usize,
    pub value_widths: Vec<usize>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    pub fn heads(&self) -> usize {
        self.value_widths.len()
    }

    pub fn channels(&self) -> usize {
        self.value_widths.iter().sum()
    }

    pub fn value_offset(&self, head: usize) -> usize {
        self.value_widths[..head].iter().sum()
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count() + self.key.param_count() + self.value.param_count() + self.output.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn width(&self) -> usize {
        self.fc1.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    /// A disabled block passes its input through unchanged.
    pub enabled: bool,
}

impl Block {
    /// Number of prunable units: FFN hidden units then attention value channels.
    pub fn unit_count(&self) -> usize {
        self.ffn.width() + self.attn.channels()
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count()
            + self.attn.param_count()
            + self.norm2.param_count()
            + self.ffn.fc1.param_count()
            + self.ffn.fc2.param_count()
    }
}

/// Which sub-module a prunable unit belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Ffn,
    Mha,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub class_token: Array1<f64>,
    /// `(tokens, d)`, row 0 belongs to the class token.
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

impl Model {
    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let head_dim = d / config.heads;
        let tok_bound = 1.0 / (d as f64).sqrt();

        let patch_embed = Linear::uniform(config.patch_dim(), d, &mut rng);
        let class_token = Array1::from_shape_simple_fn(d, || rng.random_range(-tok_bound..=tok_bound));
        let pos_embed = Array2::from_shape_simple_fn((config.tokens(), d), || rng.random_range(-tok_bound..=tok_bound));
        let blocks = (0..config.layers)
            .map(|_| Block {
                norm1: LayerNorm::identity(d),
                attn: Attention {
                    head_dim,
                    value_widths: vec![head_dim; config.heads],
                    query: Linear::uniform(d, d, &mut rng),
                    key: Linear::uniform(d, d, &mut rng),
                    value: Linear::uniform(d, d, &mut rng),
                    output: Linear::uniform(d, d, &mut rng),
                },
                norm2: LayerNorm::identity(d),
                ffn: FeedForward {
                    fc1: Linear::uniform(d, config.d_prime, &mut rng),
                    fc2: Linear::uniform(config.d_prime, d, &mut rng),
                },
                enabled: true,
            })
            .collect();
        let head = Linear::uniform(d, config.num_classes, &mut rng);
        Ok(Self {
            config,
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            head,
        })
    }

    /// A model whose every parameter is zero (layer norms included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut model = Self::init(config)?;
        model.map_params(|_| 0.0);
        Ok(model)
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    /// Scalar weights in the embedding, every enabled block, and the head.
    pub fn param_count(&self) -> usize {
        let embed = self.patch_embed.param_count() + self.class_token.len() + self.pos_embed.len();
        let blocks: usize = self.blocks.iter().filter(|b| b.enabled).map(Block::param_count).sum();
        embed + blocks + self.head.param_count()
    }

    /// Checks every structural invariant, naming the first offending layer.
    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        let c = &self.config;
        if self.patch_embed.weight.dim() != (c.patch_dim(), d) || self.patch_embed.bias.len() != d {
            return Err(TapError::shape(
                "patch_embed",
                format!("({}, {d})", c.patch_dim()),
                format!("{:?}", self.patch_embed.weight.dim()),
            ));
        }
        if self.class_token.len() != d {
            return Err(TapError::shape("class_token", d, self.class_token.len()));
        }
        if self.pos_embed.dim() != (c.tokens(), d) {
            return Err(TapError::shape(
                "pos_embed",
                format!("({}, {d})", c.tokens()),
                format!("{:?}", self.pos_embed.dim()),
            ));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let loc = |part: &str| format!("layer {l} {part}");
            let a = &b.attn;
            let qk = a.heads() * a.head_dim;
            let ch = a.channels();
            if a.value_widths.iter().any(|&w| w == 0) {
                return Err(TapError::invalid(format!("layer {l}: attention head with zero value width")));
            }
            for (name, lin, shape) in [
                ("query", &a.query, (d, qk)),
                ("key", &a.key, (d, qk)),
                ("value", &a.value, (d, ch)),
                ("output", &a.output, (ch, d)),
                ("fc1", &b.ffn.fc1, (d, b.ffn.width())),
                ("fc2", &b.ffn.fc2, (b.ffn.width(), d)),
            ] {
                if lin.weight.dim() != shape || lin.bias.len() != shape.1 {
                    return Err(TapError::shape(
                        loc(name),
                        format!("{shape:?}"),
                        format!("{:?}", lin.weight.dim()),
                    ));
                }
            }
            if b.ffn.width() == 0 {
                return Err(TapError::invalid(format!("layer {l}: FFN width is zero")));
            }
            for (name, ln) in [("norm1", &b.norm1), ("norm2", &b.norm2)] {
                if ln.gamma.len() != d || ln.beta.len() != d {
                    return Err(TapError::shape(loc(name), d, ln.gamma.len()));
                }
            }
        }
        if self.head.input_dim() != d {
            return Err(TapError::shape("head", d, self.head.input_dim()));
        }
        Ok(())
    }

    /// Applies `f` to every scalar parameter in a fixed order.
    pub fn map_params(&mut self, mut f: impl FnMut(f64) -> f64) {
        self.for_each_param_mut(|p| *p = f(*p));
    }

    pub(crate) fn flat_len(mut self) -> usize {
        let mut n = 0;
        self.for_each_param_mut(|_| n += 1);
        n
    }

    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let lin = |l: &mut Linear, f: &mut dyn FnMut(&mut f64)| {
            l.weight.iter_mut().for_each(&mut *f);
            l.bias.iter_mut().for_each(&mut *f);
        };
        lin(&mut self.patch_embed, &mut f);
        self.class_token.iter_mut().for_each(&mut f);
        self.pos_embed.iter_mut().for_each(&mut f);
        for b in &mut self.blocks {
            b.norm1.gamma.iter_mut().for_each(&mut f);
            b.norm1.beta.iter_mut().for_each(&mut f);
            lin(&mut b.attn.query, &mut f);
            lin(&mut b.attn.key, &mut f);
            lin(&mut b.attn.value, &mut f);
            lin(&mut b.attn.output, &mut f);
            b.norm2.gamma.iter_mut().for_each(&mut f);
            b.norm2.beta.iter_mut().for_each(&mut f);
            lin(&mut b.ffn.fc1, &mut f);
            lin(&mut b.ffn.fc2, &mut f);
        }
        lin(&mut self.head, &mut f);
    }

    /// Splits one flattened `(channels, H, W)` image into raster-ordered
    /// patches, each flattened as `(channel, row, col)`.
    pub fn patchify(&self, sample: &[f64]) -> Array2<f64> {
        let c = &self.config;
        let side = c.image_size / c.patch_size;
        let p = c.patch_size;
        let hw = c.image_size * c.image_size;
        let mut out = Array2::zeros((c.num_patches(), c.patch_dim()));
        for py in 0..side {
            for px in 0..side {
                let row = py * side + px;
                let mut col = 0;
                for ch in 0..c.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = py * p + dy;
                            let x = px * p + dx;
                            out[[row, col]] = sample[ch * hw + y * c.image_size + x];
                            col += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        d: 4,
        d_prime: 8,
        heads: 2,
        layers,
        num_classes: 3,
        seed,
    }
}
