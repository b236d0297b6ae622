//! Model checkpoints in the shared binary container.
//!
//! Header fields: `version, d, d_prime, heads, layers, num_classes, seed`
//! plus the patch geometry and a per-block structure list (pruned models have
//! per-layer widths). Tensors follow in parameter order; weights are `(in, out)`.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Attention, Block, FeedForward, LayerNorm, Linear, Model, ModelConfig};
use crate::container::{Container, Tensor};
use crate::error::{Result, TapError};
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockLayout {
    enabled: bool,
    head_dim: usize,
    ffn_width: usize,
    value_widths: Vec<usize>,
}

fn push_linear(c: &mut Container, name: &str, l: &Linear) {
    c.push(Tensor::new(
        format!("{name}.weight"),
        vec![l.weight.nrows(), l.weight.ncols()],
        l.weight.iter().copied().collect(),
    ));
    c.push(Tensor::new(format!("{name}.bias"), vec![l.bias.len()], l.bias.to_vec()));
}

fn push_vec(c: &mut Container, name: &str, v: &Array1<f64>) {
    c.push(Tensor::new(name, vec![v.len()], v.to_vec()));
}

fn take_linear(c: &mut Container, name: &str, input: usize, output: usize) -> Result<Linear> {
    let w = c.take(&format!("{name}.weight"), &[input, output])?;
    let b = c.take(&format!("{name}.bias"), &[output])?;
    Ok(Linear {
        weight: Array2::from_shape_vec((input, output), w).expect("shape checked"),
        bias: Array1::from(b),
    })
}

fn take_vec(c: &mut Container, name: &str, len: usize) -> Result<Array1<f64>> {
    Ok(Array1::from(c.take(name, &[len])?))
}

impl Model {
    pub fn to_container(&self) -> Container {
        let cfg = &self.config;
        let mut c = Container::default();
        let h = &mut c.header;
        h.insert("version".into(), FORMAT_VERSION.into());
        h.insert("kind".into(), "model".into());
        h.insert("d".into(), cfg.d.into());
        h.insert("d_prime".into(), cfg.d_prime.into());
        h.insert("heads".into(), cfg.heads.into());
        h.insert("layers".into(), self.blocks.len().into());
        h.insert("num_classes".into(), cfg.num_classes.into());
        h.insert("seed".into(), cfg.seed.into());
        h.insert("image_size".into(), cfg.image_size.into());
        h.insert("patch_size".into(), cfg.patch_size.into());
        h.insert("channels".into(), cfg.channels.into());
        let layout: Vec<BlockLayout> = self
            .blocks
            .iter()
            .map(|b| BlockLayout {
                enabled: b.enabled,
                head_dim: b.attn.head_dim,
                ffn_width: b.ffn.width(),
                value_widths: b.attn.value_widths.clone(),
            })
            .collect();
        h.insert("blocks".into(), serde_json::to_value(layout).expect("layout serializes"));

        push_linear(&mut c, "patch_embed", &self.patch_embed);
        push_vec(&mut c, "class_token", &self.class_token);
        c.push(Tensor::new(
            "pos_embed",
            vec![self.pos_embed.nrows(), self.pos_embed.ncols()],
            self.pos_embed.iter().copied().collect(),
        ));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}");
            push_vec(&mut c, &format!("{p}.norm1.gamma"), &b.norm1.gamma);
            push_vec(&mut c, &format!("{p}.norm1.beta"), &b.norm1.beta);
            push_linear(&mut c, &format!("{p}.attn.query"), &b.attn.query);
            push_linear(&mut c, &format!("{p}.attn.key"), &b.attn.key);
            push_linear(&mut c, &format!("{p}.attn.value"), &b.attn.value);
            push_linear(&mut c, &format!("{p}.attn.output"), &b.attn.output);
            push_vec(&mut c, &format!("{p}.norm2.gamma"), &b.norm2.gamma);
            push_vec(&mut c, &format!("{p}.norm2.beta"), &b.norm2.beta);
            push_linear(&mut c, &format!("{p}.ffn.fc1"), &b.ffn.fc1);
            push_linear(&mut c, &format!("{p}.ffn.fc2"), &b.ffn.fc2);
        }
        push_linear(&mut c, "head", &self.head);
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let version = c.header_usize("version")?;
        if version as u32 != FORMAT_VERSION {
            return Err(TapError::Format {
                path: None,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let config = ModelConfig {
            image_size: c.header_usize("image_size")?,
            patch_size: c.header_usize("patch_size")?,
            channels: c.header_usize("channels")?,
            d: c.header_usize("d")?,
            d_prime: c.header_usize("d_prime")?,
            heads: c.header_usize("heads")?,
            layers: c.header_usize("layers")?,
            num_classes: c.header_usize("num_classes")?,
            seed: c.header.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
        };
        config.validate()?;
        let layout: Vec<BlockLayout> =
            serde_json::from_value(c.header.get("blocks").cloned().ok_or_else(|| TapError::Format {
                path: None,
                reason: "header has no blocks".into(),
            })?)?;
        if layout.len() != config.layers {
            return Err(TapError::shape("checkpoint blocks", config.layers, layout.len()));
        }
        let d = config.d;
        let patch_embed = take_linear(&mut c, "patch_embed", config.patch_dim(), d)?;
        let class_token = take_vec(&mut c, "class_token", d)?;
        let pos = c.take("pos_embed", &[config.tokens(), d])?;
        let pos_embed = Array2::from_shape_vec((config.tokens(), d), pos).expect("shape checked");
        let mut blocks = Vec::with_capacity(layout.len());
        for (l, lay) in layout.into_iter().enumerate() {
            let p = format!("blocks.{l}");
            let qk = lay.value_widths.len() * lay.head_dim;
            let ch: usize = lay.value_widths.iter().sum();
            let norm1 = LayerNorm {
                gamma: take_vec(&mut c, &format!("{p}.norm1.gamma"), d)?,
                beta: take_vec(&mut c, &format!("{p}.norm1.beta"), d)?,
            };
            let attn = Attention {
                head_dim: lay.head_dim,
                query: take_linear(&mut c, &format!("{p}.attn.query"), d, qk)?,
                key: take_linear(&mut c, &format!("{p}.attn.key"), d, qk)?,
                value: take_linear(&mut c, &format!("{p}.attn.value"), d, ch)?,
                output: take_linear(&mut c, &format!("{p}.attn.output"), ch, d)?,
                value_widths: lay.value_widths,
            };
            let norm2 = LayerNorm {
                gamma: take_vec(&mut c, &format!("{p}.norm2.gamma"), d)?,
                beta: take_vec(&mut c, &format!("{p}.norm2.beta"), d)?,
            };
            let ffn = FeedForward {
                fc1: take_linear(&mut c, &format!("{p}.ffn.fc1"), d, lay.ffn_width)?,
                fc2: take_linear(&mut c, &format!("{p}.ffn.fc2"), lay.ffn_width, d)?,
            };
            blocks.push(Block {
                norm1,
                attn,
                norm2,
                ffn,
                enabled: lay.enabled,
            });
        }
        let head = take_linear(&mut c, "head", d, config.num_classes)?;
        let model = Model {
            config,
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}
