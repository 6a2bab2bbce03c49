//! Transformer path: overlapping patch embedding, efficient self-attention with
//! sequence reduction, and Mix-FFN, composed into hierarchical stages.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, LayerNorm, Linear};
use crate::ops::conv_out_len;
use crate::params::Scope;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("patch embedding sizes must be positive".into()));
        }
        if self.kernel_size < self.stride {
            return Err(Error::Config(format!(
                "patch kernel {} smaller than stride {} leaves gaps between patches",
                self.kernel_size, self.stride
            )));
        }
        Ok(())
    }

    /// Token-grid side length for an input side of `len` pixels.
    pub fn out_side(&self, len: usize) -> Result<usize> {
        conv_out_len(len, self.kernel_size, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub reduction_ratio: usize,
    /// Zero-pad the key/value sequence up to a multiple of the reduction ratio
    /// instead of failing.
    #[serde(default = "default_true")]
    pub pad_to_ratio: bool,
}

fn default_true() -> bool {
    true
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.reduction_ratio == 0 || self.embed_dim == 0 {
            return Err(Error::Config("attention sizes must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub patch_embed: PatchEmbedConfig,
    pub attention: AttentionConfig,
    pub depth: usize,
    pub mlp_expansion: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch_embed.validate()?;
        self.attention.validate()?;
        if self.depth == 0 || self.mlp_expansion == 0 {
            return Err(Error::Config("stage depth and mlp expansion must be >= 1".into()));
        }
        if self.attention.embed_dim != self.patch_embed.embed_dim {
            return Err(Error::Config(format!(
                "attention width {} differs from patch embedding width {}",
                self.attention.embed_dim, self.patch_embed.embed_dim
            )));
        }
        Ok(())
    }
}

/// Five stride-2 stages (a 7x7 stem then 3x3 merges), giving strides 2..32.
pub fn stage_plan(
    in_channels: usize,
    dims: [usize; 5],
    depths: [usize; 5],
    heads: [usize; 5],
    ratios: [usize; 5],
    mlp_expansion: usize,
) -> Vec<StageConfig> {
    let mut prev = in_channels;
    (0..5)
        .map(|i| {
            let (kernel_size, padding) = if i == 0 { (7, 3) } else { (3, 1) };
            let cfg = StageConfig {
                patch_embed: PatchEmbedConfig {
                    kernel_size,
                    stride: 2,
                    padding,
                    in_channels: prev,
                    embed_dim: dims[i],
                },
                attention: AttentionConfig {
                    embed_dim: dims[i],
                    num_heads: heads[i],
                    reduction_ratio: ratios[i],
                    pad_to_ratio: true,
                },
                depth: depths[i],
                mlp_expansion,
            };
            prev = dims[i];
            cfg
        })
        .collect()
}

pub fn default_stages() -> Vec<StageConfig> {
    stage_plan(3, [32, 64, 128, 256, 512], [1, 2, 2, 2, 2], [1, 2, 4, 8, 8], [16, 8, 4, 2, 1], 4)
}

/// `B×C×H×W` map to `B×(H·W)×C` tokens.
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `B×N×C` tokens back onto an `h×w` grid.
pub fn tokens_to_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = tokens.dims3()?;
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens cannot fill a {h}x{w} grid")));
    }
    Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

pub struct OverlappingPatchEmbed {
    cfg: PatchEmbedConfig,
    proj: Conv2d,
    norm: LayerNorm,
}

impl OverlappingPatchEmbed {
    pub fn new(scope: &Scope, cfg: &PatchEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = ConvSpec::new(cfg.in_channels, cfg.embed_dim, cfg.kernel_size)
            .stride(cfg.stride)
            .padding(cfg.padding);
        Ok(Self {
            cfg: cfg.clone(),
            proj: Conv2d::new(&scope.pp("proj"), spec)?,
            norm: LayerNorm::new(&scope.pp("norm"), cfg.embed_dim)?,
        })
    }

    /// Returns normalized tokens `B×N×C` and the token grid size.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (_, cin, h, w) = x.dims4()?;
        if cin != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "patch embedding expects {} channels, got {cin}",
                self.cfg.in_channels
            )));
        }
        let out_h = self.cfg.out_side(h)?;
        let out_w = self.cfg.out_side(w)?;
        let map = self.proj.forward(x)?;
        let tokens = self.norm.forward(&map_to_tokens(&map)?)?;
        Ok((tokens, out_h, out_w))
    }
}

/// `Softmax(q k^T * scale) v` over the last two axes; also returns the weights.
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: f64,
) -> Result<(Tensor, Tensor)> {
    let scores = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? * scale)?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = weights.matmul(&v.contiguous()?)?;
    Ok((out, weights))
}

pub struct EfficientSelfAttention {
    cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// `Linear(C·R, C)` applied to keys after the `(N/R, C·R)` reshape.
    pub k_reduce: Linear,
    pub v_reduce: Linear,
    pub out: Linear,
}

impl EfficientSelfAttention {
    pub fn new(scope: &Scope, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let r = cfg.reduction_ratio;
        Ok(Self {
            cfg: cfg.clone(),
            q: Linear::new(&scope.pp("q"), c, c)?,
            k: Linear::new(&scope.pp("k"), c, c)?,
            v: Linear::new(&scope.pp("v"), c, c)?,
            k_reduce: Linear::new(&scope.pp("k_reduce"), c * r, c)?,
            v_reduce: Linear::new(&scope.pp("v_reduce"), c * r, c)?,
            out: Linear::new(&scope.pp("out"), c, c)?,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    /// Length of the key/value sequence after reduction.
    pub fn reduced_len(&self, n: usize) -> Result<usize> {
        let r = self.cfg.reduction_ratio;
        if n % r == 0 {
            Ok(n / r)
        } else if self.cfg.pad_to_ratio {
            Ok(n.div_ceil(r))
        } else {
            Err(Error::Divisibility { len: n, ratio: r })
        }
    }

    fn reduce(&self, x: &Tensor, proj: &Linear) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let r = self.cfg.reduction_ratio;
        let reduced = self.reduced_len(n)?;
        let padded = reduced * r;
        let x = if padded > n {
            let pad = Tensor::zeros((b, padded - n, c), x.dtype(), x.device())?;
            Tensor::cat(&[x, &pad], 1)?
        } else {
            x.clone()
        };
        proj.forward(&x.contiguous()?.reshape((b, reduced, c * r))?)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.cfg.num_heads, self.cfg.head_dim()))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Output tokens and the per-head attention weights `B×heads×N×(N/R)`.
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        if c != self.cfg.embed_dim {
            return Err(Error::Shape(format!(
                "attention expects width {}, got {c}",
                self.cfg.embed_dim
            )));
        }
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.reduce(&self.k.forward(x)?, &self.k_reduce)?)?;
        let v = self.split_heads(&self.reduce(&self.v.forward(x)?, &self.v_reduce)?)?;
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let (heads, weights) = scaled_dot_product_attention(&q, &k, &v, scale)?;
        let merged = heads.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        Ok((self.out.forward(&merged)?, weights))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

pub struct MixFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new(scope: &Scope, dim: usize, expansion: usize) -> Result<Self> {
        let hidden = dim * expansion;
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), dim, hidden)?,
            dwconv: Conv2d::new(
                &scope.pp("dwconv"),
                ConvSpec::new(hidden, hidden, 3).padding(1).groups(hidden),
            )?,
            fc2: Linear::new(&scope.pp("fc2"), hidden, dim)?,
        })
    }

    /// `MLP(GELU(Conv3x3(MLP(x))))` without the skip term.
    pub fn branch(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (_, n, _) = x.dims3()?;
        if n != h * w {
            return Err(Error::Shape(format!("{n} tokens do not match a {h}x{w} grid")));
        }
        let hidden = self.fc1.forward(x)?;
        let mixed = self.dwconv.forward(&tokens_to_map(&hidden, h, w)?)?;
        let act = map_to_tokens(&mixed)?.gelu_erf()?;
        self.fc2.forward(&act)
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok((self.branch(x, h, w)? + x)?)
    }
}

pub struct TransformerBlock {
    norm1: LayerNorm,
    pub attn: EfficientSelfAttention,
    norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl TransformerBlock {
    pub fn new(scope: &Scope, cfg: &StageConfig) -> Result<Self> {
        let c = cfg.attention.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(&scope.pp("norm1"), c)?,
            attn: EfficientSelfAttention::new(&scope.pp("attn"), &cfg.attention)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), c)?,
            ffn: MixFfn::new(&scope.pp("ffn"), c, cfg.mlp_expansion)?,
        })
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.ffn.branch(&self.norm2.forward(&x)?, h, w)?)?)
    }
}

pub struct TransformerStage {
    cfg: StageConfig,
    pub embed: OverlappingPatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl TransformerStage {
    pub fn new(scope: &Scope, cfg: &StageConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&scope.pp(format!("blocks.{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed: OverlappingPatchEmbed::new(&scope.pp("embed"), &cfg.patch_embed)?,
            blocks,
            norm: LayerNorm::new(&scope.pp("norm"), cfg.attention.embed_dim)?,
        })
    }

    pub fn config(&self) -> &StageConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_blocks(x, self.blocks.len())
    }

    /// Runs only the first `depth` blocks.
    pub fn forward_blocks(&self, x: &Tensor, depth: usize) -> Result<Tensor> {
        let (mut tokens, h, w) = self.embed.forward(x)?;
        for block in self.blocks.iter().take(depth) {
            tokens = block.forward(&tokens, h, w)?;
        }
        tokens_to_map(&self.norm.forward(&tokens)?, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn embed_cfg(k: usize, s: usize, p: usize) -> PatchEmbedConfig {
        PatchEmbedConfig {
            kernel_size: k,
            stride: s,
            padding: p,
            in_channels: 3,
            embed_dim: 8,
        }
    }

    #[test]
    fn patch_embed_side_lengths() {
        assert_eq!(embed_cfg(7, 4, 3).out_side(256).unwrap(), 64);
        assert_eq!(embed_cfg(3, 2, 1).out_side(64).unwrap(), 32);
        assert!(matches!(embed_cfg(7, 4, 0).out_side(6), Err(Error::Dimension(_))));
    }

    #[test]
    fn patch_embed_rejects_channel_mismatch_and_gaps() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let pe = OverlappingPatchEmbed::new(&store.root(), &embed_cfg(3, 2, 1)).unwrap();
        let x = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(pe.forward(&x), Err(Error::Config(_))));
        assert!(embed_cfg(2, 4, 0).validate().is_err());
    }

    #[test]
    fn reduction_shapes_follow_sequence_ratio() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let cfg = AttentionConfig {
            embed_dim: 64,
            num_heads: 1,
            reduction_ratio: 4,
            pad_to_ratio: false,
        };
        let attn = EfficientSelfAttention::new(&store.root(), &cfg).unwrap();
        assert_eq!(attn.reduced_len(4096).unwrap(), 1024);
        assert_eq!(attn.k_reduce.weight.dims(), &[64, 256]);
        assert!(matches!(attn.reduced_len(4097), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn padded_reduction_keeps_query_length() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let cfg = AttentionConfig {
            embed_dim: 8,
            num_heads: 2,
            reduction_ratio: 4,
            pad_to_ratio: true,
        };
        let attn = EfficientSelfAttention::new(&store.root(), &cfg).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 9, 8), &Device::Cpu).unwrap();
        let (y, w) = attn.forward_with_weights(&x).unwrap();
        assert_eq!(y.dims(), &[2, 9, 8]);
        assert_eq!(w.dims(), &[2, 2, 9, 3]);
    }

    #[test]
    fn identical_values_pass_through() {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f64, 1.0, (1, 1, 5, 4), &dev).unwrap();
        let k = Tensor::randn(0f64, 1.0, (1, 1, 3, 4), &dev).unwrap();
        let row = Tensor::new(&[0.5f64, -1.0, 2.0, 0.25], &dev).unwrap();
        let v = row.reshape((1, 1, 1, 4)).unwrap().broadcast_as((1, 1, 3, 4)).unwrap();
        let (out, _) = scaled_dot_product_attention(&q, &k, &v, 0.5).unwrap();
        for r in out.reshape((5, 4)).unwrap().to_vec2::<f64>().unwrap() {
            for (a, b) in r.iter().zip([0.5, -1.0, 2.0, 0.25]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_plan_has_stride_two_stages() {
        let plan = default_stages();
        assert_eq!(plan.len(), 5);
        let mut side = 256;
        for st in &plan {
            st.validate().unwrap();
            let next = st.patch_embed.out_side(side).unwrap();
            assert_eq!(next * 2, side);
            side = next;
        }
        let dims: Vec<_> = plan.iter().map(|s| s.attention.embed_dim).collect();
        assert_eq!(dims, vec![32, 64, 128, 256, 512]);
    }
}
