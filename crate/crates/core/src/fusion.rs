//! Text-image latent fusion.
//!
//! The raw text embedding is projected to an `M`-vector, broadcast over the
//! latent grid and combined with the visual latent. The combined tensor (the
//! "tap") then passes through a refinement residual block that restores `M`
//! channels: a 1x1 convolution to `M`, a leaky ReLU, a 3x3 convolution, and
//! a 1x1-projected shortcut. The block is the same for all strategies except
//! for its input width (`2M` for concatenation, `M` otherwise).

use std::fmt;
use std::str::FromStr;

use crate::config::ModelConfig;
use crate::error::{Result, SelicError};
use crate::nn::layers::{conv, conv_specs, linear, linear_specs, LEAKY_SLOPE};
use crate::nn::{Ctx, ParamSpec, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum FusionStrategy {
    #[default]
    ChannelConcat,
    ElementwiseAdd,
    ElementwiseMul,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] =
        [FusionStrategy::ElementwiseMul, FusionStrategy::ElementwiseAdd, FusionStrategy::ChannelConcat];

    pub fn tag(self) -> u8 {
        match self {
            FusionStrategy::ChannelConcat => 0,
            FusionStrategy::ElementwiseAdd => 1,
            FusionStrategy::ElementwiseMul => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FusionStrategy::ChannelConcat),
            1 => Some(FusionStrategy::ElementwiseAdd),
            2 => Some(FusionStrategy::ElementwiseMul),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionStrategy::ChannelConcat => "Channel Concatenation",
            FusionStrategy::ElementwiseAdd => "Element-wise Addition",
            FusionStrategy::ElementwiseMul => "Element-wise Multiplication",
        }
    }

    /// Channels entering the refinement block.
    pub fn refine_in_channels(self, m: usize) -> usize {
        match self {
            FusionStrategy::ChannelConcat => 2 * m,
            _ => m,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::ChannelConcat => "concat",
            FusionStrategy::ElementwiseAdd => "add",
            FusionStrategy::ElementwiseMul => "mul",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = SelicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "channel_concat" => Ok(FusionStrategy::ChannelConcat),
            "add" | "elementwise_add" => Ok(FusionStrategy::ElementwiseAdd),
            "mul" | "elementwise_mul" => Ok(FusionStrategy::ElementwiseMul),
            other => Err(SelicError::Config(format!("unknown fusion strategy `{other}` (expected concat|add|mul)"))),
        }
    }
}

/// Projected text embedding, length `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVector(pub Vec<f32>);

/// Fused latent `y`, `[1, M, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLatent(pub Tensor<f32>);

pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let m = cfg.latent_channels;
    let cin = cfg.fusion.refine_in_channels(m);
    let mut v = linear_specs("fusion.proj.fc1", cfg.text_embed_dim, m);
    v.extend(linear_specs("fusion.proj.fc2", m, m));
    v.extend(conv_specs("fusion.refine.conv1", cin, m, 1));
    v.extend(conv_specs("fusion.refine.conv2", m, m, 3));
    v.extend(conv_specs("fusion.refine.shortcut", cin, m, 1));
    v
}

/// `[B, D]` raw embeddings to `[B, M]` semantic vectors.
pub fn project<F: Scalar>(ctx: &mut Ctx<'_, F>, raw: Var, cfg: &ModelConfig) -> Result<Var> {
    let shape = ctx.value(raw).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.text_embed_dim {
        return Err(SelicError::Shape(format!(
            "text embedding shape {shape:?}, expected [batch, {}]",
            cfg.text_embed_dim
        )));
    }
    let h = linear(ctx, "fusion.proj.fc1", raw)?;
    let h = ctx.g.leaky_relu(h, LEAKY_SLOPE);
    linear(ctx, "fusion.proj.fc2", h)
}

/// Output of [`fuse`]: the refined latent and the pre-refinement tap.
pub struct Fused {
    pub latent: Var,
    pub tap: Var,
}

pub fn fuse<F: Scalar>(ctx: &mut Ctx<'_, F>, semantic: Var, visual: Var, strategy: FusionStrategy) -> Result<Fused> {
    let (s_shape, v_shape) = (ctx.value(semantic).shape().to_vec(), ctx.value(visual).shape().to_vec());
    if s_shape != v_shape {
        return Err(SelicError::Shape(format!("semantic {s_shape:?} vs visual {v_shape:?}")));
    }
    let tap = match strategy {
        FusionStrategy::ChannelConcat => ctx.g.concat_channels(&[visual, semantic])?,
        FusionStrategy::ElementwiseAdd => ctx.g.add(visual, semantic)?,
        FusionStrategy::ElementwiseMul => ctx.g.mul(visual, semantic)?,
    };
    let h = conv(ctx, "fusion.refine.conv1", tap, 1)?;
    let h = ctx.g.leaky_relu(h, LEAKY_SLOPE);
    let h = conv(ctx, "fusion.refine.conv2", h, 1)?;
    let short = conv(ctx, "fusion.refine.shortcut", tap, 1)?;
    let latent = ctx.g.add(h, short)?;
    Ok(Fused { latent, tap })
}

/// Spatial broadcast of a single vector: `out[c, i, j] = v[c]`.
pub fn broadcast_semantic(v: &SemanticVector, h: usize, w: usize) -> Result<Tensor<f32>> {
    if h == 0 || w == 0 {
        return Err(SelicError::Shape("broadcast target must be at least 1x1".into()));
    }
    let mut data = Vec::with_capacity(v.0.len() * h * w);
    for &x in &v.0 {
        data.extend(std::iter::repeat_n(x, h * w));
    }
    Tensor::new(&[1, v.0.len(), h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_definition() {
        let t = broadcast_semantic(&SemanticVector(vec![1.0, 2.0]), 2, 2).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2, 2]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_1x1_is_identity() {
        let v = SemanticVector(vec![0.5, -1.0, 3.0]);
        assert_eq!(broadcast_semantic(&v, 1, 1).unwrap().data(), v.0.as_slice());
    }

    #[test]
    fn broadcast_zero_vector() {
        let t = broadcast_semantic(&SemanticVector(vec![0.0; 4]), 3, 5).unwrap();
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("concat".parse::<FusionStrategy>().unwrap(), FusionStrategy::ChannelConcat);
        assert_eq!("mul".parse::<FusionStrategy>().unwrap(), FusionStrategy::ElementwiseMul);
        assert!(matches!("attention".parse::<FusionStrategy>(), Err(SelicError::Config(_))));
        for s in FusionStrategy::ALL {
            assert_eq!(FusionStrategy::from_tag(s.tag()), Some(s));
        }
    }
}
