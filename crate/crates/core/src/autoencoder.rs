//! Main analysis transform (image to visual latent) and synthesis transform
//! (latent to image).
//!
//! Both have four stages. An analysis stage is a stride-2 3x3 convolution
//! followed by a residual block; the last stage emits `M` channels. A
//! synthesis stage is a residual block followed by a stride-2 transposed
//! convolution; the last stage emits RGB. Parameter names follow
//! `ga3.stage{i}.conv.{w|b}`, `ga3.stage{i}.res.conv{1|2}.{w|b}`,
//! `gs.stage{i}.res.conv{1|2}.{w|b}` and `gs.stage{i}.tconv.{w|b}`.

use crate::config::{ModelConfig, PAD_MULTIPLE, Y_DOWNSAMPLE};
use crate::error::{Result, SelicError};
use crate::nn::layers::{conv, conv_specs, residual, residual_specs, tconv_specs, tconv_up2};
use crate::nn::{Ctx, ParamSpec, Scalar, Tensor, Var};

pub const STAGES: usize = 4;

/// The image-derived latent, `[1, M, H/16, W/16]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualLatent(pub Tensor<f32>);

pub fn analysis_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (n, m) = (cfg.n_filters, cfg.latent_channels);
    let mut specs = Vec::new();
    for i in 0..STAGES {
        let cin = if i == 0 { 3 } else { n };
        let cout = if i + 1 == STAGES { m } else { n };
        specs.extend(conv_specs(&format!("ga3.stage{i}.conv"), cin, cout, 3));
        specs.extend(residual_specs(&format!("ga3.stage{i}.res"), cout));
    }
    specs
}

pub fn synthesis_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (n, m) = (cfg.n_filters, cfg.latent_channels);
    let mut specs = Vec::new();
    for i in 0..STAGES {
        let cin = if i == 0 { m } else { n };
        let cout = if i + 1 == STAGES { 3 } else { n };
        specs.extend(residual_specs(&format!("gs.stage{i}.res"), cin));
        specs.extend(tconv_specs(&format!("gs.stage{i}.tconv"), cin, cout, 3));
    }
    specs
}

/// `x: [B, 3, H, W]` with `H` and `W` multiples of 64.
pub fn analyze<F: Scalar>(ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
    let (_, c, h, w) = ctx.value(x).dims4()?;
    if c != 3 {
        return Err(SelicError::Shape(format!("analysis expects 3 channels, got {c}")));
    }
    if h == 0 || w == 0 || h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
        return Err(SelicError::Shape(format!(
            "image {h}x{w} is not a multiple of {PAD_MULTIPLE}; pad it first"
        )));
    }
    let mut t = x;
    for i in 0..STAGES {
        t = conv(ctx, &format!("ga3.stage{i}.conv"), t, 2)?;
        t = residual(ctx, &format!("ga3.stage{i}.res"), t)?;
    }
    debug_assert_eq!(ctx.value(t).shape()[2] * Y_DOWNSAMPLE, h);
    Ok(t)
}

/// `y: [B, M, h, w]` to an unclamped reconstruction `[B, 3, 16h, 16w]`.
pub fn synthesize<F: Scalar>(ctx: &mut Ctx<'_, F>, y: Var, cfg: &ModelConfig) -> Result<Var> {
    let (_, c, _, _) = ctx.value(y).dims4()?;
    if c != cfg.latent_channels {
        return Err(SelicError::Shape(format!(
            "synthesis expects {} latent channels, got {c}",
            cfg.latent_channels
        )));
    }
    let mut t = y;
    for i in 0..STAGES {
        t = residual(ctx, &format!("gs.stage{i}.res"), t)?;
        t = tconv_up2(ctx, &format!("gs.stage{i}.tconv"), t)?;
    }
    Ok(t)
}
