//! Parameterised building blocks shared by the transforms.

use super::conv::ConvGeom;
use super::graph::Var;
use super::params::{Ctx, Init, ParamSpec};
use super::tensor::Scalar;
use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn conv_specs(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), &[cout, cin, k, k], Init::FanInUniform { fan_in: cin * k * k }),
        ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros),
    ]
}

/// Transposed convolution weights are `[in, out, k, k]`; the fan-in seen by
/// each output is `in * k * k / stride^2`, approximated by `in * k * k / 4`.
pub fn tconv_specs(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}.w"),
            &[cin, cout, k, k],
            Init::FanInUniform { fan_in: (cin * k * k / 4).max(1) },
        ),
        ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros),
    ]
}

pub fn linear_specs(prefix: &str, din: usize, dout: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), &[dout, din], Init::FanInUniform { fan_in: din }),
        ParamSpec::new(format!("{prefix}.b"), &[dout], Init::Zeros),
    ]
}

/// Two 3x3 convolutions around a leaky ReLU, plus the identity shortcut.
pub fn residual_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    let mut v = conv_specs(&format!("{prefix}.conv1"), channels, channels, 3);
    v.extend(conv_specs(&format!("{prefix}.conv2"), channels, channels, 3));
    v
}

pub fn conv<F: Scalar>(ctx: &mut Ctx<'_, F>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.w"))?;
    let b = ctx.param(&format!("{prefix}.b"))?;
    let k = ctx.value(w).shape()[2];
    ctx.g.conv2d(x, w, b, ConvGeom { kernel: k, stride, pad: k / 2 })
}

/// Stride-2 transposed convolution that exactly doubles height and width.
pub fn tconv_up2<F: Scalar>(ctx: &mut Ctx<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.w"))?;
    let b = ctx.param(&format!("{prefix}.b"))?;
    let k = ctx.value(w).shape()[2];
    ctx.g.conv_transpose2d(x, w, b, ConvGeom { kernel: k, stride: 2, pad: k / 2 })
}

pub fn linear<F: Scalar>(ctx: &mut Ctx<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.w"))?;
    let b = ctx.param(&format!("{prefix}.b"))?;
    ctx.g.linear(x, w, b)
}

pub fn residual<F: Scalar>(ctx: &mut Ctx<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(ctx, &format!("{prefix}.conv1"), x, 1)?;
    let h = ctx.g.leaky_relu(h, LEAKY_SLOPE);
    let h = conv(ctx, &format!("{prefix}.conv2"), h, 1)?;
    ctx.g.add(x, h)
}
