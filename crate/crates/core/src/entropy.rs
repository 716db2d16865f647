//! Hyperprior, factorized prior on `z`, channel-wise autoregressive
//! conditional Gaussians on `y`, quantization, and CDF table construction.
//!
//! `y` is split into `num_slices` equal channel slices. The mean and scale of
//! slice `k` come from a small convolutional network fed with the hyper
//! features and the already-quantized slices `0..k`, never later ones.
//!
//! Quantization is mean-centred: the coded symbol is `round(y - mu)` clamped
//! to `[-levels, levels]` and the reconstruction is `symbol + mu`. Because the
//! symbol is a residual, its coding distribution is the unit-bin
//! discretization of `N(0, sigma^2)` and its CDF table depends on `sigma`
//! only. See [`gaussian_pmf`] for the exact construction.

use rand::Rng;

use crate::coder::CdfTable;
use crate::config::ModelConfig;
use crate::error::{Result, SelicError};
use crate::nn::factorized::{self, ChannelPrior};
use crate::nn::layers::{conv, conv_specs, tconv_specs, tconv_up2, LEAKY_SLOPE};
use crate::nn::special::{gaussian_bin, normal_cdf};
use crate::nn::{Ctx, Init, ParamSpec, ParamStore, Scalar, Tensor, Var};

/// Edges further than this many standard deviations from the mean are
/// treated as carrying exactly 0 or 1 cumulative mass when building tables.
pub const TABLE_TAIL_SIGMAS: f64 = 8.0;

/// Hyper-latent `z`, `[1, N, h/4, w/4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperLatent(pub Tensor<f32>);

/// Conditional Gaussian parameters for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor<f32>,
    pub sigma: Tensor<f32>,
}

/// Result of rounding a slice around its predicted means.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLatent {
    /// `round(y - mu)` clamped to `[-levels, levels]`.
    pub symbols: Vec<i32>,
    /// `symbols + mu`.
    pub values: Tensor<f32>,
    /// Elements whose residual fell outside the alphabet.
    pub clamped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `[-0.5, 0.5)`, the training surrogate.
    Noise,
    /// Mean-centred rounding.
    Round,
}

pub fn hyper_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (n, m) = (cfg.n_filters, cfg.latent_channels);
    let mut v = conv_specs("ha.conv0", m, n, 3);
    v.extend(conv_specs("ha.conv1", n, n, 3));
    v.extend(tconv_specs("hs.tconv0", n, n, 3));
    v.extend(tconv_specs("hs.tconv1", n, 2 * m, 3));
    v
}

pub fn slice_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (n, m, s) = (cfg.n_filters, cfg.latent_channels, cfg.slice_width());
    let mut v = Vec::new();
    for k in 0..cfg.num_slices {
        let cin = 2 * m + k * s;
        v.extend(conv_specs(&format!("charm.slice{k}.conv0"), cin, n, 3));
        v.extend(conv_specs(&format!("charm.slice{k}.conv1"), n, n, 3));
        v.extend(conv_specs(&format!("charm.slice{k}.conv2"), n, 2 * s, 3));
    }
    v
}

pub fn prior_param_names() -> Vec<String> {
    factorized::param_shapes(1).into_iter().map(|(n, _)| format!("prior.{n}")).collect()
}

pub fn prior_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use rand::SeedableRng;
    let c = cfg.n_filters;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::nn::derive_seed(cfg.seed, "prior"));
    let noise: Vec<f64> = (0..c * 16).map(|_| rng.random_range(-0.5..0.5)).collect();
    let init = factorized::init_params(c, |i| noise[i - 1]);
    factorized::param_shapes(c)
        .into_iter()
        .zip(init)
        .map(|((name, shape), values)| ParamSpec::new(format!("prior.{name}"), &shape, Init::Values(values)))
        .collect()
}

/// `y: [B, M, h, w]` to `z: [B, N, h/4, w/4]`.
pub fn hyper_analyze<F: Scalar>(ctx: &mut Ctx<'_, F>, y: Var) -> Result<Var> {
    let (_, _, h, w) = ctx.value(y).dims4()?;
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(SelicError::Shape(format!("latent {h}x{w} is not a multiple of 4")));
    }
    let t = conv(ctx, "ha.conv0", y, 2)?;
    let t = ctx.g.leaky_relu(t, LEAKY_SLOPE);
    conv(ctx, "ha.conv1", t, 2)
}

/// `z_hat: [B, N, h, w]` to hyper features `[B, 2M, 4h, 4w]`.
pub fn hyper_synthesize<F: Scalar>(ctx: &mut Ctx<'_, F>, z_hat: Var) -> Result<Var> {
    let t = tconv_up2(ctx, "hs.tconv0", z_hat)?;
    let t = ctx.g.leaky_relu(t, LEAKY_SLOPE);
    tconv_up2(ctx, "hs.tconv1", t)
}

/// Mean and scale nodes for slice `k` from the hyper features and exactly
/// `k` earlier slices.
pub fn slice_params<F: Scalar>(
    ctx: &mut Ctx<'_, F>,
    cfg: &ModelConfig,
    features: Var,
    earlier: &[Var],
    k: usize,
) -> Result<(Var, Var)> {
    if earlier.len() != k {
        return Err(SelicError::Causality(format!(
            "slice {k} must be conditioned on exactly {k} earlier slices, got {}",
            earlier.len()
        )));
    }
    if k >= cfg.num_slices {
        return Err(SelicError::Causality(format!("slice index {k} out of range")));
    }
    let s = cfg.slice_width();
    let input = if earlier.is_empty() {
        features
    } else {
        let mut parts = vec![features];
        parts.extend_from_slice(earlier);
        ctx.g.concat_channels(&parts)?
    };
    let h = conv(ctx, &format!("charm.slice{k}.conv0"), input, 1)?;
    let h = ctx.g.leaky_relu(h, LEAKY_SLOPE);
    let h = conv(ctx, &format!("charm.slice{k}.conv1"), h, 1)?;
    let h = ctx.g.leaky_relu(h, LEAKY_SLOPE);
    let out = conv(ctx, &format!("charm.slice{k}.conv2"), h, 1)?;
    let mu = ctx.g.narrow_channels(out, 0, s)?;
    let raw = ctx.g.narrow_channels(out, s, s)?;
    let sp = ctx.g.softplus(raw);
    let sigma = ctx.g.clamp_min(sp, cfg.sigma_min);
    Ok((mu, sigma))
}

/// Per-element likelihood of `z` under the factorized prior.
pub fn prior_likelihood<F: Scalar>(ctx: &mut Ctx<'_, F>, cfg: &ModelConfig, z: Var) -> Result<Var> {
    let params = prior_param_names()
        .iter()
        .map(|n| ctx.param(n))
        .collect::<Result<Vec<_>>>()?;
    ctx.g.factorized_likelihood(z, &params, cfg.likelihood_floor)
}

/// Mean-centred rounding of `y` around `mu`.
pub fn quantize_round(y: &Tensor<f32>, mu: &Tensor<f32>, levels: u32) -> Result<QuantizedLatent> {
    if y.shape() != mu.shape() {
        return Err(SelicError::Shape(format!("y {:?} vs mu {:?}", y.shape(), mu.shape())));
    }
    let l = levels as i32;
    let mut clamped = 0;
    let mut symbols = Vec::with_capacity(y.numel());
    let mut values = Vec::with_capacity(y.numel());
    for (&v, &m) in y.data().iter().zip(mu.data()) {
        let r = (v - m).round();
        let s = if r.is_nan() {
            clamped += 1;
            0
        } else if r < -(l as f32) || r > l as f32 {
            clamped += 1;
            r.clamp(-(l as f32), l as f32) as i32
        } else {
            r as i32
        };
        symbols.push(s);
        values.push(s as f32 + m);
    }
    Ok(QuantizedLatent { symbols, values: Tensor::new(y.shape(), values)?, clamped })
}

/// Training surrogate: `y + u`, `u ~ U[-0.5, 0.5)` independently.
pub fn quantize_noise<F: Scalar, R: Rng>(y: &Tensor<F>, rng: &mut R) -> Tensor<F> {
    let data = y.data().iter().map(|&v| v + F::from_f64(rng.random_range(-0.5..0.5))).collect();
    Tensor::new(y.shape(), data).expect("same shape")
}

pub fn uniform_noise<F: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| F::from_f64(rng.random_range(-0.5..0.5))).collect()).expect("sized")
}

/// Probability of the unit bin centred on `v` under `N(mu, sigma^2)`,
/// floored at `floor`.
pub fn likelihood(v: f64, mu: f64, sigma: f64, floor: f64) -> f64 {
    gaussian_bin(v, mu, sigma).0.max(floor)
}

/// Unfloored bin probability; the sum over all integer offsets is 1.
pub fn bin_probability(v: f64, mu: f64, sigma: f64) -> f64 {
    gaussian_bin(v, mu, sigma).0
}

/// Cumulative mass of `N(0, sigma^2)` at `edge`, saturated beyond
/// [`TABLE_TAIL_SIGMAS`].
fn table_cdf(edge: f64, sigma: f64) -> f64 {
    let t = edge / sigma;
    if t < -TABLE_TAIL_SIGMAS {
        0.0
    } else if t > TABLE_TAIL_SIGMAS {
        1.0
    } else {
        normal_cdf(t)
    }
}

/// Probability of each residual symbol `s` in `-levels..=levels` (index
/// `s + levels`) under `N(0, sigma^2)`:
///
/// * interior symbols get `C(s + 0.5) - C(s - 0.5)`;
/// * the two extreme symbols additionally absorb the tail beyond them, so
///   `p(-levels) = C(-levels + 0.5)` and `p(levels) = 1 - C(levels - 0.5)`;
/// * `C` is the normal CDF, saturated to exactly 0 or 1 beyond
///   [`TABLE_TAIL_SIGMAS`] standard deviations.
///
/// [`CdfTable::from_pmf`] then turns the vector into 16-bit frequencies.
pub fn gaussian_pmf(sigma: f64, levels: u32) -> Vec<f64> {
    let l = levels as i64;
    let n = (2 * l + 1) as usize;
    let mut pmf = Vec::with_capacity(n);
    let mut lower = 0.0;
    for j in 0..n as i64 {
        let s = j - l;
        let upper = if s == l { 1.0 } else { table_cdf(s as f64 + 0.5, sigma) };
        pmf.push(upper - lower);
        lower = upper;
    }
    pmf
}

pub fn gaussian_table(sigma: f64, levels: u32) -> Result<CdfTable> {
    CdfTable::from_pmf(&gaussian_pmf(sigma, levels))
}

/// Inference-side view of the learned prior on `z`.
pub struct FactorizedPrior {
    channels: Vec<ChannelPrior>,
}

impl FactorizedPrior {
    pub fn from_params(params: &ParamStore<f32>) -> Result<Self> {
        let data: Vec<Vec<f64>> = prior_param_names()
            .iter()
            .map(|n| params.get(n).map(|t| t.data().iter().map(|&v| v as f64).collect()))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let c = params.get("prior.bias0")?.shape()[0];
        Ok(Self { channels: (0..c).map(|ch| ChannelPrior::from_params(&refs, ch)).collect() })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Floored bin probability of integer value `v` in `channel`.
    pub fn likelihood(&self, channel: usize, v: f64, floor: f64) -> f64 {
        self.channels[channel].bin(v).0.max(floor)
    }

    /// Same layout as [`gaussian_pmf`], with the learned CDF in place of `C`.
    pub fn pmf(&self, channel: usize, levels: u32) -> Vec<f64> {
        let prior = &self.channels[channel];
        let l = levels as i64;
        let n = (2 * l + 1) as usize;
        let mut pmf = Vec::with_capacity(n);
        let mut lower = 0.0;
        for j in 0..n as i64 {
            let s = j - l;
            let upper = if s == l { 1.0 } else { prior.cdf(s as f64 + 0.5) };
            pmf.push((upper - lower).max(0.0));
            lower = upper;
        }
        pmf
    }

    pub fn tables(&self, levels: u32) -> Result<Vec<CdfTable>> {
        (0..self.channels.len()).map(|c| CdfTable::from_pmf(&self.pmf(c, levels))).collect()
    }
}

/// Read access to already-decoded slices, as seen by slice prediction.
pub trait SliceHistory {
    fn len(&self) -> usize;
    fn slice(&self, i: usize) -> &Tensor<f32>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SliceHistory for [Tensor<f32>] {
    fn len(&self) -> usize {
        <[Tensor<f32>]>::len(self)
    }
    fn slice(&self, i: usize) -> &Tensor<f32> {
        &self[i]
    }
}

impl SliceHistory for Vec<Tensor<f32>> {
    fn len(&self) -> usize {
        <[Tensor<f32>]>::len(self)
    }
    fn slice(&self, i: usize) -> &Tensor<f32> {
        &self[i]
    }
}

/// History wrapper that records every slice index read through it. It can
/// expose fewer slices than it holds, so a caller handing more slices than
/// allowed to a predictor is detectable.
pub struct AccessLog<'a> {
    slices: &'a [Tensor<f32>],
    visible: usize,
    reads: std::cell::RefCell<Vec<usize>>,
}

impl<'a> AccessLog<'a> {
    pub fn new(slices: &'a [Tensor<f32>], visible: usize) -> Self {
        Self { slices, visible, reads: Default::default() }
    }

    pub fn reads(&self) -> Vec<usize> {
        self.reads.borrow().clone()
    }
}

impl SliceHistory for AccessLog<'_> {
    fn len(&self) -> usize {
        self.visible
    }
    fn slice(&self, i: usize) -> &Tensor<f32> {
        self.reads.borrow_mut().push(i);
        &self.slices[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_rule_arithmetic() {
        let y = Tensor::new(&[1], vec![3.4f32]).unwrap();
        let mu = Tensor::new(&[1], vec![0.2f32]).unwrap();
        let q = quantize_round(&y, &mu, 255).unwrap();
        assert_eq!(q.symbols, vec![3]);
        assert!((q.values.data()[0] - 3.2).abs() < 1e-6);
    }

    #[test]
    fn round_at_mean_is_zero() {
        let y = Tensor::new(&[2], vec![1.75f32, -0.3]).unwrap();
        let q = quantize_round(&y, &y, 255).unwrap();
        assert_eq!(q.symbols, vec![0, 0]);
        assert_eq!(q.values, y);
    }

    #[test]
    fn round_clamps_and_counts() {
        let y = Tensor::new(&[2], vec![1000.0f32, -1000.0]).unwrap();
        let q = quantize_round(&y, &Tensor::zeros(&[2]), 255).unwrap();
        assert_eq!(q.symbols, vec![255, -255]);
        assert_eq!(q.clamped, 2);
    }

    #[test]
    fn noise_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::<f64>::new(&[1000], (0..1000).map(|i| i as f64 * 0.01).collect()).unwrap();
        let n = quantize_noise(&y, &mut rng);
        for (a, b) in n.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 0.5 || (a - b) == -0.5);
        }
    }

    #[test]
    fn pmf_sums_to_one_with_tails_at_extremes() {
        for &s in &[1e-4, 0.3, 1.0, 7.5, 400.0] {
            let p = gaussian_pmf(s, 255);
            assert_eq!(p.len(), 511);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12, "sigma {s}");
        }
        // Half the mass of a very wide Gaussian lies beyond the alphabet.
        let wide = gaussian_pmf(1e6, 3);
        assert!(wide[0] > 0.49 && wide[6] > 0.49);
    }

    #[test]
    fn tiny_sigma_table_concentrates_on_zero() {
        let t = gaussian_table(1e-4, 255).unwrap();
        assert_eq!(t.freq(255), 65536 - 510);
    }
}
