//! The complete codec network: analysis and synthesis transforms, fusion,
//! hyperprior and slice-wise entropy model, with inference helpers for the
//! deterministic rounded path and a differentiable training forward pass.

use crate::autoencoder::{self, VisualLatent};
use crate::config::{ModelConfig, PAD_MULTIPLE};
use crate::entropy::{self, GaussianParams, HyperLatent, QuantizedLatent, SliceHistory};
use crate::error::{Result, SelicError};
use crate::fusion::{self, FusedLatent, SemanticVector};
use crate::image::ImagePlane;
use crate::nn::{Ctx, ParamSpec, ParamStore, Scalar, Tensor, Var};
use crate::semantic::{RawTextEmbedding, SemanticPipeline};

/// Weights plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct SelicModel {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
}

/// Everything the rounded path computes for one latent.
#[derive(Clone, Debug)]
pub struct RoundedLatents {
    pub z: HyperLatent,
    /// `clamp(round(z))`, both as symbols and values.
    pub z_symbols: Vec<i32>,
    pub z_hat: Tensor<f32>,
    pub z_clamped: usize,
    pub slices: Vec<(GaussianParams, QuantizedLatent)>,
}

impl RoundedLatents {
    /// `y_hat` with slices concatenated back along channels.
    pub fn y_hat(&self) -> Result<Tensor<f32>> {
        let parts: Vec<&Tensor<f32>> = self.slices.iter().map(|(_, q)| &q.values).collect();
        Tensor::concat_channels(&parts)
    }

    pub fn y_clamped(&self) -> usize {
        self.slices.iter().map(|(_, q)| q.clamped).sum()
    }
}

/// Scalar nodes of one training forward pass.
pub struct RdGraph {
    pub loss: Var,
    pub bits: Var,
    pub mse: Var,
    pub x_hat: Var,
    pub pixels: usize,
}

pub fn image_to_tensor(img: &ImagePlane) -> Tensor<f32> {
    Tensor::new(&[1, 3, img.height(), img.width()], img.data().to_vec()).expect("planar layout")
}

pub fn tensor_to_image(t: &Tensor<f32>) -> Result<ImagePlane> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 || c != 3 {
        return Err(SelicError::Shape(format!("expected [1, 3, h, w], got {:?}", t.shape())));
    }
    ImagePlane::new(h, w, t.data().to_vec())
}

/// Stacks equally sized images into `[B, 3, H, W]`.
pub fn batch_tensor<F: Scalar>(images: &[ImagePlane]) -> Result<Tensor<F>> {
    let first = images.first().ok_or_else(|| SelicError::InvalidInput("empty batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(SelicError::Shape(format!("batch mixes {:?} and {:?}", (h, w), img.dims())));
        }
        data.extend(img.data().iter().map(|&v| F::from_f64(v as f64)));
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

impl SelicModel {
    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut v = autoencoder::analysis_specs(cfg);
        v.extend(autoencoder::synthesis_specs(cfg));
        v.extend(fusion::specs(cfg));
        v.extend(entropy::hyper_specs(cfg));
        v.extend(entropy::slice_specs(cfg));
        v.extend(entropy::prior_specs(cfg));
        v
    }

    /// Freshly initialized weights, seeded from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::initialize(&Self::specs(&cfg), cfg.seed);
        Ok(Self { cfg, params })
    }

    /// Wraps existing weights after checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let specs = Self::specs(&cfg);
        if specs.len() != params.len() {
            return Err(SelicError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let t = params.get(&s.name).map_err(|_| SelicError::Checkpoint(format!("missing tensor {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(SelicError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn ctx(&self) -> Ctx<'_, f32> {
        Ctx::new(&self.params, false)
    }

    /// `x` must already be padded to a multiple of 64.
    pub fn analyze(&self, x: &ImagePlane) -> Result<VisualLatent> {
        let mut ctx = self.ctx();
        let xv = ctx.input(image_to_tensor(x));
        let y = autoencoder::analyze(&mut ctx, xv)?;
        Ok(VisualLatent(ctx.value(y).clone()))
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn synthesize(&self, y_hat: &Tensor<f32>) -> Result<ImagePlane> {
        let mut ctx = self.ctx();
        let yv = ctx.input(y_hat.clone());
        let x = autoencoder::synthesize(&mut ctx, yv, &self.cfg)?;
        Ok(tensor_to_image(ctx.value(x))?.clamped())
    }

    pub fn project(&self, raw: &RawTextEmbedding) -> Result<SemanticVector> {
        let mut ctx = self.ctx();
        let r = ctx.input(Tensor::new(&[1, raw.0.len()], raw.0.clone())?);
        let v = fusion::project(&mut ctx, r, &self.cfg)?;
        Ok(SemanticVector(ctx.value(v).data().to_vec()))
    }

    /// Fused latent and the pre-refinement tap.
    pub fn fuse_with_tap(&self, semantic: &Tensor<f32>, visual: &VisualLatent) -> Result<(FusedLatent, Tensor<f32>)> {
        let mut ctx = self.ctx();
        let s = ctx.input(semantic.clone());
        let v = ctx.input(visual.0.clone());
        let f = fusion::fuse(&mut ctx, s, v, self.cfg.fusion)?;
        Ok((FusedLatent(ctx.value(f.latent).clone()), ctx.value(f.tap).clone()))
    }

    /// `y` from a visual latent and an optional semantic vector. With the
    /// semantic branch disabled `y` is the visual latent itself.
    pub fn fuse(&self, visual: &VisualLatent, semantic: Option<&SemanticVector>) -> Result<FusedLatent> {
        if !self.cfg.semantic_enabled {
            return Ok(FusedLatent(visual.0.clone()));
        }
        let semantic =
            semantic.ok_or_else(|| SelicError::InvalidInput("semantic vector required by this model".into()))?;
        let (_, _, h, w) = visual.0.dims4()?;
        let b = fusion::broadcast_semantic(semantic, h, w)?;
        Ok(self.fuse_with_tap(&b, visual)?.0)
    }

    /// Encoder front end: pads, runs the semantic branch on the unpadded
    /// image if enabled, and returns `y`.
    pub fn latent(&self, image: &ImagePlane, pipeline: Option<&SemanticPipeline>) -> Result<FusedLatent> {
        let (padded, _) = image.pad_to_multiple(PAD_MULTIPLE)?;
        let visual = self.analyze(&padded)?;
        let semantic = if self.cfg.semantic_enabled {
            let p = pipeline.ok_or_else(|| {
                SelicError::BackendUnavailable("this model needs semantic backends to encode".into())
            })?;
            let (_, raw) = p.run(image)?;
            Some(self.project(&raw)?)
        } else {
            None
        };
        self.fuse(&visual, semantic.as_ref())
    }

    pub fn hyper_analyze(&self, y: &Tensor<f32>) -> Result<HyperLatent> {
        let mut ctx = self.ctx();
        let yv = ctx.input(y.clone());
        let z = entropy::hyper_analyze(&mut ctx, yv)?;
        Ok(HyperLatent(ctx.value(z).clone()))
    }

    pub fn hyper_synthesize(&self, z_hat: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut ctx = self.ctx();
        let zv = ctx.input(z_hat.clone());
        let f = entropy::hyper_synthesize(&mut ctx, zv)?;
        Ok(ctx.value(f).clone())
    }

    /// Gaussian parameters of slice `k`. `history` must expose exactly the
    /// `k` slices decoded before it.
    pub fn predict_slice_params(
        &self,
        features: &Tensor<f32>,
        history: &dyn SliceHistory,
        k: usize,
    ) -> Result<GaussianParams> {
        if history.len() != k {
            return Err(SelicError::Causality(format!(
                "slice {k} requested with {} decoded slices available",
                history.len()
            )));
        }
        let mut ctx = self.ctx();
        let f = ctx.input(features.clone());
        let earlier: Vec<Var> = (0..k).map(|i| ctx.input(history.slice(i).clone())).collect();
        let (mu, sigma) = entropy::slice_params(&mut ctx, &self.cfg, f, &earlier, k)?;
        Ok(GaussianParams { mu: ctx.value(mu).clone(), sigma: ctx.value(sigma).clone() })
    }

    /// `clamp(round(z), -levels, levels)`.
    pub fn quantize_z(&self, z: &Tensor<f32>) -> (Vec<i32>, Tensor<f32>, usize) {
        let zero = Tensor::zeros(z.shape());
        let q = entropy::quantize_round(z, &zero, self.cfg.levels).expect("same shape");
        (q.symbols, q.values, q.clamped)
    }

    /// Deterministic rounded path from `y` to `y_hat`, the one the coder
    /// reproduces.
    pub fn round_latents(&self, y: &Tensor<f32>) -> Result<RoundedLatents> {
        let (_, c, _, _) = y.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(SelicError::Shape(format!(
                "latent has {c} channels, model expects {}",
                self.cfg.latent_channels
            )));
        }
        let z = self.hyper_analyze(y)?;
        let (z_symbols, z_hat, z_clamped) = self.quantize_z(&z.0);
        let features = self.hyper_synthesize(&z_hat)?;
        let s = self.cfg.slice_width();
        let mut decoded: Vec<Tensor<f32>> = Vec::with_capacity(self.cfg.num_slices);
        let mut slices = Vec::with_capacity(self.cfg.num_slices);
        for k in 0..self.cfg.num_slices {
            let params = self.predict_slice_params(&features, &decoded, k)?;
            let yk = y.narrow_channels(k * s, s)?;
            let q = entropy::quantize_round(&yk, &params.mu, self.cfg.levels)?;
            decoded.push(q.values.clone());
            slices.push((params, q));
        }
        Ok(RoundedLatents { z, z_symbols, z_hat, z_clamped, slices })
    }

    /// `(bits_y, bits_z)`: ideal code lengths of the rounded latents.
    pub fn estimate_rate_bits(&self, y: &Tensor<f32>) -> Result<(f64, f64)> {
        let r = self.round_latents(y)?;
        Ok(self.rate_of(&r)?)
    }

    pub fn rate_of(&self, r: &RoundedLatents) -> Result<(f64, f64)> {
        let floor = self.cfg.likelihood_floor;
        let mut bits_y = 0.0;
        for (p, q) in &r.slices {
            for ((&v, &m), &s) in q.values.data().iter().zip(p.mu.data()).zip(p.sigma.data()) {
                bits_y -= entropy::likelihood(v as f64, m as f64, s as f64, floor).log2();
            }
        }
        let prior = entropy::FactorizedPrior::from_params(&self.params)?;
        let (_, c, h, w) = r.z_hat.dims4()?;
        let mut bits_z = 0.0;
        for (i, &v) in r.z_hat.data().iter().enumerate() {
            let ch = (i / (h * w)) % c;
            bits_z -= prior.likelihood(ch, v as f64, floor).log2();
        }
        Ok((bits_y, bits_z))
    }

    /// Reconstruction through the rounded path without entropy coding,
    /// cropped to the input size.
    pub fn reconstruct(&self, image: &ImagePlane, pipeline: Option<&SemanticPipeline>) -> Result<ImagePlane> {
        let y = self.latent(image, pipeline)?;
        let r = self.round_latents(&y.0)?;
        let x = self.synthesize(&r.y_hat()?)?;
        x.crop(image.height(), image.width())
    }
}

/// Builds the differentiable rate-distortion graph for one batch.
///
/// `x` is `[B, 3, H, W]`, `raw` is `[B, D]` (ignored when the semantic
/// branch is disabled), and `noise_z`/`noise_y` are the additive
/// quantization surrogates shaped like `z` and `y`. Loss is
/// `bits / (B*H*W) + lambda * 255^2 * mse` with `mse` on the unclamped
/// reconstruction.
pub fn rd_graph<F: Scalar>(
    ctx: &mut Ctx<'_, F>,
    cfg: &ModelConfig,
    x: Tensor<F>,
    raw: Option<Tensor<F>>,
    noise: &mut dyn FnMut(&[usize]) -> Tensor<F>,
) -> Result<RdGraph> {
    let (b, _, h, w) = x.dims4()?;
    let xv = ctx.input(x);
    let y3 = autoencoder::analyze(ctx, xv)?;
    let y = if cfg.semantic_enabled {
        let raw = raw.ok_or_else(|| SelicError::InvalidInput("semantic embeddings required".into()))?;
        let r = ctx.input(raw);
        let sv = fusion::project(ctx, r, cfg)?;
        let (_, _, lh, lw) = ctx.value(y3).dims4()?;
        let sb = ctx.g.broadcast_spatial(sv, lh, lw)?;
        fusion::fuse(ctx, sb, y3, cfg.fusion)?.latent
    } else {
        y3
    };
    let z = entropy::hyper_analyze(ctx, y)?;
    let uz = noise(ctx.value(z).shape());
    let uz = ctx.input(uz);
    let z_t = ctx.g.add(z, uz)?;
    let pz = entropy::prior_likelihood(ctx, cfg, z_t)?;
    let mut bit_terms = vec![(ctx.g.neg_log2_sum(pz), 1.0)];
    let features = entropy::hyper_synthesize(ctx, z_t)?;
    let s = cfg.slice_width();
    let mut noisy: Vec<Var> = Vec::with_capacity(cfg.num_slices);
    for k in 0..cfg.num_slices {
        let yk = ctx.g.narrow_channels(y, k * s, s)?;
        let u = noise(ctx.value(yk).shape());
        let u = ctx.input(u);
        let yk_t = ctx.g.add(yk, u)?;
        let (mu, sigma) = entropy::slice_params(ctx, cfg, features, &noisy, k)?;
        let p = ctx.g.gaussian_likelihood(yk_t, mu, sigma, cfg.likelihood_floor)?;
        bit_terms.push((ctx.g.neg_log2_sum(p), 1.0));
        noisy.push(yk_t);
    }
    let y_t = ctx.g.concat_channels(&noisy)?;
    let x_hat = autoencoder::synthesize(ctx, y_t, cfg)?;
    let bits = ctx.g.affine(&bit_terms)?;
    let mse = ctx.g.mse(x_hat, xv)?;
    let pixels = b * h * w;
    let loss = ctx.g.affine(&[(bits, 1.0 / pixels as f64), (mse, cfg.lambda_value * 255.0 * 255.0)])?;
    Ok(RdGraph { loss, bits, mse, x_hat, pixels })
}
