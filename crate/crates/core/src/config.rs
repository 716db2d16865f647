//! Model hyperparameters and the flat `key = value` configuration format.
//!
//! A configuration document is UTF-8 text with one `key = value` pair per
//! line. Blank lines and lines starting with `#` are ignored. Every key must
//! be consumed by some reader; leftovers are reported as unknown keys.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::coder::CoderBackend;
use crate::error::{Result, SelicError};
use crate::fusion::FusionStrategy;

/// Rate points used for training, ordered from lowest to highest rate.
pub const LAMBDA_PRESETS: [f64; 7] = [0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.06];

/// Spatial reduction between the image and the latent `y`.
pub const Y_DOWNSAMPLE: usize = 16;
/// Spatial reduction between the image and the hyper-latent `z`.
pub const Z_DOWNSAMPLE: usize = 64;
/// Images are padded to this multiple so both latents have integral shapes.
pub const PAD_MULTIPLE: usize = Z_DOWNSAMPLE;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Filters in the transform and hyper layers.
    pub n_filters: usize,
    /// Channels of the visual latent, the semantic vector and the fused latent.
    pub latent_channels: usize,
    /// Number of channel slices coded autoregressively.
    pub num_slices: usize,
    pub lambda_value: f64,
    /// Width of the raw text embedding produced by the text encoder.
    pub text_embed_dim: usize,
    pub seed: u64,
    pub fusion: FusionStrategy,
    /// `false` builds the baseline without the semantic branch and fusion.
    pub semantic_enabled: bool,
    pub coder_backend: CoderBackend,
    /// Symbols are clamped to `[-levels, levels]`.
    pub levels: u32,
    pub sigma_min: f64,
    pub likelihood_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_filters: 128,
            latent_channels: 192,
            num_slices: 8,
            lambda_value: 0.0075,
            text_embed_dim: 768,
            seed: 0,
            fusion: FusionStrategy::ChannelConcat,
            semantic_enabled: true,
            coder_backend: CoderBackend::Reference,
            levels: 255,
            sigma_min: 1e-4,
            likelihood_floor: 1e-9,
        }
    }
}

impl ModelConfig {
    /// Small preset used by tests and desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            n_filters: 32,
            latent_channels: 16,
            text_embed_dim: 32,
            ..Self::default()
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_value = lambda;
        self
    }

    pub fn slice_width(&self) -> usize {
        self.latent_channels / self.num_slices
    }

    /// Index of `lambda_value` in [`LAMBDA_PRESETS`], if it is a preset.
    pub fn lambda_preset_index(&self) -> Option<u8> {
        LAMBDA_PRESETS
            .iter()
            .position(|&l| (l - self.lambda_value).abs() <= 1e-12)
            .map(|i| i as u8)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SelicError::Config(msg));
        if self.n_filters == 0 {
            return bad("n_filters must be >= 1".into());
        }
        if self.latent_channels == 0 || self.num_slices == 0 {
            return bad("latent_channels and num_slices must be >= 1".into());
        }
        if self.latent_channels % self.num_slices != 0 {
            return bad(format!(
                "latent_channels ({}) must be divisible by num_slices ({})",
                self.latent_channels, self.num_slices
            ));
        }
        if !(self.lambda_value.is_finite() && self.lambda_value > 0.0) {
            return bad(format!("lambda must be a positive real, got {}", self.lambda_value));
        }
        if self.text_embed_dim == 0 {
            return bad("text_embed_dim must be >= 1".into());
        }
        if self.levels == 0 || self.levels > 32767 {
            return bad(format!("quant.levels out of range: {}", self.levels));
        }
        if !(self.sigma_min > 0.0) || !(self.likelihood_floor > 0.0 && self.likelihood_floor < 1.0) {
            return bad("sigma_min and likelihood_floor must be positive".into());
        }
        Ok(())
    }

    /// Reads and validates every model key from `doc`, removing them.
    pub fn take_from(doc: &mut KvDocument) -> Result<Self> {
        let d = Self::default();
        let downsample: usize = doc.take_or("downsample_factor", Y_DOWNSAMPLE)?;
        if downsample != Y_DOWNSAMPLE {
            return Err(SelicError::Config(format!(
                "downsample_factor is fixed at {Y_DOWNSAMPLE}, got {downsample}"
            )));
        }
        let cfg = Self {
            n_filters: doc.take_or("n_filters", d.n_filters)?,
            latent_channels: doc.take_or("latent_channels", d.latent_channels)?,
            num_slices: doc.take_or("num_slices", d.num_slices)?,
            lambda_value: doc.take_or("lambda", d.lambda_value)?,
            text_embed_dim: doc.take_or("text_embed_dim", d.text_embed_dim)?,
            seed: doc.take_or("seed", d.seed)?,
            fusion: doc.take_or("fusion.kind", d.fusion)?,
            semantic_enabled: doc.take_or("semantic.enabled", d.semantic_enabled)?,
            coder_backend: doc.take_or("coder.backend", d.coder_backend)?,
            levels: doc.take_or("quant.levels", d.levels)?,
            sigma_min: doc.take_or("quant.sigma_min", d.sigma_min)?,
            likelihood_floor: doc.take_or("quant.likelihood_floor", d.likelihood_floor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDocument::parse(text)?;
        let cfg = Self::take_from(&mut doc)?;
        doc.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_filters = {}", self.n_filters);
        let _ = writeln!(s, "latent_channels = {}", self.latent_channels);
        let _ = writeln!(s, "num_slices = {}", self.num_slices);
        let _ = writeln!(s, "lambda = {}", self.lambda_value);
        let _ = writeln!(s, "text_embed_dim = {}", self.text_embed_dim);
        let _ = writeln!(s, "downsample_factor = {}", Y_DOWNSAMPLE);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "fusion.kind = {}", self.fusion);
        let _ = writeln!(s, "semantic.enabled = {}", self.semantic_enabled);
        let _ = writeln!(s, "coder.backend = {}", self.coder_backend);
        let _ = writeln!(s, "quant.levels = {}", self.levels);
        let _ = writeln!(s, "quant.sigma_min = {}", self.sigma_min);
        let _ = writeln!(s, "quant.likelihood_floor = {}", self.likelihood_floor);
        s
    }
}

/// Parsed flat key-value document. Keys are removed as readers consume them.
#[derive(Clone, Debug, Default)]
pub struct KvDocument {
    entries: Vec<(String, String, usize)>,
}

impl KvDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SelicError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(SelicError::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.iter().any(|(ek, _, _)| ek == k) {
                return Err(SelicError::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            entries.push((k.to_string(), v.to_string(), i + 1));
        }
        Ok(Self { entries })
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| SelicError::Config(format!("key `{key}`: invalid value `{v}`: {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Fails if any key was left unconsumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.first() {
            None => Ok(()),
            Some((k, _, line)) => Err(SelicError::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}
