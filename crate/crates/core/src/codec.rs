//! The `.selic` container and image-level encode/decode.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SELC"
//!      4     1  version
//!      5     1  config_id   lambda preset index, 255 if not a preset
//!      6     1  fusion_kind 0 concat, 1 add, 2 mul, 3 no semantic branch
//!      7     4  orig_h
//!     11     4  orig_w
//!     15     4  padded_h
//!     19     4  padded_w
//!     23     4  z_len
//!     27   4*S  slice_len[0..S]
//!  27+4S     .  z stream, then slice streams in order
//! ```
//!
//! Each stream is an independent rANS stream (see [`crate::coder`]). `z`
//! symbols use one table per channel from the learned prior; `y` symbols
//! are mean-centred residuals with a per-element table from `sigma`. The
//! container carries no text.

use std::borrow::Cow;

use crate::coder::{self, CdfTable, CoderBackend, StreamDecoder, TableSource};
use crate::config::{ModelConfig, PAD_MULTIPLE};
use crate::entropy::{gaussian_table, FactorizedPrior};
use crate::error::{Result, SelicError};
use crate::image::ImagePlane;
use crate::model::{RoundedLatents, SelicModel};
use crate::nn::Tensor;
use crate::semantic::SemanticPipeline;

pub const MAGIC: [u8; 4] = *b"SELC";
pub const VERSION: u8 = 1;
pub const CUSTOM_CONFIG_ID: u8 = 255;
/// `fusion_kind` value for models without the semantic branch.
pub const NO_FUSION: u8 = 3;
/// Fixed part of the header before the slice lengths.
pub const FIXED_HEADER_LEN: usize = 27;
/// Largest padded area a decoder accepts, as a guard against corrupt headers.
pub const MAX_PIXELS: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelicBitstream {
    pub version: u8,
    pub config_id: u8,
    pub fusion_kind: u8,
    pub orig_h: u32,
    pub orig_w: u32,
    pub padded_h: u32,
    pub padded_w: u32,
    pub z_stream: Vec<u8>,
    pub slice_streams: Vec<Vec<u8>>,
}

pub fn header_len(num_slices: usize) -> usize {
    FIXED_HEADER_LEN + 4 * num_slices
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| SelicError::Bitstream(format!("header truncated at byte {at}")))
}

impl SelicBitstream {
    pub fn payload_len(&self) -> usize {
        self.z_stream.len() + self.slice_streams.iter().map(Vec::len).sum::<usize>()
    }

    pub fn total_len(&self) -> usize {
        header_len(self.slice_streams.len()) + self.payload_len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&[self.version, self.config_id, self.fusion_kind]);
        for v in [self.orig_h, self.orig_w, self.padded_h, self.padded_w, self.z_stream.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.slice_streams {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.z_stream);
        for s in &self.slice_streams {
            out.extend_from_slice(s);
        }
        out
    }

    /// Parses a container written for a model with `num_slices` slices.
    pub fn from_bytes(bytes: &[u8], num_slices: usize) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(SelicError::Bitstream("not a .selic stream (bad magic)".into()));
        }
        if bytes.len() < header_len(num_slices) {
            return Err(SelicError::Bitstream(format!(
                "{} bytes is shorter than the {}-byte header",
                bytes.len(),
                header_len(num_slices)
            )));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(SelicError::Bitstream(format!("unsupported version {version}")));
        }
        let (config_id, fusion_kind) = (bytes[5], bytes[6]);
        let orig_h = read_u32(bytes, 7)?;
        let orig_w = read_u32(bytes, 11)?;
        let padded_h = read_u32(bytes, 15)?;
        let padded_w = read_u32(bytes, 19)?;
        let z_len = read_u32(bytes, 23)? as usize;
        let slice_lens: Vec<usize> =
            (0..num_slices).map(|k| read_u32(bytes, FIXED_HEADER_LEN + 4 * k).map(|v| v as usize)).collect::<Result<_>>()?;
        let expected = slice_lens.iter().try_fold(header_len(num_slices) as u64 + z_len as u64, |a, &l| {
            Some(a + l as u64)
        });
        if expected != Some(bytes.len() as u64) {
            return Err(SelicError::Bitstream(format!(
                "declared length {} does not match actual {}",
                expected.unwrap_or(u64::MAX),
                bytes.len()
            )));
        }
        let mut pos = header_len(num_slices);
        let z_stream = bytes[pos..pos + z_len].to_vec();
        pos += z_len;
        let mut slice_streams = Vec::with_capacity(num_slices);
        for l in slice_lens {
            slice_streams.push(bytes[pos..pos + l].to_vec());
            pos += l;
        }
        let s = Self { version, config_id, fusion_kind, orig_h, orig_w, padded_h, padded_w, z_stream, slice_streams };
        s.check_dims()?;
        Ok(s)
    }

    fn check_dims(&self) -> Result<()> {
        let m = PAD_MULTIPLE as u32;
        let ok = self.orig_h > 0
            && self.orig_w > 0
            && self.padded_h % m == 0
            && self.padded_w % m == 0
            && self.padded_h >= self.orig_h
            && self.padded_w >= self.orig_w
            && self.padded_h - self.orig_h < m
            && self.padded_w - self.orig_w < m
            && (self.padded_h as u64) * (self.padded_w as u64) <= MAX_PIXELS;
        if ok {
            Ok(())
        } else {
            Err(SelicError::Bitstream(format!(
                "inconsistent dimensions: original {}x{}, padded {}x{}",
                self.orig_h, self.orig_w, self.padded_h, self.padded_w
            )))
        }
    }
}

/// Encoder-side counters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeStats {
    pub estimated_bits_y: f64,
    pub estimated_bits_z: f64,
    /// `y` residuals that fell outside the alphabet and were clamped.
    pub clamped_y: usize,
    pub clamped_z: usize,
}

/// Per-element tables for one `y` slice, built on demand from `sigma`.
pub struct GaussianTables<'a> {
    pub sigma: &'a [f32],
    pub levels: u32,
}

impl TableSource for GaussianTables<'_> {
    fn len(&self) -> usize {
        self.sigma.len()
    }
    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>> {
        Ok(Cow::Owned(gaussian_table(self.sigma[i] as f64, self.levels)?))
    }
}

/// Per-channel tables for `z`, shared across the spatial grid.
pub struct ChannelTables<'a> {
    pub tables: &'a [CdfTable],
    pub plane: usize,
    pub len: usize,
}

impl TableSource for ChannelTables<'_> {
    fn len(&self) -> usize {
        self.len
    }
    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>> {
        let c = (i / self.plane) % self.tables.len();
        Ok(Cow::Borrowed(&self.tables[c]))
    }
}

fn offset_symbols(symbols: &[i32], levels: u32) -> Vec<u32> {
    symbols.iter().map(|&s| (s + levels as i32) as u32).collect()
}

fn encode_stream<T: TableSource + ?Sized>(backend: CoderBackend, symbols: &[u32], tables: &T) -> Result<Vec<u8>> {
    match coder::resolve_backend(backend) {
        CoderBackend::Reference | CoderBackend::Fast => coder::rc_encode_with(symbols, tables),
    }
}

/// Entropy-codes already rounded latents into `(z stream, slice streams)`.
pub fn encode_latents(model: &SelicModel, r: &RoundedLatents) -> Result<(Vec<u8>, Vec<Vec<u8>>)> {
    let cfg = &model.cfg;
    let prior = FactorizedPrior::from_params(&model.params)?;
    let z_tables = prior.tables(cfg.levels)?;
    let (_, _, zh, zw) = r.z_hat.dims4()?;
    let z_src = ChannelTables { tables: &z_tables, plane: zh * zw, len: r.z_symbols.len() };
    let z_stream = encode_stream(cfg.coder_backend, &offset_symbols(&r.z_symbols, cfg.levels), &z_src)?;
    let mut slices = Vec::with_capacity(r.slices.len());
    for (params, q) in &r.slices {
        let src = GaussianTables { sigma: params.sigma.data(), levels: cfg.levels };
        slices.push(encode_stream(cfg.coder_backend, &offset_symbols(&q.symbols, cfg.levels), &src)?);
    }
    Ok((z_stream, slices))
}

fn decode_symbols<'t>(
    bytes: &[u8],
    count: usize,
    levels: u32,
    table: impl Fn(usize) -> Result<Cow<'t, CdfTable>>,
) -> Result<Vec<i32>> {
    let mut dec = StreamDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = table(i)?;
        out.push(dec.decode(&t)? as i32 - levels as i32);
    }
    dec.finish()?;
    Ok(out)
}

/// Inverse of [`encode_latents`] for a padded image of `padded_h x padded_w`.
pub fn decode_latents(
    model: &SelicModel,
    padded_h: usize,
    padded_w: usize,
    z_stream: &[u8],
    slice_streams: &[Vec<u8>],
) -> Result<Tensor<f32>> {
    let cfg = &model.cfg;
    if slice_streams.len() != cfg.num_slices {
        return Err(SelicError::Bitstream(format!(
            "{} slice streams for a {}-slice model",
            slice_streams.len(),
            cfg.num_slices
        )));
    }
    let (yh, yw) = (padded_h / 16, padded_w / 16);
    let (zh, zw) = (yh / 4, yw / 4);
    let prior = FactorizedPrior::from_params(&model.params)?;
    let z_tables = prior.tables(cfg.levels)?;
    let n = cfg.n_filters;
    let z_syms = decode_symbols(z_stream, n * zh * zw, cfg.levels, |i| Ok(Cow::Borrowed(&z_tables[i / (zh * zw)])))?;
    let z_hat = Tensor::new(&[1, n, zh, zw], z_syms.iter().map(|&s| s as f32).collect())?;
    let features = model.hyper_synthesize(&z_hat)?;
    let s = cfg.slice_width();
    let mut decoded: Vec<Tensor<f32>> = Vec::with_capacity(cfg.num_slices);
    for (k, stream) in slice_streams.iter().enumerate() {
        let p = model.predict_slice_params(&features, &decoded, k)?;
        let sigma = p.sigma.data();
        let syms = decode_symbols(stream, s * yh * yw, cfg.levels, |i| {
            gaussian_table(sigma[i] as f64, cfg.levels).map(Cow::Owned)
        })?;
        let values = syms.iter().zip(p.mu.data()).map(|(&q, &m)| q as f32 + m).collect();
        decoded.push(Tensor::new(&[1, s, yh, yw], values)?);
    }
    let parts: Vec<&Tensor<f32>> = decoded.iter().collect();
    Tensor::concat_channels(&parts)
}

fn fusion_kind(cfg: &ModelConfig) -> u8 {
    if cfg.semantic_enabled {
        cfg.fusion.tag()
    } else {
        NO_FUSION
    }
}

/// Full encoder: semantic branch, transforms, rounding, entropy coding.
pub fn encode_image(
    image: &ImagePlane,
    model: &SelicModel,
    pipeline: Option<&SemanticPipeline>,
) -> Result<(SelicBitstream, EncodeStats)> {
    if image.is_empty() {
        return Err(SelicError::InvalidInput("cannot encode an empty image".into()));
    }
    let (padded, (oh, ow)) = image.pad_to_multiple(PAD_MULTIPLE)?;
    let y = model.latent(image, pipeline)?;
    let r = model.round_latents(&y.0)?;
    let (bits_y, bits_z) = model.rate_of(&r)?;
    let (z_stream, slice_streams) = encode_latents(model, &r)?;
    let stats = EncodeStats {
        estimated_bits_y: bits_y,
        estimated_bits_z: bits_z,
        clamped_y: r.y_clamped(),
        clamped_z: r.z_clamped,
    };
    if stats.clamped_y + stats.clamped_z > 0 {
        log::warn!("{} latent symbols clamped to the coder alphabet", stats.clamped_y + stats.clamped_z);
    }
    let stream = SelicBitstream {
        version: VERSION,
        config_id: model.cfg.lambda_preset_index().unwrap_or(CUSTOM_CONFIG_ID),
        fusion_kind: fusion_kind(&model.cfg),
        orig_h: oh as u32,
        orig_w: ow as u32,
        padded_h: padded.height() as u32,
        padded_w: padded.width() as u32,
        z_stream,
        slice_streams,
    };
    Ok((stream, stats))
}

/// Decoder: needs only the stream and the weights.
pub fn decode_image(stream: &SelicBitstream, model: &SelicModel) -> Result<ImagePlane> {
    stream.check_dims()?;
    if stream.fusion_kind != fusion_kind(&model.cfg) {
        return Err(SelicError::Bitstream(format!(
            "stream was produced with fusion kind {}, model uses {}",
            stream.fusion_kind,
            fusion_kind(&model.cfg)
        )));
    }
    let preset = model.cfg.lambda_preset_index().unwrap_or(CUSTOM_CONFIG_ID);
    if stream.config_id != preset {
        log::warn!("stream config id {} differs from model config id {preset}", stream.config_id);
    }
    let y_hat = decode_latents(
        model,
        stream.padded_h as usize,
        stream.padded_w as usize,
        &stream.z_stream,
        &stream.slice_streams,
    )?;
    let x = model.synthesize(&y_hat)?;
    x.crop(stream.orig_h as usize, stream.orig_w as usize)
}

pub fn decode_bytes(bytes: &[u8], model: &SelicModel) -> Result<ImagePlane> {
    decode_image(&SelicBitstream::from_bytes(bytes, model.cfg.num_slices)?, model)
}
