//! Image captioning and caption embedding, the two frozen stages in front of
//! the fusion module, plus an on-disk cache for their outputs.
//!
//! Two backends exist for each stage. The stub backends are pure functions
//! of their input and a seed and need no downloads. The external backends
//! delegate to a helper program that wraps pretrained models:
//!
//! ```text
//! <program> caption <image.png>   -> caption text on stdout
//! <program> embed                 <- caption text on stdin
//!                                 -> whitespace-separated reals on stdout
//! ```
//!
//! `scripts/semantic_backend.py` in the repository implements this protocol.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Result, SelicError};
use crate::image::ImagePlane;

pub const MAX_CAPTION_TOKENS: usize = 64;

/// Environment variable naming the external backend program.
pub const BACKEND_ENV: &str = "SELIC_SEMANTIC_CMD";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    text: String,
    token_count: usize,
}

impl Caption {
    /// Normalizes whitespace and keeps at most [`MAX_CAPTION_TOKENS`] tokens.
    pub fn new(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().take(MAX_CAPTION_TOKENS).collect();
        if tokens.is_empty() {
            return Err(SelicError::InvalidInput("caption is empty".into()));
        }
        Ok(Self { text: tokens.join(" "), token_count: tokens.len() })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }
}

/// Pre-projection text embedding, length `text_embed_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTextEmbedding(pub Vec<f32>);

impl RawTextEmbedding {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.0.len() != dim {
            return Err(SelicError::Backend(format!("embedding length {} != {dim}", self.0.len())));
        }
        if !self.0.iter().all(|v| v.is_finite()) {
            return Err(SelicError::Backend("embedding has non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(Self(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()))
    }
}

pub trait Captioner: Send + Sync {
    /// Stable name used in cache keys.
    fn identity(&self) -> String;
    fn caption(&self, image: &ImagePlane) -> Result<Caption>;
    /// Number of `caption` invocations so far.
    fn calls(&self) -> usize;
    /// Digest of the backend's weights.
    fn checksum(&self) -> [u8; 32];
}

pub trait TextEncoder: Send + Sync {
    fn identity(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, caption: &Caption) -> Result<RawTextEmbedding>;
    fn calls(&self) -> usize;
    fn checksum(&self) -> [u8; 32];
}

const STUB_WORDS: [&str; 64] = [
    "a", "the", "red", "blue", "green", "small", "large", "old", "bright", "dark", "wooden", "stone", "quiet",
    "busy", "tall", "round", "house", "tree", "river", "boat", "street", "mountain", "field", "window", "door",
    "car", "bird", "dog", "cat", "flower", "sky", "cloud", "beach", "bridge", "fence", "garden", "wall", "roof",
    "child", "woman", "man", "hat", "lighthouse", "harbor", "sail", "parrot", "road", "forest", "lake", "snow",
    "with", "near", "under", "beside", "on", "in", "at", "and", "of", "sunset", "morning", "painted", "colorful",
    "white",
];

/// Content-hash captioner: the caption is rendered from
/// `SHA-256(seed || height || width || pixel bytes)`.
pub struct StubCaptioner {
    seed: u64,
    calls: AtomicUsize,
}

impl StubCaptioner {
    pub fn new(seed: u64) -> Self {
        Self { seed, calls: AtomicUsize::new(0) }
    }
}

impl Captioner for StubCaptioner {
    fn identity(&self) -> String {
        format!("stub-captioner-s{}", self.seed)
    }

    fn caption(&self, image: &ImagePlane) -> Result<Caption> {
        if image.is_empty() {
            return Err(SelicError::InvalidInput("cannot caption an empty image".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((image.height() as u64).to_le_bytes());
        h.update((image.width() as u64).to_le_bytes());
        h.update(image.to_le_bytes());
        let digest = h.finalize();
        let len = 6 + (digest[0] as usize % 7);
        let words: Vec<&str> = digest[1..=len].iter().map(|&b| STUB_WORDS[b as usize % STUB_WORDS.len()]).collect();
        Caption::new(&words.join(" "))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.identity());
        h.update(STUB_WORDS.join(" "));
        h.finalize().into()
    }
}

/// Deterministic encoder: a unit-norm Gaussian direction seeded from
/// `SHA-256(seed || caption text)`.
pub struct StubTextEncoder {
    seed: u64,
    dim: usize,
    calls: AtomicUsize,
}

impl StubTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { seed, dim, calls: AtomicUsize::new(0) }
    }
}

impl TextEncoder for StubTextEncoder {
    fn identity(&self) -> String {
        format!("stub-encoder-d{}-s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &Caption) -> Result<RawTextEmbedding> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(caption.text().as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        Ok(RawTextEmbedding(v.iter().map(|x| (x / norm) as f32).collect()))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn checksum(&self) -> [u8; 32] {
        Sha256::digest(self.identity()).into()
    }
}

fn program_from_env() -> Result<PathBuf> {
    let program = std::env::var_os(BACKEND_ENV).ok_or_else(|| {
        SelicError::BackendUnavailable(format!("pretrained backend not configured; set {BACKEND_ENV}"))
    })?;
    let program = PathBuf::from(program);
    if !program.is_file() {
        return Err(SelicError::BackendUnavailable(format!("{} does not exist", program.display())));
    }
    Ok(program)
}

fn file_checksum(path: &Path) -> [u8; 32] {
    Sha256::digest(fs::read(path).unwrap_or_default()).into()
}

fn run_helper(program: &Path, args: &[&str], stdin: Option<&str>) -> Result<String> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| SelicError::BackendUnavailable(format!("cannot start {}: {e}", program.display())))?;
    if let Some(mut pipe) = child.stdin.take() {
        pipe.write_all(stdin.unwrap_or("").as_bytes())?;
    }
    let out = child.wait_with_output()?;
    if !out.status.success() {
        let err = String::from_utf8_lossy(&out.stderr);
        // Exit status 3 is reserved by the helper for missing models.
        if out.status.code() == Some(3) {
            return Err(SelicError::BackendUnavailable(err.trim().to_string()));
        }
        return Err(SelicError::Backend(format!("{} failed: {}", program.display(), err.trim())));
    }
    String::from_utf8(out.stdout).map_err(|_| SelicError::Backend("helper wrote non-UTF-8 output".into()))
}

/// Pretrained captioner behind the helper program.
pub struct ExternalCaptioner {
    program: PathBuf,
    calls: AtomicUsize,
}

impl ExternalCaptioner {
    pub fn new(program: PathBuf) -> Result<Self> {
        if !program.is_file() {
            return Err(SelicError::BackendUnavailable(format!("{} does not exist", program.display())));
        }
        Ok(Self { program, calls: AtomicUsize::new(0) })
    }

    pub fn from_env() -> Result<Self> {
        Self::new(program_from_env()?)
    }
}

impl Captioner for ExternalCaptioner {
    fn identity(&self) -> String {
        "pretrained-captioner".into()
    }

    fn caption(&self, image: &ImagePlane) -> Result<Caption> {
        if image.is_empty() {
            return Err(SelicError::InvalidInput("cannot caption an empty image".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("selic-caption-{}", std::process::id()));
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.png", self.calls()));
        image.save(&path)?;
        let out = run_helper(&self.program, &["caption", path.to_str().unwrap_or_default()], None);
        let _ = fs::remove_file(&path);
        Caption::new(&out?)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn checksum(&self) -> [u8; 32] {
        file_checksum(&self.program)
    }
}

/// Pretrained text encoder behind the helper program.
pub struct ExternalTextEncoder {
    program: PathBuf,
    dim: usize,
    calls: AtomicUsize,
}

impl ExternalTextEncoder {
    pub fn new(program: PathBuf, dim: usize) -> Result<Self> {
        if !program.is_file() {
            return Err(SelicError::BackendUnavailable(format!("{} does not exist", program.display())));
        }
        Ok(Self { program, dim, calls: AtomicUsize::new(0) })
    }

    pub fn from_env(dim: usize) -> Result<Self> {
        Self::new(program_from_env()?, dim)
    }
}

impl TextEncoder for ExternalTextEncoder {
    fn identity(&self) -> String {
        format!("pretrained-encoder-d{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &Caption) -> Result<RawTextEmbedding> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let out = run_helper(&self.program, &["embed"], Some(caption.text()))?;
        let values = out
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| SelicError::Backend(format!("bad embedding output: {e}")))?;
        let e = RawTextEmbedding(values);
        e.validate(self.dim)?;
        Ok(e)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn checksum(&self) -> [u8; 32] {
        file_checksum(&self.program)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BackendKind {
    #[default]
    Stub,
    Pretrained,
}

impl std::str::FromStr for BackendKind {
    type Err = SelicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(BackendKind::Stub),
            "pretrained" => Ok(BackendKind::Pretrained),
            other => Err(SelicError::Config(format!("unknown semantic backend `{other}` (expected stub|pretrained)"))),
        }
    }
}

/// Captioner followed by text encoder.
pub struct SemanticPipeline {
    pub captioner: Box<dyn Captioner>,
    pub encoder: Box<dyn TextEncoder>,
}

impl SemanticPipeline {
    pub fn stub(dim: usize, seed: u64) -> Self {
        Self { captioner: Box::new(StubCaptioner::new(seed)), encoder: Box::new(StubTextEncoder::new(dim, seed)) }
    }

    pub fn pretrained(dim: usize) -> Result<Self> {
        Ok(Self {
            captioner: Box::new(ExternalCaptioner::from_env()?),
            encoder: Box::new(ExternalTextEncoder::from_env(dim)?),
        })
    }

    pub fn new(kind: BackendKind, dim: usize, seed: u64) -> Result<Self> {
        match kind {
            BackendKind::Stub => Ok(Self::stub(dim, seed)),
            BackendKind::Pretrained => Self::pretrained(dim),
        }
    }

    pub fn identity(&self) -> String {
        format!("{}__{}", self.captioner.identity(), self.encoder.identity())
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn run(&self, image: &ImagePlane) -> Result<(Caption, RawTextEmbedding)> {
        let caption = self.captioner.caption(image)?;
        let embedding = self.encoder.embed(&caption)?;
        embedding.validate(self.dim())?;
        Ok((caption, embedding))
    }

    /// Total backend invocations across both stages.
    pub fn calls(&self) -> usize {
        self.captioner.calls() + self.encoder.calls()
    }

    pub fn checksums(&self) -> ([u8; 32], [u8; 32]) {
        (self.captioner.checksum(), self.encoder.checksum())
    }
}

pub fn caption_image(image: &ImagePlane, backend: &dyn Captioner) -> Result<Caption> {
    backend.caption(image)
}

pub fn embed_caption(caption: &Caption, backend: &dyn TextEncoder) -> Result<RawTextEmbedding> {
    backend.embed(caption)
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\', '\0']);
    if ok {
        Ok(())
    } else {
        Err(SelicError::InvalidInput(format!("invalid cache id `{id}`")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let tmp = path.with_extension(format!(
        "tmp{}.{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Paths of the two cache files for `id` under `pipeline`.
pub fn cache_paths(cache_dir: &Path, pipeline: &SemanticPipeline, id: &str) -> (PathBuf, PathBuf) {
    let dir = cache_dir.join(pipeline.identity());
    (dir.join(format!("{id}.caption.txt")), dir.join(format!("{id}.embed.f32")))
}

fn read_cached(caption_path: &Path, embed_path: &Path, dim: usize) -> Option<RawTextEmbedding> {
    let text = fs::read_to_string(caption_path).ok()?;
    Caption::new(&text).ok()?;
    let e = RawTextEmbedding::from_le_bytes(&fs::read(embed_path).ok()?)?;
    e.validate(dim).ok()?;
    Some(e)
}

/// Embedding for `image`, computed once per `(backend identity, id)` and
/// then served from `cache_dir`. A missing or unreadable entry is
/// recomputed and rewritten.
pub fn cached_semantics(
    pipeline: &SemanticPipeline,
    id: &str,
    image: &ImagePlane,
    cache_dir: &Path,
) -> Result<RawTextEmbedding> {
    check_id(id)?;
    let (caption_path, embed_path) = cache_paths(cache_dir, pipeline, id);
    let present = caption_path.exists() || embed_path.exists();
    if let Some(e) = read_cached(&caption_path, &embed_path, pipeline.dim()) {
        return Ok(e);
    }
    if present {
        log::warn!("semantic cache entry `{id}` is corrupt; recomputing");
    }
    let (caption, embedding) = pipeline.run(image)?;
    fs::create_dir_all(caption_path.parent().expect("has parent"))?;
    write_atomic(&embed_path, &embedding.to_le_bytes())?;
    write_atomic(&caption_path, caption.text().as_bytes())?;
    Ok(embedding)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_truncates_and_rejects_empty() {
        let long = vec!["w"; 100].join(" ");
        let c = Caption::new(&long).unwrap();
        assert_eq!(c.token_count(), 64);
        assert!(matches!(Caption::new("  \n "), Err(SelicError::InvalidInput(_))));
    }

    #[test]
    fn stub_caption_is_deterministic() {
        let img = ImagePlane::zeros(256, 256);
        let a = StubCaptioner::new(0).caption(&img).unwrap();
        let b = StubCaptioner::new(0).caption(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.token_count() >= 6 && a.token_count() <= 12);
        assert_ne!(StubCaptioner::new(1).caption(&img).unwrap(), a);
    }

    #[test]
    fn stub_rejects_empty_image() {
        let img = ImagePlane::zeros(0, 0);
        assert!(matches!(StubCaptioner::new(0).caption(&img), Err(SelicError::InvalidInput(_))));
    }

    #[test]
    fn stub_embedding_contract() {
        let enc = StubTextEncoder::new(32, 0);
        let a = enc.embed(&Caption::new("a").unwrap()).unwrap();
        let a2 = enc.embed(&Caption::new("a").unwrap()).unwrap();
        let b = enc.embed(&Caption::new("b").unwrap()).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        let norm: f64 = a.0.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(enc.calls(), 3);
    }

    #[test]
    fn embedding_bytes_round_trip() {
        let e = RawTextEmbedding(vec![1.5, -0.25, f32::MIN_POSITIVE]);
        assert_eq!(RawTextEmbedding::from_le_bytes(&e.to_le_bytes()).unwrap(), e);
        assert!(RawTextEmbedding::from_le_bytes(&[1, 2, 3]).is_none());
    }

    #[test]
    fn cache_ids_are_validated() {
        assert!(check_id("img_01").is_ok());
        for bad in ["", "..", "a/b", "a\\b"] {
            assert!(check_id(bad).is_err());
        }
    }
}
