//! Rate-distortion training: loss, schedule, Adam with gradient clipping,
//! dataset ingestion with cached semantics, per-epoch checkpoints and resume.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{AdamState, Checkpoint};
use crate::config::{KvDocument, ModelConfig};
use crate::entropy::uniform_noise;
use crate::error::{Result, SelicError};
use crate::image::ImagePlane;
use crate::model::{batch_tensor, rd_graph, SelicModel};
use crate::nn::{derive_seed, Ctx, Tensor};
use crate::semantic::{cached_semantics, BackendKind, RawTextEmbedding, SemanticPipeline};

/// Weight applied to MSE on the `[0, 1]` scale so that the lambda presets
/// correspond to MSE on the 8-bit scale.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdLoss {
    pub rate_bits_per_pixel: f64,
    pub distortion_mse: f64,
    pub lambda_value: f64,
    pub total: f64,
}

impl RdLoss {
    pub fn new(bpp: f64, mse: f64, lambda: f64) -> Self {
        Self {
            rate_bits_per_pixel: bpp,
            distortion_mse: mse,
            lambda_value: lambda,
            total: bpp + lambda * mse * DISTORTION_SCALE,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.rate_bits_per_pixel.is_finite() && self.distortion_mse.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// First epoch (0-based) trained at `lr_final`.
    pub lr_drop_epoch: u32,
    pub crop: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { epochs: 160, batch_size: 8, lr_initial: 1e-4, lr_final: 1e-5, lr_drop_epoch: 130, crop: 256 }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: u32) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr_initial
        } else {
            self.lr_final
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SelicError::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr_drop_epoch >= self.epochs {
            return Err(SelicError::Config(format!(
                "lr_drop_epoch {} must be below epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(SelicError::Config("learning rates must be positive".into()));
        }
        if self.crop == 0 || self.crop % crate::config::PAD_MULTIPLE != 0 {
            return Err(SelicError::Config(format!("crop {} must be a positive multiple of 64", self.crop)));
        }
        Ok(())
    }
}

/// Adam with bias correction, no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Model plus optimizer state; one call to [`Trainer::train_step`] is one
/// update.
pub struct Trainer {
    pub model: SelicModel,
    pub adam: AdamState,
    pub opt: AdamConfig,
    pub step: u64,
}

/// Diagnostics of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: RdLoss,
    pub grad_norm: f64,
    pub lr: f64,
}

impl Trainer {
    pub fn new(model: SelicModel) -> Self {
        let adam = AdamState::zeros_like(&model.params);
        Self { model, adam, opt: AdamConfig::default(), step: 0 }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        let adam = ck.optimizer.unwrap_or_else(|| AdamState::zeros_like(&ck.model.params));
        Self { model: ck.model, adam, opt: AdamConfig::default(), step: ck.step }
    }

    pub fn checkpoint(&self, epoch: u32) -> Checkpoint {
        Checkpoint { model: self.model.clone(), optimizer: Some(self.adam.clone()), epoch, step: self.step }
    }

    /// Loss and per-parameter gradients for one batch without updating.
    pub fn gradients(
        &self,
        images: &[ImagePlane],
        embeddings: Option<&[RawTextEmbedding]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(RdLoss, std::collections::BTreeMap<String, Tensor<f32>>)> {
        let cfg = &self.model.cfg;
        let x = batch_tensor::<f32>(images)?;
        let raw = match (cfg.semantic_enabled, embeddings) {
            (false, _) => None,
            (true, Some(e)) => {
                if e.len() != images.len() {
                    return Err(SelicError::InvalidInput("one embedding per image required".into()));
                }
                let data: Vec<f32> = e.iter().flat_map(|v| v.0.iter().copied()).collect();
                Some(Tensor::new(&[e.len(), cfg.text_embed_dim], data)?)
            }
            (true, None) => return Err(SelicError::InvalidInput("semantic embeddings required".into())),
        };
        let mut ctx = Ctx::new(&self.model.params, true);
        let mut noise = |shape: &[usize]| uniform_noise::<f32, _>(shape, rng);
        let g = rd_graph(&mut ctx, cfg, x, raw, &mut noise)?;
        let bpp = ctx.value(g.bits).item() as f64 / g.pixels as f64;
        let mse = ctx.value(g.mse).item() as f64;
        let loss = RdLoss::new(bpp, mse, cfg.lambda_value);
        if !loss.is_finite() {
            return Err(SelicError::NonFinite(format!(
                "step {}: bpp {bpp}, mse {mse}, loss {}",
                self.step, loss.total
            )));
        }
        let grads = ctx.param_grads(g.loss)?;
        Ok((loss, grads))
    }

    /// One clipped Adam update. Parameters outside the forward pass (the
    /// fusion module when the semantic branch is disabled) are untouched.
    pub fn train_step(
        &mut self,
        images: &[ImagePlane],
        embeddings: Option<&[RawTextEmbedding]>,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepReport> {
        let (loss, grads) = self.gradients(images, embeddings, rng)?;
        let norm = grads.values().map(|g| g.sum_sq()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(SelicError::NonFinite(format!("step {}: gradient norm is {norm}", self.step)));
        }
        let scale = if norm > self.opt.clip_norm { self.opt.clip_norm / norm } else { 1.0 };
        self.adam.t += 1;
        let t = self.adam.t as i32;
        let (b1, b2, eps) = (self.opt.beta1, self.opt.beta2, self.opt.eps);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, g) in &grads {
            let p = self.model.params.get_mut(name).expect("bound parameter exists");
            let m = self.adam.m.get_mut(name).ok_or_else(|| SelicError::Checkpoint(format!("no moment for {name}")))?;
            let v = self.adam.v.get_mut(name).ok_or_else(|| SelicError::Checkpoint(format!("no moment for {name}")))?;
            for (((pi, mi), vi), &gi) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                let gi = gi as f64 * scale;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                *pi = (*pi as f64 - lr * (mn / c1) / ((vn / c2).sqrt() + eps)) as f32;
            }
        }
        self.step += 1;
        Ok(StepReport { loss, grad_norm: norm, lr })
    }
}

/// Images of a training or evaluation directory.
pub struct Dataset {
    pub items: Vec<(String, ImagePlane)>,
    pub skipped: usize,
}

pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| SelicError::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every PNG/JPEG in `dir`, skipping unreadable files.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut items = Vec::new();
    let mut skipped = 0;
    for path in list_images(dir)? {
        match ImagePlane::load(&path) {
            Ok(img) => {
                let id = path.file_name().and_then(|n| n.to_str()).unwrap_or("image").to_string();
                items.push((id, img));
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} unreadable images skipped in {}", dir.display());
    }
    if items.is_empty() {
        return Err(SelicError::Data(format!("no readable images in {}", dir.display())));
    }
    Ok(Dataset { items, skipped })
}

/// Edge-replicates `img` so that both sides are at least `h` and `w`.
pub fn pad_to_at_least(img: &ImagePlane, h: usize, w: usize) -> ImagePlane {
    let (ih, iw) = img.dims();
    if ih >= h && iw >= w {
        return img.clone();
    }
    ImagePlane::from_fn(ih.max(h), iw.max(w), |c, y, x| img.get(c, y.min(ih - 1), x.min(iw - 1)))
}

/// Random `crop x crop` window with a coin-flip horizontal mirror.
pub fn random_crop<R: Rng>(img: &ImagePlane, crop: usize, rng: &mut R) -> Result<ImagePlane> {
    let img = pad_to_at_least(img, crop, crop);
    let top = rng.random_range(0..=img.height() - crop);
    let left = rng.random_range(0..=img.width() - crop);
    let c = img.crop_at(top, left, crop, crop)?;
    Ok(if rng.random_bool(0.5) { c.flip_horizontal() } else { c })
}

/// Everything `run_training` needs.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub backend: BackendKind,
    pub resume: bool,
}

impl TrainOptions {
    /// Parses a training config: the model keys plus
    ///
    /// ```text
    /// train.dataset = DIR          (required; relative to the config file)
    /// train.output = DIR           (required)
    /// train.cache_dir = DIR        (default <output>/semantic_cache)
    /// train.epochs = 160
    /// train.batch_size = 8
    /// train.lr_initial = 1e-4
    /// train.lr_final = 1e-5
    /// train.lr_drop_epoch = 130
    /// train.crop = 256
    /// train.resume = false
    /// semantic.backend = stub | pretrained
    /// ```
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut doc = KvDocument::parse(text)?;
        let model = ModelConfig::take_from(&mut doc)?;
        let d = TrainSchedule::default();
        let schedule = TrainSchedule {
            epochs: doc.take_or("train.epochs", d.epochs)?,
            batch_size: doc.take_or("train.batch_size", d.batch_size)?,
            lr_initial: doc.take_or("train.lr_initial", d.lr_initial)?,
            lr_final: doc.take_or("train.lr_final", d.lr_final)?,
            lr_drop_epoch: doc.take_or("train.lr_drop_epoch", d.lr_drop_epoch)?,
            crop: doc.take_or("train.crop", d.crop)?,
        };
        let path = |doc: &mut KvDocument, key: &str| -> Result<Option<PathBuf>> {
            Ok(doc.take::<String>(key)?.map(|s| base.join(s)))
        };
        let dataset = path(&mut doc, "train.dataset")?.ok_or_else(|| SelicError::Config("train.dataset is required".into()))?;
        let output = path(&mut doc, "train.output")?.ok_or_else(|| SelicError::Config("train.output is required".into()))?;
        let cache_dir = path(&mut doc, "train.cache_dir")?;
        let resume = doc.take_or("train.resume", false)?;
        let backend = doc.take_or("semantic.backend", BackendKind::Stub)?;
        doc.finish()?;
        schedule.validate()?;
        Ok(Self { model, schedule, dataset, output, cache_dir, backend, resume })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SelicError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

pub fn checkpoint_path(dir: &Path, epoch: u32) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Latest `epoch_NNNN.ckpt` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(u32, PathBuf)> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_str()?.to_string();
            let n = name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Checkpoints written by this run, in order.
    pub checkpoints: Vec<PathBuf>,
    pub last_loss: Option<RdLoss>,
    pub steps: u64,
    pub skipped_images: usize,
}

/// Full training loop. Epoch `e` draws its shuffling, crops, flips and
/// quantization noise from a generator seeded by `(seed, e)`, so resuming
/// from the checkpoint of epoch `e` reproduces an uninterrupted run.
pub fn run_training(opts: &TrainOptions) -> Result<TrainSummary> {
    opts.schedule.validate()?;
    opts.model.validate()?;
    fs::create_dir_all(&opts.output)?;
    let data = load_dataset(&opts.dataset)?;

    let (mut trainer, start_epoch) = match (opts.resume, latest_checkpoint(&opts.output)) {
        (true, Some((epoch, path))) => {
            let ck = Checkpoint::load(&path)?;
            if ck.model.cfg != opts.model {
                return Err(SelicError::Config(format!("{} was trained with a different config", path.display())));
            }
            log::info!("resuming from {} (epoch {epoch})", path.display());
            (Trainer::from_checkpoint(ck), epoch)
        }
        _ => (Trainer::new(SelicModel::new(opts.model.clone())?), 0),
    };

    let embeddings: Option<Vec<RawTextEmbedding>> = if opts.model.semantic_enabled {
        let pipeline = SemanticPipeline::new(opts.backend, opts.model.text_embed_dim, opts.model.seed)?;
        let cache = opts.cache_dir.clone().unwrap_or_else(|| opts.output.join("semantic_cache"));
        let before = pipeline.checksums();
        let e = data
            .items
            .iter()
            .map(|(id, img)| cached_semantics(&pipeline, id, img, &cache))
            .collect::<Result<Vec<_>>>()?;
        if pipeline.checksums() != before {
            return Err(SelicError::Backend("semantic backend weights changed".into()));
        }
        Some(e)
    } else {
        None
    };

    let log_path = opts.output.join("train_log.csv");
    let append = start_epoch > 0 && log_path.exists();
    let file = fs::OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(&log_path)?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !append {
        log.write_record(["step", "bpp", "mse", "loss", "lr"]).map_err(csv_err)?;
    }

    let mut summary = TrainSummary { checkpoints: Vec::new(), last_loss: None, steps: 0, skipped_images: data.skipped };
    let n = data.items.len();
    for epoch in start_epoch..opts.schedule.epochs {
        let lr = opts.schedule.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.model.seed, &format!("epoch{epoch}")));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.schedule.batch_size) {
            let crops = chunk
                .iter()
                .map(|&i| random_crop(&data.items[i].1, opts.schedule.crop, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let emb: Option<Vec<RawTextEmbedding>> =
                embeddings.as_ref().map(|e| chunk.iter().map(|&i| e[i].clone()).collect());
            let report = trainer.train_step(&crops, emb.as_deref(), lr, &mut rng)?;
            let l = report.loss;
            log.write_record([
                trainer.step.to_string(),
                l.rate_bits_per_pixel.to_string(),
                l.distortion_mse.to_string(),
                l.total.to_string(),
                lr.to_string(),
            ])
            .map_err(csv_err)?;
            summary.last_loss = Some(l);
            summary.steps += 1;
        }
        log.flush()?;
        let path = checkpoint_path(&opts.output, epoch + 1);
        trainer.checkpoint(epoch + 1).save(&path)?;
        log::info!("epoch {} done, checkpoint {}", epoch + 1, path.display());
        summary.checkpoints.push(path);
    }
    Ok(summary)
}

fn csv_err(e: csv::Error) -> SelicError {
    SelicError::Io(std::io::Error::other(e))
}
