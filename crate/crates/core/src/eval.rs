//! Dataset evaluation and the two ablation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::load_model;
use crate::codec::{decode_bytes, encode_image};
use crate::error::{Result, SelicError};
use crate::fusion::FusionStrategy;
use crate::metrics::{fmt_opt, format_db, ms_ssim, psnr, RdPoint, MS_SSIM_MIN_SIDE};
use crate::model::SelicModel;
use crate::semantic::{BackendKind, SemanticPipeline};
use crate::train::load_dataset;

/// Published operating points of the three fusion strategies, shown as
/// context in the fusion report: `(strategy, bpp, PSNR dB)`.
pub const FUSION_REFERENCE: [(FusionStrategy, f64, f64); 3] = [
    (FusionStrategy::ElementwiseMul, 0.900, 37.16),
    (FusionStrategy::ElementwiseAdd, 0.895, 37.32),
    (FusionStrategy::ChannelConcat, 0.890, 37.68),
];

/// Published PSNR gain of the semantic branch over the baseline, in dB.
pub const SEMANTIC_REFERENCE_GAIN_DB: (f64, f64) = (0.10, 0.15);

/// Semantic backends matching a model, or `None` when it has no semantic
/// branch.
pub fn pipeline_for(model: &SelicModel, kind: BackendKind) -> Result<Option<SemanticPipeline>> {
    if !model.cfg.semantic_enabled {
        return Ok(None);
    }
    SemanticPipeline::new(kind, model.cfg.text_embed_dim, model.cfg.seed).map(Some)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub bytes: usize,
    /// File bits over original pixels.
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageResult>,
    pub mean: RdPoint,
}

impl EvalReport {
    pub fn write_per_image_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["image", "height", "width", "bytes", "bpp", "psnr_db", "ms_ssim"]).map_err(csv_err)?;
        for r in &self.images {
            w.write_record([
                r.image.clone(),
                r.height.to_string(),
                r.width.to_string(),
                r.bytes.to_string(),
                r.bpp.to_string(),
                format_db(r.psnr_db),
                fmt_opt(r.ms_ssim.unwrap_or(f64::NAN)),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> SelicError {
    SelicError::Io(std::io::Error::other(e))
}

/// Encodes, serializes, decodes and scores every image in `dataset`. The
/// decoder sees only the bytes and the model.
pub fn evaluate(model: &SelicModel, pipeline: Option<&SemanticPipeline>, dataset: &Path) -> Result<EvalReport> {
    let data = load_dataset(dataset)?;
    let mut images = Vec::with_capacity(data.items.len());
    for (id, img) in &data.items {
        let (stream, _) = encode_image(img, model, pipeline)?;
        let bytes = stream.to_bytes();
        let rec = decode_bytes(&bytes, model)?.quantized_8bit();
        let (h, w) = img.dims();
        let ms = if h.min(w) >= MS_SSIM_MIN_SIDE { Some(ms_ssim(img, &rec)?) } else { None };
        images.push(ImageResult {
            image: id.clone(),
            height: h,
            width: w,
            bytes: bytes.len(),
            bpp: (bytes.len() * 8) as f64 / (h * w) as f64,
            psnr_db: psnr(img, &rec)?,
            ms_ssim: ms,
        });
    }
    let n = images.len() as f64;
    let ms: Vec<f64> = images.iter().filter_map(|r| r.ms_ssim).collect();
    let mean = RdPoint {
        bpp: images.iter().map(|r| r.bpp).sum::<f64>() / n,
        psnr_db: images.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ms_ssim: if ms.is_empty() { f64::NAN } else { ms.iter().sum::<f64>() / ms.len() as f64 },
    };
    Ok(EvalReport { images, mean })
}

/// Loads a checkpoint and evaluates it with matching semantic backends.
pub fn evaluate_checkpoint(ckpt: &Path, dataset: &Path, kind: BackendKind) -> Result<(SelicModel, EvalReport)> {
    let model = load_model(ckpt)?;
    let pipeline = pipeline_for(&model, kind)?;
    let report = evaluate(&model, pipeline.as_ref(), dataset)?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionRow {
    pub strategy: FusionStrategy,
    pub checkpoint: PathBuf,
    /// `Err` holds the reason the row is absent.
    pub result: std::result::Result<RdPoint, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub rows: Vec<FusionRow>,
}

/// Evaluates one checkpoint per fusion strategy. Rows come out in the order
/// multiplication, addition, concatenation. A strategy without a usable
/// checkpoint yields an absent row instead of an error.
pub fn run_ablation_fusion(
    checkpoints: &[(FusionStrategy, PathBuf)],
    dataset: &Path,
    kind: BackendKind,
) -> Result<FusionReport> {
    let mut rows = Vec::new();
    for strategy in FusionStrategy::ALL {
        let Some((_, path)) = checkpoints.iter().find(|(s, _)| *s == strategy) else {
            rows.push(FusionRow { strategy, checkpoint: PathBuf::new(), result: Err("no checkpoint given".into()) });
            continue;
        };
        let result = if !path.exists() {
            Err(format!("missing checkpoint {}", path.display()))
        } else {
            match evaluate_checkpoint(path, dataset, kind) {
                Ok((model, _)) if !model.cfg.semantic_enabled || model.cfg.fusion != strategy => {
                    Err(format!("checkpoint is not a {strategy} fusion model"))
                }
                Ok((_, report)) => Ok(report.mean),
                Err(e @ SelicError::Data(_)) => return Err(e),
                Err(e) => Err(e.to_string()),
            }
        };
        rows.push(FusionRow { strategy, checkpoint: path.clone(), result });
    }
    Ok(FusionReport { rows })
}

impl FusionReport {
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.result.is_ok())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "method", "status", "bpp", "psnr_db", "ms_ssim"]).expect("in-memory");
        for r in &self.rows {
            let (status, bpp, psnr, ms) = match &r.result {
                Ok(p) => ("ok".to_string(), format!("{:.4}", p.bpp), format_db(p.psnr_db), fmt_opt(p.ms_ssim)),
                Err(e) => (format!("absent: {e}"), String::new(), String::new(), String::new()),
            };
            w.write_record([r.strategy.to_string(), r.strategy.label().to_string(), status, bpp, psnr, ms])
                .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<30} {:>10} {:>10}", "Method", "Bit rate", "PSNR");
        for r in &self.rows {
            match &r.result {
                Ok(p) => {
                    let _ = writeln!(s, "{:<30} {:>10.4} {:>10}", r.strategy.label(), p.bpp, format_db(p.psnr_db));
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<30} {:>10} {:>10}  ({e})", r.strategy.label(), "absent", "absent");
                }
            }
        }
        let _ = writeln!(s, "\nPublished reference (full-scale training):");
        for (st, bpp, db) in FUSION_REFERENCE {
            let _ = writeln!(s, "  {:<28} {bpp:.3} bpp  {db:.2} dB", st.label());
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let mut series = Vec::new();
        for r in &self.rows {
            if let Ok(p) = &r.result {
                series.push((r.strategy.label().to_string(), vec![(p.bpp, p.psnr_db)]));
            }
        }
        rd_plot_svg("Fusion strategy ablation", &series)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPair {
    pub lambda: f64,
    pub with_semantic: RdPoint,
    pub without_semantic: RdPoint,
}

impl SemanticPair {
    pub fn delta_psnr(&self) -> f64 {
        self.with_semantic.psnr_db - self.without_semantic.psnr_db
    }

    pub fn delta_bpp(&self) -> f64 {
        self.with_semantic.bpp - self.without_semantic.bpp
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticReport {
    pub pairs: Vec<SemanticPair>,
}

/// Evaluates `(with, without)` checkpoint pairs, one pair per rate point.
pub fn run_ablation_semantic(pairs: &[(PathBuf, PathBuf)], dataset: &Path, kind: BackendKind) -> Result<SemanticReport> {
    if pairs.is_empty() {
        return Err(SelicError::InvalidInput("at least one checkpoint pair is required".into()));
    }
    let mut out = Vec::new();
    for (with, without) in pairs {
        let (mw, rw) = evaluate_checkpoint(with, dataset, kind)?;
        let (mo, ro) = evaluate_checkpoint(without, dataset, kind)?;
        if !mw.cfg.semantic_enabled || mo.cfg.semantic_enabled {
            return Err(SelicError::Config(format!(
                "pair ({}, {}) must be (semantic model, baseline model)",
                with.display(),
                without.display()
            )));
        }
        out.push(SemanticPair { lambda: mw.cfg.lambda_value, with_semantic: rw.mean, without_semantic: ro.mean });
    }
    out.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(SemanticReport { pairs: out })
}

impl SemanticReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "lambda",
            "bpp_with",
            "psnr_with",
            "bpp_without",
            "psnr_without",
            "delta_bpp",
            "delta_psnr_db",
        ])
        .expect("in-memory");
        for p in &self.pairs {
            w.write_record([
                p.lambda.to_string(),
                format!("{:.4}", p.with_semantic.bpp),
                format_db(p.with_semantic.psnr_db),
                format!("{:.4}", p.without_semantic.bpp),
                format_db(p.without_semantic.psnr_db),
                format!("{:.4}", p.delta_bpp()),
                format!("{:.4}", p.delta_psnr()),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>10} {:>10} {:>10} {:>10} {:>9}",
            "lambda", "bpp(sem)", "PSNR(sem)", "bpp(base)", "PSNR(base)", "dPSNR"
        );
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{:>8} {:>10.4} {:>10} {:>10.4} {:>10} {:>+9.4}",
                p.lambda,
                p.with_semantic.bpp,
                format_db(p.with_semantic.psnr_db),
                p.without_semantic.bpp,
                format_db(p.without_semantic.psnr_db),
                p.delta_psnr()
            );
        }
        let (lo, hi) = SEMANTIC_REFERENCE_GAIN_DB;
        let _ = writeln!(s, "\nPublished reference gain of the semantic branch: {lo:.2}-{hi:.2} dB PSNR");
        s
    }

    pub fn to_svg(&self) -> String {
        let with = self.pairs.iter().map(|p| (p.with_semantic.bpp, p.with_semantic.psnr_db)).collect();
        let without = self.pairs.iter().map(|p| (p.without_semantic.bpp, p.without_semantic.psnr_db)).collect();
        rd_plot_svg(
            "Semantic branch ablation",
            &[("with semantics".to_string(), with), ("without semantics".to_string(), without)],
        )
    }
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Static rate-distortion plot: one polyline with markers per series.
pub fn rd_plot_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let pts: Vec<(f64, f64)> =
        series.iter().flat_map(|(_, p)| p.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let (lo, hi) = pts.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.08 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let ((x0, x1), (y0, y1)) = (bounds(|p| p.0), bounds(|p| p.1));
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, w / 2.0, xml(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} L{m} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{fx:.3}</text>"#, sx(fx), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{fy:.2}</text>"#, m - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">bpp</text>"#, w / 2.0, h - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">PSNR (dB)</text>"#, h / 2.0, h / 2.0);
    for (i, (label, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut sorted: Vec<(f64, f64)> = p.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.len() > 1 {
            let d: Vec<String> = sorted.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
        }
        for &(x, y) in &sorted {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, w - m - 170.0, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12">{}</text>"#, w - m - 155.0, xml(label));
    }
    s.push_str("</svg>\n");
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.csv`, `<stem>.txt` and `<stem>.svg` next to each other.
pub fn write_report(stem: &Path, csv: &str, text: &str, svg: &str) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(stem.with_extension("csv"), csv)?;
    fs::write(stem.with_extension("txt"), text)?;
    fs::write(stem.with_extension("svg"), svg)?;
    Ok(())
}
