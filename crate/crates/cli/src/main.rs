use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use selic_core::checkpoint::load_model;
use selic_core::codec::{decode_bytes, encode_image};
use selic_core::eval::{self, pipeline_for, run_ablation_fusion, run_ablation_semantic, write_report};
use selic_core::image::ImagePlane;
use selic_core::metrics::{bd_rate, format_db, write_curve_csv, RdCurve};
use selic_core::semantic::BackendKind;
use selic_core::train::{run_training, TrainOptions};
use selic_core::{CoderBackend, FusionStrategy, SelicError};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_MODEL: u8 = 4;

#[derive(Parser)]
#[command(name = "selic", version, about = "Semantic-guided learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress an image into a .selic file.
    Encode(EncodeArgs),
    /// Reconstruct an image from a .selic file.
    Decode(DecodeArgs),
    /// Encode, decode and score every image of a directory.
    Eval(EvalArgs),
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Bjontegaard delta rate of one RD curve against another.
    Bdrate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
    },
    /// Ablation reports.
    #[command(subcommand)]
    Ablate(Ablation),
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Must match the strategy the checkpoint was trained with.
    #[arg(long)]
    fusion: Option<FusionStrategy>,
    #[arg(long)]
    coder: Option<CoderBackend>,
    #[arg(long, default_value = "stub")]
    semantic_backend: BackendKind,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// One RD point per model.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    /// RD curve output (`label,bpp,psnr_db,ms_ssim`).
    #[arg(long)]
    csv: PathBuf,
    /// Optional per-image results, one CSV per model in this directory.
    #[arg(long)]
    per_image: Option<PathBuf>,
    /// Optional RD plot.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value = "stub")]
    semantic_backend: BackendKind,
}

#[derive(Subcommand)]
enum Ablation {
    /// Compare concat, add and mul fusion checkpoints.
    Fusion {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        concat: Option<PathBuf>,
        #[arg(long)]
        add: Option<PathBuf>,
        #[arg(long)]
        mul: Option<PathBuf>,
        /// Report path stem; writes .csv, .txt and .svg.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "stub")]
        semantic_backend: BackendKind,
    },
    /// Compare models with and without the semantic branch.
    Semantic {
        #[arg(long)]
        dataset: PathBuf,
        /// `WITH,WITHOUT` checkpoint pair; repeat for several rates.
        #[arg(long = "pair", required = true, value_parser = parse_pair)]
        pairs: Vec<(PathBuf, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "stub")]
        semantic_backend: BackendKind,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(PathBuf, PathBuf), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| "expected WITH,WITHOUT".to_string())?;
    Ok((PathBuf::from(a), PathBuf::from(b)))
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let mut model = load_model(&a.model)?;
    if let Some(f) = a.fusion {
        if !model.cfg.semantic_enabled || model.cfg.fusion != f {
            return Err(SelicError::Checkpoint(format!(
                "{} was not trained with {f} fusion",
                a.model.display()
            ))
            .into());
        }
    }
    if let Some(c) = a.coder {
        model.cfg.coder_backend = c;
    }
    let image = ImagePlane::load(&a.input)?;
    let pipeline = pipeline_for(&model, a.semantic_backend)?;
    let (stream, stats) = encode_image(&image, &model, pipeline.as_ref())?;
    let bytes = stream.to_bytes();
    std::fs::write(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;
    let (h, w) = image.dims();
    println!(
        "{}: {} bytes, {:.4} bpp (estimated {:.4}), {} clamped symbols",
        a.output.display(),
        bytes.len(),
        (bytes.len() * 8) as f64 / (h * w) as f64,
        (stats.estimated_bits_y + stats.estimated_bits_z) / (h * w) as f64,
        stats.clamped_y + stats.clamped_z
    );
    Ok(())
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let bytes = std::fs::read(&a.input).map_err(SelicError::Io)?;
    let image = decode_bytes(&bytes, &model)?;
    image.save(&a.output)?;
    println!("{}: {}x{}", a.output.display(), image.height(), image.width());
    Ok(())
}

fn model_label(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string()
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let mut rows = Vec::new();
    for ckpt in &a.model {
        let (_, report) = eval::evaluate_checkpoint(ckpt, &a.dataset, a.semantic_backend)?;
        let label = model_label(ckpt);
        println!(
            "{label}: {:.4} bpp, {} dB PSNR, MS-SSIM {}",
            report.mean.bpp,
            format_db(report.mean.psnr_db),
            selic_core::metrics::fmt_opt(report.mean.ms_ssim)
        );
        if let Some(dir) = &a.per_image {
            std::fs::create_dir_all(dir)?;
            report.write_per_image_csv(&dir.join(format!("{label}.csv")))?;
        }
        rows.push((label, report.mean));
    }
    write_curve_csv(&a.csv, &rows)?;
    if let Some(svg) = &a.svg {
        let pts = rows.iter().map(|(_, p)| (p.bpp, p.psnr_db)).collect();
        std::fs::write(svg, eval::rd_plot_svg("Rate-distortion", &[("selic".to_string(), pts)]))?;
    }
    Ok(())
}

fn bdrate(test: &Path, anchor: &Path) -> Result<()> {
    let t = RdCurve::read_csv(test)?;
    let a = RdCurve::read_csv(anchor)?;
    let v = bd_rate(&t, &a)?;
    println!("BD-rate of {} vs {}: {v:+.4}%", t.label, a.label);
    Ok(())
}

fn ablate(a: &Ablation) -> Result<()> {
    match a {
        Ablation::Fusion { dataset, concat, add, mul, out, semantic_backend } => {
            let mut ckpts = Vec::new();
            for (s, p) in [
                (FusionStrategy::ChannelConcat, concat),
                (FusionStrategy::ElementwiseAdd, add),
                (FusionStrategy::ElementwiseMul, mul),
            ] {
                if let Some(p) = p {
                    ckpts.push((s, p.clone()));
                }
            }
            let report = run_ablation_fusion(&ckpts, dataset, *semantic_backend)?;
            write_report(out, &report.to_csv(), &report.to_text(), &report.to_svg())?;
            print!("{}", report.to_text());
            if !report.is_complete() {
                return Err(SelicError::Data("one or more fusion checkpoints are absent".into()).into());
            }
            Ok(())
        }
        Ablation::Semantic { dataset, pairs, out, semantic_backend } => {
            let report = run_ablation_semantic(pairs, dataset, *semantic_backend)?;
            write_report(out, &report.to_csv(), &report.to_text(), &report.to_svg())?;
            print!("{}", report.to_text());
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => evaluate(a),
        Command::Train { config } => {
            let opts = TrainOptions::load(config)?;
            let s = run_training(&opts)?;
            match s.last_loss {
                Some(l) => println!(
                    "{} steps, {} checkpoints; last loss {:.5} (bpp {:.4}, mse {:.6})",
                    s.steps,
                    s.checkpoints.len(),
                    l.total,
                    l.rate_bits_per_pixel,
                    l.distortion_mse
                ),
                None => println!("nothing to do; training already complete"),
            }
            Ok(())
        }
        Command::Bdrate { test, anchor } => bdrate(test, anchor),
        Command::Ablate(a) => ablate(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<SelicError>() {
        Some(SelicError::Config(_)) => EXIT_USAGE,
        Some(
            SelicError::BackendUnavailable(_)
            | SelicError::Backend(_)
            | SelicError::Checkpoint(_)
            | SelicError::Causality(_)
            | SelicError::NonFinite(_),
        ) => EXIT_MODEL,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let code = |e: SelicError| exit_code(&anyhow::Error::from(e));
        assert_eq!(code(SelicError::Config("x".into())), 2);
        assert_eq!(code(SelicError::Data("x".into())), 3);
        assert_eq!(code(SelicError::Bitstream("x".into())), 3);
        assert_eq!(code(SelicError::BackendUnavailable("x".into())), 4);
        assert_eq!(code(SelicError::Checkpoint("x".into())), 4);
    }

    #[test]
    fn pair_parsing() {
        assert_eq!(parse_pair("a,b").unwrap(), (PathBuf::from("a"), PathBuf::from("b")));
        assert!(parse_pair("a").is_err());
    }
}
