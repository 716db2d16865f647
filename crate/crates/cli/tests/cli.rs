use std::path::{Path, PathBuf};

use assert_cmd::Command;
use selic_core::checkpoint::Checkpoint;
use selic_core::config::ModelConfig;
use selic_core::{FusionStrategy, ImagePlane, SelicModel};
use tempfile::TempDir;

fn selic() -> Command {
    Command::cargo_bin("selic").unwrap()
}

fn gradient(h: usize, w: usize, phase: f32) -> ImagePlane {
    ImagePlane::from_fn(h, w, |c, y, x| {
        let v = (x as f32 * 0.11 + y as f32 * 0.07 + c as f32 + phase).sin();
        0.5 + 0.4 * v
    })
}

fn tiny_checkpoint(dir: &Path, name: &str, fusion: FusionStrategy) -> PathBuf {
    let cfg = ModelConfig { fusion, ..ModelConfig::tiny() };
    let path = dir.join(name);
    Checkpoint::new(SelicModel::new(cfg).unwrap()).save(&path).unwrap();
    path
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&mut selic()), 2);
    assert_eq!(code(selic().args(["encode", "-i", "a.png"])), 2);
    assert_eq!(code(selic().args(["encode", "-i", "a", "-o", "b", "--model", "m", "--coder", "turbo"])), 2);
}

#[test]
fn missing_model_exits_4() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("in.png");
    gradient(64, 64, 0.0).save(&img).unwrap();
    let out = dir.path().join("out.selic");
    let model = dir.path().join("nope.ckpt");
    assert_eq!(code(selic().arg("encode").arg("-i").arg(&img).arg("-o").arg(&out).arg("--model").arg(&model)), 4);
}

#[test]
fn bad_bitstream_exits_3() {
    let dir = TempDir::new().unwrap();
    let model = tiny_checkpoint(dir.path(), "m.ckpt", FusionStrategy::ChannelConcat);
    let bad = dir.path().join("bad.selic");
    std::fs::write(&bad, b"SELC not really").unwrap();
    let out = dir.path().join("o.png");
    assert_eq!(code(selic().arg("decode").arg("-i").arg(&bad).arg("-o").arg(&out).arg("--model").arg(&model)), 3);
}

#[test]
fn encode_decode_round_trip() {
    let dir = TempDir::new().unwrap();
    let model = tiny_checkpoint(dir.path(), "m.ckpt", FusionStrategy::ElementwiseAdd);
    let img = dir.path().join("in.png");
    gradient(70, 90, 0.3).save(&img).unwrap();
    let bits = dir.path().join("in.selic");
    let out = dir.path().join("out.png");
    selic()
        .arg("encode").arg("-i").arg(&img).arg("-o").arg(&bits).arg("--model").arg(&model)
        .args(["--fusion", "add", "--coder", "fast"])
        .assert()
        .success();
    selic().arg("decode").arg("-i").arg(&bits).arg("-o").arg(&out).arg("--model").arg(&model).assert().success();
    let decoded = ImagePlane::load(&out).unwrap();
    assert_eq!(decoded.dims(), (70, 90));

    // A second encode with the reference coder writes the same bytes.
    let bits2 = dir.path().join("again.selic");
    selic().arg("encode").arg("-i").arg(&img).arg("-o").arg(&bits2).arg("--model").arg(&model).assert().success();
    assert_eq!(std::fs::read(&bits).unwrap(), std::fs::read(&bits2).unwrap());
}

#[test]
fn fusion_mismatch_exits_4() {
    let dir = TempDir::new().unwrap();
    let model = tiny_checkpoint(dir.path(), "m.ckpt", FusionStrategy::ChannelConcat);
    let img = dir.path().join("in.png");
    gradient(64, 64, 0.0).save(&img).unwrap();
    let bits = dir.path().join("x.selic");
    let c = code(selic().arg("encode").arg("-i").arg(&img).arg("-o").arg(&bits).arg("--model").arg(&model).args(["--fusion", "mul"]));
    assert_eq!(c, 4);
    assert!(!bits.exists());
}

fn write_curve(path: &Path, label: &str, scale: f64) {
    let mut s = String::from("label,bpp,psnr_db,ms_ssim\n");
    for (r, d) in [(0.1, 28.0), (0.2, 31.0), (0.4, 34.0), (0.8, 37.0)] {
        s += &format!("{label},{},{d},\n", r * scale);
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn bdrate_reports_percent() {
    let dir = TempDir::new().unwrap();
    let (a, t) = (dir.path().join("a.csv"), dir.path().join("t.csv"));
    write_curve(&a, "anchor", 1.0);
    write_curve(&t, "test", 0.9);
    let out = selic().arg("bdrate").arg("--test").arg(&t).arg("--anchor").arg(&a).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("-10.0000%"), "{text}");

    std::fs::write(&t, "label,bpp,psnr_db\nx,0.1,30\n").unwrap();
    assert_eq!(code(selic().arg("bdrate").arg("--test").arg(&t).arg("--anchor").arg(&a)), 3);
}

#[test]
fn eval_and_incomplete_fusion_ablation() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    gradient(64, 64, 0.0).save(&data.join("a.png")).unwrap();
    gradient(64, 96, 1.0).save(&data.join("b.png")).unwrap();
    let add = tiny_checkpoint(dir.path(), "add.ckpt", FusionStrategy::ElementwiseAdd);

    let csv = dir.path().join("rd.csv");
    selic().arg("eval").arg("--dataset").arg(&data).arg("--model").arg(&add).arg("--csv").arg(&csv).assert().success();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().any(|l| l.starts_with("add,")), "{text}");

    let stem = dir.path().join("fusion");
    let c = code(selic().args(["ablate", "fusion", "--dataset"]).arg(&data).arg("--add").arg(&add).arg("--out").arg(&stem));
    assert_eq!(c, 3);
    for ext in ["csv", "txt", "svg"] {
        assert!(stem.with_extension(ext).exists(), "{ext}");
    }
}

#[test]
fn train_writes_checkpoints() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    gradient(64, 64, 0.0).save(&data.join("a.png")).unwrap();
    gradient(64, 64, 2.0).save(&data.join("b.png")).unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("train.cfg");
    let text = format!(
        "{}train.dataset = {}\ntrain.output = {}\ntrain.epochs = 1\ntrain.lr_drop_epoch = 0\ntrain.batch_size = 2\ntrain.crop = 64\n",
        ModelConfig::tiny().to_kv_string(),
        data.display(),
        out.display()
    );
    std::fs::write(&cfg, text).unwrap();
    selic().arg("train").arg("--config").arg(&cfg).assert().success();
    assert!(out.join("epoch_0001.ckpt").exists());
    assert!(out.join("train_log.csv").exists());

    std::fs::write(&cfg, "train.dataset = x\n").unwrap();
    assert_eq!(code(selic().arg("train").arg("--config").arg(&cfg)), 2);
}
