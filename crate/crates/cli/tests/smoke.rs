//! End-to-end pipeline smoke test with tiny budgets: data generation,
//! extractor/base/upsampler training, sampling, evaluation, editing, plus
//! the documented failure modes and determinism contracts.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shapediff"))
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn shapediff");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        out.status.success(),
        "command failed\nstdout: {stdout}\nstderr: {stderr}"
    );
    stdout
}

fn fails_with(cmd: &mut Command, needle: &str) {
    let out = cmd.output().expect("spawn shapediff");
    assert!(!out.status.success(), "command unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        stderr.contains(needle),
        "stderr should mention '{needle}', got: {stderr}"
    );
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "\
seed = 11
schedule.steps = 12
model.base_widths = 8,16,24
model.upsampler_widths = 8,16,24
model.head_widths = 8,8,8
model.extractor_widths = 8,16,8
model.groups = 4
model.attn_dim = 8
model.tokens_k = 2
model.tokens_d = 8
train.batch_size = 4
train.steps_pretrain = 12
train.steps_finetune = 6
train.steps_upsampler = 6
train.extractor_steps = 8
data.pretext_size = 24
data.downstream_size = 12
data.test_size = 12
sample.steps_base = 6
sample.steps_upsampler = 4
sample.n = 3
eval.fid_samples = 12
",
    )
    .unwrap();
    cfg
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir);
    let data = dir.join("data");

    // Seed is mandatory.
    fails_with(
        bin().args(["gen-data", "--out"]).arg(&data),
        "seed is mandatory",
    );

    ok(bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data));
    for split in ["pretext", "mask", "sketch", "geometry", "test"] {
        assert!(data.join(split).join("meta.jsonl").exists());
    }
    assert!(data.join("resolved-config.txt").exists());

    let fx = dir.join("extractor.ckpt");
    ok(bin()
        .args(["train-extractor", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&fx));

    let pre = dir.join("pretrained.ckpt");
    ok(bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&pre));
    assert!(dir.join("pretrained.metrics.csv").exists());

    // Stage 2 without a stage-1 checkpoint names the prerequisite.
    fails_with(
        bin()
            .args(["finetune", "--config"])
            .arg(&cfg)
            .args(["--task", "mask", "--stage", "2", "--input"])
            .arg(&pre)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(dir.join("bad.ckpt")),
        "stage-1 checkpoint",
    );

    let s1 = dir.join("mask-s1.ckpt");
    ok(bin()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .args(["--task", "mask", "--stage", "1", "--input"])
        .arg(&pre)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&s1));
    let s2 = dir.join("mask-s2.ckpt");
    ok(bin()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .args(["--task", "mask", "--stage", "2", "--input"])
        .arg(&s1)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&s2));

    let up = dir.join("upsampler.ckpt");
    ok(bin()
        .args(["train-upsampler", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--extractor")
        .arg(&fx)
        .arg("--out")
        .arg(&up));
    assert!(dir.join("upsampler.disc").exists());

    // Sampling twice with identical args is bitwise identical.
    let out1 = dir.join("samples1");
    let out2 = dir.join("samples2");
    for out in [&out1, &out2] {
        ok(bin()
            .args(["sample", "--config"])
            .arg(&cfg)
            .arg("--ckpt")
            .arg(&s2)
            .arg("--upsampler")
            .arg(&up)
            .arg("--source")
            .arg(data.join("test"))
            .arg("--out")
            .arg(out));
    }
    for i in 0..3 {
        let a = std::fs::read(out1.join(format!("sample_{i:03}.ppm"))).unwrap();
        let b = std::fs::read(out2.join(format!("sample_{i:03}.ppm"))).unwrap();
        assert_eq!(a, b, "sample {i} differs between identical runs");
        assert!(out1.join(format!("sample_{i:03}.meta.json")).exists());
    }
    assert!(out1.join("montage.ppm").exists());

    // Eval writes the CSV with the expected header.
    let csv = dir.join("metrics.csv");
    ok(bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--ckpt")
        .arg(&s2)
        .arg("--extractor")
        .arg(&fx)
        .arg("--data")
        .arg(data.join("test"))
        .arg("--out")
        .arg(&csv));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("metric,model,split,value,seed"));
    assert!(body.contains("toy_fid"));
    assert!(body.contains("mask_iou"));

    // Editing requires the DDIM sampler; with it, identical conditions give
    // a deterministic output.
    let img16 = out1.join("img16.ppm");
    {
        // Build a 16x16 input by downsampling a dataset image.
        let samples = shapediff_core::data::dataset_read(&data.join("test")).unwrap();
        shapediff_core::data::write_ppm(&img16, &samples[0].image16()).unwrap();
        shapediff_core::data::write_pgm(&out1.join("old.pgm"), &samples[0].mask).unwrap();
        shapediff_core::data::write_pgm(&out1.join("new.pgm"), &samples[1].mask).unwrap();
    }
    fails_with(
        bin()
            .args(["edit", "--config"])
            .arg(&cfg)
            .arg("--ckpt")
            .arg(&s2)
            .arg("--image")
            .arg(&img16)
            .arg("--old-cond")
            .arg(out1.join("old.pgm"))
            .arg("--new-cond")
            .arg(out1.join("new.pgm"))
            .arg("--out")
            .arg(dir.join("edited.ppm")),
        "ddim",
    );
    for out in ["edited_a.ppm", "edited_b.ppm"] {
        ok(bin()
            .args(["edit", "--config"])
            .arg(&cfg)
            .args(["--set", "sample.kind=ddim"])
            .arg("--ckpt")
            .arg(&s2)
            .arg("--image")
            .arg(&img16)
            .arg("--old-cond")
            .arg(out1.join("old.pgm"))
            .arg("--new-cond")
            .arg(out1.join("new.pgm"))
            .arg("--out")
            .arg(dir.join(out)));
    }
    let a = std::fs::read(dir.join("edited_a.ppm")).unwrap();
    let b = std::fs::read(dir.join("edited_b.ppm")).unwrap();
    assert_eq!(a, b, "repeated edits must be identical");

    // Unknown config keys are rejected.
    std::fs::write(dir.join("bad.cfg"), "seed = 1\nbogus.key = 2\n").unwrap();
    fails_with(
        bin()
            .args(["gen-data", "--config"])
            .arg(dir.join("bad.cfg"))
            .arg("--out")
            .arg(dir.join("x")),
        "unknown config key",
    );
}

#[test]
fn pretrain_resume_continues_step_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir);
    let data = dir.join("data");
    ok(bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data));

    let full = dir.join("full.ckpt");
    ok(bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&full)
        .args(["--steps", "10"]));

    let half = dir.join("half.ckpt");
    ok(bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&half)
        .args(["--steps", "6"]));
    let resumed = dir.join("resumed.ckpt");
    ok(bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&resumed)
        .arg("--resume")
        .arg(&half)
        .args(["--steps", "4"]));

    // Metrics of the resumed tail equal rows 7..10 of the straight run.
    let full_csv = std::fs::read_to_string(dir.join("full.metrics.csv")).unwrap();
    let tail_csv = std::fs::read_to_string(dir.join("resumed.metrics.csv")).unwrap();
    let full_rows: Vec<&str> = full_csv.lines().skip(1 + 6).collect();
    let tail_rows: Vec<&str> = tail_csv.lines().skip(1).collect();
    assert_eq!(full_rows, tail_rows, "resumed losses must continue bitwise");
}
