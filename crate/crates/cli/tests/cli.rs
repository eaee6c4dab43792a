use std::path::Path;
use std::process::{Command, Output};

use acpo_cli::checkpoint::{adapter_checkpoint, base_from_checkpoint, Checkpoint, CheckpointKind, Provenance};
use acpo_core::adapters::attach_adapters;
use serde_json::json;

fn tiny_config(conditional: bool) -> serde_json::Value {
    json!({
        "seed": 5,
        "data": { "image_size": 8, "conditional": conditional, "diffusion_items": 48, "iqa_items": 96, "iqa_heldout_items": 40 },
        "diffusion": { "timesteps": 20, "beta_start": 0.005, "beta_end": 0.3, "hidden": [16], "time_dim": 4, "pixel_hidden": 4, "train_steps": 30, "batch_size": 8 },
        "iqa": { "epochs": 2, "batch_size": 16, "patch_grid": 2 },
        "acpo": { "t_late_max": 5, "guided_steps": 2, "mse_batch": 4, "guide_batch": 2, "anchor_batch": 4, "steps": 4, "lr": 0.01, "guide_pool": 8, "probe_size": 4, "probe_every": 2 },
        "metrics": { "eval_samples": 8, "export_samples": 2, "reference_items": 16 },
        "ablate": { "lambda2": [0.1, 1.0, 10.0], "t_late_max": [5, 20], "lambda1": [1.0, 0.0] }
    })
}

fn write_config(dir: &Path, cfg: &serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn acpo(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("run.json");
    let out = dir.join("out");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_acpo"));
    cmd.arg(args[0]).arg("--config").arg(&config).arg("--out").arg(&out).args(&args[1..]);
    cmd.output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(Result::unwrap).collect()
}

fn header(path: &Path) -> Vec<String> {
    csv::Reader::from_path(path).unwrap().headers().unwrap().iter().map(String::from).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let i = header(path).iter().position(|h| h == name).unwrap();
    read_csv(path).iter().map(|r| r[i].to_string()).collect()
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config(false));
    let o = acpo(dir.path(), &["train-base", "--set", "acpo.lambda3=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda3"));

    let mut cfg = tiny_config(false);
    cfg["diffusion"]["widths"] = json!([4]);
    write_config(dir.path(), &cfg);
    let o = acpo(dir.path(), &["train-base"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widths"));
}

#[test]
fn invalid_value_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config(false));
    let o = acpo(dir.path(), &["finetune", "--set", "acpo.lambda1=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda1"));
}

#[test]
fn missing_upstream_exits_with_dependency_code() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config(false));
    for cmd in ["finetune", "evaluate", "ablate"] {
        let o = acpo(dir.path(), &[cmd]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("base.json"), "{cmd}");
    }
}

#[test]
fn zero_init_adapters_evaluate_to_an_even_split() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config(false));
    ok(&acpo(dir.path(), &["train-iqa"]));
    ok(&acpo(dir.path(), &["train-base"]));
    let out = dir.path().join("out");
    let mut net = base_from_checkpoint(&Checkpoint::load(&out.join("base.json"), CheckpointKind::BaseModel).unwrap()).unwrap();
    attach_adapters(&mut net, 2, 1.0, 1).unwrap();
    let ck = adapter_checkpoint(&net, Provenance { config_hash: String::new(), seed: 0, steps: 0 }).unwrap();
    ck.save(&out.join("adapters.json")).unwrap();

    ok(&acpo(dir.path(), &["evaluate"]));
    let summary = out.join("summary.csv");
    assert!(column(&summary, "win_rate").iter().all(|w| w.parse::<f64>().unwrap() == 0.5));
    let base: Vec<String> = column(&summary, "baseline_mean");
    assert_eq!(base, column(&summary, "finetuned_mean"));
}

#[test]
fn full_pipeline_is_deterministic() {
    let runs: Vec<(String, Vec<u8>)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            write_config(dir.path(), &tiny_config(false));
            ok(&acpo(dir.path(), &["train-iqa"]));
            ok(&acpo(dir.path(), &["train-base"]));
            ok(&acpo(dir.path(), &["finetune"]));
            let printed = ok(&acpo(dir.path(), &["evaluate"]));
            let out = dir.path().join("out");
            assert_eq!(read_csv(&out.join("steps.csv")).len(), 4);
            assert_eq!(read_csv(&out.join("frechet.csv")).len(), 2);
            assert!(out.join("samples/pair_001.pgm").exists());
            (printed, std::fs::read(out.join("adapters.json")).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config(false));
    ok(&acpo(dir.path(), &["train-iqa"]));
    ok(&acpo(dir.path(), &["train-base"]));
    let base = dir.path().join("out/base.json");
    let bytes = std::fs::read(&base).unwrap();
    std::fs::write(&base, &bytes[..bytes.len() / 2]).unwrap();
    let o = acpo(dir.path(), &["finetune"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

#[test]
fn changed_architecture_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config(false));
    ok(&acpo(dir.path(), &["train-iqa"]));
    ok(&acpo(dir.path(), &["train-base"]));
    let o = acpo(dir.path(), &["finetune", "--set", "diffusion.hidden=[20]"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ablate_trains_each_distinct_cell_once() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config(false));
    ok(&acpo(dir.path(), &["train-iqa"]));
    ok(&acpo(dir.path(), &["train-base"]));
    ok(&acpo(dir.path(), &["ablate"]));
    let table = dir.path().join("out/ablate.csv");
    let groups = column(&table, "group");
    for g in ["weight", "window", "anchor"] {
        assert!(groups.iter().any(|x| x == g), "{g}");
    }
    assert_eq!(groups.len(), 7);
    // The default cell appears in every group but is trained once.
    assert_eq!(std::fs::read_dir(dir.path().join("out/ablate")).unwrap().count(), 5);
}

#[test]
fn conditional_run_scores_images() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config(true));
    let printed = ok(&acpo(dir.path(), &["train-iqa"]));
    assert!(printed.contains("matched gap"));
    ok(&acpo(dir.path(), &["train-base"]));
    ok(&acpo(dir.path(), &["finetune"]));
    let img = dir.path().join("img.pgm");
    let mut pgm = b"P5\n8 8\n255\n".to_vec();
    pgm.extend((0..64u8).map(|v| v * 3));
    std::fs::write(&img, pgm).unwrap();
    let o = acpo(dir.path(), &["score", "--condition", "1", img.to_str().unwrap()]);
    let line = ok(&o);
    let score: f64 = line.trim().rsplit(',').next().unwrap().parse().unwrap();
    assert!(score > 0.0 && score < 1.0);
    let o = acpo(dir.path(), &["score", img.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
