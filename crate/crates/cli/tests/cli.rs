//! End-to-end runs of the installed binary: train, eval, report, and
//! ablate on a desk-sized config, plus flag and environment handling.

use std::path::Path;
use std::process::{Command, Output};

fn catmark(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_catmark"));
    cmd.args(args).env_remove("CATMARK_OUT_ROOT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = r#"
seed = 5

[dataset]
size = 12
resolution = 8

[model]
payload_bits = 4
width = 4

[train]
epochs = 2
steps_per_epoch = 2
batch_size = 4
warmup_epochs = 1
checkpoint_every = 1

[adversary]
depth = 1
d_h = 16

[eval]
samples = 4

[eval.single]
rotate = [10.0]
jpeg = [60.0]

[eval.pair]
rotate = [5.0]
jpeg = [60.0]
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_nonzero_with_usage() {
    let out = catmark(&["frobnicate"], &[]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr: {stderr}");
}

#[test]
fn train_eval_report_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = catmark(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--mode",
            "cat",
            "--depth",
            "1",
            "--seed",
            "3",
            "--out",
            run_s,
        ],
        &[],
    );
    assert_ok(&out);
    for artifact in ["log.csv", "manifest.json", "config.toml", "checkpoint_ep0002.safetensors"] {
        assert!(run.join(artifact).exists(), "missing {artifact}");
    }

    // run directory form
    let out = catmark(&["eval", "--checkpoint", run_s, "--mode", "single"], &[]);
    assert_ok(&out);
    assert!(run.join("eval/eval_single.csv").exists());
    assert!(run.join("eval/eval_single.json").exists());

    // explicit checkpoint file form, transfer grid, custom out dir
    let ckpt = run.join("checkpoint_ep0002.safetensors");
    let fwd_dir = tmp.path().join("fwd");
    let out = catmark(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--mode",
            "forward",
            "--format",
            "json",
            "--out",
            fwd_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out);
    assert!(fwd_dir.join("eval_forward.json").exists());
    assert!(!fwd_dir.join("eval_forward.csv").exists());

    let out = catmark(&["report", "--run", run_s], &[]);
    assert_ok(&out);
    for chart in
        ["train_lr.png", "train_l_msg.png", "train_val_bit_error.png", "eval_single_accuracy.png"]
    {
        assert!(run.join("plots").join(chart).exists(), "missing {chart}");
    }
}

#[test]
fn eval_is_reproducible_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = catmark(
        &["train", "--config", config.to_str().unwrap(), "--out", run_s],
        &[],
    );
    assert_ok(&out);

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = catmark(
            &[
                "eval",
                "--checkpoint",
                run_s,
                "--mode",
                "single",
                "--format",
                "csv",
                "--out",
                dir.to_str().unwrap(),
            ],
            &[],
        );
        assert_ok(&out);
    }
    let csv_a = std::fs::read(a.join("eval_single.csv")).unwrap();
    let csv_b = std::fs::read(b.join("eval_single.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn out_root_env_redirects_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let root = tmp.path().join("root");

    let out = catmark(
        &["train", "--config", config.to_str().unwrap(), "--out", "rel-run"],
        &[("CATMARK_OUT_ROOT", root.to_str().unwrap())],
    );
    assert_ok(&out);
    assert!(root.join("rel-run/log.csv").exists());
}

#[test]
fn ablate_entropy_writes_two_runs_differing_only_in_lambda_ent() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let parent = tmp.path().join("ablation");

    let out = catmark(
        &[
            "ablate",
            "--which",
            "entropy",
            "--config",
            config.to_str().unwrap(),
            "--out",
            parent.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out);

    let off = parent.join("lambda-ent-0");
    let on = parent.join("lambda-ent-0.1");
    assert!(off.join("manifest.json").exists());
    assert!(on.join("manifest.json").exists());

    let mut off_cfg: toml::Value =
        toml::from_str(&std::fs::read_to_string(off.join("config.toml")).unwrap()).unwrap();
    let mut on_cfg: toml::Value =
        toml::from_str(&std::fs::read_to_string(on.join("config.toml")).unwrap()).unwrap();
    let get = |v: &toml::Value, key: &str| v["adversary"][key].as_float().unwrap();
    assert_eq!(get(&off_cfg, "lambda_ent"), 0.0);
    assert_eq!(get(&on_cfg, "lambda_ent"), 0.1);

    // identical everywhere else
    for cfg in [&mut off_cfg, &mut on_cfg] {
        let table = cfg.as_table_mut().unwrap();
        table.remove("out_dir");
        table.get_mut("adversary").unwrap().as_table_mut().unwrap().remove("lambda_ent");
    }
    assert_eq!(off_cfg, on_cfg);
}
