use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualtal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualtal")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

const CONFIG: &str = r#"
input_dim = 8
window = 32
levels = 3
num_classes = 2
base_channels = 4
pyramid_channels = [4, 4, 4, 4, 4, 4]
head_channels = 4
train_stride = 8
eval_stride = 16
batch_size = 4
lr = 1e-3
epochs = 1
anchor_alpha = 0.1
anchor_beta = 0.2
train_manifest = "train/manifest.json"
eval_manifest = "test/manifest.json"
"#;

fn corpus(dir: &Path, name: &str, seed: u64) {
    let seed = format!("seed={seed}");
    ok(&dualtal(
        dir,
        &[
            "synth", "--out", name, "--set", "num_videos=4", "--set", "video_steps=64", "--set", "num_classes=2", "--set", "dim=8", "--set",
            "fps=8.0", "--set", "max_duration=12.0", "--set", &seed,
        ],
    ));
}

#[test]
fn train_resume_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    corpus(dir, "train", 1);
    corpus(dir, "test", 2);
    fs::write(dir.join("exp.toml"), CONFIG).unwrap();

    ok(&dualtal(dir, &["train", "--config", "exp.toml", "--run-dir", "run"]));
    for f in ["config.toml", "run.json", "train_log.jsonl", "loss_curve.csv", "checkpoint/model.ckpt", "checkpoint/state.json"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let info = fs::read_to_string(dir.join("run/run.json")).unwrap();
    assert!(info.contains("\"input_hash\"") && info.contains("lr = 0.001"));

    // a second fresh run into the same directory is refused
    assert_eq!(dualtal(dir, &["train", "--config", "exp.toml", "--run-dir", "run"]).status.code(), Some(1));

    ok(&dualtal(dir, &["train", "--run-dir", "run", "--resume", "--set", "epochs=2"]));
    let curve = fs::read_to_string(dir.join("run/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3, "{curve}");

    ok(&dualtal(dir, &["infer", "--run-dir", "run", "--out", "dets.jsonl"]));
    ok(&dualtal(dir, &["infer", "--run-dir", "run", "--out", "again.jsonl"]));
    assert_eq!(fs::read(dir.join("dets.jsonl")).unwrap(), fs::read(dir.join("again.jsonl")).unwrap());

    let out = dualtal(dir, &["eval", "--detections", "dets.jsonl", "--manifest", "test/manifest.json", "--out-dir", "ev"]);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("0.70") && table.contains("EL"));
    for f in ["eval.json", "eval.txt", "eval.csv", "pr_curve.csv"] {
        assert!(dir.join("ev").join(f).exists(), "missing {f}");
    }
    ok(&dualtal(dir, &["report", "run", "run"]));
    ok(&dualtal(dir, &["report", "compare", "ev/eval.json"]));

    // a joint run cannot stand in for a single-branch one
    assert_eq!(dualtal(dir, &["fuse", "--af", "run", "--ab", "run", "--out", "f.jsonl"]).status.code(), Some(1));

    // detections for videos outside the manifest are reported and excluded
    let mut text = fs::read_to_string(dir.join("dets.jsonl")).unwrap();
    text.push_str(r#"{"video_id":"nowhere","t_start_sec":0.0,"t_end_sec":1.0,"label":1,"score":0.5,"branch":"af"}"#);
    text.push('\n');
    fs::write(dir.join("extra.jsonl"), text).unwrap();
    let out = dualtal(dir, &["eval", "--detections", "extra.jsonl", "--manifest", "test/manifest.json", "--out-dir", "ev2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn fuse_pools_two_single_branch_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    corpus(dir, "train", 3);
    corpus(dir, "test", 4);
    fs::write(dir.join("exp.toml"), CONFIG).unwrap();
    ok(&dualtal(dir, &["train", "--config", "exp.toml", "--run-dir", "af", "--set", "branch_mode=af_only"]));
    ok(&dualtal(dir, &["train", "--config", "exp.toml", "--run-dir", "ab", "--set", "branch_mode=ab_only"]));
    ok(&dualtal(dir, &["fuse", "--af", "af", "--ab", "ab", "--out", "fused.jsonl"]));
    ok(&dualtal(dir, &["infer", "--run-dir", "af", "--out", "af.jsonl"]));
    ok(&dualtal(dir, &["infer", "--run-dir", "ab", "--out", "ab.jsonl"]));
    let lines = |f: &str| fs::read_to_string(dir.join(f)).unwrap().lines().count();
    assert!(lines("fused.jsonl") <= lines("af.jsonl") + lines("ab.jsonl"));

    // a diverging run stops with the numerical exit code
    let out = dualtal(dir, &["train", "--config", "exp.toml", "--run-dir", "diverge", "--set", "lr=1e300", "--set", "epochs=3"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(dualtal(dir, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(dualtal(dir, &["--help"]).status.code(), Some(0));

    fs::write(dir.join("typo.toml"), "learning_rate = 0.1\n").unwrap();
    let out = dualtal(dir, &["train", "--config", "typo.toml", "--run-dir", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    fs::write(dir.join("cfg.toml"), "train_manifest = \"missing/manifest.json\"\n").unwrap();
    assert_eq!(dualtal(dir, &["train", "--config", "cfg.toml", "--run-dir", "r"]).status.code(), Some(2));

    let schema = dualtal(dir, &["report", "schema"]);
    ok(&schema);
    assert!(String::from_utf8_lossy(&schema.stdout).contains("decay_epoch"));
}
