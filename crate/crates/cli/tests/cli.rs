use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mov(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mov"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn mov")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const QUICKSTART: &str = r#"
seed = 3

[paths]
data_dir = "data"
backbone = "runs/backbone"

[synth]
classes = 4
n_base = 2
train_per_class = 3
test_per_class = 2

[synth.world]
frames = 8
audio_seconds = 1.0

[pretrain]
epochs = 2
pairs_per_epoch = 16
batch_size = 8

[train]
epochs = 2
batch_size = 4
"#;

#[test]
fn help_lists_subcommands_and_flags() {
    let d = tempfile::tempdir().unwrap();
    let o = mov(d.path(), &["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for s in ["synth", "preprocess", "pretrain", "train", "eval", "ablate", "report", "--config", "--seed", "--out", "--jobs"] {
        assert!(text.contains(s), "missing {s} in help");
    }
    let o = mov(d.path(), &["eval", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for s in ["--checkpoint", "--plot-data", "--reference", "--tau-v", "--beta"] {
        assert!(text.contains(s), "missing {s} in eval help");
    }
}

#[test]
fn unknown_axis_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = mov(d.path(), &["ablate", "--axis", "gamma"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trainable_layers"));
}

#[test]
fn plot_data_requires_reference() {
    let d = tempfile::tempdir().unwrap();
    let o = mov(d.path(), &["eval", "--checkpoint", "ck", "--plot-data", "x.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_line() {
    let d = tempfile::tempdir().unwrap();
    let o = mov(d.path(), &["preprocess", "--manifest", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.starts_with("mov: error: "), "{e}");
    assert_eq!(e.trim_end().lines().count(), 1, "{e}");

    fs::write(d.path().join("bad.toml"), "[train]\nepochs = \"many\"\n").unwrap();
    let o = mov(d.path(), &["--config", "bad.toml", "pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);

    let o = mov(d.path(), &["--jobs", "0", "pretrain"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_flags_missing_runs() {
    let d = tempfile::tempdir().unwrap();
    let o = mov(d.path(), &["--out", "agg", "report", "missing-run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing-run"));
    assert!(d.path().join("agg/summary.csv").is_file());
}

#[test]
fn quickstart_pipeline_from_one_config() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("mov.toml"), QUICKSTART).unwrap();
    let steps: [&[&str]; 6] = [
        &["--config", "mov.toml", "synth"],
        &["--config", "mov.toml", "preprocess"],
        &["--config", "mov.toml", "--out", "runs/backbone", "pretrain"],
        &["--config", "mov.toml", "--out", "runs/ck", "train", "--fusion", "cross-attention"],
        &["--out", "runs/ev", "eval", "--checkpoint", "runs/ck"],
        &["--out", "runs/agg", "report", "runs/ev", "runs/ev"],
    ];
    for args in steps {
        let o = mov(p, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    for f in [
        "data/manifest.jsonl",
        "runs/backbone/run.json",
        "runs/ck/config.toml",
        "runs/ck/run.json",
        "runs/ev/report.json",
        "runs/ev/report.csv",
        "runs/agg/summary.csv",
        "runs/agg/delta.csv",
    ] {
        assert!(p.join(f).is_file(), "missing {f}");
    }
    let summary = fs::read_to_string(p.join("runs/agg/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}
