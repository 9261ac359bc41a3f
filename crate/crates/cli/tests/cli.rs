use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lungvit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungvit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = "\
hidden_size = 8
intermediate_size = 16
num_layers = 1
num_heads = 2
batch_size = 5
epochs = 2
seed = 4
train_manifest = data/train.csv
test_manifest = data/test.csv
out_dir = run
";

fn setup(dir: &Path, masks: &str) {
    let o = lungvit(
        &[
            "synth",
            "--out",
            "data",
            "--train-per-class",
            "4",
            "--test-per-class",
            "2",
            "--masks",
            masks,
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("train.csv: 12 images"));
    fs::write(dir.join("run.cfg"), CONFIG).unwrap();
}

#[test]
fn train_plot_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "lungs");
    let o = lungvit(
        &["-q", "train", "--config", "run.cfg", "--set", "checkpoint_every=1"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("Epoch | Loss"));
    let report = fs::read(d.join("run/report.csv")).unwrap();

    let o = lungvit(&["plot", "run/report.csv", "--out", "curves.svg"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(d.join("curves.svg")).unwrap().contains("<svg"));

    let o = lungvit(
        &[
            "-q",
            "train",
            "--config",
            "run.cfg",
            "--out",
            "run2",
            "--resume",
            "run/checkpoint_epoch_1.ckpt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = fs::read_to_string(d.join("run2/report.csv")).unwrap();
    let original = String::from_utf8(report).unwrap();
    assert_eq!(resumed.lines().count(), 2);
    assert_eq!(resumed.lines().last(), original.lines().last());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "lungs");
    for (out, seed) in [("a", "4"), ("b", "5")] {
        let o = lungvit(&["-q", "train", "--config", "run.cfg", "--out", out, "--seed", seed], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(d.join("a/report.csv")).unwrap();
    let b = fs::read(d.join("b/report.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn compare_with_identity_masks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "ones");
    let o = lungvit(&["-q", "compare", "--config", "run.cfg"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Masked ROC AUC (%)"));
    assert_eq!(
        fs::read(d.join("run/full/report.csv")).unwrap(),
        fs::read(d.join("run/masked/report.csv")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(d.join("run/compare.csv")).unwrap().lines().count(),
        5
    );
}

#[test]
fn score_prints_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("p.csv"),
        "label,score_0,score_1\n0,0.9,0.1\n1,0.3,0.7\n1,0.4,0.6\n",
    )
    .unwrap();
    let o = lungvit(&["score", "p.csv", "--out", "m.csv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy,1.000000"));
    assert!(stdout(&o).contains("roc_auc,1.0000"));
}

#[test]
fn errors_are_one_line_with_class_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "lungs");
    let cases: [(&[&str], &str, i32); 4] = [
        (&["train", "--config", "missing.cfg"], "error[io]", 5),
        (
            &["train", "--config", "run.cfg", "--set", "batch_size=0"],
            "error[config]",
            3,
        ),
        (&["train", "--config", "run.cfg", "--set", "nope"], "error[usage]", 2),
        (&["score", "run.cfg", "--out", "x.csv"], "error[data]", 4),
    ];
    for (args, prefix, code) in cases {
        let o = lungvit(args, d);
        let err = stderr(&o);
        assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
        let last = err.lines().last().unwrap();
        assert!(last.starts_with(prefix), "{args:?}: {err}");
    }
    let o = lungvit(&["train", "--mode", "sideways"], d);
    assert_eq!(o.status.code(), Some(2));
}
