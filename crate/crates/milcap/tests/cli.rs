//! Drives the installed binary as a subprocess: the full generate,
//! pre-train, train, caption, evaluate pipeline on a tiny corpus, plus the
//! diagnostic commands and error reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_milcap")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary launches")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn spec_path(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../specs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

struct Pipeline {
    _dir: TempDir,
    corpus: PathBuf,
    classifier: PathBuf,
    model: PathBuf,
    train_log: PathBuf,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

/// Tiny end-to-end run shared by the command tests: 7 videos, a 2-per-class
/// image set, 25 pre-training steps, 10 captioner steps.
fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        let s = |p: &PathBuf| p.to_str().unwrap().to_string();

        let corpus = p("corpus");
        ok(&[
            "gen-corpus", "--seed", "3", "--out", &s(&corpus), "--train", "4", "--val", "1",
            "--test", "2", "--frames", "4",
        ]);

        let set = p("classif.mmvd");
        ok(&["gen-classif", "--seed", "3", "--out", &s(&set), "--per-class", "2"]);

        let pre_cfg = p("pre.cfg");
        fs::write(&pre_cfg, format!("set={}\nsteps=25\nbatch=8\nholdout_per_class=1\n", s(&set)))
            .unwrap();
        let classifier = p("clf.mmvd");
        let out = ok(&["pretrain", "--config", &s(&pre_cfg), "--out", &s(&classifier)]);
        assert!(out.contains("holdout_acc="), "pretrain output: {out}");

        let train_cfg = p("train.cfg");
        fs::write(&train_cfg, "scales=35\nsteps=10\nval_every=5\nhidden=8\nembed=4\n").unwrap();
        let model = p("model.mmvd");
        let train_log = p("train.log");
        let out = ok(&[
            "train", "--config", &s(&train_cfg), "--corpus", &s(&corpus), "--init",
            &s(&classifier), "--out", &s(&model), "--log", &s(&train_log),
        ]);
        assert!(out.contains("best_val_bleu="), "train output: {out}");

        Pipeline { _dir: dir, corpus, classifier, model, train_log }
    })
}

#[test]
fn geometry_prints_the_table() {
    let out = ok(&["geometry", "--spec", &spec_path("alexnet.spec"), "--inputs", "227,451,707"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines,
        [
            "input=227 map=1 rf=355 jump=32 center=113.0 ratio=100.0%",
            "input=451 map=8 rf=355 jump=32 center=113.0 ratio=78.7%",
            "input=707 map=16 rf=355 jump=32 center=113.0 ratio=50.2%",
        ]
    );
}

#[test]
fn gradcheck_reports_every_op() {
    let out = ok(&["gradcheck"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 7, "{out}");
    for line in lines {
        assert!(line.starts_with("pass "), "{line}");
    }
}

#[test]
fn pipeline_captions_by_id_and_by_path() {
    let p = pipeline();
    let corpus = p.corpus.to_str().unwrap();
    let model = p.model.to_str().unwrap();
    let by_id = ok(&["caption", "--model", model, "--video", "v0000", "--corpus", corpus]);
    let video_file = p.corpus.join("videos/v0000.mmvd");
    let by_path = ok(&["caption", "--model", model, "--video", video_file.to_str().unwrap()]);
    assert_eq!(by_id, by_path, "same video, different caption");

    let log = fs::read_to_string(&p.train_log).unwrap();
    assert!(log.starts_with("step=1 train_loss="), "log head: {}", &log[..log.len().min(60)]);
    assert_eq!(log.lines().count(), 10);
}

#[test]
fn pipeline_eval_reports_bleu_and_captions() {
    let p = pipeline();
    let out = ok(&[
        "eval", "--model", p.model.to_str().unwrap(), "--corpus", p.corpus.to_str().unwrap(),
        "--split", "train", "--captions",
    ]);
    assert!(out.contains("bleu = "), "{out}");
    assert!(out.contains("precisions = "), "{out}");
    let id_lines = out.lines().filter(|l| l.starts_with("v00")).count();
    assert_eq!(id_lines, 4, "{out}");
}

#[test]
fn pipeline_heatmap_names_the_winner() {
    let p = pipeline();
    let out = ok(&[
        "heatmap", "--model", p.model.to_str().unwrap(), "--corpus", p.corpus.to_str().unwrap(),
        "--video", "v0001", "--concept", "0", "--scale", "35",
    ]);
    assert!(out.contains("winner value="), "{out}");
    assert!(out.contains("box=["), "{out}");
}

#[test]
fn pipeline_converts_the_classifier() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("fcn.mmvd");
    ok(&[
        "convert", "--in", p.classifier.to_str().unwrap(), "--spec", &spec_path("mininet.spec"),
        "--out", out_path.to_str().unwrap(),
    ]);
    assert!(fs::metadata(&out_path).unwrap().len() > 0);
}

#[test]
fn pipeline_ablation_tabulates_scale_sets() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ablate.cfg");
    fs::write(&cfg, "steps=3\nval_every=3\nhidden=8\nembed=4\n").unwrap();
    let out = ok(&[
        "ablate", "--corpus", p.corpus.to_str().unwrap(), "--init",
        p.classifier.to_str().unwrap(), "--scales", "35;35,91", "--seeds", "1", "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.starts_with("scales\tmean\tmin\tmax\tper_seed"), "{out}");
    assert!(out.contains("\n35\t"), "{out}");
    assert!(out.contains("\n35,91\t"), "{out}");
}

#[test]
fn bad_inputs_fail_with_an_error_line() {
    let missing = run(&["eval", "--model", "/nonexistent.mmvd", "--corpus", "/nonexistent"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let scratch = tempfile::tempdir().unwrap();
    let never = scratch.path().join("never");
    let tiny_frame =
        run(&["gen-corpus", "--seed", "1", "--out", never.to_str().unwrap(), "--frame-size", "10"]);
    assert!(!tiny_frame.status.success());
    assert!(String::from_utf8_lossy(&tiny_frame.stderr).contains("error:"));
    assert!(!never.exists(), "a failed generation left files behind");

    let bad_ops = run(&["gradcheck", "--ops", "bogus"]);
    assert!(!bad_ops.status.success());
    assert!(String::from_utf8_lossy(&bad_ops.stderr).contains("--ops must be"));

    let cfg = scratch.path().join("no-set.cfg");
    fs::write(&cfg, "steps=5\n").unwrap();
    let out_path = scratch.path().join("clf.mmvd");
    let no_set = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert!(!no_set.status.success());
    assert!(String::from_utf8_lossy(&no_set.stderr).contains("set"));
}
