use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use textsmooth::checkpoint::Checkpoint;
use textsmooth::distill::{records_to_jsonl, reports_from_jsonl};

fn quick_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.conf")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textsmooth"))
        .args(args)
        .arg("--output_dir")
        .arg(out)
        .output()
        .expect("spawn textsmooth")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(cmd: &str, extra: &[&str], out: &Path) -> String {
    let conf = quick_conf();
    let mut args = vec![cmd, conf.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args, out);
    assert!(o.status.success(), "{cmd} failed: {}", stderr(&o));
    stdout(&o)
}

fn pretrained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok("pretrain", &[], dir.path());
    dir
}

#[test]
fn pretrain_round_trips_and_is_deterministic() {
    let a = pretrained();
    let b = pretrained();
    let load = |d: &Path| Checkpoint::load(&d.join("checkpoints/teacher.ckpt")).unwrap();
    let (ca, cb) = (load(a.path()), load(b.path()));
    assert_eq!(ca.params.checksum(), cb.params.checksum());
    let printed = ok("pretrain", &[], a.path());
    assert!(printed.contains(&format!("checksum: {}", ca.params.checksum())), "{printed}");
    assert!(printed.contains("epoch 1\tloss"));
}

#[test]
fn missing_corpus_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let conf = quick_conf();
    let o = run(
        &[
            "pretrain",
            conf.to_str().unwrap(),
            "--data",
            "files",
            "--corpus",
            "/nonexistent/corpus.txt",
            "--train_data",
            "/nonexistent/train.tsv",
            "--test_data",
            "/nonexistent/test.tsv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/corpus.txt"), "{}", stderr(&o));
}

#[test]
fn smooth_prints_one_forward_per_instance() {
    let dir = pretrained();
    let out = ok("smooth", &[], dir.path());
    assert!(out.contains("teacher forwards: 24"), "{out}");
    assert!(out.contains("lambda: 0.5"));
    assert!(dir.path().join("caches/train.smooth").is_file());
}

#[test]
fn invalid_fields_are_all_reported_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let conf = quick_conf();
    let o = run(
        &["smooth", conf.to_str().unwrap(), "--smooth.lambda", "1.5", "--train.batch_size", "0", "--nonsense", "1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for needle in ["lambda", "batch_size", "nonsense"] {
        assert!(err.contains(needle), "{needle} missing: {err}");
    }
    assert!(!dir.path().join("caches").exists());
}

#[test]
fn distill_on_lambda_one_matches_finetune() {
    let dir = pretrained();
    ok("smooth", &["--smooth.lambda", "1"], dir.path());
    let distilled = ok("distill", &["--smooth.lambda", "1"], dir.path());
    let tuned = ok("finetune", &[], dir.path());
    for out in [&distilled, &tuned] {
        let last = out.lines().last().unwrap();
        assert!(last.starts_with("test accuracy: "), "{last}");
    }
    let read = |name: &str| {
        let text = fs::read_to_string(dir.path().join("metrics").join(name)).unwrap();
        let reports = reports_from_jsonl(&text).unwrap();
        assert_eq!(records_to_jsonl(&reports), text, "metrics do not round trip");
        reports.into_iter().next().unwrap()
    };
    let a = read("textsmooth_seed1.jsonl");
    let b = read("bert_small_seed1.jsonl");
    assert!(!a.step_losses.is_empty());
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn distill_needs_a_matching_cache() {
    let dir = pretrained();
    let conf = quick_conf();
    let o = run(&["distill", conf.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("textsmooth smooth"), "{}", stderr(&o));
    ok("smooth", &[], dir.path());
    let o = run(&["distill", conf.to_str().unwrap(), "--smooth.lambda", "0.9"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kd_writes_teacher_and_student() {
    let dir = pretrained();
    let out = ok("kd", &[], dir.path());
    assert!(out.lines().last().unwrap().starts_with("test accuracy: "));
    assert!(dir.path().join("checkpoints/kd_teacher.ckpt").is_file());
    assert!(dir.path().join("checkpoints/soft_label_kd_seed1.ckpt").is_file());
}

#[test]
fn sample_reports_are_deterministic() {
    let dir = pretrained();
    let a = ok("sample", &["--text", "the film was great"], dir.path());
    let b = ok("sample", &["--text", "the film was great"], dir.path());
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "the film was great");
    assert_eq!(lines.len(), 6);
    let sentences: std::collections::HashSet<&str> = lines[1..].iter().map(|l| l.rsplit('\t').next().unwrap()).collect();
    assert_eq!(sentences.len(), 5);
    assert_eq!(fs::read_to_string(dir.path().join("reports/samples.txt")).unwrap(), a);

    let oov = ok("sample", &["--text", "zzz qqq"], dir.path());
    assert!(oov.contains("[UNK]"), "{oov}");

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert_eq!(ok("sample", &["--input", empty.to_str().unwrap()], dir.path()), "");
}

#[test]
fn sample_without_text_is_a_usage_error() {
    let dir = pretrained();
    let conf = quick_conf();
    let o = run(&["sample", conf.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_summarizes_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok("compare", &[], dir.path());
    for method in ["textsmooth", "bert_small", "soft_label_kd"] {
        assert!(out.lines().any(|l| l.starts_with(method) && l.contains("seconds/epoch")), "{out}");
    }
    assert!(out.contains("mean_acc") && out.contains("std") && out.contains("sec/epoch"));
    let records = fs::read_to_string(dir.path().join("metrics/comparison.jsonl")).unwrap();
    assert_eq!(reports_from_jsonl(&records).unwrap().len(), 6);
}

#[test]
fn compare_exits_nonzero_when_runs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let conf = quick_conf();
    let o = run(&["compare", conf.to_str().unwrap(), "--train.learning_rate", "1e300"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("reports/comparison.txt")).unwrap();
    assert!(report.contains("FAILED"), "{report}");
}

#[test]
fn usage_errors_exit_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_textsmooth")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_textsmooth")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn file_datasets_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("corpus.txt"), "a great film\na dull film\nthe plot was great\nthe plot was dull\n\ngreat acting\n").unwrap();
    fs::write(d.join("train.tsv"), "pos\ta great film\nneg\ta dull film\npos\tgreat acting\tthe plot\nneg\tdull acting\n").unwrap();
    fs::write(d.join("test.tsv"), "neg\tthe plot was dull\npos\tthe plot was great\n").unwrap();
    let files = [
        "--data",
        "files",
        "--corpus",
        d.join("corpus.txt").to_str().unwrap(),
        "--train_data",
        d.join("train.tsv").to_str().unwrap(),
        "--test_data",
        d.join("test.tsv").to_str().unwrap(),
    ]
    .map(String::from);
    let files: Vec<&str> = files.iter().map(String::as_str).collect();
    ok("pretrain", &files, d);
    let out = ok("smooth", &files, d);
    assert!(out.contains("teacher forwards: 4"), "{out}");
    let out = ok("distill", &files, d);
    assert!(out.lines().last().unwrap().starts_with("test accuracy: "));

    fs::write(d.join("test.tsv"), "maybe\tthe plot\n").unwrap();
    let conf = quick_conf();
    let mut args = vec!["finetune", conf.to_str().unwrap()];
    args.extend_from_slice(&files);
    let o = run(&args, d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("maybe"), "{}", stderr(&o));
}
