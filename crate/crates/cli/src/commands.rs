use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use textsmooth::checkpoint::Checkpoint;
use textsmooth::distill::{
    evaluate, finetune_baseline, pretrain_mlm, records_to_jsonl, run_comparison, soft_label_kd, train_student,
    ClassifierTeacher, ComparisonConfig, MetricsReport,
};
use textsmooth::sampler::sample_report;
use textsmooth::smoothing::{smooth_dataset, SmoothedDataset};
use textsmooth::synthetic::make_synthetic_task;
use textsmooth::text::{load_dataset, read_examples, Dataset, RawExample, Vocabulary};
use textsmooth::transformer::{ModelConfig, TransformerParams};

use crate::config::{DataSource, ExperimentConfig};

/// Invalid configuration or usage; exits with status 1.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration:")?;
        for e in &self.0 {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(vec![msg.into()]).into()
}

/// The fixed output tree under `output_dir`.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "caches", "metrics", "reports"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        Ok(Layout { root: root.to_path_buf() })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn train_cache(&self) -> PathBuf {
        self.root.join("caches/train.smooth")
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

fn run_name(method: &str, seed: u64) -> String {
    format!("{method}_seed{seed}")
}

fn check_data_files(cfg: &ExperimentConfig) -> Result<()> {
    let missing: Vec<String> = cfg
        .data_files()
        .into_iter()
        .filter(|(_, p)| !p.is_file())
        .map(|(k, p)| format!("{k}: file {} does not exist", p.display()))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ConfigError(missing).into())
    }
}

/// Pretraining inputs: vocabulary, encoded corpus and the task's label count.
fn corpus_data(cfg: &ExperimentConfig) -> Result<(Vocabulary, Dataset, usize)> {
    let max_len = cfg.teacher.max_seq_len;
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let task = make_synthetic_task(s)?;
            let vocab = task.vocabulary()?;
            let (corpus, _, _) = task.encode(&vocab, max_len)?;
            Ok((vocab, corpus, 2))
        }
        DataSource::Files {
            corpus,
            train,
            min_freq,
            ..
        } => {
            let text = fs::read_to_string(corpus).with_context(|| format!("cannot read corpus {}", corpus.display()))?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            let vocab = Vocabulary::build(&lines, *min_freq)?;
            let examples: Vec<RawExample> = lines
                .iter()
                .map(|l| RawExample {
                    label: "text".into(),
                    text_a: l.to_string(),
                    text_b: None,
                })
                .collect();
            let n_labels = Dataset::from_examples(&read_examples(train)?, &vocab, max_len, None)?.labels.len();
            let corpus = Dataset::from_examples(&examples, &vocab, max_len, None)?;
            Ok((vocab, corpus, n_labels))
        }
    }
}

/// Labeled train and test splits encoded with `vocab`.
fn task_data(cfg: &ExperimentConfig, vocab: &Vocabulary, max_len: usize) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let task = make_synthetic_task(s)?;
            if &task.vocabulary()? != vocab {
                bail!("the teacher vocabulary does not match the configured synthetic data; rerun `textsmooth pretrain`");
            }
            let (_, train, test) = task.encode(vocab, max_len)?;
            Ok((train, test))
        }
        DataSource::Files { train, test, .. } => {
            let train = load_dataset(train, vocab, max_len, None).with_context(|| format!("loading {}", train.display()))?;
            let test =
                load_dataset(test, vocab, max_len, Some(&train.labels)).with_context(|| format!("loading {}", test.display()))?;
            Ok((train, test))
        }
    }
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let path = &cfg.teacher_checkpoint;
    if !path.is_file() {
        bail!("teacher checkpoint {} not found; run `textsmooth pretrain` first", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("loading teacher checkpoint {}", path.display()))
}

fn teacher_model(cfg: &ExperimentConfig, vocab_size: usize, n_labels: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        n_labels,
        ..cfg.teacher.clone()
    }
}

fn student_model(cfg: &ExperimentConfig, teacher: &TransformerParams, n_labels: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: teacher.config.vocab_size,
        n_labels,
        ..cfg.student.clone()
    }
}

/// The teacher, provided its classifier head fits `n_labels`.
fn teacher_for_task(teacher: TransformerParams, n_labels: usize) -> Result<TransformerParams> {
    if teacher.config.n_labels == n_labels {
        return Ok(teacher);
    }
    bail!(
        "teacher was pretrained for {} labels but the task has {n_labels}; rerun `textsmooth pretrain`",
        teacher.config.n_labels
    )
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn epoch_lines(report: &MetricsReport) -> String {
    let mut out = String::new();
    for (i, (loss, secs)) in report.epoch_losses.iter().zip(&report.epoch_seconds).enumerate() {
        let _ = writeln!(out, "epoch {}\tloss {loss:.6}\t{secs:.2}s", i + 1);
    }
    out
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    check_data_files(cfg)?;
    let layout = Layout::new(&cfg.output_dir)?;
    let (vocab, corpus, n_labels) = corpus_data(cfg)?;
    let model = teacher_model(cfg, vocab.len(), n_labels);
    println!(
        "pretraining on {} sentences, vocabulary {}, {} parameters",
        corpus.len(),
        vocab.len(),
        TransformerParams::init(&model, 0)?.num_parameters()
    );
    let (params, report) = pretrain_mlm(&model, &corpus, &cfg.pretrain)?;
    print!("{}", epoch_lines(&report));
    let checksum = params.checksum();
    if let Some(dir) = cfg.teacher_checkpoint.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Checkpoint::new(params, vocab)?
        .save(&cfg.teacher_checkpoint)
        .with_context(|| format!("cannot write {}", cfg.teacher_checkpoint.display()))?;
    write_file(&layout.metrics("pretrain"), &records_to_jsonl(&[report]))?;
    println!("teacher checkpoint: {}", cfg.teacher_checkpoint.display());
    println!("checksum: {checksum}");
    Ok(())
}

pub fn smooth(cfg: &ExperimentConfig) -> Result<()> {
    check_data_files(cfg)?;
    let layout = Layout::new(&cfg.output_dir)?;
    let ck = load_teacher(cfg)?;
    let (train, _) = task_data(cfg, &ck.vocab, ck.params.config.max_seq_len)?;
    let smoothed = smooth_dataset(&ck.params, &train, &cfg.smoothing)?;
    let path = layout.train_cache();
    smoothed.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
    println!("lambda: {}", cfg.smoothing.lambda);
    println!("instances: {}", smoothed.len());
    println!("cache: {}", path.display());
    println!("teacher forwards: {}", smoothed.teacher_forwards);
    Ok(())
}

/// Saves the student and its metrics, then prints the run summary ending in the accuracy line.
fn finish_run(layout: &Layout, params: TransformerParams, vocab: Vocabulary, mut report: MetricsReport, test: &Dataset) -> Result<()> {
    let accuracy = evaluate(&params, test)?.accuracy;
    report.test_accuracy = Some(accuracy);
    let name = run_name(&report.method, report.seed);
    let ck_path = layout.checkpoint(&name);
    Checkpoint::new(params, vocab)?
        .save(&ck_path)
        .with_context(|| format!("cannot write {}", ck_path.display()))?;
    let metrics_path = layout.metrics(&name);
    write_file(&metrics_path, &records_to_jsonl(std::slice::from_ref(&report)))?;
    print!("{}", epoch_lines(&report));
    println!("checkpoint: {}", ck_path.display());
    println!("metrics: {}", metrics_path.display());
    println!("test accuracy: {accuracy:.4}");
    Ok(())
}

pub fn distill(cfg: &ExperimentConfig) -> Result<()> {
    check_data_files(cfg)?;
    let layout = Layout::new(&cfg.output_dir)?;
    let ck = load_teacher(cfg)?;
    let (train, test) = task_data(cfg, &ck.vocab, ck.params.config.max_seq_len)?;
    let cache = layout.train_cache();
    if !cache.is_file() {
        bail!("smoothed cache {} not found; run `textsmooth smooth` first", cache.display());
    }
    let smoothed = SmoothedDataset::load(&cache).with_context(|| format!("loading {}", cache.display()))?;
    if !smoothed.matches(&ck.params, &train, &cfg.smoothing) {
        bail!(
            "smoothed cache {} was built with a different teacher, dataset or lambda; rerun `textsmooth smooth`",
            cache.display()
        );
    }
    let teacher = teacher_for_task(ck.params, train.labels.len())?;
    let student = TransformerParams::init_student_from_teacher(&teacher, &student_model(cfg, &teacher, train.labels.len()), cfg.train.seed)?;
    let (params, report) = train_student(&student, &smoothed, &cfg.train)?;
    finish_run(&layout, params, ck.vocab, report, &test)
}

pub fn finetune(cfg: &ExperimentConfig) -> Result<()> {
    check_data_files(cfg)?;
    let layout = Layout::new(&cfg.output_dir)?;
    let ck = load_teacher(cfg)?;
    let (train, test) = task_data(cfg, &ck.vocab, ck.params.config.max_seq_len)?;
    let teacher = teacher_for_task(ck.params, train.labels.len())?;
    let student = TransformerParams::init_student_from_teacher(&teacher, &student_model(cfg, &teacher, train.labels.len()), cfg.train.seed)?;
    let (params, report) = finetune_baseline(&student, &train, &cfg.train)?;
    finish_run(&layout, params, ck.vocab, report, &test)
}

pub fn kd(cfg: &ExperimentConfig) -> Result<()> {
    check_data_files(cfg)?;
    let layout = Layout::new(&cfg.output_dir)?;
    let ck = load_teacher(cfg)?;
    let (train, test) = task_data(cfg, &ck.vocab, ck.params.config.max_seq_len)?;
    let teacher = teacher_for_task(ck.params, train.labels.len())?;
    let (clf, teacher_report) = ClassifierTeacher::finetune(&teacher, &train, &cfg.kd_teacher)?;
    let clf_path = layout.checkpoint("kd_teacher");
    Checkpoint::new(clf.params().clone(), ck.vocab.clone())?
        .save(&clf_path)
        .with_context(|| format!("cannot write {}", clf_path.display()))?;
    write_file(&layout.metrics("kd_teacher"), &records_to_jsonl(&[teacher_report]))?;
    println!("kd teacher checkpoint: {}", clf_path.display());
    let student = TransformerParams::init_student_from_teacher(&teacher, &student_model(cfg, &teacher, train.labels.len()), cfg.train.seed)?;
    let (params, report) = soft_label_kd(&clf, &student, &train, &cfg.train)?;
    finish_run(&layout, params, ck.vocab, report, &test)
}

pub fn sample(cfg: &ExperimentConfig) -> Result<()> {
    let texts: Vec<String> = match (&cfg.text, &cfg.input) {
        (Some(t), None) => vec![t.clone()],
        (None, Some(path)) => {
            if !path.is_file() {
                return Err(config_error(format!("input: file {} does not exist", path.display())));
            }
            fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect()
        }
        (Some(_), Some(_)) => return Err(config_error("give either `text` or `input`, not both")),
        (None, None) => return Err(config_error("sample needs `--text \"...\"` or `--input FILE`")),
    };
    let layout = Layout::new(&cfg.output_dir)?;
    let ck = load_teacher(cfg)?;
    let report = sample_report(&ck.params, &ck.vocab, &texts, &cfg.sample)?;
    write_file(&layout.report("samples.txt"), &report)?;
    print!("{report}");
    Ok(())
}

/// Reuses the configured teacher checkpoint when it fits the config, otherwise pretrains one.
fn teacher_for_compare(cfg: &ExperimentConfig) -> Result<(Vocabulary, TransformerParams)> {
    let (vocab, corpus, n_labels) = corpus_data(cfg)?;
    let model = teacher_model(cfg, vocab.len(), n_labels);
    if cfg.teacher_checkpoint.is_file() {
        let ck = Checkpoint::load(&cfg.teacher_checkpoint)
            .with_context(|| format!("loading teacher checkpoint {}", cfg.teacher_checkpoint.display()))?;
        if ck.vocab == vocab && ck.params.config == model {
            println!("reusing teacher {}", cfg.teacher_checkpoint.display());
            return Ok((ck.vocab, ck.params));
        }
        println!("teacher {} does not match the config; pretraining", cfg.teacher_checkpoint.display());
    }
    let (params, report) = pretrain_mlm(&model, &corpus, &cfg.pretrain)?;
    print!("{}", epoch_lines(&report));
    if let Some(dir) = cfg.teacher_checkpoint.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Checkpoint::new(params.clone(), vocab.clone())?.save(&cfg.teacher_checkpoint)?;
    println!("teacher checkpoint: {}", cfg.teacher_checkpoint.display());
    Ok((vocab, params))
}

pub fn compare(cfg: &ExperimentConfig) -> Result<()> {
    check_data_files(cfg)?;
    let layout = Layout::new(&cfg.output_dir)?;
    let (vocab, teacher) = teacher_for_compare(cfg)?;
    let (train, test) = task_data(cfg, &vocab, teacher.config.max_seq_len)?;
    let teacher = teacher_for_task(teacher, train.labels.len())?;
    let cmp = ComparisonConfig {
        student: student_model(cfg, &teacher, train.labels.len()),
        train: cfg.train.clone(),
        kd_teacher: cfg.kd_teacher.clone(),
        smoothing: cfg.smoothing.clone(),
        seeds: cfg.seeds.clone(),
    };
    let report = run_comparison(&cmp, &teacher, &train, &test)?;

    let mut text = String::new();
    for r in &report.runs {
        let secs: Vec<String> = r.epoch_seconds.iter().map(|s| format!("{s:.2}")).collect();
        let _ = writeln!(
            text,
            "{:<14} seed {:<4} accuracy {:.4}  seconds/epoch [{}]",
            r.method,
            r.seed,
            r.test_accuracy.unwrap_or(f64::NAN),
            secs.join(", ")
        );
    }
    for (method, seed, err) in &report.failures {
        let _ = writeln!(text, "{:<14} seed {:<4} FAILED: {err}", method.name(), seed);
    }
    text.push_str(&report.format_table());
    write_file(&layout.metrics("comparison"), &records_to_jsonl(&report.runs))?;
    write_file(&layout.report("comparison.txt"), &text)?;
    print!("{text}");
    if !report.failures.is_empty() {
        return Err(anyhow!("{} of {} runs failed", report.failures.len(), report.failures.len() + report.runs.len()));
    }
    Ok(())
}
