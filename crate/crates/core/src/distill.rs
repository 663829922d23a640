//! Training and evaluation: teacher MLM pretraining, student training on
//! smoothed inputs, the two comparison baselines and the seed sweep that
//! compares them.
//!
//! All training procedures share one loop. Each epoch visits the data in a
//! permutation derived from `(seed, epoch)`, keeps the last partial batch,
//! and takes one Adam step per batch on the weighted mean of the per-instance
//! losses. Dropout and MLM corruption draw from a second generator derived
//! from the seed, so runs are a pure function of parameters, data, config and
//! seed.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::smoothing::{smooth_dataset, SmoothedDataset, SmoothedInstance, SmoothingConfig};
use crate::tensor::{softmax_rows, Tensor};
use crate::text::{Dataset, EncodedInstance, CLS_ID, MASK_ID, PAD_ID, RESERVED, SEP_ID};
use crate::transformer::{ModelConfig, Probe, Session, TokenInput, TransformerParams};

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of non-special positions selected per instance in MLM pretraining.
    pub mlm_mask_prob: f64,
    pub kd_temperature: f64,
    /// Weight of the soft-label term; the hard-label term gets `1 − kd_alpha`.
    pub kd_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            mlm_mask_prob: 0.15,
            kd_temperature: 2.0,
            kd_alpha: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_prob) {
            problems.push(format!("mlm_mask_prob {} outside [0, 1]", self.mlm_mask_prob));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            problems.push(format!("kd_temperature {} must be positive", self.kd_temperature));
        }
        if !(0.0..=1.0).contains(&self.kd_alpha) {
            problems.push(format!("kd_alpha {} outside [0, 1]", self.kd_alpha));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = derived_rng(seed, SHUFFLE_STREAM);
    rng.set_word_pos(0);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..=epoch {
        order.sort_unstable();
        order.shuffle(&mut rng);
    }
    order
}

/// One training run's measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    /// `(epoch, loss)` for every optimizer step taken.
    pub step_losses: Vec<(usize, f64)>,
    pub epoch_losses: Vec<f64>,
    /// Wall-clock time per epoch; excluded from determinism comparisons.
    pub epoch_seconds: Vec<f64>,
    pub test_accuracy: Option<f64>,
    /// Teacher encoder passes spent preparing this run's inputs.
    pub forward_count: usize,
}

impl MetricsReport {
    pub fn new(method: &str, seed: u64) -> Self {
        MetricsReport {
            method: method.to_string(),
            seed,
            step_losses: Vec::new(),
            epoch_losses: Vec::new(),
            epoch_seconds: Vec::new(),
            test_accuracy: None,
            forward_count: 0,
        }
    }

    /// The report with timing fields cleared.
    pub fn without_timing(&self) -> Self {
        MetricsReport {
            epoch_seconds: vec![0.0; self.epoch_seconds.len()],
            ..self.clone()
        }
    }

    pub fn to_records(&self) -> Vec<MetricRecord> {
        let base = |kind| MetricRecord {
            kind,
            method: self.method.clone(),
            seed: self.seed,
            epoch: None,
            step: None,
            loss: None,
            accuracy: None,
            seconds: None,
            forward_count: self.forward_count,
        };
        let mut out = Vec::new();
        for (step, &(epoch, loss)) in self.step_losses.iter().enumerate() {
            out.push(MetricRecord {
                epoch: Some(epoch),
                step: Some(step),
                loss: Some(loss),
                ..base(RecordKind::Step)
            });
        }
        for (epoch, (&loss, &seconds)) in self.epoch_losses.iter().zip(&self.epoch_seconds).enumerate() {
            out.push(MetricRecord {
                epoch: Some(epoch),
                loss: Some(loss),
                seconds: Some(seconds),
                ..base(RecordKind::Epoch)
            });
        }
        out.push(MetricRecord {
            accuracy: self.test_accuracy,
            ..base(RecordKind::Final)
        });
        out
    }

    /// Regroups records by `(method, seed)` in order of first appearance.
    pub fn from_records(records: &[MetricRecord]) -> Result<Vec<MetricsReport>> {
        let mut reports: Vec<MetricsReport> = Vec::new();
        for r in records {
            let idx = match reports.iter().position(|m| m.method == r.method && m.seed == r.seed) {
                Some(i) => i,
                None => {
                    reports.push(MetricsReport::new(&r.method, r.seed));
                    reports.len() - 1
                }
            };
            let m = &mut reports[idx];
            m.forward_count = r.forward_count;
            let missing = |what: &str| Error::Parse {
                line: None,
                message: format!("{:?} record for {} seed {} lacks {what}", r.kind, r.method, r.seed),
            };
            match r.kind {
                RecordKind::Step => {
                    let epoch = r.epoch.ok_or_else(|| missing("epoch"))?;
                    m.step_losses.push((epoch, r.loss.ok_or_else(|| missing("loss"))?));
                }
                RecordKind::Epoch => {
                    m.epoch_losses.push(r.loss.ok_or_else(|| missing("loss"))?);
                    m.epoch_seconds.push(r.seconds.ok_or_else(|| missing("seconds"))?);
                }
                RecordKind::Final => m.test_accuracy = r.accuracy,
            }
        }
        Ok(reports)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Step,
    Epoch,
    Final,
}

/// One metrics line. `seconds` is the only timing field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: RecordKind,
    pub method: String,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub step: Option<usize>,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub seconds: Option<f64>,
    pub forward_count: usize,
}

/// Line-delimited JSON, one record per line.
pub fn records_to_jsonl(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports.iter().flat_map(MetricsReport::to_records) {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn reports_from_jsonl(text: &str) -> Result<Vec<MetricsReport>> {
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<MetricRecord>(l).map_err(|e| Error::Parse {
                line: Some(i + 1),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_records(&records)
}

/// A per-instance loss and its weight in the batch mean.
type Term<'t> = Option<(Var<'t>, f64)>;

trait Objective: Sync {
    fn term<'t>(&self, session: &Session<'t>, index: usize, noise: &mut ChaCha8Rng) -> Result<Term<'t>>;
}

fn fit(
    params: &mut TransformerParams,
    n: usize,
    cfg: &TrainConfig,
    method: &str,
    objective: &impl Objective,
) -> Result<MetricsReport> {
    cfg.validate()?;
    params.validate()?;
    if n == 0 {
        return Err(Error::Config(format!("{method}: training set is empty")));
    }
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, params.weights.named().into_iter().map(|(_, t)| t));
    let mut noise = derived_rng(cfg.seed, NOISE_STREAM);
    let mut report = MetricsReport::new(method, cfg.seed);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        for batch in epoch_order(n, cfg.seed, epoch).chunks(cfg.batch_size) {
            let tape = Tape::new();
            let session = Session::new(&tape, params);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                if let Some(t) = objective.term(&session, i, &mut noise)? {
                    terms.push(t);
                }
            }
            let total: f64 = terms.iter().map(|t| t.1).sum();
            if terms.is_empty() || total == 0.0 {
                continue;
            }
            let mut loss = terms[0].0.scale(terms[0].1);
            for (l, w) in &terms[1..] {
                loss = loss.add(&l.scale(*w))?;
            }
            let loss = loss.scale(1.0 / total);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("{method}: loss became {value} in epoch {epoch}")));
            }
            loss.backward()?;
            let grads: Vec<Tensor> = session.grads().named().into_iter().map(|(_, g)| g.clone()).collect();
            adam.step(&mut params.weights.values_mut(), &grads)?;
            report.step_losses.push((epoch, value));
            loss_sum += value * total;
            weight_sum += total;
        }
        report.epoch_losses.push(if weight_sum > 0.0 { loss_sum / weight_sum } else { 0.0 });
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    if !params.is_finite() {
        return Err(Error::Numeric(format!("{method}: parameters became non-finite")));
    }
    Ok(report)
}

fn one_hot_label(label: usize, n_labels: usize) -> Result<Tensor> {
    if label >= n_labels {
        return Err(Error::Label(format!("label id {label} but the model has {n_labels} outputs")));
    }
    Tensor::one_hot(&[label], n_labels)
}

struct Supervised<'a> {
    ids: Option<&'a [EncodedInstance]>,
    smoothed: Option<&'a [SmoothedInstance]>,
    n_labels: usize,
}

impl Supervised<'_> {
    fn logits<'t>(&self, s: &Session<'t>, i: usize, noise: &mut ChaCha8Rng) -> Result<(Var<'t>, usize)> {
        let (hidden, label) = match (self.ids, self.smoothed) {
            (Some(d), _) => (s.encode(&d[i], TokenInput::Ids(&d[i].token_ids), Some(noise))?, d[i].label),
            (_, Some(d)) => {
                let inst = &d[i];
                let e = s.embed_input(TokenInput::Distribution(&inst.distributions), &inst.position_ids, &inst.segment_ids)?;
                (s.forward_encoder(e, &inst.attention_mask, Some(noise))?, inst.label)
            }
            _ => unreachable!("one input form is always set"),
        };
        Ok((s.classify(hidden)?, label))
    }
}

impl Objective for Supervised<'_> {
    fn term<'t>(&self, s: &Session<'t>, i: usize, noise: &mut ChaCha8Rng) -> Result<Term<'t>> {
        let (logits, label) = self.logits(s, i, noise)?;
        Ok(Some((logits.cross_entropy(&one_hot_label(label, self.n_labels)?)?, 1.0)))
    }
}

fn check_labels(params: &TransformerParams, n_labels: usize) -> Result<()> {
    if params.config.n_labels < n_labels {
        return Err(Error::Config(format!(
            "model has {} outputs but the data has {n_labels} labels",
            params.config.n_labels
        )));
    }
    Ok(())
}

/// Trains `student` on smoothed inputs against the hard labels.
pub fn train_student(
    student: &TransformerParams,
    data: &SmoothedDataset,
    cfg: &TrainConfig,
) -> Result<(TransformerParams, MetricsReport)> {
    check_labels(student, data.labels.len())?;
    if let Some(inst) = data.instances.first() {
        if inst.vocab_size() != student.config.vocab_size {
            return Err(Error::Config(format!(
                "smoothed rows span {} tokens but the student vocabulary has {}",
                inst.vocab_size(),
                student.config.vocab_size
            )));
        }
    }
    let mut params = student.clone();
    let objective = Supervised {
        ids: None,
        smoothed: Some(&data.instances),
        n_labels: params.config.n_labels,
    };
    let mut report = fit(&mut params, data.len(), cfg, "textsmooth", &objective)?;
    report.forward_count = data.teacher_forwards;
    Ok((params, report))
}

/// Fine-tunes `student` directly on id-form inputs.
pub fn finetune_baseline(
    student: &TransformerParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TransformerParams, MetricsReport)> {
    check_labels(student, data.labels.len())?;
    let mut params = student.clone();
    let objective = Supervised {
        ids: Some(&data.instances),
        smoothed: None,
        n_labels: params.config.n_labels,
    };
    let report = fit(&mut params, data.len(), cfg, "bert_small", &objective)?;
    Ok((params, report))
}

/// A teacher carrying a task-tuned classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTeacher {
    params: TransformerParams,
}

impl ClassifierTeacher {
    /// Fine-tunes a copy of `teacher` on `data`; the original is untouched.
    pub fn finetune(teacher: &TransformerParams, data: &Dataset, cfg: &TrainConfig) -> Result<(Self, MetricsReport)> {
        let (params, mut report) = finetune_baseline(teacher, data, cfg)?;
        report.method = "kd_teacher".into();
        Ok((ClassifierTeacher { params }, report))
    }

    /// Wraps parameters whose head was already tuned for `n_labels` classes.
    pub fn from_params(params: TransformerParams, n_labels: usize) -> Result<Self> {
        if params.config.n_labels != n_labels {
            return Err(Error::Config(format!(
                "teacher head has {} outputs, task has {n_labels} labels",
                params.config.n_labels
            )));
        }
        Ok(ClassifierTeacher { params })
    }

    pub fn params(&self) -> &TransformerParams {
        &self.params
    }

    /// Classification logits on id-form input, dropout off; `[1, n_labels]`.
    pub fn logits(&self, instance: &EncodedInstance) -> Result<Tensor> {
        predict_logits(&self.params, instance, None)
    }
}

/// `α · CE(s/T, softmax(t/T)) + (1 − α) · CE(s, onehot(label))`.
pub fn kd_loss<'t>(student_logits: Var<'t>, teacher_logits: &Tensor, label: usize, cfg: &TrainConfig) -> Result<Var<'t>> {
    let n = student_logits.shape().last().copied().unwrap_or(0);
    let t = cfg.kd_temperature;
    let soft = softmax_rows(&teacher_logits.scale(1.0 / t))?;
    let kd = student_logits.scale(1.0 / t).cross_entropy(&soft)?;
    let hard = student_logits.cross_entropy(&one_hot_label(label, n)?)?;
    kd.scale(cfg.kd_alpha).add(&hard.scale(1.0 - cfg.kd_alpha))
}

struct SoftLabel<'a> {
    data: &'a [EncodedInstance],
    teacher_logits: Vec<Tensor>,
    cfg: &'a TrainConfig,
}

impl Objective for SoftLabel<'_> {
    fn term<'t>(&self, s: &Session<'t>, i: usize, noise: &mut ChaCha8Rng) -> Result<Term<'t>> {
        let inst = &self.data[i];
        let hidden = s.encode(inst, TokenInput::Ids(&inst.token_ids), Some(noise))?;
        let logits = s.classify(hidden)?;
        Ok(Some((kd_loss(logits, &self.teacher_logits[i], inst.label, self.cfg)?, 1.0)))
    }
}

/// Trains `student` to fit the teacher's temperature-scaled class
/// probabilities mixed with the hard labels.
pub fn soft_label_kd(
    teacher: &ClassifierTeacher,
    student: &TransformerParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TransformerParams, MetricsReport)> {
    if teacher.params.config.n_labels != student.config.n_labels {
        return Err(Error::Config(format!(
            "teacher head has {} outputs, student head {}",
            teacher.params.config.n_labels, student.config.n_labels
        )));
    }
    check_labels(student, data.labels.len())?;
    let teacher_logits = data
        .instances
        .par_iter()
        .map(|inst| teacher.logits(inst))
        .collect::<Result<Vec<_>>>()?;
    let mut params = student.clone();
    let objective = SoftLabel {
        data: &data.instances,
        teacher_logits,
        cfg,
    };
    let report = fit(&mut params, data.len(), cfg, "soft_label_kd", &objective)?;
    Ok((params, report))
}

/// Applies BERT corruption to one instance: returns the corrupted ids and the
/// selected positions.
fn corrupt(inst: &EncodedInstance, vocab_size: usize, prob: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut ids = inst.token_ids.clone();
    let mut selected = Vec::new();
    for (pos, &tok) in inst.token_ids.iter().enumerate() {
        if matches!(tok, PAD_ID | CLS_ID | SEP_ID) || rng.random::<f64>() >= prob {
            continue;
        }
        selected.push(pos);
        let r = rng.random::<f64>();
        if r < 0.8 {
            ids[pos] = MASK_ID;
        } else if r < 0.9 {
            ids[pos] = rng.random_range(RESERVED.len()..vocab_size);
        }
    }
    (ids, selected)
}

struct MaskedLm<'a> {
    data: &'a [EncodedInstance],
    prob: f64,
    vocab_size: usize,
}

impl Objective for MaskedLm<'_> {
    fn term<'t>(&self, s: &Session<'t>, i: usize, noise: &mut ChaCha8Rng) -> Result<Term<'t>> {
        let inst = &self.data[i];
        let (ids, selected) = corrupt(inst, self.vocab_size, self.prob, noise);
        if selected.is_empty() {
            return Ok(None);
        }
        let hidden = s.encode(inst, TokenInput::Ids(&ids), Some(noise))?;
        let logits = s.mlm_logits(hidden.select_rows(&selected)?)?;
        let targets: Vec<usize> = selected.iter().map(|&p| inst.token_ids[p]).collect();
        let loss = logits.cross_entropy(&Tensor::one_hot(&targets, self.vocab_size)?)?;
        Ok(Some((loss, selected.len() as f64)))
    }
}

/// Trains a fresh model on the masked-LM objective. The label of each corpus
/// instance is ignored.
pub fn pretrain_mlm(
    config: &ModelConfig,
    corpus: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TransformerParams, MetricsReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    for inst in &corpus.instances {
        inst.validate(config.vocab_size)?;
    }
    let mut params = TransformerParams::init(config, cfg.seed)?;
    let objective = MaskedLm {
        data: &corpus.instances,
        prob: cfg.mlm_mask_prob,
        vocab_size: config.vocab_size,
    };
    let report = fit(&mut params, corpus.len(), cfg, "pretrain", &objective)?;
    Ok((params, report))
}

/// Top-1 accuracy at positions replaced by `[MASK]`, dropout off.
pub fn mlm_recovery_accuracy(params: &TransformerParams, data: &Dataset, mask_prob: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    for inst in &data.instances {
        let mut ids = inst.token_ids.clone();
        let mut selected = Vec::new();
        for (pos, &tok) in inst.token_ids.iter().enumerate() {
            if !matches!(tok, PAD_ID | CLS_ID | SEP_ID) && rng.random::<f64>() < mask_prob {
                ids[pos] = MASK_ID;
                selected.push(pos);
            }
        }
        if selected.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let s = Session::frozen(&tape, params);
        let hidden = s.encode(inst, TokenInput::Ids(&ids), None)?;
        let pred = s.mlm_logits(hidden.select_rows(&selected)?)?.value().argmax_rows();
        hits += selected.iter().zip(pred).filter(|(&p, y)| inst.token_ids[p] == *y).count();
        total += selected.len();
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

fn predict_logits(params: &TransformerParams, inst: &EncodedInstance, probe: Option<&Probe>) -> Result<Tensor> {
    let tape = Tape::new();
    let mut s = Session::frozen(&tape, params);
    if let Some(p) = probe {
        s = s.with_probe(p);
    }
    let hidden = s.encode(inst, TokenInput::Ids(&inst.token_ids), None)?;
    Ok(s.classify(hidden)?.value())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Correct predictions per gold label.
    pub correct: Vec<usize>,
    /// Instances per gold label.
    pub total: Vec<usize>,
    /// Distribution-form inputs built during evaluation; always zero.
    pub distribution_inputs: usize,
}

/// Argmax accuracy on id-form inputs with dropout off.
pub fn evaluate(params: &TransformerParams, data: &Dataset) -> Result<Evaluation> {
    let probe = Probe::new();
    let predictions = data
        .instances
        .par_iter()
        .map(|inst| Ok(predict_logits(params, inst, Some(&probe))?.argmax_rows()[0]))
        .collect::<Result<Vec<usize>>>()?;
    let classes = data.labels.len().max(params.config.n_labels);
    let mut correct = vec![0; classes];
    let mut total = vec![0; classes];
    for (inst, &p) in data.instances.iter().zip(&predictions) {
        if inst.label >= classes {
            return Err(Error::Label(format!("label id {} outside {classes} classes", inst.label)));
        }
        total[inst.label] += 1;
        correct[inst.label] += (p == inst.label) as usize;
    }
    let hits: usize = correct.iter().sum();
    Ok(Evaluation {
        accuracy: if predictions.is_empty() { 0.0 } else { hits as f64 / predictions.len() as f64 },
        predictions,
        correct,
        total,
        distribution_inputs: probe.distribution_inputs(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    TextSmooth,
    BertSmall,
    SoftLabelKd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::TextSmooth, Method::BertSmall, Method::SoftLabelKd];

    pub fn name(self) -> &'static str {
        match self {
            Method::TextSmooth => "textsmooth",
            Method::BertSmall => "bert_small",
            Method::SoftLabelKd => "soft_label_kd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonConfig {
    pub student: ModelConfig,
    /// Student training; its `seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    /// Fine-tuning of the soft-label teacher's head.
    pub kd_teacher: TrainConfig,
    pub smoothing: SmoothingConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_epoch_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub runs: Vec<MetricsReport>,
    /// `(method, seed, error)` for every run that failed.
    pub failures: Vec<(Method, u64, String)>,
    pub summaries: Vec<MethodSummary>,
    pub teacher_forwards: usize,
    pub mask_token_inputs: usize,
    pub teacher_checksum_before: String,
    pub teacher_checksum_after: String,
}

impl ComparisonReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Aligned plain-text table, one row per method.
    pub fn format_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>5} {:>9} {:>8} {:>12}\n",
            "method", "runs", "mean_acc", "std", "sec/epoch"
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<14} {:>5} {:>9.4} {:>8.4} {:>12.3}",
                s.method.name(),
                s.runs,
                s.mean_accuracy,
                s.std_accuracy,
                s.mean_epoch_seconds
            );
        }
        let _ = writeln!(out, "teacher forwards during smoothing: {}", self.teacher_forwards);
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Smooths `train` once with the frozen `teacher`, then trains and evaluates
/// every method for every seed. Students start from the teacher's first
/// layers. Failed runs are collected, not propagated.
pub fn run_comparison(
    cfg: &ComparisonConfig,
    teacher: &TransformerParams,
    train: &Dataset,
    test: &Dataset,
) -> Result<ComparisonReport> {
    cfg.train.validate()?;
    cfg.kd_teacher.validate()?;
    cfg.smoothing.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let checksum_before = teacher.checksum();
    let smoothed = smooth_dataset(teacher, train, &cfg.smoothing)?;
    let kd_teacher = ClassifierTeacher::finetune(teacher, train, &cfg.kd_teacher);

    let jobs: Vec<(Method, u64)> = Method::ALL
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let outcomes: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(method, seed)| {
            let student = TransformerParams::init_student_from_teacher(teacher, &cfg.student, seed)?;
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let (params, mut report) = match method {
                Method::TextSmooth => train_student(&student, &smoothed, &tc)?,
                Method::BertSmall => finetune_baseline(&student, train, &tc)?,
                Method::SoftLabelKd => {
                    let kt = kd_teacher.as_ref().map_err(|e| Error::Config(format!("kd teacher: {e}")))?;
                    soft_label_kd(&kt.0, &student, train, &tc)?
                }
            };
            report.test_accuracy = Some(evaluate(&params, test)?.accuracy);
            Ok(report)
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for ((method, seed), outcome) in jobs.into_iter().zip(outcomes) {
        match outcome {
            Ok(r) => runs.push(r),
            Err(e) => failures.push((method, seed, e.to_string())),
        }
    }
    let summaries = Method::ALL
        .iter()
        .map(|&method| {
            let mine: Vec<&MetricsReport> = runs.iter().filter(|r| r.method == method.name()).collect();
            let accs: Vec<f64> = mine.iter().filter_map(|r| r.test_accuracy).collect();
            let secs: Vec<f64> = mine.iter().flat_map(|r| r.epoch_seconds.iter().copied()).collect();
            let (mean, std) = mean_std(&accs);
            MethodSummary {
                method,
                runs: mine.len(),
                mean_accuracy: mean,
                std_accuracy: std,
                mean_epoch_seconds: mean_std(&secs).0,
            }
        })
        .collect();
    Ok(ComparisonReport {
        runs,
        failures,
        summaries,
        teacher_forwards: smoothed.teacher_forwards,
        mask_token_inputs: smoothed.mask_token_inputs,
        teacher_checksum_before: checksum_before,
        teacher_checksum_after: teacher.checksum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::smooth_dataset;
    use crate::text::{encode_instance, LabelSet, Vocabulary};

    fn toy() -> (Vocabulary, Dataset) {
        let texts = [
            ("pos", "a great film"),
            ("neg", "a dull film"),
            ("pos", "the plot was great"),
            ("neg", "the plot was dull"),
            ("pos", "great acting"),
            ("neg", "dull acting"),
            ("pos", "what a great story"),
        ];
        let vocab = Vocabulary::build(texts.iter().map(|t| t.1), 1).unwrap();
        let labels = LabelSet::new(["neg".to_string(), "pos".to_string()]);
        let instances = texts
            .iter()
            .map(|(l, t)| encode_instance(t, None, labels.id(l).unwrap(), &vocab, 8).unwrap())
            .collect();
        (
            vocab,
            Dataset {
                instances,
                labels,
                max_seq_len: 8,
            },
        )
    }

    fn model(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            emb_size: 8,
            n_heads: 2,
            ffn_size: 16,
            vocab_size: vocab,
            max_seq_len: 8,
            n_labels: 2,
            ..ModelConfig::default()
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 1, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 1, 0));
        assert_ne!(a, epoch_order(10, 1, 1));
        assert_ne!(a, epoch_order(10, 2, 0));
    }

    #[test]
    fn partial_batch_is_kept() {
        let (vocab, data) = toy();
        let student = TransformerParams::init(&model(vocab.len()), 1).unwrap();
        let (_, report) = finetune_baseline(&student, &data, &cfg()).unwrap();
        // 7 instances in batches of 3 → 3 steps per epoch
        assert_eq!(report.step_losses.len(), 6);
        assert_eq!(report.epoch_losses.len(), 2);
    }

    #[test]
    fn lambda_one_matches_finetuning_bitwise() {
        let (vocab, data) = toy();
        let teacher = TransformerParams::init(&model(vocab.len()), 9).unwrap();
        let student = TransformerParams::init_student_from_teacher(&teacher, &ModelConfig { n_layers: 1, ..model(vocab.len()) }, 3).unwrap();
        let smoothed = smooth_dataset(&teacher, &data, &SmoothingConfig::new(1.0).unwrap()).unwrap();
        let (a, ra) = train_student(&student, &smoothed, &cfg()).unwrap();
        let (b, rb) = finetune_baseline(&student, &data, &cfg()).unwrap();
        let bits = |r: &MetricsReport| r.step_losses.iter().map(|(e, l)| (*e, l.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&ra), bits(&rb));
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn kd_alpha_zero_matches_finetuning_bitwise() {
        let (vocab, data) = toy();
        let teacher = TransformerParams::init(&model(vocab.len()), 9).unwrap();
        let kt = ClassifierTeacher::from_params(teacher.clone(), 2).unwrap();
        let c = TrainConfig { kd_alpha: 0.0, ..cfg() };
        let (_, ra) = soft_label_kd(&kt, &teacher, &data, &c).unwrap();
        let (_, rb) = finetune_baseline(&teacher, &data, &c).unwrap();
        let bits = |r: &MetricsReport| r.step_losses.iter().map(|(_, l)| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ra), bits(&rb));
    }

    #[test]
    fn kd_term_tends_to_log_n_at_high_temperature() {
        let tape = Tape::new();
        let s = tape.param(Tensor::from_rows(&[vec![1.5, -0.5, 0.3]]).unwrap());
        let t = Tensor::from_rows(&[vec![4.0, -2.0, 0.0]]).unwrap();
        let c = TrainConfig {
            kd_temperature: 1e4,
            kd_alpha: 1.0,
            ..cfg()
        };
        let loss = kd_loss(s, &t, 0, &c).unwrap().item();
        assert!((loss - 3f64.ln()).abs() < 1e-3, "{loss}");
    }

    #[test]
    fn kd_requires_matching_head() {
        let (vocab, data) = toy();
        let three = TransformerParams::init(&ModelConfig { n_labels: 3, ..model(vocab.len()) }, 1).unwrap();
        assert!(ClassifierTeacher::from_params(three.clone(), 2).is_err());
        let kt = ClassifierTeacher::from_params(three, 3).unwrap();
        let student = TransformerParams::init(&model(vocab.len()), 1).unwrap();
        assert!(soft_label_kd(&kt, &student, &data, &cfg()).is_err());
    }

    #[test]
    fn zero_mask_prob_skips_every_step() {
        let (vocab, data) = toy();
        let c = TrainConfig { mlm_mask_prob: 0.0, ..cfg() };
        let (params, report) = pretrain_mlm(&model(vocab.len()), &data, &c).unwrap();
        assert!(report.step_losses.is_empty());
        assert_eq!(report.epoch_losses, vec![0.0, 0.0]);
        assert_eq!(params, TransformerParams::init(&model(vocab.len()), c.seed).unwrap());
    }

    #[test]
    fn pretrain_rejects_empty_corpus() {
        let (vocab, data) = toy();
        let empty = Dataset { instances: vec![], ..data };
        assert!(matches!(pretrain_mlm(&model(vocab.len()), &empty, &cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn corruption_follows_bert_proportions() {
        let (vocab, data) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst = &data.instances[2];
        let (mut masked, mut random, mut kept, mut selected) = (0, 0, 0, 0);
        for _ in 0..20_000 {
            let (ids, sel) = corrupt(inst, vocab.len(), 0.5, &mut rng);
            for p in sel {
                assert!(!matches!(inst.token_ids[p], PAD_ID | CLS_ID | SEP_ID));
                selected += 1;
                match ids[p] {
                    MASK_ID => masked += 1,
                    x if x == inst.token_ids[p] => kept += 1,
                    _ => random += 1,
                }
            }
        }
        let f = |c: usize| c as f64 / selected as f64;
        assert!((f(masked) - 0.8).abs() < 0.02);
        // a random draw can land on the original token
        assert!((f(random) + f(kept) - 0.2).abs() < 0.02);
        assert!(f(kept) > 0.09);
        assert!((selected as f64 / (20_000.0 * 4.0) - 0.5).abs() < 0.02);
    }

    #[test]
    fn student_gradients_reach_every_layer() {
        let (vocab, data) = toy();
        let teacher = TransformerParams::init(&model(vocab.len()), 9).unwrap();
        let smoothed = smooth_dataset(&teacher, &data, &SmoothingConfig::default()).unwrap();
        let c = TrainConfig {
            epochs: 1,
            batch_size: 7,
            ..cfg()
        };
        let (after, _) = train_student(&teacher, &smoothed, &c).unwrap();
        for (l0, l1) in teacher.weights.layers.iter().zip(&after.weights.layers) {
            assert_ne!(l0.query_w, l1.query_w);
            assert_ne!(l0.ffn_out_w, l1.ffn_out_w);
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (vocab, data) = toy();
        let student = TransformerParams::init(&model(vocab.len()), 2).unwrap();
        let c = TrainConfig { epochs: 30, ..cfg() };
        let (p1, r1) = finetune_baseline(&student, &data, &c).unwrap();
        let (p2, r2) = finetune_baseline(&student, &data, &c).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.without_timing(), r2.without_timing());
        assert!(r1.epoch_losses[29] < r1.epoch_losses[0]);
        let ev = evaluate(&p1, &data).unwrap();
        assert_eq!(ev.accuracy, 1.0);
        assert_eq!(ev.distribution_inputs, 0);
        assert_eq!(ev, evaluate(&p1, &data).unwrap());
        assert_eq!(ev.total, vec![3, 4]);
    }

    #[test]
    fn metrics_round_trip_through_jsonl() {
        let mut r = MetricsReport::new("textsmooth", 4);
        r.step_losses = vec![(0, 0.1 + 0.2), (0, 1.0 / 3.0), (1, std::f64::consts::PI)];
        r.epoch_losses = vec![0.7, 1e-17];
        r.epoch_seconds = vec![0.25, 0.125];
        r.test_accuracy = Some(2.0 / 3.0);
        r.forward_count = 42;
        let mut other = MetricsReport::new("bert_small", 4);
        other.epoch_losses = vec![0.5];
        other.epoch_seconds = vec![1.0];
        let text = records_to_jsonl(&[r.clone(), other.clone()]);
        assert_eq!(text.lines().count(), 3 + 2 + 1 + 1 + 1);
        assert_eq!(reports_from_jsonl(&text).unwrap(), vec![r, other]);
        assert!(matches!(reports_from_jsonl("{oops"), Err(Error::Parse { line: Some(1), .. })));
    }

    #[test]
    fn train_config_reports_every_problem() {
        let bad = TrainConfig {
            epochs: 0,
            kd_alpha: 2.0,
            ..TrainConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("epochs") && msg.contains("kd_alpha"), "{msg}");
    }
}
