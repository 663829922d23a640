//! Measured behaviour of training on the synthetic sentiment task.

use std::collections::HashMap;
use std::sync::OnceLock;

use textsmooth::distill::{
    evaluate, finetune_baseline, mlm_recovery_accuracy, pretrain_mlm, soft_label_kd, train_student, ClassifierTeacher,
    MetricsReport, TrainConfig,
};
use textsmooth::smoothing::{smooth_dataset, SmoothingConfig};
use textsmooth::synthetic::{make_synthetic_task, SyntheticConfig, SyntheticTask};
use textsmooth::text::{tokenize, Dataset, RawExample, Vocabulary, RESERVED};
use textsmooth::transformer::{ModelConfig, TransformerParams};

fn majority_share(examples: &[RawExample]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        *counts.entry(&ex.label).or_default() += 1;
    }
    *counts.values().max().unwrap() as f64 / examples.len() as f64
}

#[test]
fn majority_class_scores_about_half() {
    let task = make_synthetic_task(&SyntheticConfig::default()).unwrap();
    let share = majority_share(&task.test);
    assert!((share - 0.5).abs() <= 0.05, "{share}");
}

/// Plain bag-of-words logistic regression trained by full-batch gradient descent.
fn logistic_oracle(task: &SyntheticTask) -> f64 {
    let mut index: HashMap<String, usize> = HashMap::new();
    for ex in task.train.iter().chain(&task.test) {
        for t in tokenize(&ex.text_a) {
            let n = index.len();
            index.entry(t).or_insert(n);
        }
    }
    let featurize = |ex: &RawExample| {
        let mut x = vec![0.0; index.len()];
        for t in tokenize(&ex.text_a) {
            x[index[&t]] += 1.0;
        }
        (x, (ex.label == "positive") as u8 as f64)
    };
    let train: Vec<_> = task.train.iter().map(featurize).collect();
    let test: Vec<_> = task.test.iter().map(featurize).collect();
    let mut w = vec![0.0; index.len()];
    let mut b = 0.0;
    for _ in 0..300 {
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            for (g, a) in gw.iter_mut().zip(x) {
                *g += err * a;
            }
            gb += err;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * g / n;
        }
        b -= 0.5 * gb / n;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) as u8 as f64 == *y
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn bag_of_words_oracle_learns_the_task() {
    let full = make_synthetic_task(&SyntheticConfig {
        seen_fraction: 1.0,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let acc = logistic_oracle(&full);
    assert!(acc > 0.9, "{acc}");
    // with most synonyms held out of training, surface features alone fall short
    let held_out = logistic_oracle(&make_synthetic_task(&SyntheticConfig::default()).unwrap());
    println!("bag-of-words oracle: {acc:.3} with every synonym seen, {held_out:.3} with the default split");
    assert!(held_out < acc, "{held_out} vs {acc}");
}

struct Shared {
    vocab: Vocabulary,
    teacher: TransformerParams,
    report: MetricsReport,
    train: Dataset,
    test: Dataset,
    held_out_corpus: Dataset,
}

fn task_config() -> SyntheticConfig {
    SyntheticConfig {
        n_corpus: 1500,
        n_train: 200,
        n_test: 400,
        ..SyntheticConfig::default()
    }
}

fn model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        ..ModelConfig::default()
    }
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = make_synthetic_task(&task_config()).unwrap();
        let vocab = task.vocabulary().unwrap();
        let (corpus, train, test) = task.encode(&vocab, 16).unwrap();
        let other = make_synthetic_task(&SyntheticConfig {
            seed: 99,
            n_corpus: 300,
            ..task_config()
        })
        .unwrap();
        let (held_out_corpus, _, _) = other.encode(&vocab, 16).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let (teacher, report) = pretrain_mlm(&model(vocab.len()), &corpus, &cfg).unwrap();
        Shared {
            vocab,
            teacher,
            report,
            train,
            test,
            held_out_corpus,
        }
    })
}

#[test]
fn pretraining_loss_decreases_over_the_first_epochs() {
    let losses = &shared().report.epoch_losses;
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
}

#[test]
fn masked_tokens_are_recovered_above_the_unigram_baseline() {
    let s = shared();
    let acc = mlm_recovery_accuracy(&s.teacher, &s.held_out_corpus, 0.15, 5).unwrap();
    // best constant guess: the most frequent ordinary token
    let mut counts = vec![0usize; s.vocab.len()];
    let mut total = 0;
    for inst in &s.held_out_corpus.instances {
        for &t in &inst.token_ids {
            if t >= RESERVED.len() {
                counts[t] += 1;
                total += 1;
            }
        }
    }
    let unigram = *counts.iter().max().unwrap() as f64 / total as f64;
    println!("masked recovery {acc:.3}, unigram baseline {unigram:.3}");
    assert!(acc > 0.3 && acc > unigram, "recovery {acc} vs unigram {unigram}");
}

fn student_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 16,
        learning_rate: 5e-3,
        seed: 2,
        ..TrainConfig::default()
    }
}

fn student(s: &Shared, seed: u64) -> TransformerParams {
    let cfg = ModelConfig {
        n_layers: 1,
        ..s.teacher.config.clone()
    };
    TransformerParams::init_student_from_teacher(&s.teacher, &cfg, seed).unwrap()
}

fn majority(d: &Dataset) -> f64 {
    *d.class_counts().iter().max().unwrap() as f64 / d.len() as f64
}

#[test]
fn baselines_beat_the_majority_class() {
    let s = shared();
    let (tuned, report) = finetune_baseline(&student(s, 2), &s.train, &student_cfg()).unwrap();
    let ft = evaluate(&tuned, &s.test).unwrap().accuracy;
    assert!(ft > majority(&s.test), "finetune {ft}");
    let (again, report2) = finetune_baseline(&student(s, 2), &s.train, &student_cfg()).unwrap();
    assert_eq!(report.without_timing(), report2.without_timing());
    assert_eq!(again.checksum(), tuned.checksum());

    let (clf, _) = ClassifierTeacher::finetune(&s.teacher, &s.train, &student_cfg()).unwrap();
    let (kd, _) = soft_label_kd(&clf, &student(s, 2), &s.train, &student_cfg()).unwrap();
    let kd_acc = evaluate(&kd, &s.test).unwrap().accuracy;
    assert!(kd_acc > majority(&s.test), "kd {kd_acc}");
}

#[test]
fn smoothed_training_loss_decreases() {
    let s = shared();
    let smoothed = smooth_dataset(&s.teacher, &s.train, &SmoothingConfig::default()).unwrap();
    let (_, report) = train_student(&student(s, 3), &smoothed, &student_cfg()).unwrap();
    let l = &report.epoch_losses;
    assert!(l.last().unwrap() < &l[0], "{l:?}");
}

#[test]
fn untrained_students_score_about_half() {
    let s = shared();
    for seed in 1..=5 {
        let acc = evaluate(&student(s, seed), &s.test).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.1, "seed {seed}: {acc}");
    }
}
