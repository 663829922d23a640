//! Sentences drawn back out of a smoothed input.
//!
//! Every free position is sampled independently from its smoothed row;
//! `[CLS]`, `[SEP]` and `[PAD]` positions always emit their own token. A
//! sentence's probability is the product of its free positions' row entries,
//! so the raw sentence under `λ = 1` has probability exactly 1.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::smoothing::{mlm_distribution, smooth_text, SmoothedInstance, SmoothingConfig};
use crate::text::{encode_instance, Vocabulary, CLS_ID, PAD_ID, SEP_ID};
use crate::transformer::TransformerParams;

#[derive(Clone, Debug, PartialEq)]
pub struct SampledSentence {
    pub token_ids: Vec<usize>,
    pub text: String,
    pub probability: f64,
    /// Natural log of `probability`, kept exact for ranking.
    pub log_probability: f64,
    /// 1-based position in a ranked list; 0 before ranking.
    pub rank: usize,
}

fn is_fixed(token: usize) -> bool {
    matches!(token, CLS_ID | SEP_ID | PAD_ID)
}

/// Tokens of the real positions, without the leading `[CLS]` and final `[SEP]`.
pub fn render(ids: &[usize], attention_mask: &[u8], vocab: &Vocabulary) -> String {
    let real = attention_mask.iter().filter(|&&m| m == 1).count();
    let inner = if real >= 2 { &ids[1..real - 1] } else { &[][..] };
    vocab.decode(inner).join(" ")
}

/// Index drawn from `row` by inverse CDF.
fn draw(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Sum of `ln t̃[pos, id]` over free positions; `-inf` when a fixed position
/// is altered.
pub fn sentence_log_probability(smoothed: &SmoothedInstance, token_ids: &[usize]) -> Result<f64> {
    if token_ids.len() != smoothed.seq_len() {
        return Err(Error::shape("sentence_probability", &[token_ids.len()], &[smoothed.seq_len()]));
    }
    let vocab = smoothed.vocab_size();
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::Contract(format!("token id {bad} >= vocab_size {vocab}")));
    }
    let mut lp = 0.0;
    for (pos, (&fixed, &id)) in smoothed.token_ids.iter().zip(token_ids).enumerate() {
        if is_fixed(fixed) {
            if id != fixed {
                return Ok(f64::NEG_INFINITY);
            }
            continue;
        }
        lp += smoothed.distributions.row(pos)[id].ln();
    }
    Ok(lp)
}

pub fn sentence_probability(smoothed: &SmoothedInstance, token_ids: &[usize]) -> Result<f64> {
    Ok(sentence_log_probability(smoothed, token_ids)?.exp())
}

fn scored(smoothed: &SmoothedInstance, ids: Vec<usize>, vocab: &Vocabulary) -> Result<SampledSentence> {
    let log_probability = sentence_log_probability(smoothed, &ids)?;
    Ok(SampledSentence {
        text: render(&ids, &smoothed.attention_mask, vocab),
        token_ids: ids,
        probability: log_probability.exp(),
        log_probability,
        rank: 0,
    })
}

/// `k` independent draws, duplicates included.
pub fn sample_sentences(
    smoothed: &SmoothedInstance,
    vocab: &Vocabulary,
    k: usize,
    seed: u64,
) -> Result<Vec<SampledSentence>> {
    if k == 0 {
        return Err(Error::Contract("need at least one sample".into()));
    }
    if vocab.len() != smoothed.vocab_size() {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, smoothed rows span {}",
            vocab.len(),
            smoothed.vocab_size()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let ids = smoothed
                .token_ids
                .iter()
                .enumerate()
                .map(|(pos, &t)| if is_fixed(t) { t } else { draw(smoothed.distributions.row(pos), &mut rng) })
                .collect();
            scored(smoothed, ids, vocab)
        })
        .collect()
}

/// The sentence taking every free position's most likely token.
pub fn argmax_sentence(smoothed: &SmoothedInstance, vocab: &Vocabulary) -> Result<SampledSentence> {
    let best = smoothed.distributions.argmax_rows();
    let ids = smoothed
        .token_ids
        .iter()
        .zip(best)
        .map(|(&t, b)| if is_fixed(t) { t } else { b })
        .collect();
    scored(smoothed, ids, vocab)
}

/// Samples `n_samples` sentences, drops duplicates, and returns the
/// `n_report` most probable, ties broken by token ids.
pub fn top_sentences(
    smoothed: &SmoothedInstance,
    vocab: &Vocabulary,
    n_samples: usize,
    n_report: usize,
    seed: u64,
) -> Result<Vec<SampledSentence>> {
    if n_report > n_samples {
        return Err(Error::Contract(format!("n_report {n_report} exceeds n_samples {n_samples}")));
    }
    let mut seen = HashSet::new();
    let mut unique: Vec<SampledSentence> = sample_sentences(smoothed, vocab, n_samples, seed)?
        .into_iter()
        .filter(|s| seen.insert(s.token_ids.clone()))
        .collect();
    unique.sort_by(|a, b| {
        b.log_probability
            .total_cmp(&a.log_probability)
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
    unique.truncate(n_report);
    for (i, s) in unique.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(unique)
}

/// One report block: the raw text, then `rank<TAB>probability<TAB>sentence`
/// lines with probabilities to 6 significant digits.
pub fn format_block(raw: &str, sentences: &[SampledSentence]) -> String {
    let mut out = format!("{raw}\n");
    for s in sentences {
        let _ = writeln!(out, "{}\t{:.5e}\t{}", s.rank, s.probability, s.text);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub smoothing: SmoothingConfig,
    pub n_samples: usize,
    pub n_report: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            smoothing: SmoothingConfig::default(),
            n_samples: 100,
            n_report: 5,
            seed: 0,
        }
    }
}

/// Smooths each text with `teacher` and ranks samples drawn from it. Blocks
/// are separated by blank lines; no texts gives an empty report.
pub fn sample_report(teacher: &TransformerParams, vocab: &Vocabulary, texts: &[String], cfg: &SampleConfig) -> Result<String> {
    cfg.smoothing.validate()?;
    let blocks = texts
        .par_iter()
        .map(|text| {
            let inst = encode_instance(text, None, 0, vocab, teacher.config.max_seq_len)?;
            let dist = mlm_distribution(teacher, &inst)?;
            let smoothed = smooth_text(&inst, &dist, &cfg.smoothing)?;
            let top = top_sentences(&smoothed, vocab, cfg.n_samples, cfg.n_report, cfg.seed)?;
            Ok(format_block(text.trim(), &top))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks.join("\n"))
}
