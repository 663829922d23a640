//! Text smoothing: each input position becomes
//! `λ · onehot(token) + (1 − λ) · MLM(position)`, where the MLM row is the
//! frozen teacher's softmax prediction for that position on the *uncorrupted*
//! input. No token is replaced by `[MASK]` and the teacher runs without
//! dropout, so the result is a deterministic function of teacher and text.

use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::persist::{check_magic, Reader, Writer};
use crate::tensor::{softmax_rows, Tensor};
use crate::text::{Dataset, EncodedInstance, LabelSet, CLS_ID, PAD_ID, SEP_ID};
use crate::transformer::{to_hex, Probe, Session, TokenInput, TransformerParams};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingConfig {
    /// Weight kept on the observed token.
    pub lambda: f64,
    /// Keep `[CLS]` and `[SEP]` one-hot.
    pub exempt_special_tokens: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            lambda: DEFAULT_LAMBDA,
            exempt_special_tokens: false,
        }
    }
}

impl SmoothingConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let c = SmoothingConfig {
            lambda,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    /// Padding is always exempt; the flag is recorded for cache headers.
    pub fn exempt_padding(&self) -> bool {
        true
    }

    fn flags(&self) -> u8 {
        (self.exempt_special_tokens as u8) | ((self.exempt_padding() as u8) << 1)
    }

    /// Whether a position holding `token` stays one-hot.
    pub fn is_exempt(&self, token: usize) -> bool {
        token == PAD_ID || (self.exempt_special_tokens && (token == CLS_ID || token == SEP_ID))
    }
}

/// An instance whose tokens are replaced by word distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedInstance {
    /// `[seq_len, vocab_size]`, every row a distribution.
    pub distributions: Tensor,
    /// The original ids, kept for rendering and exemption checks.
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub label: usize,
}

impl SmoothedInstance {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.distributions.cols()
    }
}

/// Teacher MLM distribution for every position of the unmasked input.
pub fn mlm_distribution(teacher: &TransformerParams, instance: &EncodedInstance) -> Result<Tensor> {
    mlm_distribution_probed(teacher, instance, None)
}

pub fn mlm_distribution_probed(
    teacher: &TransformerParams,
    instance: &EncodedInstance,
    probe: Option<&Probe>,
) -> Result<Tensor> {
    let vocab = teacher.config.vocab_size;
    if let Some(&bad) = instance.token_ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::Config(format!(
            "vocabulary mismatch: token id {bad} but the teacher knows {vocab} tokens"
        )));
    }
    if instance.seq_len() > teacher.config.max_seq_len {
        return Err(Error::Config(format!(
            "instance length {} exceeds teacher max_seq_len {}",
            instance.seq_len(),
            teacher.config.max_seq_len
        )));
    }
    let tape = Tape::new();
    let mut session = Session::frozen(&tape, teacher);
    if let Some(p) = probe {
        session = session.with_probe(p);
    }
    let hidden = session.encode(instance, TokenInput::Ids(&instance.token_ids), None)?;
    let logits = session.mlm_logits(hidden)?.value();
    softmax_rows(&logits)
}

/// Mixes one-hot inputs with `mlm_dist` position by position.
pub fn smooth_text(instance: &EncodedInstance, mlm_dist: &Tensor, config: &SmoothingConfig) -> Result<SmoothedInstance> {
    config.validate()?;
    let len = instance.seq_len();
    if mlm_dist.shape().len() != 2 || mlm_dist.rows() != len {
        return Err(Error::shape("smooth_text", mlm_dist.shape(), &[len]));
    }
    let vocab = mlm_dist.cols();
    let lambda = config.lambda;
    let mut out = Tensor::zeros(&[len, vocab]);
    for (pos, &tok) in instance.token_ids.iter().enumerate() {
        if tok >= vocab {
            return Err(Error::Config(format!("token id {tok} outside distribution width {vocab}")));
        }
        let row = out.row_mut(pos);
        if config.is_exempt(tok) {
            row[tok] = 1.0;
            continue;
        }
        for (o, &p) in row.iter_mut().zip(mlm_dist.row(pos)) {
            *o = (1.0 - lambda) * p;
        }
        row[tok] = lambda + (1.0 - lambda) * mlm_dist.get(pos, tok);
    }
    Ok(SmoothedInstance {
        distributions: out,
        token_ids: instance.token_ids.clone(),
        position_ids: instance.position_ids.clone(),
        segment_ids: instance.segment_ids.clone(),
        attention_mask: instance.attention_mask.clone(),
        label: instance.label,
    })
}

/// A smoothed dataset with the key it was produced under.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedDataset {
    pub instances: Vec<SmoothedInstance>,
    pub labels: LabelSet,
    pub config: SmoothingConfig,
    pub teacher_checksum: String,
    pub dataset_checksum: String,
    /// Teacher encoder passes spent producing `instances`.
    pub teacher_forwards: usize,
    /// Teacher inputs that contained `[MASK]`; zero by construction.
    pub mask_token_inputs: usize,
}

impl SmoothedDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Whether this cache was built for exactly these inputs.
    pub fn matches(&self, teacher: &TransformerParams, dataset: &Dataset, config: &SmoothingConfig) -> bool {
        self.config.lambda.to_bits() == config.lambda.to_bits()
            && self.config.flags() == config.flags()
            && self.teacher_checksum == teacher.checksum()
            && self.dataset_checksum == dataset_checksum(dataset)
    }
}

/// SHA-256 over every encoded field of every instance, as hex.
pub fn dataset_checksum(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((dataset.max_seq_len as u64).to_le_bytes());
    for name in dataset.labels.names() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
    }
    for inst in &dataset.instances {
        for field in [&inst.token_ids, &inst.position_ids, &inst.segment_ids] {
            for &v in field.iter() {
                h.update((v as u64).to_le_bytes());
            }
        }
        h.update(&inst.attention_mask);
        h.update((inst.label as u64).to_le_bytes());
    }
    to_hex(&h.finalize())
}

/// Smooths every instance with exactly one teacher encoder pass each.
/// Instances are processed in parallel; output order follows `dataset`.
pub fn smooth_dataset(teacher: &TransformerParams, dataset: &Dataset, config: &SmoothingConfig) -> Result<SmoothedDataset> {
    config.validate()?;
    let probe = Probe::new();
    let instances = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let dist = mlm_distribution_probed(teacher, inst, Some(&probe))?;
            smooth_text(inst, &dist, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SmoothedDataset {
        instances,
        labels: dataset.labels.clone(),
        config: config.clone(),
        teacher_checksum: teacher.checksum(),
        dataset_checksum: dataset_checksum(dataset),
        teacher_forwards: probe.encoder_forwards(),
        mask_token_inputs: probe.mask_token_inputs(),
    })
}

const CACHE_MAGIC: &[u8; 8] = b"TSSMOOTH";
pub const CACHE_VERSION: u32 = 1;

impl SmoothedDataset {
    /// Cache layout (little-endian):
    ///
    /// ```text
    /// magic "TSSMOOTH" | version u32 | lambda f64 | flags u8
    /// teacher checksum str | dataset checksum str | teacher_forwards u64
    /// N u64 | seq_len u64 | vocab_size u64 | labels: count, names
    /// per instance: label u64, seq_len × (token u64, position u64,
    ///   segment u64, mask u8), seq_len × vocab_size f64
    /// ```
    /// Strings are a `u64` byte length followed by UTF-8.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let seq_len = self.instances.first().map_or(0, SmoothedInstance::seq_len);
        let vocab = self.instances.first().map_or(0, SmoothedInstance::vocab_size);
        let mut w = Writer::default();
        w.bytes(CACHE_MAGIC);
        w.u32(CACHE_VERSION);
        w.f64(self.config.lambda);
        w.u8(self.config.flags());
        w.str(&self.teacher_checksum);
        w.str(&self.dataset_checksum);
        w.usize(self.teacher_forwards);
        w.usize(self.instances.len());
        w.usize(seq_len);
        w.usize(vocab);
        w.usize(self.labels.len());
        for n in self.labels.names() {
            w.str(n);
        }
        for inst in &self.instances {
            if inst.seq_len() != seq_len || inst.vocab_size() != vocab {
                return Err(Error::Contract("cached instances must share seq_len and vocab_size".into()));
            }
            w.usize(inst.label);
            for p in 0..seq_len {
                w.usize(inst.token_ids[p]);
                w.usize(inst.position_ids[p]);
                w.usize(inst.segment_ids[p]);
                w.u8(inst.attention_mask[p]);
            }
            w.f64s(inst.distributions.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        check_magic(&mut r, CACHE_MAGIC, CACHE_VERSION, "smoothed-dataset cache")?;
        let lambda = r.f64()?;
        let flags = r.u8()?;
        let config = SmoothingConfig {
            lambda,
            exempt_special_tokens: flags & 1 != 0,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let teacher_checksum = r.str()?;
        let dataset_checksum = r.str()?;
        let teacher_forwards = r.usize()?;
        let n = r.usize()?;
        let seq_len = r.usize()?;
        let vocab = r.usize()?;
        let n_labels = r.len(8)?;
        let labels = LabelSet::new((0..n_labels).map(|_| r.str()).collect::<Result<Vec<_>>>()?);
        let per_instance = seq_len
            .checked_mul(vocab)
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| Error::Format("cache dimensions overflow".into()))?;
        if n.saturating_mul(per_instance) > bytes.len() {
            return Err(Error::Format(format!("cache header claims {n} instances, file too short")));
        }
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.usize()?;
            let mut token_ids = Vec::with_capacity(seq_len);
            let mut position_ids = Vec::with_capacity(seq_len);
            let mut segment_ids = Vec::with_capacity(seq_len);
            let mut attention_mask = Vec::with_capacity(seq_len);
            for _ in 0..seq_len {
                token_ids.push(r.usize()?);
                position_ids.push(r.usize()?);
                segment_ids.push(r.usize()?);
                attention_mask.push(r.u8()?);
            }
            let data = r.f64s(seq_len * vocab)?;
            instances.push(SmoothedInstance {
                distributions: Tensor::new(vec![seq_len, vocab], data).map_err(|e| Error::Format(e.to_string()))?,
                token_ids,
                position_ids,
                segment_ids,
                attention_mask,
                label,
            });
        }
        r.expect_end()?;
        Ok(SmoothedDataset {
            instances,
            labels,
            config,
            teacher_checksum,
            dataset_checksum,
            teacher_forwards,
            mask_token_inputs: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Reuses the cache at `path` when its key matches, otherwise smooths and
/// rewrites it.
pub fn load_or_smooth(
    path: &Path,
    teacher: &TransformerParams,
    dataset: &Dataset,
    config: &SmoothingConfig,
) -> Result<SmoothedDataset> {
    if let Ok(cached) = SmoothedDataset::load(path) {
        if cached.matches(teacher, dataset, config) {
            return Ok(cached);
        }
    }
    let fresh = smooth_dataset(teacher, dataset, config)?;
    fresh.save(path)?;
    Ok(fresh)
}
