//! Post-layer-norm transformer encoder with a tied MLM head and a `[CLS]`
//! classification head. The same code serves as teacher and student; they
//! differ only in their [`ModelConfig`].

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{check_stochastic, Tensor};
use crate::text::{EncodedInstance, MASK_ID, RESERVED};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub emb_size: usize,
    pub n_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_segments: usize,
    pub n_labels: usize,
    pub dropout_rate: f64,
    /// Adds a free output bias to the tied MLM projection.
    pub mlm_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            emb_size: 64,
            n_heads: 4,
            ffn_size: 128,
            vocab_size: 200,
            max_seq_len: 16,
            n_segments: 2,
            n_labels: 2,
            dropout_rate: 0.1,
            mlm_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.emb_size == 0 || self.n_heads == 0 || self.ffn_size == 0 {
            return fail("n_layers, emb_size, n_heads and ffn_size must be positive".into());
        }
        if !self.emb_size.is_multiple_of(self.n_heads) {
            return fail(format!(
                "emb_size {} is not divisible by n_heads {}",
                self.emb_size, self.n_heads
            ));
        }
        if self.vocab_size < RESERVED.len() {
            return fail(format!("vocab_size {} cannot hold the reserved tokens", self.vocab_size));
        }
        if self.max_seq_len < 3 || self.n_labels == 0 || self.n_segments != 2 {
            return fail("need max_seq_len >= 3, n_labels >= 1 and n_segments == 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.emb_size / self.n_heads
    }
}

/// Per-layer weights, generic over storage so the same layout can hold
/// tensors, tape variables or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub query_w: T,
    pub query_b: T,
    pub key_w: T,
    pub key_b: T,
    pub value_w: T,
    pub value_b: T,
    pub attn_out_w: T,
    pub attn_out_b: T,
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub ffn_in_w: T,
    pub ffn_in_b: T,
    pub ffn_out_w: T,
    pub ffn_out_b: T,
    pub ffn_norm_gain: T,
    pub ffn_norm_bias: T,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            query_w, query_b, key_w, key_b, value_w, value_b, attn_out_w, attn_out_b, attn_norm_gain,
            attn_norm_bias, ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b, ffn_norm_gain, ffn_norm_bias
        )
    };
}

impl<T> LayerWeights<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerWeights<U> {
        macro_rules! build {
            ($($field:ident),*) => {
                LayerWeights { $($field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field)),* }
            };
        }
        layer_fields!(build)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        macro_rules! push {
            ($($field:ident),*) => {{
                $(out.push((format!("{prefix}.{}", stringify!($field)), &self.$field));)*
            }};
        }
        layer_fields!(push);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        macro_rules! push {
            ($($field:ident),*) => {{
                $(out.push(&mut self.$field);)*
            }};
        }
        layer_fields!(push);
    }
}

/// All learnable weights. `word_embeddings` is both the input table and the
/// (transposed) MLM output projection; there is no second copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub word_embeddings: T,
    pub position_embeddings: T,
    pub segment_embeddings: T,
    pub embedding_norm_gain: T,
    pub embedding_norm_bias: T,
    pub layers: Vec<LayerWeights<T>>,
    pub mlm_bias: T,
    pub classifier_w: T,
    pub classifier_b: T,
}

impl<T> Weights<T> {
    /// Applies `f` to every weight with its stable name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        Weights {
            word_embeddings: f("word_embeddings", &self.word_embeddings),
            position_embeddings: f("position_embeddings", &self.position_embeddings),
            segment_embeddings: f("segment_embeddings", &self.segment_embeddings),
            embedding_norm_gain: f("embedding_norm_gain", &self.embedding_norm_gain),
            embedding_norm_bias: f("embedding_norm_bias", &self.embedding_norm_bias),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), &mut f))
                .collect(),
            mlm_bias: f("mlm_bias", &self.mlm_bias),
            classifier_w: f("classifier_w", &self.classifier_w),
            classifier_b: f("classifier_b", &self.classifier_b),
        }
    }

    /// Every weight with its name, in serialization order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("word_embeddings".to_string(), &self.word_embeddings),
            ("position_embeddings".to_string(), &self.position_embeddings),
            ("segment_embeddings".to_string(), &self.segment_embeddings),
            ("embedding_norm_gain".to_string(), &self.embedding_norm_gain),
            ("embedding_norm_bias".to_string(), &self.embedding_norm_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), &mut out);
        }
        out.push(("mlm_bias".to_string(), &self.mlm_bias));
        out.push(("classifier_w".to_string(), &self.classifier_w));
        out.push(("classifier_b".to_string(), &self.classifier_b));
        out
    }

    /// Same order as [`Weights::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.word_embeddings,
            &mut self.position_embeddings,
            &mut self.segment_embeddings,
            &mut self.embedding_norm_gain,
            &mut self.embedding_norm_bias,
        ];
        for l in &mut self.layers {
            l.visit_mut(&mut out);
        }
        out.push(&mut self.mlm_bias);
        out.push(&mut self.classifier_w);
        out.push(&mut self.classifier_b);
        out
    }
}

/// Expected tensor shape of every named weight under `config`.
pub fn weight_shapes(config: &ModelConfig) -> Weights<Vec<usize>> {
    let e = config.emb_size;
    let layer = LayerWeights {
        query_w: vec![e, e],
        query_b: vec![e],
        key_w: vec![e, e],
        key_b: vec![e],
        value_w: vec![e, e],
        value_b: vec![e],
        attn_out_w: vec![e, e],
        attn_out_b: vec![e],
        attn_norm_gain: vec![e],
        attn_norm_bias: vec![e],
        ffn_in_w: vec![e, config.ffn_size],
        ffn_in_b: vec![config.ffn_size],
        ffn_out_w: vec![config.ffn_size, e],
        ffn_out_b: vec![e],
        ffn_norm_gain: vec![e],
        ffn_norm_bias: vec![e],
    };
    Weights {
        word_embeddings: vec![config.vocab_size, e],
        position_embeddings: vec![config.max_seq_len, e],
        segment_embeddings: vec![config.n_segments, e],
        embedding_norm_gain: vec![e],
        embedding_norm_bias: vec![e],
        layers: vec![layer; config.n_layers],
        mlm_bias: vec![config.vocab_size],
        classifier_w: vec![e, config.n_labels],
        classifier_b: vec![config.n_labels],
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zeros,
    Ones,
}

fn init_kind(name: &str) -> InitKind {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf.ends_with("_gain") {
        InitKind::Ones
    } else if leaf.ends_with("_b") || leaf.ends_with("_bias") {
        InitKind::Zeros
    } else {
        InitKind::Normal
    }
}

/// Normal(0, σ²) resampled until it lands inside ±2σ.
pub fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

impl TransformerParams {
    /// Truncated-normal weights, zero biases, unit gains; deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = weight_shapes(config).map(|name, shape| match init_kind(name) {
            InitKind::Normal => truncated_normal(&mut rng, shape, INIT_STD),
            InitKind::Zeros => Tensor::zeros(shape),
            InitKind::Ones => Tensor::full(shape, 1.0),
        });
        Ok(TransformerParams {
            config: config.clone(),
            weights,
        })
    }

    /// Student initialized from the teacher's embedding tables and its first
    /// `student_config.n_layers` encoder layers. The classifier head is fresh.
    pub fn init_student_from_teacher(teacher: &TransformerParams, student_config: &ModelConfig, seed: u64) -> Result<Self> {
        student_config.validate()?;
        let t = &teacher.config;
        let s = student_config;
        if s.n_layers > t.n_layers {
            return Err(Error::Config(format!(
                "student has {} layers but the teacher only {}",
                s.n_layers, t.n_layers
            )));
        }
        if (s.emb_size, s.n_heads, s.ffn_size, s.vocab_size, s.max_seq_len)
            != (t.emb_size, t.n_heads, t.ffn_size, t.vocab_size, t.max_seq_len)
        {
            return Err(Error::Config(
                "student and teacher must share emb_size, n_heads, ffn_size, vocab_size and max_seq_len".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tw = &teacher.weights;
        let shapes = weight_shapes(s);
        let weights = Weights {
            word_embeddings: tw.word_embeddings.clone(),
            position_embeddings: tw.position_embeddings.clone(),
            segment_embeddings: tw.segment_embeddings.clone(),
            embedding_norm_gain: tw.embedding_norm_gain.clone(),
            embedding_norm_bias: tw.embedding_norm_bias.clone(),
            layers: tw.layers[..s.n_layers].to_vec(),
            mlm_bias: tw.mlm_bias.clone(),
            classifier_w: truncated_normal(&mut rng, &shapes.classifier_w, INIT_STD),
            classifier_b: Tensor::zeros(&shapes.classifier_b),
        };
        Ok(TransformerParams {
            config: s.clone(),
            weights,
        })
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = weight_shapes(&self.config);
        let expected = expected.named();
        let actual = self.weights.named();
        if expected.len() != actual.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(&actual) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, as hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.weights.named() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        to_hex(&h.finalize())
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Counters shared by forward passes; safe to update from several threads.
#[derive(Debug, Default)]
pub struct Probe {
    encoder_forwards: AtomicUsize,
    mask_token_inputs: AtomicUsize,
    distribution_inputs: AtomicUsize,
}

impl Probe {
    pub fn new() -> Self {
        Self::default()
    }

    /// Completed `forward_encoder` calls.
    pub fn encoder_forwards(&self) -> usize {
        self.encoder_forwards.load(Ordering::SeqCst)
    }

    /// Id-form inputs that contained `[MASK]`.
    pub fn mask_token_inputs(&self) -> usize {
        self.mask_token_inputs.load(Ordering::SeqCst)
    }

    /// Inputs embedded from a word distribution rather than ids.
    pub fn distribution_inputs(&self) -> usize {
        self.distribution_inputs.load(Ordering::SeqCst)
    }
}

/// Token input in either of its two forms.
#[derive(Clone, Copy, Debug)]
pub enum TokenInput<'a> {
    Ids(&'a [usize]),
    /// `[seq_len, vocab_size]`, each row a distribution over the vocabulary.
    Distribution(&'a Tensor),
}

/// Weights bound to a tape, plus the operations of the model.
pub struct Session<'t> {
    tape: &'t Tape,
    pub weights: Weights<Var<'t>>,
    config: ModelConfig,
    probe: Option<&'t Probe>,
}

impl<'t> Session<'t> {
    /// Binds `params` as trainable leaves.
    pub fn new(tape: &'t Tape, params: &TransformerParams) -> Self {
        Session {
            tape,
            weights: params.weights.map(|_, t| tape.param(t.clone())),
            config: params.config.clone(),
            probe: None,
        }
    }

    /// Binds `params` as constants; nothing will receive gradient.
    pub fn frozen(tape: &'t Tape, params: &TransformerParams) -> Self {
        Session {
            tape,
            weights: params.weights.map(|_, t| tape.constant(t.clone())),
            config: params.config.clone(),
            probe: None,
        }
    }

    pub fn with_probe(mut self, probe: &'t Probe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Accumulated gradient of every weight.
    pub fn grads(&self) -> Weights<Tensor> {
        self.weights.map(|_, v| v.grad())
    }

    /// Word embedding (row lookup for ids, distribution × W for distributions)
    /// plus positional and segment embeddings.
    pub fn embed_input(&self, input: TokenInput<'_>, position_ids: &[usize], segment_ids: &[usize]) -> Result<Var<'t>> {
        let len = position_ids.len();
        if segment_ids.len() != len {
            return Err(Error::shape("embed_input", &[len], &[segment_ids.len()]));
        }
        if position_ids.iter().any(|&p| p >= self.config.max_seq_len) {
            return Err(Error::Contract(format!(
                "position id beyond max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let words = match input {
            TokenInput::Ids(ids) => {
                if ids.len() != len {
                    return Err(Error::shape("embed_input", &[ids.len()], &[len]));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
                    return Err(Error::Contract(format!(
                        "token id {bad} >= vocab_size {}",
                        self.config.vocab_size
                    )));
                }
                if let Some(p) = self.probe {
                    if ids.contains(&MASK_ID) {
                        p.mask_token_inputs.fetch_add(1, Ordering::SeqCst);
                    }
                }
                self.weights.word_embeddings.gather(ids)?
            }
            TokenInput::Distribution(dist) => {
                if dist.shape() != [len, self.config.vocab_size] {
                    return Err(Error::shape("embed_input", dist.shape(), &[len, self.config.vocab_size]));
                }
                check_stochastic(dist, 1e-6, "input distribution")?;
                if let Some(p) = self.probe {
                    p.distribution_inputs.fetch_add(1, Ordering::SeqCst);
                }
                self.tape.constant(dist.clone()).matmul(&self.weights.word_embeddings)?
            }
        };
        let pos = self.weights.position_embeddings.gather(position_ids)?;
        let seg = self.weights.segment_embeddings.gather(segment_ids)?;
        words.add(&pos)?.add(&seg)
    }

    /// Runs the embedding layer norm and every encoder layer. Dropout is
    /// applied only when `dropout` carries a generator.
    pub fn forward_encoder(
        &self,
        embedded: Var<'t>,
        attention_mask: &[u8],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_encoder_traced(embedded, attention_mask, dropout)?.0)
    }

    /// [`Session::forward_encoder`] that also returns each layer's per-head
    /// attention probabilities.
    pub fn forward_encoder_traced(
        &self,
        embedded: Var<'t>,
        attention_mask: &[u8],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, Vec<Vec<Var<'t>>>)> {
        let shape = embedded.shape();
        if shape.len() != 2 || shape[1] != self.config.emb_size {
            return Err(Error::shape("forward_encoder", &shape, &[attention_mask.len(), self.config.emb_size]));
        }
        if attention_mask.len() != shape[0] {
            return Err(Error::shape("forward_encoder", &shape, &[attention_mask.len()]));
        }
        let keep: Vec<bool> = attention_mask.iter().map(|&m| m != 0).collect();
        let rate = self.config.dropout_rate;
        let w = &self.weights;

        let mut x = embedded.layer_norm(&w.embedding_norm_gain, &w.embedding_norm_bias)?;
        x = apply_dropout(x, rate, dropout.as_deref_mut())?;

        let d = self.config.head_size();
        let scale = 1.0 / (d as f64).sqrt();
        let mut trace = Vec::with_capacity(w.layers.len());
        for layer in &w.layers {
            let q = x.matmul(&layer.query_w)?.add_row(&layer.query_b)?;
            let k = x.matmul(&layer.key_w)?.add_row(&layer.key_b)?;
            let v = x.matmul(&layer.value_w)?.add_row(&layer.value_b)?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            let mut probs = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let qh = q.slice_cols(h * d, d)?;
                let kh = k.slice_cols(h * d, d)?;
                let vh = v.slice_cols(h * d, d)?;
                let p = qh.matmul_bt(&kh)?.scale(scale).masked_softmax_rows(&keep)?;
                probs.push(p);
                let p = apply_dropout(p, rate, dropout.as_deref_mut())?;
                heads.push(p.matmul(&vh)?);
            }
            trace.push(probs);
            let ctx = Var::concat_cols(&heads)?;
            let attn = ctx.matmul(&layer.attn_out_w)?.add_row(&layer.attn_out_b)?;
            let attn = apply_dropout(attn, rate, dropout.as_deref_mut())?;
            x = x.add(&attn)?.layer_norm(&layer.attn_norm_gain, &layer.attn_norm_bias)?;

            let hidden = x.matmul(&layer.ffn_in_w)?.add_row(&layer.ffn_in_b)?.gelu();
            let ffn = hidden.matmul(&layer.ffn_out_w)?.add_row(&layer.ffn_out_b)?;
            let ffn = apply_dropout(ffn, rate, dropout.as_deref_mut())?;
            x = x.add(&ffn)?.layer_norm(&layer.ffn_norm_gain, &layer.ffn_norm_bias)?;
        }
        if let Some(p) = self.probe {
            p.encoder_forwards.fetch_add(1, Ordering::SeqCst);
        }
        Ok((x, trace))
    }

    /// `hidden × Wᵀ` plus the output bias when enabled; `[seq_len, vocab_size]`.
    pub fn mlm_logits(&self, hidden: Var<'t>) -> Result<Var<'t>> {
        let logits = hidden.matmul_bt(&self.weights.word_embeddings)?;
        if self.config.mlm_bias {
            logits.add_row(&self.weights.mlm_bias)
        } else {
            Ok(logits)
        }
    }

    /// Linear head over the position-0 hidden vector; `[1, n_labels]`.
    pub fn classify(&self, hidden: Var<'t>) -> Result<Var<'t>> {
        hidden
            .select_rows(&[0])?
            .matmul(&self.weights.classifier_w)?
            .add_row(&self.weights.classifier_b)
    }

    /// Embeds and encodes one instance.
    pub fn encode(
        &self,
        instance: &EncodedInstance,
        input: TokenInput<'_>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let e = self.embed_input(input, &instance.position_ids, &instance.segment_ids)?;
        self.forward_encoder(e, &instance.attention_mask, dropout)
    }
}

fn apply_dropout<'t>(x: Var<'t>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var<'t>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let shape = x.shape();
            let n: usize = shape.iter().product();
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
                .collect();
            x.mul_const(Tensor::new(shape, mask)?)
        }
        _ => Ok(x),
    }
}
