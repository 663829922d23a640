//! Tokenization, vocabulary, instance layout and TSV ingestion.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Lowercases, splits on whitespace, and emits every character that is
/// neither alphanumeric nor whitespace as a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Bijective token/id map with the reserved tokens at ids 0 through 4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens over `corpus` and keeps those seen at least `min_freq`
    /// times, ordered by descending count and then lexicographically.
    pub fn build<I, S>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_freq == 0 {
            return Err(Error::Contract("min_freq must be positive".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut texts = 0usize;
        for text in corpus {
            texts += 1;
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if texts == 0 {
            return Err(Error::Parse {
                line: None,
                message: "cannot build a vocabulary from an empty corpus".into(),
            });
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t)))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary must start with the five reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Ids back to tokens; out-of-range ids render as `[UNK]`.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }
}

/// Class names in first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new(names: impl IntoIterator<Item = String>) -> Self {
        let mut set = LabelSet::default();
        for n in names {
            set.intern(&n);
        }
        set
    }

    /// Id of `name`, registering it if new.
    pub fn intern(&mut self, name: &str) -> usize {
        match self.names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Label(format!("unknown label {name:?}; known: {:?}", self.names)))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One input in id form: `[CLS] a… [SEP] (b… [SEP]) [PAD]…`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstance {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub label: usize,
}

impl EncodedInstance {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Checks the layout invariants against a vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let n = self.token_ids.len();
        let bad = |m: &str| Err(Error::Contract(format!("malformed instance: {m}")));
        if self.position_ids.len() != n || self.segment_ids.len() != n || self.attention_mask.len() != n {
            return bad("field lengths differ");
        }
        if n == 0 || self.token_ids[0] != CLS_ID {
            return bad("position 0 must be [CLS]");
        }
        if self.token_ids.iter().any(|&t| t >= vocab_size) {
            return bad("token id out of vocabulary");
        }
        if self.segment_ids.iter().any(|&s| s > 1) {
            return bad("segment id outside {0, 1}");
        }
        if self.position_ids.iter().enumerate().any(|(i, &p)| p != i) {
            return bad("position ids must count up from 0");
        }
        if self.attention_mask.windows(2).any(|w| w[1] > w[0]) {
            return bad("padding must be a suffix");
        }
        let real = self.real_len();
        if self.token_ids[..real].contains(&PAD_ID) || self.token_ids[real..].iter().any(|&t| t != PAD_ID) {
            return bad("[PAD] must appear exactly on masked positions");
        }
        if self.token_ids[real - 1] != SEP_ID {
            return bad("last real token must be [SEP]");
        }
        Ok(())
    }
}

/// Lays out one instance, truncating the longer segment first when over length.
pub fn encode_instance(
    text_a: &str,
    text_b: Option<&str>,
    label: usize,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<EncodedInstance> {
    if max_seq_len < 3 {
        return Err(Error::Contract(format!("max_seq_len must be at least 3, got {max_seq_len}")));
    }
    let mut a = vocab.encode_text(text_a);
    let mut b = text_b.map(|t| vocab.encode_text(t));
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_seq_len - specials;
    match &mut b {
        Some(b) => {
            while a.len() + b.len() > budget {
                if a.len() > b.len() {
                    a.pop();
                } else {
                    b.pop();
                }
            }
        }
        None => a.truncate(budget),
    }

    let mut token_ids = Vec::with_capacity(max_seq_len);
    let mut segment_ids = Vec::with_capacity(max_seq_len);
    token_ids.push(CLS_ID);
    token_ids.extend(&a);
    token_ids.push(SEP_ID);
    segment_ids.resize(token_ids.len(), 0);
    if let Some(b) = b {
        token_ids.extend(&b);
        token_ids.push(SEP_ID);
        segment_ids.resize(token_ids.len(), 1);
    }
    let real = token_ids.len();
    token_ids.resize(max_seq_len, PAD_ID);
    segment_ids.resize(max_seq_len, 0);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_seq_len, 0);
    Ok(EncodedInstance {
        token_ids,
        position_ids: (0..max_seq_len).collect(),
        segment_ids,
        attention_mask,
        label,
    })
}

/// One TSV row before encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawExample {
    pub label: String,
    pub text_a: String,
    pub text_b: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<EncodedInstance>,
    pub labels: LabelSet,
    pub max_seq_len: usize,
}

impl Dataset {
    /// Encodes `examples` in order. With `labels` given, names outside it are
    /// an error; otherwise labels are declared by first occurrence.
    pub fn from_examples(
        examples: &[RawExample],
        vocab: &Vocabulary,
        max_seq_len: usize,
        labels: Option<&LabelSet>,
    ) -> Result<Self> {
        let mut set = labels.cloned().unwrap_or_default();
        let mut instances = Vec::with_capacity(examples.len());
        for ex in examples {
            let label = match labels {
                Some(fixed) => fixed.id(&ex.label)?,
                None => set.intern(&ex.label),
            };
            instances.push(encode_instance(&ex.text_a, ex.text_b.as_deref(), label, vocab, max_seq_len)?);
        }
        Ok(Dataset {
            instances,
            labels: set,
            max_seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Count of instances per label id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }
}

/// Parses `label<TAB>text_a[<TAB>text_b]` lines; blank lines are skipped.
pub fn parse_examples(content: &str) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let err = |message: String| Error::Parse {
            line: Some(i + 1),
            message,
        };
        match cols[..] {
            [label, a] if !label.is_empty() => out.push(RawExample {
                label: label.to_string(),
                text_a: a.to_string(),
                text_b: None,
            }),
            [label, a, b] if !label.is_empty() => out.push(RawExample {
                label: label.to_string(),
                text_a: a.to_string(),
                text_b: Some(b.to_string()),
            }),
            [_] => return Err(err("expected label<TAB>text, found a single column".into())),
            ["", _] | ["", _, _] => return Err(err("empty label column".into())),
            _ => return Err(err(format!("expected 2 or 3 tab-separated columns, found {}", cols.len()))),
        }
    }
    Ok(out)
}

pub fn read_examples(path: &Path) -> Result<Vec<RawExample>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        line: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_examples(&content)
}

pub fn format_examples(examples: &[RawExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        match &ex.text_b {
            Some(b) => writeln!(s, "{}\t{}\t{}", ex.label, ex.text_a, b),
            None => writeln!(s, "{}\t{}", ex.label, ex.text_a),
        }
        .expect("write to string");
    }
    s
}

pub fn write_examples(path: &Path, examples: &[RawExample]) -> Result<()> {
    std::fs::write(path, format_examples(examples))?;
    Ok(())
}

/// Reads and encodes a TSV dataset file.
pub fn load_dataset(path: &Path, vocab: &Vocabulary, max_seq_len: usize, labels: Option<&LabelSet>) -> Result<Dataset> {
    Dataset::from_examples(&read_examples(path)?, vocab, max_seq_len, labels)
}
