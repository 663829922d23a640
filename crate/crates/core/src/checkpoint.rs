//! Model checkpoint files.
//!
//! Layout, all integers `u64` little-endian unless noted:
//!
//! ```text
//! magic "TSCKPT\0\0" | version u32
//! n_layers emb_size n_heads ffn_size vocab_size max_seq_len n_segments n_labels
//! dropout_rate f64 | mlm_bias u8
//! vocab: count, then count × (len, utf-8 bytes)
//! tensors: count, then count × (name, ndim, dims…, row-major f64 values)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::persist::{check_magic, Reader, Writer};
use crate::text::Vocabulary;
use crate::transformer::{weight_shapes, ModelConfig, TransformerParams};

const MAGIC: &[u8; 8] = b"TSCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters together with the vocabulary they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TransformerParams,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn new(params: TransformerParams, vocab: Vocabulary) -> Result<Self> {
        if params.config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary of {} tokens",
                params.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Checkpoint { params, vocab })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let c = &self.params.config;
        for v in [
            c.n_layers,
            c.emb_size,
            c.n_heads,
            c.ffn_size,
            c.vocab_size,
            c.max_seq_len,
            c.n_segments,
            c.n_labels,
        ] {
            w.usize(v);
        }
        w.f64(c.dropout_rate);
        w.u8(c.mlm_bias as u8);
        w.usize(self.vocab.len());
        for t in self.vocab.tokens() {
            w.str(t);
        }
        let named = self.params.weights.named();
        w.usize(named.len());
        for (name, t) in named {
            w.str(&name);
            w.tensor(t);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        check_magic(&mut r, MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let mut next = || r.usize();
        let config = ModelConfig {
            n_layers: next()?,
            emb_size: next()?,
            n_heads: next()?,
            ffn_size: next()?,
            vocab_size: next()?,
            max_seq_len: next()?,
            n_segments: next()?,
            n_labels: next()?,
            dropout_rate: r.f64()?,
            mlm_bias: r.u8()? != 0,
        };
        config.validate().map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let n_tokens = r.len(8)?;
        let tokens = (0..n_tokens).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(tokens)?;

        let expected = weight_shapes(&config);
        let expected = expected.named();
        let count = r.len(8)?;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, config implies {}",
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let found = r.str()?;
            if &found != name {
                return Err(Error::Format(format!("expected tensor {name}, found {found}")));
            }
            let t = r.tensor()?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    shape
                )));
            }
            loaded.push(t);
        }
        r.expect_end()?;
        let mut loaded = loaded.into_iter();
        let weights = weight_shapes(&config).map(|_, _| loaded.next().expect("count checked"));
        Checkpoint::new(TransformerParams { config, weights }, vocab).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::build(["the film was great", "a dull plot"], 1).unwrap();
        let config = ModelConfig {
            n_layers: 2,
            emb_size: 8,
            n_heads: 2,
            ffn_size: 12,
            vocab_size: vocab.len(),
            max_seq_len: 7,
            n_labels: 2,
            ..ModelConfig::default()
        };
        Checkpoint::new(TransformerParams::init(&config, 11).unwrap(), vocab).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.checksum(), ck.params.checksum());
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");

        let mut bad = ck.clone();
        bad.params.weights.layers[0].ffn_in_b = crate::Tensor::zeros(&[5]);
        let err = Checkpoint::from_bytes(&bad.to_bytes()).unwrap_err().to_string();
        assert!(err.contains("layers.0.ffn_in_b"), "{err}");

        let err = Checkpoint::from_bytes(&ck.to_bytes()[..100]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(Checkpoint::from_bytes(b"garbage!garbage!").is_err());
    }
}
