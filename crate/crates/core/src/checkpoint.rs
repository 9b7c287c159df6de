//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"CLSPOOL\0"
//! version      u32       1
//! meta_len     u32       byte length of the metadata block
//! meta         UTF-8     newline-separated key=value lines
//! param_count  u32
//! param_count × {
//!   name_len   u32
//!   name       UTF-8
//!   ndim       u32
//!   dims       ndim × u32
//!   values     product(dims) × f32
//! }
//! ```
//!
//! Metadata keys: `layers`, `hidden`, `heads`, `ffn`, `vocab`, `max_len`,
//! `dropout`, `pooling`, `classes`, then one `token=<text>` line per
//! vocabulary entry in id order.

use std::fs;
use std::path::Path;

use crate::data::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Model, ModelConfig};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLSPOOL\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &Model, vocab: &Vocab) -> Result<Vec<u8>> {
    let c = &model.config;
    let e = &c.encoder;
    let mut meta = format!(
        "layers={}\nhidden={}\nheads={}\nffn={}\nvocab={}\nmax_len={}\ndropout={}\npooling={}\nclasses={}\n",
        e.layers, e.hidden, e.heads, e.ffn, e.vocab, e.max_len, e.dropout, c.pooling, c.classes
    );
    for t in vocab.tokens() {
        meta.push_str("token=");
        meta.push_str(t);
        meta.push('\n');
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, model.store.len())?;
    for (_, p) in model.store.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, vocab)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Vocab)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()?;
    let meta = r.str(meta_len)?;
    let mut tokens = Vec::new();
    let mut kv = std::collections::HashMap::new();
    for line in meta.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad metadata line '{line}'")))?;
        if k == "token" {
            tokens.push(v.to_string());
        } else {
            kv.insert(k, v);
        }
    }
    let get = |k: &str| -> Result<&str> {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata '{k}'")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("metadata '{k}': {e}")))
    };
    let config = ModelConfig {
        encoder: EncoderConfig {
            layers: num("layers")?,
            hidden: num("hidden")?,
            heads: num("heads")?,
            ffn: num("ffn")?,
            vocab: num("vocab")?,
            max_len: num("max_len")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("metadata 'dropout': {e}")))?,
        },
        pooling: get("pooling")?.parse()?,
        classes: num("classes")?,
    };
    let vocab = Vocab::from_tokens(tokens)?;
    if vocab.len() != config.encoder.vocab {
        return Err(Error::Checkpoint(format!(
            "vocab size {} does not match {} stored tokens",
            config.encoder.vocab,
            vocab.len()
        )));
    }
    let mut model = Model::new(config, &mut seeded(0))?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {count}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = r.str(name_len)?.to_string();
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        model.store.set(id, Tensor::new(dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, vocab))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocab)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;
    use crate::pooling::PoolingKind;

    fn model(pooling: PoolingKind) -> (Model, Vocab) {
        let vocab = build_vocab(["the food was good"], 1).unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                hidden: 8,
                heads: 2,
                ffn: 16,
                vocab: vocab.len(),
                max_len: 12,
                dropout: 0.1,
            },
            pooling,
            classes: 3,
        };
        (Model::new(cfg, &mut seeded(5)).unwrap(), vocab)
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        for kind in PoolingKind::ALL {
            let (m, v) = model(kind);
            let bytes = encode_checkpoint(&m, &v).unwrap();
            let (back, vocab) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(vocab, v);
            assert_eq!(back.config, m.config);
            for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
                assert_eq!(a.name, b.name);
                for (x, y) in a.value.data().iter().zip(b.value.data()) {
                    assert_eq!(*x as f32 as f64, *y);
                }
            }
            assert_eq!(encode_checkpoint(&back, &vocab).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let (m, v) = model(PoolingKind::Lstm);
        let bytes = encode_checkpoint(&m, &v).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
