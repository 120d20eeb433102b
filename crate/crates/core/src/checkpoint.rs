//! Binary checkpoint format, version 1.
//!
//! ```text
//! magic        8 bytes  "TABMLMCK"
//! version      u32 LE
//! header_len   u32 LE
//! header       UTF-8 `key=value` lines (LF), header_len bytes
//! n_tensors    u32 LE
//! tensor*      name_len u16 LE, name, ndim u8, dims u64 LE * ndim,
//!              payload f64 LE * prod(dims)
//! checksum     SHA-256 of every preceding byte
//! ```
//!
//! Model tensors use the names from [`Parameters::named_tensors`]; optimizer
//! moments, when present, are prefixed `adam.m.` and `adam.v.`.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::trainer::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"TABMLMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub vocab_hash: String,
    pub params: Parameters,
    pub adam: Option<AdamState>,
    pub loss_curve: Vec<f64>,
    /// Free-form extra header entries (for example the training config).
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, vocab_hash: &str, extra: BTreeMap<String, String>) -> Self {
        Checkpoint {
            epoch: state.epoch,
            vocab_hash: vocab_hash.to_string(),
            params: state.params.clone(),
            adam: Some(state.adam.clone()),
            loss_curve: state.loss_curve.clone(),
            extra,
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let adam = self
            .adam
            .ok_or_else(|| Error::Checkpoint("no optimizer state; cannot resume".into()))?;
        Ok(TrainState {
            params: self.params,
            adam,
            epoch: self.epoch,
            loss_curve: self.loss_curve,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let mut line = |k: &str, v: &str| {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        };
        line("epoch", &self.epoch.to_string());
        line("vocab_hash", &self.vocab_hash);
        for (k, v) in self.params.config.to_kv() {
            line(&format!("model.{k}"), &v);
        }
        if let Some(adam) = &self.adam {
            line("adam_step", &adam.step.to_string());
        }
        let curve: Vec<String> = self.loss_curve.iter().map(|x| format!("{x}")).collect();
        line("loss_curve", &curve.join(","));
        for (k, v) in &self.extra {
            line(&format!("extra.{k}"), v);
        }

        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .named_tensors()
            .into_iter()
            .map(|t| (t.name, t.shape, t.data))
            .collect();
        if let Some(adam) = &self.adam {
            for (prefix, p) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
                tensors.extend(
                    p.named_tensors()
                        .into_iter()
                        .map(|t| (format!("{prefix}{}", t.name), t.shape, t.data)),
                );
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        if bytes.len() < 12 + 32 {
            return Err(Error::ChecksumMismatch);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumMismatch);
        }

        let mut r = Reader { bytes: body, pos: 12 };
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let kv: BTreeMap<&str, &str> = header
            .lines()
            .filter_map(|l| l.split_once('='))
            .collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("header is missing {k}")))
        };
        let epoch = get("epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad epoch".into()))?;
        let vocab_hash = get("vocab_hash")?.to_string();
        let config = ModelConfig::from_kv(|k| kv.get(format!("model.{k}").as_str()).copied())?;
        let loss_curve = match get("loss_curve")? {
            "" => Vec::new(),
            s => s
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Checkpoint("bad loss curve".into())))
                .collect::<Result<_>>()?,
        };
        let adam_step: Option<u64> = kv.get("adam_step").and_then(|s| s.parse().ok());
        let extra = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.to_string())))
            .collect();

        let mut params = Parameters::zeros(&config);
        let mut adam = adam_step.map(|step| AdamState {
            step,
            m: Parameters::zeros(&config),
            v: Parameters::zeros(&config),
        });
        let n_tensors = r.u32()?;
        let mut seen = 0usize;
        for _ in 0..n_tensors {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let (target, local) = if let Some(rest) = name.strip_prefix("adam.m.") {
                (adam.as_mut().map(|a| &mut a.m), rest)
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                (adam.as_mut().map(|a| &mut a.v), rest)
            } else {
                seen += 1;
                (Some(&mut params), name.as_str())
            };
            let target = target.ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            target.load_tensor(local, &shape, &data)?;
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        if seen != params.named_tensors().len() {
            return Err(Error::Checkpoint("missing model tensors".into()));
        }
        Ok(Checkpoint {
            epoch,
            vocab_hash,
            params,
            adam,
            loss_curve,
            extra,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, refusing it when `expected_vocab_hash` is given and
/// differs from the recorded one.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(expected) = expected_vocab_hash {
        if ckpt.vocab_hash != expected {
            return Err(Error::VocabMismatch {
                expected: expected.to_string(),
                found: ckpt.vocab_hash,
            });
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params};
    use crate::tokenizer::{build_vocab, make_triple};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            max_positions: 12,
            hidden: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 16,
            type_vocab: 1,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    fn sample() -> Checkpoint {
        let cfg = small();
        let mut adam = AdamState::new(&cfg);
        adam.step = 17;
        adam.m.tok_emb[[3, 4]] = -0.25;
        adam.v.head.out_bias[9] = 1e-300;
        Checkpoint {
            epoch: 3,
            vocab_hash: build_vocab().hash(),
            params: init_params(&cfg, 4).unwrap(),
            adam: Some(adam),
            loss_curve: vec![9.1, 0.1 + 0.2, 1e-7],
            extra: [("train.seed".to_string(), "4".to_string())].into(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn loaded_params_give_identical_logits() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path, Some(&c.vocab_hash)).unwrap();
        let t = make_triple(&[4, 9, 5, 20], 10).unwrap();
        let a = forward(&c.params, std::slice::from_ref(&t)).unwrap();
        let b = forward(&back.params, std::slice::from_ref(&t)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_hash_mismatch_is_refused() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&c, &path).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some("deadbeef")),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn truncation_and_corruption_fail_the_checksum() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 100]),
            Err(Error::ChecksumMismatch)
        ));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::ChecksumMismatch)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::ChecksumMismatch)));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("magic")));
    }
}
