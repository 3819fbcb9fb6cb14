//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TKGCKPT\0" | u32 version | u64 meta_len | meta (UTF-8 `key = value` lines, sorted)
//! u64 tensor_count | { u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[∏dims] }*
//! ```
//!
//! Tensors are the model parameters followed by `adam.m.<name>` and
//! `adam.v.<name>` for each of them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Result, TkgError};
use crate::model::Model;
use crate::params::ParamStore;
use crate::training::adam::AdamState;
use crate::training::config::{parse_kv_text, TrainConfig};

pub const MAGIC: &[u8; 8] = b"TKGCKPT\0";
pub const VERSION: u32 = 1;

/// Snapshot of a training run between two epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_entities: usize,
    pub num_raw_relations: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub best_valid_mrr: Option<f64>,
    pub stale_epochs: usize,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub params: ParamStore,
    pub adam: AdamState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    fn metadata(&self) -> String {
        let mut m: BTreeMap<String, String> = self
            .config
            .to_map()
            .into_iter()
            .map(|(k, v)| (format!("config.{k}"), v))
            .collect();
        m.insert("dataset.num_entities".into(), self.num_entities.to_string());
        m.insert("dataset.num_raw_relations".into(), self.num_raw_relations.to_string());
        m.insert("train.epoch".into(), self.epoch.to_string());
        m.insert("train.adam_step".into(), self.adam.step.to_string());
        m.insert(
            "train.best_valid_mrr".into(),
            self.best_valid_mrr.map_or("none".into(), |v| format!("{:016x}", v.to_bits())),
        );
        m.insert("train.stale_epochs".into(), self.stale_epochs.to_string());
        m.insert("rng.seed".into(), hex(&self.rng_seed));
        m.insert("rng.stream".into(), self.rng_stream.to_string());
        m.insert("rng.word_pos".into(), self.rng_word_pos.to_string());
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.metadata();
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let names = self.params.names();
        let tensors: Vec<(String, &Tensor)> = names
            .iter()
            .cloned()
            .zip(self.params.tensors())
            .chain(names.iter().map(|n| format!("adam.m.{n}")).zip(&self.adam.m))
            .chain(names.iter().map(|n| format!("adam.v.{n}")).zip(&self.adam.v))
            .collect();
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "header")? != MAGIC {
            return Err(TkgError::checkpoint("header", "bad magic bytes"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(TkgError::checkpoint(
                "version",
                format!("format version {version} is not supported (expected {VERSION})"),
            ));
        }
        let meta_len = r.u64("metadata")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| TkgError::checkpoint("metadata", "not UTF-8"))?;
        let mut meta: BTreeMap<String, String> = parse_kv_text(meta)
            .map_err(|e| TkgError::checkpoint("metadata", e.to_string()))?
            .into_iter()
            .map(|(_, kv)| kv)
            .collect();
        let mut field = |k: &str| meta.remove(k).ok_or_else(|| TkgError::checkpoint(k, "missing"));
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| TkgError::checkpoint(k, format!("unparseable value '{v}'")))
        }
        let num_entities = num("dataset.num_entities", field("dataset.num_entities")?)?;
        let num_raw_relations = num("dataset.num_raw_relations", field("dataset.num_raw_relations")?)?;
        let epoch = num("train.epoch", field("train.epoch")?)?;
        let adam_step = num("train.adam_step", field("train.adam_step")?)?;
        let best_valid_mrr = match field("train.best_valid_mrr")?.as_str() {
            "none" => None,
            v => Some(f64::from_bits(u64::from_str_radix(v, 16).map_err(|_| {
                TkgError::checkpoint("train.best_valid_mrr", format!("unparseable value '{v}'"))
            })?)),
        };
        let stale_epochs = num("train.stale_epochs", field("train.stale_epochs")?)?;
        let seed_text = field("rng.seed")?;
        let rng_seed = unhex(&seed_text).ok_or_else(|| TkgError::checkpoint("rng.seed", "expected 64 hex digits"))?;
        let rng_stream = num("rng.stream", field("rng.stream")?)?;
        let rng_word_pos = num("rng.word_pos", field("rng.word_pos")?)?;
        let mut config = TrainConfig::default();
        for (k, v) in &meta {
            let key = k
                .strip_prefix("config.")
                .ok_or_else(|| TkgError::checkpoint(k, "unknown metadata key"))?;
            config.set(key, v).map_err(|e| TkgError::checkpoint(k, e.to_string()))?;
        }

        let count = r.u64("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let what = format!("tensor #{i}");
            let len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| TkgError::checkpoint(&what, "name is not UTF-8"))?
                .to_string();
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let n: usize = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| TkgError::checkpoint(&name, "shape overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| TkgError::checkpoint(&name, "too large"))?, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name.clone(), Tensor::new(shape, data).map_err(|e| TkgError::checkpoint(&name, e.to_string()))?));
        }
        if r.pos != bytes.len() {
            return Err(TkgError::checkpoint("trailer", "unexpected bytes after the last tensor"));
        }
        if !count.is_multiple_of(3) {
            return Err(TkgError::checkpoint("tensor count", "expected parameters plus two moment tables"));
        }
        let np = count / 3;
        let mut params = ParamStore::new();
        let mut m = Vec::with_capacity(np);
        let mut v = Vec::with_capacity(np);
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let base = i % np;
            match i / np {
                0 => {
                    params.add(name, t);
                }
                slot => {
                    let prefix = if slot == 1 { "adam.m." } else { "adam.v." };
                    let expect = format!("{prefix}{}", params.names()[base]);
                    if name != expect {
                        return Err(TkgError::checkpoint(&name, format!("expected tensor '{expect}'")));
                    }
                    if t.shape() != params.tensors()[base].shape() {
                        return Err(TkgError::checkpoint(&name, "moment shape differs from its parameter"));
                    }
                    if slot == 1 { m.push(t) } else { v.push(t) }
                }
            }
        }
        Ok(Checkpoint {
            config,
            num_entities,
            num_raw_relations,
            epoch,
            best_valid_mrr,
            stale_epochs,
            rng_seed,
            rng_stream,
            rng_word_pos,
            params,
            adam: AdamState { m, v, step: adam_step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| TkgError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| TkgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TkgError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Builds the model described by `config` and fills it with the stored
    /// parameters, rejecting any name or shape mismatch.
    pub fn restore_model(&self, config: &TrainConfig) -> Result<Model> {
        let model_cfg = config.model_config(self.num_entities, self.num_raw_relations);
        let mut model = Model::new(model_cfg, config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(TkgError::checkpoint(
                "parameters",
                format!("checkpoint has {} tensors, model expects {}", self.params.len(), model.params.len()),
            ));
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            let expect_name = &model.params.names()[i];
            if name != expect_name {
                return Err(TkgError::checkpoint(name, format!("expected parameter '{expect_name}'")));
            }
            let target = &mut model.params.tensors_mut()[i];
            if target.shape() != t.shape() {
                return Err(TkgError::checkpoint(
                    name,
                    format!("shape {:?} does not match configured {:?}", t.shape(), target.shape()),
                ));
            }
            *target = t.clone();
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TkgError::checkpoint(field, "file is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_tkg;
    use crate::training::Trainer;

    fn trained() -> Checkpoint {
        let ds = gen_synthetic_tkg(5, 2, 2, 12, 1).unwrap();
        let cfg = TrainConfig {
            dim: 4,
            history: 2,
            layers: 1,
            heads: 1,
            sample_k: 2,
            max_epochs: 1,
            seed: 3,
            patience: Some(4),
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, &ds).unwrap();
        tr.run(&ds, |_, _, _| Ok(())).unwrap();
        tr.checkpoint()
    }

    fn message(bytes: &[u8]) -> String {
        Checkpoint::from_bytes(bytes).unwrap_err().to_string()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = trained();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
        let mut a = c.rng();
        let mut b = back.rng();
        assert_eq!(rand::RngCore::next_u64(&mut a), rand::RngCore::next_u64(&mut b));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = trained();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn corruption_names_the_field() {
        let good = trained().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(message(&bad).contains("header"));
        let mut bad = good.clone();
        bad[8] = 9;
        assert!(message(&bad).contains("version"));
        assert!(message(&good[..good.len() - 3]).contains("truncated"));
        let mut bad = good.clone();
        bad.push(0);
        assert!(message(&bad).contains("trailer"));
        assert!(message(&good[..4]).contains("header"));
    }

    #[test]
    fn restore_rejects_a_different_dimension() {
        let c = trained();
        assert!(c.restore_model(&c.config).is_ok());
        let mut wider = c.config.clone();
        wider.dim = 6;
        let err = c.restore_model(&wider).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
        let mut deeper = c.config.clone();
        deeper.layers = 2;
        assert!(c.restore_model(&deeper).is_err());
    }
}
