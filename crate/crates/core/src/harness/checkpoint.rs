//! Checkpoint container.
//!
//! ```text
//! "HCTC"  u32 version  u32 n  n bytes of JSON header
//! per parameter, in header order: numel f64
//! when the header says so, the first then the second moments, same order
//! ```
//!
//! Integers and floats are little-endian; values are stored bit-exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::AdamW;
use crate::error::{HctError, Result};
use crate::model::HctModel;
use crate::objectives::TaxonomySizes;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub sizes: TaxonomySizes,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer updates taken.
    pub step: u64,
    /// Seed from which every shuffle is derived; the next epoch's order
    /// depends only on it and `epoch`.
    pub rng_seed: u64,
    pub params: Vec<ParamEntry>,
    pub has_optimizer: bool,
}

/// A model with its optimizer state and training position.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: HctModel,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let store = &self.model.store;
        // where a run writes is not part of it; identical runs save identical bytes
        let config = RunConfig { out_dir: None, ..self.config.clone() };
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            config,
            sizes: self.model.sizes,
            epoch: self.epoch,
            step: self.optimizer.as_ref().map_or(0, |o| o.t),
            rng_seed: self.config.seed,
            params: store
                .ids()
                .map(|id| ParamEntry {
                    name: store.name(id).to_string(),
                    shape: store.tensor(id).shape().to_vec(),
                    frozen: store.is_frozen(id),
                })
                .collect(),
            has_optimizer: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        let mut put = |xs: &[f64]| -> Result<()> {
            let mut buf = vec![0u8; 8 * xs.len()];
            LittleEndian::write_f64_into(xs, &mut buf);
            w.write_all(&buf)?;
            Ok(())
        };
        for id in store.ids() {
            put(store.tensor(id).data())?;
        }
        if let Some(o) = &self.optimizer {
            for m in o.m.iter().chain(&o.v) {
                put(m)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint and rebuilds its model. With `expected`, a
    /// configuration whose hash differs is an error unless `force` is set.
    pub fn load(path: &Path, expected: Option<&RunConfig>, force: bool) -> Result<Self> {
        let bytes = fs::read(path)?;
        let fail = |offset: usize, message: String| HctError::Format { offset: offset as u64, message };
        if bytes.len() < 12 {
            return Err(fail(bytes.len(), "truncated checkpoint header".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "not a checkpoint (bad magic)".into()));
        }
        let version = LittleEndian::read_u32(&bytes[4..8]);
        if version != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported checkpoint version {version}")));
        }
        let n = LittleEndian::read_u32(&bytes[8..12]) as usize;
        let mut pos = 12;
        let json = bytes.get(pos..pos + n).ok_or_else(|| fail(pos, "truncated JSON header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| fail(pos, format!("bad header: {e}")))?;
        pos += n;
        if header.config.hash() != header.config_hash {
            return Err(fail(12, "header configuration does not match its hash".into()));
        }
        if let Some(cfg) = expected {
            if cfg.hash() != header.config_hash && !force {
                return Err(HctError::Config(format!(
                    "configuration hash {} differs from the checkpoint's {}; pass --force to load anyway",
                    &cfg.hash()[..12],
                    &header.config_hash[..12]
                )));
            }
        }
        let mut model = HctModel::new(header.config.model.clone(), header.sizes, header.config.seed)?;
        if model.store.len() != header.params.len() {
            return Err(fail(
                12,
                format!("checkpoint holds {} tensors, the model {}", header.params.len(), model.store.len()),
            ));
        }
        let take = |len: usize, pos: &mut usize| -> Result<Vec<f64>> {
            let raw = bytes.get(*pos..*pos + 8 * len).ok_or_else(|| fail(*pos, "truncated tensor data".into()))?;
            let mut out = vec![0.0; len];
            LittleEndian::read_f64_into(raw, &mut out);
            *pos += 8 * len;
            Ok(out)
        };
        let ids: Vec<_> = model.store.ids().collect();
        for (id, entry) in ids.iter().zip(&header.params) {
            let t = model.store.tensor(*id);
            if model.store.name(*id) != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(fail(12, format!("parameter `{}` does not match the model layout", entry.name)));
            }
            let data = take(t.numel(), &mut pos)?;
            model.store.tensor_mut(*id).data_mut().copy_from_slice(&data);
            model.store.set_frozen(*id, entry.frozen);
        }
        let optimizer = if header.has_optimizer {
            let mut o = AdamW::new(header.config.optim, &model.store);
            o.t = header.step;
            for k in 0..ids.len() {
                o.m[k] = take(o.m[k].len(), &mut pos)?;
            }
            for k in 0..ids.len() {
                o.v[k] = take(o.v[k].len(), &mut pos)?;
            }
            Some(o)
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(fail(pos, "trailing bytes after checkpoint data".into()));
        }
        Ok(Self { config: header.config, model, optimizer, epoch: header.epoch })
    }
}
