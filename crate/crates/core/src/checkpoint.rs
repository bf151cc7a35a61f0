//! Versioned single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `BSPMPNET`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then every tensor as raw
//! little-endian `f64` in the order listed by the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::Array;
use crate::loss::LossConfig;
use crate::model::{BspMpnet, BspMpnetConfig};
use crate::nn::Module;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BSPMPNET";
pub const FORMAT_VERSION: u32 = 1;

/// Adam moments and step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
}

/// Training progress needed to resume bit-exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub epoch: u64,
    /// Batches already consumed in `epoch`.
    pub batch_in_epoch: u64,
    pub seed: u64,
    /// Word position of the epoch's data RNG stream.
    pub rng_word_pos: String,
    pub best_valid_si_snr: Option<f64>,
    pub loss: Option<LossConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BspMpnetConfig,
    pub tensors: BTreeMap<String, Array>,
    pub optimizer: Option<OptimizerState>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BspMpnetConfig,
    meta: TrainingMeta,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorRecord>,
    adam_m: Vec<TensorRecord>,
    adam_v: Vec<TensorRecord>,
}

fn records(map: &BTreeMap<String, Array>) -> Vec<TensorRecord> {
    map.iter().map(|(k, v)| TensorRecord { name: k.clone(), shape: v.shape().to_vec() }).collect()
}

impl Checkpoint {
    pub fn from_model(model: &BspMpnet, optimizer: Option<OptimizerState>, meta: TrainingMeta) -> Self {
        let tensors = model.state().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Self { config: model.config.clone(), tensors, optimizer, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: records(&self.tensors),
            adam_m: self.optimizer.as_ref().map(|o| records(&o.m)).unwrap_or_default(),
            adam_v: self.optimizer.as_ref().map(|o| records(&o.v)).unwrap_or_default(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |a: &Array| {
            for &x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        self.tensors.values().for_each(&mut put);
        if let Some(o) = &self.optimizer {
            o.m.values().for_each(&mut put);
            o.v.values().for_each(&mut put);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads version {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut take = |recs: &[TensorRecord]| -> Result<BTreeMap<String, Array>> {
            let mut map = BTreeMap::new();
            for r in recs {
                let n: usize = r.shape.iter().product();
                let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                map.insert(r.name.clone(), ArrayD::from_shape_vec(IxDyn(&r.shape), data).unwrap());
                pos += 8 * n;
            }
            Ok(map)
        };
        let tensors = take(&header.tensors)?;
        let optimizer = match header.optimizer_step {
            Some(step) => Some(OptimizerState { step, m: take(&header.adam_m)?, v: take(&header.adam_v)? }),
            None => None,
        };
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { config: header.config, tensors, optimizer, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies every tensor into `model`; the sets of names and shapes must match.
    pub fn load_into(&self, model: &mut BspMpnet) -> Result<()> {
        let mut state = model.state_mut();
        let have: Vec<String> = state.iter().map(|p| p.name.clone()).collect();
        let missing: Vec<&str> = have.iter().filter(|n| !self.tensors.contains_key(*n)).map(String::as_str).collect();
        let extra: Vec<&str> = self.tensors.keys().filter(|k| !have.contains(k)).map(String::as_str).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "section mismatch: model expects {} tensors not in the checkpoint (first: {:?}); checkpoint has {} unknown tensors (first: {:?})",
                missing.len(),
                missing.first(),
                extra.len(),
                extra.first()
            )));
        }
        for p in state.iter_mut() {
            let t = &self.tensors[&p.name];
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("{}: shape {:?} in checkpoint, {:?} in model", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Builds a stand-in-backbone model from the config echo and loads the tensors.
    pub fn build_model(&self) -> Result<BspMpnet> {
        let mut m = BspMpnet::new(self.config.clone())?;
        self.load_into(&mut m)?;
        Ok(m)
    }

    pub fn trainable_names(&self, model: &BspMpnet) -> Vec<String> {
        model.params().iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
    }
}
