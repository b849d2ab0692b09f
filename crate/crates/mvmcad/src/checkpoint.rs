//! `MVMC` checkpoint:
//!
//! ```text
//! "MVMC" | u32 version | u64 iteration | u64 seed | u64 optimizer step
//! u32 config length | config JSON
//! u32 tensor count | { u32 name length | name | MVTN tensor } ...
//! ```
//!
//! All integers little-endian. Optimizer moments are stored as
//! `optim.<param>.m`, `optim.<param>.v` and `optim.<param>.v_max`.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use mvmcad_core::model::Model;
use mvmcad_core::optim::{MomentState, StableAdamW};
use mvmcad_core::{Real, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::mvtn::{self, AnyTensor};

pub const MAGIC: &[u8; 4] = b"MVMC";
pub const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub optimizer_step: u64,
    /// Config exactly as stored, so re-saving is byte-stable.
    pub config_json: String,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn capture<T: Real>(config: &RunConfig, model: &Model<T>, optim: &StableAdamW<T>, iteration: u64) -> Self {
        let mut tensors: Vec<(String, AnyTensor)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, AnyTensor::from_real(t)))
            .collect();
        for (name, st) in &optim.state {
            for (suffix, t) in [("m", &st.m), ("v", &st.v), ("v_max", &st.v_max)] {
                tensors.push((format!("{OPTIM_PREFIX}{name}.{suffix}"), AnyTensor::from_real(t)));
            }
        }
        Checkpoint {
            iteration,
            seed: config.train.seed,
            optimizer_step: optim.step,
            config_json: config.to_json(),
            tensors,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_json(&self.config_json)
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Names of optimizer-state entries' parameters.
    pub fn optimizer_params(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .tensors
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(OPTIM_PREFIX)?.strip_suffix(".m"))
            .collect();
        names.dedup();
        names
    }

    /// Rebuilds the model and optimizer in precision `T`.
    pub fn restore<T: Real>(&self) -> Result<(RunConfig, Model<T>, StableAdamW<T>)> {
        let config = self.config()?;
        let mut model = Model::<T>::new(config.model.clone())?;
        let table: HashMap<&str, &AnyTensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut missing = Vec::new();
        let mut mismatch = None;
        model.params.visit_mut(&mut |name, t| match table.get(name.as_str()) {
            Some(stored) if stored.shape() == t.shape() => *t = stored.to_real(),
            Some(stored) => mismatch = Some(format!("{name}: stored {:?}, model {:?}", stored.shape(), t.shape())),
            None => missing.push(name),
        });
        if let Some(m) = mismatch {
            return Err(Error::Validation(format!("checkpoint tensor shape mismatch: {m}")));
        }
        if !missing.is_empty() {
            return Err(Error::Validation(format!("checkpoint lacks tensors: {}", missing.join(", "))));
        }
        let known: std::collections::HashSet<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut optim = StableAdamW::<T>::new(config.optimizer.clone())?;
        optim.step = self.optimizer_step;
        let mut state: BTreeMap<String, MomentState<T>> = BTreeMap::new();
        for (name, t) in &self.tensors {
            if known.contains(name) {
                continue;
            }
            let Some(rest) = name.strip_prefix(OPTIM_PREFIX) else {
                return Err(Error::Validation(format!("unknown checkpoint tensor {name}")));
            };
            let (param, slot) = [".v_max", ".m", ".v"]
                .iter()
                .find_map(|suffix| Some((rest.strip_suffix(suffix)?, &suffix[1..])))
                .filter(|(p, _)| known.contains(*p))
                .ok_or_else(|| Error::Validation(format!("unknown optimizer entry {name}")))?;
            let value: Tensor<T> = t.to_real();
            let entry = state.entry(param.to_string()).or_insert_with(|| MomentState {
                m: Tensor::zeros(value.shape().to_vec()),
                v: Tensor::zeros(value.shape().to_vec()),
                v_max: Tensor::zeros(value.shape().to_vec()),
            });
            match slot {
                "m" => entry.m = value,
                "v" => entry.v = value,
                _ => entry.v_max = value,
            }
        }
        optim.state = state;
        Ok((config, model, optim))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&mvtn::encode_any(t));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let io = |e: std::io::Error| format!("truncated checkpoint: {e}");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err("bad checkpoint magic".into());
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let iteration = read_u64(&mut r).map_err(io)?;
        let seed = read_u64(&mut r).map_err(io)?;
        let optimizer_step = read_u64(&mut r).map_err(io)?;
        let config_json = read_string(&mut r).map_err(io)?;
        let count = read_u32(&mut r).map_err(io)?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name = read_string(&mut r).map_err(io)?;
            let t = mvtn::read_from(&mut r).map_err(|e| format!("{name}: {e}"))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Checkpoint {
            iteration,
            seed,
            optimizer_step,
            config_json,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::decode(&bytes).map_err(|d| Error::format(path, d))
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// torn checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }
}

fn read_u32(r: &mut &[u8]) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut &[u8]) -> std::io::Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
