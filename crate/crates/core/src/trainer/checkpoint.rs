//! Binary checkpoint: `OCLP` magic, u16 LE version, u32 LE header length,
//! a JSON header, then every tensor as raw little-endian f64 values.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::OptimState;
use super::train::TrainConfig;
use crate::error::{OclipError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OCLP";
pub const FORMAT_VERSION: u16 = 1;

const PARAM: &str = "param:";
const ADAM_M: &str = "adam_m:";
const ADAM_V: &str = "adam_v:";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Number of completed optimizer steps.
    pub step: usize,
    pub rng_state: u64,
    pub params: ModelParams,
    pub optim: OptimState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    rng_state: u64,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let groups: [(&str, &[Tensor]); 3] = [
            (PARAM, self.params.tensors()),
            (ADAM_M, &self.optim.m),
            (ADAM_V, &self.optim.v),
        ];
        for (prefix, tensors) in groups {
            for (name, t) in self.params.names().iter().zip(tensors) {
                entries.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset: data.len(),
                });
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng_state: self.rng_state,
            adam_t: self.optim.t,
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| OclipError::Format("checkpoint header too large".into()))?;

        let mut out = Vec::with_capacity(10 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(OclipError::Format(
                "not an OCLP checkpoint (bad magic)".into(),
            ));
        }
        if bytes.len() < 10 {
            return Err(OclipError::Truncated("checkpoint preamble".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(OclipError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let data_start = 10 + header_len;
        if bytes.len() < data_start {
            return Err(OclipError::Truncated(format!(
                "header declares {header_len} bytes, {} available",
                bytes.len() - 10
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[10..data_start])?;
        header.model.validate()?;
        let data = &bytes[data_start..];

        let mut named: HashMap<String, Tensor> = HashMap::new();
        let mut end_of_data = 0;
        for entry in &header.tensors {
            let numel: usize = entry.shape.iter().product();
            let end = entry.offset + numel * 8;
            if end > data.len() {
                return Err(OclipError::Truncated(format!(
                    "tensor {} needs bytes {}..{end}, file has {}",
                    entry.name,
                    entry.offset,
                    data.len()
                )));
            }
            let values = data[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            named.insert(
                entry.name.clone(),
                Tensor::new(entry.shape.clone(), values)?,
            );
            end_of_data = end_of_data.max(end);
        }
        if end_of_data != data.len() {
            return Err(OclipError::Format(format!(
                "{} trailing bytes after tensor data",
                data.len() - end_of_data
            )));
        }

        let mut take = |prefix: &str| -> HashMap<String, Tensor> {
            let keys: Vec<String> = named
                .keys()
                .filter(|k| k.starts_with(prefix))
                .cloned()
                .collect();
            keys.into_iter()
                .map(|k| {
                    let t = named.remove(&k).unwrap();
                    (k[prefix.len()..].to_string(), t)
                })
                .collect()
        };
        let params = ModelParams::from_named(&header.model, take(PARAM))?;
        let m = ModelParams::from_named(&header.model, take(ADAM_M))?;
        let v = ModelParams::from_named(&header.model, take(ADAM_V))?;
        if let Some(extra) = named.keys().next() {
            return Err(OclipError::Format(format!("unknown tensor {extra}")));
        }
        Ok(Self {
            model: header.model,
            optim: OptimState {
                hyper: header.train.adam.clone(),
                t: header.adam_t,
                m: m.tensors().to_vec(),
                v: v.tensors().to_vec(),
            },
            train: header.train,
            step: header.step,
            rng_state: header.rng_state,
            params,
        })
    }

    /// Writes through a temporary sibling and renames, so an interrupted
    /// save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
