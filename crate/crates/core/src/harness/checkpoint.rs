//! `.mvar` checkpoints: magic, version, JSON header, raw `f32` tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{model_from_kv, model_to_kv, KeyValues};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Mat;
use crate::tokenizer::{Codebook, PatchLift, Tokenizer};

const MAGIC: &[u8; 4] = b"MVAR";
const VERSION: u32 = 1;
const LIFT: &str = "tokenizer.lift";
const CODEBOOK: &str = "tokenizer.codebook";

#[derive(Serialize, Deserialize)]
struct Header {
    config: KeyValues,
    step: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    /// Byte offset from the start of the tensor data.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ModelParams<f32>,
    pub step: u64,
}

impl Checkpoint {
    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, Mat<f32>)> = vec![
            (LIFT.into(), self.tokenizer.lift.matrix().clone()),
            (CODEBOOK.into(), self.tokenizer.codebook.as_mat()),
        ];
        named.extend(self.params.tensors().into_iter().map(|(n, m)| (n, m.clone())));
        let mut data = Vec::new();
        let mut tensors = Vec::with_capacity(named.len());
        for (name, m) in &named {
            tensors.push(Entry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                offset: data.len(),
            });
            for v in m.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut config = model_to_kv(&self.config);
        config.insert("patch".into(), self.tokenizer.lift.patch().to_string());
        config.insert("vq_dim".into(), self.tokenizer.lift.dim().to_string());
        let header = serde_json::to_vec(&Header {
            config,
            step: self.step,
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing MVAR magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header runs past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| bad(format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors: BTreeMap<String, Mat<f32>> = BTreeMap::new();
        let mut expected_len = 0;
        for e in &header.tensors {
            let n = e.shape[0] * e.shape[1];
            let end = e
                .offset
                .checked_add(4 * n)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| bad(format!("tensor {} runs past end of file", e.name)))?;
            let vals = data[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], vals)?);
            expected_len = expected_len.max(end);
        }
        if expected_len != data.len() {
            return Err(bad(format!(
                "{} trailing bytes after tensor data",
                data.len() - expected_len
            )));
        }
        let config = model_from_kv(&header.config)?;
        let field = |k: &str| -> Result<usize> {
            header
                .config
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("config echo lacks `{k}`")))
        };
        let patch = field("patch")?;
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let lift = PatchLift::from_mat(patch, take(LIFT)?)?;
        let cb = take(CODEBOOK)?;
        let codebook = Codebook::new(cb.cols(), cb.into_vec())?;
        let mut params = ModelParams::<f32>::init(&config)?;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let m = take(name)?;
            if m.shape() != slot.shape() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        if lift.dim() != field("vq_dim")? || codebook.dim() != lift.dim() {
            return Err(bad("tokenizer widths disagree with the config echo".into()));
        }
        if codebook.size() != config.vocab {
            return Err(bad(format!(
                "codebook has {} entries, vocab is {}",
                codebook.size(),
                config.vocab
            )));
        }
        Ok(Checkpoint {
            tokenizer: Tokenizer {
                schedule: config.schedule.clone(),
                lift,
                codebook,
            },
            config,
            params,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and rejects a checkpoint whose model config differs from
    /// `expected`, naming every differing field.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let have = model_to_kv(&ck.config);
        let want = model_to_kv(expected);
        let diffs: Vec<String> = want
            .iter()
            .filter(|(k, v)| have.get(*k) != Some(v))
            .map(|(k, v)| {
                format!(
                    "`{k}`: checkpoint has {}, config expects {v}",
                    have.get(k).map_or("nothing", String::as_str)
                )
            })
            .collect();
        if !diffs.is_empty() {
            return Err(Error::CheckpointMismatch(format!(
                "{}: {}",
                path.display(),
                diffs.join("; ")
            )));
        }
        Ok(ck)
    }
}
