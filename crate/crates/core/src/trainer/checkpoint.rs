//! Binary checkpoint format.
//!
//! ```text
//! "SCN1"  u32 version  u32 header_len  header (JSON, header_len bytes)
//! payload: f32 LE parameters, then Adam m, then Adam v (manifest order)
//! u32 CRC32 of every preceding byte
//! ```
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor inside the parameter block of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    t: u64,
    config: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    params: Vec<ManifestEntry>,
    adam: AdamHeader,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train: TrainConfig,
    pub adam: AdamState<f32>,
}

fn corrupt(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Corrupt {
        field,
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.params;
        let mut params = Vec::with_capacity(store.len());
        let mut offset = 0;
        for (name, t) in store.iter() {
            params.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 4;
        }
        if self.adam.m.len() != store.len() || self.adam.v.len() != store.len() {
            return Err(Error::config("optimizer state does not mirror the parameters"));
        }
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            params,
            adam: AdamHeader {
                t: self.adam.t,
                config: self.adam.config,
            },
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::config(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 3 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for block in [store.tensors(), &self.adam.m[..], &self.adam.v[..]] {
            for t in block {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("magic", "file does not start with SCN1"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if bytes.len() < 16 {
            return Err(corrupt("length", format!("file is only {} bytes", bytes.len())));
        }
        let version = u32_at(4);
        if version != VERSION {
            return Err(corrupt(
                "version",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let header_len = u32_at(8) as usize;
        let body_end = bytes.len() - 4;
        if 12 + header_len > body_end {
            return Err(corrupt(
                "header_length",
                format!("header length {header_len} exceeds file size"),
            ));
        }
        let stored = u32_at(body_end);
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(corrupt("crc", format!("stored {stored:08x}, computed {actual:08x}")));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..12 + header_len]).map_err(|e| corrupt("header", e.to_string()))?;

        let payload = &bytes[12 + header_len..body_end];
        let count: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != 3 * count * 4 {
            return Err(corrupt(
                "payload",
                format!("expected {} payload bytes, found {}", 3 * count * 4, payload.len()),
            ));
        }
        let block = count * 4;
        let read_block = |base: usize| -> Result<Vec<Tensor<f32>>> {
            let mut expected = 0;
            header
                .params
                .iter()
                .map(|e| {
                    if e.offset != expected {
                        return Err(corrupt(
                            "manifest",
                            format!("{}: offset {} != {expected}", e.name, e.offset),
                        ));
                    }
                    let n: usize = e.shape.iter().product();
                    expected += n * 4;
                    let start = base + e.offset;
                    let data = payload[start..start + n * 4]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::new(&e.shape, data).map_err(|err| corrupt("manifest", err.to_string()))
                })
                .collect()
        };
        let tensors = read_block(0)?;
        let m = read_block(block)?;
        let v = read_block(2 * block)?;

        let mut model = Model::<f32>::build(header.model.clone(), 0).map_err(|e| corrupt("header", e.to_string()))?;
        let names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
        let stored: Vec<&str> = header.params.iter().map(|e| e.name.as_str()).collect();
        if names != stored {
            return Err(corrupt(
                "manifest",
                "parameter names do not match the model configuration",
            ));
        }
        model
            .params
            .load_tensors(tensors)
            .map_err(|e| corrupt("manifest", e.to_string()))?;
        Ok(Checkpoint {
            model,
            train: header.train,
            adam: AdamState {
                config: header.adam.config,
                t: header.adam.t,
                m,
                v,
            },
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(model: &Model<f32>, train: &TrainConfig, adam: &AdamState<f32>, path: &Path) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        train: train.clone(),
        adam: adam.clone(),
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            scales: 2,
            base_channels: 4,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::build(cfg, 3).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), model.params.tensors());
        adam.t = 7;
        adam.m[0].data_mut()[0] = 0.25;
        adam.v[1].data_mut()[0] = 1e-7;
        Checkpoint {
            model,
            train: TrainConfig::default(),
            adam,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = small();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = small().to_bytes().unwrap();
        let field = |b: &[u8]| match Checkpoint::from_bytes(b) {
            Err(Error::Corrupt { field, .. }) => field,
            other => panic!("expected corruption, got {other:?}"),
        };
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(field(&b), "magic");
        let mut b = bytes.clone();
        b[4] = 9;
        assert_eq!(field(&b), "version");
        let mut b = bytes.clone();
        let n = b.len();
        b[n - 10] ^= 0x01;
        assert_eq!(field(&b), "crc");
        assert_eq!(field(&bytes[..n - 1]), "crc");
    }
}
