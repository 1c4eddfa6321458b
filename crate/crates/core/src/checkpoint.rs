//! Checkpoint files: parameters, optimizer moments and the training RNG position.
//!
//! Layout (little endian):
//!
//! | field      | size                 |
//! |------------|----------------------|
//! | magic      | 4 bytes, `FMCK`      |
//! | version    | u16                  |
//! | header len | u32                  |
//! | header     | JSON [`CkptHeader`]  |
//! | payload    | f64 values           |
//! | crc32      | u32 over all above   |
//!
//! The payload holds, per section, every parameter tensor in store order,
//! followed by the first and second optimizer moments when present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimMeta {
    config: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SectionMeta {
    role: String,
    arch_hash: String,
    params: Vec<TensorMeta>,
    optimizer: Option<OptimMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CkptHeader {
    kind: String,
    step: u64,
    rng: RngState,
    config_hash: String,
    sections: Vec<SectionMeta>,
}

/// One model's parameters and, for trainable models, its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub role: String,
    pub arch_hash: String,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamW>,
}

impl Section {
    pub fn new(role: &str, arch_hash: &str, store: &ParamStore, optimizer: Option<&AdamW>) -> Self {
        Section {
            role: role.to_string(),
            arch_hash: arch_hash.to_string(),
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Load parameters into `store` after checking the architecture hash.
    pub fn restore(&self, expected_arch: &str, store: &mut ParamStore) -> Result<()> {
        if self.arch_hash != expected_arch {
            return Err(Error::Checkpoint {
                expected: expected_arch.to_string(),
                found: self.arch_hash.clone(),
            });
        }
        store.load(self.params.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `vae`, `fmt` or `finetune`.
    pub kind: String,
    /// Number of optimizer steps completed.
    pub step: u64,
    pub rng: RngState,
    pub config_hash: String,
    pub sections: Vec<Section>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn section(&self, role: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.role == role)
            .ok_or_else(|| Error::contract(format!("checkpoint has no '{role}' section")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CkptHeader {
            kind: self.kind.clone(),
            step: self.step,
            rng: self.rng,
            config_hash: self.config_hash.clone(),
            sections: self
                .sections
                .iter()
                .map(|s| SectionMeta {
                    role: s.role.clone(),
                    arch_hash: s.arch_hash.clone(),
                    params: s
                        .params
                        .iter()
                        .map(|(n, t)| TensorMeta {
                            name: n.clone(),
                            shape: t.shape().to_vec(),
                        })
                        .collect(),
                    optimizer: s.optimizer.as_ref().map(|o| OptimMeta {
                        config: o.config,
                        step: o.step,
                    }),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |vals: &[f64]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for s in &self.sections {
            for (_, t) in &s.params {
                put(t.data());
            }
            if let Some(o) = &s.optimizer {
                if o.m.len() != s.params.len() || o.v.len() != s.params.len() {
                    return Err(Error::contract("optimizer moments do not match parameters"));
                }
                for (m, (_, t)) in o.m.iter().zip(&s.params) {
                    if m.len() != t.numel() {
                        return Err(Error::contract("optimizer moments do not match parameters"));
                    }
                    put(m);
                }
                for v in &o.v {
                    put(v);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 {
            return Err(corrupt("checkpoint truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad checkpoint magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checkpoint checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 6 };
        let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let header: CkptHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| corrupt(format!("checkpoint header: {e}")))?;
        let mut sections = Vec::with_capacity(header.sections.len());
        for meta in header.sections {
            let mut params = Vec::with_capacity(meta.params.len());
            for tm in &meta.params {
                let n = tm.shape.iter().product();
                params.push((tm.name.clone(), Tensor::new(tm.shape.clone(), r.f64s(n)?)?));
            }
            let optimizer = match meta.optimizer {
                Some(om) => {
                    let read_moments = |r: &mut Reader| -> Result<Vec<Vec<f64>>> {
                        params.iter().map(|(_, t)| r.f64s(t.numel())).collect()
                    };
                    let m = read_moments(&mut r)?;
                    let v = read_moments(&mut r)?;
                    Some(AdamW {
                        config: om.config,
                        step: om.step,
                        m,
                        v,
                    })
                }
                None => None,
            };
            sections.push(Section {
                role: meta.role,
                arch_hash: meta.arch_hash,
                params,
                optimizer,
            });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes in checkpoint"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            step: header.step,
            rng: header.rng,
            config_hash: header.config_hash,
            sections,
        })
    }

    /// Write via a temporary file and rename so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
