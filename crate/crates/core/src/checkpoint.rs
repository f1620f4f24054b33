//! Checkpoint container.
//!
//! Layout: the 4-byte magic `NZCK`, a little-endian `u64` header length, a
//! UTF-8 JSON header, then every tensor's `f64` values little-endian in
//! header order. The header carries the schema tag, the model config, the
//! step counter, the optimizer step counts, the free-form run config and a
//! tensor table of `{group, name, shape}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RefinerConfig, RefinerState};
use crate::optim::{Adam, AdamConfig};
use crate::params::Params;

pub const MAGIC: &[u8; 4] = b"NZCK";
pub const SCHEMA: &str = "nz-checkpoint/1";

const GROUPS: [&str; 7] = ["refiner", "ema", "discriminator", "opt_refiner.m", "opt_refiner.v", "opt_disc.m", "opt_disc.v"];

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    model: RefinerConfig,
    step: u64,
    adam: Option<AdamRecord>,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct AdamRecord {
    refiner: (AdamConfig, u64),
    disc: (AdamConfig, u64),
}

/// Optimizer state stored next to the model for resumption.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub refiner: Adam,
    pub disc: Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: RefinerState,
    pub optim: Option<OptimizerState>,
    /// Fully resolved run configuration, echoed verbatim.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut groups: Vec<(&str, &Params)> = vec![("refiner", &s.refiner), ("ema", &s.ema), ("discriminator", &s.discriminator)];
        if let Some(o) = &self.optim {
            groups.extend([
                ("opt_refiner.m", &o.refiner.m),
                ("opt_refiner.v", &o.refiner.v),
                ("opt_disc.m", &o.disc.m),
                ("opt_disc.v", &o.disc.v),
            ]);
        }
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (group, params) in &groups {
            for (name, a) in params.iter() {
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                });
                data.extend(a.data().iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let header = Header {
            schema: SCHEMA.into(),
            model: s.config,
            step: s.step,
            adam: self.optim.as_ref().map(|o| AdamRecord {
                refiner: (o.refiner.config, o.refiner.t),
                disc: (o.disc.config, o.disc.t),
            }),
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.schema != SCHEMA {
            return Err(Error::Checkpoint(format!("schema `{}` is not `{SCHEMA}`", header.schema)));
        }
        let mut cursor = 12 + hlen;
        let mut groups: Vec<Params> = vec![Params::new(); GROUPS.len()];
        for t in &header.tensors {
            let gi = GROUPS
                .iter()
                .position(|g| *g == t.group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group `{}`", t.group)))?;
            let n: usize = t.shape.iter().product();
            let raw = bytes.get(cursor..cursor + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            cursor += 8 * n;
            let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let a = nz_autograd::Array::from_vec(&t.shape, vals).map_err(|e| Error::Checkpoint(e.to_string()))?;
            groups[gi].insert(t.name.clone(), a);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let mut it = groups.into_iter();
        let mut next = || it.next().unwrap();
        let state = RefinerState {
            config: header.model,
            refiner: next(),
            ema: next(),
            discriminator: next(),
            step: header.step,
        };
        state.validate()?;
        let optim = match header.adam {
            Some(rec) => {
                let refiner = Adam {
                    config: rec.refiner.0,
                    m: next(),
                    v: next(),
                    t: rec.refiner.1,
                };
                let disc = Adam {
                    config: rec.disc.0,
                    m: next(),
                    v: next(),
                    t: rec.disc.1,
                };
                for (o, p, what) in [(&refiner, &state.refiner, "refiner optimizer"), (&disc, &state.discriminator, "discriminator optimizer")] {
                    o.m.ensure_same_layout(p, what)?;
                    o.v.ensure_same_layout(p, what)?;
                }
                Some(OptimizerState { refiner, disc })
            }
            None => None,
        };
        Ok(Self {
            state,
            optim,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
