//! Checkpoint persistence and averaging.
//!
//! Wire format, little-endian throughout:
//! magic `DLCL` | version u16 | config hash (32 bytes) | entry count u32 |
//! entries of { name_len u32, name bytes, rank u32, dims u64 each, f64
//! payload }. The training step travels as a reserved leading entry named
//! `meta.step` of shape `[1]`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::numel;

const MAGIC: &[u8; 4] = b"DLCL";
const VERSION: u16 = 1;
const STEP_ENTRY: &str = "meta.step";

/// Named parameter arrays plus the step and config hash they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config_hash: [u8; 32],
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshots a model's parameters in registry order.
    pub fn from_model(model: &TransformerModel, step: usize) -> Self {
        let entries = model
            .store
            .iter()
            .map(|p| (p.name().to_string(), p.shape().to_vec(), p.value().clone()))
            .collect();
        Checkpoint {
            step,
            config_hash: model.cfg.hash(),
            entries,
        }
    }

    /// Restores parameter values into a model with a matching config hash.
    pub fn apply_to(&self, model: &TransformerModel) -> Result<()> {
        if self.config_hash != model.cfg.hash() {
            return Err(Error::Checkpoint {
                path: PathBuf::new(),
                reason: "config hash mismatch".into(),
            });
        }
        for (name, shape, data) in &self.entries {
            let p = model.store.get(name).ok_or_else(|| Error::Checkpoint {
                path: PathBuf::new(),
                reason: format!("parameter {name} missing from model"),
            })?;
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint {
                    path: PathBuf::new(),
                    reason: format!("shape mismatch on {name}"),
                });
            }
            p.set_value(data.clone());
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.entries.iter().find(|(n, _, _)| n == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config_hash);
        let count = (self.entries.len() + 1) as u32;
        buf.extend_from_slice(&count.to_le_bytes());
        write_entry(&mut buf, STEP_ENTRY, &[1], &[self.step as f64]);
        for (name, shape, data) in &self.entries {
            write_entry(&mut buf, name, shape, data);
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let count = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let mut step = 0usize;
        let mut entries = Vec::with_capacity(count.saturating_sub(1));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| err("bad name"))?;
            let rank = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n = numel(&shape);
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            if name == STEP_ENTRY {
                step = data.first().copied().unwrap_or(0.0) as usize;
            } else {
                entries.push((name, shape, data));
            }
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Checkpoint {
            step,
            config_hash,
            entries,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: PathBuf::new(),
                reason: "truncated file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn write_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Arithmetic mean per named array across checkpoints with identical config
/// hashes; the step becomes the maximum input step.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints.first().ok_or(Error::NoMicroBatches)?;
    let k = checkpoints.len() as f64;
    for c in checkpoints {
        if c.config_hash != first.config_hash {
            return Err(Error::Checkpoint {
                path: PathBuf::new(),
                reason: "config hash mismatch across checkpoints".into(),
            });
        }
    }
    let mut entries = Vec::with_capacity(first.entries.len());
    for (name, shape, data) in &first.entries {
        let mut acc = data.clone();
        for c in &checkpoints[1..] {
            let (_, other_shape, other) = c.get(name).ok_or_else(|| Error::Checkpoint {
                path: PathBuf::new(),
                reason: format!("array {name} missing from a checkpoint"),
            })?;
            if other_shape != shape {
                return Err(Error::Checkpoint {
                    path: PathBuf::new(),
                    reason: format!("shape mismatch on {name}"),
                });
            }
            for (a, &v) in acc.iter_mut().zip(other) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= k;
        }
        entries.push((name.clone(), shape.clone(), acc));
    }
    Ok(Checkpoint {
        step: checkpoints.iter().map(|c| c.step).max().expect("non-empty"),
        config_hash: first.config_hash,
        entries,
    })
}

/// Loads and averages checkpoint files.
pub fn average_checkpoint_files(paths: &[PathBuf]) -> Result<Checkpoint> {
    let loaded: Result<Vec<Checkpoint>> = paths.iter().map(|p| Checkpoint::load(p)).collect();
    average_checkpoints(&loaded?)
}
