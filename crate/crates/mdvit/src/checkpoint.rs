//! Binary checkpoint format.
//!
//! A checkpoint is a single blob:
//!
//! ```text
//! magic "MDVT" | version u32 | config_len u64 | config JSON (ModelConfig)
//! | tensor_count u64 | tensors...
//! ```
//!
//! and each tensor is `name_len u64 | name UTF-8 | ndim u64 | dims u64...
//! | data f32 LE (row-major)`. All integers are little-endian. Training
//! checkpoints carry every parameter; inference checkpoints drop the
//! auxiliary peers, so their size is independent of the number of training
//! domains except for the M-row domain-embedding matrices inside each DA.

use crate::config::ModelConfig;
use crate::error::{MdvitError, Result};
use crate::model::Mdvit;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MDVT";
pub const VERSION: u32 = 1;

/// Which parameters a checkpoint retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointRole {
    /// Universal network + peers: everything the optimizer touches.
    Training,
    /// Universal network only; peers are discarded.
    Inference,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    /// Named tensors in registration order.
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    /// Snapshot a model's parameters.
    pub fn from_model<T: Scalar>(model: &Mdvit<T>, role: CheckpointRole) -> Self {
        let tensors = model
            .params
            .iter()
            .filter(|(_, p)| role == CheckpointRole::Training || !p.name.starts_with("peer"))
            .map(|(_, p)| {
                let v = p.value.mapv(|x| x.to_f64() as f32);
                (p.name.clone(), v)
            })
            .collect();
        Checkpoint {
            config: model.config.clone(),
            tensors,
        }
    }

    /// Total scalar count across all stored tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let std = t.as_standard_layout();
            let mut buf = Vec::with_capacity(std.len() * 4);
            for &v in std.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(MdvitError::checkpoint("bad magic bytes (not a checkpoint)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(MdvitError::checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let cfg_len = read_u64(r)? as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_buf)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_buf)?;
        let count = read_u64(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u64(r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| MdvitError::checkpoint("tensor name is not UTF-8"))?;
            let ndim = read_u64(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0u8; n * 4];
            r.read_exact(&mut data)?;
            let values: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = ArrayD::from_shape_vec(shape, values)
                .map_err(|e| MdvitError::checkpoint(format!("tensor '{name}': {e}")))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| {
            MdvitError::checkpoint(format!("cannot open '{}': {e}", path.display()))
        })?);
        Self::read_from(&mut r)
    }

    /// Rebuild a model from the snapshot. Inference checkpoints (no peer
    /// tensors) restore with `mkd_enabled` cleared so the parameter sets
    /// line up exactly; every stored tensor must match a model parameter in
    /// name and shape, and vice versa.
    pub fn restore<T: Scalar>(&self) -> Result<Mdvit<T>> {
        let mut config = self.config.clone();
        if !self.tensors.iter().any(|(n, _)| n.starts_with("peer")) {
            config.mkd_enabled = false;
        }
        let mut model: Mdvit<T> = Mdvit::new(&config, 0);
        let stored: BTreeMap<&str, &ArrayD<f32>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if stored.len() != self.tensors.len() {
            return Err(MdvitError::checkpoint("duplicate tensor names"));
        }
        if stored.len() != model.params.len() {
            return Err(MdvitError::checkpoint(format!(
                "checkpoint holds {} tensors but the config builds {} parameters",
                stored.len(),
                model.params.len()
            )));
        }
        for (_, p) in model.params.iter_mut() {
            let t = stored
                .get(p.name.as_str())
                .ok_or_else(|| MdvitError::checkpoint(format!("missing tensor '{}'", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(MdvitError::checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.mapv(|v| T::from_f64(v as f64));
        }
        Ok(model)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
