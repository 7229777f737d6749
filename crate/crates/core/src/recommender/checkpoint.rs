//! Binary checkpoint: magic, version, a JSON header, then named f32 blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphFeatures, RecConfig, RecError, RecModel, Result};
use crate::numerics::{Matrix, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGRK";
pub const CHECKPOINT_VERSION: u16 = 1;

const FEATURE_USER: &str = "features.user";
const FEATURE_ITEM: &str = "features.item";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RecConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<(String, Matrix<f32>)>,
}

fn bad(msg: impl Into<String>) -> RecError {
    RecError::Checkpoint(msg.into())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| bad(format!("{what} too large")))
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &RecModel<T>) -> Self {
        let mut blobs: Vec<(String, Matrix<f32>)> =
            model.params().into_iter().map(|p| (p.name.clone(), p.value.cast())).collect();
        if let Some(f) = model.features() {
            blobs.push((FEATURE_USER.into(), f.user.cast()));
            blobs.push((FEATURE_ITEM.into(), f.item.cast()));
        }
        Self {
            header: CheckpointHeader {
                config: model.config.clone(),
                n_users: model.n_users,
                n_items: model.n_items(),
                max_len: model.max_len,
            },
            blobs,
        }
    }

    /// Copies every parameter into `model`, which must have been built from
    /// the same header (and graph, when graph features are on).
    pub fn restore_into<T: Scalar>(&self, model: &mut RecModel<T>) -> Result<()> {
        let h = &self.header;
        if h.config != model.config || h.n_users != model.n_users || h.n_items != model.n_items() || h.max_len != model.max_len {
            return Err(bad("checkpoint header does not match the model"));
        }
        let mut blobs = self.blobs.iter();
        for p in model.params_mut() {
            let (name, value) = blobs.next().ok_or_else(|| bad(format!("missing parameter {}", p.name)))?;
            if *name != p.name || value.shape() != p.value.shape() {
                return Err(bad(format!(
                    "expected {} {:?}, found {name} {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value.cast();
            p.zero_grad();
        }
        let rest: Vec<_> = blobs.collect();
        let features = match rest.as_slice() {
            [] => None,
            [(u, fu), (i, fi)] if u == FEATURE_USER && i == FEATURE_ITEM && model.uses_graph() => Some(GraphFeatures {
                user: fu.cast(),
                item: fi.cast(),
            }),
            _ => return Err(bad("unexpected trailing blobs")),
        };
        model.set_features(features);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&u32_len(header.len(), "header")?.to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&u32_len(self.blobs.len(), "blob count")?.to_le_bytes())?;
        for (name, m) in &self.blobs {
            let n = u16::try_from(name.len()).map_err(|_| bad("parameter name too long"))?;
            w.write_all(&n.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_len(m.rows(), "rows")?.to_le_bytes())?;
            w.write_all(&u32_len(m.cols(), "cols")?.to_le_bytes())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u16(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let count = read_u32(&mut r)?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let n = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let total = rows.checked_mul(cols).ok_or_else(|| bad("blob too large"))?;
            let mut bytes = vec![0u8; total * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blobs.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(bad("trailing bytes after the last blob"));
        }
        Ok(Self { header, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn write_checkpoint<T: Scalar>(model: &RecModel<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
