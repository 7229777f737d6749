//! `SEMV` binary and JSONL embedding files.
//!
//! Binary layout, all little-endian:
//! `"SEMV" | version u16 = 1 | dim u32 | count u64 | count × (id u64, dim × f32)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SemanticError, SemanticVector};

pub const SEMV_MAGIC: &[u8; 4] = b"SEMV";
pub const SEMV_VERSION: u16 = 1;

/// Vectors of one provider run keyed by entity id; all share `dim`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub vectors: BTreeMap<u64, Vec<f32>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, v: SemanticVector) -> Result<(), SemanticError> {
        if v.values.len() != self.dim {
            return Err(SemanticError::Dimension {
                expected: self.dim,
                found: v.values.len(),
            });
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(SemanticError::Format(format!("vector {} has non-finite entries", v.id)));
        }
        self.vectors.insert(v.id, v.values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = SemanticVector> + '_ {
        self.vectors.iter().map(|(&id, v)| SemanticVector {
            id,
            values: v.clone(),
        })
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(SEMV_MAGIC)?;
        w.write_all(&SEMV_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.vectors.len() as u64).to_le_bytes())?;
        for (id, v) in &self.vectors {
            w.write_all(&id.to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<(), SemanticError> {
        let f = File::create(path).map_err(|e| SemanticError::io(path, e))?;
        self.write_binary(BufWriter::new(f))
            .map_err(|e| SemanticError::io(path, e))
    }

    /// Reads a `SEMV` stream, requiring `expected_dim` when given.
    pub fn read_binary<R: Read>(mut r: R, expected_dim: Option<usize>) -> Result<Self, SemanticError> {
        let truncated = |what: &str| SemanticError::Format(format!("truncated file: missing {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != SEMV_MAGIC {
            return Err(SemanticError::Format(format!("bad magic {magic:?}, expected \"SEMV\"")));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(|_| truncated("version"))?;
        let version = u16::from_le_bytes(b2);
        if version != SEMV_VERSION {
            return Err(SemanticError::Format(format!(
                "unsupported SEMV version {version}, expected {SEMV_VERSION}"
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| truncated("dim"))?;
        let dim = u32::from_le_bytes(b4) as usize;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(SemanticError::Dimension {
                    expected,
                    found: dim,
                });
            }
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| truncated("count"))?;
        let count = u64::from_le_bytes(b8);
        let mut set = Self::new(dim);
        let mut buf = vec![0u8; dim * 4];
        for k in 0..count {
            r.read_exact(&mut b8)
                .map_err(|_| truncated(&format!("record {k} of {count}")))?;
            let id = u64::from_le_bytes(b8);
            r.read_exact(&mut buf)
                .map_err(|_| truncated(&format!("record {k} of {count}")))?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if set.vectors.contains_key(&id) {
                return Err(SemanticError::Format(format!("duplicate id {id}")));
            }
            set.insert(SemanticVector { id, values })?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| SemanticError::Format(e.to_string()))? != 0 {
            return Err(SemanticError::Format("trailing bytes after last record".into()));
        }
        Ok(set)
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self, SemanticError> {
        let f = File::open(path).map_err(|e| SemanticError::io(path, e))?;
        Self::read_binary(BufReader::new(f), expected_dim)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (&id, v) in &self.vectors {
            let line = serde_json::to_string(&JsonlRecord { id, v: v.clone() })?;
            writeln!(w, "{line}")?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: Read>(r: R, expected_dim: Option<usize>) -> Result<Self, SemanticError> {
        let mut set: Option<Self> = None;
        for (n, line) in BufReader::new(r).lines().enumerate() {
            let line = line.map_err(|e| SemanticError::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line)
                .map_err(|e| SemanticError::Format(format!("line {}: {e}", n + 1)))?;
            let s = set.get_or_insert_with(|| Self::new(expected_dim.unwrap_or(rec.v.len())));
            s.insert(SemanticVector {
                id: rec.id,
                values: rec.v,
            })?;
        }
        Ok(set.unwrap_or_else(|| Self::new(expected_dim.unwrap_or(0))))
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    id: u64,
    v: Vec<f32>,
}
