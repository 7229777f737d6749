//! RQVQ model files and assignment TSV export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FactorAssignment, QuantizerConfig, QuantizerError, QuantizerModel, Result};
use crate::numerics::{Activation, Linear, Matrix, Mlp, Parameter};

pub const RQVQ_MAGIC: &[u8; 4] = b"RQVQ";
pub const RQVQ_VERSION: u16 = 1;

fn fmt_err(m: impl Into<String>) -> QuantizerError {
    QuantizerError::Format(m.into())
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| fmt_err(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix<f32>) -> Result<()> {
    write_u32(w, m.rows())?;
    write_u32(w, m.cols())?;
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => fmt_err("truncated file"),
        _ => QuantizerError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix<f32>> {
    let rows = read_u32(r)?;
    let cols = read_u32(r)?;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l <= 1 << 30)
        .ok_or_else(|| fmt_err(format!("implausible matrix shape {rows}x{cols}")))?;
    let mut bytes = vec![0u8; len * 4];
    read_exact(r, &mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp<f32>) -> Result<()> {
    write_u32(w, mlp.layers.len())?;
    for l in &mlp.layers {
        write_matrix(w, &l.weight.value)?;
        write_matrix(w, &l.bias.value)?;
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R, name: &str) -> Result<Mlp<f32>> {
    let n = read_u32(r)?;
    if n == 0 || n > 64 {
        return Err(fmt_err(format!("{name}: implausible layer count {n}")));
    }
    let layers = (0..n)
        .map(|i| {
            let w = read_matrix(r)?;
            let b = read_matrix(r)?;
            if b.rows() != 1 || b.cols() != w.cols() {
                return Err(fmt_err(format!("{name}.{i}: bias shape mismatch")));
            }
            Ok(Linear::from_parts(&format!("{name}.{i}"), w, b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Mlp::from_layers(layers, Activation::Relu, Activation::Identity)?)
}

impl QuantizerModel<f32> {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(RQVQ_MAGIC)?;
        w.write_all(&RQVQ_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| fmt_err(e.to_string()))?;
        write_u32(&mut w, cfg.len())?;
        w.write_all(&cfg)?;
        write_u32(&mut w, self.input_dim)?;
        write_mlp(&mut w, &self.encoder)?;
        write_mlp(&mut w, &self.decoder)?;
        write_u32(&mut w, self.codebooks.len())?;
        for cb in &self.codebooks {
            write_matrix(&mut w, &cb.value)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != RQVQ_MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let mut v = [0u8; 2];
        read_exact(&mut r, &mut v)?;
        let version = u16::from_le_bytes(v);
        if version != RQVQ_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let cfg_len = read_u32(&mut r)?;
        if cfg_len > 1 << 20 {
            return Err(fmt_err("config block too large"));
        }
        let mut cfg = vec![0u8; cfg_len];
        read_exact(&mut r, &mut cfg)?;
        let config: QuantizerConfig = serde_json::from_slice(&cfg).map_err(|e| fmt_err(format!("config: {e}")))?;
        config.validate()?;
        let input_dim = read_u32(&mut r)?;
        let encoder = read_mlp(&mut r, "encoder")?;
        let decoder = read_mlp(&mut r, "decoder")?;
        let levels = read_u32(&mut r)?;
        if levels != config.levels {
            return Err(fmt_err(format!("{levels} codebooks, config says {}", config.levels)));
        }
        let codebooks = (0..levels)
            .map(|t| Ok(Parameter::new(format!("codebook.{t}"), read_matrix(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(fmt_err("trailing bytes"));
        }
        if encoder.in_dim() != input_dim
            || decoder.out_dim() != input_dim
            || encoder.out_dim() != config.code_dim
            || decoder.in_dim() != config.code_dim
            || codebooks
                .iter()
                .any(|c| c.value.cols() != config.code_dim || c.value.rows() < 2)
        {
            return Err(fmt_err("layer shapes disagree with config"));
        }
        Ok(Self {
            config,
            input_dim,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// One line per entity: `id \t m1 \t … \t mT`.
pub fn write_assignments<W: Write>(mut w: W, assignments: &[FactorAssignment]) -> Result<()> {
    for a in assignments {
        write!(w, "{}", a.entity)?;
        for m in &a.indices {
            write!(w, "\t{m}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments<R: Read>(r: R) -> Result<Vec<FactorAssignment>> {
    let mut out = Vec::new();
    let mut levels = None;
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let parse_err = |what: &str| fmt_err(format!("line {}: bad {what}", n + 1));
        let entity = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| parse_err("entity id"))?;
        let indices = fields
            .map(|f| f.trim().parse::<u32>().map_err(|_| parse_err("index")))
            .collect::<Result<Vec<_>>>()?;
        if indices.is_empty() || *levels.get_or_insert(indices.len()) != indices.len() {
            return Err(parse_err("level count"));
        }
        out.push(FactorAssignment { entity, indices });
    }
    Ok(out)
}
