//! Binary model checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic       8 bytes  "NCTRCKPT"
//! version     u32      currently 1
//! seed        u64
//! objective   u8       0 contrastive, 1 ce, 2 weighted_ce
//! n_layers    u32
//! per layer:  rows u32, cols u32, rows*cols f64 (row-major), rows f64 bias
//! head_w1:    rows u32, cols u32, rows*cols f64
//! head_w2:    rows u32, cols u32, rows*cols f64
//! has_logit   u8       0 or 1; if 1: len u32, len f64 weights, f64 bias
//! ```
//!
//! Reals are stored as raw bit patterns so a write/read cycle is exact.

use std::path::Path;

use crate::encoder::{DenseLayer, EncoderParams, LogitHead};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::Objective;

pub const MAGIC: &[u8; 8] = b"NCTRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub objective: Objective,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(16 + 8 * self.params.num_params()));
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.seed);
        w.0.push(self.objective.code());
        w.u32(self.params.layers.len() as u32);
        for l in &self.params.layers {
            w.matrix(&l.weight);
            w.reals(&l.bias);
        }
        w.matrix(&self.params.head_w1);
        w.matrix(&self.params.head_w2);
        match &self.params.logit_head {
            Some(lh) => {
                w.0.push(1);
                w.u32(lh.weight.len() as u32);
                w.reals(&lh.weight);
                w.reals(&[lh.bias]);
            }
            None => w.0.push(0),
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic; not a checkpoint".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let seed = r.u64()?;
        let code = r.u8()?;
        let objective =
            Objective::from_code(code).ok_or_else(|| format!("unknown objective code {code}"))?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let weight = r.matrix()?;
            let bias = r.reals(weight.rows())?;
            layers.push(DenseLayer { weight, bias });
        }
        let head_w1 = r.matrix()?;
        let head_w2 = r.matrix()?;
        let logit_head = match r.u8()? {
            0 => None,
            1 => {
                let len = r.u32()? as usize;
                let weight = r.reals(len)?;
                let bias = r.reals(1)?[0];
                Some(LogitHead { weight, bias })
            }
            other => return Err(format!("bad logit-head flag {other}")),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let params = EncoderParams::from_parts(layers, head_w1, head_w2, logit_head)
            .map_err(|e| e.to_string())?;
        Ok(Checkpoint {
            seed,
            objective,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn reals(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        self.reals(m.as_slice());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self) -> std::result::Result<Matrix, String> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.reals(rows.checked_mul(cols).ok_or("size overflow")?)?;
        Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
    }
}
