//! Binary checkpoint format.
//!
//! ```text
//! "PFCK"                       magic
//! u32  version                 (1)
//! u32  L, K, n_layers, n_heads, ffn_dim, n_outputs
//! u8   positional
//! u64  model step
//! u32  tensor count, then per tensor:
//!      u32 ndim, u32 dims[ndim], f32 data[prod(dims)]
//! u8   has optimizer; if 1:
//!      f64 lr, beta1, beta2, eps; u64 step;
//!      first moments then second moments, same tensor layout
//! ```
//!
//! All integers and floats are little-endian; tensors follow
//! `ModelConfig::param_specs` order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::encode::GridShape;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::nn::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: Option<AdamState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let c = &m.config;
        let mut out = Vec::with_capacity(64 + 4 * m.param_count() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            c.grid.len,
            c.grid.dim,
            c.n_layers,
            c.n_heads,
            c.ffn_dim,
            c.n_outputs,
        ] {
            put_u32(&mut out, v)?;
        }
        out.push(c.positional as u8);
        out.extend_from_slice(&m.step.to_le_bytes());
        put_u32(&mut out, m.params.len())?;
        for t in &m.params {
            put_tensor(&mut out, t)?;
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let AdamConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } = opt.config;
                for v in [lr, beta1, beta2, eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&opt.step.to_le_bytes());
                for t in opt.m.iter().chain(&opt.v) {
                    put_tensor(&mut out, t)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing PFCK magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let positional = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(bad(format!("bad positional flag {other}"))),
        };
        let config = ModelConfig {
            grid: GridShape {
                len: dims[0],
                dim: dims[1],
            },
            n_layers: dims[2],
            n_heads: dims[3],
            ffn_dim: dims[4],
            n_outputs: dims[5],
            positional,
        };
        config
            .validate()
            .map_err(|e| bad(format!("invalid config block: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let params = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let model = ModelState {
            config,
            params,
            step,
        };
        model.validate().map_err(|e| bad(e.to_string()))?;

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let step = r.u64()?;
                let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                for (p, (a, b)) in model.params.iter().zip(m.iter().zip(&v)) {
                    if p.shape() != a.shape() || p.shape() != b.shape() {
                        return Err(bad("optimizer moment shapes do not match parameters"));
                    }
                }
                Some(AdamState { config, step, m, v })
            }
            other => return Err(bad(format!("bad optimizer flag {other}"))),
        };
        if r.at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("pfck.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(bad("truncated checkpoint"));
        };
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(bad(format!("tensor rank {ndim} is implausible")));
        }
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
    }
}
