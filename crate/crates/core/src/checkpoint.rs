//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SABCKPT1"
//! u32 len, config TOML (UTF-8)
//! u64 step
//! u32 count, then per parameter:
//!     u32 len, name; u8 dtype (1 = f64); u32 ndim; u64 dims[ndim]; f64 data[prod(dims)]
//! u64 optimizer step t
//! u32 count, then per moment entry:
//!     u32 len, name; u64 n; f64 m[n]; f64 v[n]
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::GroundingModel;
use crate::nn::Parameters;
use crate::optim::{AdamWState, Moments};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SABCKPT1";
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: Vec<NamedArray>,
    pub optimizer: AdamWState,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, step: u64, model: &GroundingModel, optimizer: &AdamWState) -> Self {
        let params = model
            .named_parameters()
            .into_iter()
            .map(|(name, t)| NamedArray {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            config: config.clone(),
            step,
            params,
            optimizer: optimizer.clone(),
        }
    }

    /// Builds the configured model and installs the stored parameters.
    /// The stored names must match the model's exactly.
    pub fn restore_model(&self) -> Result<GroundingModel> {
        let mut model = GroundingModel::new(&self.config.model, self.config.seed)?;
        load_parameters(&mut model, &self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.str(&self.config.to_toml()?)?;
        w.u64(self.step);
        w.count(self.params.len())?;
        for p in &self.params {
            w.str(&p.name)?;
            w.0.push(DTYPE_F64);
            w.count(p.shape.len())?;
            p.shape.iter().for_each(|&d| w.u64(d as u64));
            w.f64s(&p.data);
        }
        w.u64(self.optimizer.t);
        w.count(self.optimizer.moments.len())?;
        for (name, mom) in &self.optimizer.moments {
            w.str(name)?;
            w.u64(mom.m.len() as u64);
            w.f64s(&mom.m);
            w.f64s(&mom.v);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let config = RunConfig::from_toml(&r.str()?)?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            params.push(NamedArray {
                name,
                shape,
                data: r.f64s(len)?,
            });
        }
        let mut optimizer = AdamWState {
            t: r.u64()?,
            ..AdamWState::default()
        };
        let n = r.u32()? as usize;
        for _ in 0..n {
            let name = r.str()?;
            let len = r.u64()? as usize;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            optimizer.moments.insert(name, Moments { m, v });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}

/// Replaces every parameter of `model` by the entry of the same name.
pub fn load_parameters(model: &mut dyn Parameters, params: &[NamedArray]) -> Result<()> {
    let expected: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    let stored: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
    if expected != stored {
        return Err(Error::Checkpoint(format!(
            "parameter names differ: model has {expected:?}, checkpoint has {stored:?}"
        )));
    }
    let mut err = None;
    let mut it = params.iter();
    model.visit_mut("", &mut |_, t| {
        let p = it.next().expect("lengths checked");
        if p.shape != t.shape() {
            err.get_or_insert(Error::Checkpoint(format!(
                "{}: stored shape {:?}, model expects {:?}",
                p.name,
                p.shape,
                t.shape()
            )));
            return;
        }
        match Tensor::parameter(p.data.clone(), &p.shape) {
            Ok(fresh) => *t = fresh,
            Err(e) => {
                err.get_or_insert(e);
            }
        }
    });
    err.map_or(Ok(()), Err)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn count(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("count {n} exceeds u32")))?;
        self.0.extend_from_slice(&n.to_le_bytes());
        Ok(())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.count(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid UTF-8 string at byte {at}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflows".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
