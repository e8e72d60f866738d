//! Binary checkpoints. The byte layout is described in
//! `docs/checkpoint.md`; all integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::optim::AdamState;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::model::ModelConfig;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"M2UN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Optimizer steps completed.
    pub step: u64,
    pub params: ParamSet<f32>,
    pub optim: Option<AdamState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, set: &ParamSet<f32>) {
    put_u32(out, set.len());
    for (name, t) in set.iter() {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank());
        for &d in t.shape() {
            put_u32(out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte offset {} while reading {what}", self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|e| Error::Format(format!("{what}: {e}")))
    }

    fn tensors(&mut self) -> Result<ParamSet<f32>> {
        let count = self.u32("tensor count")?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name = self.string("tensor name")?;
            let rank = self.u32("rank")?;
            let shape = (0..rank).map(|_| self.u32("extent")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                Error::Format(format!("tensor `{name}` has an oversized shape {shape:?}"))
            })?;
            let raw = self.take(numel.saturating_mul(4), "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            if set.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(set)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.to_kv().to_text();
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_tensors(&mut out, &self.params);
        match &self.optim {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                for h in [s.beta1, s.beta2, s.eps] {
                    out.extend_from_slice(&h.to_le_bytes());
                }
                put_tensors(&mut out, &s.m);
                put_tensors(&mut out, &s.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64("step")?;
        let config = ModelConfig::from_kv(&KvConfig::parse(&r.string("config")?)?)?;
        let params = r.tensors()?;
        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let (beta1, beta2, eps) = (r.f64("beta1")?, r.f64("beta2")?, r.f64("eps")?);
                let m = r.tensors()?;
                let v = r.tensors()?;
                Some(AdamState { step, beta1, beta2, eps, m, v })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, step, params, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
