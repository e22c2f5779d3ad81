use std::path::Path;

use super::optim::AdamState;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained state after `step` completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: [u8; 32],
    pub params: ParamStore,
    pub adam: AdamState,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    /// Layout: magic, `u32` version, `u64` step, 32-byte config hash, `u32`
    /// parameter count, then per parameter `u32` name length, name bytes,
    /// `u8` requires-grad flag, `u32` rank, `u64` dims, `f64` values; then the
    /// Adam step count, betas, epsilon, and both moment arrays in parameter order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u64(&mut buf, self.step);
        buf.extend_from_slice(&self.config_hash);
        put_u32(&mut buf, self.params.len() as u32);
        for (_, p) in self.params.iter() {
            put_u32(&mut buf, p.name.len() as u32);
            buf.extend_from_slice(p.name.as_bytes());
            buf.push(p.requires_grad as u8);
            put_u32(&mut buf, p.value.shape().len() as u32);
            for &d in p.value.shape() {
                put_u64(&mut buf, d as u64);
            }
            put_f64s(&mut buf, p.value.data());
        }
        put_u64(&mut buf, self.adam.t);
        put_f64s(&mut buf, &[self.adam.beta1, self.adam.beta2, self.adam.eps]);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_f64s(&mut buf, m);
            put_f64s(&mut buf, v);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let step = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "parameter name is not UTF-8")?;
            let requires_grad = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape.iter().product();
            let value = Tensor::new(shape, r.f64s(n)?).map_err(|e| e.to_string())?;
            let id = params.add(name, value).map_err(|e| e.to_string())?;
            params.set_requires_grad(id, requires_grad);
        }
        let t = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for (_, p) in params.iter() {
            let n = p.value.numel();
            m.push(r.f64s(n)?);
            v.push(r.f64s(n)?);
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        Ok(Checkpoint { step, config_hash, params, adam: AdamState { beta1, beta2, eps, t, m, v } })
    }

    /// Writes through a temporary file and a rename, so a crash never leaves
    /// a torn checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }

    /// Copies the stored values into `store`, which must hold the same names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.names() != self.params.names() {
            return Err(Error::config("checkpoint parameters do not match the configured model"));
        }
        for (id, p) in self.params.iter() {
            store.set_value(id, p.value.clone())?;
        }
        Ok(())
    }
}
