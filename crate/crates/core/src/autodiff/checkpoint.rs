//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  b"DYNHEAD\0"
//! version    u32      = 1
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! step       u64      optimizer step count
//! n_params   u32      followed by n_params tensor records
//! n_moment   u32      followed by n_moment tensor records (momentum buffers)
//!
//! record:
//!   name_len u32, name bytes (UTF-8)
//!   dims     4 x u64 (N, C, H, W)
//!   payload  N*C*H*W x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DYNHEAD\0";
pub const VERSION: u32 = 1;

/// Parameters, optimizer state and free-form metadata (the run config).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub step: u64,
    pub params: ParameterSet,
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    for d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
}

fn read_record<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let nl = read_u32(r)? as usize;
    let name = read_string(r, nl)?;
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = read_u64(r)? as usize;
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.filter(|&n| n < (1 << 32)).ok_or_else(|| Error::Format(format!("implausible shape {shape:?}")))?;
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((name, t))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_record(w, name, t)?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.momentum_iter() {
            write_record(w, name, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let ml = read_u32(r)? as usize;
        let meta = read_string(r, ml)?;
        let step = read_u64(r)?;
        let mut params = ParameterSet::new();
        for _ in 0..read_u32(r)? {
            let (name, t) = read_record(r)?;
            params.insert(name, t)?;
        }
        for _ in 0..read_u32(r)? {
            let (name, t) = read_record(r)?;
            params
                .set_momentum(&name, t)
                .map_err(|e| Error::Format(format!("momentum record: {e}")))?;
        }
        Ok(Checkpoint { meta, step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
