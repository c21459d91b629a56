//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EMNETCKP"
//! version  u32
//! config   u32 length + UTF-8 JSON of the network config
//! dtype    u8 length + "f32" | "f64"
//! count    u32
//! params   count × { u32 name length, name, u32 rank, rank × u64 dims, values }
//! checksum u64 FNV-1a over every preceding byte
//! ```

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EMNETCKP";
pub const VERSION: u32 = 1;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&net.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.push(T::DTYPE.len() as u8);
    out.extend_from_slice(T::DTYPE.as_bytes());
    out.extend_from_slice(&(net.store.len() as u32).to_le_bytes());
    for (_, p) in net.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

/// A decoded checkpoint; values are widened to `f64`, which is lossless for
/// both stored precisions.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub precision: Precision,
    pub params: Vec<(String, Tensor<f64>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Format(e.to_string()))
    }
}

fn read_values<T: Scalar>(r: &mut Reader, n: usize) -> Result<Vec<f64>> {
    let bytes = r.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Format("parameter too large".into()))?)?;
    Ok(bytes.chunks_exact(T::BYTES).map(|c| T::read_le(c).to_f64_lossy()).collect())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(n)?)?;
    let n = r.take(1)?[0] as usize;
    let dtype = r.str(n)?;
    let precision = Precision::from_dtype(dtype).ok_or_else(|| Error::Format(format!("unknown dtype '{dtype}'")))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.str(n)?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
        let values = match precision {
            Precision::F32 => read_values::<f32>(&mut r, numel)?,
            Precision::F64 => read_values::<f64>(&mut r, numel)?,
        };
        params.push((name, Tensor::new(shape, values)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes before checksum".into()));
    }
    Ok(Checkpoint { config, precision, params })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

impl Checkpoint {
    /// Rebuilds the network and installs the stored values.
    pub fn into_network<T: Scalar>(self) -> Result<Network<T>> {
        let mut net = Network::<T>::new(self.config)?;
        if net.store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, network expects {}",
                self.params.len(),
                net.store.len()
            )));
        }
        for (id, (name, value)) in net.store.ids().collect::<Vec<_>>().into_iter().zip(self.params) {
            let p = net.store.get_mut(id);
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.cast();
        }
        Ok(net)
    }
}
