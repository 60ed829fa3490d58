//! Versioned little-endian checkpoint container.
//!
//! ```text
//! "VQ2C" | u32 version | u64 unix timestamp | u32 section count
//! per section: u32 name length | name (UTF-8) | u64 payload length | payload
//! ```
//! The timestamp is the only field that differs between two saves of the same state.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{ensure, Error, Result};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::vq::Codebook;

pub const MAGIC: &[u8; 4] = b"VQ2C";
pub const VERSION: u32 = 1;
/// Byte offset and length of the timestamp inside the header.
pub const TIMESTAMP_RANGE: std::ops::Range<usize> = 8..16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub timestamp: u64,
    sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { timestamp, sections: Vec::new() }
    }

    pub fn put(&mut self, name: &str, payload: Vec<u8>) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = payload,
            None => self.sections.push((name.to_string(), payload)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` section")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.timestamp);
        w.u32(self.sections.len() as u32);
        for (name, payload) in &self.sections {
            w.str(name);
            w.u64(payload.len() as u64);
            w.bytes(payload);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        ensure!(r.take(4)? == MAGIC, Format, "not a checkpoint (bad magic)");
        let version = r.u32()?;
        ensure!(version == VERSION, Format, "unsupported checkpoint version {version}");
        let timestamp = r.u64()?;
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let len = r.u64()? as usize;
            sections.push((name, r.take(len)?.to_vec()));
        }
        r.finish()?;
        Ok(Self { timestamp, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Default)]
pub struct Writer(pub Vec<u8>);

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    /// u64 length prefix followed by the bytes.
    pub fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated data: wanted {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("invalid UTF-8 name: {e}")))
    }

    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Format("blob length overflow".into()))?;
        self.take(n)
    }

    pub fn finish(&self) -> Result<()> {
        ensure!(self.pos == self.buf.len(), Format, "{} trailing bytes", self.buf.len() - self.pos);
        Ok(())
    }
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(store.len() as u32);
    for (_, p) in store.iter() {
        w.str(&p.name);
        w.u32(p.value.ndim() as u32);
        for &d in p.value.shape() {
            w.u64(d as u64);
        }
        w.f64s(p.value.data());
    }
    w.0
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("shape overflow".into()))?;
        let data = r.f64s(len)?;
        store.add(name, Tensor::new(&shape, data)?).map_err(|e| Error::Format(e.to_string()))?;
    }
    r.finish()?;
    Ok(store)
}

/// Per codebook: `K, D` (u64), `γ, ε`, then `e`, `N`, `m` as f64.
pub fn encode_codebooks(books: &[Codebook]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(books.len() as u32);
    for cb in books {
        w.u64(cb.num_codes() as u64);
        w.u64(cb.dim() as u64);
        w.f64(cb.gamma);
        w.f64(cb.epsilon);
        w.f64s(cb.embeddings().data());
        w.f64s(cb.cluster_size());
        w.f64s(cb.ema_sum().data());
    }
    w.0
}

pub fn decode_codebooks(bytes: &[u8]) -> Result<Vec<Codebook>> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = r.u64()? as usize;
        let d = r.u64()? as usize;
        let gamma = r.f64()?;
        let epsilon = r.f64()?;
        let e = Tensor::new(&[k, d], r.f64s(k * d)?)?;
        let counts = r.f64s(k)?;
        let m = Tensor::new(&[k, d], r.f64s(k * d)?)?;
        out.push(Codebook::from_parts(e, counts, m, gamma, epsilon).map_err(|e| Error::Format(e.to_string()))?);
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_adam(opt: &Adam) -> Vec<u8> {
    let mut w = Writer::default();
    let c = opt.config;
    w.f64s(&[c.lr, c.beta1, c.beta2, c.eps]);
    w.u64(opt.steps_taken());
    let (m, v) = opt.moments();
    w.u32(m.len() as u32);
    for (mi, vi) in m.iter().zip(v) {
        w.u64(mi.len() as u64);
        w.f64s(mi);
        w.f64s(vi);
    }
    w.0
}

/// Restores optimizer state, checking that moment buffers line up with `store`.
pub fn decode_adam(bytes: &[u8], store: &ParamStore) -> Result<Adam> {
    let mut r = Reader::new(bytes);
    let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
    let step = r.u64()?;
    let n = r.u32()? as usize;
    ensure!(n == store.len(), Format, "optimizer has {n} moment buffers for {} parameters", store.len());
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (_, p) in store.iter() {
        let len = r.u64()? as usize;
        ensure!(len == p.value.len(), Format, "moment length {len} for parameter `{}` of size {}", p.name, p.value.len());
        m.push(r.f64s(len)?);
        v.push(r.f64s(len)?);
    }
    r.finish()?;
    Ok(Adam::from_parts(config, step, m, v))
}

pub fn encode_rng(state: &RngState) -> Vec<u8> {
    state.to_bytes()
}

pub fn decode_rng(bytes: &[u8]) -> Result<RngState> {
    RngState::from_bytes(bytes).ok_or_else(|| Error::Format(format!("RNG state must be {} bytes", RngState::BYTES)))
}

pub fn encode_u64(v: u64) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

pub fn decode_u64(bytes: &[u8]) -> Result<u64> {
    let mut r = Reader::new(bytes);
    let v = r.u64()?;
    r.finish()?;
    Ok(v)
}
