//! Little-endian weight container.
//!
//! ```text
//! "BVIT" | u32 version | u32 len, config text | u32 tensor count
//! per tensor: u16 len, name | u8 dtype | u8 rank | u64 dims[rank] | payload
//! ```
//! dtype 0 is row-major f32; dtype 1 is packed sign bits, each row padded
//! to whole u64 words with zero bits. A binary weight `w` is stored as
//! `w.bits` (`D_out × D_in`, packed), `w.alpha` and `w.mu`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::bittensor::{words_for, BitMatrix};
use crate::error::{Error, LoadError, Result};
use crate::layers::BinaryWeight;
use crate::param::{StateMut, StateRef, Stateful};
use crate::quant::BinWeight;
use crate::tensor::FloatTensor;

use super::{Model, ModelConfig};

pub const MAGIC: [u8; 4] = *b"BVIT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_BITS: u8 = 1;

enum Payload {
    F32(FloatTensor),
    Bits(BitMatrix),
}

fn f32_tensor(t: &FloatTensor) -> Payload {
    Payload::F32(t.clone())
}

fn write_tensor(out: &mut Vec<u8>, name: &str, payload: &Payload) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    match payload {
        Payload::F32(t) => {
            out.push(DTYPE_F32);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Payload::Bits(b) => {
            out.push(DTYPE_BITS);
            out.push(2);
            out.extend_from_slice(&(b.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(b.cols() as u64).to_le_bytes());
            for &w in b.words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
}

/// Serializes the model's inference state into container bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut entries: Vec<(String, Payload)> = Vec::new();
    let mut state = Vec::new();
    model.state("", &mut state);
    for (name, s) in state {
        match s {
            StateRef::Param(p) => entries.push((name, f32_tensor(&p.value))),
            StateRef::Buffer(t) => entries.push((name, f32_tensor(t))),
            StateRef::Binary(b) => {
                let f = &b.frozen;
                entries.push((format!("{name}.bits"), Payload::Bits(f.bits_t.clone())));
                entries.push((format!("{name}.alpha"), Payload::F32(FloatTensor::full(&[1], f.alpha))));
                let mu = FloatTensor::new(vec![f.mu.len()], f.mu.clone()).expect("1-d");
                entries.push((format!("{name}.mu"), Payload::F32(mu)));
            }
        }
    }
    let config = model.cfg.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, p) in &entries {
        write_tensor(&mut out, name, p);
    }
    out
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| LoadError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, LoadError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, LoadError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_tensor(r: &mut Reader) -> std::result::Result<(String, Payload), LoadError> {
    let len = r.u16("tensor name length")? as usize;
    let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
        .map_err(|_| LoadError::Truncated("utf-8 tensor name".into()))?;
    let bad = |reason: &str| LoadError::BadTensor { name: name.clone(), reason: reason.into() };
    let dtype = r.u8(&name)?;
    let rank = r.u8(&name)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(usize::try_from(r.u64(&name)?).map_err(|_| bad("dimension overflows usize"))?);
    }
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("size overflow"))?;
    match dtype {
        DTYPE_F32 => {
            let bytes = r.take(count.checked_mul(4).ok_or_else(|| bad("size overflow"))?, &name)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let t = FloatTensor::new(dims, data).map_err(|e| bad(&e.to_string()))?;
            Ok((name, Payload::F32(t)))
        }
        DTYPE_BITS => {
            let [rows, cols] = dims[..] else {
                return Err(bad("packed tensors must have rank 2"));
            };
            let n = rows.checked_mul(words_for(cols)).ok_or_else(|| bad("size overflow"))?;
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?, &name)?;
            let words = bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
            let bits = BitMatrix::from_words(rows, cols, words).map_err(|e| bad(&e.to_string()))?;
            Ok((name, Payload::Bits(bits)))
        }
        other => Err(bad(&format!("unknown dtype {other}"))),
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LoadError::UnsupportedVersion(version).into());
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config text")?)
        .map_err(|_| LoadError::BadConfig("config text is not utf-8".into()))?;
    let cfg = ModelConfig::from_toml(cfg_text).map_err(|e| LoadError::BadConfig(e.to_string()))?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, p) = read_tensor(&mut r)?;
        tensors.insert(name, p);
    }
    if r.pos != bytes.len() {
        return Err(LoadError::BadTensor { name: "<trailer>".into(), reason: "trailing bytes".into() }.into());
    }

    let mut model = Model::build(cfg, 0)?;
    let mut state = Vec::new();
    model.state_mut("", &mut state);
    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| LoadError::MissingTensor(name.to_string()));
    for (name, s) in state {
        match s {
            StateMut::Param(p) => assign(&name, &mut p.value, take(&name)?)?,
            StateMut::Buffer(t) => assign(&name, t, take(&name)?)?,
            StateMut::Binary(b) => {
                let bits = match take(&format!("{name}.bits"))? {
                    Payload::Bits(bits) => bits,
                    Payload::F32(_) => return Err(bad_tensor(&name, "expected packed bits")),
                };
                if (bits.rows(), bits.cols()) != (b.d_out(), b.d_in()) {
                    return Err(bad_tensor(&name, "packed shape mismatch"));
                }
                let mut alpha = FloatTensor::zeros(&[1]);
                assign(&name, &mut alpha, take(&format!("{name}.alpha"))?)?;
                let mut mu = FloatTensor::zeros(&[b.d_out()]);
                assign(&name, &mut mu, take(&format!("{name}.mu"))?)?;
                *b = BinaryWeight::from_frozen(BinWeight { bits_t: bits, alpha: alpha.data()[0], mu: mu.into_data() });
            }
        }
    }
    if let Some(name) = tensors.into_keys().next() {
        return Err(LoadError::UnknownTensor(name).into());
    }
    Ok(model)
}

fn bad_tensor(name: &str, reason: &str) -> Error {
    LoadError::BadTensor { name: name.to_string(), reason: reason.to_string() }.into()
}

fn assign(name: &str, dst: &mut FloatTensor, p: Payload) -> Result<()> {
    match p {
        Payload::F32(t) if t.shape() == dst.shape() => {
            *dst = t;
            Ok(())
        }
        Payload::F32(t) => Err(bad_tensor(name, &format!("shape {:?}, expected {:?}", t.shape(), dst.shape()))),
        Payload::Bits(_) => Err(bad_tensor(name, "expected f32 data")),
    }
}
