//! `BHFW` weight and checkpoint files.
//!
//! Layout: magic `BHFW`, version u32, entry count u32, then per entry the
//! name length u32, UTF-8 name, rank u32, dims u32 x rank and a
//! little-endian f32 payload. Adam moments are stored as `<name>.m` and
//! `<name>.v`; the step counter and seed as `meta.step` / `meta.seed`,
//! each split into four exact 16-bit chunks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ModelParams, Tensor};

use super::adam::Adam;

pub const MAGIC: &[u8; 4] = b"BHFW";
pub const VERSION: u32 = 1;

const META_STEP: &str = "meta.step";
const META_SEED: &str = "meta.seed";
const META_ADAM_T: &str = "meta.adam_t";

/// Ordered `(name, tensor)` entries of a file.
pub fn encode_entries(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte offset {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_entries(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic (expected BHFW)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format!("invalid UTF-8 name at byte offset {at}"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != bytes.len() {
        return Err(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        ));
    }
    Ok(out)
}

fn encode_u64(v: u64) -> Tensor<f32> {
    let chunks: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(&[4], chunks).expect("4 values")
}

fn decode_u64(t: &Tensor<f32>) -> std::result::Result<u64, String> {
    if t.shape() != [4] {
        return Err(format!(
            "meta entry has shape {:?}, expected [4]",
            t.shape()
        ));
    }
    let mut v = 0u64;
    for (i, &c) in t.data().iter().enumerate() {
        if c.fract() != 0.0 || !(0.0..65536.0).contains(&c) {
            return Err(format!("meta chunk {c} is not a 16-bit integer"));
        }
        v |= (c as u64) << (16 * i);
    }
    Ok(v)
}

/// Full training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub params: ModelParams<f32>,
    pub adam: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn weights_only<T: Scalar>(params: &ModelParams<T>) -> Self {
        Self {
            step: 0,
            seed: 0,
            params: params.cast(),
            adam: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(a) = &self.adam {
            for (n, t) in a.m.iter() {
                entries.push((format!("{n}.m"), t.clone()));
            }
            for (n, t) in a.v.iter() {
                entries.push((format!("{n}.v"), t.clone()));
            }
            entries.push((META_ADAM_T.into(), encode_u64(a.t)));
        }
        entries.push((META_STEP.into(), encode_u64(self.step)));
        entries.push((META_SEED.into(), encode_u64(self.seed)));
        encode_entries(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let entries = decode_entries(bytes)?;
        let (mut step, mut seed, mut adam_t) = (0, 0, None);
        let mut params = ModelParams::new();
        let mut moments = Vec::new();
        for (name, t) in entries {
            match name.as_str() {
                META_STEP => step = decode_u64(&t)?,
                META_SEED => seed = decode_u64(&t)?,
                META_ADAM_T => adam_t = Some(decode_u64(&t)?),
                _ if name.ends_with(".m") || name.ends_with(".v") => moments.push((name, t)),
                _ => params.insert(name, t).map_err(|e| e.to_string())?,
            }
        }
        let adam = match adam_t {
            None if moments.is_empty() => None,
            None => return Err("optimizer moments present without meta.adam_t".into()),
            Some(t) => {
                let mut a = Adam::new(&params);
                a.t = t;
                for (name, value) in moments {
                    let (base, kind) = name.split_at(name.len() - 2);
                    let target = if kind == ".m" { &mut a.m } else { &mut a.v };
                    target
                        .set(base, value)
                        .map_err(|e| format!("{name}: {e}"))?;
                }
                Some(a)
            }
        };
        Ok(Self {
            step,
            seed,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }
}

/// Loads only the parameters of a weight or checkpoint file.
pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    Ok(Checkpoint::load(path)?.params.cast())
}

pub fn save_weights<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::weights_only(params).save(path)
}
