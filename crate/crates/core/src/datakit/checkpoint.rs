//! Binary checkpoint: `TRLM`, a u32 version, a key/value metadata block and
//! a table of named tensors with dtype tags. Everything is little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"TRLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint {
                expected: format!("{n} more bytes at offset {}", self.pos),
                found: "end of file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint {
            expected: "UTF-8 string".into(),
            found: "invalid bytes".into(),
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, payload: Payload) -> Result<()> {
        if shape.iter().product::<usize>() != payload.len() {
            return Err(Error::Invalid(format!("tensor `{name}`: shape {shape:?} does not fit payload")));
        }
        self.tensors.retain(|t| t.name != name);
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape,
            payload,
        });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.push(name, t.shape().to_vec(), Payload::F64(t.data().to_vec()))
    }

    pub fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn missing(name: &str) -> Error {
        Error::Checkpoint {
            expected: format!("tensor `{name}`"),
            found: "nothing".into(),
        }
    }

    /// Reads a float tensor; f32 payloads are widened.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let t = self.find(name).ok_or_else(|| Self::missing(name))?;
        let data = match &t.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U32(_) => {
                return Err(Error::Checkpoint {
                    expected: format!("float tensor `{name}`"),
                    found: "u32".into(),
                })
            }
        };
        Ok(Tensor::new(t.shape.clone(), data)?)
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.find(name).map(|t| &t.payload) {
            Some(Payload::U32(v)) => Ok(v),
            Some(_) => Err(Error::Checkpoint {
                expected: format!("u32 tensor `{name}`"),
                found: "float".into(),
            }),
            None => Err(Self::missing(name)),
        }
    }

    /// Stores values, and with `optimizer` also Adam moments, step counts
    /// and frozen flags, under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore, optimizer: bool) -> Result<()> {
        for (name, p) in store.iter() {
            let full = format!("{prefix}{name}");
            self.push_tensor(&full, &p.value)?;
            if optimizer {
                let shape = p.value.shape().to_vec();
                self.push(&format!("{full}@m"), shape.clone(), Payload::F64(p.m.clone()))?;
                self.push(&format!("{full}@v"), shape, Payload::F64(p.v.clone()))?;
                self.push(&format!("{full}@state"), vec![2], Payload::U32(vec![p.t, p.frozen as u32]))?;
            }
        }
        Ok(())
    }

    /// Rebuilds the store saved under `prefix`, in saved order.
    pub fn get_store(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            let Some(name) = t.name.strip_prefix(prefix) else { continue };
            if name.contains('@') || matches!(t.payload, Payload::U32(_)) {
                continue;
            }
            let mut p = Param::new(self.tensor(&t.name)?);
            if self.find(&format!("{}@m", t.name)).is_some() {
                p.m = self.tensor(&format!("{}@m", t.name))?.into_data();
                p.v = self.tensor(&format!("{}@v", t.name))?.into_data();
                let s = self.u32s(&format!("{}@state", t.name))?;
                if s.len() != 2 {
                    return Err(Error::Checkpoint {
                        expected: "2-word optimizer state".into(),
                        found: format!("{} words", s.len()),
                    });
                }
                p.t = s[0];
                p.frozen = s[1] != 0;
            }
            store.insert_param(name, p)?;
        }
        Ok(store)
    }

    pub fn put_rng(&mut self, name: &str, rng: &ChaCha8Rng) -> Result<()> {
        let mut words: Vec<u32> = rng
            .get_seed()
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let stream = rng.get_stream();
        words.extend([stream as u32, (stream >> 32) as u32]);
        let pos = rng.get_word_pos();
        words.extend((0..4).map(|k| (pos >> (32 * k)) as u32));
        self.push(name, vec![words.len()], Payload::U32(words))
    }

    pub fn get_rng(&self, name: &str) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let w = self.u32s(name)?;
        if w.len() != 14 {
            return Err(Error::Checkpoint {
                expected: "14-word RNG state".into(),
                found: format!("{} words", w.len()),
            });
        }
        let mut seed = [0u8; 32];
        for (k, x) in w[..8].iter().enumerate() {
            seed[4 * k..4 * k + 4].copy_from_slice(&x.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(w[8] as u64 | (w[9] as u64) << 32);
        let pos = (0..4).fold(0u128, |acc, k| acc | (w[10 + k] as u128) << (32 * k));
        rng.set_word_pos(pos);
        Ok(rng)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.payload.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                expected: "magic TRLM".into(),
                found: format!("{:?}", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                expected: format!("version {VERSION}"),
                found: format!("version {version}"),
            });
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.metadata.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let tag = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = match tag {
                0 => Payload::F32(r.take(4 * n)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                1 => Payload::F64(r.take(8 * n)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
                2 => Payload::U32(r.take(4 * n)?.chunks(4).map(|c| u32::from_le_bytes(c.try_into().expect("4"))).collect()),
                other => {
                    return Err(Error::Checkpoint {
                        expected: "dtype tag 0, 1 or 2".into(),
                        found: format!("tag {other}"),
                    })
                }
            };
            ck.tensors.push(NamedTensor { name, shape, payload });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint {
                expected: "end of file".into(),
                found: format!("{} trailing bytes", buf.len() - r.pos),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_bytes(path)?)
    }
}
