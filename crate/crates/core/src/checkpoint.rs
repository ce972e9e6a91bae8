//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MILCKPT1" | version: u32 | record count: u32
//! per record: name length: u32 | UTF-8 name | dtype: u8 | rank: u32
//!             | extents: u64 × rank | payload (little-endian elements)
//! checksum: u64  (FNV-1a over every payload byte, in record order)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MILCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors {
    records: Vec<Record>,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.finish()
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

fn format_err(msg: impl Into<String>) -> CoreError {
    CoreError::Format(msg.into())
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    fn insert(&mut self, record: Record) {
        match self.records.iter_mut().find(|r| r.name == record.name) {
            Some(existing) => *existing = record,
            None => self.records.push(record),
        }
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.insert(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload,
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: Vec<u64>) {
        self.insert(Record {
            name: name.into(),
            shape: vec![values.len()],
            payload: Payload::U64(values),
        });
    }

    fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CoreError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.name == name)
    }

    /// Reads a real tensor, converting precision when the stored dtype differs.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self.get(name)?;
        let data: Vec<T> = match &r.payload {
            Payload::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            Payload::U64(_) => return Err(format_err(format!("`{name}` is not a real tensor"))),
        };
        Tensor::new(r.shape.clone(), data)
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match &self.get(name)?.payload {
            Payload::U64(v) => Ok(v.clone()),
            _ => Err(format_err(format!("`{name}` is not an integer tensor"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut hash = Fnv1a::new();
        for r in &self.records {
            let name = r.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.payload.dtype() as u8);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            let start = out.len();
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
            hash.update(&out[start..]);
        }
        out.extend_from_slice(&hash.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(format_err("bad magic, expected MILCKPT1"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        let mut hash = Fnv1a::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| format_err("tensor name is not UTF-8"))?
                .to_string();
            let dtype = DType::from_code(cur.take(1)?[0])
                .ok_or_else(|| format_err(format!("unknown dtype for `{name}`")))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel.checked_mul(dtype.size()).ok_or_else(|| format_err("extent overflow"))?)?;
            hash.update(raw);
            let payload = match dtype {
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                DType::U64 => Payload::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            debug_assert_eq!(payload.len(), numel);
            records.push(Record {
                name,
                shape,
                payload,
            });
        }
        let stored = cur.u64()?;
        if stored != hash.finish() {
            return Err(format_err("checksum mismatch"));
        }
        if cur.pos != bytes.len() {
            return Err(format_err("trailing bytes after checksum"));
        }
        Ok(Self { records })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Stores every parameter under `prefix` + its name.
    pub fn push_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (_, e) in params.iter() {
            self.push_tensor(format!("{prefix}{}", e.name), &e.value);
        }
    }

    /// Overwrites every parameter of `params` from records under `prefix`.
    /// Shapes must match the in-memory architecture.
    pub fn load_params<T: Scalar>(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        for (_, e) in params.iter_mut() {
            let name = format!("{prefix}{}", e.name);
            let t = self.tensor::<T>(&name)?;
            if t.shape() != e.value.shape() {
                return Err(format_err(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
        }
        Ok(())
    }

    pub fn push_adam<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>, adam: &Adam<T>) {
        for (id, e) in params.iter() {
            self.push_tensor(format!("{prefix}m/{}", e.name), &adam.m[id.index()]);
            self.push_tensor(format!("{prefix}v/{}", e.name), &adam.v[id.index()]);
        }
        self.push_u64(format!("{prefix}step"), vec![adam.step]);
    }

    pub fn load_adam<T: Scalar>(
        &self,
        prefix: &str,
        params: &ParamSet<T>,
        adam: &mut Adam<T>,
    ) -> Result<()> {
        for (id, e) in params.iter() {
            adam.m[id.index()] = self.tensor(&format!("{prefix}m/{}", e.name))?;
            adam.v[id.index()] = self.tensor(&format!("{prefix}v/{}", e.name))?;
        }
        adam.step = *self
            .u64s(&format!("{prefix}step"))?
            .first()
            .ok_or_else(|| format_err("empty optimizer step record"))?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err("unexpected end of checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
