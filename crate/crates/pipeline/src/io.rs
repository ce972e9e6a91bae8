//! Binary file formats: volumes (`MPRVOL1\0`), artery encodings
//! (`ARTENC1\0`) and myocardium features (`MYOFEA1\0`).
//!
//! All integers are u64 and all reals are little-endian. Volume headers hold
//! the rank, the extents and the per-axis voxel spacing in millimetres
//! (f64); voxel payloads and feature payloads are f32.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"MPRVOL1\0";
pub const ARTERY_ENC_MAGIC: &[u8; 8] = b"ARTENC1\0";
pub const MYO_FEAT_MAGIC: &[u8; 8] = b"MYOFEA1\0";

/// Dense f32 volume, row-major over `extents`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: Vec<usize>,
    pub spacing: Vec<f64>,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(extents: &[usize], spacing: &[f64]) -> Self {
        assert_eq!(extents.len(), spacing.len());
        Self {
            extents: extents.to_vec(),
            spacing: spacing.to_vec(),
            data: vec![0.0; extents.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of a 3-D voxel.
    #[inline]
    pub fn idx3(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    #[inline]
    pub fn at3(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx3(z, y, x)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * (1 + 2 * self.extents.len()) + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&(self.extents.len() as u64).to_le_bytes());
        for &e in &self.extents {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &s in &self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != VOLUME_MAGIC {
            return Err("bad magic, expected MPRVOL1".into());
        }
        let rank = r.u64()? as usize;
        if rank == 0 || rank > 8 {
            return Err(format!("unsupported rank {rank}"));
        }
        let extents = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let spacing = (0..rank).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = extents.iter().product();
        let data = r.f32s(n)?;
        r.finish()?;
        Ok(Self { extents, spacing, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

pub fn artery_encodings_to_bytes(encodings: &[Vec<f32>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + encodings.len() * 4096);
    out.extend_from_slice(ARTERY_ENC_MAGIC);
    out.extend_from_slice(&(encodings.len() as u64).to_le_bytes());
    for e in encodings {
        for &v in e {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses `ARTENC1` data into one vector of `width` values per artery.
pub fn artery_encodings_from_bytes(bytes: &[u8], width: usize) -> std::result::Result<Vec<Vec<f32>>, String> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != ARTERY_ENC_MAGIC {
        return Err("bad magic, expected ARTENC1".into());
    }
    let n = r.u64()? as usize;
    let out = (0..n).map(|_| r.f32s(width)).collect::<std::result::Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(out)
}

pub fn myo_features_to_bytes(features: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * features.len());
    out.extend_from_slice(MYO_FEAT_MAGIC);
    for &v in features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn myo_features_from_bytes(bytes: &[u8], width: usize) -> std::result::Result<Vec<f32>, String> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MYO_FEAT_MAGIC {
        return Err("bad magic, expected MYOFEA1".into());
    }
    let v = r.f32s(width)?;
    r.finish()?;
    Ok(v)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| "unexpected end of file".to_string())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let len = n.checked_mul(4).ok_or("extent overflow")?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.bytes.len() - self.pos))
        }
    }
}
