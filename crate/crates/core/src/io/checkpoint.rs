//! Checkpoint container.
//!
//! ```text
//! "TGCK" | version u32 | count u32
//! count × { name_len u16 | name utf-8 | rank u8 | rank × extent u64 | f32 payload }
//! crc32 u32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl CheckpointTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        CheckpointTensor { name: name.into(), shape: shape.to_vec(), data }
    }

    /// Raw 32-bit words stored bit-for-bit in the f32 payload.
    pub fn from_words(name: impl Into<String>, words: &[u32]) -> Self {
        let data = words.iter().map(|&w| f32::from_bits(w)).collect();
        CheckpointTensor { name: name.into(), shape: vec![words.len()], data }
    }

    pub fn words(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }

    fn bit_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// True when both lists hold the same names, shapes and payload bits.
pub fn bit_identical(a: &[CheckpointTensor], b: &[CheckpointTensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

pub fn encode(tensors: &[CheckpointTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", t.name)))?;
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Format(format!("rank too large: {}", t.name)))?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Format(format!("tensor {} payload does not match shape {:?}", t.name, t.shape)));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &e in &t.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointTensor>> {
    if bytes.len() < 16 {
        return Err(Error::Format("truncated file: shorter than header and checksum".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name}: payload size overflow")))?;
        let payload = r.take(n)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push(CheckpointTensor { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[CheckpointTensor]) -> Result<()> {
    write_atomic(path, &encode(tensors)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointTensor>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<CheckpointTensor> {
        vec![
            CheckpointTensor::new("g.w", &[2, 3], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, -0.0, 7.25]),
            CheckpointTensor::new("scalar", &[], vec![3.0]),
            CheckpointTensor::from_words("meta/rng", &[0xdead_beef, 0x7fc0_0001, 0]),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert!(bit_identical(&t, &back));
        assert_eq!(back[2].words(), vec![0xdead_beef, 0x7fc0_0001, 0]);
    }

    #[test]
    fn layout_of_header() {
        let bytes = encode(&[CheckpointTensor::new("ab", &[1], vec![1.0])]).unwrap();
        assert_eq!(&bytes[..4], b"TGCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &2u16.to_le_bytes());
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..25], &1u64.to_le_bytes());
        assert_eq!(&bytes[25..29], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample()).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(decode(&bytes), Err(Error::Checksum { .. })));
        let good = encode(&sample()).unwrap();
        assert!(matches!(decode(&good[..good.len() - 7]), Err(Error::Checksum { .. } | Error::Format(_))));
        let mut versioned = good.clone();
        versioned[4] = 9;
        assert!(matches!(decode(&versioned), Err(Error::VersionMismatch { found: 9, expected: 1 })));
    }

    #[test]
    fn truncated_body_with_valid_crc() {
        let good = encode(&sample()).unwrap();
        let mut cut = good[..good.len() - 12].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&cut), Err(Error::Format(m)) if m.contains("truncated")));
    }
}
