//! Binary container for named arrays, shared by round payloads, checkpoints
//! and dataset exports.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSSF" | version u16 | array count u32
//! per array: name length u32 | UTF-8 name | element type u8 | rank u32 | dims u64 × rank | payload
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! Element type 0 is `f64`, 1 is `f32`; payloads are raw little-endian values.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSSF";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),
}

impl From<DecodeError> for Error {
    fn from(e: DecodeError) -> Self {
        Error::Decode(e)
    }
}

/// One decoded array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

/// Bytes spent on everything except array payloads.
pub fn overhead_len<S: AsRef<str>>(arrays: &[(S, &Tensor)]) -> usize {
    4 + 2 + 4 + arrays.iter().map(|(n, t)| 4 + n.as_ref().len() + 1 + 4 + 8 * t.rank()).sum::<usize>() + 4
}

pub fn encoded_len<S: AsRef<str>>(arrays: &[(S, &Tensor)], dtype: DType) -> usize {
    overhead_len(arrays) + arrays.iter().map(|(_, t)| t.numel() * dtype.size()).sum::<usize>()
}

pub fn encode<S: AsRef<str>>(arrays: &[(S, &Tensor)], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(arrays, dtype));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        let name = name.as_ref().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(dtype.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> core::result::Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> core::result::Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> core::result::Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> core::result::Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

/// Verifies magic, version and checksum before materializing any array.
pub fn decode(bytes: &[u8]) -> core::result::Result<Vec<NamedArray>, DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(DecodeError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DecodeError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 6 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| DecodeError::Malformed("array name is not UTF-8".into()))?
            .into();
        let dtype = match r.u8()? {
            0 => DType::F64,
            1 => DType::F32,
            t => return Err(DecodeError::Malformed(alloc::format!("unknown element type {t}"))),
        };
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| DecodeError::Malformed("dimension overflows usize".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DecodeError::Malformed("element count overflows".into()))?;
        let raw = r.take(numel.checked_mul(dtype.size()).ok_or(DecodeError::Truncated)?)?;
        let data: Vec<f64> = match dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64).collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| DecodeError::Malformed(alloc::format!("{e}")))?;
        out.push(NamedArray { name, dtype, tensor });
    }
    if r.pos != body.len() {
        return Err(DecodeError::Malformed("trailing bytes after last array".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("theta/0/kernel".into(), Tensor::new(vec![2, 1, 1, 2], vec![0.1, -2.0, 3.5, 1e-300]).unwrap()),
            ("head/bias".into(), Tensor::vector(&[0.5, 0.25]).unwrap()),
        ]
    }

    fn refs(a: &[(String, Tensor)]) -> Vec<(&str, &Tensor)> {
        a.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    #[test]
    fn round_trip_is_lossless() {
        let arrays = sample();
        let bytes = encode(&refs(&arrays), DType::F64);
        assert_eq!(bytes.len(), encoded_len(&refs(&arrays), DType::F64));
        let back = decode(&bytes).unwrap();
        for ((n, t), d) in arrays.iter().zip(&back) {
            assert_eq!(n, &d.name);
            assert!(t.bitwise_eq(&d.tensor));
        }
        let again: Vec<(&str, &Tensor)> = back.iter().map(|a| (a.name.as_str(), &a.tensor)).collect();
        assert_eq!(encode(&again, DType::F64), bytes);
    }

    #[test]
    fn single_precision_downcasts() {
        let arrays = sample();
        let bytes = encode(&refs(&arrays), DType::F32);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[1].dtype, DType::F32);
        assert_eq!(back[1].tensor.data(), &[0.5, 0.25]);
    }

    #[test]
    fn detects_corruption() {
        let bytes = encode(&refs(&sample()), DType::F64);
        let mut tampered = bytes.clone();
        tampered[20] ^= 0x40;
        assert!(matches!(decode(&tampered), Err(DecodeError::Checksum { .. })));
        assert_eq!(decode(&bytes[..bytes.len() - 9]).unwrap_err(), decode(&bytes[..bytes.len() - 9]).unwrap_err());
        assert!(matches!(decode(&bytes[..3]), Err(DecodeError::Truncated)));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert_eq!(decode(&wrong_magic), Err(DecodeError::BadMagic));
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert_eq!(decode(&wrong_version), Err(DecodeError::UnsupportedVersion(9)));
    }
}
