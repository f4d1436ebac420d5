//! CGHW weight container: named `f32` tensors with a trailing CRC-32.
//!
//! ```text
//! "CGHW"  u32 version  u32 count
//! count x { u32 name_len, name, u32 rank, rank x u32 dim, u8 complex, f32 data... }
//! u32 crc32(all preceding bytes)
//! ```
//! All integers and floats are little-endian; complex data is interleaved
//! `re, im`.

use std::fs;
use std::path::Path;

use num_complex::Complex;
use thiserror::Error;

use crate::tensor::{Kind, Tensor};

pub const MAGIC: [u8; 4] = *b"CGHW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("bad magic {found:?}: not a CGHW weight file")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("tensor `{name}` has dimensions {found:?}, expected {expected:?}")]
    Dimension { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{name}` is stored as {found:?}, expected {expected:?}")]
    Kind { name: String, expected: Kind, found: Kind },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("unexpected tensor `{0}`")]
    Unknown(String),
    #[error("invalid tensor name: {0}")]
    Name(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Serializes named tensors (values are cast to `f32`).
pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let complex = t.kind() == Kind::Complex;
        out.push(complex as u8);
        for z in t.data() {
            out.extend_from_slice(&z.re.to_le_bytes());
            if complex {
                out.extend_from_slice(&z.im.to_le_bytes());
            }
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
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(WeightsError::Truncated { context: context.to_string() });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, context: &str) -> Result<f32, WeightsError> {
        Ok(f32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }
}

/// Parses a CGHW byte buffer.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, WeightsError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(WeightsError::BadMagic { found: bytes.iter().take(4).copied().collect() });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::Version { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 16 {
        return Err(WeightsError::Truncated { context: "header".into() });
    }
    let body = &bytes[..bytes.len() - 4];
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let ctx = format!("tensor {i}");
        let len = r.u32(&ctx)? as usize;
        let name = std::str::from_utf8(r.take(len, &ctx)?)
            .map_err(|e| WeightsError::Name(e.to_string()))?
            .to_string();
        let rank = r.u32(&name)? as usize;
        let shape = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let complex = r.take(1, &name)?[0] != 0;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n.min(bytes.len() / 4));
        for _ in 0..n {
            let re = r.f32(&name)?;
            let im = if complex { r.f32(&name)? } else { 0.0 };
            data.push(Complex::new(re, im));
        }
        let kind = if complex { Kind::Complex } else { Kind::Real };
        let t = Tensor::new(&shape, data, kind).map_err(|e| WeightsError::Name(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos + 4 > bytes.len() {
        return Err(WeightsError::Truncated { context: "checksum".into() });
    }
    let stored = u32::from_le_bytes(bytes[r.pos..r.pos + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..r.pos]);
    if r.pos + 4 != bytes.len() || body.len() != r.pos {
        return Err(WeightsError::Checksum { stored, computed: crc32fast::hash(body) });
    }
    if stored != computed {
        return Err(WeightsError::Checksum { stored, computed });
    }
    Ok(tensors)
}

pub fn write_file(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<(), WeightsError> {
    fs::write(path, encode(tensors))
        .map_err(|source| WeightsError::Io { path: path.display().to_string(), source })
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, WeightsError> {
    let bytes = fs::read(path).map_err(|source| WeightsError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.kernel".into(), Tensor::new(&[2, 1], vec![Complex::new(1.5, -0.25), Complex::new(f32::MIN_POSITIVE, 3.0)], Kind::Complex).unwrap()),
            ("b.rho".into(), Tensor::from_real(&[1], &[0.75]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, a), (n2, b)) in t.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.kind(), b.kind());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
    }

    #[test]
    fn corrupted_magic() {
        let mut b = encode(&sample());
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(WeightsError::BadMagic { .. })));
    }

    #[test]
    fn wrong_version() {
        let mut b = encode(&sample());
        b[4] = 9;
        assert!(matches!(decode(&b), Err(WeightsError::Version { found: 9, .. })));
    }

    #[test]
    fn truncation_detected() {
        let b = encode(&sample());
        for cut in [6, 13, 20, b.len() - 9, b.len() - 2] {
            assert!(matches!(decode(&b[..cut]), Err(WeightsError::Truncated { .. })), "cut at {cut}");
        }
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut b = encode(&sample());
        let n = b.len();
        b[n - 6] ^= 0x01;
        assert!(matches!(decode(&b), Err(WeightsError::Checksum { .. })));
    }

    #[test]
    fn trailing_bytes_fail_checksum() {
        let mut b = encode(&sample());
        b.push(0);
        assert!(matches!(decode(&b), Err(WeightsError::Checksum { .. })));
    }
}
