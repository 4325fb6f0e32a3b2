//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "WGFT" | u32 version | u32 tensor count
//! per tensor: u16 name length | name bytes | u8 rank | u32 dims[rank] | f32 payload
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! The step counter and configuration snapshot travel as reserved tensors
//! `meta.step` (four 16-bit chunks, low first) and `meta.config` (UTF-8 bytes),
//! both stored as exactly representable `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WGFT";
pub const VERSION: u32 = 1;
const STEP_KEY: &str = "meta.step";
const CONFIG_KEY: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Packs a `u64` into four exactly representable `f32` chunks.
pub fn u64_to_tensor(v: u64) -> Tensor<f32> {
    let data = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new([4], data).expect("four chunks")
}

pub fn tensor_to_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::CorruptCheckpoint(format!("counter tensor has shape {:?}", t.shape())));
    }
    let mut v = 0u64;
    for (i, &c) in t.data().iter().enumerate() {
        if c < 0.0 || c > 65535.0 || c.fract() != 0.0 {
            return Err(Error::CorruptCheckpoint(format!("counter chunk {c} out of range")));
        }
        v |= (c as u64) << (16 * i);
    }
    Ok(v)
}

impl Checkpoint {
    pub fn new(step: u64, config: impl Into<String>) -> Self {
        Self { step, config: config.into(), tensors: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(&str, Tensor<f32>)> = vec![
            (STEP_KEY, u64_to_tensor(self.step)),
            (CONFIG_KEY, Tensor::new([self.config.len()], self.config.bytes().map(f32::from).collect())?),
        ];
        for (n, t) in &self.tensors {
            entries.push((n.as_str(), t.clone()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("{name}: rank too large")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{name}: extent too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let count = r.u32()?;
        let (mut step, mut config) = (None, None);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?.to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            let t = Tensor::new(shape, data)?;
            match name.as_str() {
                STEP_KEY => step = Some(tensor_to_u64(&t)?),
                CONFIG_KEY => {
                    let b: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
                    config = Some(String::from_utf8(b).map_err(|_| corrupt("config snapshot is not UTF-8"))?);
                }
                _ => tensors.push((name, t)),
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after last tensor"));
        }
        Ok(Self {
            step: step.ok_or_else(|| corrupt("missing step counter"))?,
            config: config.ok_or_else(|| corrupt("missing config snapshot"))?,
            tensors,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(123_456_789_012, "[train]\nsteps = 10\n");
        c.push("a", &Tensor::<f32>::new([2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30]).unwrap());
        c.push("b", &Tensor::<f32>::scalar(0.1));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.step, c.step);
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut b = sample().to_bytes().unwrap();
        let i = b.len() - 10;
        b[i] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::CorruptCheckpoint(m)) if m.contains("checksum")));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut b = sample().to_bytes().unwrap();
        b[4] = 2;
        let n = b.len() - 4;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::CheckpointVersion { found: 2, expected: 1 })));
        assert!(Checkpoint::from_bytes(b"XXXX0000000000000000").is_err());
    }
}
