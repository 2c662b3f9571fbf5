//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "ASEG"  u32 version
//! u32 config length, config text (UTF-8)
//! u32 tensor count, tensors
//! u32 velocity count, velocities
//! u64 iteration
//! u64 rng seed
//! ```
//!
//! A tensor is `u16` name length, UTF-8 name, `u8` rank, `u32` dims, then the
//! `f32` data. Leading unit dimensions are dropped on write (rank at least
//! one) and restored on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: [u8; 4] = *b"ASEG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor4<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Rendered run configuration.
    pub config: String,
    pub tensors: Vec<NamedTensor>,
    pub velocities: Vec<NamedTensor>,
    /// Completed training iterations.
    pub iteration: u64,
    /// Seed every per-iteration random stream is derived from.
    pub rng_seed: u64,
}

fn put_tensor(out: &mut Vec<u8>, t: &NamedTensor) -> Result<()> {
    let name = t.name.as_bytes();
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {}", t.name)))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name);
    let dims = t.value.dims();
    let first = dims.iter().position(|&d| d != 1).unwrap_or(3);
    let kept = &dims[first..];
    out.push(kept.len() as u8);
    for &d in kept {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.value.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for list in [&self.tensors, &self.velocities] {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for t in list.iter() {
                put_tensor(&mut out, t)?;
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let n = r.u32("config length")? as usize;
        let config = String::from_utf8(r.take(n, "config")?.to_vec())
            .map_err(|_| Error::invalid("checkpoint config is not UTF-8"))?;
        let tensors = r.tensors("tensors")?;
        let velocities = r.tensors("velocities")?;
        let iteration = r.u64("iteration")?;
        let rng_seed = r.u64("rng state")?;
        if r.pos != bytes.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            tensors,
            velocities,
            iteration,
            rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn tensors(&mut self, what: &'static str) -> Result<Vec<NamedTensor>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u16(what)? as usize;
            let name = String::from_utf8(self.take(len, what)?.to_vec())
                .map_err(|_| Error::invalid("checkpoint tensor name is not UTF-8"))?;
            let rank = self.u8(what)? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::invalid(format!("tensor {name} has rank {rank}")));
            }
            let mut dims = [1usize; 4];
            for d in dims[4 - rank..].iter_mut() {
                *d = self.u32(what)? as usize;
            }
            let n: usize = dims.iter().product();
            let raw = self.take(n.checked_mul(4).ok_or(Error::Truncated(what))?, what)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            out.push(NamedTensor {
                name,
                value: Tensor4::from_vec(dims, data)?,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let t = |name: &str, dims, off: f32| NamedTensor {
            name: name.into(),
            value: Tensor4::from_fn(dims, |n, c, h, w| off + (n * 1000 + c * 100 + h * 10 + w) as f32 * 0.5),
        };
        Checkpoint {
            config: "lr0 = 0.01\n".into(),
            tensors: vec![t("a.weight", [4, 3, 3, 3], 0.0), t("a.bias", [1, 1, 1, 4], 1.0), t("s", [1, 1, 1, 1], 2.0)],
            velocities: vec![t("a.weight", [4, 3, 3, 3], -1.0)],
            iteration: 17,
            rng_seed: 42,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_corruption_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    }
}
