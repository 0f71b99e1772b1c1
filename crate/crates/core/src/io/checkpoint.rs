//! `RFW1` tensor container. Layout, all integers little-endian:
//!
//! ```text
//! "RFW1"  u32 count
//! count x { u32 name_len, name (UTF-8), u32 rank, rank x u32 dim, u64 offset }
//! payloads: f64 LE, product(dims) values each, at their absolute offsets
//! ```
//!
//! A rank-0 tensor holds one value. Writers pack payloads contiguously in
//! manifest order directly after the manifest.

use std::path::Path;

use super::atomic_write;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFW1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<Tensor>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::malformed("checkpoint", reason)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds a tensor; names must be unique and `data` must fill `dims`.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        data: Vec<f64>,
    ) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "`{name}`: dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        self.tensors.push(Tensor {
            name,
            dims: dims.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        self.insert(name, &[], vec![value])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// The named tensor, which must have exactly `dims`.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&[f64]> {
        let t = self
            .get(name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        if t.dims != dims {
            return Err(Error::shape(format!(
                "`{name}` has dims {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(&t.data)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.expect(name, &[])?[0])
    }

    /// Dims of the named tensor.
    pub fn dims(&self, name: &str) -> Result<&[usize]> {
        self.get(name)
            .map(|t| t.dims.as_slice())
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest: usize = self
            .tensors
            .iter()
            .map(|t| 4 + t.name.len() + 4 + 4 * t.dims.len() + 8)
            .sum();
        let mut offset = (8 + manifest) as u64;
        let mut out = Vec::with_capacity(
            offset as usize + 8 * self.tensors.iter().map(Tensor::numel).sum::<usize>(),
        );
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.data.len() as u64;
        }
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(bad("missing RFW1 magic"));
        }
        let count = r.u32()? as usize;
        // every manifest entry takes at least 16 bytes
        if count > bytes.len() / 16 {
            return Err(bad(format!("tensor count {count} exceeds file size")));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(bad(format!("`{name}` has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            entries.push((name, dims, offset));
        }
        let mut ck = Checkpoint::new();
        for (name, dims, offset) in entries {
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("`{name}` dims overflow")))?;
            let start = usize::try_from(offset).map_err(|_| bad("offset overflow"))?;
            if start < r.pos {
                return Err(bad(format!(
                    "`{name}` payload offset {start} overlaps the manifest"
                )));
            }
            let mut pr = Reader { bytes, pos: start };
            let raw = pr.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| bad("payload size overflow"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.insert(name, &dims, data).map_err(|e| match e {
                Error::InvalidArgument(m) => bad(m),
                other => other,
            })?;
        }
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "w",
            &[2, 3],
            vec![0.1, -2.5, 3.0, f64::MIN_POSITIVE, 1e300, -0.0],
        )
        .unwrap();
        c.insert_scalar("tau", 0.25).unwrap();
        c.insert("empty", &[0], vec![]).unwrap();
        c
    }

    #[test]
    fn bit_exact_round_trip() {
        let b = sample().to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        for (a, z) in sample().tensors().iter().zip(back.tensors()) {
            assert_eq!(a.name, z.name);
            assert_eq!(a.dims, z.dims);
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(z));
        }
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn manifest_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"RFW1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], b'w');
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let b = sample().to_bytes();
        for cut in [0, 3, 7, 20, b.len() - 1] {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&b[..cut]),
                    Err(Error::Malformed { .. })
                ),
                "cut {cut}"
            );
        }
        let mut m = b.clone();
        m[0] = b'X';
        assert!(Checkpoint::from_bytes(&m).is_err());
    }

    #[test]
    fn insert_validates() {
        let mut c = sample();
        assert!(c.insert("tau", &[], vec![1.0]).is_err());
        assert!(c.insert("x", &[2], vec![1.0]).is_err());
        assert!(c.expect("w", &[3, 2]).is_err());
        assert!(c.scalar("nope").is_err());
    }
}
