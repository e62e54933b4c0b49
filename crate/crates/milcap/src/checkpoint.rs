//! Binary container for named tensors. Layout, all integers u32
//! little-endian: magic "MMVD", version, tensor count, then per tensor a
//! length-prefixed UTF-8 name, rank, extents, and the f32 payload in
//! little-endian bit order. Readers demand exact length: no trailing bytes.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MMVD";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| overflow("tensor count"))?.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        if name.is_empty() || name.len() > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {} out of range", name.len())));
        }
        if t.rank() > MAX_RANK {
            return Err(Error::Format(format!("tensor {name:?} has rank {}", t.rank())));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&u32::try_from(e).map_err(|_| overflow("extent"))?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn overflow(what: &str) -> Error {
    Error::Format(format!("{what} exceeds the u32 range"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or_else(|| overflow(what))?;
        if end > self.bytes.len() {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a tensor container".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {name_len} out of range")));
        }
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let rank = c.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("tensor {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let e = c.u32("extent")? as usize;
            numel = numel.checked_mul(e).ok_or_else(|| overflow("element count"))?;
            shape.push(e);
        }
        let payload = c.take(numel.checked_mul(4).ok_or_else(|| overflow("payload size"))?, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - c.at)));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    Ok(std::fs::write(path, encode(tensors)?)?)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("w".to_string(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, f32::MIN_POSITIVE]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![9.0])),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mmvd");
        let orig = sample();
        write_tensors(&path, &orig).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), orig.len());
        for ((na, ta), (nb, tb)) in orig.iter().zip(&back) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 2;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [3, 7, 11, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut} slipped through");
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dup = vec![
            ("w".to_string(), Tensor::vector(vec![1.0])),
            ("w".to_string(), Tensor::vector(vec![2.0])),
        ];
        assert!(encode(&dup).is_err());
    }

    #[test]
    fn empty_container_round_trips() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(decode(&bytes).unwrap(), vec![]);
    }

    proptest! {
        #[test]
        fn any_tensor_set_round_trips(
            specs in prop::collection::vec(
                (
                    "[a-z][a-z0-9._]{0,19}",
                    prop::collection::vec(1usize..5, 1..4),
                ),
                0..6,
            ),
            bits in prop::collection::vec(any::<u32>(), 0..400),
        ) {
            let mut tensors = Vec::new();
            let mut used = HashSet::new();
            let mut bit_iter = bits.iter().cycle();
            for (name, shape) in specs {
                if !used.insert(name.clone()) {
                    continue;
                }
                let numel: usize = shape.iter().product();
                let data: Vec<f32> = (0..numel)
                    .map(|_| f32::from_bits(*bit_iter.next().unwrap_or(&0)))
                    .collect();
                tensors.push((name, Tensor::new(shape, data).unwrap()));
            }
            let back = decode(&encode(&tensors).unwrap()).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((na, ta), (nb, tb)) in tensors.iter().zip(&back) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
