//! Binary archive of named f64 tensors plus a text metadata block.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BSSLCKPT" | version u32 | crc32(body) u32 | body_len u64 | body
//! body = meta_len u64, meta (UTF-8 `key = value` lines)
//!        segment_count u64, per segment: name_len u32, name, ndim u32,
//!        dims u64 × ndim, offset u64, length u64
//!        value_count u64, values f64 × value_count
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::params::{ParamVector, Segment};

pub const MAGIC: &[u8; 8] = b"BSSLCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

/// Ordered metadata plus one flat parameter store.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub params: ParamVector,
}

impl Archive {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> std::result::Result<&str, FormatError> {
        self.meta_value(key)
            .ok_or_else(|| FormatError::Malformed(format!("missing metadata key {key}")))
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<T, FormatError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| FormatError::Malformed(format!("bad value {raw:?} for {key}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let mut meta = String::new();
        for (k, v) in &self.meta {
            debug_assert!(!k.contains(['=', '\n']) && !v.contains('\n'));
            meta += &format!("{k} = {v}\n");
        }
        body.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        body.extend_from_slice(meta.as_bytes());
        let segments = self.params.segments();
        body.extend_from_slice(&(segments.len() as u64).to_le_bytes());
        for s in segments {
            body.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            body.extend_from_slice(s.name.as_bytes());
            body.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for d in &s.shape {
                body.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            body.extend_from_slice(&(s.offset as u64).to_le_bytes());
            body.extend_from_slice(&(s.len() as u64).to_le_bytes());
        }
        let values = self.params.values();
        body.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let mut header = Reader::new(&bytes[8..HEADER_LEN]);
        let version = header.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let stored = header.u32()?;
        let body_len = header.u64()? as usize;
        let needed = HEADER_LEN.saturating_add(body_len);
        if bytes.len() < needed {
            return Err(FormatError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes after body",
                bytes.len() - needed
            )));
        }
        let body = &bytes[HEADER_LEN..];
        let computed = crc32fast::hash(body);
        if computed != stored {
            return Err(FormatError::Checksum { stored, computed });
        }
        let mut r = Reader::new(body);
        let meta_len = r.u64()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| FormatError::Malformed("metadata is not UTF-8".into()))?;
        let meta = meta_text
            .lines()
            .map(|line| {
                line.split_once(" = ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| FormatError::Malformed(format!("bad metadata line {line:?}")))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let count = r.u64()? as usize;
        let mut segments = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| FormatError::Malformed("segment name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = r.u64()? as usize;
            let length = r.u64()? as usize;
            if shape.iter().product::<usize>() != length {
                return Err(FormatError::Malformed(format!("segment {name} length disagrees with shape")));
            }
            segments.push(Segment { name, shape, offset });
        }
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| FormatError::Malformed("value count overflow".into()))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !r.is_done() {
            return Err(FormatError::Malformed("unread bytes inside body".into()));
        }
        let params = ParamVector::from_parts(segments, values)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(FormatError::Malformed(format!(
                "field of {n} bytes runs past the body end"
            ))),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> Archive {
        let mut params = ParamVector::new();
        params
            .push("a.weight", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.1, -0.0]).unwrap())
            .unwrap();
        params.push("a.bias", Tensor::vector(vec![7.0, 1e300, -1e-300]).unwrap()).unwrap();
        Archive {
            meta: vec![("seed".into(), "3".into()), ("loss".into(), "0.1234".into())],
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.params.segments(), b.params.segments());
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.params), bits(&b.params));
    }

    #[test]
    fn empty_archive_round_trips() {
        let a = Archive::default();
        assert_eq!(Archive::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn every_payload_flip_is_a_checksum_error() {
        let bytes = sample().to_bytes();
        for i in HEADER_LEN..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(
                matches!(Archive::from_bytes(&bad), Err(FormatError::Checksum { .. })),
                "byte {i}"
            );
        }
    }

    #[test]
    fn header_damage_has_distinct_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(FormatError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Archive::from_bytes(&bad),
            Err(FormatError::Version { found: 9, expected: 1 })
        ));
        assert!(matches!(
            Archive::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(Archive::from_bytes(&bytes[..10]), Err(FormatError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Archive::from_bytes(&long), Err(FormatError::Malformed(_))));
    }

    #[test]
    fn file_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Archive::load(&path).unwrap(), sample());
        let missing = dir.path().join("missing.ckpt");
        match Archive::load(&missing) {
            Err(e @ Error::Io { .. }) => assert_eq!(e.exit_code(), 4),
            other => panic!("{other:?}"),
        }
    }
}
