//! Binary pool file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "VPL1" | version u32 | dim u32 | count u64
//! count x { id u64 | label u8 | 3 zero bytes | dim x f32 }
//! ```

use std::fs;
use std::path::Path;

use super::{PoolError, VectorPool, VectorRecord};

pub const POOL_MAGIC: &[u8; 4] = b"VPL1";
pub const POOL_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

impl VectorPool {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (12 + 4 * self.dim));
        out.extend_from_slice(POOL_MAGIC);
        out.extend_from_slice(&POOL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, label, v) in self.records() {
            out.extend_from_slice(&id.to_le_bytes());
            out.push(label);
            out.extend_from_slice(&[0, 0, 0]);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a pool file image. The result is not frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PoolError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != POOL_MAGIC {
            return Err(PoolError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"VPL1\""),
            });
        }
        let version = r.u32("version")?;
        if version != POOL_VERSION {
            return Err(PoolError::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let dim = r.u32("dim")? as usize;
        let count = r.u64("count")?;
        let mut pool = VectorPool::new(dim);
        for _ in 0..count {
            let start = r.pos as u64;
            let id = r.u64("record id")?;
            let label = r.take(1, "label")?[0];
            r.take(3, "padding")?;
            let raw = r.take(dim * 4, "vector")?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pool.add(VectorRecord { id, label, vector }).map_err(|e| PoolError::Format {
                offset: start,
                message: e.to_string(),
            })?;
        }
        if r.pos != bytes.len() {
            return Err(PoolError::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(pool)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PoolError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| PoolError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PoolError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| PoolError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PoolError> {
        if self.bytes.len() - self.pos < n {
            return Err(PoolError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, PoolError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, PoolError> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VectorPool {
        let mut pool = VectorPool::new(3);
        for (id, label) in [(10u64, 0u8), (3, 1), (77, 0)] {
            pool.add(VectorRecord {
                id,
                label,
                vector: vec![id as f32 * 0.5, -1.25, f32::MIN_POSITIVE],
            })
            .unwrap();
        }
        pool
    }

    #[test]
    fn round_trip_three_records() {
        let pool = sample();
        let back = VectorPool::from_bytes(&pool.to_bytes()).unwrap();
        let a: Vec<_> = pool.records().map(|(i, l, v)| (i, l, v.to_vec())).collect();
        let b: Vec<_> = back.records().map(|(i, l, v)| (i, l, v.to_vec())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[0..4], b"VPL1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 3 * (8 + 1 + 3 + 12));
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(VectorPool::from_bytes(&bytes), Err(PoolError::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        match VectorPool::from_bytes(cut) {
            Err(PoolError::Format { offset, message }) => {
                assert_eq!(offset as usize, 20 + 2 * 24 + 12);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_version() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(VectorPool::from_bytes(&bytes), Err(PoolError::Format { offset: 4, .. })));
    }
}
