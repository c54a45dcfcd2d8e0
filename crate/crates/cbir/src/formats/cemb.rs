//! CEMB embedding files.
//!
//! ```text
//! "CEMB" | version u16 = 1 | reserved u16 = 0 | dim u32 | count u64
//! count × (image_id u64, dim × f32)
//! ```
//! All integers and floats little-endian, no padding, no trailing bytes.

use std::path::Path;

use cbir_core::catalog::EmbeddingMatrix;

use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CEMB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * (8 + 4 * m.dim()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    for (id, v) in m.rows() {
        out.extend_from_slice(&id.to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut r = Reader::new(bytes);
    if r.remaining() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected CEMB".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CEMB version {version}")));
    }
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(Error::Format(format!("reserved field is {reserved}, expected 0")));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    if dim == 0 {
        return Err(cbir_core::Error::EmptyInput("CEMB dim is zero").into());
    }
    if count == 0 {
        return Err(cbir_core::Error::EmptyInput("CEMB count is zero").into());
    }
    let record = 8 + 4 * dim as u64;
    let expected = count
        .checked_mul(record)
        .and_then(|p| p.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::Corrupt("header-implied length overflows".into()))?;
    if expected != bytes.len() as u64 {
        return Err(Error::Corrupt(format!(
            "header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut m = EmbeddingMatrix::with_capacity(dim, count as usize)?;
    let mut row = vec![0f32; dim];
    for _ in 0..count {
        let id = r.u64()?;
        for x in row.iter_mut() {
            *x = r.f32()?;
        }
        m.push(id, &row)?;
    }
    Ok(m)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    decode(&read_file(path)?)
}

pub fn save_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    write_file(path, &encode(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_rows() -> EmbeddingMatrix {
        let mut m = EmbeddingMatrix::new(4).unwrap();
        m.push(7, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        m.push(9, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        m
    }

    #[test]
    fn identity_payload_round_trip() {
        let bytes = encode(&two_rows());
        assert_eq!(bytes.len(), 20 + 2 * (8 + 16));
        let m = decode(&bytes).unwrap();
        assert_eq!(m.ids(), &[7, 9]);
        assert_eq!(m.row(1), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn length_mismatch_is_corruption() {
        let mut bytes = encode(&two_rows());
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
        let mut bytes = encode(&two_rows());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&two_rows());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut bytes = encode(&two_rows());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn zero_count_is_empty_input() {
        let bytes = encode(&EmbeddingMatrix::new(4).unwrap());
        assert!(matches!(
            decode(&bytes),
            Err(Error::Core(cbir_core::Error::EmptyInput(_)))
        ));
    }

    #[test]
    fn nan_names_the_row() {
        let mut bytes = encode(&two_rows());
        // first float of the second record
        let off = HEADER_LEN + (8 + 16) + 8;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Core(cbir_core::Error::NonFinite { row, image_id })) => {
                assert_eq!((row, image_id), (1, 9));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
