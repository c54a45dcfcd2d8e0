//! CIDX index files.
//!
//! ```text
//! "CIDX" | version u16 = 1 | kind u8 (0 flat, 1 hnsw) | metric u8 (0 cosine)
//! dim u32 | count u64 | params_len u32 | params
//! vectors: count × dim × f32 | ids: count × u64
//! adjacency (hnsw only):
//!     entry u64 (u64::MAX when empty)
//!     per node: layers u32, per layer: degree u32, degree × u32
//! crc32c u32 over every preceding byte
//! ```
//! HNSW params block: m u32 | ef_construction u32 | ef_search u32 |
//! seed u64 | selection u8 (0 simple, 1 diverse). Flat has an empty block.

use std::path::Path;

use cbir_core::vecindex::{FlatIndex, HnswIndex, HnswParams, NeighborSelection, VectorIndex};
use crc::{Crc, CRC_32_ISCSI};

use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CIDX";
pub const VERSION: u16 = 1;
const KIND_FLAT: u8 = 0;
const KIND_HNSW: u8 = 1;
const METRIC_COSINE: u8 = 0;
const HNSW_PARAMS_LEN: u32 = 21;

static CRC32C: Crc<u32> = Crc::<u32>::new(&CRC_32_ISCSI);

pub fn crc32c(bytes: &[u8]) -> u32 {
    CRC32C.checksum(bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_payload(out: &mut Vec<u8>, vectors: &[f32], ids: &[u64]) {
    for x in vectors {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for id in ids {
        put_u64(out, *id);
    }
}

pub fn serialize_index(index: &VectorIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    match index {
        VectorIndex::Flat(f) => {
            out.push(KIND_FLAT);
            out.push(METRIC_COSINE);
            put_u32(&mut out, f.dim() as u32);
            put_u64(&mut out, f.len() as u64);
            put_u32(&mut out, 0);
            put_payload(&mut out, f.vectors(), f.ids());
        }
        VectorIndex::Hnsw(h) => {
            out.push(KIND_HNSW);
            out.push(METRIC_COSINE);
            put_u32(&mut out, h.dim() as u32);
            put_u64(&mut out, h.len() as u64);
            let p = h.params();
            put_u32(&mut out, HNSW_PARAMS_LEN);
            put_u32(&mut out, p.m as u32);
            put_u32(&mut out, p.ef_construction as u32);
            put_u32(&mut out, p.ef_search as u32);
            put_u64(&mut out, p.seed);
            out.push(match p.selection {
                NeighborSelection::Simple => 0,
                NeighborSelection::Diverse => 1,
            });
            put_payload(&mut out, h.vectors(), h.ids());
            put_u64(&mut out, h.entry_point().map_or(u64::MAX, u64::from));
            for layers in h.links() {
                put_u32(&mut out, layers.len() as u32);
                for adj in layers {
                    put_u32(&mut out, adj.len() as u32);
                    for &nb in adj {
                        put_u32(&mut out, nb);
                    }
                }
            }
        }
    }
    let crc = crc32c(&out);
    put_u32(&mut out, crc);
    out
}

pub fn deserialize_index(bytes: &[u8]) -> Result<VectorIndex> {
    if bytes.len() < 4 + 2 + 1 + 1 + 4 + 8 + 4 + 4 {
        return Err(Error::Corrupt(format!("CIDX payload of {} bytes is truncated", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected CIDX".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32c(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CIDX version {version}")));
    }
    let kind = r.u8()?;
    let metric = r.u8()?;
    if metric != METRIC_COSINE {
        return Err(Error::Format(format!("unknown metric {metric}")));
    }
    let dim = r.u32()? as usize;
    let count = usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("count overflows".into()))?;
    let params_len = r.u32()?;
    let params = match kind {
        KIND_FLAT if params_len == 0 => None,
        KIND_HNSW if params_len == HNSW_PARAMS_LEN => {
            let m = r.u32()? as usize;
            let ef_construction = r.u32()? as usize;
            let ef_search = r.u32()? as usize;
            let seed = r.u64()?;
            let selection = match r.u8()? {
                0 => NeighborSelection::Simple,
                1 => NeighborSelection::Diverse,
                s => return Err(Error::Format(format!("unknown neighbor selection {s}"))),
            };
            Some(HnswParams {
                m,
                ef_construction,
                ef_search,
                seed,
                selection,
            })
        }
        KIND_FLAT | KIND_HNSW => {
            return Err(Error::Format(format!(
                "params block of {params_len} bytes does not match index kind {kind}"
            )))
        }
        other => return Err(Error::Format(format!("unknown index kind {other}"))),
    };

    let n_floats = count
        .checked_mul(dim)
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| Error::Corrupt("vector payload longer than file".into()))?;
    let mut vectors = Vec::with_capacity(n_floats);
    for _ in 0..n_floats {
        vectors.push(r.f32()?);
    }
    if count.checked_mul(8).is_none_or(|b| b > r.remaining()) {
        return Err(Error::Corrupt("id payload longer than file".into()));
    }
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(r.u64()?);
    }

    let index = match params {
        None => VectorIndex::Flat(FlatIndex::from_parts(dim, ids, vectors)?),
        Some(p) => {
            let entry = match r.u64()? {
                u64::MAX => None,
                e => Some(u32::try_from(e).map_err(|_| Error::Corrupt("entry point overflows".into()))?),
            };
            let mut links = Vec::with_capacity(count);
            for _ in 0..count {
                let n_layers = r.u32()? as usize;
                if n_layers > 256 {
                    return Err(Error::Corrupt(format!("node with {n_layers} layers")));
                }
                let mut layers = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    let deg = r.u32()? as usize;
                    if deg.saturating_mul(4) > r.remaining() {
                        return Err(Error::Corrupt("adjacency longer than file".into()));
                    }
                    let mut adj = Vec::with_capacity(deg);
                    for _ in 0..deg {
                        adj.push(r.u32()?);
                    }
                    layers.push(adj);
                }
                links.push(layers);
            }
            VectorIndex::Hnsw(HnswIndex::from_parts(p, dim, ids, vectors, links, entry)?)
        }
    };
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes before checksum",
            r.remaining()
        )));
    }
    let _ = r.position();
    Ok(index)
}

pub fn save_index(path: &Path, index: &VectorIndex) -> Result<()> {
    write_file(path, &serialize_index(index))
}

pub fn load_index(path: &Path) -> Result<VectorIndex> {
    deserialize_index(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbir_core::catalog::EmbeddingMatrix;

    #[test]
    fn empty_flat_round_trip() {
        let idx = VectorIndex::Flat(FlatIndex::build(&EmbeddingMatrix::new(8).unwrap()).unwrap());
        let bytes = serialize_index(&idx);
        assert_eq!(deserialize_index(&bytes).unwrap(), idx);
    }

    #[test]
    fn empty_hnsw_round_trip() {
        let idx = VectorIndex::Hnsw(
            HnswIndex::build(&EmbeddingMatrix::new(3).unwrap(), HnswParams::default()).unwrap(),
        );
        assert_eq!(deserialize_index(&serialize_index(&idx)).unwrap(), idx);
    }

    #[test]
    fn crc32c_check_value() {
        // standard CRC-32C check value for "123456789"
        assert_eq!(crc32c(b"123456789"), 0xE306_9283);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let idx = VectorIndex::Flat(FlatIndex::build(&EmbeddingMatrix::new(2).unwrap()).unwrap());
        let mut bytes = serialize_index(&idx);
        bytes[1] = b'X';
        assert!(matches!(deserialize_index(&bytes), Err(Error::Format(_))));
        assert!(matches!(deserialize_index(&bytes[..10]), Err(Error::Corrupt(_))));
    }
}
