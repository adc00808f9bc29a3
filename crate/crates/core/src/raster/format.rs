//! `.srgr` grid files.
//!
//! Fixed 64-byte little-endian header followed by the row-major `f32`
//! payload, channels interleaved per pixel:
//!
//! | offset | size | field                                             |
//! |-------:|-----:|---------------------------------------------------|
//! | 0      | 4    | magic `SRGR`                                      |
//! | 4      | 4    | format version (`u32`, currently 1)               |
//! | 8      | 8    | rows (`u64`)                                      |
//! | 16     | 8    | cols (`u64`)                                      |
//! | 24     | 4    | channels (`u32`)                                  |
//! | 28     | 4    | element type (`u32`, 1 = IEEE-754 binary32)       |
//! | 32     | 4    | flags (`u32`, bit 0 = nodata sentinel present)    |
//! | 36     | 4    | nodata sentinel (`f32`, NaN when absent)          |
//! | 40     | 24   | reserved, zero                                    |

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Raster, RasterError};

pub const MAGIC: &[u8; 4] = b"SRGR";
pub const HEADER_LEN: usize = 64;
const VERSION: u32 = 1;
const ELEMENT_F32: u32 = 1;
const FLAG_NODATA: u32 = 1;

pub fn encode(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + r.values().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(r.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(r.cols() as u64).to_le_bytes());
    out.extend_from_slice(&(r.channels() as u32).to_le_bytes());
    out.extend_from_slice(&ELEMENT_F32.to_le_bytes());
    let flags = if r.nodata().is_some() { FLAG_NODATA } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&r.nodata_value().to_le_bytes());
    out.resize(HEADER_LEN, 0);
    for v in r.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Raster, RasterError> {
    if bytes.len() < HEADER_LEN {
        return Err(RasterError::MalformedHeader(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(RasterError::MalformedHeader("bad magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(RasterError::MalformedHeader(format!("unsupported version {version}")));
    }
    let rows = u64_at(bytes, 8);
    let cols = u64_at(bytes, 16);
    let channels = u32_at(bytes, 24) as u64;
    let element = u32_at(bytes, 28);
    if element != ELEMENT_F32 {
        return Err(RasterError::MalformedHeader(format!("unsupported element type {element}")));
    }
    if channels == 0 {
        return Err(RasterError::MalformedHeader("zero channels".into()));
    }
    let flags = u32_at(bytes, 32);
    let sentinel = f32::from_le_bytes(bytes[36..40].try_into().unwrap());

    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(RasterError::DimensionOverflow)?;
    let expected = count.checked_mul(4).ok_or(RasterError::DimensionOverflow)?;
    let count = usize::try_from(count).map_err(|_| RasterError::DimensionOverflow)?;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if actual < expected {
        return Err(RasterError::TruncatedPayload { expected, actual });
    }
    if actual > expected {
        return Err(RasterError::MalformedHeader(format!(
            "{} trailing bytes after the declared payload",
            actual - expected
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    debug_assert_eq!(values.len(), count);
    let nodata = (flags & FLAG_NODATA != 0).then_some(sentinel);
    Ok(Raster::from_vec(rows as usize, cols as usize, channels as usize, values)?.with_nodata(nodata))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster, RasterError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| RasterError::io(path, e))?;
    decode(&bytes)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_raster(r: &Raster, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let tmp = path.with_extension("srgr.partial");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(r))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| RasterError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_payload_layout() {
        let r = Raster::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&r);
        assert_eq!(bytes.len(), HEADER_LEN + 16);
        let expected: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(&bytes[HEADER_LEN..], &expected[..]);
        assert_eq!(&bytes[..4], b"SRGR");
    }

    #[test]
    fn short_payload_is_truncated() {
        let r = Raster::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&r);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(RasterError::TruncatedPayload { expected: 16, actual: 13 })
        ));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(decode(b"SRGR"), Err(RasterError::MalformedHeader(_))));
        let mut bytes = encode(&Raster::zeros(1, 1, 1));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(RasterError::MalformedHeader(_))));
        let mut bytes = encode(&Raster::zeros(1, 1, 1));
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        bytes[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(RasterError::DimensionOverflow)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.srgr");
        let r = Raster::from_vec(2, 3, 1, vec![0.5, -1.0, f32::NAN, 7.0, 1e-30, -0.0])
            .unwrap()
            .with_nodata(Some(-1.0));
        write_raster(&r, &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back.nodata(), Some(-1.0));
        let a: Vec<u32> = r.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert!(!path.with_extension("srgr.partial").exists());
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            rows in 1usize..6, cols in 1usize..6, channels in 1usize..4,
            seed in proptest::collection::vec(any::<u32>(), 0..200),
            sentinel in proptest::option::of(-1e6f32..1e6),
        ) {
            let n = rows * cols * channels;
            let values: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.get(i).copied().unwrap_or(i as u32))).collect();
            let r = Raster::from_vec(rows, cols, channels, values).unwrap().with_nodata(sentinel);
            let back = decode(&encode(&r)).unwrap();
            prop_assert_eq!((back.rows(), back.cols(), back.channels()), (rows, cols, channels));
            prop_assert_eq!(back.nodata().map(f32::to_bits), r.nodata().map(f32::to_bits));
            let a: Vec<u32> = r.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
