//! Binary vector file.
//!
//! Layout: magic `VRAG`, u32 version (1), u32 dimension, u64 count, then
//! `count * dimension` little-endian f32 values in row-major order. All header
//! integers are little-endian.

use std::io::{Read, Write};

use super::FkdError;

pub const MAGIC: &[u8; 4] = b"VRAG";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 8;

pub fn write_vectors<W: Write>(mut w: W, dimension: usize, rows: &[f32]) -> Result<(), FkdError> {
    if dimension == 0 || !rows.len().is_multiple_of(dimension) {
        return Err(FkdError::CorruptVectorFile(format!(
            "{} values do not split into rows of {dimension}",
            rows.len()
        )));
    }
    let count = (rows.len() / dimension) as u64;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dimension as u32).to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    let mut buf = Vec::with_capacity(rows.len() * 4);
    for x in rows {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode(dimension: usize, rows: &[f32]) -> Result<Vec<u8>, FkdError> {
    let mut out = Vec::with_capacity(HEADER_LEN + rows.len() * 4);
    write_vectors(&mut out, dimension, rows)?;
    Ok(out)
}

/// Decodes a vector file, returning `(dimension, row-major values)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, Vec<f32>), FkdError> {
    if bytes.len() < HEADER_LEN {
        return Err(FkdError::CorruptVectorFile("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(FkdError::CorruptVectorFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FkdError::VersionUnsupported(version));
    }
    let dimension = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (count as u128) * (dimension as u128) * 4;
    let body = &bytes[HEADER_LEN..];
    if body.len() as u128 != expected {
        return Err(FkdError::CorruptVectorFile(format!(
            "header declares {count}x{dimension} floats but body has {} bytes",
            body.len()
        )));
    }
    let rows = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dimension, rows))
}

pub fn read_vectors<R: Read>(mut r: R) -> Result<(usize, Vec<f32>), FkdError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = encode(2, &[1.0, -2.5]).unwrap();
        let mut expected = b"VRAG".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = encode(1, &[0.5]).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(FkdError::VersionUnsupported(2))));
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let bytes = encode(2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(FkdError::CorruptVectorFile(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FkdError::CorruptVectorFile(_))));
    }

    proptest! {
        #[test]
        fn round_trip_bits(dim in 1usize..9, rows in prop::collection::vec(any::<f32>(), 0..64)) {
            let n = rows.len() / dim * dim;
            let rows = &rows[..n];
            let (d, back) = decode(&encode(dim, rows).unwrap()).unwrap();
            prop_assert_eq!(d, dim);
            let a: Vec<u32> = rows.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
