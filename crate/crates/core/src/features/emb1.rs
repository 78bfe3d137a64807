//! EMB1: `"EMB1"`, u32 LE rows, u32 LE cols, then `rows·cols` f32 LE values
//! in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const MAGIC: &[u8; 4] = b"EMB1";
const HEADER: usize = 12;

pub fn encode_embedding(m: &Mat) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::InvalidArgument("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::InvalidArgument("too many columns".into()))?;
    let mut bytes = Vec::with_capacity(HEADER + 4 * m.as_slice().len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    for &x in m.as_slice() {
        let single = x as f32;
        if !single.is_finite() {
            return Err(Error::InvalidArgument(format!("{x} does not fit in 32-bit float")));
        }
        bytes.extend_from_slice(&single.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<Mat> {
    let corrupt = || Error::CorruptFile(path.to_path_buf());
    if bytes.len() < MAGIC.len() {
        return Err(corrupt());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::NotEmbeddingFile(path.to_path_buf()));
    }
    if bytes.len() < HEADER {
        return Err(corrupt());
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(HEADER));
    if expected != Some(bytes.len()) {
        return Err(corrupt());
    }
    let data: Vec<f64> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidPayload(path.to_path_buf()));
    }
    Mat::new(rows, cols, data)
}

pub fn write_embedding_file(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    fs::write(path, encode_embedding(m)?)?;
    Ok(())
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<Mat> {
    let path = path.as_ref();
    decode_embedding(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32_matrix(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| f64::from(rng.random_range(-1.0f32..1.0)))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        let m = f32_matrix(49, 32, 1);
        write_embedding_file(&path, &m).unwrap();
        let back = read_embedding_file(&path).unwrap();
        assert_eq!(back.shape(), (49, 32));
        assert!(m.as_slice().iter().zip(back.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(encode_embedding(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_embedding(&Mat::new(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20);
    }

    #[test]
    fn zero_byte_file_is_corrupt() {
        let err = decode_embedding(&[], Path::new("empty")).unwrap_err();
        assert!(err.to_string().contains("corrupt file"));
    }

    #[test]
    fn short_payload_is_corrupt() {
        let mut bytes = encode_embedding(&Mat::zeros(2, 2)).unwrap();
        bytes.truncate(HEADER + 12);
        assert!(matches!(decode_embedding(&bytes, Path::new("p")), Err(Error::CorruptFile(_))));
        bytes.truncate(8);
        assert!(matches!(decode_embedding(&bytes, Path::new("p")), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_embedding(&Mat::zeros(1, 1)).unwrap();
        bytes[0] = b'X';
        let err = decode_embedding(&bytes, Path::new("p")).unwrap_err();
        assert!(err.to_string().contains("not an embedding file"));
    }

    #[test]
    fn non_finite_payload_is_invalid() {
        let mut bytes = encode_embedding(&Mat::zeros(1, 2)).unwrap();
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_embedding(&bytes, Path::new("p")).unwrap_err();
        assert!(err.to_string().contains("invalid payload"));
    }

    #[test]
    fn values_outside_f32_range_are_refused() {
        assert!(encode_embedding(&Mat::filled(1, 1, 1e300)).is_err());
    }
}
