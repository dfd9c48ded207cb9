//! AMCF binary matrix format.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | content                                  |
//! |-------:|-----:|------------------------------------------|
//! | 0      | 4    | magic `b"AMCF"`                          |
//! | 4      | 1    | version, `1`                             |
//! | 5      | 1    | dtype, `1` = IEEE-754 binary32           |
//! | 6      | 2    | reserved, zero                           |
//! | 8      | 4    | `n_rows` (u32)                           |
//! | 12     | 4    | `n_cols` (u32)                           |
//! | 16     | 4·n  | `n_rows * n_cols` f32 values, row-major  |

use std::fs;
use std::path::Path;

use super::{DatasetError, EmbeddingMatrix, Result};
use crate::modality::Modality;

pub const MAGIC: [u8; 4] = *b"AMCF";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 16;

/// Serializes `matrix` to AMCF bytes. Values are narrowed to `f32`.
pub fn encode(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let (n_rows, n_cols) = (matrix.n_rows(), matrix.n_cols());
    if n_rows == 0 || n_cols == 0 {
        return Err(DatasetError::EmptyMatrix { n_rows, n_cols });
    }
    let too_big = |_| DatasetError::Manifest(format!("matrix {n_rows}x{n_cols} exceeds u32 dimensions"));
    let rows32 = u32::try_from(n_rows).map_err(too_big)?;
    let cols32 = u32::try_from(n_cols).map_err(too_big)?;

    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n_rows * n_cols);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    for (idx, &v) in matrix.data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(DatasetError::NonFiniteValue {
                offset: (HEADER_LEN + idx * 4) as u64,
                row: idx / n_cols,
                col: idx % n_cols,
            });
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

/// Parses AMCF bytes.
pub fn decode(bytes: &[u8], modality: Modality) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(DatasetError::BadMagic {
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(DatasetError::TruncatedFile {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic {
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes[4] != VERSION {
        return Err(DatasetError::UnsupportedVersion { version: bytes[4] });
    }
    if bytes[5] != DTYPE_F32 {
        return Err(DatasetError::UnsupportedDtype { dtype: bytes[5] });
    }
    let n_rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n_rows == 0 || n_cols == 0 {
        return Err(DatasetError::EmptyMatrix { n_rows, n_cols });
    }
    let expected = HEADER_LEN as u64 + 4 * n_rows as u64 * n_cols as u64;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(DatasetError::TruncatedFile { expected, actual });
    }
    if actual > expected {
        return Err(DatasetError::TrailingBytes { expected, actual });
    }

    let mut data = Vec::with_capacity(n_rows * n_cols);
    for (idx, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DatasetError::NonFiniteValue {
                offset: (HEADER_LEN + idx * 4) as u64,
                row: idx / n_cols,
                col: idx % n_cols,
            });
        }
        data.push(f64::from(v));
    }
    EmbeddingMatrix::new(modality, n_rows, n_cols, data)
}

pub fn write_embedding_matrix(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(matrix)?;
    crate::util::write_atomic(path, &bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an AMCF file; the modality tag is supplied by the caller since the
/// format does not store it.
pub fn read_embedding_matrix(path: impl AsRef<Path>, modality: Modality) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: Vec<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Modality::Text, rows, cols, data).unwrap()
    }

    #[test]
    fn minimal_file_is_twenty_bytes() {
        let bytes = encode(&m(1, 1, vec![0.0])).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(
            bytes,
            [0x41, 0x4D, 0x43, 0x46, 1, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn two_by_three_is_forty_bytes() {
        let bytes = encode(&m(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        // 1.0f32 little-endian
        assert_eq!(&bytes[16..20], &[0, 0, 0x80, 0x3F]);
    }

    #[test]
    fn empty_matrix_rejected() {
        let e = EmbeddingMatrix::zeros(Modality::Text, 0, 3);
        assert!(matches!(encode(&e), Err(DatasetError::EmptyMatrix { .. })));
    }

    #[test]
    fn f32_overflow_rejected_on_write() {
        let e = m(1, 2, vec![0.0, 1e300]);
        assert!(matches!(
            encode(&e),
            Err(DatasetError::NonFiniteValue {
                offset: 20,
                row: 0,
                col: 1
            })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&m(1, 1, vec![1.0])).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode(&bytes, Modality::Text),
            Err(DatasetError::BadMagic { found }) if &found == b"XXXX"
        ));
    }

    #[test]
    fn bad_version_and_dtype() {
        let mut bytes = encode(&m(1, 1, vec![1.0])).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode(&bytes, Modality::Text),
            Err(DatasetError::UnsupportedVersion { version: 2 })
        ));
        bytes[4] = 1;
        bytes[5] = 2;
        assert!(matches!(
            decode(&bytes, Modality::Text),
            Err(DatasetError::UnsupportedDtype { dtype: 2 })
        ));
    }

    #[test]
    fn truncated_mid_payload_reports_sizes() {
        let bytes = encode(&m(2, 3, vec![0.5; 6])).unwrap();
        let cut = &bytes[..30];
        match decode(cut, Modality::Text) {
            Err(DatasetError::TruncatedFile { expected, actual }) => {
                assert_eq!(expected, 40);
                assert_eq!(actual, 30);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode(&bytes[..10], Modality::Text),
            Err(DatasetError::TruncatedFile {
                expected: 16,
                actual: 10
            })
        ));
    }

    #[test]
    fn non_finite_payload_names_offset() {
        let mut bytes = encode(&m(1, 2, vec![0.0, 0.0])).unwrap();
        bytes[20..24].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            decode(&bytes, Modality::Text),
            Err(DatasetError::NonFiniteValue {
                offset: 20,
                row: 0,
                col: 1
            })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.amcf");
        let mat = m(2, 2, vec![1.5, -2.25, 3.0, 0.125]);
        write_embedding_matrix(&mat, &p).unwrap();
        assert_eq!(read_embedding_matrix(&p, Modality::Text).unwrap(), mat);
    }
}
