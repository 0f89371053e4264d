//! Binary matrix blobs: the `DNFM` format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "DNFM" | version u16 | rows u32 | cols u32 | dtype u8 | payload
//! ```
//!
//! dtype 0 is f64 (the working precision), dtype 1 is f32 (export only;
//! loading converts back to f64). Payload is row-major. Checkpoints embed
//! these blobs back to back after a JSON header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Matrix;

pub const MAGIC: &[u8; 4] = b"DNFM";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            t => Err(Error::CorruptFile(format!("unknown dtype tag {t}"))),
        }
    }
}

/// Writes one matrix blob into `w`.
pub fn write_matrix(w: &mut impl Write, m: &Matrix, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let rows = u32::try_from(m.rows())
        .map_err(|_| Error::InvalidArgument("rows exceed u32".into()))?;
    let cols = u32::try_from(m.cols())
        .map_err(|_| Error::InvalidArgument("cols exceed u32".into()))?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    w.write_all(&[dtype.tag()])?;
    match dtype {
        Dtype::F64 => {
            for x in m.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for x in m.as_slice() {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::CorruptFile(format!("truncated while reading {what}")))
}

/// Reads one matrix blob from `r`. f32 payloads are widened to f64.
pub fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    // A missing magic is indistinguishable from an empty stream; both are
    // reported as a format mismatch so callers can name the expected format.
    r.read_exact(&mut magic)
        .map_err(|_| Error::CorruptFile("truncated before matrix magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::VersionMismatch {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: format!("{:?}", magic),
        });
    }
    let mut v = [0u8; 2];
    read_exact_or_corrupt(r, &mut v, "matrix version")?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: format!("DNFM v{VERSION}"),
            found: format!("DNFM v{version}"),
        });
    }
    let mut b4 = [0u8; 4];
    read_exact_or_corrupt(r, &mut b4, "matrix rows")?;
    let rows = u32::from_le_bytes(b4) as usize;
    read_exact_or_corrupt(r, &mut b4, "matrix cols")?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut tag = [0u8; 1];
    read_exact_or_corrupt(r, &mut tag, "matrix dtype")?;
    let dtype = Dtype::from_tag(tag[0])?;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::CorruptFile("matrix dimensions overflow".into()))?;
    let mut data = Vec::with_capacity(count);
    match dtype {
        Dtype::F64 => {
            let mut b8 = [0u8; 8];
            for _ in 0..count {
                read_exact_or_corrupt(r, &mut b8, "matrix payload")?;
                data.push(f64::from_le_bytes(b8));
            }
        }
        Dtype::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..count {
                read_exact_or_corrupt(r, &mut b, "matrix payload")?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
    }
    Matrix::from_vec_finite(rows, cols, data)
        .map_err(|_| Error::CorruptFile("non-finite matrix payload".into()))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    let m = read_matrix(&mut r)?;
    // Trailing bytes mean the file is not a single blob.
    let mut rest = [0u8; 1];
    match r.read(&mut rest)? {
        0 => Ok(m),
        _ => Err(Error::CorruptFile("trailing bytes after matrix payload".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn roundtrip_bytes(m: &Matrix, dtype: Dtype) -> Vec<u8> {
        let mut buf = Vec::new();
        write_matrix(&mut buf, m, dtype).unwrap();
        buf
    }

    #[test]
    fn f64_roundtrip_is_bit_exact() {
        let m = Rng::new(4).gaussian_matrix(5, 7);
        let bytes = roundtrip_bytes(&m, Dtype::F64);
        let back = read_matrix(&mut bytes.as_slice()).unwrap();
        assert_eq!(m.as_slice().len(), back.as_slice().len());
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_export_roundtrips_with_expected_loss() {
        let m = Rng::new(4).gaussian_matrix(3, 3);
        let bytes = roundtrip_bytes(&m, Dtype::F32);
        let back = read_matrix(&mut bytes.as_slice()).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(*b, *a as f32 as f64);
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let m = Rng::new(4).gaussian_matrix(4, 4);
        let bytes = roundtrip_bytes(&m, Dtype::F64);
        let cut = &bytes[..bytes.len() - 3];
        match read_matrix(&mut &cut[..]) {
            Err(Error::CorruptFile(_)) => {}
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let m = Rng::new(4).gaussian_matrix(2, 2);
        let mut bytes = roundtrip_bytes(&m, Dtype::F64);
        bytes[0] = b'X';
        match read_matrix(&mut bytes.as_slice()) {
            Err(Error::VersionMismatch { .. }) => {}
            other => panic!("expected version-mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn future_version_is_version_mismatch() {
        let m = Rng::new(4).gaussian_matrix(2, 2);
        let mut bytes = roundtrip_bytes(&m, Dtype::F64);
        bytes[4] = 9; // version LE low byte
        match read_matrix(&mut bytes.as_slice()) {
            Err(Error::VersionMismatch { .. }) => {}
            other => panic!("expected version-mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn nan_payload_is_corrupt() {
        let m = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
        let bytes = roundtrip_bytes(&m, Dtype::F64);
        match read_matrix(&mut bytes.as_slice()) {
            Err(Error::CorruptFile(_)) => {}
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dnfm");
        let m = Rng::new(8).gaussian_matrix(6, 2);
        save_matrix(&path, &m, Dtype::F64).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn trailing_bytes_rejected_for_single_blob_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dnfm");
        let m = Rng::new(8).gaussian_matrix(2, 2);
        let mut bytes = Vec::new();
        write_matrix(&mut bytes, &m, Dtype::F64).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_matrix(&path), Err(Error::CorruptFile(_))));
    }
}
