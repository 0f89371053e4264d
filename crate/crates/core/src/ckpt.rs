//! Checkpoint container: a JSON header followed by matrix blobs.
//!
//! ```text
//! "DNCK" | version u16 | header_len u32 | blob_count u32 | header JSON | DNFM blobs
//! ```
//!
//! All integers little-endian. The header carries shape/provenance metadata
//! and is written with deterministic field order, so identical inputs give
//! byte-identical files; content hashes of checkpoints are therefore stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::io::{read_matrix, write_matrix, Dtype};
use crate::numerics::Matrix;

pub(crate) const MAGIC: &[u8; 4] = b"DNCK";
pub(crate) const VERSION: u16 = 1;

pub(crate) fn write_container<H: Serialize>(
    w: &mut impl Write,
    header: &H,
    blobs: &[&Matrix],
) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| Error::InvalidArgument(format!("unserializable header: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let len = u32::try_from(header_bytes.len())
        .map_err(|_| Error::InvalidArgument("header too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    let count = u32::try_from(blobs.len())
        .map_err(|_| Error::InvalidArgument("too many blobs".into()))?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for m in blobs {
        write_matrix(w, m, Dtype::F64)?;
    }
    Ok(())
}

pub(crate) fn read_container<H: DeserializeOwned>(r: &mut impl Read) -> Result<(H, Vec<Matrix>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CorruptFile("truncated before checkpoint magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::VersionMismatch {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: format!("{:?}", magic),
        });
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)
        .map_err(|_| Error::CorruptFile("truncated checkpoint version".into()))?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: format!("DNCK v{VERSION}"),
            found: format!("DNCK v{version}"),
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::CorruptFile("truncated checkpoint header length".into()))?;
    let header_len = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)
        .map_err(|_| Error::CorruptFile("truncated checkpoint blob count".into()))?;
    let blob_count = u32::from_le_bytes(b4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::CorruptFile("truncated checkpoint header".into()))?;
    let header: H = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CorruptFile(format!("bad checkpoint header: {e}")))?;
    let mut blobs = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        blobs.push(read_matrix(r)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::CorruptFile("trailing bytes after checkpoint blobs".into()));
    }
    Ok((header, blobs))
}

pub(crate) fn container_to_bytes<H: Serialize>(header: &H, blobs: &[&Matrix]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_container(&mut buf, header, blobs)?;
    Ok(buf)
}

pub(crate) fn save_container<H: Serialize>(
    path: impl AsRef<Path>,
    header: &H,
    blobs: &[&Matrix],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, header, blobs)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn load_container<H: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(H, Vec<Matrix>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_container(&mut r)
}

/// Hex SHA-256 of arbitrary bytes; used for checkpoint provenance.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
