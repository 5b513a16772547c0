//! Little-endian binary primitives shared by the on-disk formats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_u16(w: &mut impl Write, v: u16, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_f32_slice(w: &mut impl Write, data: &[f32], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_f64_slice(w: &mut impl Write, data: &[f64], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::corrupt(path, format!("truncated while reading {what}")))
}

pub fn read_u16(r: &mut impl Read, path: &Path, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path, what)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_f32_vec(r: &mut impl Read, n: usize, path: &Path, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_f64_vec(r: &mut impl Read, n: usize, path: &Path, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf, path, what)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}

pub fn expect_magic(r: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<()> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, "magic")?;
    if &b != magic {
        return Err(Error::corrupt(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&b),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    Ok(())
}
