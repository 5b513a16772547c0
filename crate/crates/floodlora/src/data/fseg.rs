//! FSEG raster container.
//!
//! Header: magic `FSEG`, u16 version, u16 channel count, u32 height,
//! u32 width, all little-endian. Payload is channel-major: `f32` for
//! backscatter rasters, `u8` for masks (channel count 1).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::wire;

const MAGIC: &[u8; 4] = b"FSEG";
const VERSION: u16 = 1;

pub struct RasterHeader {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn write_header(w: &mut impl Write, channels: u16, h: u32, width: u32, path: &Path) -> Result<()> {
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    wire::write_u16(w, VERSION, path)?;
    wire::write_u16(w, channels, path)?;
    wire::write_u32(w, h, path)?;
    wire::write_u32(w, width, path)
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<RasterHeader> {
    wire::expect_magic(r, MAGIC, path)?;
    let version = wire::read_u16(r, path, "version")?;
    if version != VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let channels = wire::read_u16(r, path, "channel count")? as usize;
    let height = wire::read_u32(r, path, "height")? as usize;
    let width = wire::read_u32(r, path, "width")? as usize;
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::corrupt(path, "zero extent in header"));
    }
    Ok(RasterHeader {
        channels,
        height,
        width,
    })
}

/// Write a `f32` raster, `data` channel-major with `channels·h·w` values.
pub fn write_raster(path: &Path, channels: usize, h: usize, w: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), channels * h * w, "raster payload size");
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_header(&mut out, channels as u16, h as u32, w as u32, path)?;
    wire::write_f32_slice(&mut out, data, path)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<(RasterHeader, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(&mut r, path)?;
    let n = header.channels * header.height * header.width;
    let data = wire::read_f32_vec(&mut r, n, path, "raster payload")?;
    Ok((header, data))
}

/// Write a binary mask (`u8` payload, channel count 1).
pub fn write_mask(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), h * w, "mask payload size");
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_header(&mut out, 1, h as u32, w as u32, path)?;
    out.write_all(data).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<(RasterHeader, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(&mut r, path)?;
    if header.channels != 1 {
        return Err(Error::corrupt(
            path,
            format!("mask must have 1 channel, got {}", header.channels),
        ));
    }
    let mut data = vec![0u8; header.height * header.width];
    wire::read_exact(&mut r, &mut data, path, "mask payload")?;
    if data.iter().any(|&v| v > 1) {
        return Err(Error::corrupt(path, "mask values must be 0 or 1"));
    }
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fseg");
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.37 - 1.0).collect();
        write_raster(&path, 2, 3, 4, &data).unwrap();
        let (h, back) = read_raster(&path).unwrap();
        assert_eq!((h.channels, h.height, h.width), (2, 3, 4));
        assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn mask_roundtrip_and_value_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fseg");
        write_mask(&path, 2, 2, &[0, 1, 1, 0]).unwrap();
        let (_, back) = read_mask(&path).unwrap();
        assert_eq!(back, vec![0, 1, 1, 0]);
        write_mask(&path, 1, 2, &[0, 7]).unwrap();
        assert!(matches!(read_mask(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fseg");
        write_raster(&path, 1, 4, 4, &[1.0; 16]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_raster(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fseg");
        std::fs::write(&path, b"NOPE then some longer garbage payload").unwrap();
        assert!(matches!(read_raster(&path), Err(Error::Corrupt { .. })));
    }
}
