//! Byte-level image and matrix container formats.
//!
//! - Color images: binary PPM (P6, maxval 255), values quantized by
//!   round(clamp(c, 0, 1) * 255).
//! - Label images: binary PGM (P5, maxval 65535), big-endian sample bytes as
//!   PGM requires; ids must fit in u16.
//! - Float planes ("RAWF"): little-endian container with magic `RAWF`,
//!   version u32, then height, width, channels as u32, then
//!   height*width*channels f64 samples in row-major, channel-interleaved order.
//! - Sparse weight dumps ("SWMX"): little-endian; magic `SWMX`, version u32,
//!   n_gaussians u32, n_views u32, one patch-count u32 per view, triplet count
//!   u64, then (view u32, gaussian u32, patch u32, prob f64) triplets sorted by
//!   (view, gaussian, patch); then mass count u64 and (view u32, gaussian u32,
//!   mass f64) entries, sorted by (view, gaussian), for rows with nonzero
//!   labeled mass.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{format}: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error("{format}: value out of range: {reason}")]
    Range { format: &'static str, reason: String },
}

fn malformed(format: &'static str, reason: impl Into<String>) -> FormatError {
    FormatError::Malformed { format, reason: reason.into() }
}

// --- PPM (P6) ----------------------------------------------------------------

/// Writes an H*W*3 row-major f64 image as 8-bit binary PPM.
pub fn write_ppm<W: Write>(mut w: W, width: u32, height: u32, rgb: &[f64]) -> Result<(), FormatError> {
    if rgb.len() != (width as usize) * (height as usize) * 3 {
        return Err(malformed("ppm", format!("buffer length {} != {}x{}x3", rgb.len(), width, height)));
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    let mut bytes = Vec::with_capacity(rgb.len());
    for &c in rgb {
        bytes.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_ppm_to_path(path: impl AsRef<Path>, width: u32, height: u32, rgb: &[f64]) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_ppm(&mut buf, width, height, rgb)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_pnm_token<R: BufRead>(r: &mut R, format: &'static str) -> Result<String, FormatError> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(malformed(format, "unexpected end of header"));
            }
            return Ok(token);
        }
        let c = byte[0];
        if c == b'#' && token.is_empty() {
            // Comment runs to end of line.
            loop {
                if r.read(&mut byte)? == 0 || byte[0] == b'\n' {
                    break;
                }
            }
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c as char);
    }
}

/// Reads an 8-bit binary PPM into (width, height, rgb in [0,1]).
pub fn read_ppm<R: BufRead>(mut r: R) -> Result<(u32, u32, Vec<f64>), FormatError> {
    let magic = read_pnm_token(&mut r, "ppm")?;
    if magic != "P6" {
        return Err(malformed("ppm", format!("bad magic {magic:?}")));
    }
    let width: u32 = read_pnm_token(&mut r, "ppm")?.parse().map_err(|e| malformed("ppm", format!("width: {e}")))?;
    let height: u32 = read_pnm_token(&mut r, "ppm")?.parse().map_err(|e| malformed("ppm", format!("height: {e}")))?;
    let maxval: u32 = read_pnm_token(&mut r, "ppm")?.parse().map_err(|e| malformed("ppm", format!("maxval: {e}")))?;
    if maxval != 255 {
        return Err(malformed("ppm", format!("unsupported maxval {maxval}")));
    }
    let n = (width as usize) * (height as usize) * 3;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)?;
    Ok((width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect()))
}

// --- PGM (P5, 16-bit) ---------------------------------------------------------

/// Writes a label image as 16-bit binary PGM (maxval 65535, big-endian samples).
pub fn write_pgm16<W: Write>(mut w: W, width: u32, height: u32, ids: &[u32]) -> Result<(), FormatError> {
    if ids.len() != (width as usize) * (height as usize) {
        return Err(malformed("pgm", format!("buffer length {} != {}x{}", ids.len(), width, height)));
    }
    if let Some(&big) = ids.iter().find(|&&v| v > u16::MAX as u32) {
        return Err(FormatError::Range { format: "pgm", reason: format!("id {big} exceeds 16-bit maxval") });
    }
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let mut bytes = Vec::with_capacity(ids.len() * 2);
    for &id in ids {
        bytes.extend_from_slice(&(id as u16).to_be_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm16_to_path(path: impl AsRef<Path>, width: u32, height: u32, ids: &[u32]) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_pgm16(&mut buf, width, height, ids)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm16<R: BufRead>(mut r: R) -> Result<(u32, u32, Vec<u32>), FormatError> {
    let magic = read_pnm_token(&mut r, "pgm")?;
    if magic != "P5" {
        return Err(malformed("pgm", format!("bad magic {magic:?}")));
    }
    let width: u32 = read_pnm_token(&mut r, "pgm")?.parse().map_err(|e| malformed("pgm", format!("width: {e}")))?;
    let height: u32 = read_pnm_token(&mut r, "pgm")?.parse().map_err(|e| malformed("pgm", format!("height: {e}")))?;
    let maxval: u32 = read_pnm_token(&mut r, "pgm")?.parse().map_err(|e| malformed("pgm", format!("maxval: {e}")))?;
    if maxval != 65535 {
        return Err(malformed("pgm", format!("unsupported maxval {maxval}")));
    }
    let n = (width as usize) * (height as usize);
    let mut bytes = vec![0u8; n * 2];
    r.read_exact(&mut bytes)?;
    let ids = bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect();
    Ok((width, height, ids))
}

pub fn read_pgm16_from_path(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<u32>), FormatError> {
    let data = std::fs::read(path)?;
    read_pgm16(data.as_slice())
}

// --- RAWF float planes ---------------------------------------------------------

const RAWF_MAGIC: &[u8; 4] = b"RAWF";
const RAWF_VERSION: u32 = 1;

/// Writes an H*W*C row-major, channel-interleaved f64 plane stack.
pub fn write_rawf<W: Write>(mut w: W, width: u32, height: u32, channels: u32, data: &[f64]) -> Result<(), FormatError> {
    if data.len() != (width as usize) * (height as usize) * (channels as usize) {
        return Err(malformed("rawf", format!("buffer length {} != {}x{}x{}", data.len(), width, height, channels)));
    }
    w.write_all(RAWF_MAGIC)?;
    w.write_all(&RAWF_VERSION.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&channels.to_le_bytes())?;
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for &x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_rawf_to_path(path: impl AsRef<Path>, width: u32, height: u32, channels: u32, data: &[f64]) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_rawf(&mut buf, width, height, channels, data)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_rawf<R: Read>(mut r: R) -> Result<(u32, u32, u32, Vec<f64>), FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RAWF_MAGIC {
        return Err(malformed("rawf", format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != RAWF_VERSION {
        return Err(malformed("rawf", format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let height = u32::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let width = u32::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let channels = u32::from_le_bytes(word);
    let n = (width as usize) * (height as usize) * (channels as usize);
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((width, height, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_quantizes_once() {
        let rgb: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64 / 11.0).collect();
        let mut buf = Vec::new();
        write_ppm(&mut buf, 2, 2, &rgb).unwrap();
        assert!(buf.starts_with(b"P6\n2 2\n255\n"));
        let (w, h, back) = read_ppm(buf.as_slice()).unwrap();
        assert_eq!((w, h), (2, 2));
        for (orig, got) in rgb.iter().zip(&back) {
            assert!((orig - got).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Re-encoding the decoded image is byte-identical (quantization is stable).
        let mut buf2 = Vec::new();
        write_ppm(&mut buf2, 2, 2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn pgm16_round_trips_ids_exactly() {
        let ids = vec![0u32, 1, 2, 65535, 7, 42];
        let mut buf = Vec::new();
        write_pgm16(&mut buf, 3, 2, &ids).unwrap();
        let (w, h, back) = read_pgm16(buf.as_slice()).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(ids, back);
    }

    #[test]
    fn pgm16_rejects_oversize_ids() {
        let err = write_pgm16(&mut Vec::new(), 1, 1, &[70_000]).unwrap_err();
        assert!(matches!(err, FormatError::Range { .. }));
    }

    #[test]
    fn rawf_round_trips_bits_exactly() {
        let data = vec![0.0, -1.5, f64::MIN_POSITIVE, 1e300, -0.0, 3.141592653589793];
        let mut buf = Vec::new();
        write_rawf(&mut buf, 3, 1, 2, &data).unwrap();
        let (w, h, c, back) = read_rawf(buf.as_slice()).unwrap();
        assert_eq!((w, h, c), (3, 1, 2));
        assert_eq!(data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"P5\n# a comment line\n2 1\n65535\n");
        buf.extend_from_slice(&1u16.to_be_bytes());
        buf.extend_from_slice(&2u16.to_be_bytes());
        let (w, h, ids) = read_pgm16(buf.as_slice()).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(ids, vec![1, 2]);
    }
}
