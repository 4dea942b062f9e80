//! Binary PPM/PGM readers and writers.
//!
//! P6 8-bit color, P5 8-bit gray, and P5 16-bit gray with big-endian
//! samples, per the netpbm formats. Headers may contain comments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { format: "pnm", detail: detail.into() }
}

/// Reads the magic, width, height and maxval tokens, skipping whitespace
/// and '#' comments, and leaves the reader at the first raster byte.
fn read_header(r: &mut impl Read, magic: &str) -> Result<(usize, usize, u32)> {
    let mut bytes = r.bytes();
    let mut tokens: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut in_comment = false;
    while tokens.len() < 4 {
        let b = match bytes.next() {
            Some(b) => b?,
            None => return Err(bad("truncated header")),
        };
        let c = b as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            // the single whitespace byte after maxval ends the header
            continue;
        }
        cur.push(c);
    }
    if tokens[0] != magic {
        return Err(bad(format!("expected {}, got {}", magic, tokens[0])));
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| bad(format!("bad header token '{}'", s)));
    let w = parse(&tokens[1])? as usize;
    let h = parse(&tokens[2])? as usize;
    let maxval = parse(&tokens[3])?;
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    Ok((w, h, maxval))
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| bad("truncated raster"))?;
    Ok(buf)
}

/// 8-bit color image; returns interleaved r,g,b rows.
pub fn read_ppm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (w, h, maxval) = read_header(&mut r, "P6")?;
    if maxval != 255 {
        return Err(bad(format!("expected maxval 255, got {}", maxval)));
    }
    let data = read_exact_vec(&mut r, w * h * 3)?;
    Ok((w, h, data))
}

pub fn write_ppm8(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::shape("write_ppm8", format!("{} bytes for {}x{}", rgb.len(), w, h)));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    out.write_all(rgb)?;
    Ok(())
}

pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (w, h, maxval) = read_header(&mut r, "P5")?;
    if maxval != 255 {
        return Err(bad(format!("expected maxval 255, got {}", maxval)));
    }
    let data = read_exact_vec(&mut r, w * h)?;
    Ok((w, h, data))
}

pub fn write_pgm8(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::shape("write_pgm8", format!("{} bytes for {}x{}", gray.len(), w, h)));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", w, h)?;
    out.write_all(gray)?;
    Ok(())
}

/// 16-bit gray, big-endian samples.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (w, h, maxval) = read_header(&mut r, "P5")?;
    if maxval != 65535 {
        return Err(bad(format!("expected maxval 65535, got {}", maxval)));
    }
    let raw = read_exact_vec(&mut r, w * h * 2)?;
    let data = raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, data))
}

pub fn write_pgm16(path: &Path, w: usize, h: usize, gray: &[u16]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::shape("write_pgm16", format!("{} samples for {}x{}", gray.len(), w, h)));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n65535\n", w, h)?;
    for v in gray {
        out.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let data: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        write_ppm8(&p, 3, 2, &data).unwrap();
        let (w, h, got) = read_ppm8(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(got, data);
    }

    #[test]
    fn pgm16_round_trip_preserves_high_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        let data = vec![0u16, 255, 256, 65535, 30000, 1];
        write_pgm16(&p, 3, 2, &data).unwrap();
        let (w, h, got) = read_pgm16(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(got, data);
    }

    #[test]
    fn pgm8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        let data = vec![0u8, 255, 5, 4];
        write_pgm8(&p, 2, 2, &data).unwrap();
        assert_eq!(read_pgm8(&p).unwrap().2, data);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# a comment\n2 1\n255\n\x07\x09").unwrap();
        let (w, h, got) = read_pgm8(&p).unwrap();
        assert_eq!((w, h, got), (2, 1, vec![7, 9]));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P5\n2 2\n255\n\x00").unwrap(); // truncated raster
        assert!(read_pgm8(&p).is_err());
        std::fs::write(&p, b"P6\n2 2\n255\n____________").unwrap(); // wrong magic
        assert!(read_pgm8(&p).is_err());
        std::fs::write(&p, b"P5\n2 x\n255\n__").unwrap(); // bad token
        assert!(read_pgm8(&p).is_err());
    }
}
