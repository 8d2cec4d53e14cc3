//! Binary PGM (P5, maxval 255) and the raw little-endian f32 map format.

use std::io::Write;
use std::path::Path;

use crate::error::{AppError, Result};

#[derive(Debug)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height).expect("in-memory write");
    out.extend_from_slice(&img.pixels);
    std::fs::write(path, out)
        .map_err(|e| AppError::Io(format!("writing {}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path)
        .map_err(|e| AppError::Io(format!("reading {}: {e}", path.display())))?;
    parse_pgm(&bytes).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// Parse a binary PGM. Errors carry the byte offset of the problem.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let take_token = |pos: &mut usize| -> std::result::Result<Vec<u8>, String> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        if *pos >= bytes.len() {
            return Err(format!("unexpected end of header at byte {pos}"));
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        Ok(bytes[start..*pos].to_vec())
    };

    let magic = take_token(&mut pos)?;
    if magic != b"P5" {
        return Err(format!("bad magic at byte 0: expected P5"));
    }
    let parse_num = |tok: Vec<u8>, pos: usize| -> std::result::Result<usize, String> {
        String::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format!("bad integer in header near byte {pos}"))
    };
    let width = parse_num(take_token(&mut pos)?, pos)?;
    let height = parse_num(take_token(&mut pos)?, pos)?;
    let maxval = parse_num(take_token(&mut pos)?, pos)?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} at byte {pos} (want 255)"));
    }
    // Exactly one whitespace byte separates header from payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format!("missing header terminator at byte {pos}"));
    }
    pos += 1;
    let want = width * height;
    let have = bytes.len() - pos;
    if have != want {
        return Err(format!(
            "payload at byte {pos}: expected {want} pixel bytes, found {have}"
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..].to_vec(),
    })
}

/// Raw float map: magic "PDDM", u32 LE height, u32 LE width, u32 reserved,
/// then h*w little-endian f32 values.
pub const RAW_MAP_MAGIC: &[u8; 4] = b"PDDM";

pub fn write_raw_map(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let mut out = Vec::with_capacity(16 + values.len() * 4);
    out.extend_from_slice(RAW_MAP_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)
        .map_err(|e| AppError::Io(format!("writing {}: {e}", path.display())))
}

pub fn read_raw_map(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| AppError::Io(format!("reading {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[0..4] != RAW_MAP_MAGIC {
        return Err(AppError::Io(format!(
            "{}: not a raw map (bad magic or truncated header)",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = 16 + h * w * 4;
    if bytes.len() != want {
        return Err(AppError::Io(format!(
            "{}: expected {want} bytes for {h}x{w}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 127, 255, 1, 2, 3],
        };
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.pixels, img.pixels);
        // Writing again produces identical bytes.
        let first = std::fs::read(&path).unwrap();
        write_pgm(&path, &back).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn pgm_errors_carry_byte_offsets() {
        let err = parse_pgm(b"P2\n2 2\n255\n0000").unwrap_err();
        assert!(err.contains("magic"), "{err}");
        let err = parse_pgm(b"P5\n2 2\n255\n123").unwrap_err();
        assert!(err.contains("expected 4 pixel bytes"), "{err}");
        let err = parse_pgm(b"P5\n2 2\n65535\n").unwrap_err();
        assert!(err.contains("maxval"), "{err}");
    }

    #[test]
    fn pgm_comments_in_header() {
        let img = parse_pgm(b"P5\n# a comment\n2 1\n255\nAB").unwrap();
        assert_eq!(img.pixels, b"AB");
    }

    #[test]
    fn raw_map_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let vals: Vec<f32> = (0..12).map(|i| i as f32 * 0.5).collect();
        write_raw_map(&path, 3, 4, &vals).unwrap();
        let (h, w, back) = read_raw_map(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, vals);
    }
}
