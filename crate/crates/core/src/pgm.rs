//! Binary PGM (P5) interchange, 8-bit and 16-bit big-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::preprocess::GrayImage;

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let maxval = image.max_level();
    write!(f, "P5\n{} {}\n{}\n", image.width, image.height, maxval)?;
    if image.bits == 8 {
        let bytes: Vec<u8> = image.levels().iter().map(|&v| v as u8).collect();
        f.write_all(&bytes)?;
    } else {
        let levels = image.levels();
        let mut bytes = Vec::with_capacity(levels.len() * 2);
        for v in levels {
            bytes.extend_from_slice(&(v as u16).to_be_bytes());
        }
        f.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_pgm(&buf).map_err(|e| CoreError::format(format!("{}: {}", path.display(), e)))
}

fn parse_pgm(buf: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // Skip whitespace and '#' comment lines.
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::format("truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };

    if token()? != "P5" {
        return Err(CoreError::format("not a binary PGM (missing P5 magic)"));
    }
    let width: usize = token()?
        .parse()
        .map_err(|_| CoreError::format("bad PGM width"))?;
    let height: usize = token()?
        .parse()
        .map_err(|_| CoreError::format("bad PGM height"))?;
    let maxval: u32 = token()?
        .parse()
        .map_err(|_| CoreError::format("bad PGM maxval"))?;
    if width == 0 || height == 0 {
        return Err(CoreError::format("degenerate PGM dimensions"));
    }
    let bits = match maxval {
        255 => 8,
        65535 => 16,
        _ => {
            return Err(CoreError::format(format!(
                "unsupported PGM maxval {} (need 255 or 65535)",
                maxval
            )))
        }
    };
    // Exactly one whitespace byte separates header and raster.
    pos += 1;
    let n = width * height;
    let levels: Vec<u32> = if bits == 8 {
        if buf.len() < pos + n {
            return Err(CoreError::format("PGM raster truncated"));
        }
        buf[pos..pos + n].iter().map(|&b| b as u32).collect()
    } else {
        if buf.len() < pos + 2 * n {
            return Err(CoreError::format("PGM raster truncated"));
        }
        buf[pos..pos + 2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    };
    GrayImage::from_levels(height, width, bits, levels)
}
