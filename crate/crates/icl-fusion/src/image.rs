//! Single-channel images and their two on-disk forms.
//!
//! Pixels are reals in [0, 1], row-major. Files are either portable graymaps
//! (P5, maxval 255) or a raw little-endian format: a 16-byte header holding
//! height and width as u64, then `h*w` f64 pixels.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::digest::{digest_parts, f64_bytes, Digest32};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in [0, 1].
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension {
                op: "image",
                detail: format!("zero-area image {height}x{width}"),
            });
        }
        if pixels.len() != height * width {
            return Err(Error::Dimension {
                op: "image",
                detail: format!(
                    "{height}x{width} wants {} pixels, got {}",
                    height * width,
                    pixels.len()
                ),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Dimension {
                op: "image",
                detail: "pixel outside [0, 1]".into(),
            });
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Image::new(height, width, vec![0.0; height * width])
    }

    /// Content digest over dimensions and raw pixel bytes.
    pub fn digest(&self) -> Digest32 {
        digest_parts(&[
            &(self.height as u64).to_le_bytes(),
            &(self.width as u64).to_le_bytes(),
            &f64_bytes(&self.pixels),
        ])
    }

    /// Zero-pad to a square whose side is a multiple of `patch`. Idempotent:
    /// padding an already-padded image changes nothing.
    pub fn pad_to_square(&self, patch: usize) -> Image {
        let side = self.height.max(self.width).div_ceil(patch) * patch;
        if side == self.height && side == self.width {
            return self.clone();
        }
        let mut pixels = vec![0.0; side * side];
        for r in 0..self.height {
            pixels[r * side..r * side + self.width]
                .copy_from_slice(&self.pixels[r * self.width..(r + 1) * self.width]);
        }
        Image {
            height: side,
            width: side,
            pixels,
        }
    }
}

// ── File formats ─────────────────────────────────────────────────────

/// Write as binary PGM (P5, maxval 255). Intensities are scaled to bytes.
pub fn write_pgm(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    for &p in &img.pixels {
        out.push((p * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|detail| Error::Corruption(format!("{}: {detail}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    // magic + three whitespace-separated header fields, '#' starts a comment
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != "P5" {
        return Err(format!("not a P5 graymap (magic {:?})", fields[0]));
    }
    let width: usize = fields[1].parse().map_err(|_| "bad width")?;
    let height: usize = fields[2].parse().map_err(|_| "bad height")?;
    let maxval: usize = fields[3].parse().map_err(|_| "bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let need = height * width;
    if bytes.len() < pos + need {
        return Err(format!(
            "pixel data truncated: want {need}, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let pixels: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Image::new(height, width, pixels).map_err(|e| e.to_string())
}

/// Raw float format: 16-byte header {height u64 LE, width u64 LE}, then
/// h*w f64 LE pixels.
pub fn write_raw(img: &Image, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&(img.height as u64).to_le_bytes())?;
    f.write_all(&(img.width as u64).to_le_bytes())?;
    f.write_all(&f64_bytes(&img.pixels))?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Image> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| Error::Corruption(format!("{}: truncated header", path.display())))?;
    let height = u64::from_le_bytes(header[0..8].try_into().unwrap()) as usize;
    let width = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() != height * width * 8 {
        return Err(Error::Corruption(format!(
            "{}: want {} pixel bytes, have {}",
            path.display(),
            height * width * 8,
            buf.len()
        )));
    }
    let pixels: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(height, width, pixels)
        .map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))
}

/// Dispatch on extension: `.pgm` is P5, anything else the raw format.
pub fn read_image(path: &Path) -> Result<Image> {
    if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
        read_pgm(path)
    } else {
        read_raw(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_area() {
        assert!(Image::new(0, 4, vec![]).is_err());
    }

    #[test]
    fn pad_to_square_is_idempotent() {
        let img = Image::new(3, 6, vec![0.5; 18]).unwrap();
        let once = img.pad_to_square(4);
        assert_eq!(once.height, 8);
        assert_eq!(once.width, 8);
        let twice = once.pad_to_square(4);
        assert_eq!(once, twice);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let pixels: Vec<f64> = (0..12).map(|i| (i * 17 % 256) as f64 / 255.0).collect();
        let img = Image::new(3, 4, pixels).unwrap();
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn raw_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.f64");
        let img = Image::new(2, 5, (0..10).map(|i| i as f64 / 10.0).collect()).unwrap();
        write_raw(&img, &path).unwrap();
        assert_eq!(read_raw(&path).unwrap(), img);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_raw(&path), Err(Error::Corruption(_))));
    }

    #[test]
    fn pgm_with_comment_parses() {
        let mut data = b"P5\n# synthetic\n2 2\n255\n".to_vec();
        data.extend_from_slice(&[0, 128, 255, 64]);
        let img = parse_pgm(&data).unwrap();
        assert_eq!(img.height, 2);
        assert_eq!(img.width, 2);
        assert!((img.pixels[1] - 128.0 / 255.0).abs() < 1e-12);
    }
}
