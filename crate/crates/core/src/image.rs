//! 8-bit grayscale images stored as binary PGM (`P5`, maxval 255).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Pixel intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width * height != pixels.len() || pixels.is_empty() {
            return Err(Error::param(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Maps `[0, 1]` to the model domain `[-1, 1]`.
    pub fn to_signed(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| 2.0 * p - 1.0).collect()
    }

    /// Inverse of [`GrayImage::to_signed`]. Values are not clamped here.
    pub fn from_signed(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(
            width,
            height,
            values.iter().map(|v| 0.5 * (v + 1.0)).collect(),
        )
    }

    /// Clamped, rounded 8-bit pixels.
    pub fn quantized(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.quantized())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!(
                "expected binary PGM (P5), got {}",
                fields[0]
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!(
                "only maxval 255 is supported, got {maxval}"
            )));
        }
        if fields.len() > 4 {
            return Err(Error::Format("unexpected data in PGM header".into()));
        }
        let mut data = vec![0u8; width * height];
        r.read_exact(&mut data)
            .map_err(|_| Error::Format("truncated PGM pixel data".into()))?;
        Self::new(
            width,
            height,
            data.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_pgm(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_of_quantized_image() {
        let px: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = GrayImage::new(4, 3, px).unwrap();
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n4 3\n255\n"));
        let back = GrayImage::read_pgm(buf.as_slice()).unwrap();
        assert_eq!(back.quantized(), img.quantized());
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut buf = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend([0u8, 255]);
        let img = GrayImage::read_pgm(buf.as_slice()).unwrap();
        assert_eq!(img.pixels, vec![0.0, 1.0]);
    }

    #[test]
    fn clamps_on_quantization_only() {
        let img = GrayImage::from_signed(3, 1, &[-1.5, 0.0, 2.0]).unwrap();
        assert_eq!(img.pixels, vec![-0.25, 0.5, 1.5]);
        assert_eq!(img.quantized(), vec![0, 128, 255]);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(GrayImage::read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(GrayImage::read_pgm(&b"P5\n2 2\n255\n\x00"[..]).is_err());
        assert!(GrayImage::read_pgm(&b"P5\n1 1\n65535\n\x00\x00"[..]).is_err());
    }
}
