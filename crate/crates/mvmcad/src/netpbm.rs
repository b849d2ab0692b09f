//! Binary PGM (P5) and PPM (P6) reading and writing, 8 or 16 bit.

use std::path::Path;

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub data: Vec<u16>,
}

impl Image {
    pub fn gray8(width: usize, height: usize, data: Vec<u8>) -> Self {
        Image {
            width,
            height,
            channels: 1,
            maxval: 255,
            data: data.into_iter().map(u16::from).collect(),
        }
    }

    pub fn rgb8(width: usize, height: usize, data: Vec<u8>) -> Self {
        Image {
            width,
            height,
            channels: 3,
            maxval: 255,
            data: data.into_iter().map(u16::from).collect(),
        }
    }

    pub fn gray16(width: usize, height: usize, data: Vec<u16>) -> Self {
        Image {
            width,
            height,
            channels: 1,
            maxval: u16::MAX,
            data,
        }
    }

    /// Samples scaled to `[0, 1]`, channel-planar (`C×H×W`).
    pub fn planar_unit(&self) -> Vec<f64> {
        let (c, n) = (self.channels, self.width * self.height);
        let scale = 1.0 / f64::from(self.maxval);
        let mut out = vec![0.0; c * n];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * n + i] = f64::from(v) * scale;
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        } else {
            out.extend(self.data.iter().map(|&v| v as u8));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(format!("unsupported magic {other:?}")),
        };
        let width = number(bytes, &mut pos)?;
        let height = number(bytes, &mut pos)?;
        let maxval = number(bytes, &mut pos)?;
        if width == 0 || height == 0 {
            return Err("zero-sized image".into());
        }
        if !(1..=65535).contains(&maxval) {
            return Err(format!("maxval {maxval} out of range"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let count = width * height * channels;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != need {
            return Err(format!("expected {need} raster bytes, found {}", raster.len()));
        }
        let data: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            raster.iter().map(|&b| u16::from(b)).collect()
        };
        if data.iter().any(|&v| usize::from(v) > maxval) {
            return Err("sample exceeds maxval".into());
        }
        Ok(Image {
            width,
            height,
            channels,
            maxval: maxval as u16,
            data,
        })
    }
}

fn skip_space(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
    skip_space(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("truncated header".into());
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn number(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    let t = token(bytes, pos)?;
    t.parse().map_err(|_| format!("bad header field {t:?}"))
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).at(path)?;
    Image::decode(&bytes).map_err(|d| Error::format(path, d))
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, image.encode()).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let g = Image::gray8(3, 2, vec![0, 1, 2, 3, 254, 255]);
        assert_eq!(Image::decode(&g.encode()).unwrap(), g);
        let w = Image::gray16(2, 2, vec![0, 256, 65535, 7]);
        assert_eq!(Image::decode(&w.encode()).unwrap(), w);
        let c = Image::rgb8(1, 2, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(Image::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        let img = Image::decode(bytes).unwrap();
        assert_eq!(img.data, vec![1, 2]);
    }

    #[test]
    fn rejects_truncation() {
        assert!(Image::decode(b"P5\n2 2\n255\n\x01").is_err());
        assert!(Image::decode(b"P3\n1 1\n255\n1").is_err());
    }
}
