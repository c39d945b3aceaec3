//! Float images with PFM (HDR) and gamma-mapped PNG output.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NimbusError, Result};
use crate::io::write_atomic;

/// Row-major image, row 0 at the top, `channels` interleaved floats per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(NimbusError::Contract(format!("{channels} image channels")));
        }
        if data.len() != width * height * channels {
            return Err(NimbusError::Contract(format!(
                "image payload {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn rmse(&self, other: &Image) -> Result<f64> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(NimbusError::Contract("image shapes differ".into()));
        }
        Ok(crate::metrics::rmse(&self.data, &other.data)?)
    }

    /// Little-endian PFM; scanlines are stored bottom-to-top.
    pub fn write_pfm(&self, w: &mut impl Write) -> Result<()> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        write!(w, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_pfm(r: &mut impl BufRead) -> Result<Self> {
        let mut header = Vec::new();
        while header.len() < 3 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(NimbusError::Format("truncated PFM header".into()));
            }
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        let channels = match header[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            m => return Err(NimbusError::Format(format!("bad PFM magic {m:?}"))),
        };
        let (width, height) = match (header.get(1), header.get(2)) {
            (Some(w), Some(h)) => (
                w.parse().map_err(|_| NimbusError::Format("PFM width".into()))?,
                h.parse().map_err(|_| NimbusError::Format("PFM height".into()))?,
            ),
            _ => return Err(NimbusError::Format("PFM dimensions".into())),
        };
        let scale: f32 = match header.get(3) {
            Some(s) => s.parse().map_err(|_| NimbusError::Format("PFM scale".into()))?,
            None => {
                let mut line = String::new();
                r.read_line(&mut line)?;
                line.trim()
                    .parse()
                    .map_err(|_| NimbusError::Format("PFM scale".into()))?
            }
        };
        let big_endian = scale > 0.0;
        let row = width * channels;
        let mut raw = vec![0u8; row * height * 4];
        r.read_exact(&mut raw)
            .map_err(|_| NimbusError::Format("truncated PFM payload".into()))?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| {
                let b = [b[0], b[1], b[2], b[3]];
                if big_endian {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            })
            .collect();
        let mut data = Vec::with_capacity(vals.len());
        for y in (0..height).rev() {
            data.extend_from_slice(&vals[y * row..(y + 1) * row]);
        }
        Image::new(width, height, channels, data)
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_pfm(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_pfm(&mut std::io::BufReader::new(f))
    }

    /// 8-bit preview: `(exposure * v)^(1/2.2)` clamped to `[0,1]`.
    pub fn to_png(&self, exposure: f32) -> Result<Vec<u8>> {
        let px: Vec<u8> = self
            .data
            .iter()
            .map(|&v| ((exposure * v).max(0.0).powf(1.0 / 2.2).min(1.0) * 255.0).round() as u8)
            .collect();
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(if self.channels == 3 {
                png::ColorType::Rgb
            } else {
                png::ColorType::Grayscale
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| NimbusError::Format(e.to_string()))?;
            w.write_image_data(&px)
                .map_err(|e| NimbusError::Format(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path, exposure: f32) -> Result<()> {
        write_atomic(path, &self.to_png(exposure)?)
    }
}
