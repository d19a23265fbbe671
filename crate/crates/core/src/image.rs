//! RGB image tensor with values in [0, 1], stored row-major as H×W×3.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        let n = (width * height) as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width * height * 3) as usize {
            return Err(Error::Image(format!(
                "buffer of {} values does not match {width}x{height}x3",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Image("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Box-filter downsample (or nearest upsample) to `side`×`side`, returned channel-major (3×side×side).
    pub fn to_chw_grid(&self, side: usize) -> Vec<f64> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut out = vec![0.0; 3 * side * side];
        for gy in 0..side {
            let y0 = gy * h / side;
            let y1 = ((gy + 1) * h / side).max(y0 + 1).min(h);
            for gx in 0..side {
                let x0 = gx * w / side;
                let x1 = ((gx + 1) * w / side).max(x0 + 1).min(w);
                let mut acc = [0.0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = (y * w + x) * 3;
                        for c in 0..3 {
                            acc[c] += self.data[i + c] as f64;
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    out[c * side * side + gy * side + gx] = acc[c] / n;
                }
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buf: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width, self.height, buf)
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }
}
