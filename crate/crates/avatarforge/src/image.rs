//! CPU-side RGB image buffer with PNG/JPEG round-trip helpers.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {0}x{1} are invalid")]
    BadDimensions(u32, u32),
    #[error("pixel data length {got} does not match {h}x{w}x3")]
    BadLength { got: usize, h: u32, w: u32 },
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
    #[error("failed to encode image: {0}")]
    Encode(#[from] image::ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Row-major RGB image, `data.len() == height * width * 3`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: u32,
    pub width: u32,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(height: u32, width: u32, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::BadDimensions(height, width));
        }
        if data.len() != (height * width * 3) as usize {
            return Err(ImageError::BadLength {
                got: data.len(),
                h: height,
                w: width,
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Constant-color image.
    pub fn filled(height: u32, width: u32, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity((height * width * 3) as usize);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, row: u32, col: u32) -> [f32; 3] {
        let i = ((row * self.width + col) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: u32, col: u32, rgb: [f32; 3]) {
        let i = ((row * self.width + col) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean squared error against another image of the same shape.
    pub fn mse(&self, other: &ImageBuf) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image shapes differ");
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Decode {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let data = img
            .as_raw()
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect::<Vec<_>>();
        ImageBuf::new(height, width, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        image::RgbImage::from_raw(self.width, self.height, self.to_bytes())
            .expect("buffer length matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Encode to in-memory PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::RgbImage::from_raw(self.width, self.height, self.to_bytes())
            .expect("buffer length matches dimensions")
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory(bytes)
            .map_err(|source| ImageError::Decode {
                path: "<memory>".into(),
                source,
            })?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let data = img
            .as_raw()
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect::<Vec<_>>();
        ImageBuf::new(height, width, data)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let mut img = ImageBuf::filled(5, 7, [0.2, 0.4, 0.8]);
        img.set_pixel(2, 3, [1.0, 0.0, 0.5]);
        let bytes = img.encode_png().unwrap();
        let back = ImageBuf::decode_png(&bytes).unwrap();
        assert_eq!(back.height, 5);
        assert_eq!(back.width, 7);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(ImageBuf::new(2, 2, vec![0.0; 5]).is_err());
        assert!(ImageBuf::new(0, 2, vec![]).is_err());
    }
}
