//! 8-bit grayscale screen rasters, stored on disk as binary PGM (P5).

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a valid binary PGM: {message}")]
    Decode { path: String, message: String },
    #[error("pixel buffer of {len} bytes does not match {height}x{width}")]
    Shape {
        height: usize,
        width: usize,
        len: usize,
    },
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if pixels.len() != height * width {
            return Err(RasterError::Shape {
                height,
                width,
                len: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        if row < self.height && col < self.width {
            self.pixels[row * self.width + col] = value;
        }
    }

    /// Fills the half-open pixel rectangle `[top, bottom) x [left, right)`,
    /// clipped to the raster.
    pub fn fill_rect(&mut self, top: usize, left: usize, bottom: usize, right: usize, value: u8) {
        for r in top..bottom.min(self.height) {
            let row = &mut self.pixels[r * self.width..(r + 1) * self.width];
            for px in &mut row[left.min(self.width)..right.min(self.width)] {
                *px = value;
            }
        }
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 16);
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(
                &self.pixels,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::L8,
            )
            .expect("in-memory PGM encoding cannot fail");
        out
    }

    pub fn decode_pgm(bytes: &[u8], path: &str) -> Result<Self, RasterError> {
        let decode_err = |message: String| RasterError::Decode {
            path: path.to_owned(),
            message,
        };
        if !bytes.starts_with(b"P5") {
            return Err(decode_err("missing P5 magic".into()));
        }
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
            .map_err(|e| decode_err(e.to_string()))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(decode_err(format!(
                    "unsupported pixel type {:?}",
                    other.color()
                )))
            }
        };
        let (w, h) = gray.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            pixels: gray.into_raw(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.encode_pgm()).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_pgm(path: &Path) -> Result<Self, RasterError> {
        let bytes = std::fs::read(path).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode_pgm(&bytes, &path.display().to_string())
    }
}
