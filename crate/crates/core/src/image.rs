//! 8-bit RGB images and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Writes a pixel if it lies on the canvas.
    pub fn put_clipped(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.put(x as usize, y as usize, rgb);
        }
    }

    /// Channel-major `3 x H x W` tensor with values `v / 255 - 0.5`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0f32; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let px = self.get(x, y);
                for c in 0..3 {
                    out[(c * h + y) * w + x] = px[c] as f32 / 255.0 - 0.5;
                }
            }
        }
        Tensor::new(vec![3, h, w], out).expect("shape")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| match e {
            png::EncodingError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        };
        let mut writer = enc.write_header().map_err(to_io)?;
        writer.write_image_data(&self.data).map_err(to_io)?;
        writer.finish().map_err(to_io)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let bad = |e: png::DecodingError| match e {
            png::DecodingError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        };
        let mut reader = decoder.read_info().map_err(bad)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src = &buf[..info.buffer_size()];
        let data = match info.color_type {
            png::ColorType::Rgb => src.to_vec(),
            png::ColorType::Rgba => src.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => src.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => src.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => {
                return Err(Error::Format(format!("{}: unexpanded palette", path.display())))
            }
        };
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(5, 3, [10, 20, 30]);
        img.put(4, 2, [255, 0, 7]);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);
    }

    #[test]
    fn tensor_layout_is_channel_major() {
        let mut img = RgbImage::new(2, 1);
        img.put(1, 0, [255, 0, 51]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[1], 0.5);
        assert_eq!(t.data()[3], -0.5);
        assert!((t.data()[5] - (-0.3)).abs() < 1e-6);
    }
}
