//! 8-bit image buffers and PNG I/O.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("{channels} channels; only 1 or 3 supported")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Image(format!(
                "{} bytes for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    /// Sample at `(y, x)` in channel `c`; gray images answer every channel.
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        let c = if self.channels == 1 { 0 } else { c };
        self.data[(y * self.width + x) * self.channels + c]
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("unsupported bit depth {depth:?}; only 8-bit images are accepted")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Png(format!(
                "unsupported color type {other:?}; only grayscale and RGB are accepted"
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let line = w * channels;
    let data = if frame.line_size == line {
        buf.truncate(h * line);
        buf
    } else {
        buf.chunks(frame.line_size).take(h).flat_map(|r| &r[..line]).copied().collect()
    };
    ImageBuffer::new(h, w, channels, data)
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    if img.is_empty() {
        return Err(Error::Image("cannot encode an empty image".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(&img.data).map_err(|e| Error::Png(e.to_string()))?;
        w.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_png(&bytes).map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let img = ImageBuffer::gray(2, 2, vec![0, 85, 170, 255]).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rgb_round_trip() {
        let data: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 5) as u8).collect();
        let img = ImageBuffer::new(3, 5, 3, data).unwrap();
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 8]).unwrap();
        }
        let err = decode_png(&out).unwrap_err().to_string();
        assert!(err.contains("bit depth"), "{err}");
    }

    #[test]
    fn truncated_is_an_error() {
        let img = ImageBuffer::gray(8, 8, vec![7; 64]).unwrap();
        let bytes = encode_png(&img).unwrap();
        for cut in [0, 8, 20, bytes.len() - 13] {
            assert!(decode_png(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
