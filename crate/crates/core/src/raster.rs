//! RGB rasters in `[0, 1]`, row-major with interleaved channels, plus PNG and
//! raw float32 tensor codecs.
//!
//! Raw tensor layout (little-endian): magic `NMSR`, then `u32` height, width
//! and channel count, then `height·width·channels` `f32` values.

use std::io::Cursor;

use crate::{Error, Result};

pub const CHANNELS: usize = 3;
/// Height and width must be multiples of this.
pub const DIM_MULTIPLE: usize = 32;
pub const RAW_MAGIC: [u8; 4] = *b"NMSR";
pub const RAW_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(DIM_MULTIPLE) || !width.is_multiple_of(DIM_MULTIPLE) {
        return Err(Error::InvalidRaster(format!(
            "dimensions {height}x{width} must be positive multiples of {DIM_MULTIPLE}"
        )));
    }
    Ok(())
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * CHANNELS {
            return Err(Error::InvalidRaster(format!(
                "expected {} values for {height}x{width}x{CHANNELS}, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRaster(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn black(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    /// Same shape as `self` with new contents; values may lie outside `[0, 1]`.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.offset(x, y, c)]
    }

    /// Sets one value, clamped to `[0, 1]`.
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        let o = self.offset(x, y, c);
        self.data[o] = value.clamp(0.0, 1.0);
    }

    /// True when every value is finite and inside `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Raster {
        self.with_data(self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Fills the pixels of the half-open rectangle with `value`.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, value: f32) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                for c in 0..CHANNELS {
                    self.set(x, y, c, value);
                }
            }
        }
    }

    pub fn encode_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RAW_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&RAW_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode_raw(bytes: &[u8]) -> Result<Self> {
        let (height, width) = raw_header(bytes)?;
        let body = &bytes[RAW_HEADER_LEN..];
        let expected = height * width * CHANNELS * 4;
        if body.len() != expected {
            return Err(Error::Encoding(format!(
                "payload has {} bytes, header declares {expected}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(height, width, data)
    }

    /// 8-bit RGB PNG; values are rounded to the nearest of 256 levels.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header().map_err(|e| Error::Encoding(e.to_string()))?;
            let bytes: Vec<u8> = self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            writer
                .write_image_data(&bytes)
                .map_err(|e| Error::Encoding(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| Error::Encoding(e.to_string()))?;
        let info = reader.info();
        if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Rgb {
            return Err(Error::Encoding(format!(
                "expected 8-bit RGB PNG, got {:?} {:?}",
                info.bit_depth, info.color_type
            )));
        }
        let (width, height) = (info.width as usize, info.height as usize);
        check_dims(height, width)?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(height * width * CHANNELS)];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Encoding(e.to_string()))?;
        let data = buf[..frame.buffer_size()].iter().map(|b| *b as f32 / 255.0).collect();
        Self::new(height, width, data)
    }
}

/// Parses a raw tensor header, returning `(height, width)`.
pub fn raw_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::Encoding("raw tensor shorter than its header".into()));
    }
    if bytes[..4] != RAW_MAGIC {
        return Err(Error::Encoding("bad raw tensor magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width, channels) = (word(4), word(8), word(12));
    if channels != CHANNELS {
        return Err(Error::Encoding(format!("expected {CHANNELS} channels, got {channels}")));
    }
    check_dims(height, width)?;
    Ok((height, width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dimensions_must_be_multiples_of_32() {
        assert!(Raster::black(32, 64).is_ok());
        assert!(Raster::black(33, 64).is_err());
        assert!(Raster::black(0, 32).is_err());
    }

    #[test]
    fn pixel_range_is_enforced() {
        assert!(Raster::new(32, 32, vec![1.5; 32 * 32 * 3]).is_err());
        assert!(Raster::new(32, 32, vec![f32::NAN; 32 * 32 * 3]).is_err());
        assert!(Raster::new(32, 32, vec![0.5; 10]).is_err());
    }

    #[test]
    fn raw_header_rejects_garbage() {
        assert!(Raster::decode_raw(b"nope").is_err());
        let mut bytes = Raster::black(32, 32).unwrap().encode_raw();
        bytes[4] = 33;
        assert!(Raster::decode_raw(&bytes).is_err());
        let mut short = Raster::black(32, 32).unwrap().encode_raw();
        short.pop();
        assert!(Raster::decode_raw(&short).is_err());
    }

    #[test]
    fn png_quantizes_to_256_levels() {
        let mut r = Raster::filled(32, 32, 0.5).unwrap();
        r.set(3, 4, 1, 0.2);
        let back = Raster::decode_png(&r.encode_png().unwrap()).unwrap();
        assert_eq!(back.get(3, 4, 1), 51.0 / 255.0);
        assert_eq!(back.get(0, 0, 0), 128.0 / 255.0);
    }

    proptest! {
        #[test]
        fn raw_codec_is_lossless(values in proptest::collection::vec(0.0f32..=1.0, 32 * 64 * 3)) {
            let r = Raster::new(32, 64, values).unwrap();
            prop_assert_eq!(Raster::decode_raw(&r.encode_raw()).unwrap(), r);
        }
    }
}
