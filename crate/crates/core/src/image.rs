//! Dense `f64` images and 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height x width x channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension {
                what: "image data",
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image, what: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Channel mean.
    pub fn gray(&self) -> Image {
        let c = self.channels as f64;
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Copies the image with values rounded to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| to_u8(*v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    /// Shifts the content by `(dx, dy)`; pixels shifted in from outside get
    /// `fill`.
    pub fn shifted(&self, dx: i64, dy: i64, fill: f64) -> Image {
        let mut out = Image::filled(self.width, self.height, self.channels, fill);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                let (sx, sy) = (x - dx, y - dy);
                if sx < 0 || sy < 0 || sx >= self.width as i64 || sy >= self.height as i64 {
                    continue;
                }
                for c in 0..self.channels {
                    out.set(x as usize, y as usize, c, self.get(sx as usize, sy as usize, c));
                }
            }
        }
        out
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB or RGBA PNG.
pub fn write_png(path: &Path, rgb: &Image, alpha: Option<&Image>) -> Result<()> {
    if rgb.channels != 3 && rgb.channels != 1 {
        return Err(Error::invalid("PNG output needs 1 or 3 channels"));
    }
    if let Some(a) = alpha {
        if a.width != rgb.width || a.height != rgb.height || a.channels != 1 {
            return Err(Error::invalid("alpha plane does not match the colour image"));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), rgb.width as u32, rgb.height as u32);
    let color = match (rgb.channels, alpha.is_some()) {
        (1, false) => png::ColorType::Grayscale,
        (1, true) => png::ColorType::GrayscaleAlpha,
        (_, false) => png::ColorType::Rgb,
        (_, true) => png::ColorType::Rgba,
    };
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut bytes = Vec::with_capacity(rgb.pixels() * (rgb.channels + 1));
    for p in 0..rgb.pixels() {
        for c in 0..rgb.channels {
            bytes.push(to_u8(rgb.data[p * rgb.channels + c]));
        }
        if let Some(a) = alpha {
            bytes.push(to_u8(a.data[p]));
        }
    }
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8-bit PNG. Returns the colour planes (1 or 3 channels) and the
/// alpha plane when present.
pub fn read_png(path: &Path) -> Result<(Image, Option<Image>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit PNGs are supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (colour, has_alpha) = match info.color_type {
        png::ColorType::Grayscale => (1, false),
        png::ColorType::GrayscaleAlpha => (1, true),
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (3, true),
        other => return Err(Error::format(path, format!("unsupported colour type {other:?}"))),
    };
    let stride = colour + usize::from(has_alpha);
    let bytes = &buf[..info.buffer_size()];
    let mut rgb = Image::new(w, h, colour);
    let mut alpha = has_alpha.then(|| Image::new(w, h, 1));
    for p in 0..w * h {
        for c in 0..colour {
            rgb.data[p * colour + c] = bytes[p * stride + c] as f64 / 255.0;
        }
        if let Some(a) = alpha.as_mut() {
            a.data[p] = bytes[p * stride + colour] as f64 / 255.0;
        }
    }
    Ok((rgb, alpha))
}
