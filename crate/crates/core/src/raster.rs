//! In-memory raster planes.
//!
//! A `Raster` is a dense row-major, channel-interleaved plane: the sample at
//! (x, y, c) lives at index `(y * width + x) * channels + c`. Two sample
//! depths exist: `Byte` (the on-disk representation of images and masks) and
//! `UnitFloat` (density fields, heatmaps, probability maps; values in [0, 1]).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Byte,
    UnitFloat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Byte(Vec<u8>),
    Float(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Samples,
}

impl Raster {
    pub fn from_bytes(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        Self::check_shape(width, height, channels, data.len())?;
        Ok(Raster {
            width,
            height,
            channels,
            data: Samples::Byte(data),
        })
    }

    pub fn from_floats(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        Self::check_shape(width, height, channels, data.len())?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("unit-float raster has values outside [0, 1]"));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data: Samples::Float(data),
        })
    }

    pub fn zero_bytes(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: Samples::Byte(vec![0; width * height * channels]),
        }
    }

    fn check_shape(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        let expect = width * height * channels;
        if len != expect {
            return Err(Error::DimensionMismatch(format!(
                "raster data length {len} does not match {width}x{height}x{channels}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth(&self) -> Depth {
        match self.data {
            Samples::Byte(_) => Depth::Byte,
            Samples::Float(_) => Depth::UnitFloat,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    pub fn bytes(&self) -> Result<&[u8]> {
        match &self.data {
            Samples::Byte(v) => Ok(v),
            Samples::Float(_) => Err(Error::invalid("expected byte raster, found unit-float")),
        }
    }

    pub fn bytes_mut(&mut self) -> Result<&mut [u8]> {
        match &mut self.data {
            Samples::Byte(v) => Ok(v),
            Samples::Float(_) => Err(Error::invalid("expected byte raster, found unit-float")),
        }
    }

    pub fn floats(&self) -> Result<&[f32]> {
        match &self.data {
            Samples::Float(v) => Ok(v),
            Samples::Byte(_) => Err(Error::invalid("expected unit-float raster, found byte")),
        }
    }

    #[inline]
    pub fn get_byte(&self, x: usize, y: usize, c: usize) -> u8 {
        match &self.data {
            Samples::Byte(v) => v[self.index(x, y, c)],
            Samples::Float(_) => panic!("get_byte on unit-float raster"),
        }
    }

    #[inline]
    pub fn set_byte(&mut self, x: usize, y: usize, c: usize, value: u8) {
        let i = self.index(x, y, c);
        match &mut self.data {
            Samples::Byte(v) => v[i] = value,
            Samples::Float(_) => panic!("set_byte on unit-float raster"),
        }
    }

    #[inline]
    pub fn get_float(&self, x: usize, y: usize, c: usize) -> f32 {
        match &self.data {
            Samples::Float(v) => v[self.index(x, y, c)],
            Samples::Byte(_) => panic!("get_float on byte raster"),
        }
    }

    /// Copies the window `[x, x+w) x [y, y+h)`, all channels.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Raster> {
        if w == 0 || h == 0 {
            return Err(Error::invalid("empty crop window"));
        }
        if x + w > self.width || y + h > self.height {
            return Err(Error::OutOfBounds(format!(
                "crop window {x},{y} {w}x{h} exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        match &self.data {
            Samples::Byte(v) => {
                let mut out = Vec::with_capacity(w * h * c);
                for row in y..y + h {
                    let start = (row * self.width + x) * c;
                    out.extend_from_slice(&v[start..start + w * c]);
                }
                Raster::from_bytes(w, h, c, out)
            }
            Samples::Float(v) => {
                let mut out = Vec::with_capacity(w * h * c);
                for row in y..y + h {
                    let start = (row * self.width + x) * c;
                    out.extend_from_slice(&v[start..start + w * c]);
                }
                Raster::from_floats(w, h, c, out)
            }
        }
    }

    /// Copies channel `c` into a new single-channel raster.
    pub fn extract_channel(&self, c: usize) -> Result<Raster> {
        if c >= self.channels {
            return Err(Error::invalid(format!(
                "channel {c} out of range for a {}-channel raster",
                self.channels
            )));
        }
        let n = self.width * self.height;
        match &self.data {
            Samples::Byte(v) => {
                let out: Vec<u8> = (0..n).map(|px| v[px * self.channels + c]).collect();
                Raster::from_bytes(self.width, self.height, 1, out)
            }
            Samples::Float(v) => {
                let out: Vec<f32> = (0..n).map(|px| v[px * self.channels + c]).collect();
                Raster::from_floats(self.width, self.height, 1, out)
            }
        }
    }

    /// Copies the first `n` channels into a new raster.
    pub fn take_channels(&self, n: usize) -> Result<Raster> {
        if n == 0 || n > self.channels {
            return Err(Error::invalid(format!(
                "cannot take {n} channels from a {}-channel raster",
                self.channels
            )));
        }
        if n == self.channels {
            return Ok(self.clone());
        }
        match &self.data {
            Samples::Byte(v) => {
                let mut out = Vec::with_capacity(self.width * self.height * n);
                for px in 0..self.width * self.height {
                    let base = px * self.channels;
                    out.extend_from_slice(&v[base..base + n]);
                }
                Raster::from_bytes(self.width, self.height, n, out)
            }
            Samples::Float(v) => {
                let mut out = Vec::with_capacity(self.width * self.height * n);
                for px in 0..self.width * self.height {
                    let base = px * self.channels;
                    out.extend_from_slice(&v[base..base + n]);
                }
                Raster::from_floats(self.width, self.height, n, out)
            }
        }
    }
}

/// Aggregates 2x2 blocks by arithmetic mean. Output dimensions are
/// `ceil(d / 2)`; blocks clipped by an odd edge average the 1 or 2 samples
/// that exist. Byte rasters round half up, unit-float rasters keep the mean.
pub fn downsample2(r: &Raster) -> Raster {
    let (w, h, c) = (r.width, r.height, r.channels);
    let ow = w.div_ceil(2);
    let oh = h.div_ceil(2);
    match &r.data {
        Samples::Byte(v) => {
            let mut out = vec![0u8; ow * oh * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let x1 = (2 * ox + 2).min(w);
                    let y1 = (2 * oy + 2).min(h);
                    let n = ((x1 - 2 * ox) * (y1 - 2 * oy)) as u32;
                    for ch in 0..c {
                        let mut sum = 0u32;
                        for y in 2 * oy..y1 {
                            for x in 2 * ox..x1 {
                                sum += v[(y * w + x) * c + ch] as u32;
                            }
                        }
                        // round half up: floor(sum / n + 1/2)
                        out[(oy * ow + ox) * c + ch] = ((2 * sum + n) / (2 * n)) as u8;
                    }
                }
            }
            Raster {
                width: ow,
                height: oh,
                channels: c,
                data: Samples::Byte(out),
            }
        }
        Samples::Float(v) => {
            let mut out = vec![0f32; ow * oh * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let x1 = (2 * ox + 2).min(w);
                    let y1 = (2 * oy + 2).min(h);
                    let n = ((x1 - 2 * ox) * (y1 - 2 * oy)) as f64;
                    for ch in 0..c {
                        let mut sum = 0f64;
                        for y in 2 * oy..y1 {
                            for x in 2 * ox..x1 {
                                sum += v[(y * w + x) * c + ch] as f64;
                            }
                        }
                        out[(oy * ow + ox) * c + ch] = (sum / n) as f32;
                    }
                }
            }
            Raster {
                width: ow,
                height: oh,
                channels: c,
                data: Samples::Float(out),
            }
        }
    }
}

/// Downsamples a binary mask by 2x2 majority vote; ties become 1 so that
/// thin positive structures survive coarsening.
pub fn downsample2_mask(r: &Raster) -> Result<Raster> {
    if r.channels != 1 {
        return Err(Error::invalid("mask downsample expects a single channel"));
    }
    let v = r.bytes()?;
    let (w, h) = (r.width, r.height);
    let ow = w.div_ceil(2);
    let oh = h.div_ceil(2);
    let mut out = vec![0u8; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let x1 = (2 * ox + 2).min(w);
            let y1 = (2 * oy + 2).min(h);
            let n = (x1 - 2 * ox) * (y1 - 2 * oy);
            let mut ones = 0usize;
            for y in 2 * oy..y1 {
                for x in 2 * ox..x1 {
                    ones += v[y * w + x] as usize;
                }
            }
            out[oy * ow + ox] = u8::from(2 * ones >= n);
        }
    }
    Raster::from_bytes(ow, oh, 1, out)
}
