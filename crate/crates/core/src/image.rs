//! Channel-major float images and binary PGM/PPM IO.

use std::path::Path;

use crate::error::{Result, TctError};

/// `channels × height × width` grid of values in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(TctError::shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TctError::input("image contains non-finite values"));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Replicates a single-channel image to `channels`; multi-channel images
    /// must already match.
    pub fn with_channels(self, channels: usize) -> Result<ImageTensor> {
        if self.channels == channels {
            return Ok(self);
        }
        if self.channels != 1 {
            return Err(TctError::shape(format!(
                "cannot convert a {}-channel image to {channels} channels",
                self.channels
            )));
        }
        let data = self.data.repeat(channels);
        Ok(ImageTensor {
            channels,
            data,
            ..self
        })
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<ImageTensor> {
        if height == 0 || width == 0 || self.height == 0 || self.width == 0 {
            return Err(TctError::input("cannot resize to or from an empty image"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            data.extend(resample_bilinear(
                self.plane(c),
                self.height,
                self.width,
                height,
                width,
            ));
        }
        ImageTensor::from_vec(self.channels, height, width, data)
    }

    /// Copy of the rectangle `[x, x+w) × [y, y+h)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImageTensor> {
        if x + w > self.width || y + h > self.height {
            return Err(TctError::input(format!(
                "crop {w}x{h}+{x}+{y} exceeds a {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = ImageTensor::filled(self.channels, h, w, 0.0);
        for c in 0..self.channels {
            for yy in 0..h {
                for xx in 0..w {
                    out.set(c, yy, xx, self.get(c, y + yy, x + xx));
                }
            }
        }
        Ok(out)
    }

    /// Rounds every value to the nearest multiple of 1/255, clamped to [0, 1].
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn load(path: &Path) -> Result<ImageTensor> {
        let bytes = std::fs::read(path)?;
        decode_pnm(&bytes).map_err(|e| match e {
            TctError::Input(msg) => TctError::input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes binary PPM (3 channels) or PGM (1 channel) at 8 bits per sample.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_pnm(self)?)?;
        Ok(())
    }
}

/// Resamples a `src_h × src_w` plane to `dst_h × dst_w` with half-pixel
/// centers: destination pixel `x` samples source coordinate
/// `(x + 0.5) · src_w / dst_w − 0.5`, clamped to the valid range.
pub fn resample_bilinear(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), src_h * src_w);
    let coords = |dst: usize, src_len: usize, i: usize| -> (usize, usize, f64) {
        let u = ((i as f64 + 0.5) * src_len as f64 / dst as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, u - i0 as f64)
    };
    let xs: Vec<_> = (0..dst_w).map(|x| coords(dst_w, src_w, x)).collect();
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        let (y0, y1, fy) = coords(dst_h, src_h, y);
        for &(x0, x1, fx) in &xs {
            let a = src[y0 * src_w + x0];
            let b = src[y0 * src_w + x1];
            let c = src[y1 * src_w + x0];
            let d = src[y1 * src_w + x1];
            let top = a * (1.0 - fx) + b * fx;
            let bottom = c * (1.0 - fx) + d * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(TctError::input(format!("malformed PNM header: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TctError::input(format!("malformed PNM header: bad {what}")))
    }
}

/// Decodes binary PGM (`P5`) or PPM (`P6`), normalizing samples to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(TctError::input(
                "unsupported image: expected binary PGM (P5) or PPM (P6)",
            ))
        }
    };
    let mut reader = HeaderReader { bytes, pos: 2 };
    let width = reader.number("width")?;
    let height = reader.number("height")?;
    let maxval = reader.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(TctError::input("malformed PNM header: zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(TctError::input(format!(
            "malformed PNM header: maxval {maxval} outside 1..=65535"
        )));
    }
    match bytes.get(reader.pos) {
        Some(b) if b.is_ascii_whitespace() => reader.pos += 1,
        _ => return Err(TctError::input("malformed PNM header: no separator before raster")),
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let count = width * height * channels;
    let raster = &bytes[reader.pos..];
    if raster.len() < count * sample_bytes {
        return Err(TctError::input(format!(
            "truncated PNM raster: need {} bytes, found {}",
            count * sample_bytes,
            raster.len()
        )));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; count];
    for i in 0..width * height {
        for c in 0..channels {
            let k = i * channels + c;
            let raw = if sample_bytes == 1 {
                raster[k] as usize
            } else {
                ((raster[2 * k] as usize) << 8) | raster[2 * k + 1] as usize
            };
            if raw > maxval {
                return Err(TctError::input(format!(
                    "PNM sample {raw} exceeds maxval {maxval}"
                )));
            }
            data[c * width * height + i] = raw as f64 / scale;
        }
    }
    ImageTensor::from_vec(channels, height, width, data)
}

/// Encodes a 1- or 3-channel image as 8-bit binary PGM/PPM.
pub fn encode_pnm(img: &ImageTensor) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(TctError::input(format!(
                "cannot encode a {c}-channel image as PNM"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let n = img.width * img.height;
    out.reserve(n * img.channels);
    for i in 0..n {
        for c in 0..img.channels {
            let v = img.data[c * n + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}
