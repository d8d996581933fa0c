use std::io::Write;
use std::path::Path;

use super::ImagingError;
use crate::diff::Tensor;

/// Row-major, channel-interleaved `f64` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && channels > 0, "image dims must be positive");
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(ImagingError::Shape(format!(
                "{width}x{height}x{channels} image with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::Shape("non-finite pixel value".into()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.idx(x, y, 0);
        &mut self.data[i..i + self.channels]
    }

    /// Bilinear lookup at texture coordinate `(u, v)` with edge clamping,
    /// using the same texel-centre convention as the neural texture sampler.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) {
        let x = (u * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
            let bot = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
    }

    /// Planar `[C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..n {
            for c in 0..self.channels {
                out[c * n + p] = self.data[p * self.channels + c];
            }
        }
        Tensor::new(&[self.channels, self.height, self.width], out).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, ImagingError> {
        let (c, h, w) = t.chw().map_err(|e| ImagingError::Shape(e.to_string()))?;
        let n = h * w;
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for p in 0..n {
            for ch in 0..c {
                data[p * c + ch] = src[ch * n + p];
            }
        }
        Image::from_data(w, h, c, data)
    }

    /// Copy of a subset of channels.
    pub fn select_channels(&self, channels: &[usize]) -> Image {
        let mut out = Image::new(self.width, self.height, channels.len());
        for p in 0..self.width * self.height {
            for (k, &c) in channels.iter().enumerate() {
                out.data[p * channels.len() + k] = self.data[p * self.channels + c];
            }
        }
        out
    }

    /// Pixels side by side, left to right. All parts must share height and channel count.
    pub fn hconcat(parts: &[&Image]) -> Result<Image, ImagingError> {
        let first = parts.first().ok_or_else(|| ImagingError::Shape("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.height != first.height || p.channels != first.channels) {
            return Err(ImagingError::Shape("hconcat needs equal heights and channels".into()));
        }
        let width: usize = parts.iter().map(|p| p.width).sum();
        let mut out = Image::new(width, first.height, first.channels);
        let mut x0 = 0;
        for p in parts {
            for y in 0..p.height {
                for x in 0..p.width {
                    out.pixel_mut(x0 + x, y).copy_from_slice(p.pixel(x, y));
                }
            }
            x0 += p.width;
        }
        Ok(out)
    }

    /// Mean absolute per-pixel error against `other`, mapped black -> red ->
    /// yellow -> white over `[0, full_scale]`.
    pub fn error_heatmap(&self, other: &Image, full_scale: f64) -> Result<Image, ImagingError> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(ImagingError::Shape("heatmap needs images of equal shape".into()));
        }
        let mut out = Image::new(self.width, self.height, 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let (a, b) = (self.pixel(x, y), other.pixel(x, y));
                let err = a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>() / self.channels as f64;
                let t = 3.0 * (err / full_scale).clamp(0.0, 1.0);
                out.pixel_mut(x, y).copy_from_slice(&[t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).max(0.0)]);
            }
        }
        Ok(out)
    }

    /// Prediction | ground truth | error heatmap.
    pub fn composite(pred: &Image, gt: &Image) -> Result<Image, ImagingError> {
        let heat = pred.error_heatmap(gt, 0.25)?;
        Image::hconcat(&[pred, gt, &heat])
    }

    pub fn to_rgb8(&self) -> Result<Vec<u8>, ImagingError> {
        if self.channels != 3 && self.channels != 1 {
            return Err(ImagingError::Shape(format!("cannot encode {} channels as 8-bit", self.channels)));
        }
        Ok(self.data.iter().map(|&v| quantize(v)).collect())
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImagingError> {
        let bytes = self.to_rgb8()?;
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            _ => image::ExtendedColorType::Rgb8,
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    /// Reads 8-bit grey, RGB or RGBA PNGs; alpha is dropped.
    pub fn read_png(path: &Path) -> Result<Image, ImagingError> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img {
            image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
            other => (3, other.into_rgb8().into_raw()),
        };
        let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
        Image::from_data(w, h, channels, data)
    }

    /// PFM with `Pf` (1 channel) or `PF` (3 channels) header, little-endian
    /// `f32` payload stored bottom row first.
    pub fn write_pfm(&self, path: &Path) -> Result<(), ImagingError> {
        std::fs::write(path, self.pfm_bytes()?)?;
        Ok(())
    }

    pub fn pfm_bytes(&self) -> Result<Vec<u8>, ImagingError> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(ImagingError::Shape(format!("PFM stores 1 or 3 channels, not {c}"))),
        };
        let mut out = Vec::with_capacity(32 + 4 * self.data.len());
        write!(out, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn read_pfm(path: &Path) -> Result<Image, ImagingError> {
        Self::parse_pfm(&std::fs::read(path)?)
    }

    pub fn parse_pfm(bytes: &[u8]) -> Result<Image, ImagingError> {
        let bad = |msg: &str| ImagingError::MalformedHeader(msg.to_owned());
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos || pos >= bytes.len() {
                return Err(bad("truncated PFM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        // exactly one whitespace byte separates the scale from the payload
        pos += 1;
        let channels = match fields[0] {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(bad("missing PF/Pf magic")),
        };
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
        if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
            return Err(bad("degenerate dimensions or scale"));
        }
        let little = scale < 0.0;
        let n = width * height * channels;
        let payload = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated PFM payload"))?;
        let mut data = vec![0.0; n];
        let row = width * channels;
        for (k, chunk) in payload.chunks_exact(4).enumerate() {
            let b: [u8; 4] = chunk.try_into().expect("4 bytes");
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (file_row, col) = (k / row, k % row);
            data[(height - 1 - file_row) * row + col] = v as f64;
        }
        Image::from_data(width, height, channels, data)
    }
}

/// `round(v · 255)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
