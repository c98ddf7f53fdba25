//! Pixel-space images (`H × W × C`, values in `[0, 1]`) and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    /// Wraps a tensor, checking layout and the `[0, 1]` range.
    pub fn new(t: Tensor) -> Result<Self> {
        let img = Self::new_unchecked_range(t)?;
        img.check_range()?;
        Ok(img)
    }

    /// Wraps a tensor, checking only the `H × W × C` layout. Used for
    /// network outputs that may leave `[0, 1]`.
    pub fn new_unchecked_range(t: Tensor) -> Result<Self> {
        let (h, w, c) = t.dims3()?;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid(format!("empty image {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self(Tensor::full([h, w, c], v))
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        Self(Tensor::from_fn([h, w, c], |i| f(i / (w * c), (i / c) % w, i % c)))
    }

    pub fn check_range(&self) -> Result<()> {
        match self.0.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(Error::invalid(format!("pixel value {v} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.0.data()[(y * self.width() + x) * self.channels() + c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn clamped(&self) -> Image {
        Image(self.0.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Channel mean, `H × W`.
    pub fn luminance(&self) -> Vec<f64> {
        let c = self.channels();
        self.0
            .data()
            .chunks(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect()
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let src = |o: usize, n_out: usize, n_in: usize| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        };
        Image::from_fn(out_h, out_w, c, |y, x, ch| {
            let (y0, y1, fy) = src(y, out_h, h);
            let (x0, x1, fx) = src(x, out_w, w);
            let top = self.at(y0, x0, ch) * (1.0 - fx) + self.at(y0, x1, ch) * fx;
            let bot = self.at(y1, x0, ch) * (1.0 - fx) + self.at(y1, x1, ch) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    /// Side-by-side concatenation; heights must match.
    pub fn hstack(parts: &[&Image]) -> Result<Image> {
        let first = parts.first().ok_or_else(|| Error::invalid("hstack of nothing"))?;
        let (h, c) = (first.height(), first.channels());
        if parts.iter().any(|p| p.height() != h || p.channels() != c) {
            return Err(Error::invalid("hstack parts differ in height or channels"));
        }
        let w: usize = parts.iter().map(|p| p.width()).sum();
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for p in parts {
                let row = p.width() * c;
                data.extend_from_slice(&p.0.data()[y * row..(y + 1) * row]);
            }
        }
        Ok(Image(Tensor::new([h, w, c], data)?))
    }

    /// 8-bit quantization, rounding to nearest after clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let c = self.channels();
        self.0
            .data()
            .chunks(c)
            .flat_map(|px| {
                let pick = |i: usize| px[if c == 3 { i } else { 0 }];
                (0..3).map(move |i| (pick(i).clamp(0.0, 1.0) * 255.0).round() as u8)
            })
            .collect()
    }

    pub fn from_rgb8(h: usize, w: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != h * w * 3 {
            return Err(Error::invalid("RGB buffer size does not match dimensions"));
        }
        Image::new(Tensor::new(
            [h, w, 3],
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )?)
    }

    /// Reads a PNG as 8-bit RGB. Gray and alpha channels are converted.
    pub fn read_png(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let rgb: Vec<u8> = buf[..info.buffer_size()]
            .chunks(channels)
            .flat_map(|px| match channels {
                1 | 2 => [px[0], px[0], px[0]],
                _ => [px[0], px[1], px[2]],
            })
            .collect();
        Image::from_rgb8(h, w, &rgb)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width() as u32, self.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_checked() {
        assert!(Image::new(Tensor::full([2, 2, 3], 1.2)).is_err());
        assert!(Image::new(Tensor::full([2, 2], 0.5)).is_err());
        assert!(Image::new_unchecked_range(Tensor::full([2, 2, 3], 1.2)).is_ok());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 7 + c * 50) % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        assert!(back.tensor().max_abs_diff(img.tensor()) < 1e-12);
    }

    #[test]
    fn missing_png_is_reported() {
        let err = Image::read_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn bilinear_preserves_constants_and_linear_ramps() {
        let c = Image::filled(4, 4, 3, 0.3).resize_bilinear(16, 16);
        assert!(c.tensor().data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let up = Image::from_fn(4, 4, 1, |_, x, _| x as f64 / 4.0).resize_bilinear(4, 8);
        assert_eq!(up.width(), 8);
        // interior samples follow the ramp
        assert!((up.at(0, 3, 0) - (3.5 / 2.0 - 0.5) / 4.0).abs() < 1e-12);
    }
}
