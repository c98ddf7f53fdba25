//! Low-resolution synthesis and procedural paired datasets.
//!
//! The pipeline is a first-order surrogate of the usual real-world SR
//! degradation chain: Gaussian blur, area downsampling, additive Gaussian
//! noise, clamping, and uniform quantization in place of JPEG.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub scale: usize,
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub quantize_levels: Option<u32>,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            blur_sigma_range: [0.2, 1.5],
            noise_sigma_range: [0.0, 0.02],
            quantize_levels: Some(64),
            seed: 0,
        }
    }
}

impl DegradationConfig {
    /// No blur, no noise, no quantization: pure area downsampling.
    pub fn clean(scale: usize) -> Self {
        Self {
            scale,
            blur_sigma_range: [0.0, 0.0],
            noise_sigma_range: [0.0, 0.0],
            quantize_levels: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        for (name, [lo, hi]) in [("blur_sigma_range", self.blur_sigma_range), ("noise_sigma_range", self.noise_sigma_range)] {
            if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
                return Err(Error::invalid(format!("{name} [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
            }
        }
        if matches!(self.quantize_levels, Some(l) if l < 2) {
            return Err(Error::invalid("quantize_levels must be at least 2"));
        }
        Ok(())
    }
}

fn draw(rng: &mut rng::Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let horiz = Image::from_fn(h, w, c, |y, x, ch| {
        k.iter()
            .enumerate()
            .map(|(j, t)| t * img.at(y, reflect(x as isize + j as isize - r, w), ch))
            .sum()
    });
    Image::from_fn(h, w, c, |y, x, ch| {
        k.iter()
            .enumerate()
            .map(|(j, t)| t * horiz.at(reflect(y as isize + j as isize - r, h), x, ch))
            .sum()
    })
}

/// Block mean over `scale × scale` tiles.
pub fn area_downsample(img: &Image, scale: usize) -> Result<Image> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::invalid(format!("scale {scale} does not divide {h}×{w}")));
    }
    let inv = 1.0 / (scale * scale) as f64;
    Ok(Image::from_fn(h / scale, w / scale, c, |y, x, ch| {
        let mut s = 0.0;
        for dy in 0..scale {
            for dx in 0..scale {
                s += img.at(y * scale + dy, x * scale + dx, ch);
            }
        }
        s * inv
    }))
}

/// Degrades an HR image. Fully determined by `(cfg.seed, sample_seed)`.
pub fn degrade(x_hr: &Image, cfg: &DegradationConfig, sample_seed: u64) -> Result<Image> {
    cfg.validate()?;
    x_hr.check_range()?;
    let (h, w) = (x_hr.height(), x_hr.width());
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(Error::invalid(format!("scale {} does not divide {h}×{w}", cfg.scale)));
    }
    let mut rng = rng::stream(&[cfg.seed, tag::DEGRADE, sample_seed]);
    let blur_sigma = draw(&mut rng, cfg.blur_sigma_range);
    let noise_sigma = draw(&mut rng, cfg.noise_sigma_range);

    let blurred = gaussian_blur(x_hr, blur_sigma);
    let small = area_downsample(&blurred, cfg.scale)?;
    let mut t = small.into_tensor();
    for v in t.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + noise_sigma * n).clamp(0.0, 1.0);
    }
    if let Some(levels) = cfg.quantize_levels {
        let q = (levels - 1) as f64;
        for v in t.data_mut() {
            *v = (*v * q).round() / q;
        }
    }
    Image::new(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Sinusoid,
    Checkerboard,
    FilteredNoise,
    FlatRegions,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 4] = [
        TextureFamily::Sinusoid,
        TextureFamily::Checkerboard,
        TextureFamily::FilteredNoise,
        TextureFamily::FlatRegions,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TextureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TextureFamily::Sinusoid => "sinusoid",
            TextureFamily::Checkerboard => "checkerboard",
            TextureFamily::FilteredNoise => "filtered_noise",
            TextureFamily::FlatRegions => "flat_regions",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub x_hr: Image,
    pub x_lr: Image,
    pub sample_seed: u64,
    pub family: TextureFamily,
}

fn random_color(rng: &mut rng::Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

/// Procedural HR texture of the given family.
pub fn generate_texture(family: TextureFamily, size: usize, rng: &mut rng::Rng) -> Image {
    let n = size as f64;
    match family {
        TextureFamily::Sinusoid => {
            let n_waves = rng.random_range(2..=3);
            let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..n_waves)
                .map(|_| {
                    let freq = rng.random_range(0.05..0.35);
                    let angle = rng.random_range(0.0..std::f64::consts::PI);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    let amp = rng.random_range(0.08..0.16);
                    let tint = random_color(rng);
                    (freq * angle.cos(), freq * angle.sin(), phase, amp, tint)
                })
                .collect();
            let base = rng.random_range(0.35..0.65);
            Image::from_fn(size, size, 3, |y, x, c| {
                let mut v = base;
                for (fx, fy, ph, a, tint) in &waves {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph;
                    v += a * (0.5 + 0.5 * tint[c]) * arg.cos();
                }
                v.clamp(0.0, 1.0)
            })
        }
        TextureFamily::Checkerboard => {
            let cell = rng.random_range(2..=8usize);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            let (a, b) = (random_color(rng), random_color(rng));
            Image::from_fn(size, size, 3, |y, x, c| {
                if ((x + ox) / cell + (y + oy) / cell) % 2 == 0 {
                    a[c]
                } else {
                    b[c]
                }
            })
        }
        TextureFamily::FilteredNoise => {
            let sigma = rng.random_range(0.5..2.0);
            let white = Image::from_fn(size, size, 3, |_, _, _| rng.random::<f64>());
            let smooth = gaussian_blur(&white, sigma);
            let (lo, hi) = (smooth.tensor().min(), smooth.tensor().max());
            let span = (hi - lo).max(1e-12);
            let contrast = rng.random_range(0.4..0.9);
            let mid = rng.random_range(0.3..0.7);
            Image::from_fn(size, size, 3, |y, x, c| {
                (mid + contrast * ((smooth.at(y, x, c) - lo) / span - 0.5)).clamp(0.0, 1.0)
            })
        }
        TextureFamily::FlatRegions => {
            let n_lines = rng.random_range(2..=4usize);
            let lines: Vec<(f64, f64, f64)> = (0..n_lines)
                .map(|_| {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let offset = rng.random_range(0.2..0.8) * n;
                    (angle.cos(), angle.sin(), offset)
                })
                .collect();
            let base = random_color(rng);
            let colors: Vec<[f64; 3]> = (0..1usize << n_lines)
                .map(|_| base.map(|b| (b + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0)))
                .collect();
            Image::from_fn(size, size, 3, |y, x, c| {
                let region = lines.iter().enumerate().fold(0usize, |acc, (i, (cx, cy, off))| {
                    let side = (x as f64 - n / 2.0) * cx + (y as f64 - n / 2.0) * cy + n / 2.0 > *off;
                    acc | (usize::from(side) << i)
                });
                colors[region][c]
            })
        }
    }
}

/// Generates sample `index` of a dataset; `families` restricts the mix.
pub fn make_sample(
    index: u64,
    hr_size: usize,
    cfg: &DegradationConfig,
    families: &[TextureFamily],
) -> Result<PairedSample> {
    if families.is_empty() {
        return Err(Error::invalid("no texture families selected"));
    }
    let mut rng = rng::stream(&[cfg.seed, tag::DATASET, index]);
    let family = families[rng.random_range(0..families.len())];
    let x_hr = generate_texture(family, hr_size, &mut rng);
    let x_lr = degrade(&x_hr, cfg, index)?;
    Ok(PairedSample {
        x_hr,
        x_lr,
        sample_seed: index,
        family,
    })
}

/// `n` paired samples drawn from all four texture families.
pub fn make_toy_dataset(n: usize, hr_size: usize, cfg: &DegradationConfig) -> Result<Vec<PairedSample>> {
    make_dataset(0, n, hr_size, cfg, &TextureFamily::ALL)
}

/// Samples `start .. start + n`, restricted to `families`.
pub fn make_dataset(
    start: u64,
    n: usize,
    hr_size: usize,
    cfg: &DegradationConfig,
    families: &[TextureFamily],
) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    cfg.validate()?;
    if hr_size == 0 || hr_size % cfg.scale != 0 {
        return Err(Error::invalid(format!("scale {} does not divide hr_size {hr_size}", cfg.scale)));
    }
    (start..start + n as u64)
        .map(|i| make_sample(i, hr_size, cfg, families))
        .collect()
}

/// Writes `hr/<id>.png`, `lr/<id>.png` and `index.csv` under `dir`.
pub fn export_dataset(dir: &Path, samples: &[PairedSample]) -> Result<()> {
    fs::create_dir_all(dir.join("hr"))?;
    fs::create_dir_all(dir.join("lr"))?;
    let mut index = String::from("id,hr_path,lr_path,sample_seed\n");
    for (id, s) in samples.iter().enumerate() {
        let hr = format!("hr/{id:05}.png");
        let lr = format!("lr/{id:05}.png");
        s.x_hr.write_png(&dir.join(&hr))?;
        s.x_lr.write_png(&dir.join(&lr))?;
        index.push_str(&format!("{id},{hr},{lr},{}\n", s.sample_seed));
    }
    fs::write(dir.join("index.csv"), index)?;
    Ok(())
}

/// Upsamples an LR image to HR size (bilinear), the generator's input.
pub fn upsample_to(x_lr: &Image, h: usize, w: usize) -> Image {
    x_lr.resize_bilinear(h, w)
}
