//! Spectral diagnostics for grid artifacts, plus PSNR and SSIM.
//!
//! A generator that emits one token per `p × p` latent patch, decoded by a
//! codec with scale factor `f`, tends to leave periodic structure with
//! period `p·f` pixels. Its energy lands on the lattice of frequency bins
//! at multiples of `N / (p·f)`; [`grid_artifact_energy`] measures the share
//! of AC power found there.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Returned by [`psnr`] for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

const RATIO_EPS: f64 = 1e-12;

/// Unnormalized forward 2-D DFT of a real `h × w` array.
pub fn fft2(data: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    assert_eq!(data.len(), h * w);
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf
}

/// Power spectrum `|F|²` of the luminance channel, `h × w`, DC at `(0, 0)`.
pub fn power_spectrum(x: &Image) -> Vec<f64> {
    fft2(&x.luminance(), x.height(), x.width())
        .iter()
        .map(|c| c.norm_sqr())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactReport {
    pub period: usize,
    pub harmonic_energy: f64,
    pub total_ac_energy: f64,
    pub ratio: f64,
}

/// Lattice indices `m` (mod `period`) whose bin `m·n/period` lies within
/// one bin of `k`, cyclically.
fn near_lattice(k: usize, n: usize, period: usize) -> Vec<usize> {
    let step = n / period;
    (0..period)
        .filter(|m| {
            let c = m * step;
            let d = (k + n - c) % n;
            d.min(n - d) <= 1
        })
        .collect()
}

/// Bin mask of the period-`period` harmonic lattice: bins within ±1 (per
/// axis) of a lattice point `(a·h/period, b·w/period)` other than DC.
pub fn harmonic_mask(h: usize, w: usize, period: usize) -> Vec<bool> {
    let ny: Vec<Vec<usize>> = (0..h).map(|k| near_lattice(k, h, period)).collect();
    let nx: Vec<Vec<usize>> = (0..w).map(|k| near_lattice(k, w, period)).collect();
    let mut mask = vec![false; h * w];
    for ky in 0..h {
        for kx in 0..w {
            mask[ky * w + kx] = ny[ky]
                .iter()
                .any(|&a| nx[kx].iter().any(|&b| a != 0 || b != 0));
        }
    }
    mask
}

/// Share of non-DC luminance power sitting on the `period` harmonic lattice.
pub fn grid_artifact_energy(x: &Image, period: usize) -> Result<ArtifactReport> {
    let (h, w) = (x.height(), x.width());
    if period < 2 || h % period != 0 || w % period != 0 {
        return Err(Error::invalid(format!(
            "period {period} must be >= 2 and divide {h}×{w}"
        )));
    }
    let power = power_spectrum(x);
    let mask = harmonic_mask(h, w, period);
    let mut harmonic = 0.0;
    let mut total = 0.0;
    for (i, (&p, &m)) in power.iter().zip(&mask).enumerate() {
        if i == 0 {
            continue;
        }
        total += p;
        if m {
            harmonic += p;
        }
    }
    Ok(ArtifactReport {
        period,
        harmonic_energy: harmonic,
        total_ac_energy: total,
        ratio: harmonic / total.max(RATIO_EPS),
    })
}

/// Signed frequency of bin `k` in cycles per pixel, in `[-0.5, 0.5)`.
fn signed_freq(k: usize, n: usize) -> f64 {
    let k = k as f64;
    let n_f = n as f64;
    if k < n_f / 2.0 {
        k / n_f
    } else {
        k / n_f - 1.0
    }
}

/// Mean luminance power in `n_bins` equal-width radial frequency bins from
/// 0 to the corner frequency `√0.5`. Returns `(bin center, mean power)`.
pub fn radial_power_spectrum(x: &Image, n_bins: usize) -> Result<Vec<(f64, f64)>> {
    if n_bins < 2 {
        return Err(Error::invalid("n_bins must be at least 2"));
    }
    let (h, w) = (x.height(), x.width());
    let power = power_spectrum(x);
    let r_max = 0.5f64.sqrt();
    let width = r_max / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for ky in 0..h {
        for kx in 0..w {
            let r = signed_freq(ky, h).hypot(signed_freq(kx, w));
            let b = ((r / width) as usize).min(n_bins - 1);
            sums[b] += power[ky * w + kx];
            counts[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| {
            let mean = if counts[b] > 0 { sums[b] / counts[b] as f64 } else { 0.0 };
            ((b as f64 + 0.5) * width, mean)
        })
        .collect())
}

/// Mean power over bins with radial frequency above `cutoff` cycles/pixel.
pub fn high_frequency_energy(x: &Image, cutoff: f64) -> f64 {
    let (h, w) = (x.height(), x.width());
    let power = power_spectrum(x);
    let mut s = 0.0;
    let mut n = 0usize;
    for ky in 0..h {
        for kx in 0..w {
            if signed_freq(ky, h).hypot(signed_freq(kx, w)) > cutoff {
                s += power[ky * w + kx];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Log-scaled, DC-centred amplitude spectrum of the luminance in `[0, 1]`.
pub fn spectrum_image(x: &Image) -> Image {
    let (h, w) = (x.height(), x.width());
    let amp: Vec<f64> = fft2(&x.luminance(), h, w)
        .iter()
        .map(|c| c.norm().ln_1p())
        .collect();
    let max = amp.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    Image::from_fn(h, w, 3, |y, x, _| {
        let sy = (y + h - h / 2) % h;
        let sx = (x + w - w / 2) % w;
        amp[sy * w + sx] * scale
    })
}

/// Peak signal-to-noise ratio in dB; [`PSNR_CAP`] when the inputs match.
pub fn psnr(x: &Image, y: &Image, peak: f64) -> Result<f64> {
    x.tensor().expect_same_shape(y.tensor(), "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::invalid("peak must be positive"));
    }
    let mse = x
        .tensor()
        .data()
        .iter()
        .zip(y.tensor().data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.tensor().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = taps.iter().enumerate().map(|(j, t)| t * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(j, t)| t * tmp[(y + j) * wo + x]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM (11×11, σ = 1.5, data range 1) averaged over
/// valid window positions and channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.tensor().expect_same_shape(y.tensor(), "ssim")?;
    let (h, w, c) = (x.height(), x.width(), x.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let taps = ssim_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ch in 0..c {
        let a: Vec<f64> = (0..h * w).map(|i| x.tensor().data()[i * c + ch]).collect();
        let b: Vec<f64> = (0..h * w).map(|i| y.tensor().data()[i * c + ch]).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mu_a = filter_valid(&a, h, w, &taps);
        let mu_b = filter_valid(&b, h, w, &taps);
        let aa = filter_valid(&prod(&a, &a), h, w, &taps);
        let bb = filter_valid(&prod(&b, &b), h, w, &taps);
        let ab = filter_valid(&prod(&a, &b), h, w, &taps);
        let n = mu_a.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / n as f64;
    }
    Ok(total / c as f64)
}

/// Adds `amplitude · pattern` tiled with period `period` to every channel.
pub fn add_grid_pattern(x: &Image, period: usize, amplitude: f64, pattern: &[f64]) -> Image {
    assert_eq!(pattern.len(), period * period);
    let t = x.tensor();
    let c = x.channels();
    let w = x.width();
    let data: Vec<f64> = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (yy, xx) = (i / (w * c), (i / c) % w);
            v + amplitude * pattern[(yy % period) * period + xx % period]
        })
        .collect();
    Image::new_unchecked_range(Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap()
}
