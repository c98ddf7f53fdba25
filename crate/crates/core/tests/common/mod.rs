//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::TAU;

use onestep::{rng, Image, Tensor};
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(&[seed, 0xfeed]);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    Image::new(random_tensor(&[h, w, 3], seed, 0.0, 1.0)).unwrap()
}

/// Direct quadruple-sum DFT of an `h × w` real array: `(re, im)`.
pub fn naive_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            for y in 0..h {
                for xx in 0..w {
                    let a = TAU * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    re[u * w + v] += x[y * w + xx] * a.cos();
                    im[u * w + v] -= x[y * w + xx] * a.sin();
                }
            }
        }
    }
    (re, im)
}

/// Minimum over all bijections of the mean absolute difference.
pub fn brute_force_w1(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let cost = |p: &[usize]| a.iter().zip(p).map(|(x, &j)| (x - b[j]).abs()).sum::<f64>() / n as f64;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    best = best.min(cost(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Per-direction optimal transport cost, averaged over directions.
pub fn sliced_oracle(a: &Tensor, b: &Tensor, dirs: &[Vec<f64>]) -> f64 {
    let d = a.shape()[1];
    let proj = |t: &Tensor, dir: &[f64]| -> Vec<f64> {
        t.data().chunks(d).map(|p| p.iter().zip(dir).map(|(x, y)| x * y).sum()).collect()
    };
    dirs.iter().map(|dir| brute_force_w1(&proj(a, dir), &proj(b, dir))).sum::<f64>() / dirs.len() as f64
}

/// SSIM computed straight from the definition: for every valid 11×11
/// window, Gaussian-weighted moments with a 2-D kernel, per channel.
pub fn ssim_direct(x: &Image, y: &Image) -> f64 {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let k = 11usize;
    let sigma = 1.5f64;
    let mut kern = vec![0.0; k * k];
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            kern[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += kern[i * k + j];
        }
    }
    kern.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wgt = kern[i * k + j];
                        let (a, b) = (x.at(oy + i, ox + j, ch), y.at(oy + i, ox + j, ch));
                        mx += wgt * a;
                        my += wgt * b;
                        sxx += wgt * a * a;
                        syy += wgt * b * b;
                        sxy += wgt * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Rank of a matrix by Gaussian elimination with partial pivoting.
pub fn numerical_rank(m: &Tensor, tol: f64) -> usize {
    let (rows, cols) = m.dims2().unwrap();
    let mut a = m.data().to_vec();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let piv = (rank..rows).max_by(|&i, &j| a[i * cols + col].abs().total_cmp(&a[j * cols + col].abs())).unwrap();
        if a[piv * cols + col].abs() <= tol {
            continue;
        }
        for k in 0..cols {
            a.swap(rank * cols + k, piv * cols + k);
        }
        for i in rank + 1..rows {
            let f = a[i * cols + col] / a[rank * cols + col];
            for k in col..cols {
                a[i * cols + k] -= f * a[rank * cols + k];
            }
        }
        rank += 1;
    }
    rank
}

/// Circularly shifts every `p × p` patch of an `H × W × C` array by
/// `(dy, dx)` within the patch.
pub fn shift_patches(t: &Tensor, p: usize, dy: usize, dx: usize) -> Tensor {
    let (h, w, c) = t.dims3().unwrap();
    let d = t.data();
    Tensor::from_fn([h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        let (py, px) = (y / p * p, x / p * p);
        let sy = py + (y - py + p - dy % p) % p;
        let sx = px + (x - px + p - dx % p) % p;
        d[(sy * w + sx) * c + ch]
    })
}
