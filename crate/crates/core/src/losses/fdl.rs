//! Frequency distribution loss: DFT amplitude and phase of Φ feature
//! patches, compared as point clouds with the sliced Wasserstein distance.

use std::f64::consts::{PI, TAU};
use std::rc::Rc;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::feature_extract;
use crate::rng::{self, tag};
use crate::tensor::{matmul, Tensor};

use super::LossWeights;

/// `cos` and `sin` of `2πk/n` for `k < n`, exact at quarter turns.
fn twiddles(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            if (4 * k) % n == 0 {
                match 4 * k / n {
                    0 => (1.0, 0.0),
                    1 => (0.0, 1.0),
                    2 => (-1.0, 0.0),
                    _ => (0.0, -1.0),
                }
            } else {
                let a = TAU * k as f64 / n as f64;
                (a.cos(), a.sin())
            }
        })
        .collect()
}

/// `out[a, b] = Σ z[c, d]·exp(sign·2πi(ac/h + bd/w))` for an `h × w` complex
/// array stored as separate real and imaginary parts.
fn dft2(re: &[f64], im: &[f64], h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let (th, tw) = (twiddles(h), twiddles(w));
    let mut r1 = vec![0.0; h * w];
    let mut i1 = vec![0.0; h * w];
    for y in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for x in 0..w {
                let (c, s) = tw[(v * x) % w];
                let s = sign * s;
                let (a, b) = (re[y * w + x], im[y * w + x]);
                sr += a * c - b * s;
                si += a * s + b * c;
            }
            r1[y * w + v] = sr;
            i1[y * w + v] = si;
        }
    }
    let mut r2 = vec![0.0; h * w];
    let mut i2 = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                let (c, s) = th[(u * y) % h];
                let s = sign * s;
                let (a, b) = (r1[y * w + v], i1[y * w + v]);
                sr += a * c - b * s;
                si += a * s + b * c;
            }
            r2[u * w + v] = sr;
            i2[u * w + v] = si;
        }
    }
    (r2, i2)
}

/// Argument in `(−π, π]`.
fn phase(re: f64, im: f64) -> f64 {
    let p = im.atan2(re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Amplitude and phase of an unnormalized 2-D DFT.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDecomposition {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

impl SpectralDecomposition {
    /// Inverse DFT from amplitude and phase (real part).
    pub fn reconstruct(&self) -> Tensor {
        let (h, w) = self.amplitude.dims2().expect("2-D spectrum");
        let (a, p) = (self.amplitude.data(), self.phase.data());
        let re: Vec<f64> = a.iter().zip(p).map(|(a, p)| a * p.cos()).collect();
        let im: Vec<f64> = a.iter().zip(p).map(|(a, p)| a * p.sin()).collect();
        let (r, _) = dft2(&re, &im, h, w, 1.0);
        let n = (h * w) as f64;
        Tensor::new([h, w], r.into_iter().map(|v| v / n).collect()).expect("sized")
    }
}

pub fn dft_decompose(feature: &Tensor) -> Result<SpectralDecomposition> {
    let (h, w) = feature.dims2()?;
    if !feature.is_finite() {
        return Err(Error::invalid("dft_decompose input is not finite"));
    }
    let (re, im) = dft2(feature.data(), &vec![0.0; h * w], h, w, -1.0);
    Ok(SpectralDecomposition {
        amplitude: Tensor::new([h, w], re.iter().zip(&im).map(|(r, i)| r.hypot(*i)).collect())?,
        phase: Tensor::new([h, w], re.iter().zip(&im).map(|(r, i)| phase(*r, *i)).collect())?,
    })
}

/// Index of feature element `(y, x, c)` for point `(c, patch)` and bin.
fn patch_layout(h: usize, w: usize, c: usize, p: usize) -> Vec<Vec<usize>> {
    let (nh, nw) = (h / p, w / p);
    let mut points = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        for py in 0..nh {
            for px in 0..nw {
                let mut idx = Vec::with_capacity(p * p);
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(((py * p + dy) * w + px * p + dx) * c + ch);
                    }
                }
                points.push(idx);
            }
        }
    }
    points
}

/// Patch size actually used on an `h × w` map: the largest divisor of both
/// sides not exceeding `patch`.
pub fn effective_patch(h: usize, w: usize, patch: usize) -> usize {
    (1..=patch.min(h).min(w)).rev().find(|p| h % p == 0 && w % p == 0).unwrap_or(1)
}

/// `p² × p²` cosine and sine kernels of the 2-D DFT on a `p × p` patch,
/// both symmetric: `C[(u,v),(y,x)] = cos 2π(uy + vx)/p`.
fn dft_kernels(p: usize) -> (Tensor, Tensor) {
    let tw = twiddles(p);
    let bins = p * p;
    let mut c = vec![0.0; bins * bins];
    let mut s = vec![0.0; bins * bins];
    for u in 0..p {
        for v in 0..p {
            for y in 0..p {
                for x in 0..p {
                    let (cos, sin) = tw[(u * y + v * x) % p];
                    c[(u * p + v) * bins + y * p + x] = cos;
                    s[(u * p + v) * bins + y * p + x] = sin;
                }
            }
        }
    }
    (Tensor::new([bins, bins], c).expect("sized"), Tensor::new([bins, bins], s).expect("sized"))
}

/// Per-patch spectra of an `H × W × C` node. Returns `(amplitude, phase)`,
/// each `(C·patches) × p²`, one row per channel-patch.
pub fn patch_spectra(g: &mut Graph, x: Var, patch: usize) -> Result<(Var, Var)> {
    let (h, w, c) = g.value(x).dims3()?;
    let p = effective_patch(h, w, patch);
    let layout: Vec<usize> = patch_layout(h, w, c, p).concat();
    let bins = p * p;
    let n = layout.len() / bins;
    let xv = g.value(x).data();
    let patches = Tensor::new([n, bins], layout.iter().map(|&i| xv[i]).collect())?;
    let (kc, ks) = dft_kernels(p);
    let re = matmul(&patches, &kc)?;
    let mut im = matmul(&patches, &ks)?;
    im.scale_in_place(-1.0);
    let mut out = vec![0.0; n * 2 * bins];
    for k in 0..n {
        let row = &mut out[k * 2 * bins..(k + 1) * 2 * bins];
        for b in 0..bins {
            let (r, i) = (re.data()[k * bins + b], im.data()[k * bins + b]);
            row[b] = (r * r + i * i).sqrt();
            row[bins + b] = phase(r, i);
        }
    }
    let value = Tensor::new([n, 2 * bins], out)?;
    let in_shape = vec![h, w, c];
    let joint = g.op(value, &[x], move |a| {
        let gd = a.grad.data();
        let (red, imd) = (re.data(), im.data());
        let mut g_re = vec![0.0; n * bins];
        let mut g_im = vec![0.0; n * bins];
        for k in 0..n {
            let row = &gd[k * 2 * bins..(k + 1) * 2 * bins];
            for b in 0..bins {
                let (r, i) = (red[k * bins + b], imd[k * bins + b]);
                let r2 = r * r + i * i;
                if r2 == 0.0 {
                    continue;
                }
                let amp = r2.sqrt();
                let (ga, gp) = (row[b], row[bins + b]);
                g_re[k * bins + b] = ga * r / amp - gp * i / r2;
                // d im / d x carries the minus sign of the forward kernel
                g_im[k * bins + b] = -(ga * i / amp + gp * r / r2);
            }
        }
        let g_re = Tensor::new([n, bins], g_re).expect("sized");
        let g_im = Tensor::new([n, bins], g_im).expect("sized");
        let mut back = matmul(&g_re, &kc).expect("n × bins by bins × bins");
        back.add_assign(&matmul(&g_im, &ks).expect("n × bins by bins × bins"));
        let mut gx = Tensor::zeros(in_shape.clone());
        let gxd = gx.data_mut();
        for (&i, v) in layout.iter().zip(back.data()) {
            gxd[i] += v;
        }
        vec![Some(gx)]
    });
    let amp_idx: Vec<usize> = (0..n).flat_map(|k| (0..bins).map(move |b| k * 2 * bins + b)).collect();
    let ph_idx: Vec<usize> = amp_idx.iter().map(|i| i + bins).collect();
    let amp = g.gather(joint, Rc::new(amp_idx), &[n, bins])?;
    let ph = g.gather(joint, Rc::new(ph_idx), &[n, bins])?;
    Ok((amp, ph))
}

/// Unit slicing directions in `dim` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub directions: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ProjectionSet {
    /// `n_proj` normalized Gaussian draws.
    pub fn new(dim: usize, n_proj: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_proj == 0 {
            return Err(Error::invalid("projection set needs dim > 0 and n_proj > 0"));
        }
        let mut r = rng::stream(&[seed, tag::PROJECTIONS, dim as u64]);
        let directions = (0..n_proj)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect();
        Ok(Self { directions, seed })
    }

    /// Explicit directions, normalized to unit length.
    pub fn from_directions(directions: Vec<Vec<f64>>) -> Result<Self> {
        let dim = directions.first().map_or(0, Vec::len);
        if dim == 0 || directions.iter().any(|d| d.len() != dim) {
            return Err(Error::invalid("directions must be non-empty and share one dimension"));
        }
        let directions = directions
            .into_iter()
            .map(|d| {
                let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    Ok(d.into_iter().map(|x| x / n).collect())
                } else {
                    Err(Error::invalid("zero direction"))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { directions, seed: 0 })
    }

    pub fn dim(&self) -> usize {
        self.directions[0].len()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

fn argsort(v: impl Iterator<Item = f64>) -> Vec<usize> {
    let v: Vec<f64> = v.collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

/// Mean over directions of the 1-D Wasserstein-1 distance between the
/// projected point sets (sorted pairing). `a` and `b` are `n × d`.
pub fn sliced_wasserstein_var(g: &mut Graph, a: Var, b: Var, proj: &ProjectionSet) -> Result<Var> {
    let (n, d) = g.value(a).dims2()?;
    let (nb, db) = g.value(b).dims2()?;
    if d != db || n != nb {
        return Err(Error::shape("sliced_wasserstein", &[n, d], g.shape(b)));
    }
    if n == 0 || proj.is_empty() {
        return Err(Error::invalid("sliced_wasserstein needs points and projections"));
    }
    if proj.dim() != d {
        return Err(Error::invalid(format!("projections have dim {}, points have {d}", proj.dim())));
    }
    let m = proj.len();
    let dirs = Rc::new(Tensor::new([m, d], proj.directions.concat())?);
    let dirs_t = dirs.transpose2()?;
    // n × m projections
    let pa = matmul(g.value(a), &dirs_t)?;
    let pb = matmul(g.value(b), &dirs_t)?;
    let (pa, pb) = (pa.data(), pb.data());
    let mut total = 0.0;
    // Per-point, per-direction coefficient of the gradient.
    let mut ca = vec![0.0; n * m];
    let mut cb = vec![0.0; n * m];
    for j in 0..m {
        let ia = argsort((0..n).map(|k| pa[k * m + j]));
        let ib = argsort((0..n).map(|k| pb[k * m + j]));
        let mut cost = 0.0;
        for k in 0..n {
            let diff = pa[ia[k] * m + j] - pb[ib[k] * m + j];
            cost += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            ca[ia[k] * m + j] = sign;
            cb[ib[k] * m + j] = -sign;
        }
        total += cost / n as f64;
    }
    let value = Tensor::scalar(total / m as f64);
    let ca = Tensor::new([n, m], ca)?;
    let cb = Tensor::new([n, m], cb)?;
    Ok(g.op(value, &[a, b], move |args| {
        let s = args.grad.item() / (n * m) as f64;
        let mut ga = matmul(&ca, &dirs).expect("n × m by m × d");
        let mut gb = matmul(&cb, &dirs).expect("n × m by m × d");
        ga.scale_in_place(s);
        gb.scale_in_place(s);
        vec![Some(ga), Some(gb)]
    }))
}

/// [`sliced_wasserstein_var`] on concrete `n × d` point sets.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, proj: &ProjectionSet) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = sliced_wasserstein_var(&mut g, av, bv, proj)?;
    Ok(g.value(l).item())
}

/// The two FDL terms, each averaged over Φ stages.
pub struct FdlTerms {
    pub amplitude: Var,
    pub phase: Var,
    /// `amplitude + lambda_phase · phase`.
    pub total: Var,
}

/// FDL between two lists of feature maps (one per stage).
pub fn fdl_from_features(g: &mut Graph, feats_hr: &[Var], feats_pred: &[Var], proj_seed: u64, weights: &LossWeights) -> Result<FdlTerms> {
    if feats_hr.len() != feats_pred.len() || feats_hr.is_empty() {
        return Err(Error::invalid("FDL needs matching, non-empty feature lists"));
    }
    let mut amps = Vec::new();
    let mut phases = Vec::new();
    for (s, (&fh, &fp)) in feats_hr.iter().zip(feats_pred).enumerate() {
        g.value(fp).expect_same_shape(g.value(fh), "fdl features")?;
        let (ah, ph) = patch_spectra(g, fh, weights.fdl_patch)?;
        let (ap, pp) = patch_spectra(g, fp, weights.fdl_patch)?;
        let dim = g.shape(ah)[1];
        let proj = ProjectionSet::new(dim, weights.n_projections, rng::derive_seed(&[proj_seed, s as u64]))?;
        amps.push(sliced_wasserstein_var(g, ah, ap, &proj)?);
        phases.push(sliced_wasserstein_var(g, ph, pp, &proj)?);
    }
    let w = 1.0 / amps.len() as f64;
    let amplitude = g.weighted_sum(&amps.iter().map(|&v| (v, w)).collect::<Vec<_>>())?;
    let phase = g.weighted_sum(&phases.iter().map(|&v| (v, w)).collect::<Vec<_>>())?;
    let total = g.weighted_sum(&[(amplitude, 1.0), (phase, weights.lambda_phase)])?;
    Ok(FdlTerms { amplitude, phase, total })
}

/// FDL between two images through Φ. Projections are drawn from `proj_seed`.
pub fn fdl_loss(g: &mut Graph, x_hr: Var, x_pred: Var, proj_seed: u64, weights: &LossWeights) -> Result<FdlTerms> {
    g.value(x_pred).expect_same_shape(g.value(x_hr), "fdl_loss")?;
    let fh = feature_extract(g, x_hr)?;
    let fp = feature_extract(g, x_pred)?;
    fdl_from_features(g, &fh, &fp, proj_seed, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_grad_error;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(&[seed, 77]);
        Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn twiddles_are_exact_at_quarter_turns() {
        let t = twiddles(8);
        assert_eq!(t[2], (0.0, 1.0));
        assert_eq!(t[4], (-1.0, 0.0));
        assert_eq!(t[6], (0.0, -1.0));
    }

    #[test]
    fn constant_has_only_dc() {
        let d = dft_decompose(&Tensor::full([4, 4], 0.5)).unwrap();
        assert!((d.amplitude.data()[0] - 8.0).abs() < 1e-12);
        assert_eq!(d.phase.data()[0], 0.0);
        assert!(d.amplitude.data()[1..].iter().all(|&a| a < 1e-12));
    }

    #[test]
    fn reconstruction_round_trips() {
        let x = random(&[6, 4], 1);
        let back = dft_decompose(&x).unwrap().reconstruct();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn phase_is_in_half_open_interval() {
        assert_eq!(phase(-1.0, -0.0), PI);
        assert_eq!(phase(-1.0, 0.0), PI);
    }

    #[test]
    fn patch_spectra_gradients() {
        let x = random(&[4, 4, 2], 2);
        let err = max_grad_error(&[x], 1e-5, |g, v| {
            let (a, p) = patch_spectra(g, v[0], 2).unwrap();
            let w = g.constant(random(&[8, 4], 3));
            let pa = g.mul(a, w).unwrap();
            let pp = g.mul(p, w).unwrap();
            let s = g.add(pa, pp).unwrap();
            g.sum(s)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sliced_wasserstein_unit_translation() {
        let a = Tensor::new([2, 1], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new([2, 1], vec![1.0, 1.0]).unwrap();
        let proj = ProjectionSet::from_directions(vec![vec![1.0]]).unwrap();
        assert_eq!(sliced_wasserstein(&a, &b, &proj).unwrap(), 1.0);
        assert_eq!(sliced_wasserstein(&a, &a, &proj).unwrap(), 0.0);
    }

    #[test]
    fn sliced_wasserstein_rejects_bad_input() {
        let proj = ProjectionSet::new(2, 4, 0).unwrap();
        assert!(sliced_wasserstein(&Tensor::zeros([3, 2]), &Tensor::zeros([4, 2]), &proj).is_err());
        assert!(sliced_wasserstein(&Tensor::zeros([3, 3]), &Tensor::zeros([3, 3]), &proj).is_err());
        assert!(ProjectionSet::new(2, 0, 0).is_err());
    }

    #[test]
    fn sliced_wasserstein_gradients() {
        let proj = ProjectionSet::new(3, 8, 5).unwrap();
        let err = max_grad_error(&[random(&[5, 3], 6), random(&[5, 3], 7)], 1e-5, |g, v| {
            sliced_wasserstein_var(g, v[0], v[1], &proj).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn effective_patch_divides() {
        assert_eq!(effective_patch(64, 64, 8), 8);
        assert_eq!(effective_patch(4, 4, 8), 4);
        assert_eq!(effective_patch(6, 6, 4), 3);
        assert_eq!(effective_patch(1, 1, 8), 1);
    }
}
