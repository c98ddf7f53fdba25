//! Convolution, pooling and attention.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Geometry of a square-kernel 2-D convolution over `H × W × C` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    pub fn out_size(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

struct Im2Col {
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl Im2Col {
    fn patch_len(&self) -> usize {
        self.geom.kernel * self.geom.kernel * self.c
    }

    /// Calls `f(col_row, col_offset, input_offset)` for every in-bounds tap;
    /// each tap covers `c` contiguous channels.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.geom.kernel;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = oy * self.wo + ox;
                for ky in 0..k {
                    let iy = (oy * self.geom.stride + ky) as isize - self.geom.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.geom.stride + kx) as isize - self.geom.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.c;
                        f(row, (ky * k + kx) * self.c, src);
                    }
                }
            }
        }
    }

    fn cols(&self, x: &[f64]) -> Vec<f64> {
        let kl = self.patch_len();
        let mut cols = vec![0.0; self.ho * self.wo * kl];
        let c = self.c;
        self.for_each_tap(|row, off, src| {
            cols[row * kl + off..row * kl + off + c].copy_from_slice(&x[src..src + c]);
        });
        cols
    }

    fn fold(&self, dcols: &[f64]) -> Vec<f64> {
        let kl = self.patch_len();
        let mut dx = vec![0.0; self.h * self.w * self.c];
        let c = self.c;
        self.for_each_tap(|row, off, src| {
            for (d, s) in dx[src..src + c].iter_mut().zip(&dcols[row * kl + off..row * kl + off + c]) {
                *d += s;
            }
        });
        dx
    }
}

impl Graph {
    /// 2-D convolution. `x: H × W × C_in`, `w: C_out × (k·k·C_in)` with taps in
    /// `(ky, kx, c)` order, optional bias `b: C_out`. Zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (h, wd, c) = self.value(x).dims3()?;
        let (c_out, kl) = self.value(w).dims2()?;
        if kl != geom.kernel * geom.kernel * c {
            return Err(Error::shape(
                "conv2d weight",
                &[c_out, geom.kernel * geom.kernel * c],
                self.shape(w),
            ));
        }
        if let Some(b) = b {
            self.value(b).expect_shape(&[c_out], "conv2d bias")?;
        }
        let (Some(ho), Some(wo)) = (geom.out_size(h), geom.out_size(wd)) else {
            return Err(Error::invalid(format!("conv2d {geom:?} does not fit {h}×{wd}")));
        };
        let im = Im2Col { h, w: wd, c, ho, wo, geom };
        let cols = im.cols(self.value(x).data());
        let n = ho * wo;
        let mut out = vec![0.0; n * c_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            1.0,
            MatRef::row_major(&cols, n, kl),
            MatRef::row_major(self.value(w).data(), c_out, kl).t(),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            c_out,
        );
        let value = Tensor::new([ho, wo, c_out], out)?;
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.op(value, &parents, move |a| {
            let g = a.grad.data();
            let gx = a.needs[0].then(|| {
                let mut dcols = vec![0.0; n * kl];
                gemm(
                    1.0,
                    MatRef::row_major(g, n, c_out),
                    MatRef::row_major(a.inputs[1].data(), c_out, kl),
                    0.0,
                    &mut dcols,
                    kl,
                );
                Tensor::new([im.h, im.w, im.c], im.fold(&dcols)).unwrap()
            });
            let gw = a.needs[1].then(|| {
                let mut dw = vec![0.0; c_out * kl];
                gemm(
                    1.0,
                    MatRef::row_major(g, n, c_out).t(),
                    MatRef::row_major(&cols, n, kl),
                    0.0,
                    &mut dw,
                    kl,
                );
                Tensor::new([c_out, kl], dw).unwrap()
            });
            let mut grads = vec![gx, gw];
            if a.inputs.len() == 3 {
                grads.push(a.needs[2].then(|| {
                    let mut gb = vec![0.0; c_out];
                    for row in g.chunks(c_out) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::new([c_out], gb).unwrap()
                }));
            }
            grads
        }))
    }

    /// Mean over the spatial axes: `H × W × C → 1 × 1 × C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        let n = (h * w) as f64;
        let mut out = vec![0.0; c];
        for px in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        let value = Tensor::new([1, 1, c], out)?;
        Ok(self.op(value, &[x], move |a| {
            let g = a.grad.data();
            let mut gx = vec![0.0; h * w * c];
            for px in gx.chunks_mut(c) {
                for (o, v) in px.iter_mut().zip(g) {
                    *o = v / n;
                }
            }
            vec![Some(Tensor::new([h, w, c], gx).unwrap())]
        }))
    }

    /// Multi-head scaled dot-product attention without masking.
    /// `q`, `k`, `v` are `L × d`; heads split `d` into contiguous blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (l, d) = self.value(q).dims2()?;
        for t in [k, v] {
            self.value(t).expect_shape(&[l, d], "attention")?;
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; l * d];
        let mut probs = vec![0.0; heads * l * l];
        for h in 0..heads {
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            gemm(
                scale,
                MatRef::col_block(qv, l, d, h * dh, dh),
                MatRef::col_block(kv, l, d, h * dh, dh).t(),
                0.0,
                p,
                l,
            );
            for row in p.chunks_mut(l) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
            gemm(
                1.0,
                MatRef::row_major(p, l, l),
                MatRef::col_block(vv, l, d, h * dh, dh),
                0.0,
                &mut out[h * dh..],
                d,
            );
        }
        let value = Tensor::new([l, d], out)?;
        Ok(self.op(value, &[q, k, v], move |a| {
            let (qv, kv, vv, g) = (
                a.inputs[0].data(),
                a.inputs[1].data(),
                a.inputs[2].data(),
                a.grad.data(),
            );
            let mut gq = vec![0.0; l * d];
            let mut gk = vec![0.0; l * d];
            let mut gv = vec![0.0; l * d];
            let mut dp = vec![0.0; l * l];
            for h in 0..heads {
                let p = &probs[h * l * l..(h + 1) * l * l];
                let g_h = MatRef::col_block(g, l, d, h * dh, dh);
                // dV = Pᵀ dO
                gemm(1.0, MatRef::row_major(p, l, l).t(), g_h, 0.0, &mut gv[h * dh..], d);
                // dP = dO Vᵀ
                gemm(1.0, g_h, MatRef::col_block(vv, l, d, h * dh, dh).t(), 0.0, &mut dp, l);
                // softmax backward, scaled into dS
                for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (x, pv) in drow.iter_mut().zip(prow) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                gemm(
                    1.0,
                    MatRef::row_major(&dp, l, l),
                    MatRef::col_block(kv, l, d, h * dh, dh),
                    0.0,
                    &mut gq[h * dh..],
                    d,
                );
                gemm(
                    1.0,
                    MatRef::row_major(&dp, l, l).t(),
                    MatRef::col_block(qv, l, d, h * dh, dh),
                    0.0,
                    &mut gk[h * dh..],
                    d,
                );
            }
            vec![
                Some(Tensor::new([l, d], gq).unwrap()),
                Some(Tensor::new([l, d], gk).unwrap()),
                Some(Tensor::new([l, d], gv).unwrap()),
            ]
        }))
    }
}
