//! Elementwise, reduction, linear-algebra and indexing operations.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn unary<F, D>(&mut self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let value = self.value(x).map(f);
        self.op(value, &[x], move |a| {
            let x = a.inputs[0].data();
            let y = a.out.data();
            let data = a
                .grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, g)| g * df(x[i], y[i]))
                .collect();
            vec![Some(Tensor::new(a.grad.shape().to_vec(), data).unwrap())]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.op(value, &[a, b], |a| {
            vec![Some(a.grad.clone()), Some(a.grad.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.op(value, &[a, b], |a| {
            vec![Some(a.grad.clone()), Some(a.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.op(value, &[a, b], |a| {
            let ga = a.needs[0].then(|| a.grad.zip_map(a.inputs[1], |g, y| g * y).unwrap());
            let gb = a.needs[1].then(|| a.grad.zip_map(a.inputs[0], |g, x| g * x).unwrap());
            vec![ga, gb]
        }))
    }

    /// `s * x + c` with constant `s`, `c`.
    pub fn affine(&mut self, x: Var, s: f64, c: f64) -> Var {
        self.unary(x, move |v| s * v + c, move |_, _| s)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(max(x, floor))`; no gradient flows where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(
            x,
            move |v| v.max(floor).ln(),
            move |x, _| if x > floor { 1.0 / x } else { 0.0 },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, |x, _| gelu_grad(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.op(value, &[x], move |a| {
            vec![Some(Tensor::full(shape.clone(), a.grad.item()))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `x - s` where `s` is a one-element tensor broadcast over `x`.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("sub_scalar", &[], self.shape(s)));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v - sv);
        let s_shape = self.shape(s).to_vec();
        Ok(self.op(value, &[x, s], move |a| {
            let gs = Tensor::full(s_shape.clone(), -a.grad.sum());
            vec![Some(a.grad.clone()), Some(gs)]
        }))
    }

    /// Weighted sum of same-shaped values with constant weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::invalid("weighted_sum of no terms"));
        };
        let shape = self.shape(first).to_vec();
        let mut value = Tensor::zeros(shape.clone());
        for &(v, w) in terms {
            self.value(v).expect_shape(&shape, "weighted_sum")?;
            for (o, x) in value.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.op(value, &parents, move |a| {
            weights
                .iter()
                .zip(&a.needs)
                .map(|(&w, &need)| need.then(|| a.grad.map(|g| w * g)))
                .collect()
        }))
    }

    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let t: Vec<(Var, f64)> = terms.iter().map(|&v| (v, 1.0)).collect();
        self.weighted_sum(&t)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let orig = self.shape(x).to_vec();
        Ok(self.op(value, &[x], move |a| {
            vec![Some(a.grad.clone().reshape(orig.clone()).unwrap())]
        }))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", &[index.len()], shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range {}", xv.len())));
        }
        let src = xv.data();
        let value = Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect())?;
        let in_shape = xv.shape().to_vec();
        Ok(self.op(value, &[x], move |a| {
            let mut g = Tensor::zeros(in_shape.clone());
            let gd = g.data_mut();
            for (k, &i) in index.iter().enumerate() {
                gd[i] += a.grad.data()[k];
            }
            vec![Some(g)]
        }))
    }

    /// 2-D product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = value.shape()[1];
        Ok(self.op(value, &[a, b], move |args| {
            let (av, bv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let ga = args.needs[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm(
                    1.0,
                    MatRef::row_major(g, m, n),
                    MatRef::row_major(bv, k, n).t(),
                    0.0,
                    &mut out,
                    k,
                );
                Tensor::new([m, k], out).unwrap()
            });
            let gb = args.needs[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm(
                    1.0,
                    MatRef::row_major(av, m, k).t(),
                    MatRef::row_major(g, m, n),
                    0.0,
                    &mut out,
                    n,
                );
                Tensor::new([k, n], out).unwrap()
            });
            vec![ga, gb]
        }))
    }

    /// `x · wᵀ (+ b)` for `x: L × d_in`, `w: d_out × d_in`, `b: d_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (l, d_in) = self.value(x).dims2()?;
        let (d_out, d_in2) = self.value(w).dims2()?;
        if d_in != d_in2 {
            return Err(Error::shape("linear", &[d_out, d_in], self.shape(w)));
        }
        if let Some(b) = b {
            self.value(b).expect_shape(&[d_out], "linear bias")?;
        }
        let mut out = vec![0.0; l * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            1.0,
            MatRef::row_major(self.value(x).data(), l, d_in),
            MatRef::row_major(self.value(w).data(), d_out, d_in).t(),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            d_out,
        );
        let value = Tensor::new([l, d_out], out)?;
        let parents: Vec<Var> = std::iter::once(x).chain([w]).chain(b).collect();
        Ok(self.op(value, &parents, move |a| {
            let (xv, wv, g) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
            let gx = a.needs[0].then(|| {
                let mut out = vec![0.0; l * d_in];
                gemm(
                    1.0,
                    MatRef::row_major(g, l, d_out),
                    MatRef::row_major(wv, d_out, d_in),
                    0.0,
                    &mut out,
                    d_in,
                );
                Tensor::new([l, d_in], out).unwrap()
            });
            let gw = a.needs[1].then(|| {
                let mut out = vec![0.0; d_out * d_in];
                gemm(
                    1.0,
                    MatRef::row_major(g, l, d_out).t(),
                    MatRef::row_major(xv, l, d_in),
                    0.0,
                    &mut out,
                    d_in,
                );
                Tensor::new([d_out, d_in], out).unwrap()
            });
            let mut grads = vec![gx, gw];
            if a.inputs.len() == 3 {
                grads.push(a.needs[2].then(|| {
                    let mut gb = vec![0.0; d_out];
                    for row in g.chunks(d_out) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::new([d_out], gb).unwrap()
                }));
            }
            grads
        }))
    }

    /// Adds a length-`d` vector to every row of the trailing dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        self.value(b).expect_shape(&[d], "add_bias")?;
        let mut value = self.value(x).clone();
        let bv = self.value(b).data();
        for row in value.data_mut().chunks_mut(d) {
            for (o, v) in row.iter_mut().zip(bv) {
                *o += v;
            }
        }
        Ok(self.op(value, &[x, b], move |a| {
            let gb = a.needs[1].then(|| {
                let mut gb = vec![0.0; d];
                for row in a.grad.data().chunks(d) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::new([d], gb).unwrap()
            });
            vec![Some(a.grad.clone()), gb]
        }))
    }

    /// Row-wise normalization to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; l * d];
        let mut inv_std = vec![0.0; l];
        for r in 0..l {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let value = Tensor::new([l, d], out)?;
        Ok(self.op(value, &[x], move |a| {
            let (y, g) = (a.out.data(), a.grad.data());
            let mut gx = vec![0.0; l * d];
            for r in 0..l {
                let ys = &y[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let mean_g = gs.iter().sum::<f64>() / d as f64;
                let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = inv_std[r] * (gs[j] - mean_g - ys[j] * mean_gy);
                }
            }
            vec![Some(Tensor::new([l, d], gx).unwrap())]
        }))
    }

    /// Stacks two 2-D values with equal column counts.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, c) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if c != cb {
            return Err(Error::shape("concat_rows", &[rb, c], self.shape(b)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new([ra + rb, c], data)?;
        Ok(self.op(value, &[a, b], move |args| {
            let g = args.grad.data();
            vec![
                Some(Tensor::new([ra, c], g[..ra * c].to_vec()).unwrap()),
                Some(Tensor::new([rb, c], g[ra * c..].to_vec()).unwrap()),
            ]
        }))
    }

    /// Rows `[start, end)` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start > end || end > r {
            return Err(Error::invalid(format!("row slice {start}..{end} of {r} rows")));
        }
        let value = Tensor::new([end - start, c], self.value(x).data()[start * c..end * c].to_vec())?;
        Ok(self.op(value, &[x], move |a| {
            let mut g = vec![0.0; r * c];
            g[start * c..end * c].copy_from_slice(a.grad.data());
            vec![Some(Tensor::new([r, c], g).unwrap())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_grad_error;
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_gradients() {
        let x = rand_tensor(&[3, 4], 1);
        let y = rand_tensor(&[3, 4], 2);
        let err = max_grad_error(&[x, y], 1e-5, |g, v| {
            let p = g.mul(v[0], v[1]).unwrap();
            let s = g.sigmoid(p);
            let l = g.log_clamped(s, 1e-12);
            let q = g.gelu(v[0]);
            let r = g.leaky_relu(v[1], 0.2);
            let sq = g.square(r);
            let d = g.sub(q, sq).unwrap();
            let ab = g.abs(d);
            let t = g.add(l, ab).unwrap();
            let t = g.affine(t, 0.7, 0.1);
            g.mean(t)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_algebra_gradients() {
        let x = rand_tensor(&[5, 3], 3);
        let w = rand_tensor(&[4, 3], 4);
        let b = rand_tensor(&[4], 5);
        let m = rand_tensor(&[4, 2], 6);
        let err = max_grad_error(&[x, w, b, m], 1e-5, |g, v| {
            let h = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let h = g.layer_norm(h, 1e-5).unwrap();
            let h = g.add_bias(h, v[2]).unwrap();
            let o = g.matmul(h, v[3]).unwrap();
            let top = g.slice_rows(o, 1, 4).unwrap();
            let c = g.concat_rows(top, o).unwrap();
            let s = g.mean(c);
            let z = g.sub_scalar(c, s).unwrap();
            let z = g.square(z);
            g.sum(z)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_and_weighted_sum_gradients() {
        let x = rand_tensor(&[6], 7);
        let err = max_grad_error(&[x], 1e-5, |g, v| {
            let idx = Rc::new(vec![5, 0, 0, 3, 2, 2]);
            let y = g.gather(v[0], idx, &[2, 3]).unwrap();
            let y2 = g.reshape(v[0], &[2, 3]).unwrap();
            let y2 = g.square(y2);
            let s = g.weighted_sum(&[(y, 0.5), (y2, -2.0)]).unwrap();
            let s = g.square(s);
            g.sum(s)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constants_do_not_get_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full([2], 1.0));
        let b = g.constant(Tensor::full([2], 3.0));
        let c = g.mul(a, b).unwrap();
        let d = g.detach(c);
        let e = g.add(c, d).unwrap();
        let l = g.sum(e);
        let grads = g.backward(l);
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(b).is_none());
        assert!(!g.requires_grad(d));
    }
}
