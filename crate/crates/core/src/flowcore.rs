//! Rectified-flow primitives and the trajectory-mismatch simulator.
//!
//! States move on the straight path `z_t = t·z1 + (1 − t)·z0` between data
//! (`t = 0`) and noise (`t = 1`). The restoration generator is trained to
//! emit the full displacement `z_t1 − z0`, so a one-step prediction is a
//! plain subtraction with no step-size factor.
//!
//! The simulator trains a small velocity regressor on a 2-D Gaussian
//! mixture, then compares multi-step Euler sampling from noise with single
//! Euler steps taken from degraded data placed at `t1`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamW, Moments};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// A latent at a point in time on a flow path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    z: Tensor,
    t: f64,
}

impl FlowState {
    pub fn new(z: Tensor, t: f64) -> Result<Self> {
        check_time(t)?;
        if !z.is_finite() {
            return Err(Error::invalid("flow state contains non-finite values"));
        }
        Ok(Self { z, t })
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `t·z1 + (1 − t)·z0`.
pub fn interpolate_state(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    z0.expect_same_shape(z1, "interpolate_state")?;
    check_time(t)?;
    z0.zip_map(z1, |a, b| t * b + (1.0 - t) * a)
}

/// Velocity of the straight path, `z1 − z0`.
pub fn target_velocity(z0: &Tensor, z1: &Tensor) -> Result<Tensor> {
    z0.expect_same_shape(z1, "target_velocity")?;
    z1.zip_map(z0, |b, a| b - a)
}

/// Mean squared error between a predicted velocity and `z1 − z0`.
pub fn flow_matching_loss(predicted_v: &Tensor, z0: &Tensor, z1: &Tensor) -> Result<f64> {
    let target = target_velocity(z0, z1)?;
    predicted_v.expect_same_shape(&target, "flow_matching_loss")?;
    let sq: f64 = predicted_v
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    Ok(sq / target.len() as f64)
}

/// Single Euler step to `t = 0`: `ẑ0 = z_t1 − G(z_t1, t1, c)`.
pub fn one_step_predict(z_t1: &Tensor, generator_output: &Tensor) -> Result<Tensor> {
    z_t1.expect_same_shape(generator_output, "one_step_predict")?;
    z_t1.zip_map(generator_output, |z, g| z - g)
}

/// Settings for [`run_mismatch_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchExperimentConfig {
    pub data_dim: usize,
    /// Degradation magnitudes to sweep; each yields one output row.
    pub severities: Vec<f64>,
    pub n_samples: usize,
    pub n_flow_steps: usize,
    pub t1: f64,
    pub seed: u64,
    pub hidden: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training counts as converged when the mean loss over the last tenth
    /// of the budget is at most this value.
    pub max_final_loss: f64,
}

impl Default for MismatchExperimentConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            severities: vec![0.0, 0.5, 1.0, 2.0],
            n_samples: 1000,
            n_flow_steps: 50,
            t1: 0.1,
            seed: 0,
            hidden: 64,
            train_steps: 3000,
            batch_size: 256,
            learning_rate: 2e-3,
            max_final_loss: 2.5,
        }
    }
}

impl MismatchExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::invalid("data_dim must be positive"));
        }
        if self.n_samples < 2 {
            return Err(Error::invalid("n_samples must be at least 2"));
        }
        if self.n_flow_steps == 0 || self.train_steps == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::invalid("step counts and widths must be positive"));
        }
        if !(self.t1 > 0.0 && self.t1 <= 1.0) {
            return Err(Error::invalid(format!("t1 = {} outside (0, 1]", self.t1)));
        }
        if self.severities.is_empty() || self.severities.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("severities must be a non-empty list of values >= 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub severity: f64,
    pub one_step_error: f64,
    pub multi_step_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub rows: Vec<MismatchRow>,
    pub final_train_loss: f64,
    pub converged: bool,
}

impl MismatchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("severity,one_step_error,multi_step_error\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.severity, r.one_step_error, r.multi_step_error));
        }
        s
    }
}

// Mixture components sit at ±MODE_OFFSET along the first axis.
const MODE_OFFSET: f64 = 2.0;
const MODE_STD: f64 = 0.5;
const DEGRADE_SHIFT: f64 = 1.0;
const DEGRADE_BLUR: f64 = 0.5;

fn sample_data(rng: &mut rng::Rng, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for k in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            let center = if k == 0 { sign * MODE_OFFSET } else { 0.0 };
            out.push(center + MODE_STD * noise);
        }
    }
    out
}

fn sample_normal(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Two-hidden-layer perceptron `v(z, t)`.
struct VelocityMlp {
    params: Vec<Tensor>,
}

impl VelocityMlp {
    fn new(d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::stream(&[seed, tag::MISMATCH, 1]);
        let mut layer = |fan_out: usize, fan_in: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            let w = Tensor::from_fn([fan_out, fan_in], |_| {
                std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            [w, Tensor::zeros([fan_out])]
        };
        let mut params = Vec::new();
        params.extend(layer(hidden, d + 1));
        params.extend(layer(hidden, hidden));
        params.extend(layer(d, hidden));
        Self { params }
    }

    fn forward(g: &mut Graph, p: &[Var], z: &[f64], t: &[f64], d: usize) -> Result<Var> {
        let n = t.len();
        let mut x = Vec::with_capacity(n * (d + 1));
        for i in 0..n {
            x.extend_from_slice(&z[i * d..(i + 1) * d]);
            x.push(t[i]);
        }
        let x = g.constant(Tensor::new([n, d + 1], x)?);
        let h = g.linear(x, p[0], Some(p[1]))?;
        let h = g.gelu(h);
        let h = g.linear(h, p[2], Some(p[3]))?;
        let h = g.gelu(h);
        g.linear(h, p[4], Some(p[5]))
    }

    fn eval(&self, z: &[f64], t: f64, d: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let ts = vec![t; z.len() / d];
        let out = Self::forward(&mut g, &p, z, &ts, d)?;
        Ok(g.value(out).data().to_vec())
    }
}

fn train_velocity(cfg: &MismatchExperimentConfig) -> Result<(VelocityMlp, f64)> {
    let d = cfg.data_dim;
    let mut mlp = VelocityMlp::new(d, cfg.hidden, cfg.seed);
    let opt = AdamW::new(cfg.learning_rate);
    let mut moments: Vec<Moments> = mlp.params.iter().map(Moments::zeros_like).collect();
    let tail = (cfg.train_steps / 10).max(1);
    let mut tail_loss = 0.0;

    for step in 0..cfg.train_steps {
        let mut rng = rng::stream(&[cfg.seed, tag::MISMATCH, 0, step as u64]);
        let n = cfg.batch_size;
        let z0 = sample_data(&mut rng, n, d);
        let z1 = sample_normal(&mut rng, n * d);
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut zt = vec![0.0; n * d];
        let mut target = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..d {
                let j = i * d + k;
                zt[j] = t[i] * z1[j] + (1.0 - t[i]) * z0[j];
                target[j] = z1[j] - z0[j];
            }
        }

        let mut g = Graph::new();
        let p: Vec<Var> = mlp.params.iter().map(|t| g.leaf(t.clone())).collect();
        let pred = VelocityMlp::forward(&mut g, &p, &zt, &t, d)?;
        let target = g.constant(Tensor::new([n, d], target)?);
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                what: "velocity regression loss".into(),
                step: step as u64,
            });
        }
        if step >= cfg.train_steps - tail {
            tail_loss += lv / tail as f64;
        }
        let grads = g.backward(loss);
        for (k, var) in p.iter().enumerate() {
            let grad = grads.get(*var).expect("parameter gradient");
            opt.step(&mut mlp.params[k], grad, &mut moments[k], step as u64 + 1, false);
        }
    }
    Ok((mlp, tail_loss))
}

/// Mean over `points` of the squared distance to the nearest reference point.
fn mean_nearest_sq(points: &[f64], reference: &[f64], d: usize) -> f64 {
    let n = points.len() / d;
    let total: f64 = points
        .chunks(d)
        .map(|p| {
            reference
                .chunks(d)
                .map(|r| p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / n as f64
}

/// Trains the velocity field, then for each severity reports the
/// nearest-sample squared error of one-step predictions from degraded
/// starts alongside the (severity-independent) multi-step error.
pub fn run_mismatch_experiment(cfg: &MismatchExperimentConfig) -> Result<MismatchReport> {
    cfg.validate()?;
    let d = cfg.data_dim;
    let n = cfg.n_samples;
    let (mlp, final_loss) = train_velocity(cfg)?;

    let reference = sample_data(&mut rng::stream(&[cfg.seed, tag::MISMATCH, 3]), n, d);

    let mut z = sample_normal(&mut rng::stream(&[cfg.seed, tag::MISMATCH, 4]), n * d);
    let dt = 1.0 / cfg.n_flow_steps as f64;
    for k in 0..cfg.n_flow_steps {
        let t = 1.0 - k as f64 * dt;
        let v = mlp.eval(&z, t, d)?;
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi -= dt * vi;
        }
    }
    let multi_step_error = mean_nearest_sq(&z, &reference, d);

    let mut rng = rng::stream(&[cfg.seed, tag::MISMATCH, 2]);
    let clean = sample_data(&mut rng, n, d);
    let blur = sample_normal(&mut rng, n * d);
    let shift = DEGRADE_SHIFT / (d as f64).sqrt();

    let rows = cfg
        .severities
        .par_iter()
        .map(|&severity| {
            let degraded: Vec<f64> = clean
                .iter()
                .zip(&blur)
                .map(|(x, b)| x + severity * (shift + DEGRADE_BLUR * b))
                .collect();
            let v = mlp.eval(&degraded, cfg.t1, d)?;
            let step: Vec<f64> = v.iter().map(|vi| cfg.t1 * vi).collect();
            let z_t1 = Tensor::new([n, d], degraded)?;
            let pred = one_step_predict(&z_t1, &Tensor::new([n, d], step)?)?;
            Ok(MismatchRow {
                severity,
                one_step_error: mean_nearest_sq(pred.data(), &reference, d),
                multi_step_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MismatchReport {
        rows,
        final_train_loss: final_loss,
        converged: final_loss <= cfg.max_final_loss,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
