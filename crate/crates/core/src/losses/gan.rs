//! Relativistic average GAN losses and the approximated R1 penalty.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{discriminator_forward, Bound, Discriminator};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-12;

/// `mean(−log σ(x − mean(y)))` over the positions of `x`.
fn relativistic_term(g: &mut Graph, x: Var, y: Var, flip: bool) -> Result<Var> {
    let my = g.mean(y);
    let diff = g.sub_scalar(x, my)?;
    let arg = if flip { g.scale(diff, -1.0) } else { diff };
    let s = g.sigmoid(arg);
    let l = g.log_clamped(s, LOG_FLOOR);
    let m = g.mean(l);
    Ok(g.scale(m, -1.0))
}

fn check_levels(fake: &[Var], real: &[Var]) -> Result<()> {
    if fake.is_empty() || real.is_empty() {
        return Err(Error::invalid("RaGAN needs at least one logit level"));
    }
    if fake.len() != real.len() {
        return Err(Error::invalid(format!(
            "{} fake levels vs {} real levels",
            fake.len(),
            real.len()
        )));
    }
    Ok(())
}

fn ragan(g: &mut Graph, first: &[Var], second: &[Var]) -> Result<Var> {
    check_levels(first, second)?;
    let mut levels = Vec::with_capacity(first.len());
    for (&a, &b) in first.iter().zip(second) {
        let t1 = relativistic_term(g, a, b, false)?;
        let t2 = relativistic_term(g, b, a, true)?;
        levels.push(g.add(t1, t2)?);
    }
    let w = 1.0 / levels.len() as f64;
    g.weighted_sum(&levels.iter().map(|&l| (l, w)).collect::<Vec<_>>())
}

/// `−E[log g(fake, real)] − E[log(1 − g(real, fake))]` averaged over levels,
/// with `g(x, y) = σ(C(x) − E[C(y)])` and expectations per level.
pub fn ragan_generator_loss(g: &mut Graph, fake: &[Var], real: &[Var]) -> Result<Var> {
    ragan(g, fake, real)
}

/// Mirror of [`ragan_generator_loss`] with the roles of real and fake swapped.
pub fn ragan_discriminator_loss(g: &mut Graph, fake: &[Var], real: &[Var]) -> Result<Var> {
    check_levels(fake, real)?;
    ragan(g, real, fake)
}

fn eval_pair(fake: &[Tensor], real: &[Tensor], f: fn(&mut Graph, &[Var], &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let fv: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
    let rv: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
    let l = f(&mut g, &fv, &rv)?;
    Ok(g.value(l).item())
}

/// Value of [`ragan_generator_loss`] on concrete logit maps.
pub fn ragan_generator_value(fake: &[Tensor], real: &[Tensor]) -> Result<f64> {
    eval_pair(fake, real, ragan_generator_loss)
}

/// Value of [`ragan_discriminator_loss`] on concrete logit maps.
pub fn ragan_discriminator_value(fake: &[Tensor], real: &[Tensor]) -> Result<f64> {
    eval_pair(fake, real, ragan_discriminator_loss)
}

/// Anything that maps an image node to a list of logit maps.
pub trait Critic {
    fn logits(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;
}

/// A discriminator bound into a graph.
pub struct BoundDiscriminator<'a> {
    pub net: &'a Discriminator,
    pub params: &'a Bound,
}

impl Critic for BoundDiscriminator<'_> {
    fn logits(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        discriminator_forward(g, self.net, self.params, x)
    }
}

/// Gaussian perturbation used by [`approx_r1_loss`].
pub fn r1_noise(shape: &[usize], sigma: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(&[seed, tag::R1_NOISE]);
    Tensor::from_fn(shape.to_vec(), |_| {
        let n: f64 = StandardNormal.sample(&mut r);
        sigma * n
    })
}

/// `‖D(x) − D(x + σε)‖²`, mean over positions, averaged over levels. The
/// perturbed image is not clamped.
pub fn approx_r1_loss(g: &mut Graph, critic: &dyn Critic, x_real: &Tensor, sigma: f64, seed: u64) -> Result<Var> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("r1 sigma {sigma} must be >= 0")));
    }
    let noise = r1_noise(x_real.shape(), sigma, seed);
    let noisy = x_real.zip_map(&noise, |a, b| a + b)?;
    let xr = g.constant(x_real.clone());
    let xn = g.constant(noisy);
    let dr = critic.logits(g, xr)?;
    let dn = critic.logits(g, xn)?;
    if dr.is_empty() {
        return Err(Error::invalid("critic produced no logit maps"));
    }
    let mut levels = Vec::with_capacity(dr.len());
    for (a, b) in dr.into_iter().zip(dn) {
        let d = g.sub(a, b)?;
        let sq = g.square(d);
        levels.push(g.mean(sq));
    }
    let w = 1.0 / levels.len() as f64;
    g.weighted_sum(&levels.iter().map(|&l| (l, w)).collect::<Vec<_>>())
}
