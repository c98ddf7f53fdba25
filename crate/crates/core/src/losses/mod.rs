//! The loss stack: L1, perceptual, RaGAN, approximated R1, FDL, and the
//! weighted generator and discriminator objectives.

pub mod fdl;
pub mod gan;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::feature_extract;

pub use fdl::{
    dft_decompose, fdl_from_features, fdl_loss, patch_spectra, sliced_wasserstein, sliced_wasserstein_var, FdlTerms,
    ProjectionSet, SpectralDecomposition,
};
pub use gan::{
    approx_r1_loss, ragan_discriminator_loss, ragan_discriminator_value, ragan_generator_loss, ragan_generator_value,
    BoundDiscriminator, Critic,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Perceptual weight.
    pub lambda1: f64,
    /// RaGAN generator weight.
    pub lambda2: f64,
    /// FDL weight once the second stage starts; the first stage uses 0.
    pub lambda3: f64,
    pub lambda_r1: f64,
    /// Phase weight inside FDL.
    pub lambda_phase: f64,
    /// Noise std of the approximated R1 perturbation.
    pub r1_sigma: f64,
    /// FDL patch side on feature maps.
    pub fdl_patch: usize,
    /// Slicing directions per FDL evaluation.
    pub n_projections: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 3.0,
            lambda2: 0.1,
            lambda3: 0.002,
            lambda_r1: 10.0,
            lambda_phase: 1.0,
            r1_sigma: 0.01,
            fdl_patch: 8,
            n_projections: 32,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_r1", self.lambda_r1),
            ("lambda_phase", self.lambda_phase),
        ];
        if let Some((k, v)) = w.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("weight {k} = {v} must be finite and >= 0")));
        }
        if !(self.r1_sigma > 0.0) {
            return Err(Error::invalid("r1_sigma must be > 0"));
        }
        if self.fdl_patch == 0 || self.n_projections == 0 {
            return Err(Error::invalid("fdl_patch and n_projections must be positive"));
        }
        Ok(())
    }
}

/// Every loss component of one training step, unweighted, plus totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub ragan_g: f64,
    pub fdl: f64,
    pub total_g: f64,
    pub ragan_d: f64,
    pub r1: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "l1,perceptual,ragan_g,fdl,total_g,ragan_d,r1,total_d";

    pub fn values(&self) -> [f64; 8] {
        [
            self.l1,
            self.perceptual,
            self.ragan_g,
            self.fdl,
            self.total_g,
            self.ragan_d,
            self.r1,
            self.total_d,
        ]
    }

    pub fn to_csv_row(&self) -> String {
        self.values().iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Mean absolute difference.
pub fn l1_loss(g: &mut Graph, x_pred: Var, x_hr: Var) -> Result<Var> {
    g.value(x_pred).expect_same_shape(g.value(x_hr), "l1_loss")?;
    let d = g.sub(x_pred, x_hr)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Mean squared Φ-feature distance, averaged over stages.
pub fn perceptual_loss(g: &mut Graph, x_pred: Var, x_hr: Var) -> Result<Var> {
    g.value(x_pred).expect_same_shape(g.value(x_hr), "perceptual_loss")?;
    let fp = feature_extract(g, x_pred)?;
    let fh = feature_extract(g, x_hr)?;
    perceptual_from_features(g, &fp, &fh)
}

pub fn perceptual_from_features(g: &mut Graph, fp: &[Var], fh: &[Var]) -> Result<Var> {
    if fp.len() != fh.len() || fp.is_empty() {
        return Err(Error::invalid("perceptual loss needs matching, non-empty feature lists"));
    }
    let mut terms = Vec::with_capacity(fp.len());
    for (&a, &b) in fp.iter().zip(fh) {
        let d = g.sub(a, b)?;
        let s = g.square(d);
        terms.push((g.mean(s), 1.0 / fp.len() as f64));
    }
    g.weighted_sum(&terms)
}

fn eval_images(a: &Image, b: &Image, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.tensor().clone()), g.constant(b.tensor().clone()));
    let l = f(&mut g, av, bv)?;
    Ok(g.value(l).item())
}

pub fn l1_value(x_pred: &Image, x_hr: &Image) -> Result<f64> {
    eval_images(x_pred, x_hr, l1_loss)
}

pub fn perceptual_value(x_pred: &Image, x_hr: &Image) -> Result<f64> {
    eval_images(x_pred, x_hr, perceptual_loss)
}

/// FDL value between two images, `amplitude + lambda_phase · phase`.
pub fn fdl_value(x_hr: &Image, x_pred: &Image, proj_seed: u64, weights: &LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let (h, p) = (g.constant(x_hr.tensor().clone()), g.constant(x_pred.tensor().clone()));
    let t = fdl_loss(&mut g, h, p, proj_seed, weights)?;
    Ok(g.value(t.total).item())
}

/// Generator loss components as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorComponents {
    pub l1: Var,
    pub perceptual: Var,
    pub ragan_g: Var,
    pub fdl: Var,
}

/// `l1 + λ1·perceptual + λ2·ragan_g + λ3·fdl`. With `lambda3 == 0` the FDL
/// node is left out of the graph entirely but still reported.
pub fn total_generator_loss(g: &mut Graph, c: GeneratorComponents, weights: &LossWeights, lambda3: f64) -> Result<(Var, LossReport)> {
    let mut terms = vec![(c.l1, 1.0), (c.perceptual, weights.lambda1), (c.ragan_g, weights.lambda2)];
    if lambda3 != 0.0 {
        terms.push((c.fdl, lambda3));
    }
    let total = g.weighted_sum(&terms)?;
    let report = LossReport {
        l1: g.value(c.l1).item(),
        perceptual: g.value(c.perceptual).item(),
        ragan_g: g.value(c.ragan_g).item(),
        fdl: g.value(c.fdl).item(),
        total_g: g.value(total).item(),
        ..LossReport::default()
    };
    Ok((total, report))
}

/// Scalar form of [`total_generator_loss`].
pub fn total_generator_value(l1: f64, perceptual: f64, ragan_g: f64, fdl: f64, weights: &LossWeights, lambda3: f64) -> f64 {
    l1 + weights.lambda1 * perceptual + weights.lambda2 * ragan_g + lambda3 * fdl
}

/// `ragan_d + λ_R1 · r1`.
pub fn total_discriminator_loss(g: &mut Graph, ragan_d: Var, r1: Var, weights: &LossWeights) -> Result<Var> {
    g.weighted_sum(&[(ragan_d, 1.0), (r1, weights.lambda_r1)])
}

pub fn total_discriminator_value(ragan_d: f64, r1: f64, weights: &LossWeights) -> f64 {
    ragan_d + weights.lambda_r1 * r1
}
