//! The fixed feature extractor Φ shared by the perceptual loss and FDL.
//!
//! | stage | kernel | stride | channels | output (64×64 input) |
//! |-------|--------|--------|----------|----------------------|
//! | 0     | 3      | 1      | 3 → 8    | 64 × 64 × 8          |
//! | 1     | 3      | 2      | 8 → 16   | 32 × 32 × 16         |
//! | 2     | 3      | 2      | 16 → 16  | 16 × 16 × 16         |
//!
//! Each stage is a zero-padded convolution followed by a leaky ReLU with
//! slope 0.2. Weights are He-normal draws from a fixed seed and never change.

use std::sync::OnceLock;

use crate::autodiff::{Graph, Var};
use crate::ConvGeom;
use crate::error::Result;
use crate::image::Image;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

use super::generator::IMAGE_CHANNELS;
use super::params::normal;

/// `(kernel, stride, out_channels)` per stage.
pub const FEATURE_STAGES: [(usize, usize, usize); 3] = [(3, 1, 8), (3, 2, 16), (3, 2, 16)];
const FEATURE_SEED: u64 = 0x5eed_f1;
const LEAK: f64 = 0.2;

struct FeatureExtractor {
    weights: Vec<Tensor>,
}

fn extractor() -> &'static FeatureExtractor {
    static PHI: OnceLock<FeatureExtractor> = OnceLock::new();
    PHI.get_or_init(|| {
        let mut c_in = IMAGE_CHANNELS;
        let weights = FEATURE_STAGES
            .iter()
            .enumerate()
            .map(|(i, &(k, _, c))| {
                let fan_in = k * k * c_in;
                c_in = c;
                normal(&[c, fan_in], (2.0 / fan_in as f64).sqrt(), &mut rng::stream(&[FEATURE_SEED, tag::INIT, i as u64]))
            })
            .collect();
        FeatureExtractor { weights }
    })
}

/// Φ weights, for snapshot comparisons.
pub fn feature_weights() -> Vec<Tensor> {
    extractor().weights.clone()
}

/// Φ applied to an `H × W × 3` node; one map per stage.
pub fn feature_extract(g: &mut Graph, x: Var) -> Result<Vec<Var>> {
    let phi = extractor();
    let mut h = g.affine(x, 2.0, -1.0);
    let mut out = Vec::with_capacity(FEATURE_STAGES.len());
    for (w, &(k, s, _)) in phi.weights.iter().zip(&FEATURE_STAGES) {
        let wv = g.constant(w.clone());
        let c = g.conv2d(h, wv, None, ConvGeom::new(k, s, k / 2))?;
        h = g.leaky_relu(c, LEAK);
        out.push(h);
    }
    Ok(out)
}

/// Φ on a concrete image.
pub fn feature_extract_image(x: &Image) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let feats = feature_extract(&mut g, xv)?;
    Ok(feats.into_iter().map(|f| g.value(f).clone()).collect())
}
