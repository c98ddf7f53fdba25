//! Multi-level patch discriminator: a frozen strided convolutional backbone
//! with trainable `1 × 1` heads on every stage and on the pooled output.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::ConvGeom;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

use super::generator::IMAGE_CHANNELS;
use super::params::{normal, BindMode, Bound, ParamStore};

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32],
            kernel: 5,
            head_hidden: 16,
            seed: 0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::invalid("discriminator needs at least one non-empty stage"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("discriminator kernel must be odd and head_hidden positive"));
        }
        Ok(())
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.kernel, 2, self.kernel / 2)
    }
}

/// Logit maps, one per stage plus one from global pooling, each `H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    pub logit_maps: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let stream = |name: &str| rng::stream(&[cfg.seed, tag::INIT, rng::hash_str(name)]);
        let k2 = cfg.kernel * cfg.kernel;
        let mut c_in = IMAGE_CHANNELS;
        let head = |p: &mut ParamStore, prefix: &str, c: usize| {
            let h = cfg.head_hidden;
            let w0 = format!("{prefix}.0.weight");
            let w1 = format!("{prefix}.1.weight");
            p.insert(w0.clone(), normal(&[h, c], (2.0 / c as f64).sqrt(), &mut stream(&w0)), true);
            p.insert(format!("{prefix}.0.bias"), Tensor::zeros([h]), true);
            p.insert(w1.clone(), normal(&[1, h], (1.0 / h as f64).sqrt(), &mut stream(&w1)), true);
            p.insert(format!("{prefix}.1.bias"), Tensor::zeros([1]), true);
        };
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            let name = format!("backbone.{s}.weight");
            let fan_in = k2 * c_in;
            p.insert(name.clone(), normal(&[c, fan_in], (2.0 / fan_in as f64).sqrt(), &mut stream(&name)), false);
            head(&mut p, &format!("heads.{s}"), c);
            c_in = c;
        }
        head(&mut p, "heads.pool", c_in);
        Ok(Self { cfg, params: p })
    }

    pub fn n_maps(&self) -> usize {
        self.cfg.stage_channels.len() + 1
    }

    /// Inference-only forward pass.
    pub fn logits(&self, x: &Image) -> Result<DiscriminatorOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, BindMode::Frozen);
        let xv = g.constant(x.tensor().clone());
        let maps = discriminator_forward(&mut g, self, &p, xv)?;
        Ok(DiscriminatorOutput {
            logit_maps: maps
                .into_iter()
                .map(|m| {
                    let s = g.shape(m);
                    g.value(m).clone().reshape([s[0], s[1]]).expect("single channel")
                })
                .collect(),
        })
    }
}

fn head(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let one = ConvGeom::new(1, 1, 0);
    let h = g.conv2d(x, p.get(&format!("{prefix}.0.weight")), Some(p.get(&format!("{prefix}.0.bias"))), one)?;
    let h = g.leaky_relu(h, LEAK);
    g.conv2d(h, p.get(&format!("{prefix}.1.weight")), Some(p.get(&format!("{prefix}.1.bias"))), one)
}

/// Logit maps as `H × W × 1` nodes: stages first, pooled map last.
pub fn discriminator_forward(g: &mut Graph, d: &Discriminator, p: &Bound, x: Var) -> Result<Vec<Var>> {
    let (_, _, c) = g.value(x).dims3()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::shape("discriminator input", &[0, 0, IMAGE_CHANNELS], g.shape(x)));
    }
    let mut h = g.affine(x, 2.0, -1.0);
    let mut maps = Vec::with_capacity(d.n_maps());
    for s in 0..d.cfg.stage_channels.len() {
        let conv = g.conv2d(h, p.get(&format!("backbone.{s}.weight")), None, d.cfg.geom())?;
        h = g.leaky_relu(conv, LEAK);
        maps.push(head(g, p, &format!("heads.{s}"), h)?);
    }
    let pooled = g.global_avg_pool(h)?;
    maps.push(head(g, p, "heads.pool", pooled)?);
    Ok(maps)
}
