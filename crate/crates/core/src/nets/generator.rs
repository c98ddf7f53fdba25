//! Patchified transformer generator with joint attention over semantic
//! tokens, and the semantic condition encoder that feeds it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::ConvGeom;
use crate::degrade::upsample_to;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

use super::codec::{depth_to_space_var, space_to_depth_var, LatentCodec};
use super::lora::lora_linear;
use super::params::{normal, Bound, ParamStore};

pub const IMAGE_CHANNELS: usize = 3;
const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 2;
const SEMANTIC_CHANNELS: [usize; 2] = [8, 16];
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_semantic_tokens: usize,
    pub lora_rank: usize,
    pub codec_factor: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            token_dim: 128,
            n_blocks: 4,
            n_heads: 4,
            n_semantic_tokens: 4,
            lora_rank: 4,
            codec_factor: 2,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("generator: {m}")));
        if self.patch_size == 0 || self.codec_factor == 0 {
            return bad("patch_size and codec_factor must be positive");
        }
        if self.token_dim == 0 || self.token_dim % 2 != 0 {
            return bad("token_dim must be positive and even");
        }
        if self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
            return bad("n_heads must divide token_dim");
        }
        if self.n_semantic_tokens == 0 {
            return bad("n_semantic_tokens must be positive");
        }
        Ok(())
    }

    /// Width of one latent token: `C·f²·p²`.
    pub fn token_in_dim(&self) -> usize {
        IMAGE_CHANNELS * self.codec_factor.pow(2) * self.patch_size.pow(2)
    }

    /// Pixel period of per-token structure, `p·f`.
    pub fn artifact_period(&self) -> usize {
        self.patch_size * self.codec_factor
    }

    pub fn codec(&self) -> LatentCodec {
        LatentCodec { f: self.codec_factor }
    }

    /// The block-linear layers that carry adapters.
    fn adapted_layers(&self) -> Vec<(String, usize, usize)> {
        let d = self.token_dim;
        let mut out = Vec::new();
        for i in 0..self.n_blocks {
            for n in ["q", "k", "v", "o"] {
                out.push((format!("blocks.{i}.attn.{n}"), d, d));
            }
            out.push((format!("blocks.{i}.mlp.fc1"), MLP_RATIO * d, d));
            out.push((format!("blocks.{i}.mlp.fc2"), d, MLP_RATIO * d));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: ParamStore,
}

fn init_stream(seed: u64, name: &str) -> rng::Rng {
    rng::stream(&[seed, tag::INIT, rng::hash_str(name)])
}

impl Generator {
    /// Seeded initialization. Base weights are frozen; input/output
    /// projections, the semantic adapter and LoRA factors are trainable.
    /// The output projection starts at zero.
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, din, s) = (cfg.token_dim, cfg.token_in_dim(), cfg.seed);
        let mut p = ParamStore::new();
        let add = |p: &mut ParamStore, name: &str, shape: &[usize], std: f64, trainable: bool| {
            let t = if std == 0.0 {
                Tensor::zeros(shape.to_vec())
            } else {
                normal(shape, std, &mut init_stream(s, name))
            };
            p.insert(name, t, trainable);
        };
        add(&mut p, "in_proj.weight", &[d, din], 1.0 / (din as f64).sqrt(), true);
        add(&mut p, "in_proj.bias", &[d], 0.0, true);
        add(&mut p, "out_proj.weight", &[din, d], 0.0, true);
        add(&mut p, "out_proj.bias", &[din], 0.0, true);
        for (name, d_out, d_in) in cfg.adapted_layers() {
            add(&mut p, &format!("{name}.weight"), &[d_out, d_in], 1.0 / (d_in as f64).sqrt(), false);
            if cfg.lora_rank > 0 {
                let a = format!("{name}.lora_a");
                add(&mut p, &a, &[cfg.lora_rank, d_in], 1.0 / (d_in as f64).sqrt(), true);
                add(&mut p, &format!("{name}.lora_b"), &[d_out, cfg.lora_rank], 0.0, true);
            }
        }
        let mut c_in = IMAGE_CHANNELS;
        for (i, &c) in SEMANTIC_CHANNELS.iter().enumerate() {
            let fan_in = 9 * c_in;
            add(&mut p, &format!("semantic.conv{i}.weight"), &[c, fan_in], (2.0 / fan_in as f64).sqrt(), false);
            c_in = c;
        }
        add(&mut p, "adapter.0.weight", &[d, c_in], 1.0 / (c_in as f64).sqrt(), true);
        add(&mut p, "adapter.0.bias", &[d], 0.0, true);
        add(&mut p, "adapter.1.weight", &[d, d], 1.0 / (d as f64).sqrt(), true);
        add(&mut p, "adapter.1.bias", &[d], 0.0, true);
        Ok(Self { cfg, params: p })
    }

    fn adapted(&self, g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}.weight"));
        let adapter = match (p.try_get(&format!("{name}.lora_a")), p.try_get(&format!("{name}.lora_b"))) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        lora_linear(g, x, w, adapter, None)
    }
}

/// Sinusoidal embedding of a scalar position into `d` channels.
fn sinusoid(pos: f64, d: usize, out: &mut [f64]) {
    let half = d / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
}

/// Token position plus timestep embedding, `L × d`.
fn embeddings(l: usize, d: usize, t: f64) -> Tensor {
    let mut time = vec![0.0; d];
    sinusoid(1000.0 * t, d, &mut time);
    let mut out = vec![0.0; l * d];
    for (i, row) in out.chunks_mut(d).enumerate() {
        sinusoid(i as f64, d, row);
        for (o, tv) in row.iter_mut().zip(&time) {
            *o += tv;
        }
    }
    Tensor::new([l, d], out).expect("sized")
}

/// Predicts the displacement for every latent token. Semantic tokens join
/// the sequence for attention and are dropped at the output.
pub fn generator_forward(g: &mut Graph, gen: &Generator, p: &Bound, z_tokens: Var, semantic_tokens: Var, t: f64) -> Result<Var> {
    let cfg = &gen.cfg;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    let (l, din) = g.value(z_tokens).dims2()?;
    if din != cfg.token_in_dim() {
        return Err(Error::shape("generator tokens", &[l, cfg.token_in_dim()], g.shape(z_tokens)));
    }
    g.value(semantic_tokens)
        .expect_shape(&[cfg.n_semantic_tokens, cfg.token_dim], "semantic tokens")?;

    let d = cfg.token_dim;
    let h = g.linear(z_tokens, p.get("in_proj.weight"), Some(p.get("in_proj.bias")))?;
    let emb = g.constant(embeddings(l, d, t));
    let h = g.add(h, emb)?;
    let mut x = g.concat_rows(h, semantic_tokens)?;
    for i in 0..cfg.n_blocks {
        let y = g.layer_norm(x, LN_EPS)?;
        let q = gen.adapted(g, p, &format!("blocks.{i}.attn.q"), y)?;
        let k = gen.adapted(g, p, &format!("blocks.{i}.attn.k"), y)?;
        let v = gen.adapted(g, p, &format!("blocks.{i}.attn.v"), y)?;
        let a = g.attention(q, k, v, cfg.n_heads)?;
        let o = gen.adapted(g, p, &format!("blocks.{i}.attn.o"), a)?;
        x = g.add(x, o)?;
        let y = g.layer_norm(x, LN_EPS)?;
        let m = gen.adapted(g, p, &format!("blocks.{i}.mlp.fc1"), y)?;
        let m = g.gelu(m);
        let m = gen.adapted(g, p, &format!("blocks.{i}.mlp.fc2"), m)?;
        x = g.add(x, m)?;
    }
    let x = g.slice_rows(x, 0, l)?;
    let y = g.layer_norm(x, LN_EPS)?;
    g.linear(y, p.get("out_proj.weight"), Some(p.get("out_proj.bias")))
}

/// Row `r` of the pooling matrix averages the `r`-th contiguous raster chunk.
fn pooling_matrix(n: usize, positions: usize) -> Tensor {
    let mut m = vec![0.0; n * positions];
    let mut counts = vec![0usize; n];
    for j in 0..positions {
        counts[j * n / positions] += 1;
    }
    for j in 0..positions {
        let r = j * n / positions;
        m[r * positions + j] = 1.0 / counts[r] as f64;
    }
    Tensor::new([n, positions], m).expect("sized")
}

/// Strided frozen convolutions pooled into `n_semantic_tokens` features,
/// then the trainable adapter MLP. Returns `n_semantic_tokens × token_dim`.
pub fn semantic_encode(g: &mut Graph, gen: &Generator, p: &Bound, x_lr: Var) -> Result<Var> {
    let n = gen.cfg.n_semantic_tokens;
    let geom = ConvGeom::new(3, 2, 1);
    let mut h = x_lr;
    for i in 0..SEMANTIC_CHANNELS.len() {
        let c = g.conv2d(h, p.get(&format!("semantic.conv{i}.weight")), None, geom)?;
        h = g.leaky_relu(c, LEAK);
    }
    let (hh, ww, c) = g.value(h).dims3()?;
    if hh * ww < n {
        return Err(Error::invalid(format!(
            "LR input too small for {n} semantic tokens ({hh}×{ww} feature grid)"
        )));
    }
    let flat = g.reshape(h, &[hh * ww, c])?;
    let pool = g.constant(pooling_matrix(n, hh * ww));
    let raw = g.matmul(pool, flat)?;
    let a = g.linear(raw, p.get("adapter.0.weight"), Some(p.get("adapter.0.bias")))?;
    let a = g.gelu(a);
    g.linear(a, p.get("adapter.1.weight"), Some(p.get("adapter.1.bias")))
}

/// Graph nodes of one restoration pass.
pub struct Restoration {
    /// Latent tokens of the upsampled LR input, `z_{t1}`.
    pub z_tokens: Var,
    /// Generator output `G(z_{t1}, t1, c)`.
    pub displacement: Var,
    /// Decoded prediction, `H × W × C`, not clamped.
    pub x_pred: Var,
}

/// Upsample, encode, patchify, predict in one step, unpatchify, decode.
pub fn restore(g: &mut Graph, gen: &Generator, p: &Bound, x_lr: &Image, hr_h: usize, hr_w: usize, t1: f64) -> Result<Restoration> {
    let (f, ps) = (gen.cfg.codec_factor, gen.cfg.patch_size);
    let block = f * ps;
    if hr_h % block != 0 || hr_w % block != 0 {
        return Err(Error::invalid(format!("HR size {hr_h}×{hr_w} not divisible by p·f = {block}")));
    }
    let up = upsample_to(x_lr, hr_h, hr_w);
    let up = g.constant(up.into_tensor());
    let z = space_to_depth_var(g, up, f)?;
    let grid = space_to_depth_var(g, z, ps)?;
    let (gh, gw, din) = g.value(grid).dims3()?;
    let z_tokens = g.reshape(grid, &[gh * gw, din])?;
    let lr = g.constant(x_lr.tensor().clone());
    let sem = semantic_encode(g, gen, p, lr)?;
    let displacement = generator_forward(g, gen, p, z_tokens, sem, t1)?;
    let z0_tokens = g.sub(z_tokens, displacement)?;
    let z0_grid = g.reshape(z0_tokens, &[gh, gw, din])?;
    let z0 = depth_to_space_var(g, z0_grid, ps)?;
    let x_pred = depth_to_space_var(g, z0, f)?;
    Ok(Restoration {
        z_tokens,
        displacement,
        x_pred,
    })
}

/// Inference-only restoration, clamped to `[0, 1]`.
pub fn restore_image(gen: &Generator, x_lr: &Image, hr_h: usize, hr_w: usize, t1: f64) -> Result<Image> {
    let mut g = Graph::new();
    let p = gen.params.bind(&mut g, super::params::BindMode::Frozen);
    let r = restore(&mut g, gen, &p, x_lr, hr_h, hr_w, t1)?;
    Ok(Image::new_unchecked_range(g.value(r.x_pred).clone())?.clamped())
}
