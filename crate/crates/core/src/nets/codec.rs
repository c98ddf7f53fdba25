//! Lossless space-to-depth latent codec and token patchification.
//!
//! Both are the same rearrangement: a `b × b` block of an `H × W × C` array
//! becomes one cell of `b²·C` channels ordered `(dy, dx, c)`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentCodec {
    pub f: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self { f: 2 }
    }
}

/// `h × w × c` latent array tagged with the codec factor that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub data: Tensor,
    pub f: usize,
}

/// Source index in the `h × w × c` input for every output element of a
/// block-`b` space-to-depth.
fn s2d_index(h: usize, w: usize, c: usize, b: usize) -> Vec<usize> {
    let (ho, wo, co) = (h / b, w / b, c * b * b);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..ho {
        for x in 0..wo {
            for k in 0..co {
                let (dy, dx, ch) = (k / (b * c), (k / c) % b, k % c);
                idx.push(((y * b + dy) * w + x * b + dx) * c + ch);
            }
        }
    }
    idx
}

fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (o, &i) in idx.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

fn check_s2d(h: usize, w: usize, b: usize, what: &str) -> Result<()> {
    if b == 0 || h % b != 0 || w % b != 0 {
        return Err(Error::invalid(format!("{what}: block {b} does not divide {h}×{w}")));
    }
    Ok(())
}

fn gather_tensor(t: &Tensor, idx: &[usize], shape: Vec<usize>) -> Tensor {
    let d = t.data();
    Tensor::new(shape, idx.iter().map(|&i| d[i]).collect()).expect("index length matches shape")
}

fn space_to_depth(t: &Tensor, b: usize, what: &str) -> Result<Tensor> {
    let (h, w, c) = t.dims3()?;
    check_s2d(h, w, b, what)?;
    Ok(gather_tensor(t, &s2d_index(h, w, c, b), vec![h / b, w / b, c * b * b]))
}

fn depth_to_space(t: &Tensor, b: usize, what: &str) -> Result<Tensor> {
    let (h, w, cb) = t.dims3()?;
    if b == 0 || cb % (b * b) != 0 {
        return Err(Error::invalid(format!("{what}: {cb} channels not divisible by {b}²")));
    }
    let c = cb / (b * b);
    let idx = invert(&s2d_index(h * b, w * b, c, b));
    Ok(gather_tensor(t, &idx, vec![h * b, w * b, c]))
}

pub fn encode_latent(x: &Image, codec: &LatentCodec) -> Result<LatentGrid> {
    Ok(LatentGrid {
        data: space_to_depth(x.tensor(), codec.f, "encode_latent")?,
        f: codec.f,
    })
}

pub fn decode_latent(z: &LatentGrid, codec: &LatentCodec) -> Result<Image> {
    if z.f != codec.f {
        return Err(Error::invalid(format!(
            "latent was encoded with f={}, codec has f={}",
            z.f, codec.f
        )));
    }
    Image::new_unchecked_range(depth_to_space(&z.data, codec.f, "decode_latent")?)
}

/// `(h/p)·(w/p)` tokens of width `c·p²` in raster order.
pub fn patchify(z: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = z.dims3()?;
    space_to_depth(z, p, "patchify")?.reshape([(h / p) * (w / p), c * p * p])
}

/// Inverse of [`patchify`] for a grid of `grid_h × grid_w` tokens.
pub fn unpatchify(tokens: &Tensor, p: usize, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    let (l, d) = tokens.dims2()?;
    if l != grid_h * grid_w {
        return Err(Error::shape("unpatchify", &[grid_h * grid_w, d], tokens.shape()));
    }
    depth_to_space(&tokens.clone().reshape([grid_h, grid_w, d])?, p, "unpatchify")
}

/// Differentiable space-to-depth of an `H × W × C` node.
pub fn space_to_depth_var(g: &mut Graph, x: Var, b: usize) -> Result<Var> {
    let (h, w, c) = g.value(x).dims3()?;
    check_s2d(h, w, b, "space_to_depth")?;
    g.gather(x, Rc::new(s2d_index(h, w, c, b)), &[h / b, w / b, c * b * b])
}

/// Differentiable depth-to-space of an `h × w × (b²·C)` node.
pub fn depth_to_space_var(g: &mut Graph, z: Var, b: usize) -> Result<Var> {
    let (h, w, cb) = g.value(z).dims3()?;
    if b == 0 || cb % (b * b) != 0 {
        return Err(Error::invalid(format!("depth_to_space: {cb} channels not divisible by {b}²")));
    }
    let c = cb / (b * b);
    let idx = invert(&s2d_index(h * b, w * b, c, b));
    g.gather(z, Rc::new(idx), &[h * b, w * b, c])
}
