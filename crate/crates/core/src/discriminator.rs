//! Patch-tokenizing transformer critic.
//!
//! The image is cut into an 8×8 grid of patches, each flattened and linearly
//! embedded. A learnable `[cls]` token is prepended, a positional table added,
//! and unmasked encoder blocks run over the 65 tokens. The final `[cls]`
//! embedding is projected to one raw score.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    encoder_block, join, positional_embedding_add, trunc_normal, AttentionRoute, EncoderBlockParams, Linear,
    Module, INIT_STD,
};
use crate::tensor::{Scalar, Tensor};

pub const PATCH_GRID: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub patch_grid: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub head_count: usize,
    pub mlp_ratio: usize,
    pub input_resolution: usize,
}

impl DiscriminatorConfig {
    /// The full-scale critic: 384-dim, 7 blocks, 4 heads.
    pub fn standard(input_resolution: usize) -> Result<Self> {
        let cfg = DiscriminatorConfig {
            patch_grid: PATCH_GRID,
            embed_dim: 384,
            depth: 7,
            head_count: 4,
            mlp_ratio: 4,
            input_resolution,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The critic paired with the `tiny` generator preset.
    pub fn tiny(input_resolution: usize) -> Result<Self> {
        let cfg = DiscriminatorConfig {
            patch_grid: PATCH_GRID,
            embed_dim: 32,
            depth: 2,
            head_count: 1,
            mlp_ratio: 4,
            input_resolution,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn for_preset(preset: &str, input_resolution: usize) -> Result<Self> {
        if preset == "tiny" {
            Self::tiny(input_resolution)
        } else {
            Self::standard(input_resolution)
        }
    }

    pub fn patch_size(&self) -> usize {
        self.input_resolution / self.patch_grid
    }

    pub fn seq_len(&self) -> usize {
        self.patch_grid * self.patch_grid + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size() * self.patch_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::ConfigKey { key: key.into(), msg });
        if self.patch_grid == 0 || self.input_resolution == 0 || !self.input_resolution.is_multiple_of(self.patch_grid) {
            return bad(
                "resolution",
                format!("{} not divisible by patch grid {}", self.input_resolution, self.patch_grid),
            );
        }
        if self.depth == 0 {
            return bad("d_depth", "must be positive".into());
        }
        if self.head_count == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.head_count) {
            return bad("d_dim", format!("{} not divisible by {} heads", self.embed_dim, self.head_count));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        self.patch_dim() * d + d + d + self.seq_len() * d
            + self.depth * EncoderBlockParams::<f32>::count(d, self.mlp_ratio)
            + d
            + 1
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorParams<T: Scalar> {
    pub config: DiscriminatorConfig,
    pub patch_embed: Linear<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<EncoderBlockParams<T>>,
    pub head: Linear<T>,
}

/// Gather offsets turning one `[H, W, 3]` image into `[G², 3p²]` patch rows.
pub fn patchify_index(resolution: usize, grid: usize) -> Result<Vec<usize>> {
    if grid == 0 || !resolution.is_multiple_of(grid) {
        return Err(Error::invalid("patchify", format!("resolution {resolution} not divisible by {grid}")));
    }
    let p = resolution / grid;
    let mut index = Vec::with_capacity(resolution * resolution * 3);
    for i in 0..grid {
        for j in 0..grid {
            for r in 0..p {
                for c in 0..p {
                    let pixel = (i * p + r) * resolution + j * p + c;
                    index.extend((0..3).map(|ch| pixel * 3 + ch));
                }
            }
        }
    }
    Ok(index)
}

fn batched_index(one: &[usize], batch: usize) -> Rc<Vec<usize>> {
    let per = one.len();
    Rc::new((0..batch).flat_map(|b| one.iter().map(move |&i| i + b * per)).collect())
}

fn image_batch_dims<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w, 3] if h == w => Ok((1, *h)),
        [b, h, w, 3] if h == w => Ok((*b, *h)),
        s => Err(Error::invalid("image", format!("expected [B, H, H, 3], got {s:?}"))),
    }
}

/// `[B, H, W, 3] -> [B, G², 3p²]` with patches in row-major grid order and
/// each patch flattened as (row, col, channel).
pub fn patchify<T: Scalar>(img: &Tensor<T>, grid: usize) -> Result<Tensor<T>> {
    let (b, res) = image_batch_dims(img)?;
    let one = patchify_index(res, grid)?;
    let p = res / grid;
    img.gather(batched_index(&one, b), &[b, grid * grid, 3 * p * p])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, grid: usize) -> Result<Tensor<T>> {
    let [b, n, len] = patches.shape() else {
        return Err(Error::invalid("unpatchify", format!("expected [B, N, 3p²], got {:?}", patches.shape())));
    };
    let p = ((len / 3) as f64).sqrt().round() as usize;
    if *n != grid * grid || 3 * p * p != *len {
        return Err(Error::invalid("unpatchify", format!("bad patch tensor {:?}", patches.shape())));
    }
    let res = grid * p;
    let one = patchify_index(res, grid)?;
    patches.scatter_add(batched_index(&one, *b), &[*b, res, res, 3])
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn new<R: Rng + ?Sized>(config: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(DiscriminatorParams {
            config: config.clone(),
            patch_embed: Linear::new(rng, config.patch_dim(), d)?,
            cls: trunc_normal(rng, &[d], INIT_STD)?,
            pos: trunc_normal(rng, &[config.seq_len(), d], INIT_STD)?,
            blocks: (0..config.depth)
                .map(|_| EncoderBlockParams::new(rng, d, config.head_count, config.mlp_ratio))
                .collect::<Result<_>>()?,
            head: Linear::new(rng, d, 1)?,
        })
    }

    /// Token sequence `[B, 65, D]` after each stage, for shape inspection.
    pub fn trace(&self, img: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::new();
        self.forward(img, &mut |t| shapes.push(t.shape().to_vec()))?;
        Ok(shapes)
    }

    /// Raw critic scores `[B]` for images `[B, H, W, 3]`.
    pub fn discriminate(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(img, &mut |_| {})
    }

    fn forward(&self, img: &Tensor<T>, observe: &mut dyn FnMut(&Tensor<T>)) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let (b, res) = image_batch_dims(img)?;
        if res != cfg.input_resolution {
            return Err(Error::shape("discriminate", img.shape(), &[cfg.input_resolution, cfg.input_resolution, 3]));
        }
        let (n, d) = (cfg.patch_grid * cfg.patch_grid, cfg.embed_dim);
        let patches = patchify(img, cfg.patch_grid)?;
        let emb = self.patch_embed.forward(&patches.reshape(&[b * n, cfg.patch_dim()])?)?.reshape(&[b, n, d])?;
        let cls = self.cls.reshape(&[1, 1, d])?.broadcast_to(&[b, 1, d])?;
        let mut x = positional_embedding_add(&Tensor::concat(&[&cls, &emb], 1)?, &self.pos)?;
        observe(&x);
        for block in &self.blocks {
            x = encoder_block(&x, block, None, AttentionRoute::Composed)?;
            observe(&x);
        }
        let cls_out = x.slice_axis(1, 0, 1)?.reshape(&[b, d])?;
        observe(&cls_out);
        let score = self.head.forward(&cls_out)?;
        observe(&score);
        score.reshape(&[b])
    }
}

impl<T: Scalar> Module<T> for DiscriminatorParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls"), &self.cls);
        f(&join(prefix, "pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls"), &mut self.cls);
        f(&join(prefix, "pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
