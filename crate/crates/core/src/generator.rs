//! Multi-stage transformer generator.
//!
//! Noise is lifted by a linear layer to an `H×W` grid of `C`-dim tokens. Each
//! stage runs encoder blocks, then pixel-shuffles to a grid twice as wide with
//! a quarter of the channels. A final linear head maps to RGB and `tanh`
//! squashes to `[-1, 1]`. Images are laid out `[B, H, W, 3]`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    encoder_block, join, pixelshuffle_upsample, positional_embedding_add, trunc_normal,
    AttentionMask, AttentionRoute, EncoderBlockParams, Linear, Module, TokenGrid, Window, INIT_STD,
};
use crate::tensor::{Scalar, Tensor};

/// Image geometry variant: selects initial grid, stage count and resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Geometry {
    /// 8×8 start, three stages, 32×32 output.
    #[default]
    Cifar,
    /// 12×12 start, three stages, 48×48 output.
    Stl,
    /// 8×8 start, four stages {5,3,3,2}, 64×64 output.
    Celeba,
}

impl Geometry {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cifar" | "synth" => Some(Geometry::Cifar),
            "stl" => Some(Geometry::Stl),
            "celeba" => Some(Geometry::Celeba),
            _ => None,
        }
    }

    pub fn resolution(self) -> usize {
        match self {
            Geometry::Cifar => 32,
            Geometry::Stl => 48,
            Geometry::Celeba => 64,
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Geometry::Cifar => "cifar",
            Geometry::Stl => "stl",
            Geometry::Celeba => "celeba",
        })
    }
}

/// Named model sizes.
pub const PRESETS: [&str; 5] = ["tiny", "transgan-s", "transgan-m", "transgan-l", "transgan-xl"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Tokens per side of the first stage grid.
    pub initial_grid: usize,
    /// Embedding dim of the first stage.
    pub dim: usize,
    pub depths: Vec<usize>,
    pub latent_dim: usize,
    pub mlp_ratio: usize,
    /// Requested head count; a stage whose width it does not divide uses
    /// `gcd(head_count, width)` heads instead.
    pub head_count: usize,
}

impl GeneratorConfig {
    pub fn preset(name: &str, geometry: Geometry) -> Result<Self> {
        let (dim, mut depths) = match name {
            "tiny" => (64, vec![2, 1, 1]),
            "transgan-s" => (384, vec![5, 2, 2]),
            "transgan-m" => (512, vec![5, 2, 2]),
            "transgan-l" => (768, vec![5, 2, 2]),
            "transgan-xl" => (1024, vec![5, 4, 2]),
            other => return Err(Error::ConfigKey { key: "preset".into(), msg: format!("unknown preset `{other}`") }),
        };
        let initial_grid = match geometry {
            Geometry::Stl => 12,
            _ => 8,
        };
        if geometry == Geometry::Celeba {
            depths = vec![5, 3, 3, 2];
        }
        // One head keeps the 1024-token last stage of `tiny` (width 4) affordable on a CPU.
        let head_count = if name == "tiny" { 1 } else { 4 };
        let cfg = GeneratorConfig { initial_grid, dim, depths, latent_dim: dim, mlp_ratio: 4, head_count };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn target_resolution(&self) -> usize {
        self.initial_grid << (self.stages().saturating_sub(1))
    }

    /// Grid side, token count and width of stage `s`.
    pub fn stage_shape(&self, s: usize) -> (usize, usize, usize) {
        let side = self.initial_grid << s;
        (side, side * side, self.dim >> (2 * s))
    }

    pub fn stage_heads(&self, s: usize) -> usize {
        gcd(self.head_count, self.stage_shape(s).2)
    }

    pub fn output_dim(&self) -> usize {
        self.stage_shape(self.stages() - 1).2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::ConfigKey { key: key.into(), msg });
        if self.initial_grid == 0 {
            return bad("initial_grid", "must be positive".into());
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad("depths", format!("need at least one stage with positive depth, got {:?}", self.depths));
        }
        if self.stages() > 8 {
            return bad("depths", "at most 8 stages".into());
        }
        let shrink = 1usize << (2 * (self.stages() - 1));
        if self.dim == 0 || !self.dim.is_multiple_of(shrink) {
            return bad("dim", format!("{} not divisible by 4^{} = {shrink}", self.dim, self.stages() - 1));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        if self.head_count == 0 {
            return bad("head_count", "must be positive".into());
        }
        Ok(())
    }

    /// `(name, scalar count)` for every trainable tensor, in parameter order.
    pub fn parameter_ledger(&self) -> Vec<(String, usize)> {
        let (h, c) = (self.initial_grid, self.dim);
        let mut out = vec![
            ("input.weight".to_string(), self.latent_dim * h * h * c),
            ("input.bias".to_string(), h * h * c),
            ("sr_embed.weight".to_string(), 3 * c),
            ("sr_embed.bias".to_string(), c),
        ];
        for s in 0..self.stages() {
            let (_, n, d) = self.stage_shape(s);
            out.push((format!("stage{s}.pos"), n * d));
            for b in 0..self.depths[s] {
                let p = format!("stage{s}.block{b}");
                let hid = d * self.mlp_ratio;
                for (name, count) in [
                    ("ln1.gamma", d),
                    ("ln1.beta", d),
                    ("wq.weight", d * d),
                    ("wq.bias", d),
                    ("wk.weight", d * d),
                    ("wk.bias", d),
                    ("wv.weight", d * d),
                    ("wv.bias", d),
                    ("wo.weight", d * d),
                    ("wo.bias", d),
                    ("ln2.gamma", d),
                    ("ln2.beta", d),
                    ("fc1.weight", d * hid),
                    ("fc1.bias", hid),
                    ("fc2.weight", hid * d),
                    ("fc2.bias", d),
                ] {
                    out.push((format!("{p}.{name}"), count));
                }
            }
        }
        let d = self.output_dim();
        out.push(("head.weight".into(), d * 3));
        out.push(("head.bias".into(), 3));
        out
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.parameter_ledger().iter().map(|(_, n)| n).sum()
    }
}

pub(crate) fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorStage<T: Scalar> {
    pub pos: Tensor<T>,
    pub blocks: Vec<EncoderBlockParams<T>>,
}

#[derive(Clone, Debug)]
pub struct GeneratorParams<T: Scalar> {
    pub config: GeneratorConfig,
    /// Noise → `H·W·C`.
    pub input: Linear<T>,
    /// Per-pixel embedding of a low-resolution image, `3 → C`.
    pub sr_embed: Linear<T>,
    pub stages: Vec<GeneratorStage<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn new<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, c) = (config.initial_grid, config.dim);
        let input = Linear::new(rng, config.latent_dim, h * h * c)?;
        let sr_embed = Linear::new(rng, 3, c)?;
        let mut stages = Vec::with_capacity(config.stages());
        for (s, &depth) in config.depths.iter().enumerate() {
            let (_, n, d) = config.stage_shape(s);
            let pos = trunc_normal(rng, &[n, d], INIT_STD)?;
            let blocks = (0..depth)
                .map(|_| EncoderBlockParams::new(rng, d, config.stage_heads(s), config.mlp_ratio))
                .collect::<Result<_>>()?;
            stages.push(GeneratorStage { pos, blocks });
        }
        let head = Linear::new(rng, config.output_dim(), 3)?;
        Ok(GeneratorParams { config: config.clone(), input, sr_embed, stages, head })
    }

    /// Maps `z: [B, latent]` (or `[latent]`) to images `[B, H_T, W_T, 3]`.
    pub fn generate(&self, z: &Tensor<T>, window: Window, route: AttentionRoute) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let z = match z.shape() {
            [l] if *l == cfg.latent_dim => z.reshape(&[1, *l])?,
            [_, l] if *l == cfg.latent_dim => z.clone(),
            s => return Err(Error::shape("generate", s, &[cfg.latent_dim])),
        };
        let b = z.shape()[0];
        let (_, n, c) = cfg.stage_shape(0);
        let tokens = self.input.forward(&z)?.reshape(&[b, n, c])?;
        self.run_stages(tokens, window, route, &mut |_| {})
    }

    /// Shapes of the token sequence after each stage, then of the image.
    pub fn trace(&self, z: &Tensor<T>, window: Window) -> Result<Vec<Vec<usize>>> {
        let cfg = &self.config;
        let b = z.shape()[0];
        let (_, n, c) = cfg.stage_shape(0);
        let tokens = self.input.forward(z)?.reshape(&[b, n, c])?;
        let mut shapes = Vec::new();
        let img = self.run_stages(tokens, window, AttentionRoute::Fused, &mut |t| shapes.push(t.shape().to_vec()))?;
        shapes.push(img.shape().to_vec());
        Ok(shapes)
    }

    /// Runs the stages on a low-resolution image `[B, H, W, 3]` embedded per pixel.
    pub fn super_resolve(&self, lr: &Tensor<T>, window: Window, route: AttentionRoute) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let h = cfg.initial_grid;
        let lr = match lr.shape() {
            [hh, ww, 3] if *hh == h && *ww == h => lr.reshape(&[1, h, h, 3])?,
            [_, hh, ww, 3] if *hh == h && *ww == h => lr.clone(),
            s => return Err(Error::shape("super_resolve", s, &[h, h, 3])),
        };
        let b = lr.shape()[0];
        let tokens = self.sr_embed.forward(&lr.reshape(&[b * h * h, 3])?)?.reshape(&[b, h * h, cfg.dim])?;
        self.run_stages(tokens, window, route, &mut |_| {})
    }

    fn run_stages(
        &self,
        tokens: Tensor<T>,
        window: Window,
        route: AttentionRoute,
        hook: &mut dyn FnMut(&Tensor<T>),
    ) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let b = tokens.shape()[0];
        let mut grid = TokenGrid::new(tokens, 0)?;
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                grid = pixelshuffle_upsample(&grid)?;
            }
            let (side, n, d) = cfg.stage_shape(s);
            debug_assert_eq!((grid.side, grid.len(), grid.dim()), (side, n, d));
            let mask = AttentionMask::new(window, side)?;
            let mask = (!mask.is_global()).then_some(mask);
            let mut x = positional_embedding_add(&grid.tokens, &stage.pos)?;
            for block in &stage.blocks {
                x = encoder_block(&x, block, mask.as_ref(), route)?;
            }
            hook(&x);
            grid.tokens = x;
        }
        let res = cfg.target_resolution();
        let rgb = self.head.forward(&grid.tokens.reshape(&[b * res * res, grid.dim()])?)?;
        rgb.tanh().reshape(&[b, res, res, 3])
    }
}

impl<T: Scalar> Module<T> for GeneratorParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.input.visit(&join(prefix, "input"), f);
        self.sr_embed.visit(&join(prefix, "sr_embed"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{s}"));
            f(&join(&p, "pos"), &stage.pos);
            for (i, b) in stage.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("block{i}")), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        self.sr_embed.visit_mut(&join(prefix, "sr_embed"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{s}"));
            f(&join(&p, "pos"), &mut stage.pos);
            for (i, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("block{i}")), f);
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini(dim: usize, depths: Vec<usize>) -> GeneratorConfig {
        GeneratorConfig { initial_grid: 2, dim, depths, latent_dim: dim, mlp_ratio: 4, head_count: 4 }
    }

    #[test]
    fn presets_follow_scaling_table() {
        let s = GeneratorConfig::preset("transgan-s", Geometry::Cifar).unwrap();
        assert_eq!((s.dim, s.depths.clone()), (384, vec![5, 2, 2]));
        let xl = GeneratorConfig::preset("transgan-xl", Geometry::Cifar).unwrap();
        assert_eq!((xl.dim, xl.depths.clone(), xl.latent_dim), (1024, vec![5, 4, 2], 1024));
        let trace: Vec<_> = (0..3).map(|s| xl.stage_shape(s)).collect();
        assert_eq!(trace, vec![(8, 64, 1024), (16, 256, 256), (32, 1024, 64)]);
        assert_eq!(xl.target_resolution(), 32);
        let stl = GeneratorConfig::preset("transgan-xl", Geometry::Stl).unwrap();
        assert_eq!((stl.stage_shape(0).1, stl.target_resolution()), (144, 48));
        let celeba = GeneratorConfig::preset("transgan-s", Geometry::Celeba).unwrap();
        assert_eq!((celeba.depths.clone(), celeba.target_resolution()), (vec![5, 3, 3, 2], 64));
        assert_eq!(celeba.stage_heads(3), 2);
        assert!(GeneratorConfig::preset("transgan-q", Geometry::Cifar).is_err());
    }

    #[test]
    fn counts_increase_with_size() {
        let counts: Vec<usize> = ["transgan-s", "transgan-m", "transgan-l", "transgan-xl"]
            .iter()
            .map(|p| GeneratorConfig::preset(p, Geometry::Cifar).unwrap().parameter_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn hand_ledger_for_one_stage() {
        let cfg = mini(8, vec![1]);
        // input 8·32+32, sr 3·8+8, pos 4·8, block (4 LN vectors, 4 projections, MLP), head 8·3+3
        let block = 4 * 8 + 4 * (64 + 8) + (8 * 32 + 32 + 32 * 8 + 8);
        assert_eq!(cfg.parameter_count(), 288 + 32 + 32 + block + 27);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GeneratorParams::<f32>::new(&cfg, &mut rng).unwrap();
        assert_eq!(p.parameter_count(), cfg.parameter_count());
        let names: Vec<_> = p.named_parameters().into_iter().map(|(n, t)| (n, t.numel())).collect();
        assert_eq!(names, cfg.parameter_ledger());
    }

    #[test]
    fn projection_count_quadruples_with_dim() {
        let a = mini(8, vec![1]).parameter_ledger();
        let b = mini(16, vec![1]).parameter_ledger();
        let get = |l: &[(String, usize)]| l.iter().find(|(n, _)| n == "stage0.block0.wq.weight").unwrap().1;
        assert_eq!(get(&b), 4 * get(&a));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(mini(24, vec![1, 1, 1]).validate().is_err());
        assert!(mini(16, vec![]).validate().is_err());
        assert!(mini(16, vec![1, 0]).validate().is_err());
    }

    #[test]
    fn output_shape_range_and_determinism() {
        let cfg = GeneratorConfig::preset("tiny", Geometry::Cifar).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GeneratorParams::<f32>::new(&cfg, &mut rng).unwrap();
        let z = trunc_normal::<f32, _>(&mut rng, &[2, 64], 1.0).unwrap().detach();
        let a = g.generate(&z, Window::Bounded(8), AttentionRoute::Fused).unwrap();
        let b = g.generate(&z, Window::Bounded(8), AttentionRoute::Fused).unwrap();
        assert_eq!(a.shape(), &[2, 32, 32, 3]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let lr = Tensor::<f32>::zeros(&[2, 8, 8, 3]);
        assert_eq!(g.super_resolve(&lr, Window::Unbounded, AttentionRoute::Fused).unwrap().shape(), &[2, 32, 32, 3]);
        assert!(g.super_resolve(&Tensor::zeros(&[1, 4, 4, 3]), Window::Unbounded, AttentionRoute::Fused).is_err());
    }

    #[test]
    fn routes_agree() {
        let cfg = mini(16, vec![1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GeneratorParams::<f64>::new(&cfg, &mut rng).unwrap();
        let z = Tensor::from_vec((0..16).map(|i| (i as f64 * 0.3).cos()).collect(), &[16]).unwrap();
        for w in [Window::Bounded(1), Window::Bounded(2), Window::Unbounded] {
            let a = g.generate(&z, w, AttentionRoute::Composed).unwrap();
            let b = g.generate(&z, w, AttentionRoute::Fused).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn scaled(cfg: &GeneratorConfig, seed: u64) -> GeneratorParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = GeneratorParams::<f64>::new(cfg, &mut rng).unwrap();
        g.visit_mut("", &mut |_, t| *t = t.mul_scalar(25.0).detach().with_requires_grad(true));
        g
    }

    #[test]
    fn gradient_wrt_noise() {
        let cfg = mini(16, vec![1, 1]);
        let g = scaled(&cfg, 3);
        let z: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        for route in [AttentionRoute::Composed, AttentionRoute::Fused] {
            let r = gradcheck::check(&z, &[16], 1e-5, 1e-3, 1e-9, |t| {
                g.generate(t, Window::Bounded(1), route).map(|y| y.sum())
            })
            .unwrap();
            assert!(r <= 1.0, "{r}");
        }
    }

    #[test]
    fn gradient_wrt_sr_embedding() {
        let cfg = mini(16, vec![1]);
        let g = scaled(&cfg, 4);
        let lr = Tensor::from_vec((0..12).map(|i| (i as f64 * 0.9).sin()).collect(), &[2, 2, 3]).unwrap();
        let w0 = g.sr_embed.weight.to_vec();
        let r = gradcheck::check(&w0, &[3, 16], 1e-5, 1e-3, 1e-9, |w| {
            let mut h = g.clone();
            h.sr_embed.weight = w.clone();
            h.super_resolve(&lr, Window::Unbounded, AttentionRoute::Composed).map(|y| y.square().sum())
        })
        .unwrap();
        assert!(r <= 1.0, "{r}");
    }
}
