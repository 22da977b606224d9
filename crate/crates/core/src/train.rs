//! Adam, the locality schedule and the alternating critic/generator loop.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::discriminator::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::generator::{GeneratorParams, Geometry};
use crate::io::checkpoint::{read_checkpoint, write_checkpoint, CheckpointTensor};
use crate::io::config::RunConfig;
use crate::io::ImageBatch;
use crate::nn::{frozen, AttentionRoute, Module, Window};
use crate::objectives::{
    apply_augmentation, average_pool, d_loss_wgan_gp, g_loss_wgan, hinge_losses, sample_augmentation,
    sr_auxiliary_loss, LossKind,
};
use crate::tensor::{gradients, no_grad, Scalar, Tensor};

/// Piecewise-constant map from epoch to attention window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalitySchedule {
    breakpoints: Vec<(usize, Window)>,
}

impl Default for LocalitySchedule {
    fn default() -> Self {
        LocalitySchedule {
            breakpoints: vec![
                (0, Window::Bounded(8)),
                (20, Window::Bounded(10)),
                (30, Window::Bounded(12)),
                (40, Window::Bounded(14)),
                (50, Window::Unbounded),
            ],
        }
    }
}

impl LocalitySchedule {
    /// Breakpoints must start at epoch 0 and strictly increase.
    pub fn new(breakpoints: Vec<(usize, Window)>) -> Result<Self> {
        if breakpoints.first().map(|b| b.0) != Some(0) {
            return Err(Error::ConfigKey { key: "schedule".into(), msg: "first breakpoint must be epoch 0".into() });
        }
        if breakpoints.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::ConfigKey { key: "schedule".into(), msg: "epochs must strictly increase".into() });
        }
        if breakpoints.iter().any(|b| b.1 == Window::Bounded(0)) {
            return Err(Error::ConfigKey { key: "schedule".into(), msg: "window must be positive".into() });
        }
        Ok(LocalitySchedule { breakpoints })
    }

    /// Always global attention.
    pub fn unbounded() -> Self {
        LocalitySchedule { breakpoints: vec![(0, Window::Unbounded)] }
    }

    pub fn breakpoints(&self) -> &[(usize, Window)] {
        &self.breakpoints
    }

    pub fn window_for_epoch(&self, epoch: usize) -> Window {
        self.breakpoints
            .iter()
            .rev()
            .find(|(start, _)| *start <= epoch)
            .map(|b| b.1)
            .unwrap_or(Window::Unbounded)
    }

    /// `0:8,20:10,50:full`
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::ConfigKey { key: "schedule".into(), msg };
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (e, w) = part.split_once(':').ok_or_else(|| bad(format!("expected epoch:window, got `{part}`")))?;
            let epoch = e.trim().parse().map_err(|_| bad(format!("bad epoch `{e}`")))?;
            let window = match w.trim() {
                "full" | "unbounded" => Window::Unbounded,
                n => Window::Bounded(n.parse().map_err(|_| bad(format!("bad window `{n}`")))?),
            };
            out.push((epoch, window));
        }
        Self::new(out)
    }
}

impl fmt::Display for LocalitySchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.breakpoints.iter().map(|(e, w)| format!("{e}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

pub fn window_for_epoch(schedule: &LocalitySchedule, epoch: usize) -> Window {
    schedule.window_for_epoch(epoch)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn for_module<M: Module<T>>(module: &M) -> Self {
        let params: Vec<Tensor<T>> = module.named_parameters().into_iter().map(|(_, t)| t).collect();
        Self::new(&params)
    }
}

/// One bias-corrected Adam update. Each parameter is replaced by a fresh leaf.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || m.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.to_vec();
        for (((x, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
        *p = Tensor::param(data, p.shape())?;
    }
    Ok(())
}

/// Applies `adam_step` to every parameter of a module, in visiting order.
pub fn adam_update<T: Scalar, M: Module<T>>(
    module: &mut M,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut params: Vec<Tensor<T>> = module.named_parameters().into_iter().map(|(_, t)| t).collect();
    adam_step(&mut params, grads, state, cfg)?;
    let mut it = params.into_iter();
    module.visit_mut("", &mut |_, t| *t = it.next().expect("same parameter count"));
    Ok(())
}

fn module_params<T: Scalar, M: Module<T>>(module: &M) -> Vec<Tensor<T>> {
    module.named_parameters().into_iter().map(|(_, t)| t).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub geometry: Geometry,
    pub adam: AdamConfig,
    pub batch_g: usize,
    pub batch_d: usize,
    pub n_critic: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Super-resolution co-training term in the generator loss.
    pub mt_ct: bool,
    pub schedule: LocalitySchedule,
    /// Size of the fixed noise bank used for per-epoch sample grids.
    pub eval_samples: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "transgan-s".into(),
            geometry: Geometry::Cifar,
            adam: AdamConfig::default(),
            batch_g: 128,
            batch_d: 64,
            n_critic: 1,
            epochs: 30,
            seed: 0,
            mt_ct: true,
            schedule: LocalitySchedule::default(),
            eval_samples: 25,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::ConfigKey { key: key.into(), msg: msg.into() });
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        if self.batch_g == 0 {
            return bad("batch_g", "must be positive");
        }
        if self.batch_d == 0 {
            return bad("batch_d", "must be positive");
        }
        if self.eval_samples == 0 {
            return bad("eval_samples", "must be positive");
        }
        Ok(())
    }
}

const SAMPLE_CHUNK: usize = 64;

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub g: GeneratorParams<f32>,
    pub d: DiscriminatorParams<f32>,
    pub g_opt: AdamState<f32>,
    pub d_opt: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    /// Fixed `[eval_samples, latent]` noise for comparable sample grids.
    pub eval_noise: Tensor<f32>,
}

pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f32>> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| StandardNormal.sample(rng)).collect(), shape)
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let g = GeneratorParams::new(&config.generator, &mut rng)?;
        let d = DiscriminatorParams::new(&config.discriminator, &mut rng)?;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        eval_rng.set_stream(1);
        let eval_noise = standard_normal(&mut eval_rng, &[config.train.eval_samples, config.generator.latent_dim])?;
        Ok(TrainState {
            config: config.clone(),
            g_opt: AdamState::for_module(&g),
            d_opt: AdamState::for_module(&d),
            g,
            d,
            epoch: 0,
            rng,
            eval_noise,
        })
    }

    pub fn current_window(&self) -> Window {
        self.config.train.schedule.window_for_epoch(self.epoch)
    }

    /// The window the most recent epoch trained with (epoch 0's before any training).
    pub fn sample_window(&self) -> Window {
        self.config.train.schedule.window_for_epoch(self.epoch.saturating_sub(1))
    }

    /// Images from `z` at the sampling window, generated in chunks.
    pub fn sample(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let _g = no_grad();
        let (n, latent) = (z.shape()[0], z.shape()[1]);
        let mut parts = Vec::new();
        for start in (0..n).step_by(SAMPLE_CHUNK) {
            let end = (start + SAMPLE_CHUNK).min(n);
            let chunk = Tensor::from_vec(z.data()[start * latent..end * latent].to_vec(), &[end - start, latent])?;
            parts.push(self.g.generate(&chunk, self.sample_window(), AttentionRoute::Fused)?);
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Images from the fixed evaluation noise.
    pub fn eval_samples(&self) -> Result<Tensor<f32>> {
        self.sample(&self.eval_noise)
    }
}

/// Per-epoch means of the loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// Completed epochs after this one.
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub sr: f64,
    pub window: Window,
    pub imgs_per_sec: f64,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Real images drawn by the critic steps.
    pub samples: usize,
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} d_loss={:.6} g_loss={:.6} gp={:.6} sr={:.6} window={} imgs_per_sec={:.2}",
            self.epoch, self.d_loss, self.g_loss, self.gp, self.sr, self.window, self.imgs_per_sec
        )
    }
}

fn finite(v: f32, term: &str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v as f64)
    } else {
        Err(Error::NonFinite { term: term.into(), step })
    }
}

/// Losses of one critic step.
#[derive(Clone, Copy, Debug)]
pub struct DStep {
    pub loss: f64,
    pub gp: f64,
}

/// Losses of one generator step.
#[derive(Clone, Copy, Debug)]
pub struct GStep {
    pub adversarial: f64,
    pub sr: f64,
}

/// One critic update on `real`; fakes are drawn fresh from the generator.
pub fn critic_step(state: &mut TrainState, real: &Tensor<f32>, window: Window) -> Result<DStep> {
    let cfg = state.config.clone();
    let (b, res) = (real.shape()[0], real.shape()[1]);
    let step = state.d_opt.step as usize;
    let z = standard_normal(&mut state.rng, &[b, cfg.generator.latent_dim])?;
    let fake = {
        let _g = no_grad();
        state.g.generate(&z, window, AttentionRoute::Fused)?
    };
    let aug = sample_augmentation(&mut state.rng, b, res, &cfg.loss.aug);
    let real_aug = apply_augmentation(real, &aug)?;
    let fake_aug = apply_augmentation(&fake, &aug)?;
    let d = &state.d;
    let critic = |x: &Tensor<f32>| d.discriminate(x);
    let (total, gp) = match cfg.loss.kind {
        LossKind::WganGp => {
            let l = d_loss_wgan_gp(&real_aug, &fake_aug, &critic, cfg.loss.gp_weight, &mut state.rng)?;
            (l.total, l.gp.item())
        }
        LossKind::Hinge => (hinge_losses(&critic(&real_aug)?, &critic(&fake_aug)?).0, 0.0),
    };
    let loss = finite(total.item(), "d_loss", step)?;
    let gp = finite(gp, "gp", step)?;
    let params = module_params(&state.d);
    let refs: Vec<&Tensor<f32>> = params.iter().collect();
    let grads = gradients(&total, &refs, false)?;
    adam_update(&mut state.d, &grads, &mut state.d_opt, &cfg.train.adam)?;
    Ok(DStep { loss, gp })
}

/// One generator update. `sr_source` supplies the high-resolution images of
/// the super-resolution term; `adversarial` toggles the critic term.
pub fn generator_step(
    state: &mut TrainState,
    sr_source: Option<&Tensor<f32>>,
    window: Window,
    adversarial: bool,
) -> Result<GStep> {
    let cfg = state.config.clone();
    let step = state.g_opt.step as usize;
    let res = cfg.generator.target_resolution();
    let mut total: Option<Tensor<f32>> = None;
    let mut adv = 0.0;
    if adversarial {
        let b = cfg.train.batch_g;
        let z = standard_normal(&mut state.rng, &[b, cfg.generator.latent_dim])?;
        let fake = state.g.generate(&z, window, AttentionRoute::Fused)?;
        let aug = sample_augmentation(&mut state.rng, b, res, &cfg.loss.aug);
        let d = frozen(&state.d);
        let scores = d.discriminate(&apply_augmentation(&fake, &aug)?)?;
        let l = g_loss_wgan(&scores);
        adv = finite(l.item(), "g_loss", step)?;
        total = Some(l);
    }
    let mut sr = 0.0;
    if let Some(hr) = sr_source {
        let factor = res / cfg.generator.initial_grid;
        let lr = average_pool(hr, factor)?;
        let out = state.g.super_resolve(&lr, window, AttentionRoute::Fused)?;
        let l = sr_auxiliary_loss(&out, hr, cfg.loss.sr_weight)?;
        sr = finite(l.item(), "sr", step)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    let Some(total) = total else {
        return Ok(GStep { adversarial: 0.0, sr: 0.0 });
    };
    let params = module_params(&state.g);
    let refs: Vec<&Tensor<f32>> = params.iter().collect();
    let grads = gradients(&total, &refs, false)?;
    adam_update(&mut state.g, &grads, &mut state.g_opt, &cfg.train.adam)?;
    Ok(GStep { adversarial: adv, sr })
}

/// One pass over `data`: critic steps over shuffled real batches, with a
/// generator step after every `n_critic` of them (after every batch when
/// `n_critic == 0`, which skips the critic entirely).
pub fn train_epoch(state: &mut TrainState, data: &ImageBatch) -> Result<EpochReport> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let cfg = state.config.clone();
    if data.resolution() != cfg.generator.target_resolution() {
        return Err(Error::Dataset(format!(
            "dataset resolution {} does not match model resolution {}",
            data.resolution(),
            cfg.generator.target_resolution()
        )));
    }
    let start = Instant::now();
    let window = state.current_window();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let batches: Vec<&[usize]> = order.chunks(cfg.train.batch_d).collect();
    let (mut d_sum, mut gp_sum, mut g_sum, mut sr_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut d_steps, mut g_steps, mut samples) = (0, 0, 0);
    let mut since_g = 0;
    for (i, idx) in batches.iter().enumerate() {
        let real = data.select(idx)?;
        samples += idx.len();
        if cfg.train.n_critic > 0 {
            let s = critic_step(state, &real, window)?;
            d_sum += s.loss;
            gp_sum += s.gp;
            d_steps += 1;
            since_g += 1;
        }
        let last = i + 1 == batches.len();
        if cfg.train.n_critic == 0 || since_g == cfg.train.n_critic || last {
            let sr_source = cfg.train.mt_ct.then_some(&real);
            let s = generator_step(state, sr_source, window, true)?;
            g_sum += s.adversarial;
            sr_sum += s.sr;
            g_steps += 1;
            since_g = 0;
        }
    }
    state.epoch += 1;
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(EpochReport {
        epoch: state.epoch,
        d_loss: mean(d_sum, d_steps),
        g_loss: mean(g_sum, g_steps),
        gp: mean(gp_sum, d_steps),
        sr: mean(sr_sum, g_steps),
        window,
        imgs_per_sec: samples as f64 / secs,
        d_steps,
        g_steps,
        samples,
    })
}

fn push_module<M: Module<f32>>(out: &mut Vec<CheckpointTensor>, prefix: &str, m: &M) {
    m.visit(prefix, &mut |name, t| out.push(CheckpointTensor::new(name, t.shape(), t.to_vec())));
}

fn push_adam(out: &mut Vec<CheckpointTensor>, prefix: &str, names: &[(String, Tensor<f32>)], s: &AdamState<f32>) {
    out.push(CheckpointTensor::from_words(format!("meta/{prefix}.step"), &split_u64(s.step)));
    for (((name, t), m), v) in names.iter().zip(&s.m).zip(&s.v) {
        out.push(CheckpointTensor::new(format!("{prefix}.m.{name}"), t.shape(), m.clone()));
        out.push(CheckpointTensor::new(format!("{prefix}.v.{name}"), t.shape(), v.clone()));
    }
}

fn split_u64(v: u64) -> [u32; 2] {
    [v as u32, (v >> 32) as u32]
}

fn join_u64(w: &[u32]) -> u64 {
    w[0] as u64 | (w[1] as u64) << 32
}

/// Serializes parameters, optimizer moments, epoch, rng and config to tensors.
pub fn state_to_tensors(state: &TrainState) -> Vec<CheckpointTensor> {
    let mut out = Vec::new();
    out.push(CheckpointTensor::from_words("meta/config", &bytes_to_words(state.config.to_text().as_bytes())));
    out.push(CheckpointTensor::from_words("meta/epoch", &split_u64(state.epoch as u64)));
    let mut rng_words: Vec<u32> =
        state.rng.get_seed().chunks(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let pos = state.rng.get_word_pos();
    rng_words.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    rng_words.extend(split_u64(state.rng.get_stream()));
    out.push(CheckpointTensor::from_words("meta/rng", &rng_words));
    out.push(CheckpointTensor::new("eval_noise", state.eval_noise.shape(), state.eval_noise.to_vec()));
    push_module(&mut out, "g", &state.g);
    push_module(&mut out, "d", &state.d);
    push_adam(&mut out, "opt_g", &state.g.named_parameters(), &state.g_opt);
    push_adam(&mut out, "opt_d", &state.d.named_parameters(), &state.d_opt);
    out
}

fn bytes_to_words(bytes: &[u8]) -> Vec<u32> {
    let mut words = vec![bytes.len() as u32];
    words.extend(bytes.chunks(4).map(|c| {
        let mut b = [0u8; 4];
        b[..c.len()].copy_from_slice(c);
        u32::from_le_bytes(b)
    }));
    words
}

fn words_to_bytes(words: &[u32]) -> Result<Vec<u8>> {
    let (&len, rest) = words.split_first().ok_or_else(|| Error::Format("empty byte tensor".into()))?;
    let mut bytes: Vec<u8> = rest.iter().flat_map(|w| w.to_le_bytes()).collect();
    if len as usize > bytes.len() {
        return Err(Error::Format("byte tensor shorter than its length prefix".into()));
    }
    bytes.truncate(len as usize);
    Ok(bytes)
}

struct Lookup {
    tensors: std::collections::HashMap<String, CheckpointTensor>,
}

impl Lookup {
    fn take(&mut self, name: &str) -> Result<CheckpointTensor> {
        self.tensors.remove(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    fn take_shaped(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let t = self.take(name)?;
        if t.shape != shape {
            return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape)));
        }
        Ok(t.data)
    }

    fn words(&mut self, name: &str, len: usize) -> Result<Vec<u32>> {
        let w = self.take(name)?.words();
        if w.len() != len {
            return Err(Error::Format(format!("tensor `{name}` has {} words, expected {len}", w.len())));
        }
        Ok(w)
    }

    fn fill<M: Module<f32>>(&mut self, prefix: &str, m: &mut M) -> Result<()> {
        let mut err = None;
        m.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.take_shaped(name, t.shape()).and_then(|d| Tensor::param(d, t.shape())) {
                Ok(v) => *t = v,
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn adam(&mut self, prefix: &str, names: &[(String, Tensor<f32>)]) -> Result<AdamState<f32>> {
        let step = join_u64(&self.words(&format!("meta/{prefix}.step"), 2)?);
        let mut s = AdamState { step, m: Vec::new(), v: Vec::new() };
        for (name, t) in names {
            s.m.push(self.take_shaped(&format!("{prefix}.m.{name}"), t.shape())?);
            s.v.push(self.take_shaped(&format!("{prefix}.v.{name}"), t.shape())?);
        }
        Ok(s)
    }
}

pub fn state_from_tensors(tensors: Vec<CheckpointTensor>) -> Result<TrainState> {
    let mut lk = Lookup { tensors: tensors.into_iter().map(|t| (t.name.clone(), t)).collect() };
    let cfg_words = lk.take("meta/config")?.words();
    let text = String::from_utf8(words_to_bytes(&cfg_words)?)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let config = RunConfig::from_text(&text)?;
    let mut state = TrainState::new(&config)?;
    state.epoch = join_u64(&lk.words("meta/epoch", 2)?) as usize;
    let rng = lk.words("meta/rng", 14)?;
    let mut seed = [0u8; 32];
    for (i, w) in rng[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
    }
    let pos = rng[8..12].iter().enumerate().fold(0u128, |acc, (i, &w)| acc | (w as u128) << (32 * i));
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_stream(join_u64(&rng[12..14]));
    state.rng.set_word_pos(pos);
    let noise_shape = state.eval_noise.shape().to_vec();
    state.eval_noise = Tensor::from_vec(lk.take_shaped("eval_noise", &noise_shape)?, &noise_shape)?;
    lk.fill("g", &mut state.g)?;
    lk.fill("d", &mut state.d)?;
    state.g_opt = lk.adam("opt_g", &state.g.named_parameters())?;
    state.d_opt = lk.adam("opt_d", &state.d.named_parameters())?;
    if let Some(extra) = lk.tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }
    Ok(state)
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    write_checkpoint(path, &state_to_tensors(state))
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    state_from_tensors(read_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{synth_dataset, SynthKind};

    #[test]
    fn default_schedule_values() {
        let s = LocalitySchedule::default();
        let got: Vec<Window> = [0, 19, 20, 25, 29, 30, 39, 40, 45, 49, 50, 1000, 1_000_000]
            .iter()
            .map(|&e| window_for_epoch(&s, e))
            .collect();
        use Window::*;
        assert_eq!(
            got,
            vec![
                Bounded(8),
                Bounded(8),
                Bounded(10),
                Bounded(10),
                Bounded(10),
                Bounded(12),
                Bounded(12),
                Bounded(14),
                Bounded(14),
                Bounded(14),
                Unbounded,
                Unbounded,
                Unbounded
            ]
        );
        assert_eq!(LocalitySchedule::parse(&s.to_string()).unwrap(), s);
        assert!(LocalitySchedule::parse("5:8").is_err());
        assert!(LocalitySchedule::parse("0:8,0:9").is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = vec![Tensor::<f64>::param(vec![0.5, -1.0], &[2]).unwrap()];
        let g = vec![Tensor::<f64>::zeros(&[2])];
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0].data(), &[0.5, -1.0]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![Tensor::<f64>::param(vec![0.0], &[1]).unwrap()];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        adam_step(&mut p, &[Tensor::from_vec(vec![1.0], &[1]).unwrap()], &mut s, &cfg).unwrap();
        assert!((p[0].item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let cfg = AdamConfig { lr: 0.05, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
        let grad = |x: f64| 2.0 * x - 1.0 + (3.0 * x).sin();
        let (mut x, mut m, mut v) = (1.5f64, 0.0, 0.0);
        let mut want = Vec::new();
        for t in 1..=10 {
            let g = grad(x);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            want.push(x);
        }
        let mut p = vec![Tensor::<f64>::param(vec![1.5], &[1]).unwrap()];
        let mut s = AdamState::new(&p);
        for w in want {
            let g = Tensor::from_vec(vec![grad(p[0].item())], &[1]).unwrap();
            adam_step(&mut p, &[g], &mut s, &cfg).unwrap();
            assert!((p[0].item() - w).abs() < 1e-12);
        }
    }

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::preset("tiny", Geometry::Cifar).unwrap();
        cfg.train.batch_d = 16;
        cfg.train.batch_g = 16;
        cfg.train.eval_samples = 4;
        cfg
    }

    #[test]
    fn epoch_smoke_and_determinism() {
        let cfg = tiny_run();
        let data = synth_dataset(SynthKind::Mixed, 48, 32, 1).unwrap();
        let mut a = TrainState::new(&cfg).unwrap();
        let mut b = TrainState::new(&cfg).unwrap();
        let ra = train_epoch(&mut a, &data).unwrap();
        let rb = train_epoch(&mut b, &data).unwrap();
        for v in [ra.d_loss, ra.g_loss, ra.gp, ra.sr] {
            assert!(v.is_finite());
        }
        // n_critic 2: a generator step after the second batch and after the last
        assert_eq!((ra.samples, ra.d_steps, ra.g_steps), (48, 3, 2));
        assert_eq!((ra.d_loss, ra.g_loss, ra.gp, ra.sr), (rb.d_loss, rb.g_loss, rb.gp, rb.sr));
        assert!(crate::io::checkpoint::bit_identical(&state_to_tensors(&a), &state_to_tensors(&b)));
        assert!(ra.to_string().starts_with("epoch=1 d_loss="));
    }

    #[test]
    fn state_round_trip() {
        let cfg = tiny_run();
        let data = synth_dataset(SynthKind::Mixed, 16, 32, 2).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        train_epoch(&mut s, &data).unwrap();
        let t = state_to_tensors(&s);
        let back = state_from_tensors(t.clone()).unwrap();
        assert!(crate::io::checkpoint::bit_identical(&t, &state_to_tensors(&back)));
        let params = t.iter().filter(|t| t.name.starts_with("g.") || t.name.starts_with("d.")).count();
        assert_eq!(params, s.g.named_parameters().len() + s.d.named_parameters().len());
    }

    #[test]
    fn critic_step_leaves_generator_untouched() {
        let cfg = tiny_run();
        let data = synth_dataset(SynthKind::Mixed, 16, 32, 3).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        let g_before: Vec<Vec<f32>> = s.g.named_parameters().iter().map(|(_, t)| t.to_vec()).collect();
        let d_before: Vec<Vec<f32>> = s.d.named_parameters().iter().map(|(_, t)| t.to_vec()).collect();
        critic_step(&mut s, data.tensor(), Window::Bounded(8)).unwrap();
        let g_after: Vec<Vec<f32>> = s.g.named_parameters().iter().map(|(_, t)| t.to_vec()).collect();
        let d_after: Vec<Vec<f32>> = s.d.named_parameters().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(g_before, g_after);
        assert_ne!(d_before, d_after);
        generator_step(&mut s, Some(data.tensor()), Window::Bounded(8), true).unwrap();
        let d_final: Vec<Vec<f32>> = s.d.named_parameters().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(d_after, d_final);
    }
}
