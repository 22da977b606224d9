//! `key=value` run configuration, one pair per line, `#` starts a comment.
//!
//! Precedence: built-in defaults, then the file, then command-line overrides.
//! `preset` and `dataset` are resolved first because they pick the defaults
//! every other key is applied on top of.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, Geometry};
use crate::objectives::{LossConfig, LossKind};
use crate::train::{LocalitySchedule, TrainConfig};

use super::cifar::read_cifar10_dir;
use super::ppm::read_ppm_dir;
use super::synth::{synth_dataset, SynthKind};
use super::ImageBatch;

pub const DEFAULT_SYNTH_COUNT: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth { kind: SynthKind, count: usize, seed: u64 },
    /// CIFAR-10 binary file or directory of `data_batch_*.bin`.
    Cifar(PathBuf),
    /// Directory of square PPM images.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub data: DataSource,
}

const KEYS: &[&str] = &[
    "preset",
    "dataset",
    "data_path",
    "synth_kind",
    "synth_count",
    "synth_seed",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_g",
    "batch_d",
    "n_critic",
    "epochs",
    "seed",
    "mt_ct",
    "schedule",
    "eval_samples",
    "checkpoint_every",
    "loss",
    "gp_weight",
    "sr_weight",
    "aug_translation",
    "aug_cutout",
    "aug_color",
    "initial_grid",
    "g_dim",
    "g_depths",
    "latent_dim",
    "mlp_ratio",
    "heads",
    "d_dim",
    "d_depth",
    "d_heads",
    "patch_grid",
];

fn key_err(key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigKey { key: key.into(), msg: msg.into() }
}

fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| key_err(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(key_err(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| key_err(&format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `key=value` override strings as given on a command line.
pub fn parse_overrides<S: AsRef<str>>(items: &[S]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            let s = s.as_ref();
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| key_err(s, "expected key=value"))
        })
        .collect()
}

impl RunConfig {
    /// Defaults for a preset on a dataset geometry.
    pub fn preset(preset: &str, geometry: Geometry) -> Result<Self> {
        let generator = GeneratorConfig::preset(preset, geometry)?;
        let discriminator = DiscriminatorConfig::for_preset(preset, generator.target_resolution())?;
        let mut train = TrainConfig { preset: preset.into(), geometry, ..TrainConfig::default() };
        if preset == "tiny" {
            train.batch_g = 32;
            train.batch_d = 32;
            train.n_critic = 2;
            train.adam.lr = 2e-4;
        }
        Ok(RunConfig {
            train,
            generator,
            discriminator,
            loss: LossConfig::default(),
            data: DataSource::Synth { kind: SynthKind::default(), count: DEFAULT_SYNTH_COUNT, seed: 0 },
        })
    }

    /// Resolves pairs applied in order over the defaults they select.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(key_err(k, "unknown key"));
            }
        }
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let preset = last("preset").unwrap_or("transgan-s");
        let dataset = last("dataset").unwrap_or("synth");
        let geometry = Geometry::parse(dataset).ok_or_else(|| {
            key_err("dataset", format!("unknown dataset `{dataset}` (synth, cifar, stl, celeba)"))
        })?;
        let mut cfg = Self::preset(preset, geometry)?;
        let mut data_path: Option<PathBuf> = None;
        let (mut synth_kind, mut synth_count, mut synth_seed) = (SynthKind::default(), DEFAULT_SYNTH_COUNT, 0);
        let mut d_heads_set = false;
        for (k, v) in pairs {
            let (k, v) = (k.as_str(), v.as_str());
            let t = &mut cfg.train;
            let g = &mut cfg.generator;
            let d = &mut cfg.discriminator;
            let l = &mut cfg.loss;
            match k {
                "preset" | "dataset" => {}
                "data_path" => data_path = Some(PathBuf::from(v)),
                "synth_kind" => {
                    synth_kind = SynthKind::parse(v).ok_or_else(|| key_err(k, format!("unknown kind `{v}`")))?
                }
                "synth_count" => synth_count = num(k, v)?,
                "synth_seed" => synth_seed = num(k, v)?,
                "lr" => t.adam.lr = num(k, v)?,
                "beta1" => t.adam.beta1 = num(k, v)?,
                "beta2" => t.adam.beta2 = num(k, v)?,
                "adam_eps" => t.adam.eps = num(k, v)?,
                "batch_g" => t.batch_g = num(k, v)?,
                "batch_d" => t.batch_d = num(k, v)?,
                "n_critic" => t.n_critic = num(k, v)?,
                "epochs" => t.epochs = num(k, v)?,
                "seed" => t.seed = num(k, v)?,
                "mt_ct" => t.mt_ct = flag(k, v)?,
                "schedule" => t.schedule = LocalitySchedule::parse(v)?,
                "eval_samples" => t.eval_samples = num(k, v)?,
                "checkpoint_every" => t.checkpoint_every = num(k, v)?,
                "loss" => l.kind = LossKind::parse(v).ok_or_else(|| key_err(k, format!("unknown loss `{v}`")))?,
                "gp_weight" => l.gp_weight = num(k, v)?,
                "sr_weight" => l.sr_weight = num(k, v)?,
                "aug_translation" => l.aug.translation = num(k, v)?,
                "aug_cutout" => l.aug.cutout = num(k, v)?,
                "aug_color" => l.aug.color = num(k, v)?,
                "initial_grid" => g.initial_grid = num(k, v)?,
                "g_dim" => {
                    let dim = num(k, v)?;
                    if g.latent_dim == g.dim {
                        g.latent_dim = dim;
                    }
                    g.dim = dim;
                }
                "g_depths" => g.depths = list(k, v)?,
                "latent_dim" => g.latent_dim = num(k, v)?,
                "mlp_ratio" => {
                    g.mlp_ratio = num(k, v)?;
                    d.mlp_ratio = g.mlp_ratio;
                }
                "heads" => {
                    g.head_count = num(k, v)?;
                    if !d_heads_set {
                        d.head_count = g.head_count;
                    }
                }
                "d_dim" => d.embed_dim = num(k, v)?,
                "d_depth" => d.depth = num(k, v)?,
                "d_heads" => {
                    d.head_count = num(k, v)?;
                    d_heads_set = true;
                }
                "patch_grid" => d.patch_grid = num(k, v)?,
                _ => unreachable!("keys checked above"),
            }
        }
        cfg.discriminator.input_resolution = cfg.generator.target_resolution();
        cfg.data = match (dataset, data_path) {
            ("synth", _) => DataSource::Synth { kind: synth_kind, count: synth_count, seed: synth_seed },
            ("cifar", Some(p)) => DataSource::Cifar(p),
            (_, Some(p)) => DataSource::Dir(p),
            (other, None) => return Err(key_err("data_path", format!("dataset `{other}` needs a data_path"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        if self.discriminator.input_resolution != self.generator.target_resolution() {
            return Err(key_err("patch_grid", "critic resolution must equal generator output resolution"));
        }
        if let DataSource::Synth { count: 0, .. } = self.data {
            return Err(key_err("synth_count", "must be positive"));
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> &'static str {
        match (&self.data, self.train.geometry) {
            (DataSource::Synth { .. }, _) => "synth",
            (DataSource::Cifar(_), _) => "cifar",
            (DataSource::Dir(_), Geometry::Celeba) => "celeba",
            (DataSource::Dir(_), _) => "stl",
        }
    }

    /// Loads the configured dataset and checks it matches the generator's output size.
    pub fn load_dataset(&self) -> Result<ImageBatch> {
        let resolution = self.generator.target_resolution();
        let images = match &self.data {
            DataSource::Synth { kind, count, seed } => synth_dataset(*kind, *count, resolution, *seed)?,
            DataSource::Cifar(p) => read_cifar10_dir(p)?,
            DataSource::Dir(p) => read_ppm_dir(p)?,
        };
        if images.resolution() != resolution {
            return Err(Error::Dataset(format!(
                "dataset images are {0}x{0} but the generator produces {1}x{1}",
                images.resolution(),
                resolution
            )));
        }
        Ok(images)
    }

    /// Every key, resolved. `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (t, g, d, l) = (&self.train, &self.generator, &self.discriminator, &self.loss);
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("preset", t.preset.clone());
        kv("dataset", self.dataset_name().into());
        match &self.data {
            DataSource::Synth { kind, count, seed } => {
                kv("synth_kind", kind.name().into());
                kv("synth_count", count.to_string());
                kv("synth_seed", seed.to_string());
            }
            DataSource::Cifar(p) | DataSource::Dir(p) => kv("data_path", p.display().to_string()),
        }
        kv("lr", format!("{:?}", t.adam.lr));
        kv("beta1", format!("{:?}", t.adam.beta1));
        kv("beta2", format!("{:?}", t.adam.beta2));
        kv("adam_eps", format!("{:?}", t.adam.eps));
        kv("batch_g", t.batch_g.to_string());
        kv("batch_d", t.batch_d.to_string());
        kv("n_critic", t.n_critic.to_string());
        kv("epochs", t.epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("mt_ct", t.mt_ct.to_string());
        kv("schedule", t.schedule.to_string());
        kv("eval_samples", t.eval_samples.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("loss", l.kind.name().into());
        kv("gp_weight", format!("{:?}", l.gp_weight));
        kv("sr_weight", format!("{:?}", l.sr_weight));
        kv("aug_translation", format!("{:?}", l.aug.translation));
        kv("aug_cutout", format!("{:?}", l.aug.cutout));
        kv("aug_color", format!("{:?}", l.aug.color));
        kv("initial_grid", g.initial_grid.to_string());
        kv("g_dim", g.dim.to_string());
        kv("g_depths", join(&g.depths));
        kv("latent_dim", g.latent_dim.to_string());
        kv("mlp_ratio", g.mlp_ratio.to_string());
        kv("heads", g.head_count.to_string());
        kv("d_dim", d.embed_dim.to_string());
        kv("d_depth", d.depth.to_string());
        kv("d_heads", d.head_count.to_string());
        kv("patch_grid", d.patch_grid.to_string());
        s
    }
}

/// Reads an optional config file, then applies `overrides` on top.
pub fn parse_run_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = match path {
        Some(p) => parse_pairs(&fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    pairs.extend_from_slice(overrides);
    RunConfig::from_pairs(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text).unwrap()
    }

    #[test]
    fn empty_config_defaults() {
        let c = RunConfig::from_text("").unwrap();
        assert_eq!(c.train.preset, "transgan-s");
        assert_eq!(c.generator.dim, 384);
        assert_eq!(c.generator.depths, vec![5, 2, 2]);
        assert_eq!(c.train.adam.lr, 1e-4);
        assert_eq!((c.train.batch_g, c.train.batch_d), (128, 64));
        assert_eq!(c.data, DataSource::Synth { kind: SynthKind::Mixed, count: DEFAULT_SYNTH_COUNT, seed: 0 });
        assert_eq!(c.discriminator.input_resolution, 32);
    }

    #[test]
    fn xl_preset() {
        let c = RunConfig::from_text("preset=transgan-xl").unwrap();
        assert_eq!(c.generator.depths, vec![5, 4, 2]);
        assert_eq!(c.generator.dim, 1024);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("lr=abc", "lr"),
            ("bogus=1", "bogus"),
            ("batch_g=0", "batch_g"),
            ("aug_cutout=1.5", "aug_cutout"),
            ("g_dim=100", "dim"),
            ("dataset=cifar", "data_path"),
            ("schedule=3:8", "schedule"),
            ("mt_ct=maybe", "mt_ct"),
        ] {
            match RunConfig::from_text(text) {
                Err(Error::ConfigKey { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn precedence_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "# comment\nlr = 3e-4  # trailing\nseed=3\npreset=tiny\n").unwrap();
        let c = parse_run_config(Some(&p), &pairs("seed=9")).unwrap();
        assert_eq!(c.train.adam.lr, 3e-4);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.generator.dim, 64);
        // preset resolves first even when it comes after keys it would reset
        let c = RunConfig::from_text("g_depths=1,1\npreset=tiny").unwrap();
        assert_eq!(c.generator.depths, vec![1, 1]);
        assert_eq!(c.discriminator.input_resolution, 16);
    }

    #[test]
    fn geometry_variants() {
        let c = RunConfig::from_text("dataset=stl\ndata_path=/x").unwrap();
        assert_eq!((c.generator.initial_grid, c.generator.target_resolution()), (12, 48));
        assert_eq!(c.data, DataSource::Dir("/x".into()));
        let c = RunConfig::from_text("dataset=celeba\ndata_path=/x").unwrap();
        assert_eq!(c.generator.target_resolution(), 64);
        let c = RunConfig::from_text("dataset=cifar\ndata_path=/c").unwrap();
        assert_eq!(c.data, DataSource::Cifar("/c".into()));
    }

    #[test]
    fn text_round_trip() {
        for text in ["", "preset=tiny\nseed=4\nloss=hinge\nmt_ct=false", "dataset=celeba\ndata_path=/d\nlr=3.5e-5"] {
            let c = RunConfig::from_text(text).unwrap();
            assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        }
    }
}
