use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gantry::discriminator::DiscriminatorConfig;
use gantry::generator::{GeneratorConfig, Geometry};
use gantry::io::checkpoint::read_checkpoint;
use gantry::io::config::{parse_overrides, parse_pairs, RunConfig};
use gantry::io::{read_ppm, write_ppm_grid, ImageBatch};
use gantry::metrics::{count_macs, frechet_distance, Projector, FEATURE_DIM};
use gantry::nn::AttentionRoute;
use gantry::objectives::average_pool;
use gantry::train::{load_state, save_state, standard_normal, train_epoch, TrainState};
use gantry::no_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "gantry", version, about = "Train, sample and evaluate pure-transformer GANs")]
struct Cli {
    /// Require bit-reproducible execution. Every code path is single-threaded
    /// and seeded, so this only records the request in the training log.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Seed for training initialization or sampling noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator and critic, writing a log, checkpoints and sample grids.
    Train(TrainArgs),
    /// Write a PPM grid of samples from a checkpoint.
    Generate(GenerateArgs),
    /// Upsample a low-resolution PPM image with the generator's stages.
    SuperResolve(SuperResolveArgs),
    /// Proxy Fréchet distance between generated and dataset samples.
    EvalFrechet(EvalArgs),
    /// Multiply-accumulate count of a preset.
    Flops(FlopsArgs),
    /// List the tensors stored in a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// synth, cifar, stl or celeba.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// Any config key, as key=value. Repeatable; later values win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.preset.is_none() && self.data.is_none() && self.data_path.is_none() && self.set.is_empty()
    }

    /// File values, then shortcut flags, then `--set` pairs.
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(p) => parse_pairs(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => Vec::new(),
        };
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("preset", self.preset.clone());
        push("dataset", self.data.clone());
        push("data_path", self.data_path.as_ref().map(|p| p.display().to_string()));
        pairs.extend(parse_overrides(&self.set)?);
        Ok(pairs)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for the log, checkpoints and grids.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from a checkpoint; only --epochs may change the stored config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 25)]
    count: usize,
    /// Grid columns; defaults to a near-square grid.
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long, default_value = "samples.ppm")]
    out: PathBuf,
}

#[derive(Args)]
struct SuperResolveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM at the generator's initial grid size, or at its output size (average-pooled first).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "super-resolved.ppm")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Generator to evaluate. Without it the dataset slice is compared with itself.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset overrides; by default the checkpoint's own dataset is used.
    #[command(flatten)]
    config: ConfigArgs,
    /// Samples per side.
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    projector_seed: u64,
}

#[derive(Args)]
struct FlopsArgs {
    preset: String,
    /// Dataset geometry: cifar, stl or celeba.
    #[arg(long, default_value = "cifar")]
    data: String,
    /// Count the critic instead of the generator.
    #[arg(long)]
    discriminator: bool,
    /// Print key=value lines instead of a table.
    #[arg(long)]
    kv: bool,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, cli.seed, cli.deterministic),
        Command::Generate(a) => cmd_generate(a, cli.seed.unwrap_or(0)),
        Command::SuperResolve(a) => cmd_super_resolve(a),
        Command::EvalFrechet(a) => cmd_eval_frechet(a, cli.seed.unwrap_or(0)),
        Command::Flops(a) => cmd_flops(a),
        Command::InspectCheckpoint(a) => cmd_inspect(a),
    }
}

fn grid_cols(count: usize) -> usize {
    (1..=count).find(|c| c * c >= count).unwrap_or(1)
}

fn append_log(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: Option<u64>, deterministic: bool) -> Result<()> {
    let mut state = match &a.resume {
        Some(path) => {
            if !a.config.is_empty() || seed.is_some() {
                bail!("--resume takes its config from the checkpoint; only --epochs may be given");
            }
            load_state(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            let extra: Vec<(String, String)> = seed.map(|s| ("seed".to_string(), s.to_string())).into_iter().collect();
            let mut pairs = a.config.pairs()?;
            pairs.extend(extra);
            TrainState::new(&RunConfig::from_pairs(&pairs)?)?
        }
    };
    if let Some(e) = a.epochs {
        state.config.train.epochs = e;
    }
    let data = state.config.load_dataset()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log = a.out.join("train.log");
    let mut header = String::new();
    match &a.resume {
        Some(p) => header.push_str(&format!("# resumed from {} at epoch {}\n", p.display(), state.epoch)),
        None => header.push_str("# resolved config\n"),
    }
    header.push_str(&format!("# deterministic={deterministic}\n"));
    for line in state.config.to_text().lines() {
        header.push_str(&format!("# {line}\n"));
    }
    append_log(&log, &header)?;

    let cols = grid_cols(state.config.train.eval_samples);
    let total = state.config.train.epochs;
    let every = state.config.train.checkpoint_every;
    while state.epoch < total {
        let report = train_epoch(&mut state, &data)?;
        append_log(&log, &format!("{report}\n"))?;
        println!("{report}");
        let n = state.epoch;
        let grid = ImageBatch::clamped(&state.eval_samples()?)?;
        write_ppm_grid(&grid, cols, &a.out.join(format!("samples-epoch-{n}.ppm")))?;
        if n % every == 0 || n == total {
            save_state(&state, &a.out.join(format!("ckpt-epoch-{n}.tgck")))?;
        }
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs, seed: u64) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let cols = a.cols.unwrap_or_else(|| grid_cols(a.count));
    if cols == 0 {
        bail!("--cols must be at least 1");
    }
    let state = load_state(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal(&mut rng, &[a.count, state.config.generator.latent_dim])?;
    let images = ImageBatch::clamped(&state.sample(&z)?)?;
    write_ppm_grid(&images, cols, &a.out)?;
    Ok(())
}

fn cmd_super_resolve(a: SuperResolveArgs) -> Result<()> {
    let state = load_state(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let cfg = &state.config.generator;
    let img = read_ppm(&a.input)?;
    let side = img.shape()[0];
    let img = img.reshape(&[1, side, side, 3])?;
    let lr = if side == cfg.initial_grid {
        img
    } else if side == cfg.target_resolution() {
        average_pool(&img, cfg.target_resolution() / cfg.initial_grid)?
    } else {
        bail!(
            "input is {side}x{side}; expected {0}x{0} or {1}x{1}",
            cfg.initial_grid,
            cfg.target_resolution()
        );
    };
    let out = {
        let _g = no_grad();
        state.g.super_resolve(&lr, state.sample_window(), AttentionRoute::Fused)?
    };
    write_ppm_grid(&ImageBatch::clamped(&out)?, 1, &a.out)?;
    Ok(())
}

fn first_images(data: &ImageBatch, n: usize) -> Result<ImageBatch> {
    if data.len() < n {
        bail!("dataset has {} images, fewer than --n {n}", data.len());
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(ImageBatch::new(data.select(&idx)?)?)
}

fn cmd_eval_frechet(a: EvalArgs, seed: u64) -> Result<()> {
    if a.n < 2 {
        bail!("--n must be at least 2");
    }
    let state = match &a.checkpoint {
        Some(p) => Some(load_state(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let config = match &state {
        Some(s) if a.config.is_empty() => s.config.clone(),
        Some(s) => {
            // Start from the checkpoint's model so the dataset resolution matches it.
            let mut pairs = parse_pairs(&s.config.to_text())?;
            pairs.retain(|(k, _)| !matches!(k.as_str(), "data_path" | "synth_kind" | "synth_count" | "synth_seed"));
            pairs.extend(a.config.pairs()?);
            RunConfig::from_pairs(&pairs)?
        }
        None => RunConfig::from_pairs(&a.config.pairs()?)?,
    };
    let data = first_images(&config.load_dataset()?, a.n)?;
    let projector = Projector::new(a.projector_seed, data.resolution() * data.resolution() * 3, FEATURE_DIM)?;
    let reference = projector.moments(&data)?;
    let candidate = match &state {
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = standard_normal(&mut rng, &[a.n, s.config.generator.latent_dim])?;
            let images = ImageBatch::clamped(&s.sample(&z)?)?;
            if images.resolution() != data.resolution() {
                bail!("generator produces {}x{} images but the dataset is {}x{}", images.resolution(), images.resolution(), data.resolution(), data.resolution());
            }
            projector.moments(&images)?
        }
        None => projector.moments(&data)?,
    };
    println!("frechet={}", frechet_distance(&candidate, &reference)?);
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let geometry = match a.data.as_str() {
        "synth" => Geometry::parse("cifar"),
        other => Geometry::parse(other),
    }
    .with_context(|| format!("unknown dataset `{}` (cifar, stl, celeba)", a.data))?;
    let g = GeneratorConfig::preset(&a.preset, geometry)?;
    let report = if a.discriminator {
        count_macs(&DiscriminatorConfig::for_preset(&a.preset, g.target_resolution())?)
    } else {
        count_macs(&g)
    };
    print!("{}", if a.kv { report.key_values() } else { report.table() });
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let tensors = read_checkpoint(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    let state = load_state(&a.path).with_context(|| format!("loading {}", a.path.display()))?;
    let params = |prefix: &str| -> usize {
        tensors.iter().filter(|t| t.name.starts_with(prefix)).map(|t| t.data.len()).sum()
    };
    println!(
        "preset={} epoch={} adam_steps_g={} adam_steps_d={} g_params={} d_params={} tensors={}",
        state.config.train.preset,
        state.epoch,
        state.g_opt.step,
        state.d_opt.step,
        params("g."),
        params("d."),
        tensors.len()
    );
    for t in &tensors {
        let shape: Vec<String> = t.shape.iter().map(|e| e.to_string()).collect();
        println!("{} [{}]", t.name, shape.join(","));
    }
    Ok(())
}
