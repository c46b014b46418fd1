use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use entitydrag::config::{parse_override, Config};
use entitydrag::entity_rep::{ConditioningMode, EntityMapSequence, Trajectory};
use entitydrag::evalkit::evaluate::clip_condition;
use entitydrag::synth::{dataset::load_clip, generate_dataset, Dataset, LabeledClip};
use entitydrag::{experiment, pipeline, service, Error, Result};

#[derive(Parser)]
#[command(name = "entitydrag", version, about = "Entity-level drag control for video diffusion")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Accepted both before and after the subcommand; later `--set` wins.
#[derive(Args, Clone, Default)]
struct Global {
    /// TOML config file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Global {
    fn merge(mut self, local: &Global) -> Global {
        if local.config.is_some() {
            self.config = local.config.clone();
        }
        self.overrides.extend(local.overrides.iter().cloned());
        self
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    Synth {
        #[command(flatten)]
        global: Global,
        /// Total clip count, split in the configured train/val/test ratio.
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the train split.
    Train {
        #[command(flatten)]
        global: Global,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate one clip from a scene and a trajectory file.
    Generate {
        #[command(flatten)]
        global: Global,
        /// Clip id in the dataset, or a path to a clip `.safetensors` file.
        #[arg(long)]
        scene: String,
        /// JSON array of `{entity_id, points}`.
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "full")]
        mode: ConditioningMode,
    },
    /// Evaluate a checkpoint in one or more conditioning modes.
    Eval {
        #[command(flatten)]
        global: Global,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Repeatable; defaults to `eval.modes`.
        #[arg(long = "mode")]
        modes: Vec<ConditioningMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        global: Global,
    },
    /// Train and evaluate every ablation variant over `experiment.seeds`.
    Experiment {
        #[command(flatten)]
        global: Global,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    Config {
        #[command(flatten)]
        global: Global,
    },
}

fn load_config(g: &Global) -> Result<Config> {
    let overrides = g.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    Config::load(g.config.as_deref(), &overrides, std::env::vars())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn synth(mut cfg: Config, clips: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    if let Some(n) = clips {
        let total = cfg.dataset.total().max(1);
        let val = n * cfg.dataset.val_clips / total;
        let test = n * cfg.dataset.test_clips / total;
        cfg.dataset.val_clips = val;
        cfg.dataset.test_clips = test;
        cfg.dataset.train_clips = n - val - test;
    }
    if let Some(s) = seed {
        cfg.dataset.seed = s;
    }
    let root = out.unwrap_or(cfg.paths.data);
    let stats = generate_dataset(&cfg.dataset, &root)?;
    let digest = Dataset::open(&root)?.digest()?;
    println!("{} clips written, {} reused in {}", stats.written, stats.reused, root.display());
    println!("digest {digest}");
    Ok(())
}

fn train(mut cfg: Config, out: Option<PathBuf>, steps: Option<usize>, seed: Option<u64>) -> Result<()> {
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let ds = Dataset::open(&cfg.paths.data)?;
    let out = out.unwrap_or(cfg.paths.checkpoint.clone());
    let summary = pipeline::train(&ds, &cfg.model, &cfg.train, &out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn load_scene(cfg: &Config, scene: &str) -> Result<LabeledClip> {
    let path = Path::new(scene);
    if path.extension().is_some_and(|e| e == "safetensors") {
        return load_clip(path);
    }
    let ds = Dataset::open(&cfg.paths.data)?;
    let entry = ds
        .find(scene)
        .ok_or_else(|| Error::Config(format!("no scene `{scene}` in {}", cfg.paths.data.display())))?;
    ds.load(entry)
}

#[allow(clippy::too_many_arguments)]
fn generate(
    cfg: Config,
    scene: &str,
    trajectories: &Path,
    checkpoint: Option<PathBuf>,
    seed: u64,
    out: &Path,
    steps: Option<usize>,
    mode: ConditioningMode,
) -> Result<()> {
    let clip = load_scene(&cfg, scene)?;
    let drags = Trajectory::load_all(trajectories)?;
    let model = pipeline::load_model(&checkpoint.unwrap_or(cfg.paths.checkpoint.clone()), cfg.eval.use_ema)?;
    let full = pipeline::complete_trajectories(&clip, &drags)?;
    let steps = steps.unwrap_or(cfg.eval.sampling_steps);
    let video = pipeline::generate(&model, &clip, &full, mode, steps, seed)?;
    std::fs::create_dir_all(out)?;
    for i in 0..video.frames() {
        video.save_frame_png(i, out.join(format!("frame_{i:03}.png")))?;
    }
    write_json(&out.join("trajectories.json"), &full)?;
    let cond = clip_condition(&clip, &full, model.dtype(), model.device())?;
    let (_, maps) = model.conditioning(&[&cond], &[mode])?;
    EntityMapSequence::from_tensor(&maps.permute((0, 2, 3, 1))?)?.save_archive(out.join("entity_maps.safetensors.gz"))?;
    println!("{} frames written to {}", video.frames(), out.display());
    Ok(())
}

fn eval(cfg: Config, checkpoint: Option<PathBuf>, modes: Vec<ConditioningMode>, out: Option<PathBuf>) -> Result<()> {
    let ds = Dataset::open(&cfg.paths.data)?;
    let ckpt = checkpoint.unwrap_or(cfg.paths.checkpoint.clone());
    let modes = if modes.is_empty() { cfg.eval.modes.clone() } else { modes };
    let report = pipeline::evaluate_checkpoint(&cfg, &ds, &ckpt, &modes)?;
    let out = out.unwrap_or(cfg.paths.reports.clone());
    std::fs::create_dir_all(&out)?;
    report.save(out.join("eval.json"))?;
    let md = report.to_markdown();
    std::fs::write(out.join("eval.md"), &md)?;
    println!("{md}");
    Ok(())
}

impl Command {
    fn global(&self) -> &Global {
        match self {
            Command::Synth { global, .. }
            | Command::Train { global, .. }
            | Command::Generate { global, .. }
            | Command::Eval { global, .. }
            | Command::Serve { global }
            | Command::Experiment { global, .. }
            | Command::Config { global } => global,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global.clone().merge(cli.command.global()))?;
    match cli.command {
        Command::Synth { clips, seed, out, .. } => synth(cfg, clips, seed, out),
        Command::Train { out, steps, seed, .. } => train(cfg, out, steps, seed),
        Command::Generate {
            scene,
            trajectories,
            checkpoint,
            seed,
            out,
            steps,
            mode,
            ..
        } => generate(cfg, &scene, &trajectories, checkpoint, seed, &out, steps, mode),
        Command::Eval { checkpoint, modes, out, .. } => eval(cfg, checkpoint, modes, out),
        Command::Serve { .. } => tokio::runtime::Runtime::new()?.block_on(service::serve(&cfg)),
        Command::Experiment { out, .. } => {
            let ds = Dataset::open(&cfg.paths.data)?;
            let out = out.unwrap_or(cfg.paths.reports.join("experiment"));
            let report = experiment::run(&cfg, &ds, &out)?;
            println!("{}", report.to_markdown());
            Ok(())
        }
        Command::Config { .. } => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
