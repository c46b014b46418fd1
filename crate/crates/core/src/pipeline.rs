//! End-to-end drivers shared by the CLI, the experiment runner and the
//! service: dataset loading, training runs and checkpoint evaluation.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::diffusion::checkpoint::{self, config_hash, Weights};
use crate::diffusion::sampler;
use crate::diffusion::{ModelConfig, TrainConfig, Trainer, TrainingClip, VideoModel};
use crate::entity_rep::{ConditioningMode, Trajectory};
use crate::error::{Error, Result};
use crate::evalkit::evaluate::clip_condition;
use crate::evalkit::{evaluate_modes, EvalClip, EvalOptions, EvalReport};
use crate::geometry::resample_polyline;
use crate::synth::{Dataset, LabeledClip, Split};
use crate::video::Video;

pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn dtype() -> DType {
    DType::F32
}

pub fn device() -> Device {
    Device::Cpu
}

pub fn load_split(ds: &Dataset, split: Split, limit: usize) -> Result<Vec<EvalClip>> {
    let entries: Vec<_> = ds.split(split).collect();
    let n = if limit == 0 { entries.len() } else { limit.min(entries.len()) };
    entries[..n]
        .iter()
        .map(|e| {
            Ok(EvalClip {
                clip_id: e.clip_id.clone(),
                seed: e.seed,
                clip: ds.load(e)?,
            })
        })
        .collect()
}

fn training_clip(clip: &LabeledClip) -> Result<TrainingClip> {
    TrainingClip::new(&clip.video, clip.entities()?, clip.trajectories.clone(), dtype(), &device())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub steps: usize,
    /// Mean loss over the first and last `log_every` steps of this run.
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub seconds: f64,
    /// True when an existing finished checkpoint was reused.
    pub reused: bool,
}

fn finished(dir: &Path, model: &ModelConfig, train: &TrainConfig) -> bool {
    match checkpoint::read_manifest(dir) {
        Ok(m) => m.step >= train.steps && m.config_hash == config_hash(model) && m.training.as_ref() == Some(train),
        Err(_) => false,
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Trains a model on the train split of `ds` and writes a checkpoint into
/// `out`. A finished checkpoint with the same configs is reused as is.
pub fn train(ds: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    if finished(out, model_cfg, train_cfg) {
        log::info!("reusing finished checkpoint in {}", out.display());
        return Ok(TrainSummary {
            dir: out.to_path_buf(),
            steps: train_cfg.steps,
            first_loss: None,
            last_loss: None,
            seconds: 0.0,
            reused: true,
        });
    }
    let s = &ds.config.scene;
    if (s.frames, s.height, s.width) != (model_cfg.frames, model_cfg.height, model_cfg.width) {
        return Err(Error::Config(format!(
            "dataset clips are {}x{}x{} but the model expects {}x{}x{}",
            s.frames, s.height, s.width, model_cfg.frames, model_cfg.height, model_cfg.width
        )));
    }
    let clips: Vec<LabeledClip> = ds.split(Split::Train).map(|e| ds.load(e)).collect::<Result<_>>()?;
    if clips.is_empty() {
        return Err(Error::Spec("dataset has no training clips".into()));
    }
    std::fs::create_dir_all(out)?;
    let model = VideoModel::new(model_cfg, train_cfg.seed, dtype(), &device())?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?.with_diagnostics_dir(out);
    let mut log_file = std::fs::File::create(out.join(TRAIN_LOG))?;
    let start = Instant::now();
    let window = train_cfg.log_every.max(1);
    let mut losses = Vec::with_capacity(train_cfg.steps);
    for _ in 0..train_cfg.steps {
        let idx = trainer.sample_batch(clips.len());
        let batch: Vec<TrainingClip> = idx.iter().map(|&i| training_clip(&clips[i])).collect::<Result<_>>()?;
        let refs: Vec<&TrainingClip> = batch.iter().collect();
        let loss = trainer.train_step(&refs)?;
        losses.push(loss);
        let step = trainer.step();
        if step % window == 0 {
            let line = LogLine {
                step,
                loss: mean(&losses[losses.len().saturating_sub(window)..]).unwrap_or(loss),
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!("step {step} loss {:.5} ({:.0}s)", line.loss, line.seconds);
            writeln!(log_file, "{}", serde_json::to_string(&line)?)?;
        }
        if train_cfg.checkpoint_every > 0 && step % train_cfg.checkpoint_every == 0 && step < train_cfg.steps {
            checkpoint::save(out, trainer.model(), Some(trainer.ema()), step, Some(train_cfg))?;
        }
    }
    checkpoint::save(out, trainer.model(), Some(trainer.ema()), trainer.step(), Some(train_cfg))?;
    let k = window.min(losses.len());
    Ok(TrainSummary {
        dir: out.to_path_buf(),
        steps: train_cfg.steps,
        first_loss: mean(&losses[..k]),
        last_loss: mean(&losses[losses.len() - k..]),
        seconds: start.elapsed().as_secs_f64(),
        reused: false,
    })
}

pub fn load_model(dir: &Path, use_ema: bool) -> Result<VideoModel> {
    let weights = if use_ema { Weights::PreferEma } else { Weights::Raw };
    Ok(checkpoint::load(dir, weights, dtype(), &device())?.0)
}

/// Evaluates one checkpoint in every configured mode.
pub fn evaluate_checkpoint(cfg: &Config, ds: &Dataset, ckpt: &Path, modes: &[ConditioningMode]) -> Result<EvalReport> {
    let model = load_model(ckpt, cfg.eval.use_ema)?;
    let clips = load_split(ds, cfg.eval.split, cfg.eval.clips)?;
    let opts = EvalOptions {
        sampling_steps: cfg.eval.sampling_steps,
        seed: cfg.eval.seed,
    };
    let label = Some(ckpt.display().to_string());
    let runs: Vec<_> = modes.iter().map(|&m| (m, &model, label.clone())).collect();
    evaluate_modes(&runs, &clips, &opts)
}

/// One trajectory of exactly `frames` points per entity of `clip`.
/// Drags with a different point count are resampled by arc length;
/// entities without a drag stay at their incircle center.
pub fn complete_trajectories(clip: &LabeledClip, drags: &[Trajectory]) -> Result<Vec<Trajectory>> {
    let frames = clip.spec.frames;
    let entities = clip.entities()?;
    let mut seen = Vec::new();
    for d in drags {
        if !entities.iter().any(|e| e.id == d.entity_id) {
            return Err(Error::Spec(format!("scene has no visible entity {}", d.entity_id)));
        }
        if seen.contains(&d.entity_id) {
            return Err(Error::Spec(format!("entity {} has two trajectories", d.entity_id)));
        }
        seen.push(d.entity_id);
    }
    entities
        .iter()
        .map(|e| match drags.iter().find(|d| d.entity_id == e.id) {
            Some(d) if d.len() == frames && d.points.iter().flatten().all(|v| v.is_finite()) => Ok(d.clone()),
            Some(d) => Ok(Trajectory {
                entity_id: e.id,
                points: resample_polyline(&d.points, frames)?,
            }),
            None => Ok(Trajectory::new(e.id, std::iter::repeat_n(e.center(), frames))),
        })
        .collect()
}

/// Samples a clip starting from `clip`'s first frame and following
/// `trajectories` (one per entity, `frames` points each).
pub fn generate(
    model: &VideoModel,
    clip: &LabeledClip,
    trajectories: &[Trajectory],
    mode: ConditioningMode,
    steps: usize,
    seed: u64,
) -> Result<Video> {
    let cond = clip_condition(clip, trajectories, model.dtype(), model.device())?;
    Video::from_tensor(&sampler::sample(model, &cond, mode, steps, seed)?)
}
