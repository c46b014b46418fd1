use candle_core::{DType, Device};
use sha2::{Digest, Sha256};

use super::metrics::{objmc, objmc_sum, psnr};
use super::report::{ClipEval, EntityEval, EvalReport, ModeReport, TrackerGate};
use crate::diffusion::checkpoint::config_hash;
use crate::diffusion::sampler;
use crate::diffusion::{ClipCondition, VideoModel};
use crate::entity_rep::{ConditioningMode, Trajectory};
use crate::error::{Error, Result};
use crate::synth::{track_entities, LabeledClip, TrackState, TrackedTrajectory};
use crate::video::Video;

/// Tracker error ceiling (px) on ground-truth frames.
pub const TRACKER_GATE_PX: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct EvalClip {
    pub clip_id: String,
    pub seed: u64,
    pub clip: LabeledClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub sampling_steps: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sampling_steps: sampler::DEFAULT_SAMPLING_STEPS,
            seed: 0,
        }
    }
}

/// Conditioning for `clip` driven along `trajectories`.
pub fn clip_condition(clip: &LabeledClip, trajectories: &[Trajectory], dtype: DType, device: &Device) -> Result<ClipCondition> {
    let first = clip.video.first_frame_tensor(dtype, device)?;
    ClipCondition::new(first, clip.entities()?, trajectories.to_vec(), clip.spec.frames)
}

fn track(video: &Video, clip: &LabeledClip) -> Result<Vec<TrackedTrajectory>> {
    let ids: Vec<u32> = clip.spec.shapes.iter().map(|s| s.id).collect();
    track_entities(video, &clip.first_masks(), &clip.colors(), &ids)
}

/// Tracker run on the real frames; only frames where an entity is fully
/// visible count, since occluded centroids legitimately drift.
pub fn tracker_gate(clips: &[EvalClip]) -> Result<TrackerGate> {
    let (mut sum, mut n) = (0.0, 0usize);
    for c in clips {
        let tracks = track(&c.clip.video, &c.clip)?;
        for (k, (t, gt)) in tracks.iter().zip(&c.clip.trajectories).enumerate() {
            let valid: Vec<bool> = (0..t.points.len())
                .map(|i| t.is_valid(i) && c.clip.visible_masks[k][i] == c.clip.full_masks[k][i])
                .collect();
            let (s, m) = objmc_sum(&t.points, &gt.points, &valid);
            sum += s;
            n += m;
        }
    }
    let mean = (n > 0).then(|| sum / n as f64);
    Ok(TrackerGate {
        clips: clips.len(),
        mean_objmc: mean,
        threshold: TRACKER_GATE_PX,
        passed: mean.is_some_and(|m| m < TRACKER_GATE_PX),
    })
}

/// Scores a generated video against the clip's ground-truth trajectories.
pub fn score_video(video: &Video, clip: &EvalClip) -> Result<ClipEval> {
    let tracks = track(video, &clip.clip)?;
    let (mut sum, mut n) = (0.0, 0usize);
    let mut entities = Vec::with_capacity(tracks.len());
    for (t, gt) in tracks.iter().zip(&clip.clip.trajectories) {
        let valid: Vec<bool> = (0..t.points.len()).map(|i| t.is_valid(i)).collect();
        let (s, m) = objmc_sum(&t.points, &gt.points, &valid);
        sum += s;
        n += m;
        entities.push(EntityEval {
            entity_id: t.entity_id,
            objmc: objmc(&t.points, &gt.points, &valid).ok(),
            valid_frames: m,
            lost_frames: t.lost_frames(),
            coasted_frames: t.states.iter().filter(|s| **s == TrackState::Coasted).count(),
        });
    }
    let gen = video.to_tensor(DType::F64, &Device::Cpu)?;
    let real = clip.clip.video.to_tensor(DType::F64, &Device::Cpu)?;
    let psnr = psnr(&gen, &real)?.into_iter().map(|v| v.is_finite().then_some(v)).collect();
    Ok(ClipEval {
        clip_id: clip.clip_id.clone(),
        seed: clip.seed,
        objmc: (n > 0).then(|| sum / n as f64),
        entities,
        psnr,
    })
}

/// Per-clip sampling seed; shared across modes so evaluations are paired.
pub fn sample_seed(opts: &EvalOptions, clip: &EvalClip) -> u64 {
    opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ clip.seed
}

pub fn generate_for_clip(model: &VideoModel, clip: &EvalClip, mode: ConditioningMode, opts: &EvalOptions) -> Result<Video> {
    let cond = clip_condition(&clip.clip, &clip.clip.trajectories, model.dtype(), model.device())?;
    let out = sampler::sample(model, &cond, mode, opts.sampling_steps, sample_seed(opts, clip))?;
    Video::from_tensor(&out)
}

pub fn evaluate_model(
    model: &VideoModel,
    clips: &[EvalClip],
    mode: ConditioningMode,
    checkpoint: Option<String>,
    opts: &EvalOptions,
) -> Result<ModeReport> {
    let mut evals = Vec::with_capacity(clips.len());
    for c in clips {
        let video = generate_for_clip(model, c, mode, opts)?;
        evals.push(score_video(&video, c)?);
        log::debug!("{mode}: {} objmc {:?}", c.clip_id, evals.last().and_then(|e| e.objmc));
    }
    Ok(ModeReport::new(mode, checkpoint, evals))
}

/// Stable identifier of an evaluation setup.
pub fn fingerprint(models: &[&VideoModel], clips: &[EvalClip], opts: &EvalOptions) -> String {
    let mut h = Sha256::new();
    for m in models {
        h.update(config_hash(m.config()));
    }
    for c in clips {
        h.update(c.clip_id.as_bytes());
        h.update(c.seed.to_le_bytes());
    }
    h.update(opts.sampling_steps.to_le_bytes());
    h.update(opts.seed.to_le_bytes());
    hex::encode(h.finalize())
}

/// Evaluates each `(mode, model, checkpoint label)` on the same clips.
pub fn evaluate_modes(
    runs: &[(ConditioningMode, &VideoModel, Option<String>)],
    clips: &[EvalClip],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Spec("no evaluation clips".into()));
    }
    let gate = tracker_gate(clips)?;
    if !gate.passed {
        log::warn!("tracker gate failed (mean {:?} px); report is untrusted", gate.mean_objmc);
    }
    let mut modes = Vec::with_capacity(runs.len());
    for (mode, model, ckpt) in runs {
        modes.push(evaluate_model(model, clips, *mode, ckpt.clone(), opts)?);
    }
    let models: Vec<&VideoModel> = runs.iter().map(|r| r.1).collect();
    Ok(EvalReport {
        fingerprint: fingerprint(&models, clips, opts),
        sampling_steps: opts.sampling_steps,
        seed: opts.seed,
        trusted: gate.passed,
        tracker_gate: gate,
        modes,
    })
}
