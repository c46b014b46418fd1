use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{ClipCondition, VideoModel};
use crate::entity_rep::ConditioningMode;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLING_STEPS: usize = 50;

/// Evenly spaced timesteps in descending order, always ending at 0.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::Spec(format!("sampling steps must lie in 1..={timesteps}, got {steps}")));
    }
    let mut ts: Vec<usize> = (0..steps).map(|i| i * timesteps / steps).collect();
    ts.reverse();
    Ok(ts)
}

/// Deterministic DDIM sampling (eta = 0) from seeded Gaussian noise.
/// Returns `L x 3 x H x W` clamped to `[-1, 1]`.
pub fn sample(
    model: &VideoModel,
    condition: &ClipCondition,
    mode: ConditioningMode,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let cfg = model.config();
    let schedule = model.schedule();
    let ts = ddim_timesteps(schedule.timesteps(), steps)?;
    let (first, maps) = model.conditioning(&[condition], &[mode])?;
    let (first, maps) = (first.detach(), maps.detach());
    let shape = (cfg.frames, 3, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.frames * 3 * cfg.height * cfg.width;
    let init: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut x = Tensor::from_vec(init, shape, model.device())?.to_dtype(model.dtype())?;
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_cumprod(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&tp| schedule.alpha_cumprod(tp));
        let eps = model.predict_noise(&x, &first, Some(&maps), &[t])?.detach();
        let x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-1f32, 1f32)?;
        // re-derive the noise so it agrees with the clamped estimate
        let eps = ((&x - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
        x = ((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?.detach();
    }
    Ok(x.clamp(-1f32, 1f32)?)
}
