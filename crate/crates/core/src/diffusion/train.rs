use std::path::PathBuf;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::masked_loss;
use super::model::{TrainingClip, VideoModel};
use crate::entity_rep::ConditioningMode;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Loss weight outside entity disks; 1.0 disables the mask.
    pub lambda_bg: f64,
    pub ema_decay: f64,
    /// Probability of replacing a clip's conditioning with zero maps.
    pub p_uncond: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub mode: ConditioningMode,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 4,
            learning_rate: 2e-4,
            lambda_bg: 0.1,
            ema_decay: 0.999,
            p_uncond: 0.1,
            grad_clip: 1.0,
            mode: ConditioningMode::Full,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_bg) {
            return Err(Error::Config("lambda_bg must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config("p_uncond must lie in [0, 1]".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Exponential moving average of every parameter.
pub struct Ema {
    decay: f64,
    shadows: Vec<(String, Tensor)>,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64) -> Result<Self> {
        let shadows = store
            .named_vars()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().detach().copy()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { decay, shadows })
    }

    /// Decay warms up as `(1 + step) / (10 + step)` until it reaches the
    /// configured value.
    pub fn update(&mut self, store: &ParamStore, step: usize) -> Result<()> {
        let d = self.decay.min((1 + step) as f64 / (10 + step) as f64);
        for (name, shadow) in &mut self.shadows {
            let v = store
                .get(name)
                .ok_or_else(|| Error::fault(format!("parameter `{name}` vanished")))?;
            *shadow = ((&*shadow * d)? + (v.as_tensor().detach() * (1.0 - d))?)?.detach();
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.shadows
    }
}

#[derive(Serialize)]
struct ParamStat {
    name: String,
    norm: f64,
    finite: bool,
}

#[derive(Serialize)]
struct Diagnostics {
    step: usize,
    loss: f64,
    timesteps: Vec<usize>,
    modes: Vec<ConditioningMode>,
    params: Vec<ParamStat>,
}

pub struct Trainer {
    model: VideoModel,
    config: TrainConfig,
    optimizer: AdamW,
    ema: Ema,
    rng: ChaCha8Rng,
    step: usize,
    diagnostics_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: VideoModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vars = model.store().named_vars().into_iter().map(|(_, v)| v).collect();
        let optimizer = AdamW::new(
            vars,
            ParamsAdamW {
                lr: config.learning_rate,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        let ema = Ema::new(model.store(), config.ema_decay)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            optimizer,
            ema,
            step: 0,
            diagnostics_dir: None,
        })
    }

    /// Where to write a diagnostics dump if the loss goes non-finite.
    pub fn with_diagnostics_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.diagnostics_dir = Some(dir.into());
        self
    }

    /// Restart the step counter, e.g. when resuming from a checkpoint.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn model(&self) -> &VideoModel {
        &self.model
    }

    pub fn ema(&self) -> &Ema {
        &self.ema
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_model(self) -> VideoModel {
        self.model
    }

    fn noise(&mut self, n: usize, shape: &[usize], like: &Tensor) -> Result<Tensor> {
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[&TrainingClip]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::fault("empty batch"));
        }
        let big_t = self.model.schedule().timesteps();
        let mut ts = Vec::with_capacity(batch.len());
        let mut modes = Vec::with_capacity(batch.len());
        for _ in batch {
            ts.push(self.rng.random_range(0..big_t));
            let drop = self.rng.random::<f64>() < self.config.p_uncond;
            modes.push(if drop { ConditioningMode::None } else { self.config.mode });
        }
        let frames: Vec<&Tensor> = batch.iter().map(|c| &c.frames).collect();
        let x0 = Tensor::cat(&frames, 0)?.to_dtype(self.model.dtype())?;
        let noise = self.noise(x0.elem_count(), x0.dims(), &x0)?;
        let x_t = self.model.schedule().add_noise(&x0, &noise, &ts)?;
        let conds: Vec<_> = batch.iter().map(|c| &c.condition).collect();
        let (first, maps) = self.model.conditioning(&conds, &modes)?;
        let predicted = self.model.predict_noise(&x_t, &first, Some(&maps), &ts)?;
        let mask = self.model.loss_masks(&conds, self.config.lambda_bg, &x0)?;
        let loss = masked_loss(&noise, &predicted, &mask)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            self.dump_diagnostics(value, ts, modes)?;
            return Err(Error::fault(format!("non-finite loss {value} at step {}", self.step)));
        }
        let mut grads = loss.backward()?;
        self.clip_gradients(&mut grads)?;
        self.optimizer.step(&grads)?;
        self.step += 1;
        self.ema.update(self.model.store(), self.step)?;
        Ok(value)
    }

    fn clip_gradients(&self, grads: &mut GradStore) -> Result<()> {
        if self.config.grad_clip <= 0.0 {
            return Ok(());
        }
        let vars = self.model.store().named_vars();
        let mut sq = 0f64;
        for (_, v) in &vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if norm > self.config.grad_clip {
            let scale = self.config.grad_clip / norm;
            for (_, v) in &vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(())
    }

    fn dump_diagnostics(&self, loss: f64, timesteps: Vec<usize>, modes: Vec<ConditioningMode>) -> Result<()> {
        let Some(dir) = &self.diagnostics_dir else {
            log::error!("non-finite loss at step {}; no diagnostics directory set", self.step);
            return Ok(());
        };
        let params = self
            .model
            .store()
            .named_vars()
            .into_iter()
            .map(|(name, v)| {
                let norm = v
                    .as_tensor()
                    .sqr()
                    .and_then(|t| t.sum_all())
                    .and_then(|t| t.to_dtype(DType::F64))
                    .and_then(|t| t.to_scalar::<f64>())
                    .map(f64::sqrt)
                    .unwrap_or(f64::NAN);
                ParamStat {
                    name,
                    norm,
                    finite: norm.is_finite(),
                }
            })
            .collect();
        let diag = Diagnostics {
            step: self.step,
            loss,
            timesteps,
            modes,
            params,
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("diagnostics_step{}.json", self.step));
        // serde_json writes NaN as null, which is what we want here
        std::fs::write(&path, serde_json::to_vec_pretty(&diag)?)?;
        log::error!("wrote diagnostics to {}", path.display());
        Ok(())
    }

    /// Draws a batch of clip indices uniformly with replacement.
    pub fn sample_batch(&mut self, n_clips: usize) -> Vec<usize> {
        (0..self.config.batch_size).map(|_| self.rng.random_range(0..n_clips)).collect()
    }

    /// Runs `steps` optimizer steps over `data`, calling `on_step` after
    /// each one with the step number and loss.
    pub fn fit(
        &mut self,
        data: &[TrainingClip],
        steps: usize,
        mut on_step: impl FnMut(&Trainer, usize, f64) -> Result<()>,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Spec("no training clips".into()));
        }
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = self.sample_batch(data.len());
            let batch: Vec<&TrainingClip> = idx.iter().map(|&i| &data[i]).collect();
            let loss = self.train_step(&batch)?;
            losses.push(loss);
            on_step(self, self.step, loss)?;
        }
        Ok(losses)
    }
}
