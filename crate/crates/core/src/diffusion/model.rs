use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::guidance::GuidanceEncoder;
use super::loss::loss_mask;
use super::schedule::NoiseSchedule;
use super::unet::{Denoiser, DenoiserConfig, LEVELS};
use crate::entity_rep::{self, ConditioningMode, Entity, EntityEncoder, Trajectory};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::relation::RelationConfig;
use crate::video::Video;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub timesteps: usize,
    pub denoiser: DenoiserConfig,
    pub relation: RelationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 8,
            timesteps: 256,
            denoiser: DenoiserConfig::default(),
            relation: RelationConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest practical model (8 base channels, 16 timesteps), for tests
    /// and demos.
    pub fn micro(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            frames,
            timesteps: 16,
            denoiser: DenoiserConfig {
                base_channels: 8,
                channel_mult: vec![1, 1, 2, 2],
                norm_groups: 4,
                temporal_kernel: 3,
                stem_channels: 4,
            },
            relation: RelationConfig {
                n_kernels_rho: 4,
                n_kernels_theta: 4,
                heads: 2,
                feature_dim: 8,
                qk_dim: 4,
                ..RelationConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let factor = 1 << (LEVELS - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a positive multiple of {factor}",
                self.height, self.width
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("timesteps must be at least 2".into()));
        }
        self.denoiser.validate()?;
        self.relation.validate()
    }
}

/// Everything the model needs from one scene besides the noised frames.
#[derive(Debug, Clone)]
pub struct ClipCondition {
    /// `1 x 3 x H x W` in `[-1, 1]`.
    pub first_frame: Tensor,
    pub entities: Vec<Entity>,
    pub trajectories: Vec<Trajectory>,
    pub owners: Vec<Option<usize>>,
    pub frames: usize,
}

impl ClipCondition {
    pub fn new(first_frame: Tensor, entities: Vec<Entity>, trajectories: Vec<Trajectory>, frames: usize) -> Result<Self> {
        let (one, c, h, w) = first_frame.dims4()?;
        if one != 1 || c != 3 {
            return Err(Error::fault(format!("first frame must be 1x3xHxW, got {:?}", first_frame.dims())));
        }
        for e in &entities {
            if e.mask.height() != h || e.mask.width() != w {
                return Err(Error::Spec(format!("mask of entity {} does not match the frame size", e.id)));
            }
        }
        let trajectories: Vec<Trajectory> = trajectories.iter().map(|t| t.clamped(h, w)).collect();
        let owners = entity_rep::disk_owners(&entities, &trajectories, h, w, frames)?;
        Ok(Self {
            first_frame,
            entities,
            trajectories,
            owners,
            frames,
        })
    }

    pub fn height(&self) -> usize {
        self.first_frame.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.first_frame.dims()[3]
    }
}

/// A clip with its target frames, ready for training.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    /// `L x 3 x H x W` in `[-1, 1]`.
    pub frames: Tensor,
    pub condition: ClipCondition,
}

impl TrainingClip {
    pub fn new(video: &Video, entities: Vec<Entity>, trajectories: Vec<Trajectory>, dtype: DType, device: &Device) -> Result<Self> {
        let frames = video.to_tensor(dtype, device)?;
        let first = frames.narrow(0, 0, 1)?;
        Ok(Self {
            condition: ClipCondition::new(first, entities, trajectories, video.frames())?,
            frames,
        })
    }
}

pub struct VideoModel {
    config: ModelConfig,
    store: ParamStore,
    schedule: NoiseSchedule,
    pub entity: EntityEncoder,
    pub denoiser: Denoiser,
    pub guidance: GuidanceEncoder,
}

impl VideoModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype, device.clone());
        let root = store.root();
        let entity = EntityEncoder::new(&root.pp("entity"), &config.relation)?;
        let denoiser = Denoiser::new(&root.pp("denoiser"), &config.denoiser)?;
        let guidance = GuidanceEncoder::new(&root.pp("guidance"), &config.denoiser, config.relation.feature_dim)?;
        Ok(Self {
            config: config.clone(),
            schedule: NoiseSchedule::cosine(config.timesteps)?,
            store,
            entity,
            denoiser,
            guidance,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn check_condition(&self, c: &ClipCondition) -> Result<()> {
        let cfg = &self.config;
        if (c.frames, c.height(), c.width()) != (cfg.frames, cfg.height, cfg.width) {
            return Err(Error::Spec(format!(
                "clip is {}x{}x{} but the model expects {}x{}x{}",
                c.frames,
                c.height(),
                c.width(),
                cfg.frames,
                cfg.height,
                cfg.width
            )));
        }
        Ok(())
    }

    /// Repeated first frames and entity maps, both `(B * L) x C x H x W`.
    pub fn conditioning(&self, clips: &[&ClipCondition], modes: &[ConditioningMode]) -> Result<(Tensor, Tensor)> {
        if clips.len() != modes.len() || clips.is_empty() {
            return Err(Error::fault("need one conditioning mode per clip"));
        }
        let l = self.config.frames;
        let mut firsts = Vec::with_capacity(clips.len());
        let mut maps = Vec::with_capacity(clips.len());
        for (c, &mode) in clips.iter().zip(modes) {
            self.check_condition(c)?;
            let first = c.first_frame.to_dtype(self.dtype())?;
            let (_, ch, h, w) = first.dims4()?;
            firsts.push(first.broadcast_as((l, ch, h, w))?.contiguous()?);
            maps.push(self.entity.maps(&first, &c.entities, &c.owners, l, mode)?);
        }
        Ok((Tensor::cat(&firsts, 0)?, Tensor::cat(&maps, 0)?))
    }

    /// Loss weights for a batch, `(B * L) x 1 x H x W`.
    pub fn loss_masks(&self, clips: &[&ClipCondition], lambda_bg: f64, like: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let masks = clips
            .iter()
            .map(|c| loss_mask(&c.owners, cfg.frames, cfg.height, cfg.width, lambda_bg, like))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&masks, 0)?)
    }

    /// Guidance features for `maps` and noised frames, after injection.
    pub fn control(&self, maps: &Tensor, x_t: &Tensor, temb: &Tensor) -> Result<Vec<Tensor>> {
        let features = self.guidance.encode(maps, x_t, temb, self.config.frames)?;
        self.guidance.inject(&features)
    }

    /// Noise prediction for `x_t` (`(B * L) x 3 x H x W`) with one timestep
    /// per clip. `maps = None` runs the bare denoiser.
    pub fn predict_noise(&self, x_t: &Tensor, first: &Tensor, maps: Option<&Tensor>, t: &[usize]) -> Result<Tensor> {
        let l = self.config.frames;
        let temb = self.denoiser.time_embedding(t, l, x_t)?;
        let control = match maps {
            Some(m) => Some(self.control(m, x_t, &temb)?),
            None => None,
        };
        self.denoiser.forward(x_t, first, &temb, l, control.as_deref())
    }
}
