//! ControlNet-style guidance branch.
//!
//! Entity maps go through a four-block convolutional stem, are summed with a
//! projection of the noised frames, and run through a separate copy of the
//! denoiser's encoder path. Each level's output passes through a
//! zero-initialized 1x1 convolution before it is added to the denoiser's
//! decoder, so an untrained branch leaves the denoiser untouched.

use candle_core::{Module, Tensor};

use super::unet::{DenoiserConfig, EncoderPath, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Init, Params};

const STEM_BLOCKS: usize = 4;

pub struct GuidanceEncoder {
    stem: Vec<(Conv2d, Conv2d)>,
    noise_proj: Conv2d,
    encoder: EncoderPath,
    inject: Vec<Conv2d>,
}

impl GuidanceEncoder {
    pub fn new(p: &Params, cfg: &DenoiserConfig, entity_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut stem = Vec::with_capacity(STEM_BLOCKS);
        let mut c_in = entity_channels;
        for b in 0..STEM_BLOCKS {
            let c_out = if b + 1 == STEM_BLOCKS { cfg.base_channels } else { cfg.stem_channels };
            let bp = p.pp(format!("stem.block{b}"));
            stem.push((
                nn::conv2d(&bp.pp("conv1"), c_in, c_out, 3, 1, Init::FanIn)?,
                nn::conv2d(&bp.pp("conv2"), c_out, c_out, 3, 1, Init::FanIn)?,
            ));
            c_in = c_out;
        }
        let inject = cfg
            .level_channels()
            .iter()
            .enumerate()
            .map(|(l, &c)| nn::conv2d(&p.pp(format!("inject{l}")), c, c, 1, 1, Init::Zero))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem,
            noise_proj: nn::conv2d(&p.pp("noise_proj"), 3, cfg.base_channels, 3, 1, Init::FanIn)?,
            encoder: EncoderPath::new(&p.pp("encoder"), cfg)?,
            inject,
        })
    }

    pub fn stem(&self, maps: &Tensor) -> Result<Tensor> {
        let mut h = maps.clone();
        for (c1, c2) in &self.stem {
            h = nn::silu(&c2.forward(&c1.forward(&h)?)?)?;
        }
        Ok(h)
    }

    /// Multi-resolution guidance features (full resolution first) from entity
    /// maps `BL x C x H x W` and noised frames `BL x 3 x H x W`.
    pub fn encode(&self, maps: &Tensor, noised: &Tensor, temb: &Tensor, frames: usize) -> Result<Vec<Tensor>> {
        let (bl, _, h, w) = maps.dims4()?;
        let (bl2, _, h2, w2) = noised.dims4()?;
        if (bl, h, w) != (bl2, h2, w2) {
            return Err(Error::fault(format!(
                "entity maps {:?} and noised frames {:?} disagree",
                maps.dims(),
                noised.dims()
            )));
        }
        let r = (self.stem(maps)? + self.noise_proj.forward(noised)?)?;
        let (features, _) = self.encoder.forward(&r, temb, frames)?;
        Ok(features)
    }

    /// Zero-initialized injection convolutions, one per level.
    pub fn inject(&self, features: &[Tensor]) -> Result<Vec<Tensor>> {
        if features.len() != LEVELS {
            return Err(Error::fault(format!("expected {LEVELS} features, got {}", features.len())));
        }
        Ok(features
            .iter()
            .zip(&self.inject)
            .map(|(f, conv)| conv.forward(f))
            .collect::<candle_core::Result<Vec<_>>>()?)
    }
}
