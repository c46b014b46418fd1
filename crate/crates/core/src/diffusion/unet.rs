//! Factorized spatiotemporal U-Net: per-frame 2D residual blocks followed by
//! a temporal convolution across frames at every resolution level.
//!
//! Video tensors are laid out frame-major as `(B * L) x C x H x W`.

use candle_core::{Module, Tensor};
use candle_nn::{GroupNorm, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Init, Params};

/// Number of resolution levels (full, 1/2, 1/4, 1/8).
pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub norm_groups: usize,
    pub temporal_kernel: usize,
    /// Width of the entity-map stem in the guidance branch.
    pub stem_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mult: vec![1, 1, 2, 2],
            norm_groups: 8,
            temporal_kernel: 3,
            stem_channels: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.len() != LEVELS {
            return Err(Error::Config(format!(
                "channel_mult needs {LEVELS} entries (one per guidance feature), got {}",
                self.channel_mult.len()
            )));
        }
        if self.base_channels == 0 || self.channel_mult.contains(&0) || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config("temporal_kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn time_dim(&self) -> usize {
        self.base_channels * 4
    }
}

/// Sinusoidal embedding of integer timesteps: `len(t) x dim`.
pub fn timestep_embedding(t: &[usize], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((step as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((step as f64 * freq).sin());
        }
        if dim % 2 == 1 {
            v.push(0.0);
        }
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(p: &Params, base: usize, out: usize) -> Result<Self> {
        Ok(Self {
            dim: base,
            fc1: nn::linear(&p.pp("fc1"), base, out, true, Init::FanIn)?,
            fc2: nn::linear(&p.pp("fc2"), out, out, true, Init::FanIn)?,
        })
    }

    /// One row per frame: `(B * frames) x out`.
    pub fn forward(&self, t: &[usize], frames: usize, like: &Tensor) -> Result<Tensor> {
        let e = timestep_embedding(t, self.dim, like)?;
        let e = self.fc2.forward(&nn::silu(&self.fc1.forward(&e)?)?)?;
        let (b, d) = e.dims2()?;
        Ok(e.unsqueeze(1)?.broadcast_as((b, frames, d))?.reshape((b * frames, d))?)
    }
}

pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(p: &Params, c_in: usize, c_out: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: nn::group_norm(&p.pp("norm1"), c_in, groups)?,
            conv1: nn::conv2d(&p.pp("conv1"), c_in, c_out, 3, 1, Init::FanIn)?,
            temb: nn::linear(&p.pp("temb"), time_dim, c_out, true, Init::FanIn)?,
            norm2: nn::group_norm(&p.pp("norm2"), c_out, groups)?,
            conv2: nn::conv2d(&p.pp("conv2"), c_out, c_out, 3, 1, Init::FanIn)?,
            skip: if c_in != c_out {
                Some(nn::conv2d(&p.pp("skip"), c_in, c_out, 1, 1, Init::FanIn)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&nn::silu(&self.norm1.forward(x)?)?)?;
        let t = self.temb.forward(&nn::silu(temb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&nn::silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Residual 1D convolution across frames, applied independently per pixel.
pub struct TemporalMix {
    norm: GroupNorm,
    conv: nn::SeqConv,
}

impl TemporalMix {
    pub fn new(p: &Params, channels: usize, kernel: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: nn::group_norm(&p.pp("norm"), channels, groups)?,
            conv: nn::conv1d(&p.pp("conv"), channels, channels, kernel, Init::Zero)?,
        })
    }

    pub fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (bl, c, h, w) = x.dims4()?;
        let b = bl / frames;
        let y = nn::silu(&self.norm.forward(x)?)?;
        let y = self.conv.forward_steps(&y.reshape((b, frames, c, h * w))?)?;
        let y = y.reshape((bl, c, h, w))?;
        Ok((x + y)?)
    }
}

pub struct EncoderLevel {
    res: ResBlock,
    temporal: TemporalMix,
    down: Option<Conv2d>,
}

/// The contracting half of the U-Net, shared in structure by the denoiser and
/// the guidance branch.
pub struct EncoderPath {
    levels: Vec<EncoderLevel>,
}

impl EncoderPath {
    pub fn new(p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        let chans = cfg.level_channels();
        let mut levels = Vec::with_capacity(LEVELS);
        let mut c_in = cfg.base_channels;
        for (l, &c) in chans.iter().enumerate() {
            let lp = p.pp(format!("level{l}"));
            levels.push(EncoderLevel {
                res: ResBlock::new(&lp.pp("res"), c_in, c, cfg.time_dim(), cfg.norm_groups)?,
                temporal: TemporalMix::new(&lp.pp("temporal"), c, cfg.temporal_kernel, cfg.norm_groups)?,
                down: if l + 1 < LEVELS {
                    Some(nn::conv2d(&lp.pp("down"), c, c, 3, 2, Init::FanIn)?)
                } else {
                    None
                },
            });
            c_in = c;
        }
        Ok(Self { levels })
    }

    /// Returns one feature per level (full resolution first) and the coarsest
    /// activation.
    pub fn forward(&self, x: &Tensor, temb: &Tensor, frames: usize) -> Result<(Vec<Tensor>, Tensor)> {
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(LEVELS);
        for level in &self.levels {
            h = level.res.forward(&h, temb)?;
            h = level.temporal.forward(&h, frames)?;
            skips.push(h.clone());
            if let Some(down) = &level.down {
                h = down.forward(&h)?;
            }
        }
        Ok((skips, h))
    }
}

struct DecoderLevel {
    res: ResBlock,
    temporal: TemporalMix,
    up: Option<Conv2d>,
}

pub struct Denoiser {
    config: DenoiserConfig,
    time: TimeEmbedding,
    conv_in: Conv2d,
    encoder: EncoderPath,
    mid_res: ResBlock,
    mid_temporal: TemporalMix,
    /// Indexed by level; run coarsest first.
    decoder: Vec<DecoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Noised frames plus first-frame conditioning.
pub const DENOISER_IN_CHANNELS: usize = 6;

impl Denoiser {
    pub fn new(p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let chans = cfg.level_channels();
        let (td, g) = (cfg.time_dim(), cfg.norm_groups);
        let mut decoder = Vec::with_capacity(LEVELS);
        for (l, &c) in chans.iter().enumerate() {
            let lp = p.pp(format!("decoder.level{l}"));
            decoder.push(DecoderLevel {
                res: ResBlock::new(&lp.pp("res"), 2 * c, c, td, g)?,
                temporal: TemporalMix::new(&lp.pp("temporal"), c, cfg.temporal_kernel, g)?,
                up: if l > 0 {
                    Some(nn::conv2d(&lp.pp("up"), c, chans[l - 1], 3, 1, Init::FanIn)?)
                } else {
                    None
                },
            });
        }
        let coarsest = chans[LEVELS - 1];
        Ok(Self {
            config: cfg.clone(),
            time: TimeEmbedding::new(&p.pp("time"), cfg.base_channels, td)?,
            conv_in: nn::conv2d(&p.pp("conv_in"), DENOISER_IN_CHANNELS, cfg.base_channels, 3, 1, Init::FanIn)?,
            encoder: EncoderPath::new(&p.pp("encoder"), cfg)?,
            mid_res: ResBlock::new(&p.pp("mid.res"), coarsest, coarsest, td, g)?,
            mid_temporal: TemporalMix::new(&p.pp("mid.temporal"), coarsest, cfg.temporal_kernel, g)?,
            decoder,
            norm_out: nn::group_norm(&p.pp("norm_out"), cfg.base_channels, g)?,
            conv_out: nn::conv2d(&p.pp("conv_out"), cfg.base_channels, 3, 3, 1, Init::Zero)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn time_embedding(&self, t: &[usize], frames: usize, like: &Tensor) -> Result<Tensor> {
        self.time.forward(t, frames, like)
    }

    /// Predicts noise for `x_t` (`BL x 3 x H x W`) given the repeated first
    /// frame. `control`, when present, holds one residual per level that is
    /// added to the matching skip connection before the decoder consumes it.
    pub fn forward(
        &self,
        x_t: &Tensor,
        first_frame: &Tensor,
        temb: &Tensor,
        frames: usize,
        control: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        if let Some(c) = control {
            if c.len() != LEVELS {
                return Err(Error::fault(format!("expected {LEVELS} control features, got {}", c.len())));
            }
        }
        let x = Tensor::cat(&[x_t, first_frame], 1)?;
        let h = self.conv_in.forward(&x)?;
        let (skips, h) = self.encoder.forward(&h, temb, frames)?;
        let mut h = self.mid_res.forward(&h, temb)?;
        h = self.mid_temporal.forward(&h, frames)?;
        for l in (0..LEVELS).rev() {
            let skip = match control {
                Some(c) => (&skips[l] + &c[l])?,
                None => skips[l].clone(),
            };
            let dec = &self.decoder[l];
            h = dec.res.forward(&Tensor::cat(&[&h, &skip], 1)?, temb)?;
            h = dec.temporal.forward(&h, frames)?;
            if let Some(up) = &dec.up {
                let (_, _, hh, ww) = h.dims4()?;
                h = up.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        let h = nn::silu(&self.norm_out.forward(&h)?)?;
        Ok(self.conv_out.forward(&h)?)
    }
}
