//! Entity representations: pooled first-frame features, enriched by the
//! relation module and painted as disks along each entity's trajectory.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox, Incircle, Mask, Point, Raster};
use crate::nn::{self, Init, Params};
use crate::relation::{EntitySet, RelationConfig, RelationParams};

/// Spatial stride of the backbone feature map.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: u32,
    pub mask: Mask,
    pub bbox: BBox,
    pub incircle: Incircle,
}

impl Entity {
    pub fn from_mask(id: u32, mask: Mask) -> Result<Self> {
        let bbox = geometry::mask_bbox(&mask)?;
        let incircle = geometry::incircle(&mask)?;
        Ok(Self {
            id,
            mask,
            bbox,
            incircle,
        })
    }

    pub fn center(&self) -> Point {
        self.incircle.center
    }

    pub fn radius(&self) -> f64 {
        geometry::effective_radius(self.incircle.radius)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub entity_id: u32,
    pub points: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(entity_id: u32, points: impl IntoIterator<Item = Point>) -> Self {
        Self {
            entity_id,
            points: points.into_iter().map(|p| [p.x, p.y]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Point {
        let [x, y] = self.points[i];
        Point::new(x, y)
    }

    /// Clamp every point into the `[0, width] x [0, height]` frame.
    pub fn clamped(&self, height: usize, width: usize) -> Self {
        Self {
            entity_id: self.entity_id,
            points: self
                .points
                .iter()
                .map(|&[x, y]| [x.clamp(0.0, width as f64), y.clamp(0.0, height as f64)])
                .collect(),
        }
    }

    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Indices into `entities`, ascending by id.
fn id_order(entities: &[Entity]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.sort_by_key(|&k| entities[k].id);
    order
}

fn trajectory_for(trajectories: &[Trajectory], id: u32, frames: usize) -> Result<&Trajectory> {
    let t = trajectories
        .iter()
        .find(|t| t.entity_id == id)
        .ok_or(Error::MissingTrajectory(id))?;
    if t.len() != frames {
        return Err(Error::LengthMismatch {
            what: "trajectory points",
            expected: frames,
            got: t.len(),
        });
    }
    Ok(t)
}

/// Per-pixel owner of every frame: `owners[(i * H + r) * W + c]` is the
/// position (in the caller's `entities` slice) of the entity whose disk
/// covers that pixel last, painting in ascending id order.
pub fn disk_owners(
    entities: &[Entity],
    trajectories: &[Trajectory],
    height: usize,
    width: usize,
    frames: usize,
) -> Result<Vec<Option<usize>>> {
    let mut owners = vec![None; frames * height * width];
    for k in id_order(entities) {
        let e = &entities[k];
        let traj = trajectory_for(trajectories, e.id, frames)?;
        for i in 0..frames {
            let base = i * height * width;
            for (r, c) in geometry::disk_pixels(height, width, traj.point(i), e.radius()) {
                owners[base + r * width + c] = Some(k);
            }
        }
    }
    Ok(owners)
}

/// Per-frame conditioning rasters `E_1..E_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMapSequence {
    pub maps: Vec<Raster>,
}

impl EntityMapSequence {
    pub fn frames(&self) -> usize {
        self.maps.len()
    }

    /// `L x H x W x C` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let first = self.maps.first().ok_or_else(|| Error::fault("empty map sequence"))?;
        let data: Vec<f32> = self.maps.iter().flat_map(|m| m.data.iter().copied()).collect();
        Ok(Tensor::from_vec(
            data,
            (self.maps.len(), first.height, first.width, first.channels),
            device,
        )?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (l, h, w, c) = t.dims4()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let maps = data
            .chunks_exact(h * w * c)
            .map(|chunk| Raster {
                height: h,
                width: w,
                channels: c,
                data: chunk.to_vec(),
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(maps.len(), l);
        Ok(Self { maps })
    }

    /// Gzip-compressed safetensors archive holding a single `maps` array.
    pub fn save_archive(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensor = self.to_tensor(&Device::Cpu)?;
        let tmp = tempfile::NamedTempFile::new()?;
        tensor.save_safetensors("maps", tmp.path())?;
        let raw = std::fs::read(tmp.path())?;
        let out = std::fs::File::create(path)?;
        let mut enc = flate2::write::GzEncoder::new(out, flate2::Compression::default());
        enc.write_all(&raw)?;
        enc.finish()?;
        Ok(())
    }

    pub fn load_archive(path: impl AsRef<Path>) -> Result<Self> {
        let mut raw = Vec::new();
        flate2::read::GzDecoder::new(std::fs::File::open(path)?).read_to_end(&mut raw)?;
        let tensors = candle_core::safetensors::load_buffer(&raw, &Device::Cpu)?;
        let maps = tensors
            .get("maps")
            .ok_or_else(|| Error::fault("archive has no `maps` array"))?;
        Self::from_tensor(maps)
    }
}

/// Paint each entity's row of `values` along its trajectory, ascending id
/// order, later ids overwriting overlaps.
pub fn build_entity_maps(
    entities: &[Entity],
    values: &[Vec<f32>],
    trajectories: &[Trajectory],
    height: usize,
    width: usize,
    frames: usize,
    channels: usize,
) -> Result<EntityMapSequence> {
    if values.len() != entities.len() {
        return Err(Error::LengthMismatch {
            what: "entity values",
            expected: entities.len(),
            got: values.len(),
        });
    }
    let mut maps = vec![Raster::zeros(height, width, channels); frames];
    for k in id_order(entities) {
        let e = &entities[k];
        let traj = trajectory_for(trajectories, e.id, frames)?;
        for (i, map) in maps.iter_mut().enumerate() {
            geometry::paint_disk(map, traj.point(i), e.radius(), &values[k])?;
        }
    }
    Ok(EntityMapSequence { maps })
}

/// Differentiable counterpart of [`build_entity_maps`]: scatters rows of
/// `values` (`N x C`) through precomputed disk owners into `L x C x H x W`.
pub fn entity_maps_tensor(
    owners: &[Option<usize>],
    values: &Tensor,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (n, c) = values.dims2()?;
    let px = frames * height * width;
    if owners.len() != px {
        return Err(Error::LengthMismatch {
            what: "disk owners",
            expected: px,
            got: owners.len(),
        });
    }
    if n == 0 {
        return Ok(Tensor::zeros((frames, c, height, width), values.dtype(), values.device())?);
    }
    let mut onehot = vec![0f32; px * n];
    for (i, owner) in owners.iter().enumerate() {
        if let Some(k) = owner {
            onehot[i * n + k] = 1.0;
        }
    }
    let onehot = Tensor::from_vec(onehot, (px, n), values.device())?.to_dtype(values.dtype())?;
    let maps = onehot.matmul(values)?.reshape((frames, height, width, c))?;
    Ok(maps.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Small strided convolutional encoder producing per-cell features at 1/4
/// resolution.
pub struct Backbone {
    conv1: nn::Conv2d,
    conv2: nn::Conv2d,
    conv3: nn::Conv2d,
}

impl Backbone {
    pub fn new(p: &Params, feature_dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: nn::conv2d(&p.pp("conv1"), 3, 32, 3, 1, Init::FanIn)?,
            conv2: nn::conv2d(&p.pp("conv2"), 32, 64, 3, 2, Init::FanIn)?,
            conv3: nn::conv2d(&p.pp("conv3"), 64, feature_dim, 3, 2, Init::FanIn)?,
        })
    }

    /// `B x 3 x H x W` in `[-1, 1]` to `B x C x H/4 x W/4`.
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let x = nn::silu(&self.conv1.forward(frames)?)?;
        let x = nn::silu(&self.conv2.forward(&x)?)?;
        Ok(self.conv3.forward(&x)?)
    }
}

/// Row-normalized pooling weights `N x (h * w)` over the feature grid.
pub fn pooling_weights(entities: &[Entity], feat_h: usize, feat_w: usize) -> Vec<f32> {
    let mut weights = vec![0f32; entities.len() * feat_h * feat_w];
    for (k, e) in entities.iter().enumerate() {
        let cells = e.mask.downsample_any(FEATURE_STRIDE);
        let mut picked: Vec<usize> = cells
            .foreground()
            .filter(|&(r, c)| r < feat_h && c < feat_w)
            .map(|(r, c)| r * feat_w + c)
            .collect();
        if picked.is_empty() {
            // Fall back to the cell under the incircle center.
            let r = ((e.center().y / FEATURE_STRIDE as f64) as usize).min(feat_h - 1);
            let c = ((e.center().x / FEATURE_STRIDE as f64) as usize).min(feat_w - 1);
            picked.push(r * feat_w + c);
        }
        let w = 1.0 / picked.len() as f32;
        for cell in picked {
            weights[k * feat_h * feat_w + cell] = w;
        }
    }
    weights
}

/// Mean feature vector over each entity's (downsampled) mask: `N x C`.
pub fn pool_entity_embeddings(features: &Tensor, entities: &[Entity]) -> Result<Tensor> {
    let features = match features.rank() {
        4 => features.squeeze(0)?,
        _ => features.clone(),
    };
    let (c, h, w) = features.dims3()?;
    let n = entities.len();
    let p = Tensor::from_vec(pooling_weights(entities, h, w), (n, h * w), features.device())?
        .to_dtype(features.dtype())?;
    let grid = features.reshape((c, h * w))?.t()?.contiguous()?;
    Ok(p.matmul(&grid)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Relation-enriched entity embeddings.
    Full,
    /// Relation bypassed: `V_r = f0(V)`.
    NoPosition,
    /// A single learned vector painted for every entity.
    NoEntity,
    /// All-zero maps.
    None,
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConditioningMode::Full => "full",
            ConditioningMode::NoPosition => "no_position",
            ConditioningMode::NoEntity => "no_entity",
            ConditioningMode::None => "none",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_position" | "entity_only" => Ok(Self::NoPosition),
            "no_entity" => Ok(Self::NoEntity),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown conditioning mode `{other}`"))),
        }
    }
}

/// Backbone + relation module + the learned stand-in vector for the
/// `no_entity` ablation.
pub struct EntityEncoder {
    pub backbone: Backbone,
    pub relation: RelationParams,
    null_entity: Tensor,
}

impl EntityEncoder {
    pub fn new(p: &Params, config: &RelationConfig) -> Result<Self> {
        let dv = config.feature_dim;
        Ok(Self {
            backbone: Backbone::new(&p.pp("backbone"), dv)?,
            relation: RelationParams::new(&p.pp("relation"), config)?,
            null_entity: p.uniform("null_entity", &[1, dv], 1.0 / (dv as f64).sqrt())?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.relation.config().feature_dim
    }

    /// Painted values per entity (`N x C`) for one first frame (`1 x 3 x H x W`).
    pub fn embeddings(&self, first_frame: &Tensor, entities: &[Entity], mode: ConditioningMode) -> Result<Tensor> {
        let (_, _, h, w) = first_frame.dims4()?;
        let n = entities.len();
        let dv = self.feature_dim();
        if n == 0 || mode == ConditioningMode::None {
            return Ok(Tensor::zeros((n, dv), first_frame.dtype(), first_frame.device())?);
        }
        if mode == ConditioningMode::NoEntity {
            return Ok(self.null_entity.broadcast_as((n, dv))?.contiguous()?);
        }
        let features = self.backbone.forward(first_frame)?;
        let pooled = pool_entity_embeddings(&features, entities)?;
        let set = EntitySet::new(pooled, entities.iter().map(|e| e.bbox).collect())?;
        match mode {
            ConditioningMode::Full => self.relation.forward(&set, geometry::image_diagonal(h, w)),
            _ => self.relation.forward_without_relation(&set),
        }
    }

    /// Entity maps `L x C x H x W` for one clip.
    pub fn maps(
        &self,
        first_frame: &Tensor,
        entities: &[Entity],
        owners: &[Option<usize>],
        frames: usize,
        mode: ConditioningMode,
    ) -> Result<Tensor> {
        let (_, _, h, w) = first_frame.dims4()?;
        if mode == ConditioningMode::None {
            return Ok(Tensor::zeros(
                (frames, self.feature_dim(), h, w),
                first_frame.dtype(),
                first_frame.device(),
            )?);
        }
        let values = self.embeddings(first_frame, entities, mode)?;
        entity_maps_tensor(owners, &values, frames, h, w)
    }
}
