//! On-disk dataset: `clips/<id>.safetensors` (frames, masks, trajectories),
//! `clips/<id>.json` (scene spec), `index.jsonl` and `dataset.json`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{generate_clip, LabeledClip};
use super::scene::{sample_scene, PathFamily, SceneSamplerConfig, SceneSpec, ShapeKind};
use crate::entity_rep::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::{Mask, Point};
use crate::video::Video;

pub const INDEX_FILE: &str = "index.jsonl";
pub const CONFIG_FILE: &str = "dataset.json";
const CLIP_DIR: &str = "clips";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    pub seed: u64,
    pub scene: SceneSamplerConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_clips: 2000,
            val_clips: 100,
            test_clips: 100,
            seed: 0,
            scene: SceneSamplerConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.train_clips + self.val_clips + self.test_clips
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train_clips {
            Split::Train
        } else if index < self.train_clips + self.val_clips {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Clip seeds occupy a contiguous range per master seed; the split is a
    /// sub-range of it.
    pub fn clip_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_000).wrapping_add(index as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySummary {
    pub id: u32,
    pub kind: ShapeKind,
    pub color: [u8; 3],
    pub family: PathFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub clip_id: String,
    /// Relative to the dataset root.
    pub path: String,
    pub entities: Vec<EntitySummary>,
    pub seed: u64,
    pub split: Split,
}

fn clip_id(index: usize) -> String {
    format!("clip_{index:06}")
}

fn entry_for(cfg: &DatasetConfig, index: usize, spec: &SceneSpec) -> IndexEntry {
    let id = clip_id(index);
    IndexEntry {
        path: format!("{CLIP_DIR}/{id}.safetensors"),
        clip_id: id,
        entities: spec
            .shapes
            .iter()
            .map(|s| EntitySummary {
                id: s.id,
                kind: s.kind,
                color: s.color,
                family: s.motion.family(),
            })
            .collect(),
        seed: cfg.clip_seed(index),
        split: cfg.split_of(index),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}

fn masks_tensor(masks: &[Vec<Mask>], l: usize, h: usize, w: usize) -> Result<Tensor> {
    let n = masks.len();
    let mut v = Vec::with_capacity(n * l * h * w);
    for per_frame in masks {
        for m in per_frame {
            v.extend(m.bits().iter().map(|&b| b as u8));
        }
    }
    Ok(Tensor::from_vec(v, (n, l, h, w), &Device::Cpu)?)
}

fn masks_from_tensor(t: &Tensor) -> Result<Vec<Vec<Mask>>> {
    let (n, l, h, w) = t.dims4()?;
    let v = t.flatten_all()?.to_vec1::<u8>()?;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut frames = Vec::with_capacity(l);
        for i in 0..l {
            let o = (k * l + i) * h * w;
            frames.push(Mask::from_bits(h, w, v[o..o + h * w].iter().map(|&b| b != 0).collect())?);
        }
        out.push(frames);
    }
    Ok(out)
}

/// Writes one clip (arrays + spec sidecar) with temp-then-rename.
pub fn save_clip(clip: &LabeledClip, arrays_path: &Path) -> Result<()> {
    let spec = &clip.spec;
    let (l, h, w) = (spec.frames, spec.height, spec.width);
    let n = spec.shapes.len();
    let mut tensors = HashMap::new();
    tensors.insert(
        "frames".to_string(),
        Tensor::from_vec(clip.video.data().to_vec(), (l, h, w, 3), &Device::Cpu)?,
    );
    if n > 0 {
        tensors.insert("full_masks".to_string(), masks_tensor(&clip.full_masks, l, h, w)?);
        tensors.insert("visible_masks".to_string(), masks_tensor(&clip.visible_masks, l, h, w)?);
        let traj: Vec<f64> = clip.trajectories.iter().flat_map(|t| t.points.iter().flatten().copied()).collect();
        tensors.insert("trajectories".to_string(), Tensor::from_vec(traj, (n, l, 2), &Device::Cpu)?);
    }
    let tmp = tmp_path(arrays_path);
    candle_core::safetensors::save(&tensors, &tmp)?;
    std::fs::rename(&tmp, arrays_path)?;
    write_atomic(&arrays_path.with_extension("json"), &serde_json::to_vec_pretty(spec)?)?;
    Ok(())
}

pub fn load_clip(arrays_path: &Path) -> Result<LabeledClip> {
    let spec: SceneSpec = serde_json::from_slice(&std::fs::read(arrays_path.with_extension("json"))?)?;
    let t = candle_core::safetensors::load(arrays_path, &Device::Cpu)?;
    let get = |k: &str| t.get(k).ok_or_else(|| Error::Spec(format!("{} lacks `{k}`", arrays_path.display())));
    let frames = get("frames")?;
    let (l, h, w, _) = frames.dims4()?;
    if (l, h, w) != (spec.frames, spec.height, spec.width) {
        return Err(Error::Spec(format!("{} disagrees with its spec", arrays_path.display())));
    }
    let video = Video::new(l, h, w, frames.flatten_all()?.to_vec1::<u8>()?)?;
    let (full_masks, visible_masks, trajectories) = if spec.shapes.is_empty() {
        (vec![], vec![], vec![])
    } else {
        let tr = get("trajectories")?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let trajectories = spec
            .shapes
            .iter()
            .zip(tr)
            .map(|(s, pts)| Trajectory::new(s.id, pts.into_iter().map(|p| Point::new(p[0], p[1]))))
            .collect();
        (masks_from_tensor(get("full_masks")?)?, masks_from_tensor(get("visible_masks")?)?, trajectories)
    };
    Ok(LabeledClip {
        spec,
        video,
        full_masks,
        visible_masks,
        trajectories,
    })
}

/// Summary of a [`generate_dataset`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateStats {
    pub written: usize,
    pub reused: usize,
}

/// Generates every clip of `cfg` under `root`. Clips already on disk with a
/// matching spec are kept, so an interrupted run can be resumed.
pub fn generate_dataset(cfg: &DatasetConfig, root: impl AsRef<Path>) -> Result<GenerateStats> {
    cfg.scene.validate()?;
    let root = root.as_ref();
    std::fs::create_dir_all(root.join(CLIP_DIR))?;
    if let Ok(bytes) = std::fs::read(root.join(CONFIG_FILE)) {
        let existing: DatasetConfig = serde_json::from_slice(&bytes)?;
        if existing.scene != cfg.scene || existing.seed != cfg.seed {
            return Err(Error::Config(format!(
                "{} already holds a dataset with a different config",
                root.display()
            )));
        }
    }
    write_atomic(&root.join(CONFIG_FILE), &serde_json::to_vec_pretty(cfg)?)?;
    let mut stats = GenerateStats { written: 0, reused: 0 };
    let mut index = Vec::with_capacity(cfg.total());
    for i in 0..cfg.total() {
        let spec = sample_scene(&cfg.scene, cfg.clip_seed(i))?;
        let entry = entry_for(cfg, i, &spec);
        let arrays = root.join(&entry.path);
        let sidecar = arrays.with_extension("json");
        let done = arrays.exists()
            && std::fs::read(&sidecar)
                .ok()
                .and_then(|b| serde_json::from_slice::<SceneSpec>(&b).ok())
                .is_some_and(|s| s == spec);
        if done {
            stats.reused += 1;
        } else {
            save_clip(&generate_clip(&spec)?, &arrays)?;
            stats.written += 1;
        }
        index.push(entry);
    }
    let mut buf = Vec::new();
    for e in &index {
        serde_json::to_writer(&mut buf, e)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(&root.join(INDEX_FILE), &buf)?;
    Ok(stats)
}

/// A generated dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub config: DatasetConfig,
    pub entries: Vec<IndexEntry>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let config: DatasetConfig = serde_json::from_slice(&std::fs::read(root.join(CONFIG_FILE))?)?;
        let text = std::fs::read_to_string(root.join(INDEX_FILE))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<IndexEntry>, _>>()?;
        Ok(Self { root, config, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn find(&self, clip_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }

    pub fn load(&self, entry: &IndexEntry) -> Result<LabeledClip> {
        load_clip(&self.root.join(&entry.path))
    }

    /// SHA-256 over the index and every clip file, in index order.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(std::fs::read(self.root.join(INDEX_FILE))?);
        for e in &self.entries {
            let p = self.root.join(&e.path);
            h.update(std::fs::read(&p)?);
            h.update(std::fs::read(p.with_extension("json"))?);
        }
        Ok(hex::encode(h.finalize()))
    }
}
