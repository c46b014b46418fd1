use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use crate::entity_rep::{Entity, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{self, Mask, Point};
use crate::video::Video;

/// Subsamples per pixel side used for anti-aliased frames.
const SUPERSAMPLE: usize = 4;

/// A rendered scene with exact labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub spec: SceneSpec,
    pub video: Video,
    /// `[shape][frame]`, the shape's own silhouette ignoring occlusion.
    pub full_masks: Vec<Vec<Mask>>,
    /// `[shape][frame]`, what remains visible after higher ids are drawn.
    pub visible_masks: Vec<Vec<Mask>>,
    /// Incircle centers of the full masks, one per shape.
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityLabel {
    pub id: u32,
    pub color: [u8; 3],
}

impl LabeledClip {
    /// Entities as a user would select them on the first frame.
    pub fn entities(&self) -> Result<Vec<Entity>> {
        self.spec
            .shapes
            .iter()
            .zip(&self.visible_masks)
            .map(|(s, m)| Entity::from_mask(s.id, m[0].clone()))
            .collect()
    }

    pub fn first_masks(&self) -> Vec<Mask> {
        self.visible_masks.iter().map(|m| m[0].clone()).collect()
    }

    pub fn colors(&self) -> Vec<[u8; 3]> {
        self.spec.shapes.iter().map(|s| s.color).collect()
    }
}

/// Rasterizes `spec`: binary pixel-center masks, 4x4 supersampled frames.
/// Higher ids are drawn on top.
pub fn generate_clip(spec: &SceneSpec) -> Result<LabeledClip> {
    spec.validate()?;
    let (l, h, w) = (spec.frames, spec.height, spec.width);
    let centers: Vec<Vec<Point>> = (0..spec.shapes.len()).map(|k| spec.centers(k)).collect();
    // draw order: ascending id
    let mut order: Vec<usize> = (0..spec.shapes.len()).collect();
    order.sort_by_key(|&k| spec.shapes[k].id);

    let full_masks: Vec<Vec<Mask>> = spec
        .shapes
        .iter()
        .zip(&centers)
        .map(|(s, cs)| {
            cs.iter()
                .map(|&c| Mask::from_fn(h, w, |r, col| s.contains(c, Point::pixel_center(r, col))))
                .collect()
        })
        .collect();

    let mut visible_masks = full_masks.clone();
    for i in 0..l {
        for (rank, &k) in order.iter().enumerate() {
            for &above in &order[rank + 1..] {
                for (r, c) in full_masks[above][i].foreground() {
                    visible_masks[k][i].set(r, c, false);
                }
            }
        }
    }

    let mut video = Video::blank(l, h, w);
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for i in 0..l {
        let frame = video.frame_mut(i);
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0f64; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let p = Point::new(
                            c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                            r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                        );
                        let top = order
                            .iter()
                            .rev()
                            .find(|&&k| spec.shapes[k].contains(centers[k][i], p));
                        let col = match top {
                            Some(&k) => spec.shapes[k].color.map(f64::from),
                            None => spec.background.color_at(p, h, w),
                        };
                        for ch in 0..3 {
                            acc[ch] += col[ch];
                        }
                    }
                }
                let o = (r * w + c) * 3;
                for ch in 0..3 {
                    frame[o + ch] = (acc[ch] / n_sub).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }

    let mut trajectories = Vec::with_capacity(spec.shapes.len());
    for (s, masks) in spec.shapes.iter().zip(&full_masks) {
        let pts = masks
            .iter()
            .map(|m| geometry::incircle(m).map(|ic| ic.center))
            .collect::<Result<Vec<_>>>()
            .map_err(|_| Error::Spec(format!("shape {} is too small to rasterize", s.id)))?;
        trajectories.push(Trajectory::new(s.id, pts));
    }

    Ok(LabeledClip {
        spec: spec.clone(),
        video,
        full_masks,
        visible_masks,
        trajectories,
    })
}
