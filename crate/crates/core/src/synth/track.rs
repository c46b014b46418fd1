//! Color-keyed centroid tracker used as the evaluation oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mask, Point};
use crate::video::Video;

/// Per-channel tolerance for a pixel to count as an entity's color.
pub const COLOR_TOLERANCE: u8 = 30;
/// Consecutive misses bridged by holding the last velocity.
pub const MAX_COAST: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Tracked,
    /// No matching pixels; position extrapolated.
    Coasted,
    /// Part of a miss run longer than [`MAX_COAST`]; excluded from metrics.
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedTrajectory {
    pub entity_id: u32,
    pub points: Vec<[f64; 2]>,
    pub states: Vec<TrackState>,
}

impl TrackedTrajectory {
    pub fn is_valid(&self, i: usize) -> bool {
        self.states[i] != TrackState::Lost
    }

    pub fn lost_frames(&self) -> usize {
        self.states.iter().filter(|s| **s == TrackState::Lost).count()
    }

    pub fn coasted_frames(&self) -> usize {
        self.states.iter().filter(|s| **s == TrackState::Coasted).count()
    }
}

fn matches(px: [u8; 3], color: [u8; 3]) -> bool {
    (0..3).all(|k| px[k].abs_diff(color[k]) <= COLOR_TOLERANCE)
}

/// Centroids of the 4-connected components of `on` (`H x W`).
fn component_centroids(on: &[bool], height: usize, width: usize) -> Vec<Point> {
    let mut seen = vec![false; on.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0usize);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            let p = Point::pixel_center(r, c);
            sx += p.x;
            sy += p.y;
            n += 1;
            let mut visit = |j: usize| {
                if on[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
        out.push(Point::new(sx / n as f64, sy / n as f64));
    }
    out
}

fn nearest(candidates: &[Point], to: Point) -> Option<Point> {
    candidates
        .iter()
        .copied()
        .min_by(|a, b| a.distance(&to).total_cmp(&b.distance(&to)))
}

/// Tracks each entity through `video`. Entity `k` starts at the centroid of
/// `first_masks[k]` and follows pixels within [`COLOR_TOLERANCE`] of
/// `colors[k]`, picking the connected component nearest its previous
/// position.
pub fn track_entities(video: &Video, first_masks: &[Mask], colors: &[[u8; 3]], ids: &[u32]) -> Result<Vec<TrackedTrajectory>> {
    if first_masks.len() != colors.len() || colors.len() != ids.len() {
        return Err(Error::LengthMismatch {
            what: "entity colors",
            expected: first_masks.len(),
            got: colors.len().min(ids.len()),
        });
    }
    let (l, h, w) = (video.frames(), video.height(), video.width());
    let mut out = Vec::with_capacity(ids.len());
    for ((mask, &color), &id) in first_masks.iter().zip(colors).zip(ids) {
        if mask.height() != h || mask.width() != w {
            return Err(Error::Spec(format!("mask of entity {id} does not match the video size")));
        }
        let mut points = Vec::with_capacity(l);
        let mut states = Vec::with_capacity(l);
        let mut prev = mask.centroid()?;
        let mut velocity = (0.0, 0.0);
        let mut miss_run = 0usize;
        for i in 0..l {
            let on: Vec<bool> = (0..h * w).map(|j| matches(video.pixel(i, j / w, j % w), color)).collect();
            let comps = component_centroids(&on, h, w);
            let found = if i == 0 {
                // prefer components that overlap the selection
                let inside: Vec<bool> = (0..h * w).map(|j| on[j] && mask.get(j / w, j % w)).collect();
                nearest(&component_centroids(&inside, h, w), prev).or_else(|| nearest(&comps, prev))
            } else {
                nearest(&comps, prev)
            };
            match found {
                Some(p) => {
                    if i > 0 {
                        let last = points.last().map(|q: &[f64; 2]| Point::new(q[0], q[1])).unwrap_or(prev);
                        velocity = (p.x - last.x, p.y - last.y);
                    }
                    if miss_run > MAX_COAST {
                        let n = states.len();
                        for s in &mut states[n - miss_run..] {
                            *s = TrackState::Lost;
                        }
                    }
                    miss_run = 0;
                    prev = p;
                    points.push([p.x, p.y]);
                    states.push(TrackState::Tracked);
                }
                None => {
                    miss_run += 1;
                    let p = if i == 0 { prev } else { Point::new(prev.x + velocity.0, prev.y + velocity.1) };
                    prev = p;
                    points.push([p.x, p.y]);
                    states.push(TrackState::Coasted);
                }
            }
        }
        if miss_run > MAX_COAST {
            let n = states.len();
            for s in &mut states[n - miss_run..] {
                *s = TrackState::Lost;
            }
        }
        out.push(TrackedTrajectory {
            entity_id: id,
            points,
            states,
        });
    }
    Ok(out)
}
