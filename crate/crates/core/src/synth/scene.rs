use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Minimum Chebyshev distance between any two colors in a scene, shapes and
/// background alike.
pub const MIN_COLOR_DISTANCE: u8 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Center path over normalized time `s = i / (L - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Motion {
    /// `start + i * velocity` (velocity in px per frame).
    Linear { start: [f64; 2], velocity: [f64; 2] },
    /// Quadratic Bezier through `p0` and `p2` with control point `p1`.
    Bezier { p0: [f64; 2], p1: [f64; 2], p2: [f64; 2] },
    /// Linear drift plus a sine displacement along the drift normal.
    Sinusoid {
        start: [f64; 2],
        velocity: [f64; 2],
        amplitude: f64,
        /// In frames.
        period: f64,
        phase: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathFamily {
    Linear,
    Bezier,
    Sinusoid,
}

impl Motion {
    pub fn family(&self) -> PathFamily {
        match self {
            Motion::Linear { .. } => PathFamily::Linear,
            Motion::Bezier { .. } => PathFamily::Bezier,
            Motion::Sinusoid { .. } => PathFamily::Sinusoid,
        }
    }

    pub fn center(&self, frame: usize, frames: usize) -> Point {
        let i = frame as f64;
        match self {
            Motion::Linear { start, velocity } => Point::new(start[0] + i * velocity[0], start[1] + i * velocity[1]),
            Motion::Bezier { p0, p1, p2 } => {
                let s = if frames > 1 { i / (frames - 1) as f64 } else { 0.0 };
                let (a, b, c) = ((1.0 - s) * (1.0 - s), 2.0 * (1.0 - s) * s, s * s);
                Point::new(
                    a * p0[0] + b * p1[0] + c * p2[0],
                    a * p0[1] + b * p1[1] + c * p2[1],
                )
            }
            Motion::Sinusoid {
                start,
                velocity,
                amplitude,
                period,
                phase,
            } => {
                let speed = velocity[0].hypot(velocity[1]);
                let (nx, ny) = if speed > 0.0 { (-velocity[1] / speed, velocity[0] / speed) } else { (0.0, 1.0) };
                let off = amplitude * ((std::f64::consts::TAU * i / period + phase).sin() - phase.sin());
                Point::new(start[0] + i * velocity[0] + off * nx, start[1] + i * velocity[1] + off * ny)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub id: u32,
    pub kind: ShapeKind,
    pub color: [u8; 3],
    /// Circle diameter, square side or triangle side, in px.
    pub size: f64,
    pub motion: Motion,
}

impl ShapeSpec {
    /// Half-extents of the axis-aligned box around the shape, as
    /// (left, right, up, down) distances from its center.
    pub fn extents(&self) -> [f64; 4] {
        let s = self.size;
        match self.kind {
            ShapeKind::Circle | ShapeKind::Square => [s / 2.0; 4],
            ShapeKind::Triangle => {
                let r = s / 3f64.sqrt();
                [s / 2.0, s / 2.0, r, r / 2.0]
            }
        }
    }

    /// Whether `p` lies inside the shape when centered at `c`.
    pub fn contains(&self, c: Point, p: Point) -> bool {
        let (dx, dy) = (p.x - c.x, p.y - c.y);
        let h = self.size / 2.0;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= h * h,
            ShapeKind::Square => dx.abs() <= h && dy.abs() <= h,
            ShapeKind::Triangle => {
                // apex up, centroid at c; inradius r/2
                let r = self.size / 3f64.sqrt();
                let inr = r / 2.0;
                let s3 = 3f64.sqrt() / 2.0;
                dy <= inr && (s3 * dx - 0.5 * dy) <= inr && (-s3 * dx - 0.5 * dy) <= inr
            }
        }
    }

    pub fn fits(&self, c: Point, height: usize, width: usize) -> bool {
        let [l, r, u, d] = self.extents();
        c.x - l >= 0.0 && c.x + r <= width as f64 && c.y - u >= 0.0 && c.y + d <= height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Background {
    Solid { color: [u8; 3] },
    /// Linear blend from `from` to `to`, left to right or top to bottom.
    Gradient { from: [u8; 3], to: [u8; 3], horizontal: bool },
    Checker { a: [u8; 3], b: [u8; 3], cell: usize },
}

impl Background {
    pub fn colors(&self) -> Vec<[u8; 3]> {
        match self {
            Background::Solid { color } => vec![*color],
            Background::Gradient { from, to, .. } => vec![*from, *to],
            Background::Checker { a, b, .. } => vec![*a, *b],
        }
    }

    /// Color at continuous position `p`.
    pub fn color_at(&self, p: Point, height: usize, width: usize) -> [f64; 3] {
        let f = |c: [u8; 3]| [c[0] as f64, c[1] as f64, c[2] as f64];
        match self {
            Background::Solid { color } => f(*color),
            Background::Gradient { from, to, horizontal } => {
                let s = if *horizontal { p.x / width as f64 } else { p.y / height as f64 }.clamp(0.0, 1.0);
                let (a, b) = (f(*from), f(*to));
                [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * s)
            }
            Background::Checker { a, b, cell } => {
                let cell = (*cell).max(1) as f64;
                let parity = ((p.x / cell).floor() + (p.y / cell).floor()) as i64;
                if parity.rem_euclid(2) == 0 { f(*a) } else { f(*b) }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub background: Background,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

pub fn chebyshev(a: [u8; 3], b: [u8; 3]) -> u8 {
    (0..3).map(|k| a[k].abs_diff(b[k])).max().unwrap_or(0)
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Spec("scene dimensions must be positive".into()));
        }
        let mut ids: Vec<u32> = self.shapes.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Spec("shape ids must be unique".into()));
        }
        for s in &self.shapes {
            if !(s.size > 0.0) {
                return Err(Error::Spec(format!("shape {} has nonpositive size", s.id)));
            }
            for i in 0..self.frames {
                let c = s.motion.center(i, self.frames);
                if !s.fits(c, self.height, self.width) {
                    return Err(Error::Spec(format!(
                        "shape {} leaves the frame at frame {i} (center {:.2}, {:.2})",
                        s.id, c.x, c.y
                    )));
                }
            }
        }
        let bg = self.background.colors();
        for (k, a) in self.shapes.iter().enumerate() {
            for b in &self.shapes[k + 1..] {
                if chebyshev(a.color, b.color) < MIN_COLOR_DISTANCE {
                    return Err(Error::Spec(format!("shapes {} and {} have indistinct colors", a.id, b.id)));
                }
            }
            if bg.iter().any(|&c| chebyshev(a.color, c) < MIN_COLOR_DISTANCE) {
                return Err(Error::Spec(format!("shape {} blends into the background", a.id)));
            }
        }
        Ok(())
    }

    pub fn centers(&self, shape: usize) -> Vec<Point> {
        (0..self.frames).map(|i| self.shapes[shape].motion.center(i, self.frames)).collect()
    }
}

/// Saturated shape colors; every entry has a channel at or above 220, so
/// each is at least 80 away from any background gray in `60..=140`.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 30, 30],
    [30, 220, 30],
    [40, 60, 235],
    [235, 225, 30],
    [225, 30, 225],
    [30, 225, 225],
    [245, 140, 20],
    [240, 240, 240],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathWeights {
    pub linear: f64,
    pub bezier: f64,
    pub sinusoid: f64,
}

impl Default for PathWeights {
    fn default() -> Self {
        Self {
            linear: 1.0,
            bezier: 1.0,
            sinusoid: 1.0,
        }
    }
}

impl PathWeights {
    pub fn fractions(&self) -> [(PathFamily, f64); 3] {
        let total = self.linear + self.bezier + self.sinusoid;
        [
            (PathFamily::Linear, self.linear / total),
            (PathFamily::Bezier, self.bezier / total),
            (PathFamily::Sinusoid, self.sinusoid / total),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSamplerConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Largest mean displacement per frame, px.
    pub max_speed: f64,
    pub min_speed: f64,
    pub path_weights: PathWeights,
    /// When false, shapes never overlap in any frame.
    pub allow_occlusion: bool,
}

impl Default for SceneSamplerConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            min_entities: 1,
            max_entities: 3,
            min_size: 10.0,
            max_size: 18.0,
            max_speed: 3.5,
            min_speed: 1.0,
            path_weights: PathWeights::default(),
            allow_occlusion: true,
        }
    }
}

impl SceneSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.min_entities == 0 || self.min_entities > self.max_entities || self.max_entities > PALETTE.len() {
            return Err(Error::Config(format!(
                "entity count range must lie within 1..={}",
                PALETTE.len()
            )));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("size range is empty".into()));
        }
        if self.max_size >= self.height.min(self.width) as f64 {
            return Err(Error::Config("max_size does not fit the frame".into()));
        }
        if !(0.0 <= self.min_speed && self.min_speed <= self.max_speed) {
            return Err(Error::Config("speed range is empty".into()));
        }
        let w = &self.path_weights;
        if [w.linear, w.bezier, w.sinusoid].iter().any(|&x| x < 0.0 || !x.is_finite()) || w.linear + w.bezier + w.sinusoid <= 0.0 {
            return Err(Error::Config("path weights must be nonnegative with a positive sum".into()));
        }
        Ok(())
    }
}

const MAX_TRIES: usize = 500;

fn random_gray<R: Rng>(rng: &mut R) -> [u8; 3] {
    let g = rng.random_range(60..=140u8);
    [g, g, g]
}

fn sample_background<R: Rng>(rng: &mut R, height: usize, width: usize) -> Background {
    match rng.random_range(0..3) {
        0 => Background::Solid { color: random_gray(rng) },
        1 => Background::Gradient {
            from: random_gray(rng),
            to: random_gray(rng),
            horizontal: rng.random_bool(0.5),
        },
        _ => Background::Checker {
            a: random_gray(rng),
            b: random_gray(rng),
            cell: rng.random_range(4..=(height.min(width) / 4).max(4)),
        },
    }
}

fn sample_motion<R: Rng>(rng: &mut R, cfg: &SceneSamplerConfig, shape: &ShapeSpec, family: PathFamily) -> Option<Motion> {
    let [l, r, u, d] = shape.extents();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    if l + r > w || u + d > h {
        return None;
    }
    let point = |rng: &mut R| [rng.random_range(l..=w - r), rng.random_range(u..=h - d)];
    let steps = (cfg.frames.max(2) - 1) as f64;
    let velocity = |rng: &mut R| {
        let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        [speed * a.cos(), speed * a.sin()]
    };
    for _ in 0..MAX_TRIES {
        let m = match family {
            PathFamily::Linear => Motion::Linear {
                start: point(rng),
                velocity: velocity(rng),
            },
            PathFamily::Bezier => {
                let p0 = point(rng);
                let v = velocity(rng);
                let p2 = [p0[0] + v[0] * steps, p0[1] + v[1] * steps];
                let bend = rng.random_range(-0.5..=0.5) * v[0].hypot(v[1]) * steps;
                let len = v[0].hypot(v[1]).max(1e-9);
                let mid = [(p0[0] + p2[0]) / 2.0, (p0[1] + p2[1]) / 2.0];
                let p1 = [mid[0] - v[1] / len * bend, mid[1] + v[0] / len * bend];
                Motion::Bezier { p0, p1, p2 }
            }
            PathFamily::Sinusoid => Motion::Sinusoid {
                start: point(rng),
                velocity: velocity(rng),
                amplitude: rng.random_range(2.0..=5.0),
                period: rng.random_range(cfg.frames as f64 / 2.0..=cfg.frames as f64 * 1.5),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            },
        };
        if (0..cfg.frames).all(|i| shape.fits(m.center(i, cfg.frames), cfg.height, cfg.width)) {
            return Some(m);
        }
    }
    None
}

/// Separating-box test on the shapes' bounding boxes, with a 1 px margin.
fn boxes_overlap(a: &ShapeSpec, ca: Point, b: &ShapeSpec, cb: Point) -> bool {
    let [al, ar, au, ad] = a.extents();
    let [bl, br, bu, bd] = b.extents();
    let m = 1.0;
    !(ca.x + ar + m <= cb.x - bl || cb.x + br + m <= ca.x - al || ca.y + ad + m <= cb.y - bu || cb.y + bd + m <= ca.y - au)
}

/// Draws a random valid scene. Shapes never overlap in the first frame; with
/// `allow_occlusion = false` they never overlap at all.
pub fn sample_scene(cfg: &SceneSamplerConfig, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = sample_background(&mut rng, cfg.height, cfg.width);
    let n = rng.random_range(cfg.min_entities..=cfg.max_entities);
    let mut palette: Vec<[u8; 3]> = PALETTE.to_vec();
    let fams = cfg.path_weights.fractions();
    let family_dist = WeightedIndex::new(fams.iter().map(|f| f.1)).map_err(|e| Error::Config(e.to_string()))?;
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(n);
    for id in 1..=n as u32 {
        let color = palette.swap_remove(rng.random_range(0..palette.len()));
        let family = fams[family_dist.sample(&mut rng)].0;
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let kind = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle][rng.random_range(0..3)];
            let size = rng.random_range(cfg.min_size..=cfg.max_size);
            let mut shape = ShapeSpec {
                id,
                kind,
                color,
                size,
                motion: Motion::Linear {
                    start: [0.0; 2],
                    velocity: [0.0; 2],
                },
            };
            let Some(m) = sample_motion(&mut rng, cfg, &shape, family) else {
                continue;
            };
            shape.motion = m;
            let check_frames = if cfg.allow_occlusion { 1 } else { cfg.frames };
            let clash = shapes.iter().any(|o| {
                (0..check_frames).any(|i| {
                    boxes_overlap(&shape, shape.motion.center(i, cfg.frames), o, o.motion.center(i, cfg.frames))
                })
            });
            if !clash {
                placed = Some(shape);
                break;
            }
        }
        match placed {
            Some(s) => shapes.push(s),
            // crowded frame: keep the shapes placed so far
            None => break,
        }
    }
    let spec = SceneSpec {
        shapes,
        background,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_separable_from_each_other_and_grays() {
        for (i, a) in PALETTE.iter().enumerate() {
            for b in &PALETTE[i + 1..] {
                assert!(chebyshev(*a, *b) >= MIN_COLOR_DISTANCE, "{a:?} {b:?}");
            }
            for g in 60..=140u8 {
                assert!(chebyshev(*a, [g, g, g]) >= MIN_COLOR_DISTANCE);
            }
        }
    }

    #[test]
    fn linear_motion_steps_by_velocity() {
        let m = Motion::Linear {
            start: [10.0, 12.0],
            velocity: [2.0, -1.0],
        };
        let c = m.center(3, 8);
        assert_eq!((c.x, c.y), (16.0, 9.0));
    }

    #[test]
    fn bezier_hits_endpoints() {
        let m = Motion::Bezier {
            p0: [1.0, 2.0],
            p1: [5.0, 9.0],
            p2: [7.0, 3.0],
        };
        assert_eq!(m.center(0, 8), Point::new(1.0, 2.0));
        assert_eq!(m.center(7, 8), Point::new(7.0, 3.0));
    }

    #[test]
    fn sinusoid_starts_at_start() {
        let m = Motion::Sinusoid {
            start: [20.0, 30.0],
            velocity: [1.0, 0.0],
            amplitude: 4.0,
            period: 6.0,
            phase: 1.0,
        };
        let c = m.center(0, 8);
        assert!((c.x - 20.0).abs() < 1e-12 && (c.y - 30.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_contains_its_centroid_and_not_far_points() {
        let s = ShapeSpec {
            id: 1,
            kind: ShapeKind::Triangle,
            color: PALETTE[0],
            size: 12.0,
            motion: Motion::Linear {
                start: [0.0; 2],
                velocity: [0.0; 2],
            },
        };
        let c = Point::new(20.0, 20.0);
        assert!(s.contains(c, c));
        let [l, r, u, d] = s.extents();
        // apex and base corners are on the boundary
        assert!(s.contains(c, Point::new(20.0, 20.0 - u + 1e-9)));
        assert!(s.contains(c, Point::new(20.0 - l + 1e-6, 20.0 + d - 1e-6)));
        assert!(s.contains(c, Point::new(20.0 + r - 1e-6, 20.0 + d - 1e-6)));
        assert!(!s.contains(c, Point::new(20.0 - l + 0.5, 20.0 - u + 0.5)));
        assert!(!s.contains(c, Point::new(20.0, 20.0 + d + 0.1)));
    }

    #[test]
    fn sampled_scenes_are_valid_and_deterministic() {
        let cfg = SceneSamplerConfig::default();
        for seed in 0..50 {
            let a = sample_scene(&cfg, seed).unwrap();
            assert_eq!(a, sample_scene(&cfg, seed).unwrap());
            assert!(!a.shapes.is_empty() && a.shapes.len() <= 3);
            a.validate().unwrap();
        }
    }

    #[test]
    fn escaping_shape_is_rejected() {
        let mut spec = sample_scene(&SceneSamplerConfig::default(), 1).unwrap();
        spec.shapes[0].motion = Motion::Linear {
            start: [32.0, 32.0],
            velocity: [10.0, 0.0],
        };
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn similar_colors_are_rejected() {
        let mut spec = sample_scene(&SceneSamplerConfig { min_entities: 2, ..Default::default() }, 3).unwrap();
        let c = spec.shapes[0].color;
        spec.shapes[1].color = [c[0].saturating_sub(10), c[1], c[2]];
        assert!(spec.validate().is_err());
    }
}
