//! Mask, box and polar utilities shared across the pipeline.
//!
//! Coordinates follow a pixel-center convention throughout: the pixel at
//! `(row, col)` covers `[col, col + 1) x [row, row + 1)` and its center sits at
//! `x = col + 0.5`, `y = row + 0.5`. Trajectories, incircle centers and box
//! centers all live in this continuous frame.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest radius ever painted, so tiny entities never vanish.
pub const MIN_DISK_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Continuous center of the pixel at `(row, col)`.
    pub fn pixel_center(row: usize, col: usize) -> Self {
        Self::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::LengthMismatch {
                what: "mask bits",
                expected: height * width,
                got: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixels as `(row, col)` in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / self.width, i % self.width))
    }

    /// Mean of foreground pixel centers.
    pub fn centroid(&self) -> Result<Point> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (r, c) in self.foreground() {
            sx += c as f64 + 0.5;
            sy += r as f64 + 0.5;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(Point::new(sx / n as f64, sy / n as f64))
    }

    /// Downsample by an integer factor; a cell is foreground if any pixel inside it is.
    pub fn downsample_any(&self, factor: usize) -> Mask {
        let h = self.height.div_ceil(factor);
        let w = self.width.div_ceil(factor);
        let mut out = Mask::new(h, w);
        for (r, c) in self.foreground() {
            out.set(r / factor, c / factor, true);
        }
        out
    }

    pub fn to_rle(&self) -> MaskRle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        MaskRle {
            height: self.height,
            width: self.width,
            counts,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Mask> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let bits = img.pixels().map(|p| p.0[0] >= 128).collect();
        Mask::from_bits(h as usize, w as usize, bits)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path)?;
        Ok(())
    }
}

/// Row-major run-length encoding. `counts` alternates background/foreground
/// runs and always starts with a (possibly zero) background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl MaskRle {
    pub fn decode(&self) -> Result<Mask> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.height * self.width) as u64 {
            return Err(Error::LengthMismatch {
                what: "rle counts",
                expected: self.height * self.width,
                got: total as usize,
            });
        }
        let mut bits = Vec::with_capacity(self.height * self.width);
        for (i, &run) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
        Mask::from_bits(self.height, self.width, bits)
    }
}

/// Axis-aligned box in center/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Whether the pixel's full extent lies inside the box.
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        let (x0, x1) = (self.x - self.w / 2.0, self.x + self.w / 2.0);
        let (y0, y1) = (self.y - self.h / 2.0, self.y + self.h / 2.0);
        col as f64 >= x0 && col as f64 + 1.0 <= x1 && row as f64 >= y0 && row as f64 + 1.0 <= y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarOffset {
    pub rho: f64,
    pub theta: f64,
}

/// Tightest box around the foreground, with pixel edges as bounds.
pub fn mask_bbox(mask: &Mask) -> Result<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (r, c) in mask.foreground() {
        bounds = Some(match bounds {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    let (r0, r1, c0, c1) = bounds.ok_or(Error::EmptyMask)?;
    let w = (c1 - c0 + 1) as f64;
    let h = (r1 - r0 + 1) as f64;
    Ok(BBox {
        x: c0 as f64 + w / 2.0,
        y: r0 as f64 + h / 2.0,
        w,
        h,
    })
}

/// Offset of `center_j` in a polar frame anchored at `center_i`, with the
/// radius normalized by the image diagonal.
pub fn to_polar(center_i: Point, center_j: Point, image_diag: f64) -> PolarOffset {
    debug_assert!(image_diag > 0.0);
    let dx = center_j.x - center_i.x;
    let dy = center_j.y - center_i.y;
    let rho = dx.hypot(dy) / image_diag;
    if rho == 0.0 {
        return PolarOffset { rho: 0.0, theta: 0.0 };
    }
    let mut theta = dy.atan2(dx);
    // atan2 returns [-pi, pi]; fold +pi onto -pi.
    if theta >= PI {
        theta -= 2.0 * PI;
    }
    PolarOffset { rho, theta }
}

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

pub fn image_diagonal(height: usize, width: usize) -> f64 {
    (height as f64).hypot(width as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incircle {
    pub center: Point,
    pub radius: f64,
}

/// Exact squared Euclidean distance from every pixel center to the nearest
/// background pixel center. Everything outside the raster counts as
/// background. Background pixels get 0.
pub fn squared_distance_to_background(mask: &Mask) -> Vec<i64> {
    // Pad with a one-pixel background ring so the image border acts as background.
    let (h, w) = (mask.height() + 2, mask.width() + 2);
    let inf = ((h * h + w * w) as i64) * 4 + 1;
    let mut grid = vec![inf; h * w];
    for r in 0..h {
        for c in 0..w {
            let inside = r >= 1 && c >= 1 && r <= mask.height() && c <= mask.width();
            if !(inside && mask.get(r - 1, c - 1)) {
                grid[r * w + c] = 0;
            }
        }
    }

    let mut f = vec![0i64; h.max(w)];
    let mut d = vec![0i64; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        lower_envelope(&f[..h], &mut d[..h], inf);
        for r in 0..h {
            grid[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        lower_envelope(&f[..w], &mut d[..w], inf);
        grid[r * w..(r + 1) * w].copy_from_slice(&d[..w]);
    }

    let mut out = Vec::with_capacity(mask.height() * mask.width());
    for r in 1..=mask.height() {
        out.extend_from_slice(&grid[r * w + 1..r * w + 1 + mask.width()]);
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn lower_envelope(f: &[i64], d: &mut [i64], inf: i64) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq < inf {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        d.fill(inf);
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in start + 1..n {
        if f[q] >= inf {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64
                / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never underflows k.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dx = q as i64 - p as i64;
        *dq = f[p] + dx * dx;
    }
}

/// Largest inscribed circle: the foreground pixel farthest from the
/// background, ties broken by smallest `(row, col)`.
pub fn incircle(mask: &Mask) -> Result<Incircle> {
    let dist = squared_distance_to_background(mask);
    let mut best: Option<(i64, usize)> = None;
    for (i, &d2) in dist.iter().enumerate() {
        if !mask.bits()[i] {
            continue;
        }
        // Row-major scan with strict comparison keeps the smallest (row, col).
        if best.is_none_or(|(b, _)| d2 > b) {
            best = Some((d2, i));
        }
    }
    let (d2, i) = best.ok_or(Error::EmptyMask)?;
    Ok(Incircle {
        center: Point::pixel_center(i / mask.width(), i % mask.width()),
        radius: (d2 as f64).sqrt(),
    })
}

/// Dense `H x W x C` float raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Per-pixel L2 norm across channels.
    pub fn magnitude(&self) -> Vec<f32> {
        self.data
            .chunks_exact(self.channels.max(1))
            .map(|px| px.iter().map(|v| v * v).sum::<f32>().sqrt())
            .collect()
    }
}

/// Radius actually used for painting.
pub fn effective_radius(radius: f64) -> f64 {
    radius.max(MIN_DISK_RADIUS)
}

/// Pixels whose centers fall within `radius` of `center`, clipped to the raster.
pub fn disk_pixels(
    height: usize,
    width: usize,
    center: Point,
    radius: f64,
) -> impl Iterator<Item = (usize, usize)> {
    let radius = effective_radius(radius);
    let r2 = radius * radius;
    let r0 = ((center.y - radius - 0.5).floor().max(0.0) as usize).min(height);
    let r1 = ((center.y + radius).ceil().max(0.0) as usize).min(height);
    let c0 = ((center.x - radius - 0.5).floor().max(0.0) as usize).min(width);
    let c1 = ((center.x + radius).ceil().max(0.0) as usize).min(width);
    (r0..r1).flat_map(move |r| {
        (c0..c1).filter_map(move |c| {
            let dx = c as f64 + 0.5 - center.x;
            let dy = r as f64 + 0.5 - center.y;
            (dx * dx + dy * dy <= r2).then_some((r, c))
        })
    })
}

pub fn paint_disk(canvas: &mut Raster, center: Point, radius: f64, value: &[f32]) -> Result<()> {
    if value.len() != canvas.channels {
        return Err(Error::LengthMismatch {
            what: "disk value channels",
            expected: canvas.channels,
            got: value.len(),
        });
    }
    let (h, w) = (canvas.height, canvas.width);
    for (r, c) in disk_pixels(h, w, center, radius) {
        canvas.pixel_mut(r, c).copy_from_slice(value);
    }
    Ok(())
}

/// `n` points evenly spaced by arc length along the polyline through
/// `points`, both endpoints included.
pub fn resample_polyline(points: &[[f64; 2]], n: usize) -> Result<Vec<[f64; 2]>> {
    let (&first, &last) = match (points.first(), points.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Spec("polyline has no points".into())),
    };
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Spec("polyline has non-finite coordinates".into()));
    }
    let mut cumulative = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in points.windows(2) {
        acc += (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        cumulative.push(acc);
    }
    if n == 1 || acc == 0.0 {
        return Ok(vec![first; n]);
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        if k == n - 1 {
            out.push(last);
            break;
        }
        let target = acc * k as f64 / (n - 1) as f64;
        while seg + 2 < cumulative.len() && cumulative[seg + 1] < target {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 { ((target - cumulative[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (points[seg], points[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(out)
}

/// Distance from `p` to the closest point of the polyline.
pub fn distance_to_polyline(p: [f64; 2], points: &[[f64; 2]]) -> f64 {
    if points.len() == 1 {
        return (p[0] - points[0][0]).hypot(p[1] - points[0][1]);
    }
    points
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
        })
        .fold(f64::INFINITY, f64::min)
}
