//! Procedural moving-shape videos, caption labels and training-sequence layout.

mod store;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub use store::{read_video, write_dataset, write_video, VideoManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Still,
    Right,
    Left,
    Down,
    Up,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const DIRECTIONS: [Direction; 5] = [Direction::Still, Direction::Right, Direction::Left, Direction::Down, Direction::Up];
pub const PALETTE: [[f32; 3]; 4] = [[0.9, 0.2, 0.2], [0.2, 0.85, 0.3], [0.25, 0.35, 0.95], [0.95, 0.85, 0.2]];
pub const VOCAB_SIZE: usize = SHAPES.len() * PALETTE.len() * DIRECTIONS.len();
const BACKGROUND: f32 = 0.08;
const SUPERSAMPLE: usize = 4;

impl Direction {
    /// Dominant direction of a motion vector in image coordinates (y grows down).
    pub fn of(motion: (f64, f64)) -> Direction {
        let (dx, dy) = motion;
        if dx == 0.0 && dy == 0.0 {
            Direction::Still
        } else if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                Direction::Right
            } else {
                Direction::Left
            }
        } else if dy > 0.0 {
            Direction::Down
        } else {
            Direction::Up
        }
    }

    fn unit(self) -> (f64, f64) {
        match self {
            Direction::Still => (0.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Left => (-1.0, 0.0),
            Direction::Down => (0.0, 1.0),
            Direction::Up => (0.0, -1.0),
        }
    }
}

/// Integer id of a (shape, colour, direction) caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionLabel(pub usize);

impl CaptionLabel {
    pub fn new(shape: Shape, color: usize, dir: Direction) -> Result<Self> {
        if color >= PALETTE.len() {
            return Err(config_err!("colour index {color} outside palette of {}", PALETTE.len()));
        }
        let s = SHAPES.iter().position(|&x| x == shape).unwrap_or(0);
        let d = DIRECTIONS.iter().position(|&x| x == dir).unwrap_or(0);
        Ok(CaptionLabel((s * PALETTE.len() + color) * DIRECTIONS.len() + d))
    }

    pub fn parts(self) -> Result<(Shape, usize, Direction)> {
        if self.0 >= VOCAB_SIZE {
            return Err(Error::Bounds(format!("caption id {} outside vocabulary of {VOCAB_SIZE}", self.0)));
        }
        let d = self.0 % DIRECTIONS.len();
        let rest = self.0 / DIRECTIONS.len();
        Ok((SHAPES[rest / PALETTE.len()], rest % PALETTE.len(), DIRECTIONS[d]))
    }

    pub fn text(self) -> String {
        match self.parts() {
            Ok((s, c, d)) => format!("{s:?} colour {c} moving {d:?}").to_lowercase(),
            Err(_) => format!("label {}", self.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoSpec {
    pub resolution: usize,
    pub frames: usize,
    pub fps: f64,
    pub shape: Shape,
    pub color: usize,
    /// Pixels per frame.
    pub motion: (f64, f64),
    /// Centre at frame 0, in pixels.
    pub start: (f64, f64),
    /// Half extent of the shape in pixels.
    pub radius: f64,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    /// A random valid spec; the speed is reduced until the whole path fits.
    pub fn random(seed: u64, resolution: usize, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = resolution as f64;
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let color = rng.random_range(0..PALETTE.len());
        let dir = DIRECTIONS[rng.random_range(0..DIRECTIONS.len())];
        let radius = res * rng.random_range(0.12..0.2);
        let (ux, uy) = dir.unit();
        let span = frames.saturating_sub(1).max(1) as f64;
        let room = res - 2.0 * radius;
        let speed = rng.random_range(0.3..1.0f64).min(room / span);
        let travel = speed * span;
        // start so the path stays inside on both axes
        let pick = |rng: &mut ChaCha8Rng, u: f64| {
            let lo = radius + if u < 0.0 { travel } else { 0.0 };
            let hi = res - radius - if u > 0.0 { travel } else { 0.0 };
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let start = (pick(&mut rng, ux), pick(&mut rng, uy));
        SyntheticVideoSpec {
            resolution,
            frames,
            fps: 24.0,
            shape,
            color,
            motion: (ux * speed, uy * speed),
            start,
            radius,
            seed,
        }
    }

    pub fn label(&self) -> Result<CaptionLabel> {
        CaptionLabel::new(self.shape, self.color, Direction::of(self.motion))
    }

    pub fn center(&self, frame: usize) -> (f64, f64) {
        (self.start.0 + self.motion.0 * frame as f64, self.start.1 + self.motion.1 * frame as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.frames == 0 || self.radius <= 0.0 {
            return Err(config_err!("degenerate video spec"));
        }
        if self.color >= PALETTE.len() {
            return Err(config_err!("colour index {} outside palette", self.color));
        }
        let res = self.resolution as f64;
        for f in [0, self.frames - 1] {
            let (cx, cy) = self.center(f);
            let r = self.radius;
            let tol = 1e-9;
            if cx - r < -tol || cy - r < -tol || cx + r > res + tol || cy + r > res + tol {
                return Err(config_err!("shape leaves the frame at frame {f} (centre {cx:.2}, {cy:.2}, radius {r:.2})"));
            }
        }
        Ok(())
    }

    fn inside(&self, px: f64, py: f64, c: (f64, f64)) -> bool {
        let (dx, dy) = (px - c.0, py - c.1);
        let r = self.radius;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up, base at +r
            Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// Renders one frame as `[3, H, W]` values in [0, 1].
    pub fn render_frame(&self, frame: usize) -> Vec<f32> {
        let n = self.resolution;
        let col = PALETTE[self.color];
        let c = self.center(frame);
        let mut out = vec![0.0f32; 3 * n * n];
        let inv = 1.0 / SUPERSAMPLE as f64;
        let r = self.radius;
        for y in 0..n {
            if (y as f64 + 1.0) < c.1 - r || (y as f64) > c.1 + r {
                for ch in 0..3 {
                    out[ch * n * n + y * n..ch * n * n + (y + 1) * n].fill(BACKGROUND);
                }
                continue;
            }
            for x in 0..n {
                let mut hit = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * inv;
                        let py = y as f64 + (sy as f64 + 0.5) * inv;
                        hit += self.inside(px, py, c) as usize;
                    }
                }
                let cov = hit as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for ch in 0..3 {
                    out[ch * n * n + y * n + x] = BACKGROUND * (1.0 - cov) + col[ch] * cov;
                }
            }
        }
        out
    }
}

/// Renders selected frames of a spec as `[len, 3, H, W]`.
pub fn render_frames(spec: &SyntheticVideoSpec, indices: &[usize]) -> Result<Tensor<f32>> {
    spec.validate()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= spec.frames) {
        return Err(Error::Dataset(format!("frame {bad} outside a {}-frame video", spec.frames)));
    }
    let n = spec.resolution;
    let mut data = Vec::with_capacity(indices.len() * 3 * n * n);
    for &i in indices {
        data.extend(spec.render_frame(i));
    }
    Tensor::from_vec(data, &[indices.len(), 3, n, n])
}

/// Renders all frames and returns the video `[T, 3, H, W]` with its caption.
pub fn gen_moving_shapes(spec: &SyntheticVideoSpec) -> Result<(Tensor<f32>, CaptionLabel)> {
    let idx: Vec<usize> = (0..spec.frames).collect();
    Ok((render_frames(spec, &idx)?, spec.label()?))
}

/// Indices `start, start + s, …` of `count` frames from a `len`-frame source.
pub fn skip_indices(len: usize, s: usize, start: usize, count: usize) -> Result<Vec<usize>> {
    if s == 0 || count == 0 {
        return Err(Error::Dataset("skip and count must be positive".into()));
    }
    let last = start + s * (count - 1);
    if last >= len {
        return Err(Error::Dataset(format!(
            "need frame {last} for {count} frames at skip {s} from {start}, source has {len}"
        )));
    }
    Ok((0..count).map(|k| start + k * s).collect())
}

/// Frames `start, start + s, …` (33 of them by default for interpolation training).
pub fn resample_skip<T: Clone>(frames: &[T], s: usize, start: usize, count: usize) -> Result<Vec<T>> {
    Ok(skip_indices(frames.len(), s, start, count)?.into_iter().map(|i| frames[i].clone()).collect())
}

pub const CLIP_FRAMES: usize = 33;
pub const CLIP_KEYFRAMES: usize = 9;
pub const CLIP_GROUPS: usize = 8;

/// Splits 33 frames into 9 keyframes (every 4th) and 8 groups of the 3 frames between them.
pub fn organize_33<T: Clone>(frames: &[T]) -> Result<(Vec<T>, Vec<[T; 3]>)> {
    if frames.len() != CLIP_FRAMES {
        return Err(Error::Dataset(format!("expected {CLIP_FRAMES} frames, got {}", frames.len())));
    }
    let keys = (0..CLIP_KEYFRAMES).map(|k| frames[4 * k].clone()).collect();
    let groups = (0..CLIP_GROUPS)
        .map(|g| [frames[4 * g + 1].clone(), frames[4 * g + 2].clone(), frames[4 * g + 3].clone()])
        .collect();
    Ok((keys, groups))
}

/// Inverse of [`organize_33`] for any keyframe count: `k0, g0, k1, g1, …, k_last`.
pub fn interleave<T: Clone>(keys: &[T], groups: &[[T; 3]]) -> Result<Vec<T>> {
    if keys.is_empty() || groups.len() + 1 != keys.len() {
        return Err(Error::Dataset(format!("{} keyframes cannot bracket {} groups", keys.len(), groups.len())));
    }
    let mut out = Vec::with_capacity(4 * keys.len() - 3);
    for (k, g) in keys.iter().zip(groups) {
        out.push(k.clone());
        out.extend(g.iter().cloned());
    }
    out.push(keys[keys.len() - 1].clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(motion: (f64, f64)) -> SyntheticVideoSpec {
        SyntheticVideoSpec {
            resolution: 32,
            frames: 8,
            fps: 24.0,
            shape: Shape::Circle,
            color: 1,
            motion,
            start: (10.0, 16.0),
            radius: 5.0,
            seed: 0,
        }
    }

    fn centroid_x(frame: &[f32], n: usize) -> f64 {
        // shape mass from the green channel above background
        let g = &frame[n * n..2 * n * n];
        let (mut m, mut mx) = (0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                let w = (g[y * n + x] - BACKGROUND) as f64;
                m += w;
                mx += w * (x as f64 + 0.5);
            }
        }
        mx / m
    }

    #[test]
    fn still_video_frames_identical() {
        let (v, label) = gen_moving_shapes(&spec((0.0, 0.0))).unwrap();
        let f = v.numel() / 8;
        for t in 1..8 {
            assert_eq!(&v.data()[..f], &v.data()[t * f..(t + 1) * f]);
        }
        assert_eq!(label.parts().unwrap(), (Shape::Circle, 1, Direction::Still));
        assert!(v.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn rendering_is_reproducible() {
        let s = SyntheticVideoSpec::random(42, 64, 40);
        let a = gen_moving_shapes(&s).unwrap().0;
        let b = gen_moving_shapes(&s.clone()).unwrap().0;
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn centroid_moves_one_pixel_per_frame() {
        let s = spec((1.0, 0.0));
        let (v, label) = gen_moving_shapes(&s).unwrap();
        assert_eq!(label.parts().unwrap().2, Direction::Right);
        let f = v.numel() / 8;
        let xs: Vec<f64> = (0..8).map(|t| centroid_x(&v.data()[t * f..(t + 1) * f], 32)).collect();
        for w in xs.windows(2) {
            assert!((w[1] - w[0] - 1.0).abs() <= 0.1, "{xs:?}");
        }
    }

    #[test]
    fn off_frame_motion_is_rejected() {
        assert!(gen_moving_shapes(&spec((3.0, 0.0))).is_err());
        for seed in 0..200 {
            SyntheticVideoSpec::random(seed, 64, 385).validate().unwrap();
        }
    }

    #[test]
    fn labels_are_bijective() {
        let mut seen = vec![false; VOCAB_SIZE];
        for s in SHAPES {
            for c in 0..PALETTE.len() {
                for d in DIRECTIONS {
                    let l = CaptionLabel::new(s, c, d).unwrap();
                    assert!(!seen[l.0]);
                    seen[l.0] = true;
                    assert_eq!(l.parts().unwrap(), (s, c, d));
                }
            }
        }
        assert!(seen.iter().all(|&x| x));
        assert!(CaptionLabel(VOCAB_SIZE).parts().is_err());
    }

    #[test]
    fn skip_resampling() {
        let src: Vec<usize> = (0..400).collect();
        assert_eq!(resample_skip(&src, 1, 5, 33).unwrap(), (5..38).collect::<Vec<_>>());
        assert_eq!(&resample_skip(&src, 3, 0, 33).unwrap()[..4], &[0, 3, 6, 9]);
        assert!(resample_skip(&src, 12, 20, 33).is_err());
        // 24 fps at skip 12 is 2 fps
        let frames = resample_skip(&src, 12, 0, 33).unwrap();
        assert_eq!(frames[2] - frames[0], 24);
    }

    #[test]
    fn organize_partition() {
        let src: Vec<usize> = (0..33).collect();
        let (k, g) = organize_33(&src).unwrap();
        assert_eq!(k, vec![0, 4, 8, 12, 16, 20, 24, 28, 32]);
        assert_eq!(g[0], [1, 2, 3]);
        let mut seen = vec![0; 33];
        k.iter().chain(g.iter().flatten()).for_each(|&i| seen[i] += 1);
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(interleave(&k, &g).unwrap(), src);
        assert!(organize_33(&src[..32]).is_err());
    }
}
