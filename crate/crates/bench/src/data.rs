//! Synthetic moving-shapes videos with per-pixel class and depth labels.
//!
//! Object slot `s` (1-based) always has the same shape and size band, so
//! its class is recognisable from geometry; colours are drawn per
//! sequence and carry no class information.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use vidprop_core::training::TaskTarget;
use vidprop_core::Tensor;

pub const MAX_OBJECTS: usize = 8;
pub const MIN_EXTENT: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid dataset parameter: {0}")]
    Param(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    pub num_frames: usize,
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: usize,
    /// Attention window side and feature stride of the model the data is
    /// meant for; motion must stay inside the window at feature scale.
    pub window: usize,
    pub feature_stride: usize,
}

impl SyntheticParams {
    pub fn speed_limit(&self) -> usize {
        (self.window / 2) * self.feature_stride
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(1..=MAX_OBJECTS).contains(&self.num_objects) {
            return Err(DataError::Param(format!("num_objects must be in 1..={MAX_OBJECTS}, got {}", self.num_objects)));
        }
        if self.height < MIN_EXTENT || self.width < MIN_EXTENT {
            return Err(DataError::Param(format!(
                "frames must be at least {MIN_EXTENT}x{MIN_EXTENT}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_frames == 0 {
            return Err(DataError::Param("num_frames must be positive".into()));
        }
        if self.max_speed > self.speed_limit() {
            return Err(DataError::Param(format!(
                "max_speed {} exceeds (window/2)*stride = {}",
                self.max_speed,
                self.speed_limit()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_objects + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect { half_h: i64, half_w: i64 },
    Circle { radius: i64 },
}

impl Shape {
    pub fn contains(&self, dy: i64, dx: i64) -> bool {
        match *self {
            Shape::Rect { half_h, half_w } => dy.abs() <= half_h && dx.abs() <= half_w,
            Shape::Circle { radius } => dy * dy + dx * dx <= radius * radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub class: usize,
    pub shape: Shape,
    pub color: [f64; 3],
    pub depth: f64,
    /// Centre at frame 0.
    pub start: (i64, i64),
    /// `(dx, dy)` in pixels per frame.
    pub velocity: (i64, i64),
}

impl Object {
    pub fn center(&self, t: usize) -> (i64, i64) {
        (self.start.0 + self.velocity.1 * t as i64, self.start.1 + self.velocity.0 * t as i64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]` each, values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// Row-major class maps, `0` is background.
    pub seg_labels: Vec<Vec<usize>>,
    /// Row-major depth maps; smaller is nearer.
    pub depth_maps: Vec<Vec<f64>>,
    pub objects: Vec<Object>,
    pub seed: u64,
}

/// Size band of object slot `class` (1-based), relative to the frame.
fn slot_shape(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Shape {
    let unit = (h.min(w) as f64 / 24.0).max(1.0);
    let jitter = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (unit * rng.gen_range(lo..hi)).round() as i64;
    match class {
        1 => Shape::Rect { half_h: jitter(rng, 4.0, 5.0), half_w: jitter(rng, 4.0, 5.0) },
        2 => Shape::Circle { radius: jitter(rng, 5.0, 6.0) },
        3 => Shape::Rect { half_h: jitter(rng, 2.0, 2.5), half_w: jitter(rng, 6.0, 7.0) },
        4 => Shape::Circle { radius: jitter(rng, 2.5, 3.0) },
        5 => Shape::Rect { half_h: jitter(rng, 6.0, 7.0), half_w: jitter(rng, 2.0, 2.5) },
        6 => Shape::Circle { radius: jitter(rng, 7.0, 8.0) },
        7 => Shape::Rect { half_h: jitter(rng, 2.5, 3.0), half_w: jitter(rng, 2.5, 3.0) },
        _ => Shape::Rect { half_h: jitter(rng, 1.0, 1.5), half_w: jitter(rng, 4.0, 5.0) },
    }
}

fn distinct_color(rng: &mut ChaCha8Rng, taken: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [0.0; 3];
    let mut best_dist = -1.0;
    // best of a few candidates keeps colours apart without rejection loops
    for _ in 0..16 {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let d = taken
            .iter()
            .map(|t| t.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if d > best_dist {
            best_dist = d;
            best = c;
        }
    }
    best
}

pub fn generate_sequence(params: &SyntheticParams, seed: u64) -> Result<SyntheticSequence, DataError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.height, params.width);

    let base = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let texture: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-0.04..0.04)).collect();
    let tilt = rng.gen_range(-1.0..1.0);
    let background_depth: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
            8.0 + 2.0 * (1.0 - y) + 0.5 * tilt * x
        })
        .collect();

    let mut colors = vec![base];
    let mut depths: Vec<f64> = Vec::new();
    let speed = params.max_speed as i64;
    let span = (params.num_frames.saturating_sub(1)) as i64;
    let mut objects = Vec::with_capacity(params.num_objects);
    for class in 1..=params.num_objects {
        let shape = slot_shape(class, h, w, &mut rng);
        let color = distinct_color(&mut rng, &colors);
        colors.push(color);
        let mut depth = rng.gen_range(1.5..7.0);
        while depths.iter().any(|d: &f64| (d - depth).abs() < 0.25) {
            depth = rng.gen_range(1.5..7.0);
        }
        depths.push(depth);
        let velocity = (rng.gen_range(-speed..=speed), rng.gen_range(-speed..=speed));
        // keep the centre inside the frame for the whole sequence
        let range = |extent: usize, v: i64| {
            let lo = 0i64.max(-v * span);
            let hi = (extent as i64 - 1).min(extent as i64 - 1 - v * span);
            if lo <= hi {
                (lo, hi)
            } else {
                (0, extent as i64 - 1)
            }
        };
        let (ylo, yhi) = range(h, velocity.1);
        let (xlo, xhi) = range(w, velocity.0);
        let start = (rng.gen_range(ylo..=yhi), rng.gen_range(xlo..=xhi));
        objects.push(Object { class, shape, color, depth, start, velocity });
    }

    // nearest object wins, so draw far to near
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.total_cmp(&objects[a].depth));

    let mut frames = Vec::with_capacity(params.num_frames);
    let mut seg_labels = Vec::with_capacity(params.num_frames);
    let mut depth_maps = Vec::with_capacity(params.num_frames);
    for t in 0..params.num_frames {
        let mut label = vec![0usize; h * w];
        let mut depth = background_depth.clone();
        let mut rgb = vec![0.0; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                rgb[c * h * w + p] = (base[c] + texture[p]).clamp(0.0, 1.0);
            }
        }
        for &i in &order {
            let o = &objects[i];
            let (cy, cx) = o.center(t);
            for y in 0..h {
                for x in 0..w {
                    if o.shape.contains(y as i64 - cy, x as i64 - cx) {
                        let p = y * w + x;
                        label[p] = o.class;
                        depth[p] = o.depth;
                        for c in 0..3 {
                            rgb[c * h * w + p] = o.color[c];
                        }
                    }
                }
            }
        }
        frames.push(Tensor::new(&[3, h, w], rgb).expect("frame buffer matches shape"));
        seg_labels.push(label);
        depth_maps.push(depth);
    }
    Ok(SyntheticSequence { height: h, width: w, frames, seg_labels, depth_maps, objects, seed })
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `t` as a `[1, 3, H, W]` tensor.
    pub fn frame_batch(&self, t: usize) -> Tensor {
        let f = &self.frames[t];
        f.clone().reshape(&[1, 3, self.height, self.width]).expect("same element count")
    }

    pub fn targets(&self, t: usize) -> Vec<TaskTarget> {
        vec![
            TaskTarget::Segmentation(self.seg_labels[t].clone()),
            TaskTarget::Depth { values: self.depth_maps[t].clone(), mask: vec![true; self.height * self.width] },
        ]
    }
}

/// Stacks frame `t` of several equally sized sequences into `[B, 3, H, W]`
/// and concatenates their targets in batch order.
pub fn stack_frame(seqs: &[&SyntheticSequence], t: usize) -> (Tensor, Vec<TaskTarget>) {
    let (h, w) = (seqs[0].height, seqs[0].width);
    let mut data = Vec::with_capacity(seqs.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(seqs.len() * h * w);
    let mut depth = Vec::with_capacity(seqs.len() * h * w);
    for s in seqs {
        data.extend_from_slice(s.frames[t].data());
        labels.extend_from_slice(&s.seg_labels[t]);
        depth.extend_from_slice(&s.depth_maps[t]);
    }
    let n = depth.len();
    let frame = Tensor::new(&[seqs.len(), 3, h, w], data).expect("stacked frames match shape");
    (frame, vec![TaskTarget::Segmentation(labels), TaskTarget::Depth { values: depth, mask: vec![true; n] }])
}
