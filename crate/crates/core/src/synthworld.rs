//! Deterministic toy video world: colored axis-aligned squares and circles
//! with constant-velocity motion and elastic wall bounces, rendered without
//! anti-aliasing so masks and pixels agree exactly.

use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::seeded_rng;

/// One shape class: an id plus its flat RGB color in [0,1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShapeClass {
    pub class_id: u8,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub num_shapes: usize,
    pub shape_classes: Vec<ShapeClass>,
    /// [min, max] speed per axis in pixels/frame.
    pub velocity_range: [f64; 2],
    pub seed: u64,
    /// Frames per clip.
    pub k: usize,
    pub num_clips: usize,
}

pub const BACKGROUND_CLASS: u8 = 0;
/// Colors live on the /255 grid so u8 clip serialization is lossless.
pub const BACKGROUND_COLOR: [f32; 3] = [26.0 / 255.0, 26.0 / 255.0, 26.0 / 255.0];

fn rgb(r: u8, g: u8, b: u8) -> [f32; 3] {
    [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0]
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("world.k must be >= 2".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        if self.num_shapes > 0 && self.shape_classes.is_empty() {
            return Err(Error::Config(
                "world.shape_classes must be non-empty when num_shapes > 0".into(),
            ));
        }
        if self.shape_classes.iter().any(|c| c.class_id == BACKGROUND_CLASS) {
            return Err(Error::Config(
                "class id 0 is reserved for the background".into(),
            ));
        }
        if !(self.velocity_range[0] >= 0.0 && self.velocity_range[1] >= self.velocity_range[0]) {
            return Err(Error::Config("world.velocity_range must be ordered".into()));
        }
        Ok(())
    }

    /// Total class count including background.
    pub fn num_classes(&self) -> usize {
        self.shape_classes
            .iter()
            .map(|c| c.class_id as usize)
            .max()
            .unwrap_or(0)
            + 1
    }

    /// Class palette indexed by class id.
    pub fn palette(&self) -> Vec<[f32; 3]> {
        let mut pal = vec![BACKGROUND_COLOR; self.num_classes()];
        for c in &self.shape_classes {
            pal[c.class_id as usize] = c.color;
        }
        pal
    }

    /// Class ids of the moving (shape) classes, background excluded.
    pub fn moving_classes(&self) -> Vec<u8> {
        self.shape_classes.iter().map(|c| c.class_id).collect()
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 64,
            width: 64,
            num_shapes: 4,
            shape_classes: vec![
                ShapeClass { class_id: 1, color: rgb(230, 51, 51) },
                ShapeClass { class_id: 2, color: rgb(51, 230, 51) },
                ShapeClass { class_id: 3, color: rgb(64, 89, 242) },
                ShapeClass { class_id: 4, color: rgb(230, 217, 51) },
                ShapeClass { class_id: 5, color: rgb(217, 77, 217) },
            ],
            velocity_range: [0.5, 2.0],
            seed: 0,
            k: 25,
            num_clips: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeState {
    pub class_id: u8,
    pub kind: ShapeKind,
    /// Center position (row, col) in pixels.
    pub position: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Half-extent (squares) or radius (circles) in pixels.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    /// K x H x W x 3, values in [0,1].
    pub frames: Array4<f32>,
    /// K x H x W class ids.
    pub masks: Array3<u8>,
    /// Per-frame shape states, `shapes[t][i]`.
    pub shapes: Vec<Vec<ShapeState>>,
    pub clip_seed: u64,
}

/// Advance one shape by one frame with elastic reflection at the borders.
/// Away from walls this is exactly `p += v`.
fn step_shape(s: &mut ShapeState, h: f64, w: f64) {
    for (axis, extent) in [(0usize, h), (1usize, w)] {
        let lo = s.size;
        let hi = extent - s.size;
        let mut p = s.position[axis] + s.velocity[axis];
        let mut v = s.velocity[axis];
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        }
        s.position[axis] = p;
        s.velocity[axis] = v;
    }
}

fn render(shapes: &[ShapeState], h: usize, w: usize, palette: &[[f32; 3]]) -> (Array3<f32>, ndarray::Array2<u8>) {
    let mut mask = ndarray::Array2::<u8>::zeros((h, w));
    for s in shapes {
        let (cy, cx, r) = (s.position[0], s.position[1], s.size);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
        for y in y0..=y1.min(h - 1) {
            for x in x0..=x1.min(w - 1) {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = match s.kind {
                    ShapeKind::Square => (py - cy).abs() <= r && (px - cx).abs() <= r,
                    ShapeKind::Circle => {
                        (py - cy) * (py - cy) + (px - cx) * (px - cx) <= r * r
                    }
                };
                if inside {
                    mask[[y, x]] = s.class_id;
                }
            }
        }
    }
    let frame = recolor_mask(&mask, palette);
    (frame, mask)
}

/// Map a class mask back to pixels through the palette. By construction this
/// reproduces rendered frames exactly.
pub fn recolor_mask(mask: &ndarray::Array2<u8>, palette: &[[f32; 3]]) -> Array3<f32> {
    let (h, w) = mask.dim();
    let mut frame = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let c = palette[mask[[y, x]] as usize];
            frame[[y, x, 0]] = c[0];
            frame[[y, x, 1]] = c[1];
            frame[[y, x, 2]] = c[2];
        }
    }
    frame
}

/// Deterministic clip generation: a pure function of `(config.seed, clip_index)`.
pub fn generate_clip(config: &WorldConfig, clip_index: usize) -> Result<VideoSample> {
    config.validate()?;
    if clip_index >= config.num_clips {
        return Err(Error::Argument(format!(
            "clip_index {clip_index} out of range (num_clips = {})",
            config.num_clips
        )));
    }
    let clip_seed = config
        .seed
        .wrapping_mul(0x1000_0000_01B3)
        .wrapping_add(clip_index as u64);
    let mut rng = seeded_rng(clip_seed, 1);
    let (h, w) = (config.height as f64, config.width as f64);
    let min_dim = h.min(w);

    let mut shapes: Vec<ShapeState> = (0..config.num_shapes)
        .map(|i| {
            let class = &config.shape_classes[i % config.shape_classes.len()];
            let size = rng.gen_range(0.10..0.18) * min_dim;
            let position = [
                rng.gen_range(size..h - size),
                rng.gen_range(size..w - size),
            ];
            let speed_range = config.velocity_range;
            let mut vel = [0.0f64; 2];
            for v in vel.iter_mut() {
                let mag = rng.gen_range(speed_range[0]..=speed_range[1]);
                *v = if rng.gen_bool(0.5) { mag } else { -mag };
            }
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Square
            } else {
                ShapeKind::Circle
            };
            ShapeState {
                class_id: class.class_id,
                kind,
                position,
                velocity: vel,
                size,
            }
        })
        .collect();

    let palette = config.palette();
    let mut frames = Array4::<f32>::zeros((config.k, config.height, config.width, 3));
    let mut masks = Array3::<u8>::zeros((config.k, config.height, config.width));
    let mut states = Vec::with_capacity(config.k);
    for t in 0..config.k {
        if t > 0 {
            for s in shapes.iter_mut() {
                step_shape(s, h, w);
            }
        }
        let (frame, mask) = render(&shapes, config.height, config.width, &palette);
        frames.index_axis_mut(ndarray::Axis(0), t).assign(&frame);
        masks.index_axis_mut(ndarray::Axis(0), t).assign(&mask);
        states.push(shapes.clone());
    }
    Ok(VideoSample {
        frames,
        masks,
        shapes: states,
        clip_seed,
    })
}

/// Split a clip into context frames `1..=M` and future frames `M+1..=K`.
pub fn split_context_future(
    sample: &VideoSample,
    m: usize,
) -> Result<(Array4<f32>, Array4<f32>)> {
    let k = sample.frames.shape()[0];
    if m < 1 || m >= k {
        return Err(Error::Argument(format!(
            "context length M={m} must satisfy 1 <= M < K={k}"
        )));
    }
    let ctx = sample
        .frames
        .slice_axis(ndarray::Axis(0), ndarray::Slice::from(0..m))
        .to_owned();
    let fut = sample
        .frames
        .slice_axis(ndarray::Axis(0), ndarray::Slice::from(m..k))
        .to_owned();
    Ok((ctx, fut))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub clip_index: usize,
    pub split: String,
    pub clip_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub num_clips: usize,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub clips: Vec<ManifestEntry>,
}

/// Train/val split: clip_index % 5 == 4 goes to validation (80/20).
pub fn split_of(clip_index: usize) -> &'static str {
    if clip_index % 5 == 4 {
        "val"
    } else {
        "train"
    }
}

pub fn dataset_manifest(config: &WorldConfig) -> DatasetManifest {
    let clips = (0..config.num_clips)
        .map(|i| ManifestEntry {
            clip_index: i,
            split: split_of(i).to_string(),
            clip_seed: config
                .seed
                .wrapping_mul(0x1000_0000_01B3)
                .wrapping_add(i as u64),
        })
        .collect();
    DatasetManifest {
        num_clips: config.num_clips,
        k: config.k,
        height: config.height,
        width: config.width,
        num_classes: config.num_classes(),
        seed: config.seed,
        clips,
    }
}
