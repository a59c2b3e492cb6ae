//! Procedural labelled videos: a soft sprite following a class-specific
//! motion family over a background texture whose phase drifts each frame,
//! under a slow lighting swing shared by all videos.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::{Stream, Tensor};

/// Number of distinct motion families; class ids beyond this reuse a family
/// at a faster speed tier.
pub const MOTION_FAMILIES: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("invalid frame rate: target {target} (source {source_fps})")]
    InvalidFps { target: f64, source_fps: f64 },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("malformed video file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub videos_per_class: usize,
    /// Frames per video.
    pub frames: usize,
    /// Frame side in pixels.
    pub side: usize,
    pub fps: f64,
    /// Background phase change per frame, in radians.
    pub drift_rate: f64,
    /// Scale of the per-video colour variation: sprite saturation and the
    /// spread of the background base colour. 0 gives a grey scene.
    pub color_spread: f64,
    /// Mean amplitude of the background texture.
    pub texture_amplitude: f64,
    /// Amplitude of a slow grey lighting swing that advances at `drift_rate`.
    /// It follows the same schedule in every video, so it carries time but
    /// not identity.
    pub lighting_amplitude: f64,
    pub test_fraction: f64,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            videos_per_class: 50,
            frames: 64,
            side: 16,
            fps: 15.0,
            drift_rate: 0.05,
            color_spread: 0.1,
            texture_amplitude: 0.05,
            lighting_amplitude: 0.12,
            test_fraction: 0.2,
            master_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.videos_per_class < 2 {
            return bad("videos_per_class must be at least 2");
        }
        if self.frames < 2 || self.side < 4 {
            return bad("frames >= 2 and side >= 4 required");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        if !(self.drift_rate >= 0.0) {
            return bad("drift_rate must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.color_spread) {
            return bad("color_spread must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return bad("texture_amplitude must lie in [0, 0.5]");
        }
        if !(0.0..=0.5).contains(&self.lighting_amplitude) {
            return bad("lighting_amplitude must lie in [0, 0.5]");
        }
        Ok(())
    }
}

/// `frames` has shape `[3, T, S, S]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Pixels of one channel of one frame.
    pub fn plane(&self, channel: usize, frame: usize) -> &[f32] {
        let s = self.side();
        let t = self.len();
        &self.frames.data()[(channel * t + frame) * s * s..][..s * s]
    }
}

/// Identity of a generated video within a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoId {
    pub label: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<VideoId>,
    pub test: Vec<VideoId>,
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    speed: f64,
}

/// Random hue at random brightness, saturation scaled by `spread`.
fn random_color(rng: &mut impl Rng, spread: f64) -> [f64; 3] {
    let h = rng.gen_range(0.0..6.0);
    let v = rng.gen_range(0.75..1.0);
    let sat = spread * rng.gen_range(0.75..1.0);
    let x = 1.0 - (h % 2.0 - 1.0f64).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c: f64| v * (1.0 - sat * (1.0 - c)))
}

/// Sprite centre, blob width multiplier and opacity at frame `f`.
fn sprite_state(family: usize, f: f64, p: &MotionParams) -> (f64, f64, f64, f64) {
    let w = p.omega * f + p.phase;
    let (c, a) = (p.centre, p.amplitude);
    match family {
        0 => (c + a * w.sin(), p.anchor, 1.0, 1.0),
        1 => (p.anchor, c + a * w.sin(), 1.0, 1.0),
        2 => (c + a * w.cos(), c + p.turn * a * w.sin(), 1.0, 1.0),
        3 => (c + a * w.sin(), c + p.turn * a * w.sin(), 1.0, 1.0),
        4 => (
            p.anchor,
            p.anchor2,
            1.0,
            if w.sin() >= 0.0 { 1.0 } else { 0.0 },
        ),
        5 => (p.anchor, p.anchor2, 1.0 + 0.7 * w.sin(), 1.0),
        6 => (p.anchor, p.anchor2, 1.0, 1.0),
        _ => (c + a * w.sin(), c + 0.5 * a * (2.0 * w).sin(), 1.0, 1.0),
    }
}

struct MotionParams {
    omega: f64,
    phase: f64,
    centre: f64,
    amplitude: f64,
    anchor: f64,
    anchor2: f64,
    turn: f64,
}

/// Deterministic function of `(label, seed, config)`.
pub fn generate_video(label: usize, seed: u64, cfg: &DatasetConfig) -> Result<Video, DataError> {
    if label >= cfg.n_classes {
        return Err(DataError::InvalidLabel {
            label,
            n_classes: cfg.n_classes,
        });
    }
    let (t_len, s) = (cfg.frames, cfg.side);
    let sf = s as f64;
    let mut rng = Stream::new(seed).split("video", label as u64).rng();

    let family = label % MOTION_FAMILIES;
    let tier = (label / MOTION_FAMILIES) as f64;
    let period = rng.gen_range(14.0..18.0) / (1.0 + tier);
    let params = MotionParams {
        omega: 2.0 * PI / period,
        phase: rng.gen_range(0.0..2.0 * PI),
        centre: (sf - 1.0) / 2.0 + rng.gen_range(-0.5..0.5),
        amplitude: sf * rng.gen_range(0.22..0.28),
        anchor: rng.gen_range(0.3 * sf..0.7 * sf),
        anchor2: rng.gen_range(0.3 * sf..0.7 * sf),
        turn: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
    };
    let sigma = sf * rng.gen_range(0.08..0.11);
    let sprite = random_color(&mut rng, cfg.color_spread);
    let bg_base: [f64; 3] =
        std::array::from_fn(|_| 0.4 + cfg.color_spread * rng.gen_range(-0.2..0.2));
    let bg_amp = cfg.texture_amplitude * rng.gen_range(0.75..1.25);
    let waves: Vec<[Wave; 2]> = (0..3)
        .map(|_| {
            std::array::from_fn(|_| Wave {
                fx: rng.gen_range(-2.0..2.0),
                fy: rng.gen_range(-2.0..2.0),
                phase: rng.gen_range(0.0..2.0 * PI),
                speed: rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            })
        })
        .collect();

    let plane = s * s;
    let mut data = vec![0f32; 3 * t_len * plane];
    for f in 0..t_len {
        let ff = f as f64;
        let (cx, cy, width, alpha) = sprite_state(family, ff, &params);
        let sig = sigma * width;
        let light = cfg.lighting_amplitude * (cfg.drift_rate * ff).sin();
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f64, y as f64);
                let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                let a = alpha * (-d2 / (2.0 * sig * sig)).exp();
                for (c, ch_waves) in waves.iter().enumerate() {
                    let tex: f64 = ch_waves
                        .iter()
                        .map(|w| {
                            (2.0 * PI * (w.fx * xf + w.fy * yf) / sf
                                + w.phase
                                + cfg.drift_rate * w.speed * ff)
                                .sin()
                        })
                        .sum::<f64>()
                        / 2.0;
                    let bg = bg_base[c] + light + bg_amp * tex;
                    let v = bg * (1.0 - a) + sprite[c] * a;
                    data[(c * t_len + f) * plane + y * s + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let frames = Tensor::new(vec![3, t_len, s, s], data).expect("shape");
    Ok(Video {
        frames,
        label,
        fps: cfg.fps,
        seed,
    })
}

/// Stratified, deterministic train/test partition.
pub fn make_splits(cfg: &DatasetConfig) -> Result<Splits, DataError> {
    cfg.validate()?;
    let root = Stream::new(cfg.master_seed);
    let vpc = cfg.videos_per_class;
    let n_test = ((vpc as f64 * cfg.test_fraction).round() as usize).clamp(1, vpc - 1);
    let mut splits = Splits {
        train: Vec::new(),
        test: Vec::new(),
    };
    for label in 0..cfg.n_classes {
        let mut ids: Vec<VideoId> = (0..vpc)
            .map(|i| VideoId {
                label,
                seed: root.split("video-seed", (label * vpc + i) as u64).key(),
            })
            .collect();
        ids.shuffle(&mut root.split("split", label as u64).rng());
        splits.test.extend_from_slice(&ids[..n_test]);
        splits.train.extend_from_slice(&ids[n_test..]);
    }
    Ok(splits)
}

/// Generates videos in parallel; output order follows `ids`.
pub fn generate_all(ids: &[VideoId], cfg: &DatasetConfig) -> Result<Vec<Video>, DataError> {
    use rayon::prelude::*;
    ids.par_iter()
        .map(|id| generate_video(id.label, id.seed, cfg))
        .collect()
}

/// Train and test videos of the split derived from `cfg`.
pub fn generate_splits(cfg: &DatasetConfig) -> Result<(Vec<Video>, Vec<Video>), DataError> {
    let splits = make_splits(cfg)?;
    Ok((
        generate_all(&splits.train, cfg)?,
        generate_all(&splits.test, cfg)?,
    ))
}

/// Keeps every `round(source/target)`-th frame starting from frame 0.
pub fn resample_fps(video: &Video, target_fps: f64) -> Result<Video, DataError> {
    if !(target_fps > 0.0) || target_fps > video.fps {
        return Err(DataError::InvalidFps {
            target: target_fps,
            source_fps: video.fps,
        });
    }
    let stride = ((video.fps / target_fps).round() as usize).max(1);
    let indices: Vec<usize> = (0..video.len()).step_by(stride).collect();
    let frames = select_frames(video, &indices);
    Ok(Video {
        frames,
        label: video.label,
        fps: video.fps / stride as f64,
        seed: video.seed,
    })
}

/// Copies the listed frame indices (0-based) into a new `[3, n, S, S]` tensor.
pub fn select_frames(video: &Video, indices: &[usize]) -> Tensor<f32> {
    let s = video.side();
    let mut data = Vec::with_capacity(3 * indices.len() * s * s);
    for c in 0..3 {
        for &f in indices {
            data.extend_from_slice(video.plane(c, f));
        }
    }
    Tensor::new(vec![3, indices.len(), s, s], data).expect("shape")
}

const MAGIC: &[u8] = b"CVID1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    label: usize,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "S")]
    side: usize,
    fps: f64,
    seed: u64,
}

/// `CVID1\n`, one JSON header line, then little-endian f32 pixels in C order.
pub fn write_video(path: &Path, video: &Video) -> Result<(), DataError> {
    let header = Header {
        label: video.label,
        frames: video.len(),
        side: video.side(),
        fps: video.fps,
        seed: video.seed,
    };
    let mut out = Vec::with_capacity(64 + video.frames.len() * 4);
    out.extend_from_slice(MAGIC);
    serde_json::to_writer(&mut out, &header).map_err(|e| DataError::Format(e.to_string()))?;
    out.push(b'\n');
    for v in video.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<Video, DataError> {
    let bytes = fs::read(path)?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| DataError::Format("bad magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DataError::Format("missing header".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| DataError::Format(e.to_string()))?;
    let body = &rest[nl + 1..];
    let n = 3 * header.frames * header.side * header.side;
    if body.len() != n * 4 {
        return Err(DataError::Format(format!(
            "expected {} payload bytes, found {}",
            n * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let frames = Tensor::new(vec![3, header.frames, header.side, header.side], data)
        .map_err(|e| DataError::Format(e.to_string()))?;
    Ok(Video {
        frames,
        label: header.label,
        fps: header.fps,
        seed: header.seed,
    })
}
