use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Clip, SampleError};
use crate::adcore::Tensor;

/// Stochastic clip augmentation. One parameter draw is shared by every frame
/// of a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the frame, `[min, max]`.
    pub crop_area: [f64; 2],
    pub aspect_ratio: [f64; 2],
    pub hflip_prob: f64,
    pub color_prob: f64,
    /// Brightness, contrast and saturation jitter `0.4 * s`, hue `0.1 * s`.
    pub color_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub out_side: usize,
}

impl AugmentConfig {
    pub fn pretrain(out_side: usize) -> Self {
        Self {
            crop_area: [0.2, 0.76],
            aspect_ratio: [3.0 / 4.0, 4.0 / 3.0],
            hflip_prob: 0.5,
            color_prob: 0.8,
            color_strength: 0.5,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            out_side,
        }
    }

    /// Horizontal flip and random resized crop only.
    pub fn finetune(out_side: usize) -> Self {
        Self {
            color_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..Self::pretrain(out_side)
        }
    }

    /// Deterministic full-frame resize.
    pub fn identity(out_side: usize) -> Self {
        Self {
            crop_area: [1.0, 1.0],
            hflip_prob: 0.0,
            color_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..Self::pretrain(out_side)
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let err = |m: &str| Err(SampleError::Augment(m.to_string()));
        let probs = [
            self.hflip_prob,
            self.color_prob,
            self.grayscale_prob,
            self.blur_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return err("probabilities must lie in [0, 1]");
        }
        let [lo, hi] = self.crop_area;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return err("crop area range must lie within (0, 1]");
        }
        if !(self.aspect_ratio[0] > 0.0 && self.aspect_ratio[0] <= self.aspect_ratio[1]) {
            return err("aspect ratio range must be positive and ordered");
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return err("blur sigma range must be positive and ordered");
        }
        if self.color_strength < 0.0 || self.out_side == 0 {
            return err("color strength must be >= 0 and out_side > 0");
        }
        Ok(())
    }
}

/// Working buffer `[3, t, side, side]`.
struct Buf {
    t: usize,
    side: usize,
    data: Vec<f32>,
}

impl Buf {
    fn plane(&self) -> usize {
        self.side * self.side
    }

    fn idx(&self, c: usize, f: usize, k: usize) -> usize {
        (c * self.t + f) * self.plane() + k
    }

    /// Applies `op` to every RGB pixel of frame `f`.
    fn map_rgb(&mut self, f: usize, mut op: impl FnMut([f32; 3]) -> [f32; 3]) {
        for k in 0..self.plane() {
            let ix = [self.idx(0, f, k), self.idx(1, f, k), self.idx(2, f, k)];
            let out = op([self.data[ix[0]], self.data[ix[1]], self.data[ix[2]]]);
            for c in 0..3 {
                self.data[ix[c]] = out[c].clamp(0.0, 1.0);
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

fn sample_crop(side: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Rect {
    let s = side as f64;
    let (lr0, lr1) = (cfg.aspect_ratio[0].ln(), cfg.aspect_ratio[1].ln());
    for _ in 0..10 {
        let area = rng.gen_range(cfg.crop_area[0]..=cfg.crop_area[1]) * s * s;
        let ratio = rng.gen_range(lr0..=lr1).exp();
        let w = (area * ratio).sqrt();
        let h = (area / ratio).sqrt();
        if w <= s && h <= s {
            let x0 = rng.gen_range(0.0..=s - w);
            let y0 = rng.gen_range(0.0..=s - h);
            return Rect { x0, y0, w, h };
        }
    }
    Rect {
        x0: 0.0,
        y0: 0.0,
        w: s,
        h: s,
    }
}

/// Bilinear resample of `rect` in every plane to `out x out` (pixel-centre
/// aligned, edge-clamped).
fn crop_resize(src: &[f32], planes: usize, side: usize, rect: Rect, out: usize) -> Vec<f32> {
    let axis = |o: usize, start: f64, len: f64| -> (usize, usize, f32) {
        let p = (start + (o as f64 + 0.5) * len / out as f64 - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out).map(|o| axis(o, rect.x0, rect.w)).collect();
    let ys: Vec<_> = (0..out).map(|o| axis(o, rect.y0, rect.h)).collect();
    let mut dst = Vec::with_capacity(planes * out * out);
    for p in src.chunks(side * side).take(planes) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * side + x0] * (1.0 - fx) + p[y0 * side + x1] * fx;
                let bottom = p[y1 * side + x0] * (1.0 - fx) + p[y1 * side + x1] * fx;
                dst.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    dst
}

/// Full-frame resize of a clip to `out x out`.
pub fn resize_clip(frames: &Tensor<f32>, out: usize) -> Tensor<f32> {
    let s = frames.shape();
    let (t, side) = (s[1], s[2]);
    let rect = Rect {
        x0: 0.0,
        y0: 0.0,
        w: side as f64,
        h: side as f64,
    };
    let data = crop_resize(frames.data(), 3 * t, side, rect, out);
    Tensor::new(vec![3, t, out, out], data).expect("shape")
}

fn gray(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn jitter(strength: f64, rng: &mut impl Rng) -> f32 {
    if strength <= 0.0 {
        return 1.0;
    }
    rng.gen_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
}

fn gaussian_kernel(sigma: f64, side: usize) -> Vec<f32> {
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, side.max(2) - 1);
    let w: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / total) as f32).collect()
}

fn blur_plane(p: &mut [f32], side: usize, kernel: &[f32]) {
    let r = kernel.len() / 2;
    let clamp = |i: isize| i.clamp(0, side as isize - 1) as usize;
    let mut tmp = vec![0f32; p.len()];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * p[y * side + clamp(x as isize + k as isize - r as isize)])
                .sum();
        }
    }
    for y in 0..side {
        for x in 0..side {
            p[y * side + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * tmp[clamp(y as isize + k as isize - r as isize) * side + x])
                .sum();
        }
    }
}

/// Random resized crop, horizontal flip, colour distortion, grayscale and
/// Gaussian blur, in that order, each behind its own probability gate.
pub fn augment(clip: &Clip, cfg: &AugmentConfig, rng: &mut impl Rng) -> Clip {
    let (t, side, out) = (clip.len(), clip.side(), cfg.out_side);

    let rect = sample_crop(side, cfg, rng);
    let mut buf = Buf {
        t,
        side: out,
        data: crop_resize(clip.frames.data(), 3 * t, side, rect, out),
    };

    if rng.gen_bool(cfg.hflip_prob) {
        for row in buf.data.chunks_mut(out) {
            row.reverse();
        }
    }

    if rng.gen_bool(cfg.color_prob) {
        let s = cfg.color_strength;
        let brightness = jitter(0.4 * s, rng);
        let contrast = jitter(0.4 * s, rng);
        let saturation = jitter(0.4 * s, rng);
        let hue = if s > 0.0 {
            rng.gen_range(-0.1 * s..=0.1 * s) as f32
        } else {
            0.0
        };
        for f in 0..t {
            buf.map_rgb(f, |p| p.map(|v| v * brightness));
            let mut mean = 0.0f32;
            buf.map_rgb(f, |p| {
                mean += gray(p);
                p
            });
            mean /= buf.plane() as f32;
            buf.map_rgb(f, |p| p.map(|v| (v - mean) * contrast + mean));
            buf.map_rgb(f, |p| {
                let g = gray(p);
                p.map(|v| (v - g) * saturation + g)
            });
            if hue != 0.0 {
                buf.map_rgb(f, |p| {
                    let [h, sat, v] = rgb_to_hsv(p);
                    hsv_to_rgb([h + hue, sat, v])
                });
            }
        }
    }

    if rng.gen_bool(cfg.grayscale_prob) {
        for f in 0..t {
            buf.map_rgb(f, |p| [gray(p); 3]);
        }
    }

    if rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        let kernel = gaussian_kernel(sigma, out);
        for p in buf.data.chunks_mut(out * out) {
            blur_plane(p, out, &kernel);
        }
    }

    for v in &mut buf.data {
        *v = v.clamp(0.0, 1.0);
    }
    Clip {
        frames: Tensor::new(vec![3, t, out, out], buf.data).expect("shape"),
        phi: clip.phi,
        video: clip.video,
    }
}
