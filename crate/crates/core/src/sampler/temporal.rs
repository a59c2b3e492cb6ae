use rand::Rng;

use super::SampleError;
use crate::adcore::Tensor;
use crate::synthvid::{select_frames, Video};

/// Frames `start ..= start + span - 1` (1-based) of a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalWindow {
    pub start: usize,
    pub span: usize,
}

/// `t` consecutive frames cut from a video. `phi` is the 1-based start frame
/// in the source video, recorded before augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Tensor<f32>,
    pub phi: usize,
    pub video: usize,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.frames.shape()[2]
    }
}

/// Start `s` uniform on `[1, T - TS]`; `s = 1` when the span covers the video.
pub fn sample_window(
    frames: usize,
    span: usize,
    rng: &mut impl Rng,
) -> Result<TemporalWindow, SampleError> {
    if span > frames {
        return Err(SampleError::SpanTooLong { span, frames });
    }
    let start = if span == frames {
        1
    } else {
        rng.gen_range(1..=frames - span)
    };
    Ok(TemporalWindow { start, span })
}

/// Independent uniform clip starts within the window.
pub fn sample_clip_starts(
    window: TemporalWindow,
    rho: usize,
    clip_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, SampleError> {
    if rho < 2 {
        return Err(SampleError::TooFewPositives(rho));
    }
    if clip_len > window.span {
        return Err(SampleError::ClipTooLong {
            clip: clip_len,
            span: window.span,
        });
    }
    let last = window.start + window.span - clip_len;
    Ok((0..rho)
        .map(|_| rng.gen_range(window.start..=last))
        .collect())
}

pub fn sample_positive_clips(
    video: &Video,
    video_index: usize,
    window: TemporalWindow,
    rho: usize,
    clip_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Clip>, SampleError> {
    if window.start + window.span > video.len() + 1 {
        return Err(SampleError::SpanTooLong {
            span: window.start + window.span - 1,
            frames: video.len(),
        });
    }
    let starts = sample_clip_starts(window, rho, clip_len, rng)?;
    Ok(starts
        .into_iter()
        .map(|phi| cut_clip(video, video_index, phi, clip_len))
        .collect())
}

/// Clip of `clip_len` frames starting at 1-based frame `phi`.
pub fn cut_clip(video: &Video, video_index: usize, phi: usize, clip_len: usize) -> Clip {
    let indices: Vec<usize> = (phi - 1..phi - 1 + clip_len).collect();
    Clip {
        frames: select_frames(video, &indices),
        phi,
        video: video_index,
    }
}
