//! Positive-clip sampling from a curriculum-controlled temporal window, and
//! the stochastic clip augmentation pipeline.

mod augment;
mod curriculum;
mod temporal;

pub use augment::{augment, resize_clip, AugmentConfig};
pub use curriculum::{effective_span, temporal_span, CurriculumConfig, CurriculumMode};
pub use temporal::{
    cut_clip, sample_clip_starts, sample_positive_clips, sample_window, Clip, TemporalWindow,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("temporal span {span} exceeds video length {frames}")]
    SpanTooLong { span: usize, frames: usize },
    #[error("clip length {clip} exceeds temporal span {span}")]
    ClipTooLong { clip: usize, span: usize },
    #[error("need at least two positives per group, got {0}")]
    TooFewPositives(usize),
    #[error("invalid curriculum: {0}")]
    Curriculum(String),
    #[error("invalid augmentation config: {0}")]
    Augment(String),
}
