//! Optimizer, learning-rate schedule, run configuration, pretraining and
//! downstream training.

mod downstream;
mod optim;
mod pretrain;

pub use downstream::{finetune, DownstreamOutcome};
pub use optim::{decays, lr_at, sgd_step, OptimConfig, OptimState};
pub use pretrain::{pretrain, EpochMetrics, PretrainOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::AdError;
use crate::eval::{ClipGeometry, EvalError, InferenceConfig};
use crate::loss::{LossConfig, LossError, LossParts};
use crate::model::{EncoderConfig, ModelError};
use crate::sampler::{AugmentConfig, CurriculumConfig, CurriculumMode, SampleError};
use crate::synthvid::{DataError, DatasetConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite {what} at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error(
        "collapsed {what} at epoch {epoch}, step {step} (zero norm, training diverged): {detail}"
    )]
    Collapsed {
        what: String,
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGrad(String),
    #[error("non-finite parameter `{0}` after update")]
    NonFiniteParam(String),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{0}")]
    Callback(String),
}

impl TrainError {
    pub(crate) fn non_finite(
        what: &str,
        epoch: usize,
        step: usize,
        parts: Option<LossParts>,
        videos: &[usize],
    ) -> Self {
        let detail = match parts {
            Some(p) => format!(
                "l_mi={} l_cs={} l_total={} videos={videos:?}",
                p.l_mi, p.l_cs, p.l_total
            ),
            None => format!("videos={videos:?}"),
        };
        TrainError::NonFinite {
            what: what.to_string(),
            epoch,
            step,
            detail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Pretrain,
    Finetune,
    Linear,
}

/// Classifier training after pretraining (linear probe or full fine-tune).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Pretraining epochs.
    pub epochs: usize,
    /// Videos per step; each contributes `loss.rho` clips.
    pub batch_size: usize,
    /// Frames per clip.
    pub clip_len: usize,
    /// Momentum-encoder coefficient `m`.
    pub encoder_momentum: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub dataset: DatasetConfig,
    pub curriculum: CurriculumConfig,
    pub augment: AugmentConfig,
    pub model: EncoderConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub downstream: DownstreamConfig,
    pub inference: InferenceConfig,
    pub retrieval_ks: Vec<usize>,
}

impl RunConfig {
    /// CPU-sized defaults: 8 classes of 64-frame 16 px videos, 30 epochs.
    pub fn desk() -> Self {
        let side = 16;
        // the full-size crop and blur ranges erase a 2-3 px sprite at 16 px
        let augment = AugmentConfig {
            crop_area: [0.6, 0.76],
            blur_sigma: [0.1, 0.5],
            ..AugmentConfig::pretrain(side)
        };
        Self {
            mode: Mode::Pretrain,
            seed: 0,
            epochs: 30,
            batch_size: 8,
            clip_len: 8,
            encoder_momentum: 0.99,
            checkpoint_every: 0,
            dataset: DatasetConfig::default(),
            curriculum: CurriculumConfig {
                initial_span: 8,
                max_span: 48,
                hardening_epochs: 15,
                mode: CurriculumMode::Bounded,
            },
            augment: augment.clone(),
            model: EncoderConfig::desk(),
            loss: LossConfig::desk(),
            optim: OptimConfig {
                base_lr: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
                warmup_epochs: 5,
            },
            downstream: DownstreamConfig {
                epochs: 30,
                batch_size: 16,
                optim: OptimConfig {
                    base_lr: 0.05,
                    momentum: 0.9,
                    weight_decay: 1e-4,
                    warmup_epochs: 0,
                },
                augment: AugmentConfig {
                    color_prob: 0.0,
                    grayscale_prob: 0.0,
                    blur_prob: 0.0,
                    ..augment
                },
            },
            inference: InferenceConfig::desk(),
            retrieval_ks: vec![1, 5, 10, 20, 50],
        }
    }

    /// Full-size hyperparameters. Constructible and valid, far too large to
    /// run on a CPU with the reference kernels.
    pub fn paper_scale() -> Self {
        let side = 112;
        let desk = Self::desk();
        Self {
            epochs: 100,
            batch_size: 64,
            clip_len: 16,
            encoder_momentum: 0.999,
            dataset: DatasetConfig {
                frames: 150,
                side: 128,
                ..desk.dataset
            },
            curriculum: CurriculumConfig {
                initial_span: 32,
                max_span: 100,
                hardening_epochs: 50,
                mode: CurriculumMode::Bounded,
            },
            augment: AugmentConfig::pretrain(side),
            model: EncoderConfig::paper_scale(),
            loss: LossConfig::paper_scale(),
            downstream: DownstreamConfig {
                epochs: 100,
                augment: AugmentConfig::finetune(side),
                ..desk.downstream
            },
            inference: InferenceConfig::paper_scale(),
            ..desk
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper-scale" => Some(Self::paper_scale()),
            _ => None,
        }
    }

    /// The same run with the curriculum and/or the context-similarity loss
    /// switched off. Without the curriculum the span is `max_span` from the
    /// first epoch.
    pub fn ablated(&self, curriculum: bool, cs_loss: bool) -> Self {
        let mut cfg = self.clone();
        if !curriculum {
            cfg.curriculum.initial_span = cfg.curriculum.max_span;
        }
        if !cs_loss {
            cfg.loss.cs_weight = 0.0;
        }
        cfg
    }

    pub fn geometry(&self) -> ClipGeometry {
        ClipGeometry {
            clip_len: self.clip_len,
            out_side: self.augment.out_side,
        }
    }

    /// Curriculum with the run length applied.
    pub fn curriculum_resolved(&self) -> CurriculumConfig {
        self.curriculum.resolved(self.epochs)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.dataset.validate()?;
        self.curriculum.validate()?;
        self.augment.validate()?;
        self.downstream.augment.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.inference.validate()?;
        self.optim.validate()?;
        self.downstream.optim.validate()?;
        if self.epochs == 0
            || self.batch_size == 0
            || self.downstream.epochs == 0
            || self.downstream.batch_size == 0
        {
            return bad("epochs and batch sizes must be positive".into());
        }
        if self.clip_len == 0 || self.clip_len > self.dataset.frames {
            return bad(format!(
                "clip_len {} must lie in 1..={}",
                self.clip_len, self.dataset.frames
            ));
        }
        if self.curriculum.max_span > self.dataset.frames {
            return bad(format!(
                "max_span {} exceeds the {} frames per video",
                self.curriculum.max_span, self.dataset.frames
            ));
        }
        if self.augment.out_side > self.dataset.side
            || self.downstream.augment.out_side != self.augment.out_side
        {
            return bad(
                "augment out_side must match downstream out_side and not exceed dataset.side"
                    .into(),
            );
        }
        if !(0.0..=1.0).contains(&self.encoder_momentum) {
            return bad(format!(
                "encoder_momentum {} outside [0, 1]",
                self.encoder_momentum
            ));
        }
        if self.model.in_channels != 3 {
            return bad("model.in_channels must be 3 for RGB clips".into());
        }
        if self.retrieval_ks.contains(&0) {
            return bad("retrieval K must be >= 1".into());
        }
        Ok(())
    }
}
