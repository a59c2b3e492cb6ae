use serde::{Deserialize, Serialize};

use super::SampleError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumMode {
    /// Span grows for `hardening_epochs`, then stays at the maximum.
    Bounded,
    /// Span grows over the whole run; `hardening_epochs` is replaced by the
    /// total epoch count when the run config is resolved.
    FullTraining,
}

/// Temporal-span schedule, in frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub initial_span: usize,
    pub max_span: usize,
    pub hardening_epochs: usize,
    pub mode: CurriculumMode,
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.initial_span == 0 || self.initial_span > self.max_span {
            return Err(SampleError::Curriculum(format!(
                "need 1 <= initial_span ({}) <= max_span ({})",
                self.initial_span, self.max_span
            )));
        }
        if self.hardening_epochs == 0 {
            return Err(SampleError::Curriculum(
                "hardening_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Applies [`CurriculumMode::FullTraining`] for a run of `total_epochs`.
    pub fn resolved(&self, total_epochs: usize) -> Self {
        match self.mode {
            CurriculumMode::Bounded => self.clone(),
            CurriculumMode::FullTraining => Self {
                hardening_epochs: total_epochs.max(1),
                ..self.clone()
            },
        }
    }
}

/// `min(TS_m, TS_i + (TS_m - TS_i) / E_CL * e)`, rounded half away from zero.
pub fn temporal_span(epoch: usize, cfg: &CurriculumConfig) -> usize {
    let (lo, hi) = (cfg.initial_span as f64, cfg.max_span as f64);
    let grown = lo + (hi - lo) / cfg.hardening_epochs as f64 * epoch as f64;
    grown.min(hi).round() as usize
}

/// A scheduled span shorter than the clip would make sampling infeasible.
pub fn effective_span(span: usize, clip_len: usize) -> usize {
    span.max(clip_len)
}
