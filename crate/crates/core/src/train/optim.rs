use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::adcore::{Real, Tensor};
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config(
                "need momentum in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at the end of
/// `epochs`.
pub fn lr_at(step: usize, steps_per_epoch: usize, epochs: usize, cfg: &OptimConfig) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    let total = (epochs * steps_per_epoch).max(warm);
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    if total == warm {
        return cfg.base_lr;
    }
    let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Whether weight decay applies: not to biases or per-channel affine parameters.
pub fn decays(name: &str) -> bool {
    ![".bias", ".gamma", ".beta"]
        .iter()
        .any(|s| name.ends_with(s))
}

/// Velocity buffers of momentum SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<F> {
    pub velocity: ParamStore<F>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<F: Real> OptimState<F> {
    pub fn new(params: &ParamStore<F>, cfg: &OptimConfig) -> Self {
        let mut velocity = ParamStore::new();
        for (name, t) in params.iter() {
            velocity.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Self {
            velocity,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// `v <- mu * v + (g + wd * theta)`, `theta <- theta - lr * v`.
pub fn sgd_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &ParamStore<F>,
    lr: f64,
    state: &mut OptimState<F>,
) -> Result<(), TrainError> {
    if !params.same_layout(grads) || !params.same_layout(&state.velocity) {
        return Err(TrainError::Config(
            "parameter, gradient and velocity layouts differ".into(),
        ));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(TrainError::NonFiniteGrad(name.clone()));
    }
    let (mu, lr) = (F::from_f64c(state.momentum), F::from_f64c(lr));
    for (((name, p), (_, g)), (_, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.velocity.iter_mut())
    {
        let wd = if decays(name) {
            F::from_f64c(state.weight_decay)
        } else {
            F::zero()
        };
        for ((x, &gx), vx) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vx = mu * *vx + (gx + wd * *x);
            *x -= lr * *vx;
        }
    }
    match params.iter().find(|(_, p)| !p.all_finite()) {
        Some((name, _)) => Err(TrainError::NonFiniteParam(name.clone())),
        None => Ok(()),
    }
}
