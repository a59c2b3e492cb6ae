use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lr_at, sgd_step, OptimState, RunConfig, TrainError};
use crate::adcore::{AdError, Graph, Real, Stream, Tensor};
use crate::loss::{concur_loss, KeyQueue, LossParts, PositiveBatch};
use crate::model::{
    encode, momentum_update, project, stack_clips, Bound, ModelError, ModelState, ParamStore,
};
use crate::sampler::{
    augment, effective_span, sample_positive_clips, sample_window, temporal_span, Clip,
};
use crate::synthvid::Video;

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Temporal span used for the epoch, after clamping to the clip length.
    pub ts: usize,
    pub l_mi: f64,
    pub l_cs: f64,
    pub l_total: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub state: ModelState<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub queue: KeyQueue,
    pub steps: usize,
}

pub(crate) fn collect_grads<F: Real>(
    g: &Graph<F>,
    bound: &Bound,
    params: &ParamStore<F>,
) -> ParamStore<F> {
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        let grad = bound
            .var(name)
            .and_then(|v| g.grad(v))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        out.insert(name.clone(), grad);
    }
    out
}

/// Positive clips for one video, augmented; every random draw comes from `stream`.
fn positives(
    cfg: &RunConfig,
    video: &Video,
    index: usize,
    span: usize,
    stream: Stream,
) -> Result<Vec<Clip>, TrainError> {
    let mut rng = stream.rng();
    let window = sample_window(video.len(), span, &mut rng)?;
    let clips = sample_positive_clips(video, index, window, cfg.loss.rho, cfg.clip_len, &mut rng)?;
    Ok(clips
        .iter()
        .map(|c| augment(c, &cfg.augment, &mut rng))
        .collect())
}

/// Self-supervised pretraining. `on_epoch` sees every epoch's metrics and the
/// state after it; an error from it stops the run.
pub fn pretrain<C>(
    cfg: &RunConfig,
    train: &[Video],
    mut on_epoch: C,
) -> Result<PretrainOutcome, TrainError>
where
    C: FnMut(&EpochMetrics, &ModelState<f32>) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let root = Stream::new(cfg.seed);
    let mut state = ModelState::<f32>::init(&cfg.model, root.split("init", 0))?;
    let mut opt_online = OptimState::new(&state.online, &cfg.optim);
    let mut opt_cs = OptimState::new(&state.cs_head, &cfg.optim);
    let mut queue = KeyQueue::new(cfg.loss.queue_capacity, cfg.model.embed_dim);
    let curriculum = cfg.curriculum_resolved();
    let m = cfg.encoder_momentum as f32;
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let span = effective_span(temporal_span(epoch, &curriculum), cfg.clip_len);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut root.split("shuffle", epoch as u64).rng(),
        );
        let mut sum = LossParts::default();
        let first_lr = lr_at(step, steps_per_epoch, cfg.epochs, &cfg.optim);

        for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
            let base = (epoch * n + b * cfg.batch_size) as u64;
            let groups = ids
                .par_iter()
                .enumerate()
                .map(|(slot, &vi)| {
                    positives(
                        cfg,
                        &train[vi],
                        vi,
                        span,
                        root.split("sample", base + slot as u64),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let clips: Vec<Clip> = groups.into_iter().flatten().collect();
            let phis: Vec<usize> = clips.iter().map(|c| c.phi).collect();
            let x = stack_clips::<f32>(&clips)?;

            // a zero-norm embedding only arises once the weights have blown up
            let collapsed = |what: &str, e: ModelError| match e {
                ModelError::Ad(AdError::Degenerate(_)) => TrainError::Collapsed {
                    what: what.to_string(),
                    epoch,
                    step,
                    detail: format!("videos={ids:?}"),
                },
                other => other.into(),
            };
            let keys = {
                let mut g = Graph::new();
                let p = state.momentum.bind(&mut g, false);
                let xv = g.constant(x.clone());
                let f = encode(&mut g, &p, &cfg.model, xv)?;
                let z = project(&mut g, &p, f).map_err(|e| collapsed("momentum embeddings", e))?;
                g.value(z).clone()
            };
            if keys.data().iter().any(|v| !v.is_finite()) {
                return Err(TrainError::non_finite(
                    "momentum embeddings",
                    epoch,
                    step,
                    None,
                    ids,
                ));
            }

            let mut g = Graph::new();
            let online = state.online.bind(&mut g, true);
            let cs = state.cs_head.bind(&mut g, cfg.loss.cs_weight > 0.0);
            let xv = g.constant(x);
            let f = encode(&mut g, &online, &cfg.model, xv)?;
            let q = project(&mut g, &online, f).map_err(|e| collapsed("online embeddings", e))?;
            if g.value(q).data().iter().any(|v| !v.is_finite()) {
                return Err(TrainError::non_finite(
                    "online embeddings",
                    epoch,
                    step,
                    None,
                    ids,
                ));
            }
            let snapshot = queue.snapshot::<f32>();
            let batch = PositiveBatch {
                queries: q,
                keys: &keys,
                phis: &phis,
                clip_len: cfg.clip_len,
            };
            let (loss, parts) = concur_loss(&mut g, &batch, snapshot.as_ref(), &cs, &cfg.loss)?;
            if !parts.l_total.is_finite() {
                return Err(TrainError::non_finite(
                    "loss",
                    epoch,
                    step,
                    Some(parts),
                    ids,
                ));
            }
            g.backward(loss)?;

            let lr = lr_at(step, steps_per_epoch, cfg.epochs, &cfg.optim);
            let dump = |e: TrainError| match e {
                TrainError::NonFiniteGrad(name) => TrainError::non_finite(
                    &format!("gradient of `{name}`"),
                    epoch,
                    step,
                    Some(parts),
                    ids,
                ),
                TrainError::NonFiniteParam(name) => TrainError::non_finite(
                    &format!("parameter `{name}`"),
                    epoch,
                    step,
                    Some(parts),
                    ids,
                ),
                other => other,
            };
            let grads = collect_grads(&g, &online, &state.online);
            sgd_step(&mut state.online, &grads, lr, &mut opt_online).map_err(dump)?;
            if cfg.loss.cs_weight > 0.0 {
                let grads = collect_grads(&g, &cs, &state.cs_head);
                sgd_step(&mut state.cs_head, &grads, lr, &mut opt_cs).map_err(dump)?;
            }
            momentum_update(&state.online, &mut state.momentum, m)?;
            queue.enqueue(&keys)?;

            sum.l_mi += parts.l_mi;
            sum.l_cs += parts.l_cs;
            sum.l_total += parts.l_total;
            step += 1;
        }

        let k = steps_per_epoch as f64;
        let row = EpochMetrics {
            epoch,
            ts: span,
            l_mi: sum.l_mi / k,
            l_cs: sum.l_cs / k,
            l_total: sum.l_total / k,
            lr: first_lr,
        };
        on_epoch(&row, &state)?;
        metrics.push(row);
    }
    Ok(PretrainOutcome {
        state,
        metrics,
        queue,
        steps: step,
    })
}
