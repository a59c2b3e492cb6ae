use rayon::prelude::*;

use super::pretrain::collect_grads;
use super::{lr_at, sgd_step, OptimState, RunConfig, TrainError};
use crate::adcore::{Graph, Stream, Tensor};
use crate::eval::{accuracy, inference_views, predict_all};
use crate::model::{classify, encode, init_cls_head, stack_clips, ModelState, ParamStore};
use crate::sampler::{augment, cut_clip, Clip};
use crate::synthvid::Video;

pub struct DownstreamOutcome {
    /// Input state with the trained classifier (and encoder, unless frozen).
    pub state: ModelState<f32>,
    /// Mean cross-entropy per epoch.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Per-dimension `(mean, 1 / std)` of encoder features over the test-time
/// views of `videos`. Constant dimensions get a zero scale.
fn feature_stats(
    cfg: &RunConfig,
    state: &ModelState<f32>,
    videos: &[Video],
) -> Result<(Vec<f32>, Vec<f32>), TrainError> {
    let geom = cfg.geometry();
    let feats = videos
        .par_iter()
        .map(|v| Ok(state.features(&inference_views(v, geom, &cfg.inference)?)?))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let n = cfg.model.feature_dim();
    let (mut sum, mut sq, mut count) = (vec![0.0f64; n], vec![0.0f64; n], 0usize);
    for f in &feats {
        for row in f.data().chunks(n) {
            for (j, &x) in row.iter().enumerate() {
                sum[j] += x as f64;
                sq[j] += (x as f64) * (x as f64);
            }
            count += 1;
        }
    }
    let c = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
    let sd: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / c - m * m).max(0.0).sqrt())
        .collect();
    // Near-constant dimensions are not blown up beyond a tenth of the typical scale.
    let floor = 0.1 * (sd.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    let inv: Vec<f32> = sd
        .iter()
        .map(|&s| {
            if s > 1e-6 {
                (1.0 / s.max(floor)) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok((mean.into_iter().map(|m| m as f32).collect(), inv))
}

/// Rewrites `W ((x - mu) * s) + b` as a plain linear layer on `x`.
fn fold_standardization(cls: &mut ParamStore<f32>, mean: &[f32], inv: &[f32]) {
    let classes = cls.get("cls.bias").map_or(0, |b| b.len());
    let mut shift = vec![0.0f64; classes];
    if let Some(w) = cls.get_mut("cls.weight") {
        for (j, row) in w.data_mut().chunks_mut(classes).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v *= inv[j];
                shift[c] += *v as f64 * mean[j] as f64;
            }
        }
    }
    if let Some(b) = cls.get_mut("cls.bias") {
        for (v, s) in b.data_mut().iter_mut().zip(shift) {
            *v = (*v as f64 - s) as f32;
        }
    }
}

fn random_clip(cfg: &RunConfig, video: &Video, index: usize, stream: Stream) -> Clip {
    let mut rng = stream.rng();
    let last = video.len() - cfg.clip_len + 1;
    let phi = rand::Rng::gen_range(&mut rng, 1..=last);
    augment(
        &cut_clip(video, index, phi, cfg.clip_len),
        &cfg.downstream.augment,
        &mut rng,
    )
}

/// Trains a fresh linear classifier on top of the encoder of `init`, with the
/// projection head dropped. With `freeze_encoder` only the classifier moves
/// (linear evaluation); otherwise the encoder is fine-tuned too.
///
/// For linear evaluation the frozen features are standardized with their
/// statistics on the training videos while the classifier trains; the fixed
/// affine map is folded into the classifier at the end, so the result is an
/// ordinary linear layer on raw features. Fine-tuning uses raw features.
pub fn finetune(
    cfg: &RunConfig,
    init: &ModelState<f32>,
    train: &[Video],
    test: &[Video],
    freeze_encoder: bool,
) -> Result<DownstreamOutcome, TrainError> {
    cfg.validate()?;
    if init.config != cfg.model {
        return Err(TrainError::Config(
            "checkpoint encoder differs from model config".into(),
        ));
    }
    if train.is_empty() || test.is_empty() {
        return Err(TrainError::Config("empty train or test set".into()));
    }
    let dc = &cfg.downstream;
    let root = Stream::new(cfg.seed).split(if freeze_encoder { "linear" } else { "finetune" }, 0);
    let mut enc = init.encoder_params();
    let mut cls =
        init_cls_head::<f32>(&cfg.model, cfg.dataset.n_classes, root.split("cls-head", 0));
    let mut opt_enc = OptimState::new(&enc, &dc.optim);
    let mut opt_cls = OptimState::new(&cls, &dc.optim);
    let (mean, inv) = if freeze_encoder {
        feature_stats(cfg, init, train)?
    } else {
        let n = cfg.model.feature_dim();
        (vec![0.0; n], vec![1.0; n])
    };
    let n = train.len();
    let steps_per_epoch = n.div_ceil(dc.batch_size);
    let mut losses = Vec::with_capacity(dc.epochs);
    let mut step = 0;

    for epoch in 0..dc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut root.split("shuffle", epoch as u64).rng(),
        );
        let mut total = 0.0;
        for (b, ids) in order.chunks(dc.batch_size).enumerate() {
            let base = (epoch * n + b * dc.batch_size) as u64;
            let clips: Vec<Clip> = ids
                .par_iter()
                .enumerate()
                .map(|(slot, &vi)| {
                    random_clip(
                        cfg,
                        &train[vi],
                        vi,
                        root.split("sample", base + slot as u64),
                    )
                })
                .collect();
            let labels: Vec<usize> = ids.iter().map(|&vi| train[vi].label).collect();
            let x = stack_clips::<f32>(&clips)?;

            let mut g = Graph::new();
            let pe = enc.bind(&mut g, !freeze_encoder);
            let pc = cls.bind(&mut g, true);
            let xv = g.constant(x);
            let f = encode(&mut g, &pe, &cfg.model, xv)?;
            let rows = ids.len();
            let scale = g.constant(Tensor::new(vec![rows, inv.len()], inv.repeat(rows))?);
            let shift = g.constant(Tensor::from_vec(
                mean.iter().zip(&inv).map(|(m, s)| -m * s).collect(),
            ));
            let f = g.mul(f, scale)?;
            let f = g.add_bias(f, shift)?;
            let logits = classify(&mut g, &pc, f)?;
            let lse = g.log_sum_exp(logits, None)?;
            let picked = g.pick_per_row(logits, &labels)?;
            let nll = g.sub(lse, picked)?;
            let loss = g.mean(nll);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::non_finite(
                    "cross-entropy",
                    epoch,
                    step,
                    None,
                    ids,
                ));
            }
            g.backward(loss)?;
            let lr = lr_at(step, steps_per_epoch, dc.epochs, &dc.optim);
            let grads = collect_grads(&g, &pc, &cls);
            sgd_step(&mut cls, &grads, lr, &mut opt_cls)?;
            if !freeze_encoder {
                let grads = collect_grads(&g, &pe, &enc);
                sgd_step(&mut enc, &grads, lr, &mut opt_enc)?;
            }
            total += value;
            step += 1;
        }
        losses.push(total / steps_per_epoch as f64);
    }

    let mut state = init.clone();
    for (name, t) in enc.iter() {
        state.online.insert(name.clone(), t.clone());
    }
    fold_standardization(&mut cls, &mean, &inv);
    state.cls_head = Some(cls);
    let geom = cfg.geometry();
    let score = |set: &[Video]| -> Result<f64, TrainError> {
        let preds = predict_all(set, &state, geom, &cfg.inference)?;
        Ok(accuracy(
            &preds,
            &set.iter().map(|v| v.label).collect::<Vec<_>>(),
        )?)
    };
    let train_accuracy = score(train)?;
    let test_accuracy = score(test)?;
    Ok(DownstreamOutcome {
        state,
        losses,
        train_accuracy,
        test_accuracy,
    })
}
