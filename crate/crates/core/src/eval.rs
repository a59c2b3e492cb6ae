//! Multi-clip inference, top-1 accuracy and nearest-neighbour retrieval.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::{Graph, Tensor};
use crate::model::{classify, encode, standardize_pixels, ModelError, ModelState};
use crate::sampler::resize_clip;
use crate::synthvid::{select_frames, Video};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("video has {frames} frames, shorter than the clip length {clip}")]
    VideoTooShort { frames: usize, clip: usize },
    #[error("model has no classification head")]
    NoClassifier,
    #[error("K = {k} exceeds index size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("embedding dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
}

/// Clips per video at test time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub n_clips: usize,
    pub n_crops: usize,
}

impl InferenceConfig {
    pub fn desk() -> Self {
        Self {
            n_clips: 4,
            n_crops: 1,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            n_clips: 10,
            n_crops: 3,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_clips == 0 || self.n_crops == 0 {
            return Err(EvalError::Invalid(
                "n_clips and n_crops must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Where clips are cut and how big they are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipGeometry {
    pub clip_len: usize,
    pub out_side: usize,
}

/// Uniformly spaced 1-based clip starts; a single clip is centred.
pub fn clip_starts(frames: usize, clip_len: usize, n: usize) -> Result<Vec<usize>, EvalError> {
    if clip_len > frames || clip_len == 0 {
        return Err(EvalError::VideoTooShort {
            frames,
            clip: clip_len,
        });
    }
    let room = frames - clip_len;
    Ok(match n {
        0 => Vec::new(),
        1 => vec![1 + room / 2],
        _ => (0..n)
            .map(|i| 1 + ((i * room) as f64 / (n - 1) as f64).round() as usize)
            .collect(),
    })
}

/// Offsets of `n` crops of size `out` tiling a side of length `long`.
fn crop_offsets(long: usize, out: usize, n: usize) -> Vec<usize> {
    let room = long - out;
    match n {
        1 => vec![room / 2],
        _ => (0..n)
            .map(|i| ((i * room) as f64 / (n - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Test-time views of a video, `[views, 3, t, s, s]`, temporal-major, with
/// standardized pixels.
///
/// Frames are resized so the short side equals `out_side`; crops then tile
/// the long side. Square frames give coinciding crops.
pub fn inference_views(
    video: &Video,
    geom: ClipGeometry,
    cfg: &InferenceConfig,
) -> Result<Tensor<f32>, EvalError> {
    cfg.validate()?;
    let starts = clip_starts(video.len(), geom.clip_len, cfg.n_clips)?;
    let out = geom.out_side;
    let offsets = crop_offsets(out, out, cfg.n_crops);
    let per = 3 * geom.clip_len * out * out;
    let mut data = Vec::with_capacity(starts.len() * offsets.len() * per);
    for &s in &starts {
        let idx: Vec<usize> = (s - 1..s - 1 + geom.clip_len).collect();
        let mut clip = resize_clip(&select_frames(video, &idx), out).into_data();
        standardize_pixels(&mut clip);
        for _ in &offsets {
            data.extend_from_slice(&clip);
        }
    }
    let n = starts.len() * offsets.len();
    Ok(Tensor::new(vec![n, 3, geom.clip_len, out, out], data).map_err(ModelError::from)?)
}

fn clip_features(state: &ModelState<f32>, views: &Tensor<f32>) -> Result<Tensor<f32>, EvalError> {
    Ok(state.features(views)?)
}

/// Mean of per-view classifier logits.
pub fn multiclip_predict(
    video: &Video,
    state: &ModelState<f32>,
    geom: ClipGeometry,
    cfg: &InferenceConfig,
) -> Result<Vec<f32>, EvalError> {
    let cls = state.cls_head.as_ref().ok_or(EvalError::NoClassifier)?;
    let views = inference_views(video, geom, cfg)?;
    let mut g = Graph::new();
    let enc = state.encoder_params().bind(&mut g, false);
    let head = cls.bind(&mut g, false);
    let x = g.constant(views);
    let f = encode(&mut g, &enc, &state.config, x)?;
    let y = classify(&mut g, &head, f)?;
    Ok(mean_rows(g.value(y)))
}

fn mean_rows(t: &Tensor<f32>) -> Vec<f32> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut acc = vec![0.0f64; c];
    for i in 0..n {
        for (a, &v) in acc.iter_mut().zip(t.row(i)) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|a| (a / n as f64) as f32).collect()
}

/// Per-video class scores for a set, in order.
pub fn predict_all(
    videos: &[Video],
    state: &ModelState<f32>,
    geom: ClipGeometry,
    cfg: &InferenceConfig,
) -> Result<Vec<Vec<f32>>, EvalError> {
    videos
        .par_iter()
        .map(|v| multiclip_predict(v, state, geom, cfg))
        .collect()
}

/// Encoder features (no projection head) of a set of videos.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    keys: Vec<Vec<f32>>,
    labels: Vec<usize>,
}

impl EmbeddingIndex {
    pub fn new(keys: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self, EvalError> {
        if keys.len() != labels.len() {
            return Err(EvalError::Length(keys.len(), labels.len()));
        }
        if let Some(first) = keys.first() {
            if let Some(bad) = keys.iter().find(|k| k.len() != first.len()) {
                return Err(EvalError::Dim(first.len(), bad.len()));
            }
        }
        if keys.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EvalError::Invalid("non-finite embedding".into()));
        }
        Ok(Self { keys, labels })
    }

    pub fn keys(&self) -> &[Vec<f32>] {
        &self.keys
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }
}

/// Mean of the per-view encoder features of each video.
pub fn embed_videos(
    videos: &[Video],
    state: &ModelState<f32>,
    geom: ClipGeometry,
    cfg: &InferenceConfig,
) -> Result<EmbeddingIndex, EvalError> {
    let keys = videos
        .par_iter()
        .map(|v| clip_features(state, &inference_views(v, geom, cfg)?).map(|f| mean_rows(&f)))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingIndex::new(keys, videos.iter().map(|v| v.label).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Indices of the `k` keys most cosine-similar to `query`, best first; ties
/// go to the earlier key. A zero vector has similarity 0 to everything.
pub fn nearest(index: &EmbeddingIndex, query: &[f32], k: usize) -> Result<Vec<usize>, EvalError> {
    if k > index.len() {
        return Err(EvalError::KTooLarge {
            k,
            size: index.len(),
        });
    }
    if query.len() != index.dim() {
        return Err(EvalError::Dim(index.dim(), query.len()));
    }
    let sims: Vec<f64> = index.keys.iter().map(|key| cosine(query, key)).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order.truncate(k);
    Ok(order)
}

/// Fraction of queries whose label appears among their top-K keys, per K.
pub fn retrieval_recall(
    index: &EmbeddingIndex,
    queries: &EmbeddingIndex,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if kmax > index.len() {
        return Err(EvalError::KTooLarge {
            k: kmax,
            size: index.len(),
        });
    }
    if ks.contains(&0) {
        return Err(EvalError::Invalid("K must be >= 1".into()));
    }
    if queries.is_empty() {
        return Err(EvalError::Invalid("no queries".into()));
    }
    let ranked = queries
        .keys
        .par_iter()
        .map(|q| nearest(index, q, kmax))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranked
                .iter()
                .zip(&queries.labels)
                .filter(|(r, &label)| r[..k].iter().any(|&j| index.labels[j] == label))
                .count();
            (k, hits as f64 / queries.len() as f64)
        })
        .collect())
}

/// Argmax with ties resolved towards the lowest class index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of per-item scores.
pub fn accuracy(scores: &[Vec<f32>], labels: &[usize]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::Invalid("no predictions".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| argmax(s) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Recall map keyed by the decimal K, as written to report files.
pub fn recall_report(recall: &BTreeMap<usize, f64>) -> serde_json::Map<String, serde_json::Value> {
    recall
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::from(*v)))
        .collect()
}
