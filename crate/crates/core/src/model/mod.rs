//! Query/momentum encoders, projection head, distance head and classifier.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{Bound, ParamStore};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::{AdError, Graph, Real, Stream, Tensor, Var};
use crate::sampler::Clip;
use params::fan_in_uniform;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("parameter `{name}`: {detail}")]
    Mismatch { name: String, detail: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    /// `[t, h, w]`; padding is `kernel / 2` on every axis.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
    pub proj_hidden: usize,
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// Three 3x3x3 stages (8, 16, 32 channels), n = 32, hidden 64, d = 16.
    pub fn desk() -> Self {
        let st = |c, s: [usize; 3]| ConvStage {
            out_channels: c,
            kernel: [3, 3, 3],
            stride: s,
        };
        Self {
            in_channels: 3,
            stages: vec![st(8, [1, 2, 2]), st(16, [2, 2, 2]), st(32, [2, 2, 2])],
            proj_hidden: 64,
            embed_dim: 16,
        }
    }

    /// Shape contract of the full-size setting: 512-d features, a 2048-wide
    /// projection MLP and 128-d embeddings.
    pub fn paper_scale() -> Self {
        let st = |c, s: [usize; 3]| ConvStage {
            out_channels: c,
            kernel: [3, 3, 3],
            stride: s,
        };
        Self {
            in_channels: 3,
            stages: vec![
                st(64, [1, 2, 2]),
                st(128, [2, 2, 2]),
                st(256, [2, 2, 2]),
                st(512, [2, 2, 2]),
            ],
            proj_hidden: 2048,
            embed_dim: 128,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims_ok = self.in_channels > 0
            && !self.stages.is_empty()
            && self.proj_hidden > 0
            && self.embed_dim > 0
            && self.stages.iter().all(|s| {
                s.out_channels > 0
                    && s.kernel.iter().all(|&k| k > 0)
                    && s.stride.iter().all(|&k| k > 0)
            });
        if dims_ok {
            Ok(())
        } else {
            Err(ModelError::Config(
                "all dimensions, kernels and strides must be positive".into(),
            ))
        }
    }
}

fn linear_init<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    stream: Stream,
) {
    store.insert(
        format!("{name}.weight"),
        fan_in_uniform(&[fan_in, fan_out], fan_in, stream),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

/// Small uniform init for single-layer heads.
fn head_init<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    stream: Stream,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = stream.rng();
    store.insert(
        format!("{name}.weight"),
        Tensor::from_fn(&[fan_in, fan_out], |_| {
            F::from_f64c(rng.gen_range(-bound..bound))
        }),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

/// Encoder and projection parameters.
pub fn init_encoder<F: Real>(cfg: &EncoderConfig, stream: Stream) -> ParamStore<F> {
    let mut p = ParamStore::new();
    let mut cin = cfg.in_channels;
    for (i, st) in cfg.stages.iter().enumerate() {
        let [kt, kh, kw] = st.kernel;
        let fan_in = cin * kt * kh * kw;
        p.insert(
            format!("enc.conv{i}.weight"),
            fan_in_uniform(
                &[st.out_channels, cin, kt, kh, kw],
                fan_in,
                stream.split("conv", i as u64),
            ),
        );
        p.insert(
            format!("enc.norm{i}.gamma"),
            Tensor::full(&[st.out_channels], F::one()),
        );
        p.insert(
            format!("enc.norm{i}.beta"),
            Tensor::zeros(&[st.out_channels]),
        );
        cin = st.out_channels;
    }
    linear_init(
        &mut p,
        "proj.fc1",
        cfg.feature_dim(),
        cfg.proj_hidden,
        stream.split("proj", 1),
    );
    linear_init(
        &mut p,
        "proj.fc2",
        cfg.proj_hidden,
        cfg.embed_dim,
        stream.split("proj", 2),
    );
    p
}

pub fn init_cs_head<F: Real>(cfg: &EncoderConfig, stream: Stream) -> ParamStore<F> {
    let mut p = ParamStore::new();
    head_init(&mut p, "cs", 2 * cfg.embed_dim, 1, stream);
    p
}

pub fn init_cls_head<F: Real>(
    cfg: &EncoderConfig,
    n_classes: usize,
    stream: Stream,
) -> ParamStore<F> {
    let mut p = ParamStore::new();
    head_init(&mut p, "cls", cfg.feature_dim(), n_classes, stream);
    p
}

fn need(b: &Bound, name: &str) -> Result<Var, ModelError> {
    b.var(name).ok_or_else(|| ModelError::Mismatch {
        name: name.to_string(),
        detail: "missing".into(),
    })
}

/// `[N, 3, t, s, s] -> [N, n]`: conv, per-channel affine and ReLU per stage,
/// then global average pooling.
pub fn encode<F: Real>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<Var, ModelError> {
    let s = g.shape(x);
    if s.len() != 5 || s[1] != cfg.in_channels {
        return Err(AdError::ShapeMismatch {
            op: "encode",
            lhs: s.to_vec(),
            rhs: vec![cfg.in_channels],
        }
        .into());
    }
    let mut h = x;
    for (i, st) in cfg.stages.iter().enumerate() {
        let pad = st.kernel.map(|k| k / 2);
        h = g.conv3d(h, need(p, &format!("enc.conv{i}.weight"))?, st.stride, pad)?;
        h = g.channel_affine(
            h,
            need(p, &format!("enc.norm{i}.gamma"))?,
            need(p, &format!("enc.norm{i}.beta"))?,
        )?;
        h = g.relu(h);
    }
    Ok(g.spatial_mean(h)?)
}

fn linear<F: Real>(g: &mut Graph<F>, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let y = g.matmul(x, need(p, &format!("{name}.weight"))?)?;
    Ok(g.add_bias(y, need(p, &format!("{name}.bias"))?)?)
}

/// Linear, ReLU, linear, then L2 normalisation: `[N, n] -> [N, d]`.
pub fn project<F: Real>(g: &mut Graph<F>, p: &Bound, feat: Var) -> Result<Var, ModelError> {
    let h = linear(g, p, "proj.fc1", feat)?;
    let h = g.relu(h);
    let z = linear(g, p, "proj.fc2", h)?;
    Ok(g.l2_normalize(z)?)
}

/// `w . concat(q, k) + b` per row: `[P, d] x [P, d] -> [P]`.
pub fn predict_distance<F: Real>(
    g: &mut Graph<F>,
    cs: &Bound,
    q: Var,
    k: Var,
) -> Result<Var, ModelError> {
    let x = g.concat(q, k)?;
    let y = linear(g, cs, "cs", x)?;
    let rows = g.shape(y)[0];
    Ok(g.reshape(y, &[rows])?)
}

/// `[N, n] -> [N, classes]` logits.
pub fn classify<F: Real>(g: &mut Graph<F>, cls: &Bound, feat: Var) -> Result<Var, ModelError> {
    linear(g, cls, "cls", feat)
}

/// `theta_m <- m * theta_m + (1 - m) * theta`, elementwise for every parameter.
pub fn momentum_update<F: Real>(
    online: &ParamStore<F>,
    momentum: &mut ParamStore<F>,
    m: F,
) -> Result<(), ModelError> {
    if !(m >= F::zero() && m <= F::one()) {
        return Err(ModelError::Config(format!("momentum {m:?} outside [0, 1]")));
    }
    if !online.same_layout(momentum) {
        let name = online
            .names()
            .find(|n| momentum.get(n).map(Tensor::shape) != online.get(n).map(Tensor::shape))
            .or_else(|| momentum.names().find(|n| online.get(n).is_none()))
            .cloned()
            .unwrap_or_default();
        return Err(ModelError::Mismatch {
            name,
            detail: "online and momentum parameters differ".into(),
        });
    }
    let keep = F::one() - m;
    for ((_, src), (_, dst)) in online.iter().zip(momentum.iter_mut()) {
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = m * *d + keep * s;
        }
    }
    Ok(())
}

/// Pixel statistics used to centre encoder inputs.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// `(x - PIXEL_MEAN) / PIXEL_STD`, elementwise. Without it the unnormalised
/// encoder trains very slowly from `[0, 1]` pixels.
pub fn standardize_pixels(frames: &mut [f32]) {
    for v in frames {
        *v = (*v - PIXEL_MEAN) / PIXEL_STD;
    }
}

/// Stacks clips of identical shape into `[N, 3, t, s, s]` and standardizes
/// the pixels.
pub fn stack_clips<F: Real>(clips: &[Clip]) -> Result<Tensor<F>, ModelError> {
    let first = clips
        .first()
        .ok_or_else(|| ModelError::Config("empty clip batch".into()))?;
    let shape = first.frames.shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * first.frames.len());
    for c in clips {
        if c.frames.shape() != shape.as_slice() {
            return Err(AdError::ShapeMismatch {
                op: "stack_clips",
                lhs: shape,
                rhs: c.frames.shape().to_vec(),
            }
            .into());
        }
        data.extend(
            c.frames
                .data()
                .iter()
                .map(|&v| F::from_f64c(((v - PIXEL_MEAN) / PIXEL_STD) as f64)),
        );
    }
    let mut full = vec![clips.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}

/// All learnable state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<F> {
    pub config: EncoderConfig,
    /// Query encoder and projection head.
    pub online: ParamStore<F>,
    /// Momentum copy of `online`; only ever changed by [`momentum_update`].
    pub momentum: ParamStore<F>,
    pub cs_head: ParamStore<F>,
    pub cls_head: Option<ParamStore<F>>,
}

impl<F: Real> ModelState<F> {
    pub fn init(config: &EncoderConfig, stream: Stream) -> Result<Self, ModelError> {
        config.validate()?;
        let online = init_encoder(config, stream.split("encoder", 0));
        Ok(Self {
            config: config.clone(),
            momentum: online.clone(),
            online,
            cs_head: init_cs_head(config, stream.split("cs-head", 0)),
            cls_head: None,
        })
    }

    /// Encoder parameters only (no projection head).
    pub fn encoder_params(&self) -> ParamStore<F> {
        self.online.filter_prefix("enc.")
    }

    /// Encoder features for a batch, without building a backward tape worth keeping.
    pub fn features(&self, clips: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::new();
        let p = self.encoder_params().bind(&mut g, false);
        let x = g.constant(clips.clone());
        let f = encode(&mut g, &p, &self.config, x)?;
        Ok(g.value(f).clone())
    }
}
