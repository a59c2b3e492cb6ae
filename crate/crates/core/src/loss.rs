//! Multi-instance momentum-contrastive loss with a key queue, the
//! context-similarity loss, and their combination.
//!
//! Batches are laid out group-major: rows `g * rho .. (g + 1) * rho` of the
//! query and key matrices are the `rho` positive clips of group `g`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::{AdError, Graph, Real, Tensor, Var};
use crate::model::{predict_distance, Bound, ModelError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("key dimension {got} does not match queue dimension {expected}")]
    KeyDim { expected: usize, got: usize },
    #[error("key {index} has norm {norm}, expected 1")]
    NotUnit { index: usize, norm: f64 },
    #[error("length mismatch: {0} predictions vs {1} targets")]
    Length(usize, usize),
    #[error("each group needs at least 2 positives, got rho = {0}")]
    Rho(usize),
    #[error("invalid loss config: {0}")]
    Config(String),
}

/// Units of the regression target of the context-similarity head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsTarget {
    /// `|phi_q - phi_k|` in frames.
    RawFrames,
    /// `|phi_q - phi_k| / t`.
    ClipLengths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub queue_capacity: usize,
    pub rho: usize,
    /// Weight of the context-similarity term; 0 disables it.
    pub cs_weight: f64,
    pub cs_target: CsTarget,
    pub symmetric: bool,
}

impl LossConfig {
    pub fn desk() -> Self {
        Self {
            alpha: 0.07,
            queue_capacity: 512,
            rho: 2,
            cs_weight: 1.0,
            cs_target: CsTarget::ClipLengths,
            symmetric: true,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            queue_capacity: 65536,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0) {
            return Err(LossError::Temperature(self.alpha));
        }
        if self.rho < 2 {
            return Err(LossError::Rho(self.rho));
        }
        if self.queue_capacity == 0 {
            return Err(LossError::Config("queue_capacity must be positive".into()));
        }
        if !(self.cs_weight >= 0.0 && self.cs_weight.is_finite()) {
            return Err(LossError::Config(format!(
                "cs_weight {} must be finite and >= 0",
                self.cs_weight
            )));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO of detached, unit-norm key embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyQueue {
    capacity: usize,
    dim: usize,
    buf: Vec<f32>,
    cursor: usize,
    fill: usize,
}

const UNIT_TOL: f64 = 1e-5;

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(
            capacity > 0 && dim > 0,
            "queue capacity and dimension must be positive"
        );
        Self {
            capacity,
            dim,
            buf: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Appends the rows of `keys` (`[n, d]`), evicting the oldest entries once full.
    pub fn enqueue<F: Real>(&mut self, keys: &Tensor<F>) -> Result<(), LossError> {
        let s = keys.shape();
        let got = if s.len() == 2 {
            s[1]
        } else {
            s.iter().product()
        };
        if got != self.dim {
            return Err(LossError::KeyDim {
                expected: self.dim,
                got,
            });
        }
        let rows: Vec<&[F]> = keys.data().chunks(self.dim).collect();
        for (index, r) in rows.iter().enumerate() {
            let norm = r
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                .sum::<f64>()
                .sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(LossError::NotUnit { index, norm });
            }
        }
        for r in rows {
            let at = self.cursor * self.dim;
            for (d, v) in self.buf[at..at + self.dim].iter_mut().zip(r) {
                *d = v.to_f32().unwrap_or(f32::NAN);
            }
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored keys, oldest first.
    pub fn keys_oldest_first(&self) -> Vec<&[f32]> {
        let start = if self.fill < self.capacity {
            0
        } else {
            self.cursor
        };
        (0..self.fill)
            .map(|i| {
                let at = (start + i) % self.capacity * self.dim;
                &self.buf[at..at + self.dim]
            })
            .collect()
    }

    /// Copy of the current contents as `[len, d]`, or `None` when empty.
    pub fn snapshot<F: Real>(&self) -> Option<Tensor<F>> {
        if self.fill == 0 {
            return None;
        }
        let data = self
            .keys_oldest_first()
            .into_iter()
            .flatten()
            .map(|&v| F::from_f64c(v as f64))
            .collect();
        Some(Tensor::new(vec![self.fill, self.dim], data).expect("queue shape"))
    }
}

fn check_layout(rows: usize, rho: usize) -> Result<(), LossError> {
    if rho < 2 || !rows.is_multiple_of(rho) || rows == 0 {
        return Err(LossError::Rho(rho));
    }
    Ok(())
}

/// Query rows that act as anchors: every row when symmetric, otherwise the
/// first clip of each group.
pub fn anchor_rows(rows: usize, rho: usize, symmetric: bool) -> Vec<usize> {
    if symmetric {
        (0..rows).collect()
    } else {
        (0..rows).step_by(rho).collect()
    }
}

/// `(query row, key row)` positive pairs: each anchor with every other clip of its group.
pub fn positive_pairs(rows: usize, rho: usize, symmetric: bool) -> Vec<(usize, usize)> {
    anchor_rows(rows, rho, symmetric)
        .into_iter()
        .flat_map(|i| {
            let g0 = i / rho * rho;
            (g0..g0 + rho).filter(move |&j| j != i).map(move |j| (i, j))
        })
        .collect()
}

/// Multi-instance contrastive loss averaged over anchors.
///
/// `queries` (`[P, d]`, from the online encoder) is the only input gradients
/// flow to; `keys` (`[P, d]`, momentum encoder) and the queue snapshot are
/// constants. Positives of anchor `i` are the keys of the other clips in its
/// group; negatives are all queue entries. Keys of other groups in the batch
/// take no part.
pub fn mi_moco_loss<F: Real>(
    g: &mut Graph<F>,
    queries: Var,
    keys: &Tensor<F>,
    rho: usize,
    queue: Option<&Tensor<F>>,
    alpha: f64,
    symmetric: bool,
) -> Result<Var, LossError> {
    if !(alpha > 0.0) {
        return Err(LossError::Temperature(alpha));
    }
    let qs = g.shape(queries).to_vec();
    if qs.len() != 2 || keys.shape() != qs.as_slice() {
        return Err(AdError::shape("mi_moco_loss", &qs, keys.shape()).into());
    }
    let (p, d) = (qs[0], qs[1]);
    check_layout(p, rho)?;
    let nq = match queue {
        Some(t) if t.shape().len() != 2 || t.shape()[1] != d => {
            return Err(LossError::KeyDim {
                expected: d,
                got: *t.shape().last().unwrap_or(&0),
            })
        }
        Some(t) => t.shape()[0],
        None => 0,
    };
    let cols = p + nq;
    // [d, P + K] = [keys; queue]^T scaled by 1/alpha.
    let inv = F::from_f64c(1.0 / alpha);
    let mut kt = vec![F::zero(); d * cols];
    let all = keys
        .data()
        .chunks(d)
        .chain(queue.map(|t| t.data().chunks(d)).into_iter().flatten());
    for (j, row) in all.enumerate() {
        for (c, &v) in row.iter().enumerate() {
            kt[c * cols + j] = v * inv;
        }
    }
    let kt = g.constant(Tensor::new(vec![d, cols], kt)?);

    let anchors = anchor_rows(p, rho, symmetric);
    let q = if symmetric {
        queries
    } else {
        g.gather_rows(queries, &anchors)?
    };
    let logits = g.matmul(q, kt)?;
    let mut mask_all = vec![false; anchors.len() * cols];
    let mut mask_pos = vec![false; anchors.len() * cols];
    for (a, &i) in anchors.iter().enumerate() {
        let g0 = i / rho * rho;
        for j in (g0..g0 + rho).filter(|&j| j != i) {
            mask_all[a * cols + j] = true;
            mask_pos[a * cols + j] = true;
        }
        for j in p..cols {
            mask_all[a * cols + j] = true;
        }
    }
    let lse_all = g.log_sum_exp(logits, Some(mask_all))?;
    let lse_pos = g.log_sum_exp(logits, Some(mask_pos))?;
    let per_anchor = g.sub(lse_all, lse_pos)?;
    Ok(g.mean(per_anchor))
}

/// Mean squared error between predicted and true distances.
pub fn context_similarity_loss<F: Real>(
    g: &mut Graph<F>,
    d_pred: Var,
    d_true: &[F],
) -> Result<Var, LossError> {
    let s = g.shape(d_pred).to_vec();
    let n: usize = s.iter().product();
    if s.len() != 1 || n != d_true.len() || n == 0 {
        return Err(LossError::Length(n, d_true.len()));
    }
    let target = g.constant(Tensor::from_vec(d_true.to_vec()));
    let r = g.sub(d_pred, target)?;
    let sq = g.square(r);
    Ok(g.mean(sq))
}

/// Loss values of one step, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_mi: f64,
    pub l_cs: f64,
    pub l_total: f64,
}

/// Everything the combined loss needs about a batch besides the graph.
pub struct PositiveBatch<'a, F> {
    /// Online-encoder embeddings `[P, d]` (graph node).
    pub queries: Var,
    /// Momentum-encoder embeddings `[P, d]`.
    pub keys: &'a Tensor<F>,
    /// Start frame of every row's clip.
    pub phis: &'a [usize],
    pub clip_len: usize,
}

/// `L_MI + cs_weight * L_CS`. The distance head sees every (anchor, positive)
/// pair of the contrastive term, as `concat(query, key)`.
pub fn concur_loss<F: Real>(
    g: &mut Graph<F>,
    batch: &PositiveBatch<'_, F>,
    queue: Option<&Tensor<F>>,
    cs_head: &Bound,
    cfg: &LossConfig,
) -> Result<(Var, LossParts), LossError> {
    cfg.validate()?;
    let l_mi = mi_moco_loss(
        g,
        batch.queries,
        batch.keys,
        cfg.rho,
        queue,
        cfg.alpha,
        cfg.symmetric,
    )?;
    let rows = g.shape(batch.queries)[0];
    if batch.phis.len() != rows {
        return Err(LossError::Length(rows, batch.phis.len()));
    }
    let mi = g.value(l_mi).item().to_f64().unwrap_or(f64::NAN);
    if cfg.cs_weight == 0.0 {
        return Ok((
            l_mi,
            LossParts {
                l_mi: mi,
                l_cs: 0.0,
                l_total: mi,
            },
        ));
    }
    let pairs = positive_pairs(rows, cfg.rho, cfg.symmetric);
    let (qi, kj): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let q = g.gather_rows(batch.queries, &qi)?;
    let d = batch.keys.shape()[1];
    let kdata = kj
        .iter()
        .flat_map(|&j| batch.keys.row(j).iter().copied())
        .collect();
    let k = g.constant(Tensor::new(vec![kj.len(), d], kdata)?);
    let d_pred = predict_distance(g, cs_head, q, k)?;
    let scale = match cfg.cs_target {
        CsTarget::RawFrames => 1.0,
        CsTarget::ClipLengths => 1.0 / batch.clip_len.max(1) as f64,
    };
    let d_true: Vec<F> = pairs
        .iter()
        .map(|&(i, j)| F::from_f64c(batch.phis[i].abs_diff(batch.phis[j]) as f64 * scale))
        .collect();
    let l_cs = context_similarity_loss(g, d_pred, &d_true)?;
    let cs = g.value(l_cs).item().to_f64().unwrap_or(f64::NAN);
    let weighted = g.scale(l_cs, F::from_f64c(cfg.cs_weight));
    let total = g.add(l_mi, weighted)?;
    let tot = g.value(total).item().to_f64().unwrap_or(f64::NAN);
    Ok((
        total,
        LossParts {
            l_mi: mi,
            l_cs: cs,
            l_total: tot,
        },
    ))
}
