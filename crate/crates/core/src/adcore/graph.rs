//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` walks it in reverse.

use super::kernels::{self, Conv3dGeom};
use super::{AdError, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Conv3d { x: Var, w: Var, geom: Conv3dGeom },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Concat(Var, Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Abs(Var),
    L2NormalizeRows(Var),
    LogSumExpRows { x: Var, mask: Option<Vec<bool>> },
    Dot(Var, Var),
    SpatialMean(Var),
    PickPerRow(Var, Vec<usize>),
    Reshape(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A single forward/backward pass. Build one per step and drop it afterwards.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => (0, 0),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Which side of its kink every `relu`/`abs` input sits on, in node order.
    /// Two evaluations of the same builder with equal patterns lie in the
    /// same smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::Abs(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&x| x > F::zero()))
            .collect()
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// 3-D convolution. `x: [N, Cin, T, H, W]`, `w: [Cout, Cin, kt, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var, AdError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(AdError::shape("conv3d", sx, sw));
        }
        let geom = Conv3dGeom {
            batch: sx[0],
            in_channels: sx[1],
            out_channels: sw[0],
            input: [sx[2], sx[3], sx[4]],
            kernel: [sw[2], sw[3], sw[4]],
            stride,
            padding,
        };
        let od = geom
            .output()
            .ok_or_else(|| AdError::shape("conv3d", sx, sw))?;
        let out = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(
            vec![geom.batch, geom.out_channels, od[0], od[1], od[2]],
            out,
        )?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv3d { x, w, geom }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.max(F::zero())).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AdError::shape(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x * s).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds `b: [n]` to every trailing-axis row of `x: [..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AdError> {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = *vx.shape().last().unwrap_or(&0);
        if vb.shape() != [n] {
            return Err(AdError::shape("add_bias", vx.shape(), vb.shape()));
        }
        let bias = vb.data();
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(&r, &c)| r + c))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    /// Per-channel `gamma * x + beta` for `x: [N, C, ...]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(AdError::shape("channel_affine", s, self.shape(gamma)));
        }
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = vx
            .data()
            .chunks(inner)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let ch = i % c;
                chunk.iter().map(move |&v| g[ch] * v + b[ch])
            })
            .collect();
        let t = Tensor::new(s.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::ChannelAffine { x, gamma, beta }, rg))
    }

    /// Concatenates along the last axis. Both inputs must be 1-D or 2-D with
    /// equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || sa.len() > 2
            || sa.is_empty()
            || (sa.len() == 2 && sa[0] != sb[0])
        {
            return Err(AdError::shape("concat", &sa, &sb));
        }
        let (m, p) = rows_cols(&sa);
        let (_, q) = rows_cols(&sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&da[i * p..(i + 1) * p]);
            data.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let shape = if sa.len() == 1 {
            vec![p + q]
        } else {
            vec![m, p + q]
        };
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Concat(a, b), rg))
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AdError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(AdError::shape("gather_rows", &s, &[idx.len()]));
        }
        let n = s[1];
        let d = self.value(x).data();
        let data = idx
            .iter()
            .flat_map(|&i| d[i * n..(i + 1) * n].iter().copied())
            .collect();
        let t = Tensor::new(vec![idx.len(), n], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: F = v.data().iter().copied().sum::<F>() / F::from_usize(v.len()).expect("len");
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x * x).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.abs()).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    /// Scales every row (or the whole vector, for 1-D input) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, AdError> {
        let v = self.value(x);
        let (m, n) = rows_cols(v.shape());
        if m == 0 {
            return Err(AdError::shape("l2_normalize", v.shape(), &[]));
        }
        let mut data = Vec::with_capacity(m * n);
        for row in v.data().chunks(n) {
            let norm = row.iter().map(|&a| a * a).sum::<F>().sqrt();
            if !(norm > F::zero()) {
                return Err(AdError::Degenerate("l2_normalize"));
            }
            data.extend(row.iter().map(|&a| a / norm));
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::L2NormalizeRows(x), rg))
    }

    /// Row-wise `log(sum(exp(x)))` with max subtraction. Entries whose mask
    /// bit is false are excluded. 1-D input is treated as a single row and
    /// yields shape `[1]`.
    pub fn log_sum_exp(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var, AdError> {
        let v = self.value(x);
        let (m, n) = rows_cols(v.shape());
        if m == 0 || mask.as_ref().is_some_and(|mk| mk.len() != v.len()) {
            return Err(AdError::shape(
                "log_sum_exp",
                v.shape(),
                &[mask.as_ref().map_or(0, |mk| mk.len())],
            ));
        }
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * n + j]);
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(F::neg_infinity(), F::max);
            if mx == F::neg_infinity() {
                return Err(AdError::Degenerate("log_sum_exp: empty row"));
            }
            let s: F = (0..n)
                .filter(|&j| keep(j))
                .map(|j| (row[j] - mx).exp())
                .sum();
            out.push(mx + s.ln());
        }
        let t = Tensor::new(vec![m], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSumExpRows { x, mask }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 1 || va.shape() != vb.shape() {
            return Err(AdError::shape("dot", va.shape(), vb.shape()));
        }
        let s: F = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Cosine similarity of two vectors, composed from normalize and dot.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(AdError::shape("cosine_sim", sa, sb));
        }
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        self.dot(na, nb)
    }

    /// Global average pool: `[N, C, ...] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var, AdError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 3 {
            return Err(AdError::shape("spatial_mean", s, &[]));
        }
        let inner: usize = s[2..].iter().product();
        let denom = F::from_usize(inner).expect("len");
        let data = v
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<F>() / denom)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SpatialMean(x), rg))
    }

    /// `out[i] = x[i, idx[i]]` for `x: [m, n]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var, AdError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&j| j >= s[1]) {
            return Err(AdError::shape("pick_per_row", &s, &[idx.len()]));
        }
        let d = self.value(x).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| d[i * s[1] + j])
            .collect();
        let t = Tensor::new(vec![s[0]], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::PickPerRow(x, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AdError> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Accumulates `d loss / d node` for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<(), AdError> {
        if self.backward_done {
            return Err(AdError::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(AdError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Err(AdError::Detached);
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contribution: Vec<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(contribution)
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    acc(*a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Conv3d { x, w, geom } => {
                if self.rg(*x) {
                    acc(*x, kernels::conv3d_backward_input(g, val(*w), geom));
                }
                if self.rg(*w) {
                    acc(*w, kernels::conv3d_backward_kernel(g, val(*x), geom));
                }
            }
            Op::Relu(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| if yi > F::zero() { gi } else { F::zero() })
                        .collect(),
                );
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, g.iter().zip(val(*b)).map(|(&gi, &y)| gi * y).collect());
                acc(*b, g.iter().zip(val(*a)).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
            Op::AddBias(x, b) => {
                acc(*x, g.to_vec());
                if self.rg(*b) {
                    let n = self.shape(*b)[0];
                    let mut gb = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &r)| *o += r);
                    }
                    acc(*b, gb);
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let s = node.value.shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let gam = val(*gamma);
                if self.rg(*x) {
                    let gx = g
                        .chunks(inner)
                        .enumerate()
                        .flat_map(|(k, ch)| ch.iter().map(move |&v| v * gam[k % c]));
                    acc(*x, gx.collect());
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let xv = val(*x);
                    let mut gg = vec![F::zero(); c];
                    let mut gbeta = vec![F::zero(); c];
                    for (k, (gch, xch)) in g.chunks(inner).zip(xv.chunks(inner)).enumerate() {
                        gg[k % c] += gch.iter().zip(xch).map(|(&a, &b)| a * b).sum::<F>();
                        gbeta[k % c] += gch.iter().copied().sum::<F>();
                    }
                    acc(*gamma, gg);
                    acc(*beta, gbeta);
                }
            }
            Op::Concat(a, b) => {
                let (m, p) = rows_cols(self.shape(*a));
                let (_, q) = rows_cols(self.shape(*b));
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for row in g.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::GatherRows(x, idx) => {
                let s = self.shape(*x);
                let n = s[1];
                let mut gx = vec![F::zero(); s[0] * n];
                for (r, &src) in idx.iter().enumerate() {
                    gx[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(o, &v)| *o += v);
                }
                acc(*x, gx);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / F::from_usize(n).expect("len"); n]);
            }
            Op::Square(a) => {
                let two = F::one() + F::one();
                acc(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&gi, &x)| two * x * gi)
                        .collect(),
                );
            }
            Op::Abs(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| gi * x.signum())
                    .collect(),
            ),
            Op::L2NormalizeRows(x) => {
                let (_, n) = rows_cols(node.value.shape());
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g
                    .chunks(n)
                    .zip(node.value.data().chunks(n))
                    .zip(val(*x).chunks(n))
                {
                    let norm = xr.iter().map(|&a| a * a).sum::<F>().sqrt();
                    let proj: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| (gi - yi * proj) / norm));
                }
                acc(*x, gx);
            }
            Op::LogSumExpRows { x, mask } => {
                let xv = val(*x);
                let (_, n) = rows_cols(self.shape(*x));
                let out = node.value.data();
                let gx = xv
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        if mask.as_ref().is_some_and(|mk| !mk[k]) {
                            F::zero()
                        } else {
                            g[k / n] * (v - out[k / n]).exp()
                        }
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::Dot(a, b) => {
                acc(*a, val(*b).iter().map(|&y| y * g[0]).collect());
                acc(*b, val(*a).iter().map(|&x| x * g[0]).collect());
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let denom = F::from_usize(inner).expect("len");
                acc(
                    *x,
                    g.iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi / denom, inner))
                        .collect(),
                );
            }
            Op::PickPerRow(x, idx) => {
                let s = self.shape(*x);
                let mut gx = vec![F::zero(); s[0] * s[1]];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * s[1] + j] = g[i];
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
        }
    }
}
