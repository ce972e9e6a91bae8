//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes only ever reference earlier nodes, so the node list is already in
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters enter a graph through [`Graph::param`], which copies the value
//! out of a [`ParamSet`]; their gradients come back keyed by [`ParamId`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, CoreError, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities entering the BCE loss are clamped to `[EPS, 1 - EPS]`.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: Var, k: Var, geom: ConvGeom, batch: usize },
    ConvT { y: Var, k: Var, geom: ConvGeom, batch: usize },
    ChannelBias { x: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Prelu { x: Var, a: Var },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    WeightedSum { w: Var, rows: Var },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var },
    Bce { p: Var, y: Var },
    GaussianKl { mu: Var, logvar: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a node, if the node feeds the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, zero-filled for parameters the loss ignores.
    pub fn dense(&self, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        params
            .iter()
            .map(|(id, entry)| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(entry.value.shape()))
            })
            .collect()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

fn batch_split(shape: &[usize], spatial_rank: usize) -> Option<(usize, usize, Vec<usize>)> {
    // (batch, channels, spatial) for [B, C, *spatial] or [C, *spatial]
    match shape.len() {
        r if r == spatial_rank + 2 => Some((shape[0], shape[1], shape[2..].to_vec())),
        r if r == spatial_rank + 1 => Some((1, shape[0], shape[1..].to_vec())),
        _ => None,
    }
}

fn to3(spatial: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    let off = 3 - spatial.len();
    out[off..].copy_from_slice(spatial);
    out
}

impl<T: Scalar> Graph<T> {
    /// A graph in inference mode: dropout is the identity.
    pub fn new() -> Self {
        Self::with_seed(false, 0)
    }

    /// A graph whose dropout masks and noise draws come from `seed`.
    pub fn with_seed(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Brings a parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let v = self.push(params.value(id).clone(), Op::Param(id));
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Standard-normal noise of the given shape, drawn from the graph's RNG.
    pub fn randn(&mut self, shape: &[usize]) -> Var {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("consistent");
        self.input(t)
    }

    // ---- convolutions ----------------------------------------------------

    fn conv_impl(
        &mut self,
        x: Var,
        k: Var,
        spatial_rank: usize,
        stride: &[usize],
        pad: &[usize],
        op: &'static str,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (batch, c, sp) = batch_split(&xs, spatial_rank)
            .ok_or_else(|| shape_err(op, format!("input shape {xs:?} has wrong rank")))?;
        if ks.len() != spatial_rank + 2 || ks[1] != c {
            return Err(shape_err(
                op,
                format!("kernel {ks:?} incompatible with input {xs:?} ({c} channels)"),
            ));
        }
        let geom = ConvGeom::forward(
            c,
            ks[0],
            to3(&sp),
            to3(&ks[2..]),
            to3(stride),
            pad3(pad),
        )
        .map_err(|e| shape_err(op, format!("input {xs:?}, kernel {ks:?}: {e}")))?;
        let y = conv::conv_forward(&geom, self.value(x).data(), self.value(k).data(), batch);
        let mut shape = Vec::new();
        if xs.len() == spatial_rank + 2 {
            shape.push(batch);
        }
        shape.push(ks[0]);
        shape.extend_from_slice(&geom.y[3 - spatial_rank..]);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::Conv { x, k, geom, batch }))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t_impl(
        &mut self,
        y: Var,
        k: Var,
        spatial_rank: usize,
        stride: &[usize],
        pad: &[usize],
        output_pad: &[usize],
        op: &'static str,
    ) -> Result<Var> {
        let ys = self.shape(y).to_vec();
        let ks = self.shape(k).to_vec();
        let (batch, ky, sp) = batch_split(&ys, spatial_rank)
            .ok_or_else(|| shape_err(op, format!("input shape {ys:?} has wrong rank")))?;
        if ks.len() != spatial_rank + 2 || ks[0] != ky {
            return Err(shape_err(
                op,
                format!("kernel {ks:?} incompatible with input {ys:?} ({ky} channels)"),
            ));
        }
        let geom = ConvGeom::transposed(
            ks[1],
            ky,
            to3(&sp),
            to3(&ks[2..]),
            to3(stride),
            pad3(pad),
            pad3(output_pad),
        )
        .map_err(|e| shape_err(op, format!("input {ys:?}, kernel {ks:?}: {e}")))?;
        let x = conv::conv_transpose_forward(&geom, self.value(y).data(), self.value(k).data(), batch);
        let mut shape = Vec::new();
        if ys.len() == spatial_rank + 2 {
            shape.push(batch);
        }
        shape.push(ks[1]);
        shape.extend_from_slice(&geom.x[3 - spatial_rank..]);
        let value = Tensor::new(shape, x)?;
        Ok(self.push(value, Op::ConvT { y, k, geom, batch }))
    }

    /// Cross-correlation of `x: [B?, C, D, H, W]` with `k: [K, C, d, h, w]`.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        self.conv_impl(x, k, 3, &stride, &pad, "conv3d")
    }

    /// Adjoint of [`conv3d`](Self::conv3d) for the same kernel tensor
    /// `k: [K, C, d, h, w]`, mapping K channels back to C channels.
    pub fn conv3d_transposed(
        &mut self,
        y: Var,
        k: Var,
        stride: [usize; 3],
        pad: [usize; 3],
        output_pad: [usize; 3],
    ) -> Result<Var> {
        self.conv_t_impl(y, k, 3, &stride, &pad, &output_pad, "conv3d_transposed")
    }

    /// Cross-correlation of `x: [B?, C, L]` with `k: [K, C, l]`.
    pub fn conv1d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, k, 1, &[stride], &[pad], "conv1d")
    }

    pub fn conv1d_transposed(
        &mut self,
        y: Var,
        k: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        self.conv_t_impl(y, k, 1, &[stride], &[pad], &[output_pad], "conv1d_transposed")
    }

    /// Adds `b[C]` along channel axis 1 of `x: [B, C, ...]` (axis 0 for rank-1 input).
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (_, c, inner) = channel_layout(xs);
        if self.value(b).numel() != c {
            return Err(shape_err(
                "channel_bias",
                format!("bias of {} values for {c} channels in {xs:?}", self.value(b).numel()),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bias[(i / inner) % c];
        }
        Ok(self.push(out, Op::ChannelBias { x, b }))
    }

    // ---- dense -----------------------------------------------------------

    /// Affine map `x · wᵀ + b` for `x: [B, n]` or `[n]`, `w: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, n) = match xs.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => return Err(shape_err("dense", format!("input must be rank 1 or 2, got {xs:?}"))),
        };
        if ws.len() != 2 || ws[1] != n {
            return Err(shape_err(
                "dense",
                format!("weights {ws:?} do not accept inputs {xs:?} (inner extent {n})"),
            ));
        }
        let m = ws[0];
        if let Some(b) = b {
            if self.value(b).numel() != m {
                return Err(shape_err(
                    "dense",
                    format!("bias of {} values for {m} outputs", self.value(b).numel()),
                ));
            }
        }
        let mut out = vec![T::zero(); rows * m];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            rows,
            n,
            m,
            self.value(x).data(),
            n,
            1,
            self.value(w).data(),
            1,
            n,
            T::one(),
            &mut out,
            m,
            1,
        );
        let shape = if xs.len() == 1 { vec![m] } else { vec![rows, m] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    // ---- elementwise -----------------------------------------------------

    /// Parametric ReLU with one slope per channel (or a single shared slope).
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (_, c, inner) = channel_layout(xs);
        let na = self.value(a).numel();
        if na != c && na != 1 {
            return Err(shape_err(
                "prelu",
                format!("{na} slopes for {c} channels in {xs:?}"),
            ));
        }
        let slopes = self.value(a).data().to_vec();
        let out = self.value(x).data().iter().enumerate().map(|(i, &v)| {
            if v >= T::zero() {
                v
            } else {
                let s = if na == 1 { slopes[0] } else { slopes[(i / inner) % c] };
                s * v
            }
        });
        let value = Tensor::new(xs.to_vec(), out.collect())?;
        Ok(self.push(value, Op::Prelu { x, a }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::lit(lo), T::lit(hi));
        let value = self.value(x).map(|v| v.max(l).min(h));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    fn binary(&mut self, a: Var, b: Var, node: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let name = match node {
                Op::Add(..) => "add",
                Op::Sub(..) => "sub",
                _ => "mul",
            };
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), f);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let s = T::lit(c);
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, c))
    }

    /// Inverted dropout: identity at inference, keeps each value with
    /// probability `1 - rate` and rescales survivors by `1 / (1 - rate)` in
    /// training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let n = self.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask = self.input(Tensor::new(self.shape(x).to_vec(), mask)?);
        self.mul(x, mask)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input"))?;
        if n == 0 {
            return Err(shape_err("softmax", "empty axis"));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `[N, p] ++ [N, q] -> [N, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat", format!("{sa:?} ++ {sb:?}")));
        }
        let (rows, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&self.value(b).data()[r * q..(r + 1) * q]);
        }
        let value = Tensor::new(vec![rows, p + q], out)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Repeats a vector `[D]` (or `[1, D]`) as `rows` identical rows.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let src = self.value(x).data().to_vec();
        let d = src.len();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(&src);
        }
        let value = Tensor::new(vec![rows, d], out).expect("consistent");
        self.push(value, Op::BroadcastRows(x))
    }

    /// `Σ_n w[n] · rows[n, :]` for `rows: [N, D]` and `N` weights.
    pub fn weighted_sum(&mut self, w: Var, rows: Var) -> Result<Var> {
        let rs = self.shape(rows).to_vec();
        let nw = self.value(w).numel();
        if rs.len() != 2 || rs[0] != nw {
            return Err(shape_err("weighted_sum", format!("{nw} weights for rows {rs:?}")));
        }
        let d = rs[1];
        let mut out = vec![T::zero(); d];
        for (wn, row) in self
            .value(w)
            .data()
            .iter()
            .zip(self.value(rows).data().chunks_exact(d))
        {
            for (o, &r) in out.iter_mut().zip(row) {
                *o = *o + *wn * r;
            }
        }
        Ok(self.push(Tensor::from_vec(out), Op::WeightedSum { w, rows }))
    }

    /// Columns `start..start + len` of `x: [B, n]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + len > xs[1] {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} of {xs:?}", start + len),
            ));
        }
        let n = xs[1];
        let mut out = Vec::with_capacity(xs[0] * len);
        for row in self.value(x).data().chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![xs[0], len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::lit(t.numel().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Mean squared error against a target of the same shape.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).numel() != self.value(target).numel() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::lit(p.numel().max(1) as f64);
        let s: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target }))
    }

    /// Mean binary cross-entropy of probabilities `p` against labels `y`.
    pub fn bce(&mut self, p: Var, y: Var) -> Result<Var> {
        if self.value(p).numel() != self.value(y).numel() {
            return Err(shape_err(
                "bce",
                format!("{:?} vs {:?}", self.shape(p), self.shape(y)),
            ));
        }
        let n = self.value(p).numel().max(1);
        let s: T = self
            .value(p)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(&pi, &yi)| bce_scalar(pi, yi))
            .sum();
        Ok(self.push(Tensor::scalar(s / T::lit(n as f64)), Op::Bce { p, y }))
    }

    /// `-½ Σ (1 + logvar - mu² - exp(logvar))`.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        if self.shape(mu) != self.shape(logvar) {
            return Err(shape_err(
                "gaussian_kl",
                format!("{:?} vs {:?}", self.shape(mu), self.shape(logvar)),
            ));
        }
        let s = gaussian_kl(self.value(mu).data(), self.value(logvar).data());
        Ok(self.push(Tensor::scalar(s), Op::GaussianKl { mu, logvar }))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(CoreError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.param_vars.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (target, contribution) in self.local_grads(node, &g) {
                accumulate(&mut grads[target.0], contribution, self.value(target).shape());
            }
            if let Op::Param(id) = node.op {
                param_grads[id.index()] = Some(g.clone());
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Vec<T>)> {
        let gd = g.data();
        let val = |v: Var| self.value(v).data();
        match node.op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Conv { x, k, ref geom, batch } => {
                let (gx, gk) = conv::conv_backward(geom, val(x), val(k), gd, batch);
                vec![(x, gx), (k, gk)]
            }
            Op::ConvT { y, k, ref geom, batch } => {
                let (gy, gk) = conv::conv_transpose_backward(geom, val(y), val(k), gd, batch);
                vec![(y, gy), (k, gk)]
            }
            Op::ChannelBias { x, b } => {
                let (_, c, inner) = channel_layout(self.value(x).shape());
                let mut gb = vec![T::zero(); c];
                for (i, &gi) in gd.iter().enumerate() {
                    let ch = (i / inner) % c;
                    gb[ch] = gb[ch] + gi;
                }
                vec![(x, gd.to_vec()), (b, gb)]
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(w).shape();
                let (m, n) = (ws[0], ws[1]);
                let rows = self.value(x).numel() / n;
                let mut gx = vec![T::zero(); rows * n];
                T::gemm(rows, m, n, gd, m, 1, val(w), n, 1, T::zero(), &mut gx, n, 1);
                let mut gw = vec![T::zero(); m * n];
                T::gemm(m, rows, n, gd, 1, m, val(x), n, 1, T::zero(), &mut gw, n, 1);
                let mut out = vec![(x, gx), (w, gw)];
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); m];
                    for row in gd.chunks_exact(m) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((b, gb));
                }
                out
            }
            Op::Prelu { x, a } => {
                let (_, c, inner) = channel_layout(self.value(x).shape());
                let slopes = val(a);
                let shared = slopes.len() == 1;
                let mut gx = Vec::with_capacity(gd.len());
                let mut ga = vec![T::zero(); slopes.len()];
                for (i, (&xi, &gi)) in val(x).iter().zip(gd).enumerate() {
                    let ch = if shared { 0 } else { (i / inner) % c };
                    if xi >= T::zero() {
                        gx.push(gi);
                    } else {
                        gx.push(slopes[ch] * gi);
                        ga[ch] = ga[ch] + gi * xi;
                    }
                }
                vec![(x, gx), (a, ga)]
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                vec![(x, zip_map(gd, y, |gi, yi| gi * (T::one() - yi * yi)))]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                vec![(x, zip_map(gd, y, |gi, yi| gi * yi * (T::one() - yi)))]
            }
            Op::Exp(x) => vec![(x, zip_map(gd, node.value.data(), |gi, yi| gi * yi))],
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::lit(lo), T::lit(hi));
                vec![(
                    x,
                    zip_map(gd, val(x), |gi, xi| {
                        if xi >= l && xi <= h {
                            gi
                        } else {
                            T::zero()
                        }
                    }),
                )]
            }
            Op::Add(a, b) => vec![(a, gd.to_vec()), (b, gd.to_vec())],
            Op::Sub(a, b) => vec![(a, gd.to_vec()), (b, gd.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => vec![
                (a, zip_map(gd, val(b), |gi, bi| gi * bi)),
                (b, zip_map(gd, val(a), |gi, ai| gi * ai)),
            ],
            Op::Scale(x, c) => {
                let s = T::lit(c);
                vec![(x, gd.iter().map(|&v| v * s).collect())]
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().expect("softmax rank");
                let mut gx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks_exact(n).zip(node.value.data().chunks_exact(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                vec![(x, gx)]
            }
            Op::Reshape(x) => vec![(x, gd.to_vec())],
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(a).shape()[1], self.value(b).shape()[1]);
                let mut ga = Vec::with_capacity(self.value(a).numel());
                let mut gb = Vec::with_capacity(self.value(b).numel());
                for row in gd.chunks_exact(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![(a, ga), (b, gb)]
            }
            Op::BroadcastRows(x) => {
                let d = self.value(x).numel();
                let mut gx = vec![T::zero(); d];
                for row in gd.chunks_exact(d) {
                    for (acc, &v) in gx.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                vec![(x, gx)]
            }
            Op::WeightedSum { w, rows } => {
                let d = gd.len();
                let wd = val(w);
                let rd = val(rows);
                let gw = rd
                    .chunks_exact(d)
                    .map(|row| row.iter().zip(gd).map(|(&r, &gi)| r * gi).sum())
                    .collect();
                let mut gr = Vec::with_capacity(rd.len());
                for &wn in wd {
                    gr.extend(gd.iter().map(|&gi| wn * gi));
                }
                vec![(w, gw), (rows, gr)]
            }
            Op::SliceCols { x, start } => {
                let n = self.value(x).shape()[1];
                let len = node.value.shape()[1];
                let mut gx = vec![T::zero(); self.value(x).numel()];
                for (dst, src) in gx.chunks_exact_mut(n).zip(gd.chunks_exact(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![(x, gx)]
            }
            Op::Sum(x) => vec![(x, vec![gd[0]; self.value(x).numel()])],
            Op::Mean(x) => {
                let n = self.value(x).numel().max(1);
                vec![(x, vec![gd[0] / T::lit(n as f64); n])]
            }
            Op::Mse { pred, target } => {
                let n = T::lit(self.value(pred).numel().max(1) as f64);
                let two = T::lit(2.0);
                let gp: Vec<T> = zip_map(val(pred), val(target), |p, t| two * (p - t) / n * gd[0]);
                let gt = gp.iter().map(|&v| -v).collect();
                vec![(pred, gp), (target, gt)]
            }
            Op::Bce { p, y } => {
                let n = T::lit(self.value(p).numel().max(1) as f64);
                let gp = zip_map(val(p), val(y), |pi, yi| bce_grad_p(pi, yi) / n * gd[0]);
                let gy = zip_map(val(p), val(y), |pi, _| {
                    let pc = clamp_prob(pi);
                    ((T::one() - pc).ln() - pc.ln()) / n * gd[0]
                });
                vec![(p, gp), (y, gy)]
            }
            Op::GaussianKl { mu, logvar } => {
                let half = T::lit(0.5);
                vec![
                    (mu, val(mu).iter().map(|&m| m * gd[0]).collect()),
                    (
                        logvar,
                        val(logvar)
                            .iter()
                            .map(|&lv| half * (lv.exp() - T::one()) * gd[0])
                            .collect(),
                    ),
                ]
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn pad3(p: &[usize]) -> [usize; 3] {
    let mut out = [0; 3];
    let off = 3 - p.len();
    out[off..].copy_from_slice(p);
    out
}

/// (outer, channels, inner) for channel axis 1 (axis 0 when rank is 1).
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Vec<T>, shape: &[usize]) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contribution) {
                *a = *a + b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), contribution).expect("gradient shape"));
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::lit(BCE_EPS);
    p.max(eps).min(T::one() - eps)
}

pub fn bce_scalar<T: Scalar>(p: T, y: T) -> T {
    let pc = clamp_prob(p);
    -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
}

fn bce_grad_p<T: Scalar>(p: T, y: T) -> T {
    let eps = T::lit(BCE_EPS);
    if p < eps || p > T::one() - eps {
        return T::zero();
    }
    -y / p + (T::one() - y) / (T::one() - p)
}

pub fn gaussian_kl<T: Scalar>(mu: &[T], logvar: &[T]) -> T {
    let s: T = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| T::one() + lv - m * m - lv.exp())
        .sum();
    T::lit(-0.5) * s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![3.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let z = g.scale(x, 0.0);
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(CoreError::NonScalarLoss(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let one = g.input(Tensor::from_vec(vec![-3.7]));
        let s1 = g.softmax(one).unwrap();
        assert_eq!(g.value(s1).data(), &[1.0]);
    }

    #[test]
    fn prelu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![1.0, -2.0]));
        let a = g.input(Tensor::from_vec(vec![0.25]));
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -0.5]);
    }

    #[test]
    fn bce_examples() {
        assert!((bce_scalar(0.5f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_scalar(0.5f64, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_scalar(1.0 - 1e-7f64, 1.0) < 1e-6);
        // clamped at the boundary instead of returning infinity
        assert!(bce_scalar(0.0f64, 1.0).is_finite());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(&[0.0f64], &[0.0]), 0.0);
        assert_eq!(gaussian_kl(&[1.0f64], &[0.0]), 0.5);
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![1.0; 8]));
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dense_shape_mismatch_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![1.0; 3]));
        let w = g.input(Tensor::zeros(&[2, 4]));
        let err = g.linear(x, w, None).unwrap_err();
        assert!(err.to_string().contains("[2, 4]"), "{err}");
    }
}
