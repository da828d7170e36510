//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations on 2-D arrays borrowed from a
//! [`ParamStore`]. Calling [`Graph::backward`] on a `1 x 1` node returns the
//! gradient of that scalar with respect to every trainable parameter that took
//! part in the computation. Everything is single-threaded and evaluated in
//! recording order, so results are bit-reproducible.

use ndarray::{s, Array1, Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    /// Frozen arrays never receive gradients or optimizer updates.
    pub frozen: bool,
}

/// Named collection of parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, frozen: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, frozen });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Parameters that the optimizer may update.
    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| !self.entries[id.0].frozen)
    }

    pub fn n_trainable_values(&self) -> usize {
        self.entries.iter().filter(|e| !e.frozen).map(|e| e.value.len()).sum()
    }

    /// FNV-1a over the bit patterns of all frozen arrays.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.entries.iter().filter(|e| e.frozen) {
            for b in e.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in e.value.iter() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RowDiff(Var),
    MeanSquare(Var),
    Nll {
        probs: Var,
        labels: Vec<usize>,
        floor: f64,
    },
    BroadcastRows(Var),
    MeanRows(Var),
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise numerically stable softmax. Rows may contain `-inf` entries as
/// long as at least one entry per row is finite.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Rearranges a `T x C` signal into `T_out x (kernel * C)` windows with
/// `T_out = (T - kernel) / stride + 1`; row `t` is the concatenation of input
/// rows `t * stride .. t * stride + kernel`.
pub fn im2col(x: &Array2<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let (t, c) = x.dim();
    assert!(t >= kernel, "im2col: {t} rows shorter than kernel {kernel}");
    let t_out = (t - kernel) / stride + 1;
    let mut out = Array2::zeros((t_out, kernel * c));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        for j in 0..kernel {
            row.slice_mut(s![j * c..(j + 1) * c]).assign(&x.row(i * stride + j));
        }
    }
    out
}

/// Gradients of a scalar with respect to parameters, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            by_param: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    /// `self += scale * other`, in parameter order.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (mine, theirs) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => m.scaled_add(scale, g),
                    None => *mine = Some(g * scale),
                }
            }
        }
    }

    fn add(&mut self, id: ParamId, g: Array2<f64>) {
        match &mut self.by_param[id.0] {
            Some(m) => *m += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Tape of recorded operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = !self.params.entry(id).frozen;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// `a (T x d) + row (1 x d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Per-row normalization with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std[i] = inv;
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(v, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// `y[t] = x[t + 1] - x[t]`.
    pub fn row_diff(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.nrows();
        let v = &xv.slice(s![1..n, ..]) - &xv.slice(s![0..n - 1, ..]);
        let rg = self.rg(x);
        self.push(v, Op::RowDiff(x), rg)
    }

    /// Mean of squared entries, as a `1 x 1` node.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.iter().map(|v| v * v).sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Array2::from_elem((1, 1), v), Op::MeanSquare(x), rg)
    }

    /// Mean negative log of the labelled probability, floored at `floor`.
    pub fn nll(&mut self, probs: Var, labels: &[usize], floor: f64) -> Var {
        let p = self.value(probs);
        assert_eq!(p.nrows(), labels.len(), "nll: one label per row");
        let v = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| -p[[i, c]].max(floor).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.rg(probs);
        self.push(
            Array2::from_elem((1, 1), v),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                floor,
            },
            rg,
        )
    }

    /// Repeats a `1 x d` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), 1, "broadcast_rows expects a single row");
        let v = xv
            .broadcast((rows, xv.ncols()))
            .expect("broadcast of a single row")
            .to_owned();
        let rg = self.rg(x);
        self.push(v, Op::BroadcastRows(x), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(x);
        self.push(v, Op::MeanRows(x), rg)
    }

    /// Strided 1-D convolution windows of a `T x C` signal, see [`im2col`].
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let v = im2col(self.value(x), kernel, stride);
        let rg = self.rg(x);
        self.push(v, Op::Im2Col { x, kernel, stride }, rg)
    }

    /// Weighted sum of `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                Some(a) => self.add(a, t),
                None => t,
            });
        }
        acc.expect("weighted_sum of no terms")
    }

    /// Gradients of the scalar `root` with respect to all trainable params.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add(*id, g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        send(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        send(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => send(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        send(*b, -&g);
                    }
                    send(*a, g);
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => send(*a, g * *c),
                Op::Gelu(a) => {
                    let dx = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|g, x| g * gelu_grad(*x));
                    send(*a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*gamma) {
                        send(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*beta) {
                        send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let d = dxhat.ncols() as f64;
                        let mut dx = dxhat.clone();
                        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                            let xr = xhat.row(i);
                            let mean_d = row.sum() / d;
                            let mean_dx = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                            let inv = inv_std[i];
                            for (v, xh) in row.iter_mut().zip(xr.iter()) {
                                *v = inv * (*v - mean_d - xh * mean_dx);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yr, |d, y| *d -= y * dot);
                    }
                    send(*a, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            send(*p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::RowDiff(x) => {
                    let n = g.nrows();
                    let mut dx = Array2::zeros((n + 1, g.ncols()));
                    {
                        let mut upper = dx.slice_mut(s![1..n + 1, ..]);
                        upper += &g;
                    }
                    {
                        let mut lower = dx.slice_mut(s![0..n, ..]);
                        lower -= &g;
                    }
                    send(*x, dx);
                }
                Op::MeanSquare(x) => {
                    let xv = self.value(*x);
                    let c = 2.0 * g[[0, 0]] / xv.len() as f64;
                    send(*x, xv * c);
                }
                Op::Nll { probs, labels, floor } => {
                    let p = self.value(*probs);
                    let mut dp = Array2::zeros(p.raw_dim());
                    let n = labels.len() as f64;
                    for (i, &c) in labels.iter().enumerate() {
                        if p[[i, c]] > *floor {
                            dp[[i, c]] = -g[[0, 0]] / (n * p[[i, c]]);
                        }
                    }
                    send(*probs, dp);
                }
                Op::BroadcastRows(x) => send(*x, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::Im2Col { x, kernel, stride } => {
                    let xv = self.value(*x);
                    let c = xv.ncols();
                    let mut dx = Array2::zeros(xv.raw_dim());
                    for (t, grow) in g.rows().into_iter().enumerate() {
                        for j in 0..*kernel {
                            let mut dst = dx.row_mut(t * stride + j);
                            dst += &grow.slice(s![j * c..(j + 1) * c]);
                        }
                    }
                    send(*x, dx);
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).nrows();
                    let row = &g / rows as f64;
                    let dx = row
                        .broadcast((rows, g.ncols()))
                        .expect("broadcast of a single row")
                        .to_owned();
                    send(*x, dx);
                }
            }
        }
        out
    }
}
