//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] borrows a [`ParamStore`] read-only and records every operation
//! applied to its variables. [`Tape::backward`] walks the record in reverse
//! and returns a [`Grads`] buffer aligned with the store. Operations whose
//! inputs carry no gradient (constants, [`Tape::detach`]ed values) are never
//! visited on the way back, so a stop-gradient yields exact zeros rather than
//! numerically small ones.
//!
//! ```
//! use lilt::autograd::{ParamStore, Tape};
//! use ndarray::array;
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", array![[2.0]]);
//! let mut tape = Tape::new(&store);
//! let x = tape.constant(array![[3.0]]);
//! let wv = tape.param(w);
//! let y = tape.matmul(x, wv);
//! let grads = tape.backward(y);
//! assert_eq!(tape.value(y)[[0, 0]], 6.0);
//! assert_eq!(grads.get(w).unwrap()[[0, 0]], 3.0);
//! ```

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Additive logit applied to masked keys before the softmax.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        let id = ParamId(self.values.len());
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gradient buffer aligned with a [`ParamStore`]. Parameters that received
/// no gradient stay `None`.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn empty(len: usize) -> Self {
        Self {
            slots: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix {
        self.slots[id.0].get_or_insert_with(|| Matrix::zeros(shape))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self` slot by slot, in parameter order.
    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.slots[i] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Gather { table: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    MaskedSoftmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    RowSum(Var),
    Dropout { x: Var, mask: Matrix },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix, scale: f64 },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(z: &mut Matrix) {
    for mut row in z.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Row lookup into a parameter table (an embedding).
    pub fn gather(&mut self, table: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.params.get(table);
        let mut out = Matrix::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            if r >= t.nrows() {
                return Err(Error::Index(format!(
                    "row {r} of `{}` with {} rows",
                    self.params.name(table),
                    t.nrows()
                )));
            }
            out.row_mut(i).assign(&t.row(r));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            true,
        ))
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1×d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let v = self.value(a) + &r.row(0);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, factor), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Row-wise layer normalization with learned `1×d` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Matrix::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(xhat.row_mut(i))
                .and(row)
                .for_each(|o, &v| *o = (v - mean) * is);
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let y = &xhat * &g + &b;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row softmax after adding [`MASK_LOGIT`] on every column whose
    /// `key_mask` entry is `false`.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Var {
        let mut z = self.value(x).clone();
        assert_eq!(z.ncols(), key_mask.len(), "mask width");
        for mut row in z.rows_mut() {
            for (v, &keep) in row.iter_mut().zip(key_mask) {
                if !keep {
                    *v += MASK_LOGIT;
                }
            }
        }
        softmax_rows(&mut z);
        let ng = self.ng(x);
        self.push(z, Op::MaskedSoftmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(x);
        self.push(v, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("column concatenation: {e}")))?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        let ng = self.ng(x);
        self.push(
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// `n×d → n×1`
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(x);
        self.push(v, Op::RowSum(x), ng)
    }

    /// Multiplies by a precomputed keep-mask that already carries the
    /// `1/(1-p)` rescaling.
    pub fn dropout(&mut self, x: Var, mask: Matrix) -> Var {
        let v = self.value(x) * &mask;
        let ng = self.ng(x);
        self.push(v, Op::Dropout { x, mask }, ng)
    }

    /// `scale · Σ −log softmax(logits_i)[t_i]` over rows with a target.
    /// Returns a `1×1` variable.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        scale: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logit rows vs {} targets",
                lv.nrows(),
                targets.len()
            )));
        }
        let mut probs = lv.clone();
        softmax_rows(&mut probs);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= lv.ncols() {
                    return Err(Error::Index(format!("target {t} of {} classes", lv.ncols())));
                }
                let row = lv.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::from_elem((1, 1), total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            ng,
        ))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads = Grads::empty(self.params.len());
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        if !self.ng(root) {
            return grads;
        }
        adj[root.0] = Some(Matrix::ones(self.value(root).dim()));

        fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Gather { table, rows } => {
                    let shape = self.params.get(*table).dim();
                    let slot = grads.slot(*table, shape);
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = slot.row_mut(r);
                        dst += &g.row(k);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut adj, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(&mut adj, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(&mut adj, *a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut adj, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut adj, *b, g.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut adj, *a, g);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.ng(*r) {
                        acc(&mut adj, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*a) {
                        acc(&mut adj, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut adj, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut adj, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, f) => acc(&mut adj, *a, g * *f),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(&mut adj, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut adj, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*gamma) {
                        acc(
                            &mut adj,
                            *gamma,
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if self.ng(*beta) {
                        acc(&mut adj, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let gam = self.value(*gamma).row(0);
                        let d = xhat.ncols() as f64;
                        let mut dx = &g * &gam;
                        for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                            let xh = xhat.row(r);
                            let mean_d = row.sum() / d;
                            let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
                            let is = inv_std[r];
                            Zip::from(&mut row)
                                .and(xh)
                                .for_each(|v, &h| *v = is * (*v - mean_d - h * mean_dx));
                        }
                        acc(&mut adj, *x, dx);
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = &g * y;
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        let dot = row.sum();
                        Zip::from(&mut row)
                            .and(y.row(r))
                            .for_each(|v, &p| *v -= p * dot);
                    }
                    acc(&mut adj, *a, d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Matrix::zeros(self.value(*x).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.ng(p) {
                            acc(&mut adj, p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let mut d = Matrix::zeros(self.value(*x).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut adj, *x, d);
                }
                Op::RowSum(x) => {
                    let cols = self.value(*x).ncols();
                    let d = Matrix::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]]);
                    acc(&mut adj, *x, d);
                }
                Op::Dropout { x, mask } => acc(&mut adj, *x, g * mask),
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    scale,
                } => {
                    let up = g[[0, 0]] * scale;
                    let mut d = Matrix::zeros(probs.dim());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let mut row = d.row_mut(r);
                            row.assign(&probs.row(r));
                            row[t] -= 1.0;
                            row.mapv_inplace(|v| v * up);
                        }
                    }
                    acc(&mut adj, *logits, d);
                }
            }
        }
        grads
    }
}
