// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over a closed primitive set.
//!
//! Values are computed eagerly as primitives are recorded. [`Tape::grad`]
//! walks the tape backwards from a scalar root and *records* each backward
//! rule as new primitives on the same tape, so the returned gradients are
//! ordinary [`Var`]s. Differentiating a scalar built from those gradients is
//! therefore just another call to [`Tape::grad`]; this is what the
//! sensitivity regularizer needs, since it depends on the parameters only
//! through a first-order gradient.
//!
//! Subgradient conventions at kinks: `relu`, `abs` and `clamp_min` use 0 at
//! the kink; `max_over_rows` routes the gradient to the first maximal row.
//! Kink masks are recorded as constants, so their own derivative is zero.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::error::EngineError;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    ClampMin(Var, f64),
    Abs(Var),
    SumOverRows(Var),
    SumOverCols(Var),
    SumAll(Var),
    MaxOverRows(Var),
    MeanOverRows(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Expand(Var),
    Softmax(Var),
    SoftmaxCrossEntropy(Var, usize),
    FrobeniusSq(Var),
    L2NormRows(Var),
    Recip(Var),
    MaskMul(Var, Arc<Tensor>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "elementwise-multiply",
            Op::Scale(..) => "scalar-multiply",
            Op::AddScalar(..) => "add-scalar",
            Op::ScaleBy(..) => "scale-by",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols(..) => "slice",
            Op::PadCols(..) => "pad",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::ClampMin(..) => "clamp-min",
            Op::Abs(..) => "abs",
            Op::SumOverRows(..) => "sum-over-rows",
            Op::SumOverCols(..) => "row-wise-sum",
            Op::SumAll(..) => "sum-all",
            Op::MaxOverRows(..) => "max-over-rows",
            Op::MeanOverRows(..) => "mean-over-rows",
            Op::BroadcastRows(..) => "broadcast-rows",
            Op::BroadcastCols(..) => "broadcast-cols",
            Op::Expand(..) => "expand",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax-cross-entropy-with-logits",
            Op::FrobeniusSq(..) => "frobenius-norm-squared",
            Op::L2NormRows(..) => "l2-norm-rows",
            Op::Recip(..) => "reciprocal",
            Op::MaskMul(..) => "dropout-mask-apply",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(parts) => parts.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SliceCols(a, _)
            | Op::PadCols(a, _)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::ClampMin(a, _)
            | Op::Abs(a)
            | Op::SumOverRows(a)
            | Op::SumOverCols(a)
            | Op::SumAll(a)
            | Op::MaxOverRows(a)
            | Op::MeanOverRows(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::Expand(a)
            | Op::Softmax(a)
            | Op::SoftmaxCrossEntropy(a, _)
            | Op::FrobeniusSq(a)
            | Op::L2NormRows(a)
            | Op::Recip(a)
            | Op::MaskMul(a, _) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Named leaf gradients returned by [`Tape::backward`].
pub type Gradients = BTreeMap<String, Tensor>;

/// A single-use recording of primitive evaluations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the first maximal entry of each column.
fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..t.rows() {
                if t.get(i, j) > t.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Registers a named differentiable input. Names must be unique.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var, EngineError> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(EngineError::DuplicateLeaf(name));
        }
        let v = self.push(Op::Leaf, value)?;
        self.leaves.insert(name, v);
        Ok(v)
    }

    pub fn leaf_var(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`: gradients never flow through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, EngineError> {
        if !value.all_finite() {
            return Err(EngineError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(EngineError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("subtract", a, b)?;
        let value = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("elementwise-multiply", a, b)?;
        let value = self.value(a).mul(self.value(b));
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, EngineError> {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, EngineError> {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), value)
    }

    /// `x * s` where `s` is a `1 x 1` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, EngineError> {
        let ss = self.shape(s);
        if ss != [1, 1] {
            return Err(EngineError::ShapeMismatch {
                op: "scale-by",
                left: self.shape(x),
                right: ss,
            });
        }
        let c = self.value(s).item();
        let value = self.value(x).scale(c);
        self.push(Op::ScaleBy(x, s), value)
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = *parts.first().ok_or(EngineError::EmptyConcat)?;
        let rows = self.shape(first)[0];
        for &p in parts {
            if self.shape(p)[0] != rows {
                return Err(EngineError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(rows, cols, data))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, EngineError> {
        let s = self.shape(a);
        if start >= end || end > s[1] {
            return Err(EngineError::BadSlice { start, end, cols: s[1] });
        }
        let t = self.value(a);
        let value = Tensor::from_fn(s[0], end - start, |i, j| t.get(i, start + j));
        self.push(Op::SliceCols(a, start), value)
    }

    /// Embeds `a` at column offset `start` inside a zero matrix `total` columns wide.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var, EngineError> {
        let s = self.shape(a);
        if start + s[1] > total {
            return Err(EngineError::BadSlice {
                start,
                end: start + s[1],
                cols: total,
            });
        }
        let t = self.value(a);
        let value = Tensor::from_fn(s[0], total, |i, j| {
            if j >= start && j < start + s[1] {
                t.get(i, j - start)
            } else {
                0.0
            }
        });
        self.push(Op::PadCols(a, start), value)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, EngineError> {
        let s = self.shape(a);
        if s[0] * s[1] != rows * cols {
            return Err(EngineError::ShapeMismatch {
                op: "reshape",
                left: s,
                right: [rows, cols],
            });
        }
        let value = Tensor::new(rows, cols, self.value(a).data().to_vec());
        self.push(Op::Reshape(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var, EngineError> {
        let value = self.value(a).map(|x| if x > min { x } else { min });
        self.push(Op::ClampMin(a, min), value)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    /// `L x c -> 1 x c`: sums each column over all rows.
    pub fn sum_over_rows(&mut self, a: Var) -> Result<Var, EngineError> {
        let t = self.value(a);
        let value = Tensor::from_fn(1, t.cols(), |_, j| (0..t.rows()).map(|i| t.get(i, j)).sum());
        self.push(Op::SumOverRows(a), value)
    }

    /// Row-wise sum, `L x c -> L x 1`.
    pub fn sum_over_cols(&mut self, a: Var) -> Result<Var, EngineError> {
        let t = self.value(a);
        let value = Tensor::from_fn(t.rows(), 1, |i, _| t.row_slice(i).iter().sum());
        self.push(Op::SumOverCols(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    /// Columnwise maximum over rows, `L x c -> 1 x c`.
    pub fn max_over_rows(&mut self, a: Var) -> Result<Var, EngineError> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(EngineError::EmptyReduction { op: "max-over-rows" });
        }
        let idx = argmax_rows(t);
        let value = Tensor::from_fn(1, t.cols(), |_, j| t.get(idx[j], j));
        self.push(Op::MaxOverRows(a), value)
    }

    /// Columnwise mean over rows, `L x c -> 1 x c`.
    pub fn mean_over_rows(&mut self, a: Var) -> Result<Var, EngineError> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(EngineError::EmptyReduction { op: "mean-over-rows" });
        }
        let n = t.rows() as f64;
        let value = Tensor::from_fn(1, t.cols(), |_, j| (0..t.rows()).map(|i| t.get(i, j)).sum::<f64>() / n);
        self.push(Op::MeanOverRows(a), value)
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var, EngineError> {
        let s = self.shape(a);
        if s[0] != 1 {
            return Err(EngineError::ShapeMismatch {
                op: "broadcast-rows",
                left: s,
                right: [1, s[1]],
            });
        }
        let t = self.value(a);
        let value = Tensor::from_fn(n, s[1], |_, j| t.get(0, j));
        self.push(Op::BroadcastRows(a), value)
    }

    /// Repeats an `L x 1` column `n` times.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var, EngineError> {
        let s = self.shape(a);
        if s[1] != 1 {
            return Err(EngineError::ShapeMismatch {
                op: "broadcast-cols",
                left: s,
                right: [s[0], 1],
            });
        }
        let t = self.value(a);
        let value = Tensor::from_fn(s[0], n, |i, _| t.get(i, 0));
        self.push(Op::BroadcastCols(a), value)
    }

    /// Fills a `rows x cols` tensor with the value of a `1 x 1` node.
    pub fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, EngineError> {
        let s = self.shape(a);
        if s != [1, 1] {
            return Err(EngineError::ShapeMismatch {
                op: "expand",
                left: s,
                right: [1, 1],
            });
        }
        let value = Tensor::filled(rows, cols, self.value(a).item());
        self.push(Op::Expand(a), value)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, EngineError> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            data.extend(softmax_row(t.row_slice(i)));
        }
        let value = Tensor::new(t.rows(), t.cols(), data);
        self.push(Op::Softmax(a), value)
    }

    /// Cross-entropy of a single `1 x k` logit row against class `target`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, EngineError> {
        let s = self.shape(logits);
        if s[0] != 1 || target >= s[1] {
            return Err(EngineError::BadTarget { target, shape: s });
        }
        let row = self.value(logits).row_slice(0);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let value = Tensor::scalar(lse - row[target]);
        self.push(Op::SoftmaxCrossEntropy(logits, target), value)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = Tensor::scalar(self.value(a).frobenius_sq());
        self.push(Op::FrobeniusSq(a), value)
    }

    /// Euclidean norm of each row, `L x c -> L x 1`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var, EngineError> {
        let t = self.value(a);
        let value = Tensor::from_fn(t.rows(), 1, |i, _| t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt());
        self.push(Op::L2NormRows(a), value)
    }

    /// Elementwise `1/x`, defined as 0 where `x == 0`.
    pub fn recip(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = self.value(a).map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.push(Op::Recip(a), value)
    }

    /// Multiplies by a constant mask (dropout, causal masking, kink indicators).
    pub fn mask_mul(&mut self, a: Var, mask: Arc<Tensor>) -> Result<Var, EngineError> {
        let s = self.shape(a);
        if s != mask.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "dropout-mask-apply",
                left: s,
                right: mask.shape(),
            });
        }
        let value = self.value(a).mul(&mask);
        self.push(Op::MaskMul(a, mask), value)
    }

    /// Smallest distance of any recorded kink input from its kink: relu/abs
    /// inputs from 0, clamp inputs from the floor, and the gap between the
    /// top two rows of every max-pooled column. Finite-difference checks use
    /// this to keep probe points off non-differentiable sets.
    pub fn min_kink_distance(&self) -> f64 {
        self.kink_distance(false)
    }

    /// Like [`Tape::min_kink_distance`], but ignores inputs sitting exactly
    /// on a kink (and exact ties in max pooling). Those arise from
    /// structural zeros such as masked attention entries, which stay at the
    /// kink under any perturbation and so never switch branches.
    pub fn min_active_kink_distance(&self) -> f64 {
        self.kink_distance(true)
    }

    fn kink_distance(&self, skip_exact: bool) -> f64 {
        let mut best = f64::INFINITY;
        let mut take = |d: f64| {
            if !(skip_exact && d == 0.0) {
                best = best.min(d);
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    for &x in self.value(*a).data() {
                        take(x.abs());
                    }
                }
                Op::ClampMin(a, m) => {
                    for &x in self.value(*a).data() {
                        take((x - m).abs());
                    }
                }
                Op::MaxOverRows(a) => {
                    let t = self.value(*a);
                    if t.rows() < 2 {
                        continue;
                    }
                    for j in 0..t.cols() {
                        let mut col: Vec<f64> = (0..t.rows()).map(|i| t.get(i, j)).collect();
                        col.sort_by(|x, y| y.total_cmp(x));
                        take(col[0] - col[1]);
                    }
                }
                _ => {}
            }
        }
        best
    }

    /// Records gradients of the scalar `root` with respect to each of `wrt`.
    ///
    /// The backward rules are themselves recorded on this tape, so the
    /// returned vars can feed further computation and be differentiated
    /// again. Inputs with no path to `root` receive an exactly-zero constant.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>, EngineError> {
        let rs = self.shape(root);
        if rs != [1, 1] {
            return Err(EngineError::NonScalarRoot { shape: rs });
        }
        let n = root.0 + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                depends[i] = self.nodes[i].op.inputs().iter().any(|v| depends[v.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if depends[root.0] {
            adjoint[root.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes[i].op.clone();
            let contributions = self.backward_rule(Var(i), &op, g, &depends)?;
            for (input, contrib) in contributions {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        wrt.iter()
            .map(|w| {
                Ok(match adjoint.get(w.0).copied().flatten() {
                    Some(g) => g,
                    None => {
                        let [r, c] = self.shape(*w);
                        self.constant(Tensor::zeros(r, c))
                    }
                })
            })
            .collect()
    }

    /// Gradient of the scalar `root` with respect to every named leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, EngineError> {
        let names: Vec<String> = self.leaves.keys().cloned().collect();
        let vars: Vec<Var> = names.iter().map(|n| self.leaves[n]).collect();
        let grads = self.grad(root, &vars)?;
        Ok(names
            .into_iter()
            .zip(grads)
            .map(|(n, g)| (n, self.value(g).clone()))
            .collect())
    }

    /// Differentiates a scalar built from first-order gradients.
    ///
    /// Computes `grad(root)` for every named leaf, hands those gradient vars
    /// (keyed by leaf name) to `build`, and returns the gradient of the
    /// scalar it produces with respect to every named leaf.
    pub fn backward_of_backward<F>(&mut self, root: Var, build: F) -> Result<Gradients, EngineError>
    where
        F: FnOnce(&mut Tape, &BTreeMap<String, Var>) -> Result<Var, EngineError>,
    {
        let names: Vec<String> = self.leaves.keys().cloned().collect();
        let vars: Vec<Var> = names.iter().map(|n| self.leaves[n]).collect();
        let first = self.grad(root, &vars)?;
        let map: BTreeMap<String, Var> = names.into_iter().zip(first).collect();
        let scalar = build(self, &map)?;
        self.backward(scalar)
    }

    fn backward_rule(
        &mut self,
        out: Var,
        op: &Op,
        g: Var,
        depends: &[bool],
    ) -> Result<Vec<(Var, Var)>, EngineError> {
        let needs = |v: &Var| depends[v.0];
        let mut acc = Vec::new();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    let bt = self.transpose(*b)?;
                    acc.push((*a, self.matmul(g, bt)?));
                }
                if needs(b) {
                    let at = self.transpose(*a)?;
                    acc.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    acc.push((*a, self.transpose(g)?));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc.push((*a, g));
                }
                if needs(b) {
                    acc.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc.push((*a, g));
                }
                if needs(b) {
                    acc.push((*b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc.push((*a, self.mul(g, *b)?));
                }
                if needs(b) {
                    acc.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Scale(a, c) => {
                if needs(a) {
                    acc.push((*a, self.scale(g, *c)?));
                }
            }
            Op::AddScalar(a) => {
                if needs(a) {
                    acc.push((*a, g));
                }
            }
            Op::ScaleBy(x, s) => {
                if needs(x) {
                    acc.push((*x, self.scale_by(g, *s)?));
                }
                if needs(s) {
                    let prod = self.mul(g, *x)?;
                    acc.push((*s, self.sum_all(prod)?));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if needs(p) {
                        acc.push((*p, self.slice_cols(g, offset, offset + w)?));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if needs(a) {
                    let total = self.shape(*a)[1];
                    acc.push((*a, self.pad_cols(g, *start, total)?));
                }
            }
            Op::PadCols(a, start) => {
                if needs(a) {
                    let w = self.shape(*a)[1];
                    acc.push((*a, self.slice_cols(g, *start, start + w)?));
                }
            }
            Op::Reshape(a) => {
                if needs(a) {
                    let [r, c] = self.shape(*a);
                    acc.push((*a, self.reshape(g, r, c)?));
                }
            }
            Op::Relu(a) => {
                if needs(a) {
                    let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc.push((*a, self.mask_mul(g, Arc::new(mask))?));
                }
            }
            Op::Sigmoid(a) => {
                if needs(a) {
                    // s * (1 - s), built from the recorded output so it stays differentiable.
                    let one_minus = self.scale(out, -1.0)?;
                    let one_minus = self.add_scalar(one_minus, 1.0)?;
                    let deriv = self.mul(out, one_minus)?;
                    acc.push((*a, self.mul(g, deriv)?));
                }
            }
            Op::ClampMin(a, m) => {
                if needs(a) {
                    let m = *m;
                    let mask = self.value(*a).map(|x| if x > m { 1.0 } else { 0.0 });
                    acc.push((*a, self.mask_mul(g, Arc::new(mask))?));
                }
            }
            Op::Abs(a) => {
                if needs(a) {
                    let sign = self.value(*a).map(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc.push((*a, self.mask_mul(g, Arc::new(sign))?));
                }
            }
            Op::SumOverRows(a) => {
                if needs(a) {
                    let rows = self.shape(*a)[0];
                    acc.push((*a, self.broadcast_rows(g, rows)?));
                }
            }
            Op::SumOverCols(a) => {
                if needs(a) {
                    let cols = self.shape(*a)[1];
                    acc.push((*a, self.broadcast_cols(g, cols)?));
                }
            }
            Op::SumAll(a) => {
                if needs(a) {
                    let [r, c] = self.shape(*a);
                    acc.push((*a, self.expand(g, r, c)?));
                }
            }
            Op::MaxOverRows(a) => {
                if needs(a) {
                    let t = self.value(*a);
                    let idx = argmax_rows(t);
                    let onehot = Tensor::from_fn(t.rows(), t.cols(), |i, j| if idx[j] == i { 1.0 } else { 0.0 });
                    let rows = t.rows();
                    let spread = self.broadcast_rows(g, rows)?;
                    acc.push((*a, self.mask_mul(spread, Arc::new(onehot))?));
                }
            }
            Op::MeanOverRows(a) => {
                if needs(a) {
                    let rows = self.shape(*a)[0];
                    let spread = self.broadcast_rows(g, rows)?;
                    acc.push((*a, self.scale(spread, 1.0 / rows as f64)?));
                }
            }
            Op::BroadcastRows(a) => {
                if needs(a) {
                    acc.push((*a, self.sum_over_rows(g)?));
                }
            }
            Op::BroadcastCols(a) => {
                if needs(a) {
                    acc.push((*a, self.sum_over_cols(g)?));
                }
            }
            Op::Expand(a) => {
                if needs(a) {
                    acc.push((*a, self.sum_all(g)?));
                }
            }
            Op::Softmax(a) => {
                if needs(a) {
                    // y * (g - rowsum(y * g))
                    let cols = self.shape(*a)[1];
                    let yg = self.mul(out, g)?;
                    let dot = self.sum_over_cols(yg)?;
                    let dot = self.broadcast_cols(dot, cols)?;
                    let y_dot = self.mul(out, dot)?;
                    acc.push((*a, self.sub(yg, y_dot)?));
                }
            }
            Op::SoftmaxCrossEntropy(a, target) => {
                if needs(a) {
                    let k = self.shape(*a)[1];
                    let probs = self.softmax(*a)?;
                    let onehot = self.constant(Tensor::from_fn(1, k, |_, j| if j == *target { 1.0 } else { 0.0 }));
                    let diff = self.sub(probs, onehot)?;
                    acc.push((*a, self.scale_by(diff, g)?));
                }
            }
            Op::FrobeniusSq(a) => {
                if needs(a) {
                    let twice = self.scale(*a, 2.0)?;
                    acc.push((*a, self.scale_by(twice, g)?));
                }
            }
            Op::L2NormRows(a) => {
                if needs(a) {
                    let cols = self.shape(*a)[1];
                    let inv = self.recip(out)?;
                    let w = self.mul(g, inv)?;
                    let w = self.broadcast_cols(w, cols)?;
                    acc.push((*a, self.mul(*a, w)?));
                }
            }
            Op::Recip(a) => {
                if needs(a) {
                    let sq = self.mul(out, out)?;
                    let neg = self.scale(sq, -1.0)?;
                    acc.push((*a, self.mul(g, neg)?));
                }
            }
            Op::MaskMul(a, mask) => {
                if needs(a) {
                    acc.push((*a, self.mask_mul(g, Arc::clone(mask))?));
                }
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::fd::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_grad(x0: f64, f: impl Fn(&mut Tape, Var) -> Result<Var, EngineError>) -> f64 {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::scalar(x0)).unwrap();
        let y = f(&mut t, x).unwrap();
        t.backward(y).unwrap()["x"].item()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random_normal(3, 5, 1.0, &mut rng);
        let mut t = Tape::new();
        let i3 = t.constant(Tensor::identity(3));
        let xv = t.constant(x.clone());
        let y = t.matmul(i3, xv).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln2() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::row(&[0.0, 0.0]));
        let ce = t.softmax_cross_entropy(z, 0).unwrap();
        assert!((t.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        assert_eq!(scalar_grad(3.0, |t, x| t.mul(x, x)), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        assert_eq!(scalar_grad(0.0, |t, x| t.sigmoid(x)), 0.25);
    }

    #[test]
    fn second_order_of_cube() {
        // g = (d/dx x^3)^2, dg/dx = 2 * 3x^2 * 6x = 288 at x = 2.
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::scalar(2.0)).unwrap();
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let grads = t
            .backward_of_backward(x3, |t, g| t.frobenius_sq(g["x"]))
            .unwrap();
        assert!((grads["x"].item() - 288.0).abs() < 1e-12);
    }

    #[test]
    fn detached_second_order_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::scalar(2.0)).unwrap();
        let x2 = t.mul(x, x).unwrap();
        let grads = t
            .backward_of_backward(x2, |t, g| {
                let d = t.detach(g["x"]);
                t.frobenius_sq(d)
            })
            .unwrap();
        assert_eq!(grads["x"].item(), 0.0);
    }

    #[test]
    fn unreachable_leaf_gets_exact_zeros() {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::ones(2, 3)).unwrap();
        let _y = t.leaf("y", Tensor::ones(4, 1)).unwrap();
        let r = t.sum_all(x).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g["y"], Tensor::zeros(4, 1));
        assert_eq!(g["x"], Tensor::ones(2, 3));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::ones(2, 2)).unwrap();
        assert!(matches!(t.backward(x), Err(EngineError::NonScalarRoot { shape: [2, 2] })));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::ones(2, 3));
        let b = t.constant(Tensor::ones(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            EngineError::ShapeMismatch {
                op: "matmul",
                left: [2, 3],
                right: [2, 3]
            }
        );
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(1e308));
        let err = t.scale(a, 10.0).unwrap_err();
        assert_eq!(err, EngineError::NonFinite { op: "scalar-multiply" });
    }

    #[test]
    fn max_over_rows_routes_ties_to_first_row() {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 5.0]])).unwrap();
        let m = t.max_over_rows(x).unwrap();
        let s = t.sum_all(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g["x"].data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn kink_subgradients_are_zero() {
        assert_eq!(scalar_grad(0.0, |t, x| t.relu(x)), 0.0);
        assert_eq!(scalar_grad(0.0, |t, x| t.abs(x)), 0.0);
        assert_eq!(scalar_grad(0.5, |t, x| t.clamp_min(x, 0.5)), 0.0);
    }

    #[test]
    fn sum_of_entries_has_exact_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::random_normal(3, 4, 1.0, &mut rng);
        let err = finite_diff_check(|t, x| t.sum_all(x), &p, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn frobenius_square_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Tensor::random_normal(4, 3, 1.0, &mut rng);
        let err = finite_diff_check(|t, x| t.frobenius_sq(x), &p, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    /// Moves entries away from the kink at `at` so central differences stay on one piece.
    fn off_kink(t: &Tensor, at: f64) -> Tensor {
        t.map(|x| if (x - at).abs() < 1e-3 { at + 0.5 } else { x })
    }

    type Program = Box<dyn Fn(&mut Tape, Var) -> Result<Var, EngineError>>;

    /// Each primitive wrapped into a scalar program with a random projection,
    /// so every output entry contributes to the checked gradient.
    fn primitive_programs(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<(&'static str, Program, f64)> {
        let w_out = |r: usize, c: usize, rng: &mut ChaCha8Rng| Tensor::random_normal(r, c, 1.0, rng);
        let proj = |w: Tensor| {
            move |t: &mut Tape, y: Var| -> Result<Var, EngineError> {
                let w = t.constant(w.clone());
                let p = t.mul(y, w)?;
                t.sum_all(p)
            }
        };
        let other = Tensor::random_normal(rows, cols, 1.0, rng);
        let right = Tensor::random_normal(cols, 3, 1.0, rng);
        let mask = Tensor::from_fn(rows, cols, |i, j| ((i + 2 * j) % 3) as f64 * 0.75);
        let mut v: Vec<(&'static str, Program, f64)> = Vec::new();

        let (p, o) = (proj(w_out(rows, 3, rng)), right.clone());
        v.push(("matmul", Box::new(move |t, x| { let b = t.constant(o.clone()); let y = t.matmul(x, b)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(cols, rows, rng));
        v.push(("transpose", Box::new(move |t, x| { let y = t.transpose(x)?; p(t, y) }), f64::NAN));
        let (p, o) = (proj(w_out(rows, cols, rng)), other.clone());
        v.push(("add", Box::new(move |t, x| { let b = t.constant(o.clone()); let y = t.add(x, b)?; p(t, y) }), f64::NAN));
        let (p, o) = (proj(w_out(rows, cols, rng)), other.clone());
        v.push(("subtract", Box::new(move |t, x| { let b = t.constant(o.clone()); let y = t.sub(b, x)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(rows, cols, rng));
        v.push(("elementwise-multiply", Box::new(move |t, x| { let y = t.mul(x, x)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(rows, cols, rng));
        v.push(("scalar-multiply", Box::new(move |t, x| { let y = t.scale(x, -1.7)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(rows, cols, rng));
        v.push(("scale-by", Box::new(move |t, x| { let s = t.sum_all(x)?; let y = t.scale_by(x, s)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(rows, 2 * cols, rng));
        v.push(("concat", Box::new(move |t, x| { let sq = t.mul(x, x)?; let y = t.concat_cols(&[x, sq])?; p(t, y) }), f64::NAN));
        let w = cols.div_ceil(2);
        let p = proj(w_out(rows, w, rng));
        v.push(("slice", Box::new(move |t, x| { let y = t.slice_cols(x, cols - w, cols)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(rows * cols, 1, rng));
        v.push(("reshape", Box::new(move |t, x| { let y = t.reshape(x, rows * cols, 1)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(rows, cols, rng));
        v.push(("relu", Box::new(move |t, x| { let y = t.relu(x)?; p(t, y) }), 0.0));
        let p = proj(w_out(rows, cols, rng));
        v.push(("sigmoid", Box::new(move |t, x| { let y = t.sigmoid(x)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(rows, cols, rng));
        v.push(("clamp-min", Box::new(move |t, x| { let y = t.clamp_min(x, 0.0)?; p(t, y) }), 0.0));
        let p = proj(w_out(rows, cols, rng));
        v.push(("abs", Box::new(move |t, x| { let y = t.abs(x)?; p(t, y) }), 0.0));
        let p = proj(w_out(rows, 1, rng));
        v.push(("row-wise-sum", Box::new(move |t, x| { let y = t.sum_over_cols(x)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(1, cols, rng));
        v.push(("sum-over-rows", Box::new(move |t, x| { let y = t.sum_over_rows(x)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(1, cols, rng));
        v.push(("max-over-rows", Box::new(move |t, x| { let y = t.max_over_rows(x)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(1, cols, rng));
        v.push(("mean-over-rows", Box::new(move |t, x| { let y = t.mean_over_rows(x)?; p(t, y) }), f64::NAN));
        let p = proj(w_out(rows, cols, rng));
        v.push(("softmax", Box::new(move |t, x| { let y = t.softmax(x)?; p(t, y) }), f64::NAN));
        let target = cols - 1;
        v.push(("softmax-cross-entropy-with-logits", Box::new(move |t, x| { let r = t.slice_cols(x, 0, cols)?; let z = t.sum_over_rows(r)?; t.softmax_cross_entropy(z, target) }), f64::NAN));
        v.push(("frobenius-norm-squared", Box::new(|t, x| t.frobenius_sq(x)), f64::NAN));
        let p = proj(w_out(rows, 1, rng));
        v.push(("l2-norm-rows", Box::new(move |t, x| { let y = t.l2_norm_rows(x)?; p(t, y) }), f64::NAN));
        let (p, m) = (proj(w_out(rows, cols, rng)), Arc::new(mask));
        v.push(("dropout-mask-apply", Box::new(move |t, x| { let y = t.mask_mul(x, Arc::clone(&m))?; p(t, y) }), f64::NAN));
        v
    }

    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(2..=5);
            let raw = Tensor::random_normal(rows, cols, 1.0, &mut rng);
            for (name, program, kink) in primitive_programs(rows, cols, &mut rng) {
                let mut point = if kink.is_nan() { raw.clone() } else { off_kink(&raw, kink) };
                if name == "max-over-rows" {
                    // Separate column entries so the arg-max is stable under probing.
                    point = Tensor::from_fn(rows, cols, |i, j| point.get(i, j) + 0.01 * (i * cols + j) as f64);
                }
                let err = finite_diff_check(&program, &point, 1e-5).unwrap();
                assert!(err <= 1e-6, "trial {trial} primitive {name}: rel err {err}");
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_the_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = Tensor::random_normal(3, 3, 1.0, &mut rng);
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let f = |t: &mut Tape, x: Var| -> Result<Var, EngineError> {
            let s = t.sigmoid(x)?;
            t.frobenius_sq(s)
        };
        let g = |t: &mut Tape, x: Var| -> Result<Var, EngineError> {
            let m = t.matmul(x, x)?;
            t.sum_all(m)
        };
        let grad_of = |prog: &dyn Fn(&mut Tape, Var) -> Result<Var, EngineError>| {
            let mut t = Tape::new();
            let x = t.leaf("x", p.clone()).unwrap();
            let r = prog(&mut t, x).unwrap();
            t.backward(r).unwrap().remove("x").unwrap()
        };
        let combined = grad_of(&|t, x| {
            let a = f(t, x)?;
            let b = g(t, x)?;
            let a = t.scale(a, alpha)?;
            let b = t.scale(b, beta)?;
            t.add(a, b)
        });
        let separate = grad_of(&f).scale(alpha).add(&grad_of(&g).scale(beta));
        for (a, b) in combined.data().iter().zip(separate.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_tapes_give_bit_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::random_normal(4, 4, 1.0, &mut rng);
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf("x", p.clone()).unwrap();
            let s = t.softmax(x).unwrap();
            let m = t.matmul(s, x).unwrap();
            let r = t.frobenius_sq(m).unwrap();
            t.backward(r).unwrap()
        };
        assert_eq!(run(), run());
    }
}
