//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order of the computation graph. [`Tape::backward`] walks the
//! records in exact reverse and accumulates (sums) contributions into each
//! input, so a node feeding several consumers receives all of them.
//!
//! Parameters are not copied onto the tape: a parameter leaf reads its value
//! from the borrowed [`ParamGroup`] and its gradient lands in [`ParamGrads`].

use rand::Rng;

use crate::error::TensorError;
use crate::param::{ParamGrads, ParamGroup, ParamId};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities below this are clamped before taking the log in [`Tape::nll`].
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulT {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    ScaleConst {
        x: Var,
        scale: Vec<f64>,
    },
    SoftmaxRows {
        x: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    StackRows {
        parts: Vec<Var>,
    },
    Row {
        x: Var,
        index: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    LstmCell {
        pre: Var,
        c_prev: Var,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    MixRows {
        weights: Var,
        mats: Vec<Var>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SumAll {
        x: Var,
    },
    Nll {
        probs: Var,
        gold: Vec<Option<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    params: &'p ParamGroup,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(msg: String) -> TensorError {
    TensorError::Shape(msg)
}

fn check_finite(name: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(name))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x (n x k)` times `w (m x k)` transposed, row by row.
fn mat_mul_t(x: &[f64], n: usize, k: usize, w: &[f64], m: usize, out: &mut [f64]) {
    for r in 0..n {
        let xr = &x[r * k..(r + 1) * k];
        for o in 0..m {
            out[r * m + o] += dot(xr, &w[o * k..(o + 1) * k]);
        }
    }
}

/// Row-wise masked softmax. Masked entries get exactly zero weight and do not
/// take part in the max or the normaliser.
pub fn softmax_masked(scores: &[f64], valid: &[bool]) -> Result<Vec<f64>, TensorError> {
    if scores.len() != valid.len() {
        return Err(shape_err(format!(
            "{} scores with a mask of {}",
            scores.len(),
            valid.len()
        )));
    }
    let mut out = vec![0.0; scores.len()];
    softmax_row_into(scores, Some(valid), &mut out)?;
    Ok(out)
}

fn softmax_row_into(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<(), TensorError> {
    let is_valid = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &v) in x.iter().enumerate() {
        if is_valid(j) {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return Err(TensorError::EmptySupport);
    }
    let mut sum = 0.0;
    for (j, &v) in x.iter().enumerate() {
        if is_valid(j) {
            let e = (v - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if is_valid(j) {
            *o /= sum;
        }
    }
    Ok(())
}

/// Inverted dropout on a plain tensor.
pub fn dropout_apply<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor, TensorError> {
    let mask = dropout_mask(x.len(), rate, training, rng)?;
    let mut out = x.clone();
    if let Some(mask) = mask {
        for (v, m) in out.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
    }
    Ok(out)
}

fn dropout_mask<R: Rng + ?Sized>(
    n: usize,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Option<Vec<f64>>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Some(
        (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    ))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamGroup) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamGroup {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node
                .value
                .as_ref()
                .expect("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var, TensorError> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf holding a fixed value. Gradients are still accumulated for it and
    /// can be read back with [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(Op::Leaf, value, "leaf")
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(Tensor::zeros(&[rows, cols])),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x W^T + b` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (n, k) = self.value(x).dims2();
        let (m, kw) = self.value(w).dims2();
        if k != kw {
            return Err(shape_err(format!(
                "linear: input width {k} vs weight {m}x{kw}"
            )));
        }
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(shape_err(format!(
                    "linear: bias {} vs output {m}",
                    bv.len()
                )));
            }
            for r in 0..n {
                out[r * m..(r + 1) * m].copy_from_slice(bv.data());
            }
        }
        mat_mul_t(
            self.value(x).data(),
            n,
            k,
            self.value(w).data(),
            m,
            &mut out,
        );
        let t = Tensor::matrix(n, m, out)?;
        self.push(Op::Linear { x, w, b }, t, "linear")
    }

    /// Single-vector form of [`Tape::linear`].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(x).rows() != 1 {
            return Err(shape_err("affine expects a single row".into()));
        }
        self.linear(x, w, Some(b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = self.value(a).dims2();
        let (kb, m) = self.value(b).dims2();
        if k != kb {
            return Err(shape_err(format!("matmul: {n}x{k} by {kb}x{m}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for j in 0..k {
                let s = av[r * k + j];
                if s != 0.0 {
                    axpy(s, &bv[j * m..(j + 1) * m], &mut out[r * m..(r + 1) * m]);
                }
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        self.push(Op::MatMul { a, b }, t, "matmul")
    }

    /// `a b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = self.value(a).dims2();
        let (m, kb) = self.value(b).dims2();
        if k != kb {
            return Err(shape_err(format!("matmul_t: {n}x{k} by ({m}x{kb})^T")));
        }
        let mut out = vec![0.0; n * m];
        mat_mul_t(
            self.value(a).data(),
            n,
            k,
            self.value(b).data(),
            m,
            &mut out,
        );
        let t = Tensor::matrix(n, m, out)?;
        self.push(Op::MatMulT { a, b }, t, "matmul_t")
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<(), TensorError> {
        if self.value(a).dims2() != self.value(b).dims2() {
            return Err(shape_err(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let (r, c) = self.value(a).dims2();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::matrix(r, c, data)?;
        self.push(Op::Add { a, b }, t, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let (r, c) = self.value(a).dims2();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::matrix(r, c, data)?;
        self.push(Op::Mul { a, b }, t, "mul")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::matrix(r, c, data)?;
        self.push(Op::Tanh { x }, t, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::matrix(r, c, data)?;
        self.push(Op::Sigmoid { x }, t, "sigmoid")
    }

    /// Elementwise product with a constant of the same size.
    pub fn scale_const(&mut self, x: Var, scale: Vec<f64>) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        if scale.len() != r * c {
            return Err(shape_err(format!(
                "scale_const: {} factors for {} values",
                scale.len(),
                r * c
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&scale)
            .map(|(a, s)| a * s)
            .collect();
        let t = Tensor::matrix(r, c, data)?;
        self.push(Op::ScaleConst { x, scale }, t, "scale_const")
    }

    /// Zeroes whole rows where `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        if keep.len() != r {
            return Err(shape_err(format!(
                "mask_rows: {} flags for {r} rows",
                keep.len()
            )));
        }
        let scale = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, c))
            .collect();
        self.scale_const(x, scale)
    }

    /// Inverted dropout. Identity (the same handle) in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        match dropout_mask(self.value(x).len(), rate, training, rng)? {
            None => Ok(x),
            Some(mask) => self.scale_const(x, mask),
        }
    }

    /// Softmax of every row. With a column mask, masked columns receive
    /// exactly zero weight; a row with no valid column is an error.
    pub fn softmax_rows(&mut self, x: Var, col_mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        if let Some(m) = col_mask {
            if m.len() != c {
                return Err(shape_err(format!(
                    "softmax_rows: mask {} vs {c} columns",
                    m.len()
                )));
            }
        }
        let mut out = vec![0.0; r * c];
        let xv = self.value(x).data();
        for i in 0..r {
            softmax_row_into(
                &xv[i * c..(i + 1) * c],
                col_mask,
                &mut out[i * c..(i + 1) * c],
            )?;
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push(Op::SoftmaxRows { x }, t, "softmax_rows")
    }

    /// Joins matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| shape_err("concat_cols of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(shape_err(format!("concat_cols: {r} rows vs {rows}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            t,
            "concat_cols",
        )
    }

    /// Joins matrices top to bottom.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| shape_err("stack_rows of nothing".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(shape_err(format!("stack_rows: {c} columns vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, out)?;
        self.push(
            Op::StackRows {
                parts: parts.to_vec(),
            },
            t,
            "stack_rows",
        )
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        if index >= r {
            return Err(shape_err(format!("row {index} of {r}")));
        }
        let t = Tensor::matrix(1, c, self.value(x).row(index).to_vec())?;
        self.push(Op::Row { x, index }, t, "row")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        if start + len > c {
            return Err(shape_err(format!(
                "columns {start}..{} of {c}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        let t = Tensor::matrix(r, len, out)?;
        self.push(Op::SliceCols { x, start, len }, t, "slice_cols")
    }

    /// LSTM pointwise stage. `pre` holds the gate pre-activations laid out as
    /// `[input | forget | candidate | output]`, each `H` wide. Returns
    /// `[h | c]` per row.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Result<Var, TensorError> {
        let (r, c4) = self.value(pre).dims2();
        let (rc, h) = self.value(c_prev).dims2();
        if c4 != 4 * h || r != rc {
            return Err(shape_err(format!(
                "lstm_cell: pre-activations {r}x{c4} with cell {rc}x{h}"
            )));
        }
        let pv = self.value(pre).data();
        let cv = self.value(c_prev).data();
        let mut out = vec![0.0; r * 2 * h];
        for row in 0..r {
            let p = &pv[row * 4 * h..(row + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[h + j]);
                let g = p[2 * h + j].tanh();
                let o = sigmoid(p[3 * h + j]);
                let c = f * cv[row * h + j] + i * g;
                out[row * 2 * h + j] = o * c.tanh();
                out[row * 2 * h + h + j] = c;
            }
        }
        let t = Tensor::matrix(r, 2 * h, out)?;
        self.push(Op::LstmCell { pre, c_prev }, t, "lstm_cell")
    }

    /// Per-row dot products, as an `n x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "row_dot")?;
        let (r, _) = self.value(a).dims2();
        let data = (0..r)
            .map(|i| dot(self.value(a).row(i), self.value(b).row(i)))
            .collect();
        let t = Tensor::matrix(r, 1, data)?;
        self.push(Op::RowDot { a, b }, t, "row_dot")
    }

    /// `out[t] = sum_k weights[t, k] * mats[k][t]`.
    pub fn mix_rows(&mut self, weights: Var, mats: &[Var]) -> Result<Var, TensorError> {
        let (r, k) = self.value(weights).dims2();
        if k != mats.len() || mats.is_empty() {
            return Err(shape_err(format!(
                "mix_rows: {k} weights per row for {} matrices",
                mats.len()
            )));
        }
        let c = self.value(mats[0]).cols();
        for &m in mats {
            if self.value(m).dims2() != (r, c) {
                return Err(shape_err(format!(
                    "mix_rows: matrix {:?} vs {r}x{c}",
                    self.value(m).shape()
                )));
            }
        }
        let mut out = vec![0.0; r * c];
        let wv = self.value(weights);
        for i in 0..r {
            for (j, &m) in mats.iter().enumerate() {
                axpy(
                    wv.get(i, j),
                    self.value(m).row(i),
                    &mut out[i * c..(i + 1) * c],
                );
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push(
            Op::MixRows {
                weights,
                mats: mats.to_vec(),
            },
            t,
            "mix_rows",
        )
    }

    /// Row lookup, e.g. embeddings: output row `t` is `table[ids[t]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.value(table).dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Invalid(format!(
                    "id {id} outside table of {v} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            t,
            "gather",
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll { x }, Tensor::vector(vec![s]), "sum_all")
    }

    /// Negative log-likelihood summed over rows with a gold label; rows with
    /// `None` are skipped.
    pub fn nll(&mut self, probs: Var, gold: &[Option<usize>]) -> Result<Var, TensorError> {
        let (r, c) = self.value(probs).dims2();
        if gold.len() != r {
            return Err(shape_err(format!(
                "nll: {} labels for {r} rows",
                gold.len()
            )));
        }
        let mut total = 0.0;
        for (i, g) in gold.iter().enumerate() {
            if let Some(g) = *g {
                if g >= c {
                    return Err(TensorError::Invalid(format!("label {g} of {c}")));
                }
                total -= self.value(probs).get(i, g).max(LOG_CLAMP).ln();
            }
        }
        self.push(
            Op::Nll {
                probs,
                gold: gold.to_vec(),
            },
            Tensor::vector(vec![total]),
            "nll",
        )
    }

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        if self.value(output).len() != 1 {
            return Err(shape_err(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut pgrads = ParamGrads::zeros_like(self.params);
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut pgrads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        pgrads: &mut ParamGrads,
    ) {
        let this = Var(i);
        let val = |v: Var| self.value(v);
        let numel = |v: Var| self.value(v).len();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = numel(v);
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => pgrads.slot_mut(*id).add_dense(g),
            Op::Linear { x, w, b } => {
                let (n, k) = val(*x).dims2();
                let m = val(*w).rows();
                let (xv, wv) = (val(*x).data(), val(*w).data());
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        for o in 0..m {
                            let s = g[r * m + o];
                            if s != 0.0 {
                                axpy(s, &wv[o * k..(o + 1) * k], &mut dx[r * k..(r + 1) * k]);
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for r in 0..n {
                        for o in 0..m {
                            let s = g[r * m + o];
                            if s != 0.0 {
                                axpy(s, &xv[r * k..(r + 1) * k], &mut dw[o * k..(o + 1) * k]);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for r in 0..n {
                            axpy(1.0, &g[r * m..(r + 1) * m], db);
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = val(*a).dims2();
                let m = val(*b).cols();
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for r in 0..n {
                        for j in 0..k {
                            da[r * k + j] += dot(&g[r * m..(r + 1) * m], &bv[j * m..(j + 1) * m]);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..n {
                        for j in 0..k {
                            let s = av[r * k + j];
                            if s != 0.0 {
                                axpy(s, &g[r * m..(r + 1) * m], &mut db[j * m..(j + 1) * m]);
                            }
                        }
                    }
                });
            }
            Op::MatMulT { a, b } => {
                let (n, k) = val(*a).dims2();
                let m = val(*b).rows();
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for r in 0..n {
                        for o in 0..m {
                            let s = g[r * m + o];
                            if s != 0.0 {
                                axpy(s, &bv[o * k..(o + 1) * k], &mut da[r * k..(r + 1) * k]);
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..n {
                        for o in 0..m {
                            let s = g[r * m + o];
                            if s != 0.0 {
                                axpy(s, &av[r * k..(r + 1) * k], &mut db[o * k..(o + 1) * k]);
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| axpy(1.0, g, da));
                acc(*b, &mut |db| axpy(1.0, g, db));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |db| {
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                });
            }
            Op::Tanh { x } => {
                let y = val(this).data();
                acc(*x, &mut |dx| {
                    for j in 0..g.len() {
                        dx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = val(this).data();
                acc(*x, &mut |dx| {
                    for j in 0..g.len() {
                        dx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::ScaleConst { x, scale } => {
                acc(*x, &mut |dx| {
                    for j in 0..g.len() {
                        dx[j] += g[j] * scale[j];
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let y = val(this);
                let (r, c) = y.dims2();
                let yv = y.data();
                acc(*x, &mut |dx| {
                    for row in 0..r {
                        let ys = &yv[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let inner = dot(ys, gs);
                        for j in 0..c {
                            dx[row * c + j] += ys[j] * (gs[j] - inner);
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = val(this).cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).dims2();
                    acc(p, &mut |dp| {
                        for row in 0..r {
                            axpy(
                                1.0,
                                &g[row * total + offset..row * total + offset + c],
                                &mut dp[row * c..(row + 1) * c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::StackRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = numel(p);
                    acc(p, &mut |dp| axpy(1.0, &g[offset..offset + n], dp));
                    offset += n;
                }
            }
            Op::Row { x, index } => {
                let c = val(*x).cols();
                acc(*x, &mut |dx| {
                    axpy(1.0, g, &mut dx[index * c..(index + 1) * c])
                });
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = val(*x).dims2();
                acc(*x, &mut |dx| {
                    for row in 0..r {
                        axpy(
                            1.0,
                            &g[row * len..(row + 1) * len],
                            &mut dx[row * c + start..row * c + start + len],
                        );
                    }
                });
            }
            Op::LstmCell { pre, c_prev } => {
                let (r, h) = val(*c_prev).dims2();
                let pv = val(*pre).data();
                let cv = val(*c_prev).data();
                let out = val(this).data();
                let mut dpre = vec![0.0; r * 4 * h];
                let mut dcp = vec![0.0; r * h];
                for row in 0..r {
                    let p = &pv[row * 4 * h..(row + 1) * 4 * h];
                    for j in 0..h {
                        let ig = sigmoid(p[j]);
                        let fg = sigmoid(p[h + j]);
                        let cg = p[2 * h + j].tanh();
                        let og = sigmoid(p[3 * h + j]);
                        let c = out[row * 2 * h + h + j];
                        let tc = c.tanh();
                        let dh = g[row * 2 * h + j];
                        let dc = g[row * 2 * h + h + j] + dh * og * (1.0 - tc * tc);
                        let base = row * 4 * h;
                        dpre[base + j] = dc * cg * ig * (1.0 - ig);
                        dpre[base + h + j] = dc * cv[row * h + j] * fg * (1.0 - fg);
                        dpre[base + 2 * h + j] = dc * ig * (1.0 - cg * cg);
                        dpre[base + 3 * h + j] = dh * tc * og * (1.0 - og);
                        dcp[row * h + j] = dc * fg;
                    }
                }
                acc(*pre, &mut |d| axpy(1.0, &dpre, d));
                acc(*c_prev, &mut |d| axpy(1.0, &dcp, d));
            }
            Op::RowDot { a, b } => {
                let (r, c) = val(*a).dims2();
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for row in 0..r {
                        axpy(
                            g[row],
                            &bv[row * c..(row + 1) * c],
                            &mut da[row * c..(row + 1) * c],
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for row in 0..r {
                        axpy(
                            g[row],
                            &av[row * c..(row + 1) * c],
                            &mut db[row * c..(row + 1) * c],
                        );
                    }
                });
            }
            Op::MixRows { weights, mats } => {
                let (r, k) = val(*weights).dims2();
                let c = val(this).cols();
                let wv = val(*weights).data();
                acc(*weights, &mut |dw| {
                    for row in 0..r {
                        for (j, &m) in mats.iter().enumerate() {
                            dw[row * k + j] += dot(&g[row * c..(row + 1) * c], val(m).row(row));
                        }
                    }
                });
                for (j, &m) in mats.iter().enumerate() {
                    acc(m, &mut |dm| {
                        for row in 0..r {
                            axpy(
                                wv[row * k + j],
                                &g[row * c..(row + 1) * c],
                                &mut dm[row * c..(row + 1) * c],
                            );
                        }
                    });
                }
            }
            Op::Gather { table, ids } => {
                let d = val(*table).cols();
                if let Op::Param(pid) = self.nodes[table.0].op {
                    let slot = pgrads.slot_mut(pid);
                    for (t, &id) in ids.iter().enumerate() {
                        slot.add_row(id, &g[t * d..(t + 1) * d]);
                    }
                } else {
                    acc(*table, &mut |dt| {
                        for (t, &id) in ids.iter().enumerate() {
                            axpy(1.0, &g[t * d..(t + 1) * d], &mut dt[id * d..(id + 1) * d]);
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                acc(*x, &mut |dx| {
                    for v in dx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Nll { probs, gold } => {
                let p = val(*probs);
                let c = p.cols();
                acc(*probs, &mut |dp| {
                    for (row, lab) in gold.iter().enumerate() {
                        if let Some(l) = *lab {
                            let pv = p.get(row, l);
                            if pv > LOG_CLAMP {
                                dp[row * c + l] -= g[0] / pv;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to a recorded value; zero if it did not
    /// influence the output.
    pub fn wrt(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match &self.nodes[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}
