//! Named parameter storage with Adam state.

use std::collections::BTreeMap;

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Named tensors plus per-tensor Adam moments. The step counter is shared by
/// the whole group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    names: Vec<String>,
    values: Vec<Tensor>,
    moments: Vec<Moments>,
    step: u64,
}

impl Default for ParamGroup {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamGroup {
    pub fn new() -> Self {
        ParamGroup {
            names: Vec::new(),
            values: Vec::new(),
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.len();
        self.names.push(name.into());
        self.values.push(value);
        self.moments.push(Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        });
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Bias-corrected Adam update applied in place.
    pub fn adam_step(&mut self, grads: &ParamGrads, cfg: &AdamConfig) -> Result<(), TensorError> {
        if !(cfg.lr >= 0.0) {
            return Err(TensorError::Invalid(format!("learning rate {}", cfg.lr)));
        }
        if grads.slots.len() != self.values.len() {
            return Err(TensorError::Shape(format!(
                "{} gradients for {} parameters",
                grads.slots.len(),
                self.values.len()
            )));
        }
        for (i, slot) in grads.slots.iter().enumerate() {
            if slot.numel != self.values[i].len() {
                return Err(TensorError::Shape(format!(
                    "gradient for {} has {} values, parameter has {}",
                    self.names[i],
                    slot.numel,
                    self.values[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, slot) in grads.slots.iter().enumerate() {
            let dense = slot.to_dense();
            let value = self.values[i].data_mut();
            let m = &mut self.moments[i];
            for j in 0..value.len() {
                let g = dense[j];
                m.first[j] = cfg.beta1 * m.first[j] + (1.0 - cfg.beta1) * g;
                m.second[j] = cfg.beta2 * m.second[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m.first[j] / bc1;
                let v_hat = m.second[j] / bc2;
                value[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            if !value.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite("adam_step"));
            }
        }
        Ok(())
    }
}

/// Gradient accumulator for one parameter. Embedding lookups add whole rows,
/// which are kept sparse so large vocabularies stay cheap per example.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSlot {
    numel: usize,
    cols: usize,
    dense: Option<Vec<f64>>,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl GradSlot {
    fn new(t: &Tensor) -> Self {
        GradSlot {
            numel: t.len(),
            cols: t.cols(),
            dense: None,
            rows: BTreeMap::new(),
        }
    }

    pub fn add_dense(&mut self, g: &[f64]) {
        let d = self.dense.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in d.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add_row(&mut self, row: usize, g: &[f64]) {
        let r = self.rows.entry(row).or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in r.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = self.dense.clone().unwrap_or_else(|| vec![0.0; self.numel]);
        for (&r, g) in &self.rows {
            for (c, v) in g.iter().enumerate() {
                out[r * self.cols + c] += v;
            }
        }
        out
    }

    /// Drops everything accumulated for one row, sparse or dense.
    pub fn clear_row(&mut self, row: usize) {
        self.rows.remove(&row);
        if let Some(d) = &mut self.dense {
            d[row * self.cols..(row + 1) * self.cols].fill(0.0);
        }
    }

    /// Rows of the parameter that received any gradient through row lookups.
    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    fn merge(&mut self, other: &GradSlot) {
        if let Some(d) = &other.dense {
            self.add_dense(d);
        }
        for (&r, g) in &other.rows {
            self.add_row(r, g);
        }
    }
}

/// Gradients for every tensor of a [`ParamGroup`], index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    slots: Vec<GradSlot>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamGroup) -> Self {
        ParamGrads {
            slots: params.values.iter().map(GradSlot::new).collect(),
        }
    }

    /// Dense gradients given explicitly, in parameter order.
    pub fn from_tensors(params: &ParamGroup, grads: &[Tensor]) -> Result<Self, TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let mut out = Self::zeros_like(params);
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.values[i].shape() {
                return Err(TensorError::Shape(format!(
                    "gradient shape {:?} vs parameter {} shape {:?}",
                    g.shape(),
                    params.names[i],
                    params.values[i].shape()
                )));
            }
            out.slots[i].add_dense(g.data());
        }
        Ok(out)
    }

    pub fn slot(&self, id: ParamId) -> &GradSlot {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut GradSlot {
        &mut self.slots[id.0]
    }

    pub fn dense(&self, id: ParamId) -> Vec<f64> {
        self.slots[id.0].to_dense()
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.merge(b);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.to_dense())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
