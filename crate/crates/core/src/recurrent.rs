//! LSTM cells and bidirectional layers over masked sequences.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::param::{ParamGroup, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Real-token flags of a padded sequence. Real tokens always form a prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqMask(Vec<bool>);

impl SeqMask {
    pub fn new(flags: Vec<bool>) -> Result<Self, TensorError> {
        let len = flags.iter().take_while(|&&f| f).count();
        if flags[len..].iter().any(|&f| f) {
            return Err(TensorError::Invalid(
                "mask must mark a prefix of real tokens".into(),
            ));
        }
        Ok(SeqMask(flags))
    }

    /// `valid` leading real tokens in a sequence of `total`.
    pub fn prefix(valid: usize, total: usize) -> Self {
        assert!(valid <= total, "prefix {valid} longer than {total}");
        SeqMask((0..total).map(|i| i < valid).collect())
    }

    pub fn all(total: usize) -> Self {
        SeqMask(vec![true; total])
    }

    pub fn valid_len(&self) -> usize {
        self.0.iter().take_while(|&&f| f).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn is_valid(&self, t: usize) -> bool {
        self.0.get(t).copied().unwrap_or(false)
    }

    /// Same mask extended with `extra` padding positions.
    pub fn padded(&self, extra: usize) -> Self {
        let mut f = self.0.clone();
        f.extend(std::iter::repeat_n(false, extra));
        SeqMask(f)
    }
}

/// One LSTM direction. Gate blocks are stacked `[input, forget, candidate,
/// output]`: `w_ih` is `4H x din`, `w_hh` is `4H x H`, `b` has `4H` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BlstmParams {
    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.fwd.w_ih,
            self.fwd.w_hh,
            self.fwd.b,
            self.bwd.w_ih,
            self.bwd.w_hh,
            self.bwd.b,
        ]
    }
}

/// Glorot-uniform matrix where each of `blocks` stacked row blocks has its own
/// fan-in/fan-out.
pub(crate) fn glorot<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    blocks: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / ((rows / blocks) + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

impl LstmParams {
    /// Glorot-uniform weights, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(
        group: &mut ParamGroup,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = group.add(format!("{prefix}.w_ih"), glorot(4 * hidden, input, 4, rng));
        let w_hh = group.add(format!("{prefix}.w_hh"), glorot(4 * hidden, hidden, 4, rng));
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = group.add(format!("{prefix}.b"), bias);
        LstmParams {
            w_ih,
            w_hh,
            b,
            hidden,
        }
    }
}

impl BlstmParams {
    pub fn init<R: Rng + ?Sized>(
        group: &mut ParamGroup,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BlstmParams {
            fwd: LstmParams::init(group, &format!("{prefix}.fwd"), input, hidden, rng),
            bwd: LstmParams::init(group, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }
}

/// One recurrence step on single-row inputs; returns `(h_t, c_t)`.
pub fn lstm_step(
    tape: &mut Tape<'_>,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmParams,
) -> Result<(Var, Var), TensorError> {
    let w_ih = tape.param(p.w_ih);
    let w_hh = tape.param(p.w_hh);
    let b = tape.param(p.b);
    let xin = tape.linear(x_t, w_ih, Some(b))?;
    step_from_input(tape, xin, h_prev, c_prev, w_hh, p.hidden)
}

fn step_from_input(
    tape: &mut Tape<'_>,
    xin: Var,
    h_prev: Var,
    c_prev: Var,
    w_hh: Var,
    hidden: usize,
) -> Result<(Var, Var), TensorError> {
    let rec = tape.matmul_t(h_prev, w_hh)?;
    let pre = tape.add(xin, rec)?;
    let hc = tape.lstm_cell(pre, c_prev)?;
    let h = tape.slice_cols(hc, 0, hidden)?;
    let c = tape.slice_cols(hc, hidden, hidden)?;
    Ok((h, c))
}

/// Runs one direction over the valid prefix; returns the hidden state of each
/// valid position in sequence order.
fn scan(
    tape: &mut Tape<'_>,
    xin_all: Var,
    valid: usize,
    p: &LstmParams,
    reverse: bool,
) -> Result<Vec<Var>, TensorError> {
    let w_hh = tape.param(p.w_hh);
    let mut h = tape.zeros(1, p.hidden);
    let mut c = tape.zeros(1, p.hidden);
    let mut out = vec![h; valid];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..valid).rev())
    } else {
        Box::new(0..valid)
    };
    for t in order {
        let xin = tape.row(xin_all, t)?;
        let (nh, nc) = step_from_input(tape, xin, h, c, w_hh, p.hidden)?;
        h = nh;
        c = nc;
        out[t] = h;
    }
    Ok(out)
}

/// Dropout settings for a training-mode pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

/// Bidirectional pass over `x` (`T x din`). Row `t` of the result is the
/// forward state at `t` joined with the backward state at `t`; the backward
/// scan starts at the last valid token. Rows past the valid prefix are zero.
pub fn blstm_forward(
    tape: &mut Tape<'_>,
    x: Var,
    mask: &SeqMask,
    p: &BlstmParams,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var, TensorError> {
    let (t_len, din) = tape.value(x).dims2();
    if mask.len() != t_len {
        return Err(TensorError::Shape(format!(
            "mask of {} for a sequence of {t_len}",
            mask.len()
        )));
    }
    let expected_in = tape.params().get(p.fwd.w_ih).cols();
    if din != expected_in {
        return Err(TensorError::Shape(format!(
            "blstm input width {din}, weights expect {expected_in}"
        )));
    }
    let valid = mask.valid_len();
    let h2 = p.output_dim();
    let mut rows = Vec::with_capacity(2);
    if valid > 0 {
        let mut dirs = Vec::with_capacity(2);
        for (lp, reverse) in [(&p.fwd, false), (&p.bwd, true)] {
            let w_ih = tape.param(lp.w_ih);
            let b = tape.param(lp.b);
            let xin = tape.linear(x, w_ih, Some(b))?;
            let states = scan(tape, xin, valid, lp, reverse)?;
            dirs.push(tape.stack_rows(&states)?);
        }
        rows.push(tape.concat_cols(&dirs)?);
    }
    if valid < t_len {
        rows.push(tape.zeros(t_len - valid, h2));
    }
    let out = if rows.len() == 1 {
        rows[0]
    } else {
        tape.stack_rows(&rows)?
    };
    match dropout {
        Some(d) => tape.dropout(out, d.rate, true, &mut *d.rng),
        None => Ok(out),
    }
}
