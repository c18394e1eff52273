//! Bank attention: each word of a labeled question attends over the words of
//! every retrieved unlabeled question (level 1), then over the per-question
//! summaries (level 2). The result is a side vector per word that is joined
//! to the word's BLSTM state.
//!
//! With `q_t = tanh(W_r h_t + b_r)` and bank keys `k_v = tanh(W_k u_v + b_k)`:
//!
//! ```text
//! level 1:  a_tv   = softmax_v(q_t . k_v)          over valid bank words
//!           m_tn   = sum_v a_tv k_v                one summary per question n
//! level 2:  m'_tn  = tanh(W_k' m_tn + b_k')
//!           b_tn   = softmax_n(q_t . m'_tn)        over non-empty questions
//!           s_t    = sum_n b_tn m'_tn
//! output:   [h_t ; s_t]
//! ```
//!
//! Scores are plain dot products. Padding inside a bank question gets exactly
//! zero weight, a bank question with no real token is left out of level 2, and
//! an empty bank yields `s_t = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::param::{ParamGroup, ParamId};
use crate::recurrent::{glorot, SeqMask};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Query transform (`w_r`, `b_r`), bank-word transform (`w_k`, `b_k`) and
/// summary transform (`w_kp`, `b_kp`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_kp: ParamId,
    pub b_kp: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        group: &mut ParamGroup,
        prefix: &str,
        input: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        AttentionParams {
            w_r: group.add(format!("{prefix}.w_r"), glorot(dim, input, 1, rng)),
            b_r: group.add(format!("{prefix}.b_r"), Tensor::zeros(&[dim])),
            w_k: group.add(format!("{prefix}.w_k"), glorot(dim, input, 1, rng)),
            b_k: group.add(format!("{prefix}.b_k"), Tensor::zeros(&[dim])),
            w_kp: group.add(format!("{prefix}.w_kp"), glorot(dim, dim, 1, rng)),
            b_kp: group.add(format!("{prefix}.b_kp"), Tensor::zeros(&[dim])),
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.w_r, self.b_r, self.w_k, self.b_k, self.w_kp, self.b_kp]
    }

    pub fn dim(&self, group: &ParamGroup) -> usize {
        group.get(self.w_r).rows()
    }
}

fn tanh_linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var, TensorError> {
    let w = tape.param(w);
    let b = tape.param(b);
    let z = tape.linear(x, w, Some(b))?;
    tape.tanh(z)
}

/// `tanh(W_r h + b_r)` for every row of `hq1`.
pub fn transform_query(
    tape: &mut Tape<'_>,
    hq1: Var,
    p: &AttentionParams,
) -> Result<Var, TensorError> {
    tanh_linear(tape, hq1, p.w_r, p.b_r)
}

/// `tanh(W_k u + b_k)` for every row of a bank question's BLSTM output.
pub fn transform_bank(
    tape: &mut Tape<'_>,
    hu: Var,
    p: &AttentionParams,
) -> Result<Var, TensorError> {
    tanh_linear(tape, hu, p.w_k, p.b_k)
}

/// Level 1 for every query row at once: weights are `T_q x T_u`, the attended
/// summaries `T_q x A`.
pub fn level1_attend(
    tape: &mut Tape<'_>,
    queries: Var,
    bank_keys: Var,
    bank_mask: &SeqMask,
) -> Result<(Var, Var), TensorError> {
    if bank_mask.len() != tape.value(bank_keys).rows() {
        return Err(TensorError::Shape(format!(
            "bank mask of {} for {} bank rows",
            bank_mask.len(),
            tape.value(bank_keys).rows()
        )));
    }
    let scores = tape.matmul_t(queries, bank_keys)?;
    let weights = tape.softmax_rows(scores, Some(bank_mask.flags()))?;
    let attended = tape.matmul(weights, bank_keys)?;
    Ok((weights, attended))
}

/// Level 2 over the per-question summaries. `attended[n]` is `T_q x A`;
/// questions with `bank_valid[n] == false` get weight exactly zero. Returns
/// weights (`T_q x |U|`) and side vectors (`T_q x A`); both are zero when no
/// question is valid.
pub fn level2_attend(
    tape: &mut Tape<'_>,
    queries: Var,
    attended: &[Var],
    bank_valid: &[bool],
    p: &AttentionParams,
) -> Result<(Var, Var), TensorError> {
    if attended.len() != bank_valid.len() {
        return Err(TensorError::Shape(format!(
            "{} summaries with {} validity flags",
            attended.len(),
            bank_valid.len()
        )));
    }
    let (tq, a) = tape.value(queries).dims2();
    if !bank_valid.iter().any(|&v| v) {
        let w = tape.zeros(tq, attended.len());
        let s = tape.zeros(tq, a);
        return Ok((w, s));
    }
    let mut keys = Vec::with_capacity(attended.len());
    let mut scores = Vec::with_capacity(attended.len());
    for (&m, &valid) in attended.iter().zip(bank_valid) {
        if valid {
            let k = tanh_linear(tape, m, p.w_kp, p.b_kp)?;
            scores.push(tape.row_dot(queries, k)?);
            keys.push(k);
        } else {
            scores.push(tape.zeros(tq, 1));
            keys.push(tape.zeros(tq, a));
        }
    }
    let scores = tape.concat_cols(&scores)?;
    let weights = tape.softmax_rows(scores, Some(bank_valid))?;
    let side = tape.mix_rows(weights, &keys)?;
    Ok((weights, side))
}

/// Tape handles of one bank-attention pass.
#[derive(Debug, Clone)]
pub struct BankAttention {
    pub hq2: Var,
    pub side: Var,
    pub level2_weights: Var,
    /// Per bank question; `None` for questions without real tokens.
    pub level1: Vec<Option<(Var, Var)>>,
    pub bank_lens: Vec<usize>,
}

/// Full bank attention. `banks` holds each unlabeled question's BLSTM output
/// (`T_u x 2H`) with its mask. Returns `[hq1 ; s]` row by row.
pub fn bank_attend(
    tape: &mut Tape<'_>,
    hq1: Var,
    banks: &[(Var, &SeqMask)],
    p: &AttentionParams,
) -> Result<BankAttention, TensorError> {
    let queries = transform_query(tape, hq1, p)?;
    let mut level1 = Vec::with_capacity(banks.len());
    let mut summaries = Vec::with_capacity(banks.len());
    let mut valid = Vec::with_capacity(banks.len());
    let (tq, a) = tape.value(queries).dims2();
    for &(hu, mask) in banks {
        if mask.valid_len() == 0 {
            level1.push(None);
            summaries.push(tape.zeros(tq, a));
            valid.push(false);
            continue;
        }
        let keys = transform_bank(tape, hu, p)?;
        let (w, m) = level1_attend(tape, queries, keys, mask)?;
        level1.push(Some((w, m)));
        summaries.push(m);
        valid.push(true);
    }
    let (level2_weights, side) = if banks.is_empty() {
        (tape.zeros(tq, 0), tape.zeros(tq, a))
    } else {
        level2_attend(tape, queries, &summaries, &valid, p)?
    };
    let hq2 = tape.concat_cols(&[hq1, side])?;
    Ok(BankAttention {
        hq2,
        side,
        level2_weights,
        level1,
        bank_lens: banks.iter().map(|(_, m)| m.len()).collect(),
    })
}

/// Attention weights and intermediate vectors of one labeled question,
/// indexed `[t][n][..]` for per-question quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub level1_weights: Vec<Vec<Vec<f64>>>,
    pub level1_attended: Vec<Vec<Vec<f64>>>,
    pub level2_weights: Vec<Vec<f64>>,
    pub side: Vec<Vec<f64>>,
}

impl BankAttention {
    pub fn trace(&self, tape: &Tape<'_>) -> AttentionTrace {
        let side = tape.value(self.side);
        let (tq, a) = side.dims2();
        let l2 = tape.value(self.level2_weights);
        let mut level1_weights = vec![Vec::with_capacity(self.level1.len()); tq];
        let mut level1_attended = vec![Vec::with_capacity(self.level1.len()); tq];
        for (n, entry) in self.level1.iter().enumerate() {
            for t in 0..tq {
                match entry {
                    Some((w, m)) => {
                        level1_weights[t].push(tape.value(*w).row(t).to_vec());
                        level1_attended[t].push(tape.value(*m).row(t).to_vec());
                    }
                    None => {
                        level1_weights[t].push(vec![0.0; self.bank_lens[n]]);
                        level1_attended[t].push(vec![0.0; a]);
                    }
                }
            }
        }
        AttentionTrace {
            level1_weights,
            level1_attended,
            level2_weights: (0..tq).map(|t| l2.row(t).to_vec()).collect(),
            side: side.to_rows(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn with_params(input: usize, dim: usize, seed: u64) -> (ParamGroup, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ParamGroup::new();
        let p = AttentionParams::init(&mut g, "att", input, dim, &mut rng);
        (g, p)
    }

    fn set(g: &mut ParamGroup, id: ParamId, rows: usize, cols: usize, data: &[f64]) {
        *g.get_mut(id) = if rows == 0 {
            Tensor::vector(data.to_vec())
        } else {
            Tensor::matrix(rows, cols, data.to_vec()).unwrap()
        };
    }

    #[test]
    fn zero_query_transform() {
        let (mut g, p) = with_params(2, 2, 0);
        set(&mut g, p.w_r, 2, 2, &[0.0; 4]);
        let mut tape = Tape::new(&g);
        let h = tape
            .leaf(Tensor::matrix(1, 2, vec![3.0, -4.0]).unwrap())
            .unwrap();
        let q = transform_query(&mut tape, h, &p).unwrap();
        assert_eq!(tape.value(q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn query_transform_hand_case() {
        let (mut g, p) = with_params(2, 2, 0);
        set(&mut g, p.w_r, 2, 2, &[1.0, 2.0, -1.0, 0.5]);
        set(&mut g, p.b_r, 0, 0, &[0.1, -0.2]);
        let mut tape = Tape::new(&g);
        let h = tape
            .leaf(Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap())
            .unwrap();
        let q = transform_query(&mut tape, h, &p).unwrap();
        let expect = [(0.3f64 + 0.8 + 0.1).tanh(), (-0.3f64 + 0.2 - 0.2).tanh()];
        assert!((tape.value(q).data()[0] - expect[0]).abs() < 1e-15);
        assert!((tape.value(q).data()[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn level1_singleton_and_orthogonal() {
        let g = ParamGroup::new();
        let mut tape = Tape::new(&g);
        let q = tape
            .leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap())
            .unwrap();
        let k = tape
            .leaf(Tensor::matrix(3, 2, vec![0.2, 0.7, 0.0, 0.5, 9.0, 9.0]).unwrap())
            .unwrap();
        let (w, m) = level1_attend(&mut tape, q, k, &SeqMask::prefix(1, 3)).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(tape.value(m).data(), &[0.2, 0.7]);

        let k2 = tape
            .leaf(Tensor::matrix(3, 2, vec![0.0, 0.3, 0.0, -0.9, 0.0, 0.1]).unwrap())
            .unwrap();
        let (w2, _) = level1_attend(&mut tape, q, k2, &SeqMask::all(3)).unwrap();
        for v in tape.value(w2).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn level1_hand_case() {
        let g = ParamGroup::new();
        let mut tape = Tape::new(&g);
        let q = tape
            .leaf(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap())
            .unwrap();
        let k = tape
            .leaf(Tensor::matrix(2, 2, vec![0.8, 0.2, -0.4, 0.6]).unwrap())
            .unwrap();
        let (w, m) = level1_attend(&mut tape, q, k, &SeqMask::all(2)).unwrap();
        let s = [0.5 * 0.8 - 0.5 * 0.2, 0.5 * -0.4 - 0.5 * 0.6];
        let e = [f64::exp(s[0]), f64::exp(s[1])];
        let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let expect = [a[0] * 0.8 + a[1] * -0.4, a[0] * 0.2 + a[1] * 0.6];
        for i in 0..2 {
            assert!((tape.value(w).data()[i] - a[i]).abs() < 1e-15);
            assert!((tape.value(m).data()[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn level1_empty_support() {
        let g = ParamGroup::new();
        let mut tape = Tape::new(&g);
        let q = tape
            .leaf(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap())
            .unwrap();
        let k = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(
            level1_attend(&mut tape, q, k, &SeqMask::prefix(0, 2)).unwrap_err(),
            TensorError::EmptySupport
        );
    }

    #[test]
    fn level2_singleton_and_empty() {
        let (g, p) = with_params(2, 2, 5);
        let mut tape = Tape::new(&g);
        let q = tape
            .leaf(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap())
            .unwrap();
        let m = tape
            .leaf(Tensor::matrix(1, 2, vec![0.3, 0.1]).unwrap())
            .unwrap();
        let (w, s) = level2_attend(&mut tape, q, &[m], &[true], &p).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        let kp = {
            let wv = g.get(p.w_kp);
            let bv = g.get(p.b_kp).data();
            [
                (wv.get(0, 0) * 0.3 + wv.get(0, 1) * 0.1 + bv[0]).tanh(),
                (wv.get(1, 0) * 0.3 + wv.get(1, 1) * 0.1 + bv[1]).tanh(),
            ]
        };
        assert!((tape.value(s).data()[0] - kp[0]).abs() < 1e-15);
        assert!((tape.value(s).data()[1] - kp[1]).abs() < 1e-15);

        let (w0, s0) = level2_attend(&mut tape, q, &[m], &[false], &p).unwrap();
        assert_eq!(tape.value(w0).data(), &[0.0]);
        assert_eq!(tape.value(s0).data(), &[0.0, 0.0]);
        let (_, se) = level2_attend(&mut tape, q, &[], &[], &p).unwrap();
        assert_eq!(tape.value(se).data(), &[0.0, 0.0]);
    }

    /// Brute-force evaluation of the two attention levels for one word.
    fn oracle(
        g: &ParamGroup,
        p: &AttentionParams,
        h: &[f64],
        banks: &[Vec<Vec<f64>>],
    ) -> (Vec<f64>, Vec<f64>) {
        let aff_tanh = |w: &Tensor, b: &[f64], x: &[f64]| -> Vec<f64> {
            (0..w.rows())
                .map(|r| (0..x.len()).map(|k| w.get(r, k) * x[k]).sum::<f64>() + b[r])
                .map(f64::tanh)
                .collect()
        };
        let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let soft = |s: &[f64]| {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
        };
        let q = aff_tanh(g.get(p.w_r), g.get(p.b_r).data(), h);
        let mut kps = Vec::new();
        for bank in banks {
            let ks: Vec<Vec<f64>> = bank
                .iter()
                .map(|u| aff_tanh(g.get(p.w_k), g.get(p.b_k).data(), u))
                .collect();
            let a = soft(&ks.iter().map(|k| dotp(&q, k)).collect::<Vec<_>>());
            let mut m = vec![0.0; q.len()];
            for (k, av) in ks.iter().zip(&a) {
                for j in 0..m.len() {
                    m[j] += av * k[j];
                }
            }
            kps.push(aff_tanh(g.get(p.w_kp), g.get(p.b_kp).data(), &m));
        }
        let b = soft(&kps.iter().map(|k| dotp(&q, k)).collect::<Vec<_>>());
        let mut s = vec![0.0; q.len()];
        for (k, bv) in kps.iter().zip(&b) {
            for j in 0..s.len() {
                s[j] += bv * k[j];
            }
        }
        (b, s)
    }

    #[test]
    fn two_bank_hand_case_matches_oracle() {
        let (g, p) = with_params(4, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let hq = rand_tensor(&mut rng, 2, 4);
        let b1 = rand_tensor(&mut rng, 3, 4);
        let b2 = rand_tensor(&mut rng, 2, 4);
        let mut tape = Tape::new(&g);
        let hv = tape.leaf(hq.clone()).unwrap();
        let v1 = tape.leaf(b1.clone()).unwrap();
        let v2 = tape.leaf(b2.clone()).unwrap();
        let (m1, m2) = (SeqMask::all(3), SeqMask::all(2));
        let att = bank_attend(&mut tape, hv, &[(v1, &m1), (v2, &m2)], &p).unwrap();
        let trace = att.trace(&tape);
        assert_eq!(tape.value(att.hq2).dims2(), (2, 4 + 3));
        for t in 0..2 {
            let (w, s) = oracle(&g, &p, hq.row(t), &[b1.to_rows(), b2.to_rows()]);
            for n in 0..2 {
                assert!((trace.level2_weights[t][n] - w[n]).abs() < 1e-14);
            }
            for j in 0..3 {
                assert!((trace.side[t][j] - s[j]).abs() < 1e-14);
                assert_eq!(tape.value(att.hq2).get(t, 4 + j), trace.side[t][j]);
            }
            assert_eq!(&tape.value(att.hq2).row(t)[..4], hq.row(t));
        }
    }

    #[test]
    fn empty_bank_gives_zero_side() {
        let (g, p) = with_params(4, 3, 8);
        let mut tape = Tape::new(&g);
        let hv = tape.leaf(Tensor::full(&[2, 4], 0.3)).unwrap();
        let att = bank_attend(&mut tape, hv, &[], &p).unwrap();
        assert!(tape.value(att.side).data().iter().all(|v| *v == 0.0));
        let hb = tape.leaf(Tensor::zeros(&[3, 4])).unwrap();
        let m = SeqMask::prefix(0, 3);
        let att = bank_attend(&mut tape, hv, &[(hb, &m)], &p).unwrap();
        assert!(tape.value(att.side).data().iter().all(|v| *v == 0.0));
        assert_eq!(att.trace(&tape).level1_weights[0][0], vec![0.0; 3]);
    }

    #[test]
    fn attention_gradients() {
        let (mut g, p) = with_params(4, 3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let hq = g.add("hq", rand_tensor(&mut rng, 2, 4));
        let b1 = g.add("b1", rand_tensor(&mut rng, 3, 4));
        let b2 = g.add("b2", rand_tensor(&mut rng, 4, 4));
        let weights: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m1 = SeqMask::prefix(2, 3);
        let m2 = SeqMask::all(4);
        let report = grad_check(
            |tape| {
                let h = tape.param(hq);
                let u1 = tape.param(b1);
                let u2 = tape.param(b2);
                let att = bank_attend(tape, h, &[(u1, &m1), (u2, &m2)], &p)?;
                let w = tape.scale_const(att.hq2, weights.clone())?;
                tape.sum_all(w)
            },
            &g,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
