//! Span-level exact-match and token-level `F`-class precision, recall and F1.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{span_bounds, Label};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(precision, recall, f1)`. Nothing predicted and nothing gold scores
    /// 1 everywhere; any other empty denominator scores 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        if self.tp + self.fp + self.fn_ == 0 {
            return (1.0, 1.0, 1.0);
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub span_precision: f64,
    pub span_recall: f64,
    pub span_f1: f64,
    pub token_precision: f64,
    pub token_recall: f64,
    pub token_f1: f64,
    pub span_counts: Counts,
    pub token_counts: Counts,
}

impl Metrics {
    pub fn from_counts(span: Counts, token: Counts) -> Self {
        let (sp, sr, sf) = span.prf();
        let (tp, tr, tf) = token.prf();
        Metrics {
            span_precision: sp,
            span_recall: sr,
            span_f1: sf,
            token_precision: tp,
            token_recall: tr,
            token_f1: tf,
            span_counts: span,
            token_counts: token,
        }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "span P {:.4} R {:.4} F1 {:.4} | token P {:.4} R {:.4} F1 {:.4}",
            self.span_precision,
            self.span_recall,
            self.span_f1,
            self.token_precision,
            self.token_recall,
            self.token_f1
        )
    }
}

/// Running totals over many questions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricsAccumulator {
    pub span: Counts,
    pub token: Counts,
}

impl MetricsAccumulator {
    /// Adds one question. `ids` marks EOS positions, which never belong to a
    /// span; the three slices cover the valid tokens only.
    pub fn add(&mut self, pred: &[Label], gold: &[Label], ids: &[usize]) {
        let (s, t) = sequence_counts(pred, gold, ids);
        self.span.add(s);
        self.token.add(t);
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.span.add(other.span);
        self.token.add(other.token);
    }

    pub fn finish(&self) -> Metrics {
        Metrics::from_counts(self.span, self.token)
    }
}

/// Span and token counts for one question.
pub fn sequence_counts(pred: &[Label], gold: &[Label], ids: &[usize]) -> (Counts, Counts) {
    let n = pred.len().min(gold.len()).min(ids.len());
    let mut token = Counts::default();
    for t in 0..n {
        match (pred[t], gold[t]) {
            (Label::F, Label::F) => token.tp += 1,
            (Label::F, Label::O) => token.fp += 1,
            (Label::O, Label::F) => token.fn_ += 1,
            (Label::O, Label::O) => {}
        }
    }
    let ps = span_bounds(&pred[..n], &ids[..n]);
    let gs = span_bounds(&gold[..n], &ids[..n]);
    let tp = ps.iter().filter(|s| gs.contains(s)).count();
    let span = Counts {
        tp,
        fp: ps.len() - tp,
        fn_: gs.len() - tp,
    };
    (span, token)
}
