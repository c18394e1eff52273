//! Skip-gram with negative sampling for pretraining word vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{build_vocab, Vocabulary, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnsConfig {
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Starting learning rate, decayed linearly to 1e-4 of itself.
    pub lr: f64,
    pub dim: usize,
    pub min_freq: usize,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            dim: 100,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgnsOutput {
    pub vocab: Vocabulary,
    pub table: EmbeddingMatrix,
    /// Mean negative-sampling loss per (center, context) pair, per epoch.
    pub epoch_objective: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cumulative unigram^0.75 distribution over vocabulary ids.
struct NoiseTable {
    cumulative: Vec<f64>,
}

impl NoiseTable {
    fn new(counts: &[usize]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        NoiseTable { cumulative }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.gen::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

pub fn train_skipgram<R: Rng + ?Sized>(
    corpus: &[Vec<String>],
    cfg: &SgnsConfig,
    rng: &mut R,
) -> Result<SgnsOutput> {
    if cfg.window < 1 || cfg.negatives < 1 || cfg.dim < 1 {
        return Err(Error::Config(
            "skip-gram window, negatives and dim must all be at least 1".into(),
        ));
    }
    let vocab = build_vocab(corpus, cfg.min_freq)?;
    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            s.iter()
                .filter_map(|t| vocab.get(t))
                .filter(|&id| id > UNK)
                .collect()
        })
        .collect();
    let mut counts = vec![0usize; vocab.len()];
    for s in &sentences {
        for &id in s {
            counts[id] += 1;
        }
    }
    let real_words = vocab.len() - 3;
    if real_words < cfg.negatives + 1 {
        return Err(Error::Data(format!(
            "vocabulary of {real_words} words is smaller than negatives + 1 = {}",
            cfg.negatives + 1
        )));
    }
    let noise = NoiseTable::new(&counts);

    let (v, d) = (vocab.len(), cfg.dim);
    let mut input: Vec<f64> = (0..v * d)
        .map(|_| (rng.gen::<f64>() - 0.5) / d as f64)
        .collect();
    let mut output = vec![0.0; v * d];
    input[..d].fill(0.0);

    let total_steps = (cfg.epochs * sentences.iter().map(Vec::len).sum::<usize>()).max(1);
    let mut step = 0usize;
    let mut grad_in = vec![0.0; d];
    let mut epoch_objective = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for s in &sentences {
            for i in 0..s.len() {
                let lr = cfg.lr * (1.0 - step as f64 / total_steps as f64).max(1e-4);
                step += 1;
                let center = s[i];
                let b = rng.gen_range(1..=cfg.window);
                let lo = i.saturating_sub(b);
                let hi = (i + b).min(s.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let target = s[j];
                    grad_in.fill(0.0);
                    let ci = &input[center * d..(center + 1) * d];
                    for k in 0..=cfg.negatives {
                        let (word, label) = if k == 0 {
                            (target, 1.0)
                        } else {
                            let mut w = noise.sample(rng);
                            while w == target {
                                w = noise.sample(rng);
                            }
                            (w, 0.0)
                        };
                        let out = &mut output[word * d..(word + 1) * d];
                        let score: f64 = ci.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                        let p = sigmoid(score);
                        loss_sum -= if label == 1.0 {
                            p.max(1e-12).ln()
                        } else {
                            (1.0 - p).max(1e-12).ln()
                        };
                        let g = lr * (label - p);
                        for q in 0..d {
                            grad_in[q] += g * out[q];
                            out[q] += g * ci[q];
                        }
                    }
                    for (w, gq) in input[center * d..(center + 1) * d].iter_mut().zip(&grad_in) {
                        *w += gq;
                    }
                    pairs += 1;
                }
            }
        }
        epoch_objective.push(if pairs == 0 {
            0.0
        } else {
            loss_sum / pairs as f64
        });
    }

    let table = EmbeddingMatrix::new(Tensor::matrix(v, d, input)?)?;
    Ok(SgnsOutput {
        vocab,
        table,
        epoch_objective,
    })
}
