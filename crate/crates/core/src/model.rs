//! The full tagger: embedding, first BLSTM, bank attention, second BLSTM and a
//! per-token softmax over `{F, O}`, plus the two ablations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{bank_attend, AttentionParams, AttentionTrace, BankAttention};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result, TensorError};
use crate::param::{ParamGroup, ParamId};
use crate::recurrent::{blstm_forward, BlstmParams, Dropout, SeqMask};
use crate::tape::{Tape, Var, LOG_CLAMP};
use crate::tensor::Tensor;
use crate::tokenize::EOS_TOKEN;
use crate::vocab::{Vocabulary, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    F,
    O,
}

impl Label {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            Label::F => 0,
            Label::O => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::F => "F",
            Label::O => "O",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "F" => Ok(Label::F),
            "O" => Ok(Label::O),
            other => Err(format!("unknown tag {other:?}, expected F or O")),
        }
    }
}

/// Which submodules are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Both BLSTM layers with bank attention between them.
    #[serde(rename = "SAN", alias = "san")]
    San,
    /// Two stacked BLSTMs, no bank.
    #[serde(rename = "sblstm", alias = "S-BLSTM")]
    SBlstm,
    /// Bank attention feeding the projection directly.
    #[serde(rename = "san-noblstm2", alias = "SAN(-)BLSTM2")]
    SanNoBlstm2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::San, Variant::SBlstm, Variant::SanNoBlstm2];

    pub fn key(self) -> &'static str {
        match self {
            Variant::San => "SAN",
            Variant::SBlstm => "sblstm",
            Variant::SanNoBlstm2 => "san-noblstm2",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::San => "SAN",
            Variant::SBlstm => "S-BLSTM",
            Variant::SanNoBlstm2 => "SAN(-)BLSTM2",
        }
    }

    pub fn uses_bank(self) -> bool {
        self != Variant::SBlstm
    }

    pub fn has_layer2(self) -> bool {
        self != Variant::SanNoBlstm2
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "san" => Ok(Variant::San),
            "sblstm" | "s-blstm" => Ok(Variant::SBlstm),
            "san-noblstm2" | "san(-)blstm2" | "san-minus-blstm2" => Ok(Variant::SanNoBlstm2),
            _ => Err(format!(
                "unknown variant {s:?}, expected SAN, sblstm or san-noblstm2"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SanConfig {
    pub embed_dim: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub attention_dim: usize,
    /// Tokens per question after truncation or padding.
    pub max_len: usize,
    /// Unlabeled questions per example.
    pub bank_size: usize,
    pub dropout: f64,
    pub variant: Variant,
    /// Run bank questions through the first labeled BLSTM instead of a
    /// separate one.
    pub share_bank_encoder: bool,
    pub seed: u64,
}

impl Default for SanConfig {
    fn default() -> Self {
        SanConfig {
            embed_dim: 100,
            hidden: 100,
            attention_dim: 100,
            max_len: 40,
            bank_size: 5,
            dropout: 0.2,
            variant: Variant::San,
            share_bank_encoder: false,
            seed: 42,
        }
    }
}

impl SanConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("attention_dim", self.attention_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Width of the vector fed to the output projection.
    pub fn projection_input(&self) -> usize {
        match self.variant {
            Variant::SanNoBlstm2 => 2 * self.hidden + self.attention_dim,
            _ => 2 * self.hidden,
        }
    }
}

/// Where each part of the model lives inside the [`ParamGroup`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub embedding: ParamId,
    pub layer1: BlstmParams,
    /// Separate encoder for bank questions; `None` when there is no bank or
    /// when it is shared with `layer1`.
    pub bank: Option<BlstmParams>,
    pub attention: Option<AttentionParams>,
    pub layer2: Option<BlstmParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl Layout {
    pub fn bank_encoder(&self) -> &BlstmParams {
        self.bank.as_ref().unwrap_or(&self.layer1)
    }
}

/// All trainable tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SanParams {
    pub group: ParamGroup,
    pub layout: Layout,
}

impl SanParams {
    /// Fresh parameters. The embedding table is uniform in `[-0.1, 0.1]`
    /// unless `embedding` is given.
    pub fn init<R: Rng + ?Sized>(
        cfg: &SanConfig,
        vocab_size: usize,
        embedding: Option<EmbeddingMatrix>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let table = match embedding {
            Some(e) => {
                if e.vocab_size() != vocab_size || e.dim() != cfg.embed_dim {
                    return Err(Error::Config(format!(
                        "embedding table is {}x{}, model expects {vocab_size}x{}",
                        e.vocab_size(),
                        e.dim(),
                        cfg.embed_dim
                    )));
                }
                e
            }
            None => EmbeddingMatrix::random(vocab_size, cfg.embed_dim, 0.1, rng),
        };
        let (h, a) = (cfg.hidden, cfg.attention_dim);
        let mut group = ParamGroup::new();
        let embedding = group.add("embedding", table.into_tensor());
        let layer1 = BlstmParams::init(&mut group, "layer1", cfg.embed_dim, h, rng);
        let (bank, attention) = if cfg.variant.uses_bank() {
            let bank = (!cfg.share_bank_encoder)
                .then(|| BlstmParams::init(&mut group, "bank", cfg.embed_dim, h, rng));
            let att = AttentionParams::init(&mut group, "attention", 2 * h, a, rng);
            (bank, Some(att))
        } else {
            (None, None)
        };
        let layer2 = match cfg.variant {
            Variant::San => Some(BlstmParams::init(&mut group, "layer2", 2 * h + a, h, rng)),
            Variant::SBlstm => Some(BlstmParams::init(&mut group, "layer2", 2 * h, h, rng)),
            Variant::SanNoBlstm2 => None,
        };
        let pin = cfg.projection_input();
        let limit = (6.0 / (pin + Label::COUNT) as f64).sqrt();
        let w = (0..Label::COUNT * pin)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        let out_w = group.add("output.w", Tensor::matrix(Label::COUNT, pin, w)?);
        let out_b = group.add("output.b", Tensor::zeros(&[Label::COUNT]));
        Ok(SanParams {
            group,
            layout: Layout {
                embedding,
                layer1,
                bank,
                attention,
                layer2,
                out_w,
                out_b,
            },
        })
    }
}

/// One question as model input: `ids` has exactly `max_len` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuestion {
    pub ids: Vec<usize>,
    pub mask: SeqMask,
}

impl EncodedQuestion {
    pub fn valid_len(&self) -> usize {
        self.mask.valid_len()
    }
}

/// A labeled (or to-be-labeled) question with its encoded bank. `gold`, when
/// present, has one label per position; padded positions are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub question: EncodedQuestion,
    pub bank: Vec<EncodedQuestion>,
    pub gold: Option<Vec<Label>>,
}

/// Training mode draws dropout masks from the given generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `T x 2` label distribution, columns ordered `[F, O]`.
    pub probs: Var,
    pub attention: Option<BankAttention>,
}

fn check_len(q: &EncodedQuestion, t: usize, what: &str) -> std::result::Result<(), TensorError> {
    if q.ids.len() != t || q.mask.len() != t {
        return Err(TensorError::Shape(format!(
            "{what} has {} ids and a mask of {}, expected {t}",
            q.ids.len(),
            q.mask.len()
        )));
    }
    Ok(())
}

fn encode_bank(
    tape: &mut Tape<'_>,
    layout: &Layout,
    q: &EncodedQuestion,
    hidden: usize,
) -> std::result::Result<Var, TensorError> {
    if q.valid_len() == 0 {
        return Ok(tape.zeros(q.ids.len(), 2 * hidden));
    }
    let table = tape.param(layout.embedding);
    let e = tape.gather(table, &q.ids)?;
    blstm_forward(tape, e, &q.mask, layout.bank_encoder(), None)
}

/// Records one forward pass on `tape`.
pub fn forward(
    tape: &mut Tape<'_>,
    layout: &Layout,
    cfg: &SanConfig,
    input: &EncodedExample,
    mode: Mode<'_>,
) -> std::result::Result<Forward, TensorError> {
    let t = cfg.max_len;
    check_len(&input.question, t, "question")?;
    let mut dropout_rng = match mode {
        Mode::Train(rng) if cfg.dropout > 0.0 => Some(rng),
        _ => None,
    };
    let mut dropout = dropout_rng.as_mut().map(|r| Dropout {
        rate: cfg.dropout,
        rng: &mut **r,
    });

    let table = tape.param(layout.embedding);
    let eq = tape.gather(table, &input.question.ids)?;
    let hq1 = blstm_forward(
        tape,
        eq,
        &input.question.mask,
        &layout.layer1,
        dropout.as_mut(),
    )?;

    let (hq2, attention) = match &layout.attention {
        Some(att) => {
            let mut banks = Vec::with_capacity(input.bank.len());
            for (n, q) in input.bank.iter().enumerate() {
                check_len(q, t, &format!("bank question {n}"))?;
                banks.push(encode_bank(tape, layout, q, cfg.hidden)?);
            }
            let pairs: Vec<(Var, &SeqMask)> = banks
                .iter()
                .copied()
                .zip(input.bank.iter().map(|q| &q.mask))
                .collect();
            let out = bank_attend(tape, hq1, &pairs, att)?;
            (out.hq2, Some(out))
        }
        None => (hq1, None),
    };

    let top = match &layout.layer2 {
        Some(l2) => blstm_forward(tape, hq2, &input.question.mask, l2, dropout.as_mut())?,
        None => match dropout.as_mut() {
            Some(d) => tape.dropout(hq2, d.rate, true, &mut *d.rng)?,
            None => hq2,
        },
    };
    let w = tape.param(layout.out_w);
    let b = tape.param(layout.out_b);
    let logits = tape.linear(top, w, Some(b))?;
    let probs = tape.softmax_rows(logits, None)?;
    Ok(Forward { probs, attention })
}

/// Gold label indices for the valid positions; `None` elsewhere.
pub fn gold_indices(
    input: &EncodedExample,
) -> std::result::Result<Vec<Option<usize>>, TensorError> {
    let gold = input
        .gold
        .as_ref()
        .ok_or_else(|| TensorError::Invalid("example has no gold tags".into()))?;
    if gold.len() != input.question.ids.len() {
        return Err(TensorError::Shape(format!(
            "{} gold tags for {} positions",
            gold.len(),
            input.question.ids.len()
        )));
    }
    Ok(gold
        .iter()
        .enumerate()
        .map(|(t, l)| input.question.mask.is_valid(t).then_some(l.index()))
        .collect())
}

/// Cross-entropy of the gold tags over valid positions, recorded on the tape.
pub fn example_loss(
    tape: &mut Tape<'_>,
    layout: &Layout,
    cfg: &SanConfig,
    input: &EncodedExample,
    mode: Mode<'_>,
) -> std::result::Result<Var, TensorError> {
    let gold = gold_indices(input)?;
    let out = forward(tape, layout, cfg, input, mode)?;
    tape.nll(out.probs, &gold)
}

/// `-sum_t sum_l y_tl ln p_tl` over valid rows, with `ln` clamped at `1e-12`.
pub fn loss(
    probs: &Tensor,
    gold: &Tensor,
    valid: &SeqMask,
) -> std::result::Result<f64, TensorError> {
    if probs.shape() != gold.shape() || probs.rows() != valid.len() {
        return Err(TensorError::Shape(format!(
            "probs {:?}, gold {:?}, mask {}",
            probs.shape(),
            gold.shape(),
            valid.len()
        )));
    }
    let mut total = 0.0;
    for t in (0..valid.len()).filter(|&t| valid.is_valid(t)) {
        let row = gold.row(t);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TensorError::Invalid(format!(
                "gold row {t} is not one-hot: {row:?}"
            )));
        }
        for (p, y) in probs.row(t).iter().zip(row) {
            if *y == 1.0 {
                total -= p.max(LOG_CLAMP).ln();
            }
        }
    }
    Ok(total)
}

/// Per-token argmax over the valid prefix; an exact tie goes to `O`.
pub fn predict_tags(probs: &Tensor, valid: &SeqMask) -> Vec<Label> {
    (0..valid.len().min(probs.rows()))
        .filter(|&t| valid.is_valid(t))
        .map(|t| {
            let r = probs.row(t);
            if r[Label::F.index()] > r[Label::O.index()] {
                Label::F
            } else {
                Label::O
            }
        })
        .collect()
}

/// Inclusive token range tagged as one function expression.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunctionSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Maximal runs of `F`. EOS tokens always end a run and never belong to one.
pub fn extract_spans<S: AsRef<str>>(tags: &[Label], tokens: &[S]) -> Vec<FunctionSpan> {
    let mut spans = Vec::new();
    let mut start = None;
    let n = tags.len().min(tokens.len());
    let close = |spans: &mut Vec<FunctionSpan>, s: usize, e: usize| {
        let text = tokens[s..=e]
            .iter()
            .map(|t| t.as_ref())
            .collect::<Vec<_>>()
            .join(" ");
        spans.push(FunctionSpan {
            start: s,
            end: e,
            text,
        });
    };
    for t in 0..n {
        let inside = tags[t] == Label::F && tokens[t].as_ref() != EOS_TOKEN;
        match (inside, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                close(&mut spans, s, t - 1);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        close(&mut spans, s, n - 1);
    }
    spans
}

/// Span boundaries only, for metrics on id sequences.
pub fn span_bounds(tags: &[Label], ids: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let n = tags.len().min(ids.len());
    for t in 0..n {
        let inside = tags[t] == Label::F && ids[t] != EOS;
        match (inside, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, n - 1));
    }
    out
}

/// Configuration, vocabulary and parameters together.
#[derive(Debug, Clone, PartialEq)]
pub struct SanModel {
    pub config: SanConfig,
    pub vocab: Vocabulary,
    pub params: SanParams,
}

/// Eval-mode output of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub tags: Vec<Label>,
    pub trace: Option<AttentionTrace>,
}

impl SanModel {
    pub fn new<R: Rng + ?Sized>(
        config: SanConfig,
        vocab: Vocabulary,
        embedding: Option<EmbeddingMatrix>,
        rng: &mut R,
    ) -> Result<Self> {
        let params = SanParams::init(&config, vocab.len(), embedding, rng)?;
        Ok(SanModel {
            config,
            vocab,
            params,
        })
    }

    /// Ids truncated or padded to `max_len`.
    pub fn encode(&self, tokens: &[String]) -> EncodedQuestion {
        encode_tokens(&self.vocab, tokens, self.config.max_len)
    }

    pub fn predict(&self, input: &EncodedExample) -> std::result::Result<Prediction, TensorError> {
        let mut tape = Tape::new(&self.params.group);
        let out = forward(
            &mut tape,
            &self.params.layout,
            &self.config,
            input,
            Mode::Eval,
        )?;
        let probs = tape.value(out.probs).clone();
        let tags = predict_tags(&probs, &input.question.mask);
        let trace = out.attention.as_ref().map(|a| a.trace(&tape));
        Ok(Prediction { probs, tags, trace })
    }
}

/// Maps tokens to ids and truncates or pads with PAD to `max_len`.
pub fn encode_tokens(vocab: &Vocabulary, tokens: &[String], max_len: usize) -> EncodedQuestion {
    let mut ids: Vec<usize> = tokens.iter().take(max_len).map(|t| vocab.id(t)).collect();
    let valid = ids.len();
    ids.resize(max_len, PAD);
    EncodedQuestion {
        ids,
        mask: SeqMask::prefix(valid, max_len),
    }
}
