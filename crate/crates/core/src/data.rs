//! Corpus records, loading and the conversion to fixed-length model inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncodedExample, EncodedQuestion, Label};
use crate::recurrent::SeqMask;
use crate::tokenize::{question_tokens, split_sentences, EOS_TOKEN, PAD_TOKEN};
use crate::vocab::{Vocabulary, PAD};

/// One question-answer pair. `tags`, when present, has one entry per token;
/// records without tags are unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub product_id: String,
    pub category: String,
    pub question_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<Label>>,
}

impl QaRecord {
    pub fn is_labeled(&self) -> bool {
        self.tags.is_some()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if let Some(tags) = &self.tags {
            if tags.len() != self.question_tokens.len() {
                return Err(format!(
                    "{} tags for {} question tokens",
                    tags.len(),
                    self.question_tokens.len()
                ));
            }
        }
        Ok(())
    }
}

/// Parses a JSON-Lines corpus. Blank lines are skipped; every error carries
/// its 1-based line number.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<QaRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        rec.validate().map_err(|m| Error::parse(path, i + 1, m))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<QaRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

/// Like [`load_corpus`] but keeps the 1-based line number of each record.
pub fn load_corpus_lines(path: &Path) -> Result<Vec<(usize, QaRecord)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        rec.validate().map_err(|m| Error::parse(path, i + 1, m))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[QaRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Token sequences for embedding pretraining: JSON-Lines records if the
/// first non-blank line opens an object, one raw question per line otherwise.
pub fn load_raw_questions(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    if first.is_some_and(|l| l.trim_start().starts_with('{')) {
        Ok(parse_corpus(&text, path)?
            .into_iter()
            .map(|r| r.question_tokens)
            .collect())
    } else {
        Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(question_tokens)
            .collect())
    }
}

/// A question after sentence joining, truncation and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    /// Real tokens only, at most `max_len` of them.
    pub tokens: Vec<String>,
    pub encoded: EncodedQuestion,
    /// One tag per position, `O` on padding and on EOS.
    pub tags: Option<Vec<Label>>,
}

/// Joins sentences with EOS, truncates to `max_len` and pads with PAD.
/// Trailing PAD tokens in the input are dropped first, so the operation is
/// idempotent on its own output.
pub fn preprocess(record: &QaRecord, vocab: &Vocabulary, max_len: usize) -> Result<Preprocessed> {
    let mut end = record.question_tokens.len();
    while end > 0 && record.question_tokens[end - 1] == PAD_TOKEN {
        end -= 1;
    }
    let raw = &record.question_tokens[..end];
    if raw.is_empty() {
        return Err(Error::Data(format!(
            "empty question for product {}",
            record.product_id
        )));
    }
    let raw_tags = record.tags.as_ref().map(|t| &t[..end]);

    // Sentence boundaries: an EOS goes after every sentence-final token that
    // is followed by more text, unless an EOS is already there.
    let sentences = split_sentences(raw);
    let mut tokens = Vec::with_capacity(raw.len() + sentences.len());
    let mut tags = raw_tags.map(|_| Vec::with_capacity(raw.len() + sentences.len()));
    let mut pos = 0;
    for (si, s) in sentences.iter().enumerate() {
        if si > 0 {
            tokens.push(EOS_TOKEN.to_string());
            if let Some(t) = tags.as_mut() {
                t.push(Label::O);
            }
        }
        for tok in s {
            while raw[pos] == EOS_TOKEN {
                pos += 1;
            }
            debug_assert_eq!(&raw[pos], tok);
            tokens.push(tok.clone());
            if let (Some(t), Some(rt)) = (tags.as_mut(), raw_tags) {
                t.push(rt[pos]);
            }
            pos += 1;
        }
    }
    if tokens.is_empty() {
        return Err(Error::Data(format!(
            "question for product {} has no tokens besides EOS",
            record.product_id
        )));
    }
    tokens.truncate(max_len);
    let valid = tokens.len();
    let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    ids.resize(max_len, PAD);
    let tags = tags.map(|mut t| {
        t.truncate(valid);
        t.resize(max_len, Label::O);
        t
    });
    Ok(Preprocessed {
        tokens,
        encoded: EncodedQuestion {
            ids,
            mask: SeqMask::prefix(valid, max_len),
        },
        tags,
    })
}

/// One labeled question with its retrieved bank, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub record: QaRecord,
    pub bank: Vec<QaRecord>,
    pub tokens: Vec<String>,
    pub input: EncodedExample,
}

impl Example {
    /// Gold tags over the real tokens.
    pub fn gold_tags(&self) -> Option<&[Label]> {
        let n = self.input.question.valid_len();
        self.input.gold.as_deref().map(|g| &g[..n])
    }
}

/// Preprocesses a question and its bank. Empty bank questions are dropped.
pub fn build_example(
    record: QaRecord,
    bank: Vec<QaRecord>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Example> {
    let q = preprocess(&record, vocab, max_len)?;
    let mut bank_records = Vec::with_capacity(bank.len());
    let mut bank_inputs = Vec::with_capacity(bank.len());
    for b in bank {
        match preprocess(&b, vocab, max_len) {
            Ok(p) => {
                bank_inputs.push(p.encoded);
                bank_records.push(b);
            }
            Err(Error::Data(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Example {
        record,
        bank: bank_records,
        tokens: q.tokens,
        input: EncodedExample {
            question: q.encoded,
            bank: bank_inputs,
            gold: q.tags,
        },
    })
}

/// Every question of every record, for vocabulary building.
pub fn question_corpus<'a>(records: impl IntoIterator<Item = &'a QaRecord>) -> Vec<Vec<String>> {
    records
        .into_iter()
        .map(|r| {
            r.question_tokens
                .iter()
                .filter(|t| *t != PAD_TOKEN)
                .cloned()
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, EOS};

    const FIG1: &str = r#"{"product_id":"p1","category":"laptop","question_tokens":["Works","with","iphone","?"],"tags":["F","F","F","O"]}"#;

    fn rec(tokens: &[&str], tags: Option<&[Label]>) -> QaRecord {
        QaRecord {
            product_id: "p".into(),
            category: "c".into(),
            question_tokens: tokens.iter().map(|s| s.to_string()).collect(),
            answer_text: None,
            tags: tags.map(|t| t.to_vec()),
        }
    }

    #[test]
    fn parses_labeled_and_unlabeled_lines() {
        let text = format!(
            "{FIG1}\n\n{}\n",
            r#"{"product_id":"p1","category":"laptop","question_tokens":["is","it","red","?"],"answer_text":"yes"}"#
        );
        let recs = parse_corpus(&text, Path::new("c.jsonl")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(
            recs[0].tags.as_deref(),
            Some(&[Label::F, Label::F, Label::F, Label::O][..])
        );
        assert!(!recs[1].is_labeled());
    }

    #[test]
    fn errors_name_the_line() {
        let bad_len = r#"{"product_id":"p","category":"c","question_tokens":["a","b","c","d"],"tags":["F","O","O"]}"#;
        let text = format!("{FIG1}\n{bad_len}\n");
        let err = parse_corpus(&text, Path::new("c.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let bad_tag = r#"{"product_id":"p","category":"c","question_tokens":["a"],"tags":["B"]}"#;
        let err = parse_corpus(bad_tag, Path::new("c.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(parse_corpus("{not json", Path::new("c.jsonl")).is_err());
    }

    #[test]
    fn padding_and_truncation() {
        let vocab = build_vocab(&[vec!["works", "with", "iphone", "?"]], 1).unwrap();
        let r = rec(
            &["Works", "with", "iphone", "?"],
            Some(&[Label::F, Label::F, Label::F, Label::O]),
        );
        let p = preprocess(&r, &vocab, 40).unwrap();
        assert_eq!(p.encoded.ids.len(), 40);
        assert!(p.encoded.ids[4..].iter().all(|&i| i == PAD));
        assert_eq!(p.encoded.mask.valid_len(), 4);
        assert_eq!(
            p.tags.as_ref().unwrap()[..4],
            [Label::F, Label::F, Label::F, Label::O]
        );

        let long: Vec<String> = (0..45).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = long.iter().map(String::as_str).collect();
        let p = preprocess(&rec(&refs, None), &vocab, 40).unwrap();
        assert_eq!(p.tokens, long[..40]);
        assert_eq!(p.encoded.mask.valid_len(), 40);
    }

    #[test]
    fn sentences_get_eos_tagged_o() {
        let vocab = build_vocab(&[vec!["a", "b", "c", "."]], 1).unwrap();
        let r = rec(
            &["a", "b", ".", "c"],
            Some(&[Label::F, Label::F, Label::O, Label::F]),
        );
        let p = preprocess(&r, &vocab, 8).unwrap();
        assert_eq!(p.tokens, ["a", "b", ".", EOS_TOKEN, "c"]);
        assert_eq!(p.encoded.ids[3], EOS);
        assert_eq!(
            p.tags.unwrap()[..5],
            [Label::F, Label::F, Label::O, Label::O, Label::F]
        );

        let r = rec(
            &["a", "b", EOS_TOKEN, "c"],
            Some(&[Label::F, Label::F, Label::F, Label::O]),
        );
        let p = preprocess(&r, &vocab, 8).unwrap();
        assert_eq!(p.tokens, ["a", "b", EOS_TOKEN, "c"]);
        assert_eq!(p.tags.unwrap()[2], Label::O);
    }

    #[test]
    fn idempotent_on_padded_output() {
        let vocab = build_vocab(&[vec!["a", "b", "c", "."]], 1).unwrap();
        let r = rec(
            &["a", ".", "b", "c"],
            Some(&[Label::O, Label::O, Label::F, Label::F]),
        );
        let p = preprocess(&r, &vocab, 6).unwrap();
        let mut again = p.tokens.clone();
        again.resize(6, PAD_TOKEN.to_string());
        let r2 = rec(
            &again.iter().map(String::as_str).collect::<Vec<_>>(),
            p.tags.as_deref(),
        );
        assert_eq!(preprocess(&r2, &vocab, 6).unwrap(), p);
    }

    #[test]
    fn empty_question_is_an_error() {
        let vocab = build_vocab(&[vec!["a"]], 1).unwrap();
        assert!(preprocess(&rec(&[], None), &vocab, 4).is_err());
        assert!(preprocess(&rec(&[EOS_TOKEN], None), &vocab, 4).is_err());
    }

    #[test]
    fn raw_questions_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        fs::write(&a, format!("{FIG1}\n")).unwrap();
        assert_eq!(
            load_raw_questions(&a).unwrap()[0],
            ["Works", "with", "iphone", "?"]
        );
        let b = dir.path().join("b.txt");
        fs::write(&b, "Works with iphone?\nIs it red? Or blue.\n").unwrap();
        let q = load_raw_questions(&b).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[1], ["Is", "it", "red", "?", EOS_TOKEN, "Or", "blue", "."]);
    }
}
