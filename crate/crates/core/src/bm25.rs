//! BM25 retrieval of similar unlabeled questions, one index per category.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::QaRecord;
use crate::error::{Error, Result};
use crate::tokenize::{EOS_TOKEN, PAD_TOKEN};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

fn normalize(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| *t != PAD_TOKEN && *t != EOS_TOKEN)
        .map(|t| t.to_lowercase())
        .collect()
}

/// Inverted index over one pool of documents. Document ids are positions in
/// the slice given to [`Bm25Index::new`].
#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    docs: Vec<Vec<String>>,
    postings: HashMap<String, Vec<(usize, usize)>>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new(docs: &[Vec<String>]) -> Self {
        Self::with_params(docs, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params(docs: &[Vec<String>], k1: f64, b: f64) -> Self {
        let docs: Vec<Vec<String>> = docs.iter().map(|d| normalize(d)).collect();
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (id, d) in docs.iter().enumerate() {
            let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
            for t in d {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push((id, n));
            }
        }
        let total: usize = docs.iter().map(Vec::len).sum();
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Bm25Index {
            k1,
            b,
            docs,
            postings,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `max(0, ln((N - df + 0.5) / (df + 0.5)))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    /// Score of an arbitrary token list against this index's statistics.
    /// Each distinct query term counts once.
    pub fn score_tokens(&self, query: &[String], doc: &[String]) -> f64 {
        let query = normalize(query);
        let doc = normalize(doc);
        let mut distinct: Vec<&String> = query.iter().collect();
        distinct.sort();
        distinct.dedup();
        let dl = doc.len() as f64;
        let norm = if self.avg_len > 0.0 {
            self.k1 * (1.0 - self.b + self.b * dl / self.avg_len)
        } else {
            self.k1
        };
        distinct
            .into_iter()
            .map(|term| {
                let tf = doc.iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    0.0
                } else {
                    self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)
                }
            })
            .sum()
    }

    pub fn score(&self, query: &[String], doc: usize) -> f64 {
        self.score_tokens(query, &self.docs[doc])
    }

    /// Up to `top_k` document ids by descending score, ties by id. Documents
    /// whose token sequence equals the query's are skipped.
    pub fn top_k(&self, query: &[String], top_k: usize) -> Vec<(usize, f64)> {
        let q = normalize(query);
        let mut scored: Vec<(usize, f64)> = (0..self.docs.len())
            .filter(|&d| self.docs[d] != q)
            .map(|d| (d, self.score_tokens(&q, &self.docs[d])))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_k);
        scored
    }
}

/// Per-category indexes over the unlabeled part of a pool. Entries of
/// `members` map index-local ids back to positions in the pool.
#[derive(Debug, Clone)]
pub struct QuestionBank {
    categories: BTreeMap<String, (Bm25Index, Vec<usize>)>,
}

impl QuestionBank {
    /// Indexes the unlabeled records of `pool`; labeled ones are ignored.
    pub fn new(pool: &[QaRecord]) -> Self {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in pool.iter().enumerate() {
            if !r.is_labeled() {
                groups.entry(r.category.clone()).or_default().push(i);
            }
        }
        let categories = groups
            .into_iter()
            .map(|(cat, members)| {
                let docs: Vec<Vec<String>> = members
                    .iter()
                    .map(|&i| pool[i].question_tokens.clone())
                    .collect();
                (cat, (Bm25Index::new(&docs), members))
            })
            .collect();
        QuestionBank { categories }
    }

    pub fn category(&self, name: &str) -> Option<&Bm25Index> {
        self.categories.get(name).map(|(idx, _)| idx)
    }

    /// Pool positions of the `top_k` most similar same-category questions.
    pub fn build_bank(&self, labeled: &QaRecord, top_k: usize) -> Vec<usize> {
        match self.categories.get(&labeled.category) {
            None => Vec::new(),
            Some((idx, members)) => idx
                .top_k(&labeled.question_tokens, top_k)
                .into_iter()
                .map(|(d, _)| members[d])
                .collect(),
        }
    }
}

/// One line of a bank cache file; both numbers are 1-based line numbers of
/// the labeled corpus and the pool respectively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEntry {
    pub query_line: usize,
    pub bank_lines: Vec<usize>,
}

pub fn write_bank_cache(path: &Path, entries: &[BankEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).map_err(|e| Error::Data(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_bank_cache(path: &Path) -> Result<Vec<BankEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
