//! Embedding tables and the word2vec text format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result, TensorError};
use crate::tensor::Tensor;
use crate::tokenize::{EOS_TOKEN, PAD_TOKEN, UNK_TOKEN};
use crate::vocab::{Vocabulary, PAD};

/// `|V| x d` table whose PAD row is all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Tensor);

impl EmbeddingMatrix {
    pub fn new(mut table: Tensor) -> std::result::Result<Self, TensorError> {
        if table.shape().len() != 2 || table.rows() == 0 {
            return Err(TensorError::Shape(format!(
                "embedding table must be a non-empty matrix, got {:?}",
                table.shape()
            )));
        }
        let d = table.cols();
        table.data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
        Ok(EmbeddingMatrix(table))
    }

    /// Uniform initialisation in `[-scale, scale]`, PAD row zero.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..vocab_size * dim)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        EmbeddingMatrix::new(Tensor::matrix(vocab_size, dim, data).expect("shape"))
            .expect("non-empty")
    }

    pub fn vocab_size(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.0.row(id)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Looks up one row per id.
pub fn embed_sequence(
    ids: &[usize],
    table: &EmbeddingMatrix,
) -> std::result::Result<Tensor, TensorError> {
    let d = table.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= table.vocab_size() {
            return Err(TensorError::Invalid(format!(
                "id {id} outside vocabulary of {}",
                table.vocab_size()
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::matrix(ids.len(), d, data)
}

/// Writes `<|V|> <d>` followed by one `<token> <v1> ... <vd>` line per row.
/// Values are printed with 17 significant digits, which round-trips `f64`.
pub fn save_embeddings(path: &Path, vocab: &Vocabulary, table: &EmbeddingMatrix) -> Result<()> {
    fs::write(path, format_embeddings(vocab, table)?).map_err(|e| Error::io(path, e))
}

pub fn format_embeddings(vocab: &Vocabulary, table: &EmbeddingMatrix) -> Result<String> {
    if vocab.len() != table.vocab_size() {
        return Err(Error::Data(format!(
            "vocabulary of {} tokens for a table of {} rows",
            vocab.len(),
            table.vocab_size()
        )));
    }
    let mut out = String::new();
    writeln!(out, "{} {}", table.vocab_size(), table.dim()).unwrap();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        out.push_str(tok);
        for v in table.row(id) {
            write!(out, " {v:.16e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LoadedEmbeddings {
    pub vocab: Vocabulary,
    pub table: EmbeddingMatrix,
    pub warnings: Vec<String>,
}

pub fn load_embeddings(path: &Path) -> Result<LoadedEmbeddings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path)
}

/// Parses the word2vec text format. Reserved tokens missing from the file are
/// added with zero rows and reported in `warnings`.
pub fn parse_embeddings(text: &str, path: &Path) -> Result<LoadedEmbeddings> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let nums: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match nums.as_slice() {
        [a, b] => match (a.parse::<usize>(), b.parse::<usize>()) {
            (Ok(a), Ok(b)) if b > 0 => (a, b),
            _ => {
                return Err(Error::parse(
                    path,
                    1,
                    format!("malformed header {header:?}"),
                ))
            }
        },
        _ => {
            return Err(Error::parse(
                path,
                1,
                format!("malformed header {header:?}"),
            ))
        }
    };

    let mut tokens = Vec::with_capacity(count);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (i, line) in lines {
        let lineno = i + 1;
        if tokens.len() == count {
            return Err(Error::parse(
                path,
                lineno,
                format!("more than the {count} rows announced in the header"),
            ));
        }
        let mut parts = line.split_whitespace();
        let tok = parts.next().expect("non-empty line");
        let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if vals.len() != dim {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {dim} values, found {}", vals.len()),
            ));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, lineno, "non-finite value"));
        }
        tokens.push(tok.to_string());
        rows.push(vals);
    }
    if tokens.len() != count {
        return Err(Error::parse(
            path,
            1,
            format!("header announces {count} rows, found {}", tokens.len()),
        ));
    }

    let mut warnings = Vec::new();
    for special in [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN] {
        if !tokens.iter().any(|t| t == special) {
            let msg = format!("{} has no {special} row; using zeros", path.display());
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    let vocab = Vocabulary::from_tokens(tokens.clone(), 1, true);
    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    let mut seen = vec![false; vocab.len()];
    for (tok, row) in tokens.iter().zip(&rows) {
        let id = vocab.get(tok).expect("token was inserted");
        if seen[id] {
            let msg = format!("duplicate token {tok:?} after normalisation; keeping the first row");
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        seen[id] = true;
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(row);
    }
    if table.row(PAD).iter().any(|v| *v != 0.0) {
        let msg = format!(
            "{} has a non-zero {PAD_TOKEN} row; zeroing it",
            path.display()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(LoadedEmbeddings {
        vocab,
        table: EmbeddingMatrix::new(table)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamGroup;
    use crate::tape::Tape;
    use crate::vocab::build_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Vocabulary, EmbeddingMatrix) {
        let corpus = vec![vec!["a", "b", "c", "a"]];
        let v = build_vocab(&corpus, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = EmbeddingMatrix::random(v.len(), 3, 0.5, &mut rng);
        (v, e)
    }

    #[test]
    fn pad_row_is_zero() {
        let (_, e) = small();
        assert!(e.row(PAD).iter().all(|v| *v == 0.0));
        let m = embed_sequence(&[0, 0, 0], &e).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn repeated_ids_give_identical_rows() {
        let (_, e) = small();
        let m = embed_sequence(&[4, 3, 4], &e).unwrap();
        assert_eq!(m.row(0), m.row(2));
        assert!(embed_sequence(&[99], &e).is_err());
    }

    #[test]
    fn repeated_lookup_accumulates_gradient() {
        let (_, e) = small();
        let mut params = ParamGroup::new();
        let id = params.add("embedding", e.into_tensor());
        let mut tape = Tape::new(&params);
        let t = tape.param(id);
        let rows = tape.gather(t, &[3, 5, 3]).unwrap();
        let s = tape.sum_all(rows).unwrap();
        let g = tape.backward(s).unwrap().into_params().dense(id);
        assert_eq!(&g[9..12], &[2.0, 2.0, 2.0]);
        assert_eq!(&g[15..18], &[1.0, 1.0, 1.0]);
        assert!(g[..9].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let (v, e) = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        save_embeddings(&p, &v, &e).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert_eq!(back.vocab.tokens(), v.tokens());
        assert_eq!(back.table, e);
        assert!(back.warnings.is_empty());
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.starts_with(&format!("{} 3\n", v.len())));
    }

    #[test]
    fn row_count_must_match_header() {
        let text = "3 2\n<PAD> 0 0\n<EOS> 1 1\n<UNK> 2 2\nx 3 3\n";
        assert!(parse_embeddings(text, Path::new("e.txt")).is_err());
        assert!(parse_embeddings("3 2\n<PAD> 0 0\n", Path::new("e.txt")).is_err());
        assert!(parse_embeddings("three 2\n", Path::new("e.txt")).is_err());
        assert!(parse_embeddings("1 2\nx 1\n", Path::new("e.txt")).is_err());
    }

    #[test]
    fn missing_pad_is_synthesised() {
        let text = "3 2\n<EOS> 1 1\n<UNK> 2 2\nhello 0.5 -0.5\n";
        let l = parse_embeddings(text, Path::new("e.txt")).unwrap();
        assert_eq!(l.vocab.len(), 4);
        assert_eq!(l.vocab.id("<PAD>"), 0);
        assert_eq!(l.table.row(0), &[0.0, 0.0]);
        assert_eq!(l.table.row(l.vocab.id("hello")), &[0.5, -0.5]);
        assert_eq!(l.warnings.len(), 1);
        assert!(l.warnings[0].contains("<PAD>"));
    }
}
