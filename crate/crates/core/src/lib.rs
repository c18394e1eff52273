//! Semi-supervised attention network (SAN) for tagging the function
//! expressions of product questions.
//!
//! A labeled question is tagged token by token with [`Label::F`] (part of a
//! function expression) or [`Label::O`]. Besides the question itself the
//! model reads a *bank* of similar unlabeled questions retrieved with BM25;
//! a two-level attention summarises the bank for every question token and
//! feeds the summary to a second BLSTM layer.
//!
//! ```
//! use rand::SeedableRng;
//! use san::{EncodedExample, SanConfig, SanModel, Vocabulary};
//!
//! let corpus = vec![vec!["works".to_string(), "with".into(), "iphone".into()]];
//! let vocab = Vocabulary::from_tokens(corpus.concat(), 1, true);
//! let config = SanConfig { embed_dim: 8, hidden: 8, attention_dim: 8, max_len: 6, ..SanConfig::default() };
//! let model = SanModel::new(config, vocab, None, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1))?;
//!
//! let input = EncodedExample {
//!     question: model.encode(&corpus[0]),
//!     bank: vec![],
//!     gold: None,
//! };
//! let prediction = model.predict(&input)?;
//! assert_eq!(prediction.tags.len(), 3);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod attention;
pub mod bm25;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod param;
pub mod recurrent;
pub mod skipgram;
pub mod split;
pub mod stats;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod tokenize;
pub mod train;
pub mod vocab;

pub use error::{Error, Result, TensorError};
pub use metrics::Metrics;
pub use model::{EncodedExample, Label, SanConfig, SanModel, Variant};
pub use train::{TrainConfig, TrainOutcome};
pub use vocab::Vocabulary;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
