//! Small generated corpora for tests and demonstrations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::QaRecord;
use crate::model::Label;

fn record(product: &str, category: &str, tokens: &[&str], tags: Option<&str>) -> QaRecord {
    QaRecord {
        product_id: product.into(),
        category: category.into(),
        question_tokens: tokens.iter().map(|s| s.to_string()).collect(),
        answer_text: None,
        tags: tags.map(|t| {
            t.chars()
                .map(|c| if c == 'F' { Label::F } else { Label::O })
                .collect()
        }),
    }
}

const LABELED: [(&str, &str); 20] = [
    ("Works with iphone ?", "FFFO"),
    ("Can I make video calls ?", "OOFFFO"),
    ("Does it play dvds ?", "OOFFO"),
    ("Is the screen bright ?", "OOOOO"),
    ("Can it charge my phone ?", "OOFFFO"),
    ("How heavy is it ?", "OOOOO"),
    ("Will it run photoshop smoothly ?", "OOFFOO"),
    ("Does it support bluetooth headphones ?", "OOFFFO"),
    ("What color is the case ?", "OOOOOO"),
    ("Can I stream netflix on it ?", "OOFFOOO"),
    ("Is the battery removable ?", "OOOOO"),
    ("Can it print photos ?", "OOFFO"),
    ("Does it connect to wifi ?", "OOFFFO"),
    ("How long is the warranty ?", "OOOOOO"),
    ("Can I edit videos with it ?", "OOFFOOO"),
    ("Is it waterproof ?", "OOOO"),
    ("Does it read pdf files ?", "OOFFFO"),
    ("Where is it made ?", "OOOOO"),
    ("Can it record tv shows ?", "OOFFFO"),
    ("Does it work with alexa ?", "OOFFFO"),
];

const POOL: [&str; 12] = [
    "Does this work with an iphone 6 ?",
    "Can you make calls with it ?",
    "Will it play blu ray dvds ?",
    "Can it charge two phones at once ?",
    "Does photoshop run on this ?",
    "Can I stream movies from netflix ?",
    "Does it connect to hotel wifi ?",
    "Can I print photos from my phone ?",
    "Is there a way to edit videos ?",
    "Can it read pdf documents ?",
    "Does it record shows automatically ?",
    "Is it compatible with alexa ?",
];

/// Twenty labeled questions, the first being "Works with iphone ?" tagged
/// `F F F O`, followed by twelve unlabeled questions of the same category.
pub fn overfit_corpus() -> (Vec<QaRecord>, Vec<QaRecord>) {
    let labeled = LABELED
        .iter()
        .map(|(q, t)| {
            let toks: Vec<&str> = q.split(' ').collect();
            record("laptop-1", "laptop", &toks, Some(t))
        })
        .collect();
    let pool = POOL
        .iter()
        .map(|q| {
            record(
                "laptop-1",
                "laptop",
                &q.split(' ').collect::<Vec<_>>(),
                None,
            )
        })
        .collect();
    (labeled, pool)
}

/// Settings of the bank-dependent task.
#[derive(Debug, Clone, PartialEq)]
pub struct BankTaskConfig {
    /// Size of the content vocabulary.
    pub words: usize,
    pub question_len: std::ops::RangeInclusive<usize>,
    pub bank_questions: usize,
    pub bank_len: usize,
    /// Size of the separate vocabulary that pads bank questions.
    pub filler_words: usize,
    /// Probability that a question word is copied into the bank.
    pub copy_rate: f64,
}

impl Default for BankTaskConfig {
    fn default() -> Self {
        BankTaskConfig {
            words: 20,
            question_len: 4..=6,
            bank_questions: 3,
            bank_len: 4,
            filler_words: 20,
            copy_rate: 0.5,
        }
    }
}

/// A labeled question whose tags are a function of its bank: a word is `F`
/// exactly when it also occurs in one of the bank questions. Question words
/// are distinct; bank questions are padded with words from a separate filler
/// vocabulary.
pub fn bank_task(n: usize, cfg: &BankTaskConfig, seed: u64) -> Vec<(QaRecord, Vec<QaRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..cfg.words).map(|i| format!("w{i}")).collect();
    let filler: Vec<String> = (0..cfg.filler_words).map(|i| format!("x{i}")).collect();
    (0..n)
        .map(|_| {
            let len = rng.gen_range(cfg.question_len.clone());
            let q: Vec<&String> = vocab.choose_multiple(&mut rng, len).collect();
            let copied: Vec<bool> = (0..len).map(|_| rng.gen_bool(cfg.copy_rate)).collect();
            let mut bank_words: Vec<&String> = Vec::new();
            for (w, &c) in q.iter().zip(&copied) {
                if c {
                    bank_words.push(w);
                }
            }
            let total = cfg.bank_questions * cfg.bank_len;
            while bank_words.len() < total {
                bank_words.push(
                    filler
                        .choose(&mut rng)
                        .expect("filler vocabulary is not empty"),
                );
            }
            bank_words.shuffle(&mut rng);
            let bank = bank_words
                .chunks(cfg.bank_len)
                .map(|c| {
                    let toks: Vec<&str> = c.iter().map(|s| s.as_str()).collect();
                    record("synthetic", "synthetic", &toks, None)
                })
                .collect();
            let toks: Vec<&str> = q.iter().map(|s| s.as_str()).collect();
            let tags: String = copied.iter().map(|&c| if c { 'F' } else { 'O' }).collect();
            (record("synthetic", "synthetic", &toks, Some(&tags)), bank)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_corpus_shape() {
        let (labeled, pool) = overfit_corpus();
        assert_eq!(labeled.len(), 20);
        assert!(labeled.iter().all(|r| r.validate().is_ok()));
        assert_eq!(labeled[0].question_tokens, ["Works", "with", "iphone", "?"]);
        assert!(pool.iter().all(|r| !r.is_labeled()));
    }

    #[test]
    fn bank_task_labels_follow_the_bank() {
        for (q, bank) in bank_task(50, &BankTaskConfig::default(), 3) {
            assert_eq!(bank.len(), 3);
            for (tok, tag) in q.question_tokens.iter().zip(q.tags.as_ref().unwrap()) {
                let in_bank = bank.iter().any(|b| b.question_tokens.contains(tok));
                assert_eq!(in_bank, *tag == Label::F);
            }
        }
        assert_eq!(
            bank_task(3, &BankTaskConfig::default(), 1),
            bank_task(3, &BankTaskConfig::default(), 1)
        );
    }
}
