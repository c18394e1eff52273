//! Per-product corpus statistics: QA count and the share of questions with at
//! least one `F` tag.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::QaRecord;
use crate::error::{Error, Result};
use crate::model::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub product: String,
    pub qa: usize,
    pub with_function: usize,
}

impl StatsRow {
    pub fn percent(&self) -> f64 {
        if self.qa == 0 {
            0.0
        } else {
            100.0 * self.with_function as f64 / self.qa as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Products in order of first appearance.
    pub rows: Vec<StatsRow>,
    pub total: StatsRow,
}

/// Counts labeled records only; unlabeled ones are ignored.
pub fn corpus_stats(records: &[QaRecord]) -> CorpusStats {
    let mut rows: Vec<StatsRow> = Vec::new();
    let mut total = StatsRow {
        product: "Total".into(),
        qa: 0,
        with_function: 0,
    };
    for r in records {
        let Some(tags) = &r.tags else { continue };
        let has_f = tags.contains(&Label::F);
        let row = match rows.iter_mut().position(|x| x.product == r.product_id) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(StatsRow {
                    product: r.product_id.clone(),
                    qa: 0,
                    with_function: 0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.qa += 1;
        total.qa += 1;
        if has_f {
            row.with_function += 1;
            total.with_function += 1;
        }
    }
    CorpusStats { rows, total }
}

impl CorpusStats {
    pub fn is_empty(&self) -> bool {
        self.total.qa == 0
    }

    /// Plain-text table: `Product | QA | % of QAs with Functions`, then a
    /// totals row. Percentages have two decimals.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.product.chars().count())
            .chain(["Product".len(), "Total".len()])
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let line = |out: &mut String, p: &str, q: &str, pc: &str| {
            writeln!(out, "{p:<width$} | {q:>5} | {pc}").unwrap();
        };
        line(&mut out, "Product", "QA", "% of QAs with Functions");
        let rule = format!("{}-+-------+-{}\n", "-".repeat(width), "-".repeat(23));
        out.push_str(&rule);
        for r in &self.rows {
            line(
                &mut out,
                &r.product,
                &r.qa.to_string(),
                &format!("{:.2}", r.percent()),
            );
        }
        out.push_str(&rule);
        let t = &self.total;
        line(
            &mut out,
            &t.product,
            &t.qa.to_string(),
            &format!("{:.2}", t.percent()),
        );
        out
    }
}

/// Stats that refuse an input with no labeled question.
pub fn nonempty_stats(records: &[QaRecord]) -> Result<CorpusStats> {
    let s = corpus_stats(records);
    if s.is_empty() {
        return Err(Error::Data("corpus has no labeled questions".into()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(product: &str, tags: &[Label]) -> QaRecord {
        QaRecord {
            product_id: product.into(),
            category: "c".into(),
            question_tokens: vec!["w".into(); tags.len()],
            answer_text: None,
            tags: Some(tags.to_vec()),
        }
    }

    #[test]
    fn two_records_one_with_function() {
        let s = corpus_stats(&[rec("p", &[Label::F, Label::O]), rec("p", &[Label::O])]);
        assert_eq!(s.total.qa, 2);
        assert_eq!(format!("{:.2}", s.total.percent()), "50.00");
        let table = s.to_table();
        assert!(table.starts_with("Product | "));
        assert!(
            table.lines().last().unwrap().ends_with("| 50.00"),
            "{table}"
        );
    }

    #[test]
    fn all_o_and_empty() {
        let s = corpus_stats(&[rec("a", &[Label::O]), rec("b", &[Label::O, Label::O])]);
        assert_eq!(s.rows.len(), 2);
        assert_eq!(format!("{:.2}", s.total.percent()), "0.00");
        assert!(nonempty_stats(&[]).is_err());
    }
}
