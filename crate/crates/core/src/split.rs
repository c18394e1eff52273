//! Seeded 70/10/20 train/validation/test split.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

/// Part sizes `(train, validation, test)` for `n` items.
///
/// From ten items on, validation and test are 10% and 20% of `n` rounded half
/// up and training takes the rest. Below ten, validation and test get one item
/// each while at least one item is left for training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    if n >= 10 {
        let validation = (n + 5) / 10;
        let test = (2 * n + 5) / 10;
        (n - validation - test, validation, test)
    } else {
        let test = usize::from(n >= 2);
        let validation = usize::from(n >= 3);
        (n - validation - test, validation, test)
    }
}

/// Shuffles with a seeded generator and cuts contiguously into
/// train, validation and test.
pub fn split<T>(mut items: Vec<T>, seed: u64) -> CorpusSplit<T> {
    let n = items.len();
    if n < 10 {
        warn!("splitting only {n} examples; proportions are approximate");
    }
    let (tr, va, _) = split_sizes(n);
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = items.split_off(tr + va);
    let validation = items.split_off(tr);
    CorpusSplit {
        train: items,
        validation,
        test,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_examples() {
        let s = split((0..100).collect::<Vec<_>>(), 7);
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (70, 10, 20)
        );
        let mut all: Vec<i32> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn seeded() {
        let a = split((0..50).collect::<Vec<_>>(), 3);
        assert_eq!(a, split((0..50).collect::<Vec<_>>(), 3));
        assert_ne!(a.train, split((0..50).collect::<Vec<_>>(), 4).train);
    }

    #[test]
    fn small_corpora() {
        assert_eq!(split_sizes(9), (7, 1, 1));
        assert_eq!(split_sizes(2), (1, 0, 1));
        assert_eq!(split_sizes(0), (0, 0, 0));
        assert_eq!(split_sizes(15), (10, 2, 3));
    }

    #[test]
    fn proportions_hold_from_ten_on() {
        for n in 10..2000 {
            let (tr, va, te) = split_sizes(n);
            assert_eq!(tr + va + te, n);
            let near = |got: usize, share: f64| (got as f64 - share * n as f64).abs() <= 1.0;
            assert!(near(tr, 0.7) && near(va, 0.1) && near(te, 0.2), "n = {n}");
        }
    }
}
