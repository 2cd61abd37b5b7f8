//! Stratified train / dev / test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{CategorizedLine, Category};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            dev: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<CategorizedLine>,
    pub dev: Vec<CategorizedLine>,
    pub test: Vec<CategorizedLine>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Largest-remainder allocation of `n` items to three parts.
fn allocate(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let ideal = [
        n as f64 * ratios.train,
        n as f64 * ratios.dev,
        n as f64 * ratios.test,
    ];
    let mut counts = ideal.map(|x| (x + 1e-9).floor() as usize);
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - counts[a] as f64;
        let rb = ideal[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Per-class proportional split. Each class is shuffled with a generator
/// seeded by `seed`; classes with fewer lines than there are splits go
/// entirely to train.
pub fn stratified_split(
    lines: Vec<CategorizedLine>,
    ratios: SplitRatios,
    seed: u64,
) -> DatasetSplit {
    let sum = ratios.train + ratios.dev + ratios.test;
    assert!(
        (sum - 1.0).abs() < 1e-9 && ratios.train >= 0.0 && ratios.dev >= 0.0 && ratios.test >= 0.0,
        "split ratios must be nonnegative and sum to 1"
    );
    let mut by_class: Vec<Vec<CategorizedLine>> = vec![Vec::new(); Category::ALL.len()];
    for l in lines {
        by_class[l.category.index()].push(l);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        seed,
        warnings: Vec::new(),
    };
    for (class, mut members) in Category::ALL.into_iter().zip(by_class) {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        if members.len() < 3 {
            let msg = format!(
                "class {class} has {} line(s), fewer than the 3 splits; all placed in train",
                members.len()
            );
            log::warn!("{msg}");
            split.warnings.push(msg);
            split.train.extend(members);
            continue;
        }
        let [n_train, n_dev, _] = allocate(members.len(), &ratios);
        let test = members.split_off(n_train + n_dev);
        let dev = members.split_off(n_train);
        split.train.extend(members);
        split.dev.extend(dev);
        split.test.extend(test);
    }
    split.train.shuffle(&mut rng);
    split.dev.shuffle(&mut rng);
    split.test.shuffle(&mut rng);
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LineRecord;

    fn lines(spec: &[(Category, usize)]) -> Vec<CategorizedLine> {
        let mut out = Vec::new();
        for (cat, n) in spec {
            for _ in 0..*n {
                let i = out.len();
                out.push(CategorizedLine {
                    line: LineRecord {
                        doc_id: format!("d{}", i / 10),
                        line_index: i % 10,
                        segment_index: 0,
                        text: format!("text {i}"),
                        follows_space: false,
                    },
                    label: cat.name().to_lowercase(),
                    category: *cat,
                });
            }
        }
        out
    }

    fn count(ls: &[CategorizedLine], c: Category) -> usize {
        ls.iter().filter(|l| l.category == c).count()
    }

    #[test]
    fn exact_proportions() {
        let data = lines(&[(Category::Clean, 80), (Category::NavigationInterface, 20)]);
        let s = stratified_split(data, SplitRatios::default(), 7);
        let nav = Category::NavigationInterface;
        assert_eq!((count(&s.train, Category::Clean), count(&s.train, nav)), (56, 14));
        assert_eq!((count(&s.dev, Category::Clean), count(&s.dev, nav)), (8, 2));
        assert_eq!((count(&s.test, Category::Clean), count(&s.test, nav)), (16, 4));
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let data = lines(&[(Category::Clean, 50), (Category::PromotionalSpam, 13)]);
        let a = stratified_split(data.clone(), SplitRatios::default(), 3);
        let b = stratified_split(data.clone(), SplitRatios::default(), 3);
        assert_eq!(a, b);
        let c = stratified_split(data, SplitRatios::default(), 4);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn singleton_class_goes_to_train() {
        let data = lines(&[(Category::Clean, 30), (Category::OffensiveInappropriate, 1)]);
        let s = stratified_split(data, SplitRatios::default(), 1);
        assert_eq!(count(&s.train, Category::OffensiveInappropriate), 1);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn partition_within_one_line_of_ideal() {
        for n in 3..200 {
            let data = lines(&[(Category::TechnicalMetadata, n)]);
            let s = stratified_split(data, SplitRatios::default(), n as u64);
            assert_eq!(s.train.len() + s.dev.len() + s.test.len(), n);
            for (got, r) in [(s.train.len(), 0.7), (s.dev.len(), 0.1), (s.test.len(), 0.2)] {
                assert!((got as f64 - n as f64 * r).abs() <= 1.0, "n={n} got={got} r={r}");
            }
            let mut keys: Vec<_> = s.train.iter().chain(&s.dev).chain(&s.test).map(|l| l.line.key()).collect();
            keys.sort();
            keys.dedup();
            assert_eq!(keys.len(), n);
        }
    }
}
