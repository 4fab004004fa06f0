use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl DatasetSplit {
    pub fn get(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Seeded shuffle followed by a partition of sizes rounded from `ratios`.
/// Every partition with a nonzero ratio receives at least one subject.
pub fn split_dataset(ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::InvalidConfig("subject ids must be unique".into()));
    }
    let nonzero = [rt, rv, rs].iter().filter(|&&r| r > 0.0).count();
    let n = ids.len();
    if n < nonzero {
        return Err(Error::InsufficientSubjects(format!(
            "{n} subjects for {nonzero} nonempty partitions"
        )));
    }

    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);

    let size = |r: f64| -> usize {
        if r == 0.0 {
            0
        } else {
            ((r * n as f64).round() as usize).max(1)
        }
    };
    let mut n_val = size(rv);
    let mut n_test = size(rs);
    if rt > 0.0 {
        // train keeps at least one subject
        while n_val + n_test >= n {
            if n_val >= n_test && n_val > usize::from(rv > 0.0) {
                n_val -= 1;
            } else if n_test > usize::from(rs > 0.0) {
                n_test -= 1;
            } else {
                break;
            }
        }
    } else {
        n_test = n - n_val;
    }
    let n_train = n - n_val - n_test;

    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(DatasetSplit {
        train: sorted,
        val,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn ten_subjects_eighty_ten_ten() {
        let s = split_dataset(&ids(10), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(&ids(10), (0.8, 0.1, 0.1), 1).unwrap());
    }

    #[test]
    fn all_train() {
        let s = split_dataset(&ids(5), (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(s.train.len(), 5);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(
            split_dataset(&ids(2), (0.8, 0.1, 0.1), 1),
            Err(Error::InsufficientSubjects(_))
        ));
    }

    #[test]
    fn bad_ratios() {
        assert!(split_dataset(&ids(5), (0.5, 0.1, 0.1), 1).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(n in 3usize..40, seed in any::<u64>(), a in 0.2f64..0.8) {
            let rest = 1.0 - a;
            let s = split_dataset(&ids(n), (a, rest / 2.0, rest / 2.0), seed).unwrap();
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            all.sort();
            prop_assert_eq!(all, ids(n));
            prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
            // order of input ids is irrelevant
            let mut rev = ids(n);
            rev.reverse();
            prop_assert_eq!(s, split_dataset(&rev, (a, rest / 2.0, rest / 2.0), seed).unwrap());
        }
    }
}
