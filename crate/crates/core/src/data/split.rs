use rand::seq::SliceRandom;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train, self.val, self.test];
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("split ratios must lie in [0, 1]".into()));
        }
        if ratios.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "split ratios overlap: {} + {} + {} > 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Split sizes for `n` ids. When the ratios sum to one, rounding
    /// leftovers go to train so the union covers every id.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let size = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let (val, test) = (size(self.val), size(self.test));
        let train = if (self.train + self.val + self.test - 1.0).abs() < 1e-9 {
            n - val - test
        } else {
            size(self.train)
        };
        (train, val, test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// Shuffles `ids` under `seed` and cuts it by the configured ratios.
pub fn make_splits(ids: &[u64], cfg: &SplitConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let (n_train, n_val, n_test) = cfg.sizes(ids.len());
    let mut shuffled = ids.to_vec();
    shuffled.sort_unstable();
    shuffled.dedup();
    if shuffled.len() != ids.len() {
        return Err(Error::InvalidInput("duplicate ids passed to make_splits".into()));
    }
    shuffled.shuffle(&mut seed::rng(seed, "splits"));
    let mut rest = shuffled.into_iter();
    let mut take = |n: usize| {
        let mut v: Vec<u64> = rest.by_ref().take(n).collect();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        train: take(n_train),
        val: take(n_val),
        test: take(n_test),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn thousand_ids() {
        let ids: Vec<u64> = (0..1000).collect();
        let s = make_splits(&ids, &SplitConfig::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
        assert_eq!(s, make_splits(&ids, &SplitConfig::default(), 3).unwrap());
        assert_ne!(s, make_splits(&ids, &SplitConfig::default(), 4).unwrap());
    }

    #[test]
    fn rejects_overlapping_ratios() {
        let cfg = SplitConfig {
            train: 0.8,
            val: 0.2,
            test: 0.1,
        };
        assert!(matches!(
            make_splits(&[1, 2, 3], &cfg, 0),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn disjoint_for_every_seed(seed in any::<u64>(), n in 0usize..300) {
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
            let s = make_splits(&ids, &SplitConfig::default(), seed).unwrap();
            let mut seen = HashSet::new();
            for id in s.train.iter().chain(&s.val).chain(&s.test) {
                prop_assert!(seen.insert(*id));
                prop_assert!(ids.contains(id));
            }
            prop_assert_eq!(seen.len(), n);
        }
    }
}
