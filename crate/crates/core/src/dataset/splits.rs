//! Day-grouped train/validation/test assignment.

use chrono::NaiveDate;
use rand::seq::SliceRandom;

use super::types::{Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    /// Number of (train, val, test) dates among `n`: validation and test get
    /// `floor(ratio * n)`, train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon keeps exact products such as 0.2 * 10 from flooring down.
        let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let val = floor(self.val).min(n);
        let test = floor(self.test).min(n - val);
        (n - val - test, val, test)
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!("invalid split ratios {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Shuffles the (sorted) dates with `seed` and cuts the permutation into
/// train, validation and test blocks. Input order does not matter.
pub fn assign_splits<I>(dates: I, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment>
where
    I: IntoIterator<Item = NaiveDate>,
{
    ratios.validate()?;
    let mut dates: Vec<NaiveDate> = dates.into_iter().collect();
    dates.sort_unstable();
    dates.dedup();
    if dates.is_empty() {
        return Err(Error::InvalidInput("no dates to split".into()));
    }
    dates.shuffle(&mut seed::rng(seed));
    let (n_train, n_val, _) = ratios.sizes(dates.len());
    let by_date = dates
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (d, split)
        })
        .collect();
    Ok(SplitAssignment { by_date })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn days(n: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        (0..n)
            .map(|i| start + chrono::Days::new(i as u64))
            .collect()
    }

    #[test]
    fn ten_dates_split_six_two_two() {
        let a = assign_splits(days(10), SplitRatios::default(), 3).unwrap();
        assert_eq!(a.count(Split::Train), 6);
        assert_eq!(a.count(Split::Val), 2);
        assert_eq!(a.count(Split::Test), 2);
    }

    #[test]
    fn single_date_goes_to_one_split() {
        let a = assign_splits(days(1), SplitRatios::default(), 3).unwrap();
        assert_eq!(a.by_date.len(), 1);
        assert_eq!(a.count(Split::Train), 1);
    }

    #[test]
    fn seeded_and_order_independent() {
        let d = days(50);
        let a = assign_splits(d.clone(), SplitRatios::default(), 11).unwrap();
        let mut rev = d.clone();
        rev.reverse();
        assert_eq!(a, assign_splits(rev, SplitRatios::default(), 11).unwrap());
        assert_ne!(a, assign_splits(d, SplitRatios::default(), 12).unwrap());
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let bad = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(assign_splits(days(5), bad, 1).is_err());
        assert!(assign_splits(Vec::new(), SplitRatios::default(), 1).is_err());
    }

    #[test]
    fn remainder_goes_to_train() {
        assert_eq!(SplitRatios::default().sizes(7), (5, 1, 1));
        assert_eq!(SplitRatios::default().sizes(500), (300, 100, 100));
        assert_eq!(SplitRatios::default().sizes(2), (2, 0, 0));
    }
}
