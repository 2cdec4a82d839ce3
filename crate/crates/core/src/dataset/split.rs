use chrono::NaiveDate;
use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::records::TrialRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TrialRecord>,
    pub valid: Vec<TrialRecord>,
    pub test: Vec<TrialRecord>,
}

impl Splits {
    /// Train and validation records together, for the final refit.
    pub fn combined(&self) -> Vec<TrialRecord> {
        self.train.iter().chain(&self.valid).cloned().collect()
    }
}

/// Earlier trials go to train/validation, trials starting on or after
/// `split_date` go to test. Validation is a seeded uniform sample (without
/// replacement) of `round(fraction * n)` pre-split trials; every partition
/// keeps input order.
pub fn temporal_split(
    records: &[TrialRecord],
    split_date: NaiveDate,
    validation_fraction: f64,
    seed: u64,
) -> Result<Splits> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::Config(format!(
            "validation fraction must lie in [0, 1), got {validation_fraction}"
        )));
    }
    if let (Some(lo), Some(hi)) = (
        records.iter().map(|r| r.start_date).min(),
        records.iter().map(|r| r.start_date).max(),
    ) {
        if split_date <= lo || split_date > hi {
            warn!("split date {split_date} lies outside the data range {lo}..={hi}; a partition will be empty");
        }
    }
    let (pre, test): (Vec<&TrialRecord>, Vec<&TrialRecord>) =
        records.iter().partition(|r| r.start_date < split_date);
    let n_valid = (validation_fraction * pre.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_valid = vec![false; pre.len()];
    for i in sample(&mut rng, pre.len(), n_valid) {
        in_valid[i] = true;
    }
    let mut splits = Splits {
        test: test.into_iter().cloned().collect(),
        ..Splits::default()
    };
    for (r, v) in pre.into_iter().zip(in_valid) {
        if v {
            splits.valid.push(r.clone());
        } else {
            splits.train.push(r.clone());
        }
    }
    Ok(splits)
}

/// The start date at the `1 - test_fraction` quantile, so that roughly
/// `test_fraction` of trials start on or after it.
pub fn quantile_split_date(records: &[TrialRecord], test_fraction: f64) -> Option<NaiveDate> {
    let mut dates: Vec<NaiveDate> = records.iter().map(|r| r.start_date).collect();
    if dates.is_empty() {
        return None;
    }
    dates.sort_unstable();
    let idx = ((1.0 - test_fraction) * dates.len() as f64).floor() as usize;
    Some(match dates.get(idx) {
        Some(d) => *d,
        // Nothing at or past the quantile: put the split after the last trial.
        None => dates[dates.len() - 1].succ_opt().expect("date in range"),
    })
}

/// Class-fraction weights: `negative` is the share of 0 labels, `positive` the
/// share of 1 labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl ClassWeights {
    pub const BALANCED: ClassWeights = ClassWeights {
        negative: 0.5,
        positive: 0.5,
    };
}

/// `(ω0, ω1)` as label fractions. A single-class input is legal but logged.
pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    if labels.is_empty() {
        return Err(Error::Config("class weights need at least one label".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        warn!("training labels contain a single class; class weights are degenerate");
    }
    let positive = positives as f64 / labels.len() as f64;
    // 1 - p is within half an ulp of the true fraction, and (1 - p) + p rounds to exactly 1.
    Ok(ClassWeights {
        negative: 1.0 - positive,
        positive,
    })
}
