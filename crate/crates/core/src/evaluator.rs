//! F1, PR-AUC and ROC-AUC, and the repeated-subsample test protocol.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric inputs", &[scores.len()], &[labels.len()]));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// F1 at `threshold` (predict positive when `score >= threshold`). Defined as
/// 0 when there are no true positives.
pub fn f1_score(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Sorted `(score, label)` pairs, descending by score.
fn ranked(scores: &[f64], labels: &[u8]) -> Vec<(f64, u8)> {
    let mut v: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

fn both_classes(labels: &[u8], metric: &str) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{metric} needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney statistic: the fraction of positive/negative pairs ranked
/// correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = both_classes(labels, "ROC-AUC")?;
    let v = ranked(scores, labels);
    // Walk tie groups from the top; each positive beats the negatives below.
    let mut wins = 0.0;
    let mut neg_above = 0usize;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        let below = neg - neg_above - gn;
        wins += gp as f64 * (below as f64 + 0.5 * gn as f64);
        neg_above += gn;
        i = j;
    }
    Ok(wins / (pos * neg) as f64)
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over distinct score
/// thresholds, highest first.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = both_classes(labels, "PR-AUC")?;
    let v = ranked(scores, labels);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            tp += usize::from(v[j].1 == 1);
            seen += 1;
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

pub const METRIC_NAMES: [&str; 3] = ["f1", "pr_auc", "roc_auc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation over replicates.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub summaries: Vec<MetricSummary>,
    /// Per replicate, in [`METRIC_NAMES`] order.
    pub replicates: Vec<[f64; 3]>,
    pub reps: usize,
    pub fraction: f64,
    pub with_replacement: bool,
    pub seed: u64,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.summaries.iter().find(|s| s.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std\n");
        for s in &self.summaries {
            out.push_str(&format!("{},{},{}\n", s.metric, s.mean, s.std));
        }
        out
    }
}

/// All three metrics on one sample.
pub fn point_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<[f64; 3]> {
    Ok([
        f1_score(scores, labels, threshold)?,
        pr_auc(scores, labels)?,
        roc_auc(scores, labels)?,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub fraction: f64,
    pub with_replacement: bool,
    pub threshold: f64,
    pub seed: u64,
}

fn draw(rng: &mut ChaCha8Rng, n: usize, k: usize, with_replacement: bool) -> Vec<usize> {
    if with_replacement {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    } else {
        let mut idx = sample(rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Recomputes the metrics on `reps` subsamples of `floor(fraction * n)`
/// trials and reports mean and population std.
///
/// A subsample with a single class is redrawn once; a second failure is an
/// error.
pub fn bootstrap_eval(scores: &[f64], labels: &[u8], cfg: &BootstrapConfig) -> Result<MetricReport> {
    check_lengths(scores, labels)?;
    if cfg.reps == 0 || !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::Config(format!(
            "bootstrap needs reps >= 1 and 0 < fraction <= 1, got {} and {}",
            cfg.reps, cfg.fraction
        )));
    }
    let n = scores.len();
    let k = (cfg.fraction * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::UndefinedMetric(format!("a {} subsample of {n} trials is empty", cfg.fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut replicates = Vec::with_capacity(cfg.reps);
    for r in 0..cfg.reps {
        let mut attempt = 0;
        let metrics = loop {
            let idx = draw(&mut rng, n, k, cfg.with_replacement);
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let (pos, neg) = class_counts(&y);
            if pos > 0 && neg > 0 {
                break point_metrics(&s, &y, cfg.threshold)?;
            }
            attempt += 1;
            if attempt == 2 {
                return Err(Error::UndefinedMetric(format!(
                    "replicate {r} drew a single class twice"
                )));
            }
        };
        replicates.push(metrics);
    }
    let summaries = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let vals: Vec<f64> = replicates.iter().map(|r| r[m]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            MetricSummary {
                metric: name.to_string(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(MetricReport {
        summaries,
        replicates,
        reps: cfg.reps,
        fraction: cfg.fraction,
        with_replacement: cfg.with_replacement,
        seed: cfg.seed,
    })
}
