//! Desk-scale synthetic trials.
//!
//! Each mode draws tokens from a label-conditioned Gaussian mixture. One token
//! per mode is "informative": it sits near a mode-specific marker direction and
//! is shifted along a signal direction by `±separability * SIGNAL_SHIFT`
//! depending on the label. The remaining tokens come from distractor
//! components shared by both classes. With `separability = 0` the two class
//! mixtures coincide.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::records::{DatasetManifest, Phase, StatementEmbedding, TrialRecord};
use crate::error::{Error, Result};

pub const SIGNAL_SHIFT: f64 = 1.5;
const MARKER_SCALE: f64 = 2.0;
const NOISE: f64 = 1.0;
const DISTRACTOR_COMPONENTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub separability: f64,
    pub d_mol: usize,
    pub d_dis: usize,
    pub d_txt: usize,
}

impl SynthSpec {
    pub fn new(n: usize, seed: u64, separability: f64) -> Self {
        Self {
            n,
            seed,
            separability,
            d_mol: 32,
            d_dis: 16,
            d_txt: 64,
        }
    }
}

struct ModeMixture {
    signal: Vec<f64>,
    marker: Vec<f64>,
    distractors: Vec<Vec<f64>>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * gauss(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl ModeMixture {
    fn new(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let signal = unit(normal_vec(rng, dim, 1.0));
        let mut marker = normal_vec(rng, dim, 1.0);
        let along: f64 = marker.iter().zip(&signal).map(|(m, s)| m * s).sum();
        marker.iter_mut().zip(&signal).for_each(|(m, s)| *m -= along * s);
        let marker = unit(marker);
        let distractors = (0..DISTRACTOR_COMPONENTS)
            .map(|_| normal_vec(rng, dim, 1.0))
            .collect();
        Self {
            signal,
            marker,
            distractors,
        }
    }

    fn informative(&self, rng: &mut ChaCha8Rng, sign: f64, separability: f64) -> Vec<f64> {
        let shift = sign * separability * SIGNAL_SHIFT;
        let noise = normal_vec(rng, self.signal.len(), NOISE);
        (0..self.signal.len())
            .map(|j| MARKER_SCALE * self.marker[j] + shift * self.signal[j] + noise[j])
            .collect()
    }

    fn distractor(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c = &self.distractors[rng.random_range(0..self.distractors.len())];
        let noise = normal_vec(rng, c.len(), NOISE);
        c.iter().zip(noise).map(|(a, b)| a + b).collect()
    }

    /// `count` tokens with the informative one at a random position among the
    /// first `lead` slots.
    fn tokens(
        &self,
        rng: &mut ChaCha8Rng,
        count: usize,
        lead: usize,
        sign: f64,
        separability: f64,
    ) -> Vec<Vec<f64>> {
        if count == 0 {
            return Vec::new();
        }
        let pos = rng.random_range(0..count.min(lead));
        (0..count)
            .map(|i| {
                if i == pos {
                    self.informative(rng, sign, separability)
                } else {
                    self.distractor(rng)
                }
            })
            .collect()
    }
}

fn statement(rng: &mut ChaCha8Rng, mean: Vec<f64>) -> StatementEmbedding {
    let count: u32 = rng.random_range(4..=20);
    let first_token = mean
        .iter()
        .map(|m| m + 0.1 * NOISE * gauss(rng))
        .collect();
    let sum = mean.iter().map(|m| m * f64::from(count)).collect();
    StatementEmbedding {
        first_token,
        mean,
        sum,
        count: Some(count),
    }
}

/// Synthesizes `n` trials with the default dimensions (32 / 16 / 64).
pub fn synthesize(n: usize, seed: u64, separability: f64) -> Result<(DatasetManifest, Vec<TrialRecord>)> {
    synthesize_with(&SynthSpec::new(n, seed, separability))
}

pub fn synthesize_with(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<TrialRecord>)> {
    if spec.n == 0 {
        return Err(Error::Config("synthesize needs n > 0".into()));
    }
    if !(0.0..=1.0).contains(&spec.separability) {
        return Err(Error::Config(format!(
            "separability must lie in [0, 1], got {}",
            spec.separability
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let molecules = ModeMixture::new(&mut rng, spec.d_mol);
    let diseases = ModeMixture::new(&mut rng, spec.d_dis);
    let inclusion = ModeMixture::new(&mut rng, spec.d_txt);
    let exclusion = ModeMixture::new(&mut rng, spec.d_txt);
    let origin = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let s = spec.separability;

    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label: u8 = rng.random_range(0..=1);
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let start_date = origin + Days::new(rng.random_range(0..20 * 365));
        let n_mol = rng.random_range(1..=5);
        let n_dis = rng.random_range(1..=4);
        let n_inc = rng.random_range(1..=10);
        let n_exc = rng.random_range(0..=6);
        let molecule_embeddings = molecules.tokens(&mut rng, n_mol, n_mol, sign, s);
        let disease_embeddings = diseases.tokens(&mut rng, n_dis, n_dis, sign, s);
        let inclusion_statements = inclusion
            .tokens(&mut rng, n_inc, 3, sign, s)
            .into_iter()
            .map(|v| statement(&mut rng, v))
            .collect();
        let exclusion_statements = exclusion
            .tokens(&mut rng, n_exc, 3, sign, s)
            .into_iter()
            .map(|v| statement(&mut rng, v))
            .collect();
        records.push(TrialRecord {
            trial_id: format!("SYN{i:06}"),
            phase: Phase::III,
            start_date,
            label,
            molecule_embeddings,
            disease_embeddings,
            inclusion_statements,
            exclusion_statements,
        });
    }

    let provenance = BTreeMap::from([(
        "generator".to_string(),
        format!("synthetic seed={} separability={}", spec.seed, spec.separability),
    )]);
    let manifest = DatasetManifest {
        d_mol: spec.d_mol,
        d_dis: spec.d_dis,
        d_txt: spec.d_txt,
        provenance,
        record_count: records.len(),
        phase: Some(Phase::III),
    };
    Ok((manifest, records))
}
