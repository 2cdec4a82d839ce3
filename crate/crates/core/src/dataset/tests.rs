use chrono::NaiveDate;
use proptest::prelude::*;

use super::*;
use crate::config::{Aggregation, Caps};
use crate::error::Error;

fn stmt(v: Vec<f64>) -> StatementEmbedding {
    StatementEmbedding {
        first_token: v.iter().map(|x| x + 100.0).collect(),
        sum: v.iter().map(|x| x * 2.0).collect(),
        mean: v,
        count: Some(2),
    }
}

fn manifest(d: usize) -> DatasetManifest {
    DatasetManifest {
        d_mol: d,
        d_dis: d,
        d_txt: d,
        provenance: Default::default(),
        record_count: 0,
        phase: Some(Phase::I),
    }
}

fn record(id: &str, date: (i32, u32, u32), label: u8, n_mol: usize, n_inc: usize) -> TrialRecord {
    TrialRecord {
        trial_id: id.into(),
        phase: Phase::I,
        start_date: NaiveDate::from_ymd_opt(date.0, date.1, date.2).unwrap(),
        label,
        molecule_embeddings: (0..n_mol).map(|i| vec![i as f64 + 1.0, -(i as f64)]).collect(),
        disease_embeddings: vec![vec![0.5, 0.25]],
        inclusion_statements: (0..n_inc).map(|i| stmt(vec![i as f64, 1.0])).collect(),
        exclusion_statements: vec![],
    }
}

fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
    use std::io::Write;
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

#[test]
fn empty_dataset_loads() {
    let f = tempfile::NamedTempFile::new().unwrap();
    write_dataset(f.path(), &manifest(2), &[]).unwrap();
    let (m, recs) = load_dataset(f.path()).unwrap();
    assert_eq!(m, manifest(2));
    assert!(recs.is_empty());
}

#[test]
fn records_round_trip_in_order() {
    let recs = vec![record("A", (2010, 1, 1), 1, 3, 2), record("B", (2011, 6, 30), 0, 1, 0)];
    let f = tempfile::NamedTempFile::new().unwrap();
    write_dataset(f.path(), &manifest(2), &recs).unwrap();
    let (m, back) = load_dataset(f.path()).unwrap();
    assert_eq!(m.record_count, 2);
    assert_eq!(back, recs);
    assert_eq!(back[0].molecule_embeddings.len(), 3);
    assert_eq!(back[0].molecule_embeddings[2], vec![3.0, -2.0]);
}

#[test]
fn dimension_mismatch_cites_record_and_line() {
    let mut bad = record("TRIAL-7", (2010, 1, 1), 1, 1, 1);
    bad.disease_embeddings = vec![vec![1.0, 2.0, 3.0]];
    let f = tempfile::NamedTempFile::new().unwrap();
    write_dataset(f.path(), &manifest(2), &[record("ok", (2010, 1, 1), 0, 1, 1), bad]).unwrap();
    let err = load_dataset(f.path()).unwrap_err();
    match &err {
        Error::Data { line, message, .. } => {
            assert_eq!(*line, 3);
            assert!(message.contains("TRIAL-7") && message.contains("disease"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_records_are_rejected() {
    let m = r#"{"kind":"manifest","d_mol":1,"d_dis":1,"d_txt":1,"record_count":1}"#.to_string();
    let good = r#"{"kind":"record","trial_id":"x","phase":"II","start_date":"2012-03-04","label":1,"molecule_embeddings":[[1.0]],"disease_embeddings":[],"inclusion_statements":[],"exclusion_statements":[]}"#;
    let f = write_lines(&[m.clone(), good.to_string()]);
    assert_eq!(load_dataset(f.path()).unwrap().1.len(), 1);

    let cases = [
        good.replace(r#""label":1"#, r#""label":2"#),
        good.replace("2012-03-04", "2012-13-04"),
        good.replace(r#""trial_id":"x","#, ""),
        good.replace("[[1.0]]", "[[1.0, 2.0]]"),
    ];
    for bad in cases {
        let f = write_lines(&[m.clone(), bad.clone()]);
        match load_dataset(f.path()) {
            Err(Error::Data { line: 2, .. }) => {}
            other => panic!("{bad}: {other:?}"),
        }
    }
    let f = write_lines(&[good.to_string()]);
    assert!(matches!(load_dataset(f.path()), Err(Error::Data { line: 1, .. })));
}

#[test]
fn statement_sum_must_match_mean_times_count() {
    let mut r = record("S", (2010, 1, 1), 0, 1, 1);
    r.inclusion_statements[0].sum[0] += 1.0;
    assert!(r.validate(&manifest(2)).unwrap_err().contains("mean * count"));
}

#[test]
fn padding_masks_and_zero_rows() {
    let recs = [record("A", (2010, 1, 1), 1, 2, 9)];
    let b = pad_and_mask(&recs, &Caps::default(), Aggregation::Mean, (2, 2, 2));
    assert_eq!(b.molecule_mask.bits(), &[true, true, false, false, false]);
    assert_eq!(b.molecules.shape(), &[1, 5, 2]);
    assert!(b.molecules.data()[4..].iter().all(|&v| v == 0.0));
    // nine statements, cap eight: the first eight survive, in order
    assert_eq!(b.inclusion_mask.count(), 8);
    for i in 0..8 {
        assert_eq!(b.inclusion.get(&[0, i, 0]), i as f64);
    }
    assert!(!b.exclusion_mask.any());
    assert!(b.exclusion.data().iter().all(|&v| v == 0.0));
    assert_eq!(b.labels, vec![1.0]);
}

#[test]
fn aggregation_selects_statement_vector() {
    let recs = [record("A", (2010, 1, 1), 1, 1, 2)];
    let caps = Caps::default();
    let mean = pad_and_mask(&recs, &caps, Aggregation::Mean, (2, 2, 2));
    let first = pad_and_mask(&recs, &caps, Aggregation::FirstToken, (2, 2, 2));
    let sum = pad_and_mask(&recs, &caps, Aggregation::Sum, (2, 2, 2));
    let mut hand = vec![0.0; 8 * 2];
    hand[..4].copy_from_slice(&[0.0, 1.0, 1.0, 1.0]);
    assert_eq!(mean.inclusion.data(), &hand[..]);
    assert_eq!(first.inclusion.get(&[0, 1, 0]), 101.0);
    assert_eq!(sum.inclusion.get(&[0, 1, 1]), 2.0);
}

fn dated(n: usize) -> Vec<TrialRecord> {
    (0..n)
        .map(|i| record(&format!("T{i}"), (2000 + (i % 20) as i32, 1, 1), (i % 2) as u8, 1, 1))
        .collect()
}

#[test]
fn split_all_before_date() {
    let recs = dated(10);
    let s = temporal_split(&recs, NaiveDate::from_ymd_opt(2030, 1, 1).unwrap(), 0.0, 1).unwrap();
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (10, 0, 0));
    assert_eq!(s.train, recs);
}

#[test]
fn split_validation_count_and_determinism() {
    let recs: Vec<TrialRecord> = (0..100)
        .map(|i| record(&format!("T{i}"), (2001, 1, 1), 0, 1, 1))
        .collect();
    let date = NaiveDate::from_ymd_opt(2005, 1, 1).unwrap();
    let a = temporal_split(&recs, date, 0.15, 9).unwrap();
    let b = temporal_split(&recs, date, 0.15, 9).unwrap();
    assert_eq!(a.valid.len(), 15);
    assert_eq!(a.train.len(), 85);
    assert_eq!(a, b);
    let c = temporal_split(&recs, date, 0.15, 10).unwrap();
    assert_ne!(a.valid, c.valid);
    assert!(temporal_split(&recs, date, 1.0, 0).is_err());
}

#[test]
fn quantile_split_date_targets_fraction() {
    let recs = dated(20);
    let d = quantile_split_date(&recs, 0.2).unwrap();
    let s = temporal_split(&recs, d, 0.0, 0).unwrap();
    assert_eq!(s.test.len(), 4);
}

#[test]
fn class_weight_examples() {
    let w = class_weights(&[1, 0, 0, 0]).unwrap();
    assert_eq!((w.negative, w.positive), (0.75, 0.25));
    let w = class_weights(&[1, 0, 1, 0]).unwrap();
    assert_eq!((w.negative, w.positive), (0.5, 0.5));
    let w = class_weights(&[1, 1]).unwrap();
    assert_eq!((w.negative, w.positive), (0.0, 1.0));
    assert!(class_weights(&[]).is_err());
}

#[test]
fn synthesize_is_deterministic_and_valid() {
    let (m1, a) = synthesize(50, 3, 0.7).unwrap();
    let (m2, b) = synthesize(50, 3, 0.7).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(a, b);
    assert_eq!((m1.d_mol, m1.d_dis, m1.d_txt), (32, 16, 64));
    for r in &a {
        r.validate(&m1).unwrap();
        assert!(!r.molecule_embeddings.is_empty() && !r.disease_embeddings.is_empty());
    }
    let (_, c) = synthesize(50, 4, 0.7).unwrap();
    assert_ne!(a, c);
    assert!(synthesize(0, 1, 0.5).is_err());
    assert!(synthesize(5, 1, 1.5).is_err());
}

#[test]
fn synthesize_label_balance() {
    let (_, recs) = synthesize(2000, 11, 1.0).unwrap();
    let pos = recs.iter().filter(|r| r.label == 1).count() as f64 / 2000.0;
    assert!((pos - 0.5).abs() < 0.05, "{pos}");
}

#[test]
fn separability_changes_only_the_signal_component() {
    let (_, zero) = synthesize(20, 5, 0.0).unwrap();
    let (_, one) = synthesize(20, 5, 1.0).unwrap();
    for (a, b) in zero.iter().zip(&one) {
        assert_eq!((a.label, a.start_date), (b.label, b.start_date));
        assert_eq!(a.molecule_embeddings.len(), b.molecule_embeddings.len());
        let changed = a
            .molecule_embeddings
            .iter()
            .zip(&b.molecule_embeddings)
            .filter(|(x, y)| x != y)
            .count();
        assert_eq!(changed, 1, "exactly the informative molecule moves");
    }
}

// ---- linear-discriminant oracle -------------------------------------------

/// Mean-pooled raw features per mode, concatenated (zeros for an empty mode).
fn pooled_features(r: &TrialRecord) -> Vec<f64> {
    fn mean(vs: &[&[f64]], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for v in vs {
            for (o, x) in out.iter_mut().zip(*v) {
                *o += x / vs.len() as f64;
            }
        }
        out
    }
    let mol: Vec<&[f64]> = r.molecule_embeddings.iter().map(Vec::as_slice).collect();
    let dis: Vec<&[f64]> = r.disease_embeddings.iter().map(Vec::as_slice).collect();
    let inc: Vec<&[f64]> = r.inclusion_statements.iter().map(|s| s.first_token.as_slice()).collect();
    let exc: Vec<&[f64]> = r.exclusion_statements.iter().map(|s| s.first_token.as_slice()).collect();
    [mean(&mol, 32), mean(&dis, 16), mean(&inc, 64), mean(&exc, 64)].concat()
}

/// Solves `a x = b` for symmetric positive-definite `a` by Cholesky.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// Fisher discriminant fitted on the first 70% of trials, scored on the rest.
fn lda_probe_auc(records: &[TrialRecord]) -> f64 {
    let feats: Vec<Vec<f64>> = records.iter().map(pooled_features).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let cut = records.len() * 7 / 10;
    let d = feats[0].len();
    let mut means = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0.0; 2];
    for (f, &y) in feats[..cut].iter().zip(&labels) {
        counts[y as usize] += 1.0;
        for (m, x) in means[y as usize].iter_mut().zip(f) {
            *m += x;
        }
    }
    for c in 0..2 {
        means[c].iter_mut().for_each(|m| *m /= counts[c]);
    }
    let mut cov = vec![vec![0.0; d]; d];
    for (f, &y) in feats[..cut].iter().zip(&labels) {
        let c: Vec<f64> = f.iter().zip(&means[y as usize]).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += c[i] * c[j] / cut as f64;
            }
        }
    }
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] += 1e-3;
    }
    let diff: Vec<f64> = means[1].iter().zip(&means[0]).map(|(a, b)| a - b).collect();
    let w = cholesky_solve(&cov, &diff);
    let scores: Vec<f64> = feats[cut..]
        .iter()
        .map(|f| f.iter().zip(&w).map(|(x, wi)| x * wi).sum())
        .collect();
    pairwise_auc(&scores, &labels[cut..])
}

#[test]
fn separable_synthetic_data_admits_a_linear_probe() {
    let (_, recs) = synthesize(2000, 2024, 1.0).unwrap();
    let auc = lda_probe_auc(&recs);
    assert!(auc >= 0.95, "linear probe AUC {auc}");
}

#[test]
fn zero_separability_carries_no_linear_signal() {
    let (_, recs) = synthesize(2000, 2024, 0.0).unwrap();
    let auc = lda_probe_auc(&recs);
    assert!((auc - 0.5).abs() < 0.05, "linear probe AUC {auc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn class_weights_sum_to_one(labels in prop::collection::vec(0u8..=1, 1..200)) {
        let w = class_weights(&labels).unwrap();
        prop_assert_eq!(w.negative + w.positive, 1.0);
    }

    #[test]
    fn padding_preserves_order(n in 0usize..12, cap in 1usize..10) {
        let rec = record("P", (2010, 1, 1), 0, n, 0);
        let caps = Caps { molecules: cap, ..Caps::default() };
        let b = pad_and_mask(&[rec.clone()], &caps, Aggregation::FirstToken, (2, 2, 2));
        prop_assert_eq!(b.molecule_mask.count(), n.min(cap));
        for i in 0..n.min(cap) {
            prop_assert_eq!(b.molecules.get(&[0, i, 0]), rec.molecule_embeddings[i][0]);
        }
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(seed in 0u64..1000, year in 1995i32..2025, frac in 0.0f64..0.9) {
        let recs = dated(37);
        let date = NaiveDate::from_ymd_opt(year, 6, 1).unwrap();
        let s = temporal_split(&recs, date, frac, seed).unwrap();
        let mut ids: Vec<String> = s.train.iter().chain(&s.valid).chain(&s.test).map(|r| r.trial_id.clone()).collect();
        ids.sort();
        let mut all: Vec<String> = recs.iter().map(|r| r.trial_id.clone()).collect();
        all.sort();
        prop_assert_eq!(ids, all);
        prop_assert!(s.test.iter().all(|r| r.start_date >= date));
        prop_assert!(s.train.iter().chain(&s.valid).all(|r| r.start_date < date));
    }
}
