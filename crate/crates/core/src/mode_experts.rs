//! Mode experts: confidence-gated token selection and directed cross-attention
//! between the molecule, disease and criteria modes.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{EmptyRows, Graph, Mask, Tensor, Var};
use crate::config::IndicatorDirection;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Molecule = 0,
    Disease = 1,
    Criteria = 2,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Molecule, Mode::Disease, Mode::Criteria];

    pub fn short(self) -> char {
        match self {
            Mode::Molecule => 'm',
            Mode::Disease => 'd',
            Mode::Criteria => 'c',
        }
    }
}

/// The six directed pairs `(source, destination)`: the source mode's selected
/// tokens query the destination mode.
pub const PAIRS: [(Mode, Mode); 6] = [
    (Mode::Molecule, Mode::Disease),
    (Mode::Disease, Mode::Molecule),
    (Mode::Criteria, Mode::Disease),
    (Mode::Disease, Mode::Criteria),
    (Mode::Molecule, Mode::Criteria),
    (Mode::Criteria, Mode::Molecule),
];

pub fn pair_name(i: usize) -> String {
    let (s, d) = PAIRS[i];
    format!("I_{}{}", s.short(), d.short())
}

/// Positive pairs as indices into [`PAIRS`]: (md, dm), (cm, mc), (cd, dc).
pub const POSITIVE_PAIRS: [(usize, usize); 3] = [(0, 1), (5, 4), (2, 3)];

#[derive(Clone, Debug)]
pub struct ExpertParams {
    /// Selection projection `[d, 1]`.
    pub w_p: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl ExpertParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            // Zero start: p = 0.5 for every token, so selection begins with all kept.
            w_p: store.add(format!("{prefix}.w_p"), Tensor::zeros(&[d, 1])),
            wq: store.xavier(format!("{prefix}.wq"), d, d, rng),
            wk: store.xavier(format!("{prefix}.wk"), d, d, rng),
            wv: store.xavier(format!("{prefix}.wv"), d, d, rng),
        }
    }
}

/// How the hard keep/drop mask is formed from the confidences.
pub enum HardRule<'a> {
    /// Keep valid tokens whose confidence passes the threshold.
    Threshold { t: f64, direction: IndicatorDirection },
    /// Keep every valid token.
    All,
    /// Keep a uniformly random subset of valid tokens, as many as the
    /// threshold rule would keep.
    Random {
        t: f64,
        direction: IndicatorDirection,
        rng: &'a mut ChaCha8Rng,
    },
    /// Use a given mask (for gradient checks).
    Fixed(&'a Mask),
}

#[derive(Clone, Debug)]
pub struct Selection {
    /// Confidences `[B, L]`, computed for every row (padded ones included).
    pub p: Var,
    pub valid: Mask,
    pub hard: Mask,
    /// Modulated target tokens `[B, L, d]`; rows off the hard mask are zero.
    pub t: Var,
}

fn passes(p: f64, t: f64, direction: IndicatorDirection) -> bool {
    match direction {
        IndicatorDirection::KeepAbove => p >= t,
        IndicatorDirection::KeepBelow => p <= t,
    }
}

/// Threshold mask: valid AND indicator(p, t).
pub fn threshold_mask(p: &Tensor, valid: &Mask, t: f64, direction: IndicatorDirection) -> Mask {
    let bits = p
        .data()
        .iter()
        .zip(valid.bits())
        .map(|(&pv, &v)| v && passes(pv, t, direction))
        .collect();
    Mask::new(valid.shape().to_vec(), bits).expect("mask shape")
}

fn random_mask(learned: &Mask, valid: &Mask, rng: &mut ChaCha8Rng) -> Mask {
    let l = valid.shape()[1];
    let mut bits = vec![false; valid.bits().len()];
    for b in 0..valid.shape()[0] {
        let slots: Vec<usize> = (0..l).filter(|&i| valid.row(b)[i]).collect();
        let k = learned.row(b).iter().filter(|&&x| x).count();
        for j in sample(rng, slots.len(), k) {
            bits[b * l + slots[j]] = true;
        }
    }
    Mask::new(valid.shape().to_vec(), bits).expect("mask shape")
}

/// `p = sigmoid(S W_p)`, hard mask from `rule`, and `T = (hard ? p : 0) * S`.
///
/// The hard mask is a constant: gradients reach `W_p` only through `p` on
/// kept tokens.
pub fn select_tokens(g: &mut Graph, s: Var, valid: &Mask, w_p: Var, rule: HardRule<'_>) -> Result<Selection> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 3 || valid.shape() != &shape[..2] {
        return Err(Error::shape("select_tokens", &shape, valid.shape()));
    }
    let logits = g.matmul(s, w_p)?;
    let logits = g.reshape(logits, shape[..2].to_vec())?;
    let p = g.sigmoid(logits);
    let hard = match rule {
        HardRule::Threshold { t, direction } => threshold_mask(g.value(p), valid, t, direction),
        HardRule::All => valid.clone(),
        HardRule::Random { t, direction, rng } => {
            let learned = threshold_mask(g.value(p), valid, t, direction);
            random_mask(&learned, valid, rng)
        }
        HardRule::Fixed(m) => {
            if m.shape() != valid.shape() {
                return Err(Error::shape("fixed selection mask", valid.shape(), m.shape()));
            }
            let bits = m.bits().iter().zip(valid.bits()).map(|(&a, &b)| a && b).collect();
            Mask::new(valid.shape().to_vec(), bits)?
        }
    };
    let gate = g.constant(hard.to_tensor());
    let factor = g.mul(p, gate)?;
    let t = g.scale_rows(s, factor)?;
    Ok(Selection {
        p,
        valid: valid.clone(),
        hard,
        t,
    })
}

/// `softmax(T W^Q (S W^K)^T / sqrt(d)) S W^V` with the destination expert's
/// projections. Keys are the valid destination rows; deselected query rows
/// come out as zeros.
pub fn cross_attend(
    g: &mut Graph,
    p: &Bound,
    dst_expert: &ExpertParams,
    src: &Selection,
    dst: Var,
    dst_mask: &Mask,
    pair: &str,
) -> Result<Var> {
    let (bq, lq) = (src.hard.shape()[0], src.hard.shape()[1]);
    if dst_mask.shape()[0] != bq {
        return Err(Error::shape("cross_attend", src.hard.shape(), dst_mask.shape()));
    }
    for b in 0..bq {
        if !dst_mask.row(b).iter().any(|&x| x) {
            return Err(Error::DegenerateMask(format!(
                "{pair}: trial {b} of the batch has no valid destination token"
            )));
        }
    }
    let d = g.shape(dst)[2];
    let q = g.matmul(src.t, p.var(dst_expert.wq))?;
    let k = g.matmul(dst, p.var(dst_expert.wk))?;
    let v = g.matmul(dst, p.var(dst_expert.wv))?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.affine(scores, 1.0 / (d as f64).sqrt(), 0.0);
    let weights = g.softmax_rows(scores, Some(&dst_mask.expand_keys(lq)), EmptyRows::Error)?;
    let out = g.batch_matmul(weights, v, false)?;
    let keep = g.constant(src.hard.to_tensor());
    g.scale_rows(out, keep)
}

/// Output of the six directed interactions, in [`PAIRS`] order.
#[derive(Clone, Debug)]
pub struct Interactions {
    pub values: [Var; 6],
    /// Target-side masks: the valid mask of each pair's source mode.
    pub masks: [Mask; 6],
}

/// Hard-mask policy for all three modes of a forward pass.
pub enum SelectionPlan<'a> {
    Learned { t: f64, direction: IndicatorDirection },
    All,
    Random {
        t: f64,
        direction: IndicatorDirection,
        rng: &'a mut ChaCha8Rng,
    },
    /// Per-mode masks fixed in advance.
    Fixed(&'a [Mask; 3]),
}

impl SelectionPlan<'_> {
    fn rule(&mut self, mode: Mode) -> HardRule<'_> {
        match self {
            SelectionPlan::Learned { t, direction } => HardRule::Threshold {
                t: *t,
                direction: *direction,
            },
            SelectionPlan::All => HardRule::All,
            SelectionPlan::Random { t, direction, rng } => HardRule::Random {
                t: *t,
                direction: *direction,
                rng,
            },
            SelectionPlan::Fixed(masks) => HardRule::Fixed(&masks[mode as usize]),
        }
    }
}

/// Selects tokens in every mode, then computes the six interactions.
pub fn run_experts(
    g: &mut Graph,
    p: &Bound,
    experts: &[ExpertParams; 3],
    enriched: [Var; 3],
    valid: [&Mask; 3],
    plan: &mut SelectionPlan<'_>,
) -> Result<([Selection; 3], Interactions)> {
    let mut sels = Vec::with_capacity(3);
    for m in Mode::ALL {
        let i = m as usize;
        sels.push(select_tokens(g, enriched[i], valid[i], p.var(experts[i].w_p), plan.rule(m))?);
    }
    let sels: [Selection; 3] = sels.try_into().expect("three modes");
    let mut values = Vec::with_capacity(6);
    let mut masks = Vec::with_capacity(6);
    for (i, &(s, d)) in PAIRS.iter().enumerate() {
        let (s, d) = (s as usize, d as usize);
        values.push(cross_attend(g, p, &experts[d], &sels[s], enriched[d], valid[d], &pair_name(i))?);
        masks.push(valid[s].clone());
    }
    Ok((
        sels,
        Interactions {
            values: values.try_into().expect("six pairs"),
            masks: masks.try_into().expect("six pairs"),
        },
    ))
}

/// Statement-level modes reported by [`TokenUsage`].
pub const USAGE_MODES: [&str; 4] = ["molecule", "disease", "inclusion", "exclusion"];

#[derive(Clone, Debug, PartialEq)]
pub struct UsageRow {
    pub mode: &'static str,
    /// Number of valid tokens in the trials of this group.
    pub valid_count: usize,
    pub index: usize,
    pub ratio: f64,
    pub samples: usize,
    /// Single-token groups, where the only token is the whole mode.
    pub always_selected: bool,
}

/// Selection frequency per (mode, valid-token count, index).
#[derive(Clone, Debug, Default)]
pub struct TokenUsage {
    counts: BTreeMap<(usize, usize, usize), (usize, usize)>,
}

impl TokenUsage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one batch of `[B, L]` masks for `USAGE_MODES[mode]`.
    pub fn add(&mut self, mode: usize, valid: &Mask, hard: &Mask) {
        for b in 0..valid.shape()[0] {
            let x = valid.row(b).iter().filter(|&&v| v).count();
            for (i, (&v, &h)) in valid.row(b).iter().zip(hard.row(b)).enumerate() {
                if v {
                    let e = self.counts.entry((mode, x, i)).or_insert((0, 0));
                    e.0 += usize::from(h);
                    e.1 += 1;
                }
            }
        }
    }

    pub fn rows(&self) -> Vec<UsageRow> {
        self.counts
            .iter()
            .map(|(&(mode, x, index), &(hit, n))| UsageRow {
                mode: USAGE_MODES[mode],
                valid_count: x,
                index,
                ratio: hit as f64 / n as f64,
                samples: n,
                always_selected: x == 1,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,valid_count,index,ratio,samples,flag\n");
        for r in self.rows() {
            let flag = if r.always_selected { "always_selected" } else { "" };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.mode, r.valid_count, r.index, r.ratio, r.samples, flag
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::autodiff::{check_gradients, Coordinates, EmptyRows};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn prefix_mask(b: usize, l: usize, valid: usize) -> Mask {
        Mask::new(vec![b, l], (0..b * l).map(|k| k % l < valid).collect()).unwrap()
    }

    /// `S` with one-hot rows and a `W_p` that yields the requested confidences.
    fn engineered(ps: &[f64]) -> (Tensor, Tensor) {
        let l = ps.len();
        let mut s = Tensor::zeros(&[1, l, l]);
        for i in 0..l {
            s.set(&[0, i, i], 1.0);
        }
        let logits = ps.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
        (s, Tensor::new(vec![l, 1], logits).unwrap())
    }

    fn keep_above(t: f64) -> HardRule<'static> {
        HardRule::Threshold {
            t,
            direction: IndicatorDirection::KeepAbove,
        }
    }

    #[test]
    fn pair_naming() {
        assert_eq!(pair_name(0), "I_md");
        assert_eq!(pair_name(5), "I_cm");
        for &(a, b) in &POSITIVE_PAIRS {
            assert_eq!(PAIRS[a].0, PAIRS[b].1);
            assert_eq!(PAIRS[a].1, PAIRS[b].0);
        }
    }

    #[test]
    fn engineered_confidences_select_first_token() {
        let (s, w) = engineered(&[0.9, 0.2]);
        let mut g = Graph::new();
        let sv = g.constant(s);
        let wv = g.constant(w);
        let sel = select_tokens(&mut g, sv, &prefix_mask(1, 2, 2), wv, keep_above(0.5)).unwrap();
        assert_eq!(sel.hard.bits(), &[true, false]);
        let p = g.value(sel.p).data().to_vec();
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        let t = g.value(sel.t).data();
        assert!((t[0] - 0.9).abs() < 1e-12);
        assert_eq!(&t[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn literal_indicator_keeps_the_low_token() {
        let (s, w) = engineered(&[0.9, 0.2]);
        let mut g = Graph::new();
        let sv = g.constant(s);
        let wv = g.constant(w);
        let rule = HardRule::Threshold {
            t: 0.5,
            direction: IndicatorDirection::KeepBelow,
        };
        let sel = select_tokens(&mut g, sv, &prefix_mask(1, 2, 2), wv, rule).unwrap();
        assert_eq!(sel.hard.bits(), &[false, true]);
    }

    #[test]
    fn tiny_threshold_keeps_every_valid_token() {
        let mut g = Graph::new();
        let s = g.constant(random(&[3, 4, 5], 1));
        let w = g.constant(random(&[5, 1], 2));
        let valid = prefix_mask(3, 4, 3);
        let sel = select_tokens(&mut g, s, &valid, w, keep_above(1e-300)).unwrap();
        assert_eq!(sel.hard, valid);
        // T = p * S on valid rows.
        let (p, st, tt) = (g.value(sel.p), g.value(s), g.value(sel.t));
        for r in 0..12 {
            for c in 0..5 {
                let want = if r % 4 < 3 { p.data()[r] * st.data()[r * 5 + c] } else { 0.0 };
                assert_eq!(tt.data()[r * 5 + c], want);
            }
        }
    }

    #[test]
    fn zero_weights_give_even_confidence() {
        let mut g = Graph::new();
        let s = g.constant(random(&[2, 3, 4], 3));
        let w = g.constant(Tensor::zeros(&[4, 1]));
        let sel = select_tokens(&mut g, s, &prefix_mask(2, 3, 3), w, HardRule::All).unwrap();
        assert!(g.value(sel.p).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn random_rule_keeps_learned_cardinality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let s = g.constant(random(&[4, 6, 3], 4));
        let w = g.constant(random(&[3, 1], 5));
        let valid = prefix_mask(4, 6, 5);
        let learned = select_tokens(&mut g, s, &valid, w, keep_above(0.5)).unwrap();
        let rule = HardRule::Random {
            t: 0.5,
            direction: IndicatorDirection::KeepAbove,
            rng: &mut rng,
        };
        let random_sel = select_tokens(&mut g, s, &valid, w, rule).unwrap();
        for b in 0..4 {
            let count = |m: &Mask| m.row(b).iter().filter(|&&x| x).count();
            assert_eq!(count(&learned.hard), count(&random_sel.hard));
            assert!(!random_sel.hard.row(b)[5]);
        }
    }

    fn experts(d: usize, seed: u64) -> (ParamStore, ExpertParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = ExpertParams::init(&mut store, "e", d, &mut rng);
        (store, e)
    }

    #[test]
    fn identical_keys_return_the_shared_value() {
        let (store, e) = experts(4, 6);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let s = g.constant(random(&[1, 2, 4], 7));
        let sel = select_tokens(&mut g, s, &prefix_mask(1, 2, 2), p.var(e.w_p), HardRule::All).unwrap();
        let one = random(&[1, 1, 4], 8);
        let mut dst = Tensor::zeros(&[1, 3, 4]);
        for i in 0..3 {
            dst.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(one.data());
        }
        let dv = g.constant(dst);
        let out = cross_attend(&mut g, &p, &e, &sel, dv, &prefix_mask(1, 3, 3), "t").unwrap();
        let v = store.get(e.wv);
        for q in 0..2 {
            for c in 0..4 {
                let want: f64 = (0..4).map(|k| one.data()[k] * v.get(&[k, c])).sum();
                assert!((g.value(out).get(&[0, q, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projections_attend_by_dot_product() {
        let mut store = ParamStore::new();
        let e = ExpertParams {
            w_p: store.add("w_p", Tensor::zeros(&[2, 1])),
            wq: store.add("wq", Tensor::eye(2)),
            wk: store.add("wk", Tensor::eye(2)),
            wv: store.add("wv", Tensor::eye(2)),
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let s = g.constant(Tensor::new(vec![1, 1, 2], vec![2.0, 0.0]).unwrap());
        let sel = select_tokens(&mut g, s, &prefix_mask(1, 1, 1), p.var(e.w_p), HardRule::All).unwrap();
        let dst = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = cross_attend(&mut g, &p, &e, &sel, dst, &prefix_mask(1, 2, 2), "t").unwrap();
        // Query = 0.5 * [2, 0] = [1, 0]; scores [1, 0] / sqrt(2).
        let a = (1.0 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        let got = g.value(out).data();
        assert!((got[0] - w0).abs() < 1e-14 && (got[1] - (1.0 - w0)).abs() < 1e-14);
    }

    #[test]
    fn deselected_queries_yield_zero_rows() {
        let (store, e) = experts(3, 9);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let s = g.constant(random(&[2, 4, 3], 10));
        let fixed = Mask::new(vec![2, 4], vec![true, false, true, false, false, true, false, false]).unwrap();
        let valid = prefix_mask(2, 4, 4);
        let sel = select_tokens(&mut g, s, &valid, p.var(e.w_p), HardRule::Fixed(&fixed)).unwrap();
        let dst = g.constant(random(&[2, 3, 3], 11));
        let out = cross_attend(&mut g, &p, &e, &sel, dst, &prefix_mask(2, 3, 2), "t").unwrap();
        let o = g.value(out);
        for (r, &keep) in fixed.bits().iter().enumerate() {
            let rowv = &o.data()[r * 3..(r + 1) * 3];
            assert_eq!(rowv.iter().all(|&v| v == 0.0), !keep, "row {r}");
        }
    }

    #[test]
    fn attention_rows_are_convex_over_valid_keys() {
        let mut g = Graph::new();
        let q = g.constant(random(&[2, 3, 4], 12));
        let k = g.constant(random(&[2, 5, 4], 13));
        let scores = g.batch_matmul(q, k, true).unwrap();
        let keys = prefix_mask(2, 5, 3).expand_keys(3);
        let w = g.softmax_rows(scores, Some(&keys), EmptyRows::Error).unwrap();
        for r in 0..6 {
            let row = &g.value(w).data()[r * 5..(r + 1) * 5];
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert_eq!(&row[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn scaling_audit() {
        // Pre-multiplying queries by sqrt(d) cancels the 1/sqrt(d) in the scores.
        let d = 4usize;
        let mut store = ParamStore::new();
        let e = ExpertParams {
            w_p: store.add("w_p", Tensor::zeros(&[d, 1])),
            wq: store.add("wq", Tensor::eye(d)),
            wk: store.add("wk", Tensor::eye(d)),
            wv: store.add("wv", Tensor::eye(d)),
        };
        let src = random(&[1, 2, d], 14);
        let dst = random(&[1, 3, d], 15);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        // With W_p = 0, T = S / 2; scale S by 2 sqrt(d) to get raw-dot queries.
        let scaled = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * 2.0 * (d as f64).sqrt()).collect()).unwrap();
        let s = g.constant(scaled);
        let sel = select_tokens(&mut g, s, &prefix_mask(1, 2, 2), p.var(e.w_p), HardRule::All).unwrap();
        let dv = g.constant(dst.clone());
        let out = cross_attend(&mut g, &p, &e, &sel, dv, &prefix_mask(1, 3, 3), "t").unwrap();

        let mut h = Graph::new();
        let qv = h.constant(src);
        let kv = h.constant(dst);
        let sc = h.batch_matmul(qv, kv, true).unwrap();
        let w = h.softmax_rows(sc, None, EmptyRows::Error).unwrap();
        let want = h.batch_matmul(w, kv, false).unwrap();
        assert!(g.value(out).max_abs_diff(h.value(want)) < 1e-12);
    }

    #[test]
    fn empty_destination_is_degenerate() {
        let (store, e) = experts(3, 16);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let s = g.constant(random(&[1, 2, 3], 17));
        let sel = select_tokens(&mut g, s, &prefix_mask(1, 2, 2), p.var(e.w_p), HardRule::All).unwrap();
        let dst = g.constant(Tensor::zeros(&[1, 2, 3]));
        let err = cross_attend(&mut g, &p, &e, &sel, dst, &prefix_mask(1, 2, 0), "I_md").unwrap_err();
        assert!(matches!(err, Error::DegenerateMask(ref m) if m.contains("I_md")), "{err}");
    }

    #[test]
    fn selection_and_attention_gradients() {
        let (store, e) = experts(3, 18);
        let hard = Mask::new(vec![2, 3], vec![true, false, true, true, true, false]).unwrap();
        let valid = prefix_mask(2, 3, 3);
        let dmask = prefix_mask(2, 2, 2);
        let mut params = store.tensors().to_vec();
        params.push(random(&[2, 3, 3], 19));
        params.push(random(&[2, 2, 3], 20));
        let report = check_gradients(
            |g, vars| {
                let p = Bound::from_vars(vars[..4].to_vec());
                let sel = select_tokens(g, vars[4], &valid, p.var(e.w_p), HardRule::Fixed(&hard))?;
                let out = cross_attend(g, &p, &e, &sel, vars[5], &dmask, "t")?;
                let sq = g.mul(out, out)?;
                let s = g.sum_all(sq)?;
                let pl = g.sum_all(sel.p)?;
                g.add(s, pl)
            },
            &params,
            1e-5,
            Coordinates::All,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.per_tensor);
    }

    #[test]
    fn usage_groups_by_valid_count() {
        let mut usage = TokenUsage::new();
        let valid = Mask::new(vec![2, 3], vec![true, true, false, true, false, false]).unwrap();
        let hard = Mask::new(vec![2, 3], vec![true, false, false, true, false, false]).unwrap();
        usage.add(0, &valid, &hard);
        usage.add(0, &valid, &Mask::all(&[2, 3], false));
        let rows = usage.rows();
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].valid_count, rows[0].index, rows[0].ratio), (1, 0, 0.5));
        assert!(rows[0].always_selected);
        assert_eq!((rows[1].valid_count, rows[1].index, rows[1].ratio), (2, 0, 0.5));
        assert_eq!((rows[2].index, rows[2].ratio, rows[2].samples), (1, 0.0, 2));
        let csv = usage.to_csv();
        assert!(csv.starts_with("mode,valid_count,index,ratio,samples,flag\n"));
        assert!(csv.contains("molecule,1,0,0.5,2,always_selected\n"));
    }
}
