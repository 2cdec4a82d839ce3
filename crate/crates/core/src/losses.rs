//! Selection sparsity, interaction contrastive, and class-weighted BCE losses.

use crate::autodiff::{EmptyRows, Graph, Mask, Tensor, Var};
use crate::config::ContrastiveDenominator;
use crate::dataset::ClassWeights;
use crate::error::{Error, Result};
use crate::mode_experts::{Interactions, POSITIVE_PAIRS};

/// `sum_s ln(1 + p_s^2 / eps)` over the valid tokens of each trial, averaged
/// over the batch. `p` is `[B, L]`.
pub fn cauchy_loss(g: &mut Graph, p: Var, valid: &Mask, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("Cauchy scale must be > 0, got {eps}")));
    }
    let sq = g.mul(p, p)?;
    let arg = g.affine(sq, 1.0 / eps, 1.0);
    let terms = g.ln(arg)?;
    let per_trial = g.sum_axis(terms, 1, Some(valid))?;
    g.mean_axis(per_trial, 0, None, EmptyRows::Error)
}

/// Masked mean over rows: `[B, L, d] -> [B, d]`. A trial with no valid row
/// pools to the zero vector.
pub fn pool_interaction(g: &mut Graph, x: Var, mask: &Mask) -> Result<Var> {
    g.mean_axis(x, 1, Some(mask), EmptyRows::Zero)
}

/// Stacks the six pooled interactions into `[B, 6, d]`.
fn pooled_stack(g: &mut Graph, inter: &Interactions) -> Result<Var> {
    let mut rows = Vec::with_capacity(6);
    for (v, m) in inter.values.iter().zip(&inter.masks) {
        let pooled = pool_interaction(g, *v, m)?;
        let s = g.shape(pooled).to_vec();
        rows.push(g.reshape(pooled, vec![s[0], 1, s[1]])?);
    }
    g.concat(&rows, 1)
}

/// Contrastive loss over the six pooled interactions, averaged over the batch.
pub fn contrastive_loss(
    g: &mut Graph,
    inter: &Interactions,
    temperature: f64,
    denominator: ContrastiveDenominator,
) -> Result<Var> {
    let stack = pooled_stack(g, inter)?;
    contrastive_from_pooled(g, stack, temperature, denominator)
}

/// Contrastive loss from pooled vectors `[B, 6, d]` in pair order.
///
/// The global form is `sum_{(a, b) in P+} -ln(exp(s_ab) / sum_{i != j} exp(s_ij))`
/// with `s = cos / temperature`: one normalizer over the 30 ordered pairs of
/// distinct interactions. The per-anchor form normalizes each positive over
/// the five pairs sharing its first element.
pub fn contrastive_from_pooled(
    g: &mut Graph,
    pooled: Var,
    temperature: f64,
    denominator: ContrastiveDenominator,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let shape = g.shape(pooled).to_vec();
    if shape.len() != 3 || shape[1] != 6 {
        return Err(Error::shape("contrastive input", &shape, &[0, 6, 0]));
    }
    let b = shape[0];
    let cos = g.cosine_pairwise(pooled)?;
    let sims = g.affine(cos, 1.0 / temperature, 0.0);

    let mut positive = vec![0.0; b * 36];
    for i in 0..b {
        for &(a, c) in &POSITIVE_PAIRS {
            positive[i * 36 + a * 6 + c] = 1.0;
        }
    }
    let sel = g.constant(Tensor::new(vec![b, 6, 6], positive)?);
    let picked = g.mul(sims, sel)?;
    let flat = g.reshape(picked, vec![b, 36])?;
    let pos_sum = g.sum_axis(flat, 1, None)?;

    let off_diag: Vec<bool> = (0..b * 36).map(|k| (k % 36) / 6 != k % 6).collect();
    let norm = match denominator {
        ContrastiveDenominator::Global => {
            let flat = g.reshape(sims, vec![b, 36])?;
            let lse = g.logsumexp(flat, Some(&Mask::new(vec![b, 36], off_diag)?))?;
            g.affine(lse, POSITIVE_PAIRS.len() as f64, 0.0)
        }
        ContrastiveDenominator::PerAnchor => {
            let lse = g.logsumexp(sims, Some(&Mask::new(vec![b, 6, 6], off_diag)?))?;
            let mut anchors = vec![0.0; b * 6];
            for i in 0..b {
                for &(a, _) in &POSITIVE_PAIRS {
                    anchors[i * 6 + a] = 1.0;
                }
            }
            let sel = g.constant(Tensor::new(vec![b, 6], anchors)?);
            let picked = g.mul(lse, sel)?;
            g.sum_axis(picked, 1, None)?
        }
    };
    let neg = g.affine(pos_sum, -1.0, 0.0);
    let per_trial = g.add(norm, neg)?;
    g.mean_axis(per_trial, 0, None, EmptyRows::Error)
}

/// Class-weighted BCE, batch mean of
/// `-w_pos * y * ln(yhat) - w_neg * (1 - y) * ln(1 - yhat)`.
///
/// By default `w_pos` is the negative-class fraction and `w_neg` the positive
/// one; `swap` puts each fraction on its own class.
pub fn wbce_loss(
    g: &mut Graph,
    y_hat: Var,
    labels: &[f64],
    weights: ClassWeights,
    swap: bool,
    clamp: f64,
) -> Result<Var> {
    let n = labels.len();
    if g.value(y_hat).numel() != n {
        return Err(Error::shape("wbce", g.shape(y_hat), &[n]));
    }
    let (w_pos, w_neg) = if swap {
        (weights.positive, weights.negative)
    } else {
        (weights.negative, weights.positive)
    };
    let y = g.reshape(y_hat, vec![n])?;
    let y = g.clamp(y, clamp, 1.0 - clamp);
    let log_p = g.ln(y)?;
    let one_minus = g.affine(y, -1.0, 1.0);
    let log_q = g.ln(one_minus)?;
    let cp = g.constant(Tensor::vector(labels.iter().map(|l| -w_pos * l).collect()));
    let cn = g.constant(Tensor::vector(labels.iter().map(|l| -w_neg * (1.0 - l)).collect()));
    let a = g.mul(log_p, cp)?;
    let b = g.mul(log_q, cn)?;
    let s = g.add(a, b)?;
    g.mean_axis(s, 0, None, EmptyRows::Error)
}

/// `cls + lambda_cauchy * cauchy + lambda_contrastive * contrastive`.
pub fn total_loss(
    g: &mut Graph,
    cls: Var,
    cauchy: Var,
    contrastive: Var,
    lambda_cauchy: f64,
    lambda_contrastive: f64,
) -> Result<Var> {
    let a = g.affine(cauchy, lambda_cauchy, 0.0);
    let b = g.affine(contrastive, lambda_contrastive, 0.0);
    let s = g.add(cls, a)?;
    g.add(s, b)
}
