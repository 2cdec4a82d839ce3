use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which coordinates of each parameter tensor to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// At most `per_tensor` seeded coordinates per tensor; smaller tensors are checked fully.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub per_tensor: Vec<f64>,
    pub coordinates_checked: usize,
}

/// Compares reverse-mode gradients against central differences
/// `(f(p + h) - f(p - h)) / 2h`.
///
/// `f` receives a fresh graph plus one leaf per entry of `params` and must
/// return a one-element loss.
pub fn check_gradients<F>(
    mut f: F,
    params: &[Tensor],
    h: f64,
    coords: Coordinates,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = f(&mut g, &leaves)?;
        let grads = g.backward(loss)?;
        leaves.iter().map(|&l| grads.wrt(l)).collect()
    };

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = f(&mut g, &leaves)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss = {v}")));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (t, grad) in analytic.iter().enumerate() {
        let n = params[t].numel();
        let indices: Vec<usize> = match coords {
            Coordinates::All => (0..n).collect(),
            Coordinates::Sample { per_tensor, seed } if n > per_tensor => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
                let mut idx = sample(&mut rng, n, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
            Coordinates::Sample { .. } => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in indices {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
        per_tensor.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_tensor.iter().copied().fold(0.0, f64::max),
        per_tensor,
        coordinates_checked: checked,
    })
}
