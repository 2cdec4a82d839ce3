use super::records::{StatementEmbedding, TrialRecord};
use crate::autodiff::{Mask, Tensor};
use crate::config::{Aggregation, Caps};

/// Trials padded to the per-mode caps, with validity masks.
///
/// Token tensors are `[B, cap, dim]`; masks are `[B, cap]`. Padded rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub molecules: Tensor,
    pub molecule_mask: Mask,
    pub diseases: Tensor,
    pub disease_mask: Mask,
    pub inclusion: Tensor,
    pub inclusion_mask: Mask,
    pub exclusion: Tensor,
    pub exclusion_mask: Mask,
    pub labels: Vec<f64>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn pick(s: &StatementEmbedding, aggregation: Aggregation) -> &[f64] {
    match aggregation {
        Aggregation::FirstToken => &s.first_token,
        Aggregation::Mean => &s.mean,
        Aggregation::Sum => &s.sum,
    }
}

/// Pads one mode. Lists longer than `cap` keep their first `cap` entries.
fn pad<'a, I>(lists: I, batch: usize, cap: usize, dim: usize) -> (Tensor, Mask)
where
    I: Iterator<Item = Vec<&'a [f64]>>,
{
    let mut data = vec![0.0; batch * cap * dim];
    let mut bits = vec![false; batch * cap];
    for (b, list) in lists.enumerate() {
        for (i, v) in list.into_iter().take(cap).enumerate() {
            let off = (b * cap + i) * dim;
            data[off..off + dim].copy_from_slice(v);
            bits[b * cap + i] = true;
        }
    }
    (
        Tensor::new(vec![batch, cap, dim], data).expect("padded shape"),
        Mask::new(vec![batch, cap], bits).expect("mask shape"),
    )
}

/// Assembles a padded batch. `dims` is `(d_mol, d_dis, d_txt)`.
pub fn pad_and_mask<R: std::borrow::Borrow<TrialRecord>>(
    records: &[R],
    caps: &Caps,
    aggregation: Aggregation,
    dims: (usize, usize, usize),
) -> PaddedBatch {
    let n = records.len();
    let recs = || records.iter().map(|r| r.borrow());
    let (molecules, molecule_mask) = pad(
        recs().map(|r| r.molecule_embeddings.iter().map(Vec::as_slice).collect()),
        n,
        caps.molecules,
        dims.0,
    );
    let (diseases, disease_mask) = pad(
        recs().map(|r| r.disease_embeddings.iter().map(Vec::as_slice).collect()),
        n,
        caps.diseases,
        dims.1,
    );
    let (inclusion, inclusion_mask) = pad(
        recs().map(|r| r.inclusion_statements.iter().map(|s| pick(s, aggregation)).collect()),
        n,
        caps.inclusion,
        dims.2,
    );
    let (exclusion, exclusion_mask) = pad(
        recs().map(|r| r.exclusion_statements.iter().map(|s| pick(s, aggregation)).collect()),
        n,
        caps.exclusion,
        dims.2,
    );
    PaddedBatch {
        molecules,
        molecule_mask,
        diseases,
        disease_mask,
        inclusion,
        inclusion_mask,
        exclusion,
        exclusion_mask,
        labels: recs().map(|r| f64::from(r.label)).collect(),
    }
}
