//! Fusion of the six interactions and the outcome head.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{EmptyRows, Graph, Mask, Var};
use crate::config::ModelConfig;
use crate::encoder_bank::EncoderStack;
use crate::error::{Error, Result};
use crate::mode_experts::Interactions;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub encoder: EncoderStack,
    pub blocks: Vec<ResidualBlock>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl FusionParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let encoder = EncoderStack::init(store, "fusion", cfg, rng);
        let blocks = (0..cfg.head_blocks)
            .map(|i| ResidualBlock {
                w1: store.xavier(format!("head.r{i}.w1"), d, cfg.head_hidden, rng),
                b1: store.zeros(format!("head.r{i}.b1"), cfg.head_hidden),
                w2: store.xavier(format!("head.r{i}.w2"), cfg.head_hidden, d, rng),
                b2: store.zeros(format!("head.r{i}.b2"), d),
            })
            .collect();
        Self {
            encoder,
            blocks,
            w_out: store.xavier("head.out.w", d, 1, rng),
            b_out: store.zeros("head.out.b", 1),
        }
    }
}

/// Concatenates the interactions along the sequence axis, runs the fusion
/// encoder, averages valid rows, and applies the residual head.
///
/// Returns the logits `[B]`.
pub fn fuse(g: &mut Graph, p: &Bound, fp: &FusionParams, inter: &Interactions) -> Result<Var> {
    let all = g.concat(&inter.values, 1)?;
    let masks: Vec<&Mask> = inter.masks.iter().collect();
    let mask = Mask::concat_last(&masks)?;
    let b = mask.shape()[0];
    for i in 0..b {
        if !mask.row(i).iter().any(|&x| x) {
            return Err(Error::DegenerateMask(format!(
                "trial {i} of the batch has no interaction tokens"
            )));
        }
    }
    let h = fp.encoder.forward(g, p, all, &mask)?;
    let mut h = g.mean_axis(h, 1, Some(&mask), EmptyRows::Error)?;
    for blk in &fp.blocks {
        let z = g.matmul(h, p.var(blk.w1))?;
        let z = g.add_bias(z, p.var(blk.b1))?;
        let z = g.relu(z);
        let z = g.matmul(z, p.var(blk.w2))?;
        let z = g.add_bias(z, p.var(blk.b2))?;
        h = g.add(h, z)?;
    }
    let logit = g.matmul(h, p.var(fp.w_out))?;
    let logit = g.add_bias(logit, p.var(fp.b_out))?;
    g.reshape(logit, vec![b])
}

/// `sigmoid(fuse(..))`: success probabilities `[B]`.
pub fn fuse_and_predict(g: &mut Graph, p: &Bound, fp: &FusionParams, inter: &Interactions) -> Result<Var> {
    let logit = fuse(g, p, fp, inter)?;
    Ok(g.sigmoid(logit))
}
