//! Per-mode transformer encoders and the shared criteria encoder.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{EmptyRows, Graph, Mask, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// `PE[pos, 2i] = sin(pos / 10000^(2i / dim))`, `PE[pos, 2i + 1] = cos(..)`.
pub fn sinusoidal_pe(length: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("positional embedding dim must be even, got {dim}")));
    }
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, dim], data)
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

/// Post-norm encoder layers: multi-head self-attention and a ReLU
/// feed-forward block, each followed by residual add and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<LayerParams>,
    pub d_model: usize,
    pub heads: usize,
    pub eps: f64,
}

impl EncoderStack {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.l{l}.{s}");
                LayerParams {
                    wq: store.xavier(n("wq"), d, d, rng),
                    wk: store.xavier(n("wk"), d, d, rng),
                    wv: store.xavier(n("wv"), d, d, rng),
                    wo: store.xavier(n("wo"), d, d, rng),
                    bo: store.zeros(n("bo"), d),
                    ln1_gamma: store.ones(n("ln1.gamma"), d),
                    ln1_beta: store.zeros(n("ln1.beta"), d),
                    w1: store.xavier(n("w1"), d, cfg.ffn, rng),
                    b1: store.zeros(n("b1"), cfg.ffn),
                    w2: store.xavier(n("w2"), cfg.ffn, d, rng),
                    b2: store.zeros(n("b2"), d),
                    ln2_gamma: store.ones(n("ln2.gamma"), d),
                    ln2_beta: store.zeros(n("ln2.beta"), d),
                }
            })
            .collect();
        Self {
            layers,
            d_model: d,
            heads: cfg.heads,
            eps: cfg.layer_norm_eps,
        }
    }

    /// Runs every layer over `x[B, L, d]`. Attention keys are restricted to
    /// `mask[B, L]`, and masked rows are zeroed after each layer.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mask: &Mask) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model || mask.shape() != &shape[..2] {
            return Err(Error::shape("encoder input", &shape, mask.shape()));
        }
        let keep = g.constant(mask.to_tensor());
        let attn_mask = mask.expand_keys(shape[1]);
        let mut h = x;
        for layer in &self.layers {
            h = self.layer(g, p, layer, h, &attn_mask)?;
            h = g.scale_rows(h, keep)?;
        }
        Ok(h)
    }

    fn layer(&self, g: &mut Graph, p: &Bound, l: &LayerParams, x: Var, attn_mask: &Mask) -> Result<Var> {
        let dh = self.d_model / self.heads;
        let q = g.matmul(x, p.var(l.wq))?;
        let k = g.matmul(x, p.var(l.wk))?;
        let v = g.matmul(x, p.var(l.wv))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * dh, dh)?;
            let kh = g.slice_last(k, h * dh, dh)?;
            let vh = g.slice_last(v, h * dh, dh)?;
            let scores = g.batch_matmul(qh, kh, true)?;
            let scores = g.affine(scores, scale, 0.0);
            // An empty mode has no keys; its rows are zeroed afterwards anyway.
            let weights = g.softmax_rows(scores, Some(attn_mask), EmptyRows::Zero)?;
            heads.push(g.batch_matmul(weights, vh, false)?);
        }
        let ctx = g.concat(&heads, 2)?;
        let out = g.matmul(ctx, p.var(l.wo))?;
        let out = g.add_bias(out, p.var(l.bo))?;
        let res = g.add(x, out)?;
        let h1 = g.layer_norm(res, p.var(l.ln1_gamma), p.var(l.ln1_beta), self.eps)?;
        let f = g.matmul(h1, p.var(l.w1))?;
        let f = g.add_bias(f, p.var(l.b1))?;
        let f = g.relu(f);
        let f = g.matmul(f, p.var(l.w2))?;
        let f = g.add_bias(f, p.var(l.b2))?;
        let res = g.add(h1, f)?;
        g.layer_norm(res, p.var(l.ln2_gamma), p.var(l.ln2_beta), self.eps)
    }
}

/// Learned linear map from a mode's embedding dim to the model dim.
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub w: ParamId,
    pub b: ParamId,
}

impl InputProjection {
    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.xavier(format!("{prefix}.proj.w"), d_in, d_model, rng),
            b: store.zeros(format!("{prefix}.proj.b"), d_model),
        }
    }

    /// Projects `x[B, L, d_in]` and zeroes padded rows.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, keep: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        let y = g.add_bias(y, p.var(self.b))?;
        g.scale_rows(y, keep)
    }
}

/// Encoder for one set-valued mode (molecules or diseases).
#[derive(Clone, Debug)]
pub struct ModeEncoder {
    pub proj: InputProjection,
    pub stack: EncoderStack,
}

impl ModeEncoder {
    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: InputProjection::init(store, prefix, d_in, cfg.d_model, rng),
            stack: EncoderStack::init(store, prefix, cfg, rng),
        }
    }

    /// No positional signal: the output is equivariant to row permutations.
    pub fn encode_mode(&self, g: &mut Graph, p: &Bound, u: Var, mask: &Mask) -> Result<Var> {
        let keep = g.constant(mask.to_tensor());
        let x = self.proj.forward(g, p, u, keep)?;
        self.stack.forward(g, p, x, mask)
    }
}

/// Enriched criteria: the inclusion and exclusion outputs and their
/// concatenation along the sequence axis.
#[derive(Clone, Debug)]
pub struct EncodedCriteria {
    pub inclusion: Var,
    pub exclusion: Var,
    pub criteria: Var,
    pub mask: Mask,
}

/// Siamese encoder: one parameter set applied to inclusion and exclusion
/// statements separately.
#[derive(Clone, Debug)]
pub struct CriteriaEncoder {
    pub encoder: ModeEncoder,
    pub use_pe: bool,
}

impl CriteriaEncoder {
    pub fn init(store: &mut ParamStore, prefix: &str, d_txt: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder: ModeEncoder::init(store, prefix, d_txt, cfg, rng),
            use_pe: cfg.use_pe,
        }
    }

    fn encode_list(&self, g: &mut Graph, p: &Bound, u: Var, mask: &Mask) -> Result<Var> {
        let keep = g.constant(mask.to_tensor());
        let mut x = self.encoder.proj.forward(g, p, u, keep)?;
        if self.use_pe {
            // Positions count from 0 within each list; padded rows stay zero.
            let s = g.shape(x).to_vec();
            let pe = sinusoidal_pe(s[1], s[2])?;
            let mut data = Vec::with_capacity(s[0] * s[1] * s[2]);
            for b in 0..s[0] {
                for (pos, &valid) in mask.row(b).iter().enumerate() {
                    if valid {
                        data.extend_from_slice(pe.row(pos));
                    } else {
                        data.extend(std::iter::repeat_n(0.0, s[2]));
                    }
                }
            }
            let pe = g.constant(Tensor::new(s, data)?);
            x = g.add(x, pe)?;
        }
        self.encoder.stack.forward(g, p, x, mask)
    }

    pub fn encode_criteria(
        &self,
        g: &mut Graph,
        p: &Bound,
        inclusion: Var,
        inclusion_mask: &Mask,
        exclusion: Var,
        exclusion_mask: &Mask,
    ) -> Result<EncodedCriteria> {
        let inclusion = self.encode_list(g, p, inclusion, inclusion_mask)?;
        let exclusion = self.encode_list(g, p, exclusion, exclusion_mask)?;
        let criteria = g.concat(&[inclusion, exclusion], 1)?;
        let mask = Mask::concat_last(&[inclusion_mask, exclusion_mask])?;
        Ok(EncodedCriteria {
            inclusion,
            exclusion,
            criteria,
            mask,
        })
    }
}
