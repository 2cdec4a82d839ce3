//! The full network: encoders, mode experts and the compensation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mask, Var};
use crate::compensation_head::{fuse, FusionParams};
use crate::config::{RunConfig, TokenSelection};
use crate::dataset::{pad_and_mask, ClassWeights, DatasetManifest, PaddedBatch, TrialRecord};
use crate::encoder_bank::{CriteriaEncoder, ModeEncoder};
use crate::error::{Error, Result};
use crate::losses::{cauchy_loss, contrastive_loss, total_loss, wbce_loss};
use crate::mode_experts::{run_experts, ExpertParams, Interactions, Selection, SelectionPlan, TokenUsage};
use crate::params::{Bound, ParamStore};

/// RNG stream for parameter initialization; other consumers use other streams
/// of the same seed.
pub const INIT_STREAM: u64 = 0;
pub const SELECTION_STREAM: u64 = 3;

/// Raw embedding dimensions of the three input modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d_mol: usize,
    pub d_dis: usize,
    pub d_txt: usize,
}

impl Dims {
    pub fn of(manifest: &DatasetManifest) -> Self {
        Self {
            d_mol: manifest.d_mol,
            d_dis: manifest.d_dis,
            d_txt: manifest.d_txt,
        }
    }

    pub fn tuple(self) -> (usize, usize, usize) {
        (self.d_mol, self.d_dis, self.d_txt)
    }
}

#[derive(Clone, Debug)]
struct Architecture {
    molecules: ModeEncoder,
    diseases: ModeEncoder,
    criteria: CriteriaEncoder,
    experts: [ExpertParams; 3],
    fusion: FusionParams,
}

impl Architecture {
    fn init(config: &RunConfig, dims: Dims, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let m = &config.model;
        let d = m.d_model;
        Self {
            molecules: ModeEncoder::init(store, "enc.mol", dims.d_mol, m, rng),
            diseases: ModeEncoder::init(store, "enc.dis", dims.d_dis, m, rng),
            criteria: CriteriaEncoder::init(store, "enc.crit", dims.d_txt, m, rng),
            experts: [
                ExpertParams::init(store, "expert.mol", d, rng),
                ExpertParams::init(store, "expert.dis", d, rng),
                ExpertParams::init(store, "expert.crit", d, rng),
            ],
            fusion: FusionParams::init(store, m, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub dims: Dims,
    pub params: ParamStore,
    arch: Architecture,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub y_hat: Var,
    pub selections: [Selection; 3],
    pub interactions: Interactions,
    pub inclusion_mask: Mask,
    pub exclusion_mask: Mask,
}

impl ForwardOutput {
    /// Hard masks in the four statement-level modes (criteria split back into
    /// inclusion and exclusion).
    pub fn usage_masks(&self) -> [(Mask, Mask); 4] {
        let li = self.inclusion_mask.shape()[1];
        let split = |m: &Mask, lo: usize, hi: usize| {
            let (b, l) = (m.shape()[0], m.shape()[1]);
            let bits = (0..b).flat_map(|i| m.bits()[i * l + lo..i * l + hi].to_vec()).collect();
            Mask::new(vec![b, hi - lo], bits).expect("mask split")
        };
        let c = &self.selections[2];
        let lc = c.hard.shape()[1];
        [
            (self.selections[0].valid.clone(), self.selections[0].hard.clone()),
            (self.selections[1].valid.clone(), self.selections[1].hard.clone()),
            (self.inclusion_mask.clone(), split(&c.hard, 0, li)),
            (self.exclusion_mask.clone(), split(&c.hard, li, lc)),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub classification: Var,
    pub cauchy: Var,
    pub contrastive: Var,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &RunConfig, dims: Dims) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut params = ParamStore::new();
        let arch = Architecture::init(config, dims, &mut params, &mut rng);
        Ok(Self {
            config: config.clone(),
            dims,
            params,
            arch,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: &RunConfig, dims: Dims, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, dims)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {n1} {:?}, found {n2} {:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn pad(&self, records: &[&TrialRecord]) -> PaddedBatch {
        pad_and_mask(records, &self.config.data.caps, self.config.data.aggregation, self.dims.tuple())
    }

    /// Selection plan from the configured variant. `Random` needs `rng`.
    pub fn plan<'a>(&self, rng: Option<&'a mut ChaCha8Rng>) -> Result<SelectionPlan<'a>> {
        let m = &self.config.model;
        Ok(match m.token_selection {
            TokenSelection::Learned => SelectionPlan::Learned {
                t: m.threshold,
                direction: m.indicator_direction,
            },
            TokenSelection::All => SelectionPlan::All,
            TokenSelection::Random => SelectionPlan::Random {
                t: m.threshold,
                direction: m.indicator_direction,
                rng: rng.ok_or_else(|| Error::Config("random token selection needs an RNG".into()))?,
            },
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &PaddedBatch,
        plan: &mut SelectionPlan<'_>,
    ) -> Result<ForwardOutput> {
        let a = &self.arch;
        let mol = g.constant(batch.molecules.clone());
        let dis = g.constant(batch.diseases.clone());
        let inc = g.constant(batch.inclusion.clone());
        let exc = g.constant(batch.exclusion.clone());
        let mol = a.molecules.encode_mode(g, p, mol, &batch.molecule_mask)?;
        let dis = a.diseases.encode_mode(g, p, dis, &batch.disease_mask)?;
        let crit = a
            .criteria
            .encode_criteria(g, p, inc, &batch.inclusion_mask, exc, &batch.exclusion_mask)?;
        let (selections, interactions) = run_experts(
            g,
            p,
            &a.experts,
            [mol, dis, crit.criteria],
            [&batch.molecule_mask, &batch.disease_mask, &crit.mask],
            plan,
        )?;
        let logits = fuse(g, p, &a.fusion, &interactions)?;
        let y_hat = g.sigmoid(logits);
        Ok(ForwardOutput {
            logits,
            y_hat,
            selections,
            interactions,
            inclusion_mask: batch.inclusion_mask.clone(),
            exclusion_mask: batch.exclusion_mask.clone(),
        })
    }

    /// The combined objective and its components.
    pub fn losses(
        &self,
        g: &mut Graph,
        out: &ForwardOutput,
        labels: &[f64],
        weights: ClassWeights,
    ) -> Result<LossParts> {
        let l = &self.config.loss;
        let classification = wbce_loss(g, out.y_hat, labels, weights, l.swap_class_weights, l.prob_clamp)?;
        let mut cauchy = None;
        for s in &out.selections {
            let c = cauchy_loss(g, s.p, &s.valid, l.cauchy_eps)?;
            cauchy = Some(match cauchy {
                None => c,
                Some(acc) => g.add(acc, c)?,
            });
        }
        let cauchy = cauchy.expect("three modes");
        let contrastive = contrastive_loss(g, &out.interactions, l.temperature, l.contrastive_denominator)?;
        let total = total_loss(
            g,
            classification,
            cauchy,
            contrastive,
            l.lambda_cauchy,
            l.lambda_contrastive,
        )?;
        Ok(LossParts {
            total,
            classification,
            cauchy,
            contrastive,
        })
    }

    fn selection_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SELECTION_STREAM);
        rng
    }

    /// Success probabilities for `records`, in order.
    pub fn predict(&self, records: &[TrialRecord]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len());
        let mut rng = self.selection_rng();
        for chunk in records.chunks(EVAL_BATCH) {
            let refs: Vec<&TrialRecord> = chunk.iter().collect();
            let batch = self.pad(&refs);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let mut plan = self.plan(Some(&mut rng))?;
            let f = self.forward(&mut g, &p, &batch, &mut plan)?;
            out.extend_from_slice(g.value(f.y_hat).data());
        }
        Ok(out)
    }

    /// Classification loss and predictions over `records` in one pass.
    pub fn evaluate_loss(&self, records: &[TrialRecord], weights: ClassWeights) -> Result<(f64, Vec<f64>)> {
        let mut rng = self.selection_rng();
        let mut total = 0.0;
        let mut preds = Vec::with_capacity(records.len());
        for chunk in records.chunks(EVAL_BATCH) {
            let refs: Vec<&TrialRecord> = chunk.iter().collect();
            let batch = self.pad(&refs);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let mut plan = self.plan(Some(&mut rng))?;
            let f = self.forward(&mut g, &p, &batch, &mut plan)?;
            let l = &self.config.loss;
            let cls = wbce_loss(&mut g, f.y_hat, &batch.labels, weights, l.swap_class_weights, l.prob_clamp)?;
            total += g.value(cls).item() * chunk.len() as f64;
            preds.extend_from_slice(g.value(f.y_hat).data());
        }
        Ok((total / records.len().max(1) as f64, preds))
    }

    /// Hard-mask frequencies over `records` under the configured selection.
    pub fn token_usage(&self, records: &[TrialRecord]) -> Result<TokenUsage> {
        let mut usage = TokenUsage::new();
        let mut rng = self.selection_rng();
        for chunk in records.chunks(EVAL_BATCH) {
            let refs: Vec<&TrialRecord> = chunk.iter().collect();
            let batch = self.pad(&refs);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let mut plan = self.plan(Some(&mut rng))?;
            let f = self.forward(&mut g, &p, &batch, &mut plan)?;
            for (i, (valid, hard)) in f.usage_masks().iter().enumerate() {
                usage.add(i, valid, hard);
            }
        }
        Ok(usage)
    }
}

/// Records per forward pass when no gradients are needed.
pub const EVAL_BATCH: usize = 256;
