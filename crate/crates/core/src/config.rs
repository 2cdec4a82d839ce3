//! Run configuration: every hyperparameter with its default.
//!
//! Configs are TOML documents. Unknown keys are rejected. A delta is a TOML
//! table (or a list of `dotted.key=value` assignments) merged over a base
//! config, which is how ablation variants are expressed.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Per-mode sequence caps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caps {
    pub molecules: usize,
    pub diseases: usize,
    pub inclusion: usize,
    pub exclusion: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            molecules: 5,
            diseases: 5,
            inclusion: 8,
            exclusion: 5,
        }
    }
}

impl Caps {
    pub fn criteria(&self) -> usize {
        self.inclusion + self.exclusion
    }

    /// Length of the fused interaction sequence. Each mode is the query side of
    /// two interactions, so this is 2 * (5 + 5 + 8 + 5) = 46 under the defaults.
    pub fn interaction_tokens(&self) -> usize {
        2 * (self.molecules + self.diseases + self.criteria())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    FirstToken,
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub caps: Caps,
    pub aggregation: Aggregation,
    /// Trials starting on or after this date form the test split. When absent,
    /// the date at the `1 - test_fraction` quantile of start dates is used.
    pub split_date: Option<NaiveDate>,
    pub test_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            caps: Caps::default(),
            aggregation: Aggregation::FirstToken,
            split_date: None,
            test_fraction: 0.2,
            validation_fraction: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelection {
    /// Keep tokens by learned confidence against the threshold.
    Learned,
    /// Keep every valid token.
    All,
    /// Keep a uniformly random subset of valid tokens with the learned cardinality.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorDirection {
    /// Keep tokens with confidence `p >= t`.
    KeepAbove,
    /// Keep tokens with `p <= t`, the indicator as literally printed.
    KeepBelow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub head_blocks: usize,
    pub head_hidden: usize,
    pub threshold: f64,
    pub use_pe: bool,
    pub token_selection: TokenSelection,
    pub indicator_direction: IndicatorDirection,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            layers: 2,
            ffn: 32,
            head_blocks: 1,
            head_hidden: 32,
            threshold: 0.5,
            use_pe: true,
            token_selection: TokenSelection::Learned,
            // Keep-above never recovers a dropped token, and the Cauchy term
            // drops all of them within an epoch.
            indicator_direction: IndicatorDirection::KeepBelow,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveDenominator {
    /// One normalizer over all 30 ordered interaction pairs.
    Global,
    /// One normalizer per positive pair, over the pairs sharing its anchor.
    PerAnchor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_cauchy: f64,
    pub lambda_contrastive: f64,
    pub cauchy_eps: f64,
    pub temperature: f64,
    /// Put the negative-class fraction on the negative term instead.
    pub swap_class_weights: bool,
    pub contrastive_denominator: ContrastiveDenominator,
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cauchy: 0.05,
            lambda_contrastive: 0.04,
            cauchy_eps: 0.1,
            temperature: 0.5,
            swap_class_weights: false,
            contrastive_denominator: ContrastiveDenominator::Global,
            prob_clamp: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub clip_gradients: bool,
    /// Global gradient-norm bound used when `clip_gradients` is set.
    pub grad_clip_norm: f64,
    pub retrain_on_combined: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            // 5e-2 saturates the head after one Adam step.
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 100,
            patience: 10,
            clip_gradients: true,
            grad_clip_norm: 5.0,
            retrain_on_combined: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub reps: usize,
    pub fraction: f64,
    pub with_replacement: bool,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            reps: 10,
            fraction: 0.8,
            with_replacement: false,
            threshold: 0.5,
        }
    }
}

/// Named ablation variants as `dotted.key=value` deltas over a base config.
pub const ABLATIONS: [(&str, &[&str]); 9] = [
    ("full", &[]),
    ("bce_only", &["loss.lambda_cauchy=0", "loss.lambda_contrastive=0"]),
    ("bce_cauchy", &["loss.lambda_contrastive=0"]),
    ("bce_contrastive", &["loss.lambda_cauchy=0"]),
    ("no_pe", &["model.use_pe=false"]),
    ("agg_mean", &["data.aggregation=mean"]),
    ("agg_sum", &["data.aggregation=sum"]),
    ("select_random", &["model.token_selection=random"]),
    ("select_all", &["model.token_selection=all"]),
];

pub fn ablation(name: &str) -> Option<&'static [&'static str]> {
    ABLATIONS.iter().find(|a| a.0 == name).map(|a| a.1)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Merges a TOML table over this config. Keys absent from the delta keep
    /// their current value.
    pub fn with_delta(&self, delta: &toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, delta);
        let cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `dotted.key=value` assignments, where `value` is a TOML literal
    /// (bare words are read as strings).
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut delta = toml::Table::new();
        for a in assignments {
            let a = a.as_ref();
            let (key, raw) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{a}` is not key=value")))?;
            let value = parse_literal(raw.trim());
            insert_dotted(&mut delta, key.trim(), value)?;
        }
        self.with_delta(&delta)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", m.d_model, m.heads));
        }
        if m.use_pe && m.d_model % 2 != 0 {
            return bad(format!("positional embeddings need an even d_model, got {}", m.d_model));
        }
        if !(m.threshold > 0.0 && m.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", m.threshold));
        }
        let l = &self.loss;
        if l.cauchy_eps <= 0.0 {
            return bad(format!("cauchy_eps must be > 0, got {}", l.cauchy_eps));
        }
        if l.temperature <= 0.0 {
            return bad(format!("temperature must be > 0, got {}", l.temperature));
        }
        if l.lambda_cauchy < 0.0 || l.lambda_contrastive < 0.0 {
            return bad("loss weights must be >= 0".into());
        }
        if !(l.prob_clamp > 0.0 && l.prob_clamp < 0.5) {
            return bad(format!("prob_clamp must lie in (0, 0.5), got {}", l.prob_clamp));
        }
        let c = &self.data.caps;
        if c.molecules == 0 || c.diseases == 0 || c.inclusion == 0 || c.exclusion == 0 {
            return bad("caps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return bad("test_fraction must lie in [0, 1)".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if t.clip_gradients && !(t.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be > 0, got {}", t.grad_clip_norm));
        }
        if t.learning_rate < 0.0 {
            return bad("learning_rate must be >= 0".into());
        }
        if self.eval.reps == 0 || !(self.eval.fraction > 0.0 && self.eval.fraction <= 1.0) {
            return bad("eval needs reps >= 1 and 0 < fraction <= 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Table, delta: &toml::Table) {
    for (k, v) in delta {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(d)) => merge(b, d),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
