use log::info;
use serde::{Deserialize, Serialize};

use super::fit::fit;
use crate::config::RunConfig;
use crate::dataset::TrialRecord;
use crate::error::{Error, Result};
use crate::model::Dims;

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub config: RunConfig,
}

/// Cartesian product of `axes` over `base`. Each axis is a dotted config key
/// and its candidate values (TOML literals); the first axis varies slowest.
pub fn expand_grid(base: &RunConfig, axes: &[(String, Vec<String>)]) -> Result<Vec<GridCell>> {
    let mut cells = vec![(Vec::<String>::new(), base.clone())];
    for (key, values) in axes {
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis {key} has no values")));
        }
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for (labels, cfg) in &cells {
            for v in values {
                let assignment = format!("{key}={v}");
                let mut l = labels.clone();
                l.push(assignment.clone());
                next.push((l, cfg.with_overrides(&[assignment])?));
            }
        }
        cells = next;
    }
    Ok(cells
        .into_iter()
        .map(|(l, config)| GridCell {
            label: if l.is_empty() { "base".into() } else { l.join(" ") },
            config,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub label: String,
    pub valid_loss: f64,
    pub valid_pr_auc: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Rows ranked best first.
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn best(&self) -> &GridRow {
        &self.rows[0]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,index,label,valid_loss,valid_pr_auc,best_epoch\n");
        for (rank, r) in self.rows.iter().enumerate() {
            let pr = r.valid_pr_auc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},\"{}\",{},{},{}\n",
                rank + 1,
                r.index,
                r.label,
                r.valid_loss,
                pr,
                r.best_epoch
            ));
        }
        out
    }
}

/// Trains every cell (selection phase only) and ranks by validation loss,
/// then validation PR-AUC (higher first), then cell order.
pub fn grid_search(cells: &[GridCell], train: &[TrialRecord], valid: &[TrialRecord], dims: Dims) -> Result<GridResult> {
    if cells.is_empty() {
        return Err(Error::Config("grid search needs at least one cell".into()));
    }
    if valid.is_empty() {
        return Err(Error::Config("grid search needs a validation split".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (index, cell) in cells.iter().enumerate() {
        let mut cfg = cell.config.clone();
        cfg.train.retrain_on_combined = false;
        let out = fit(train, valid, &cfg, dims)?;
        let valid_loss = out.report.best_valid_loss.expect("validation split is nonempty");
        info!("grid cell {index} [{}]: validation loss {valid_loss:.6}", cell.label);
        rows.push(GridRow {
            index,
            label: cell.label.clone(),
            valid_loss,
            valid_pr_auc: out.report.best_valid_pr_auc,
            best_epoch: out.report.best_epoch,
        });
    }
    rows.sort_by(|a, b| {
        a.valid_loss
            .total_cmp(&b.valid_loss)
            .then_with(|| {
                let pa = a.valid_pr_auc.unwrap_or(f64::NEG_INFINITY);
                let pb = b.valid_pr_auc.unwrap_or(f64::NEG_INFINITY);
                pb.total_cmp(&pa)
            })
            .then_with(|| a.index.cmp(&b.index))
    });
    Ok(GridResult { rows })
}
