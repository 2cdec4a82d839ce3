use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};

use mexa_core::config::{ablation, RunConfig, ABLATIONS};
use mexa_core::dataset::{
    load_dataset, quantile_split_date, synthesize, temporal_split, write_dataset, DatasetManifest, Splits,
    TrialRecord,
};
use mexa_core::evaluator::{bootstrap_eval, BootstrapConfig, MetricReport};
use mexa_core::model::{Dims, Model};
use mexa_core::trainer::{expand_grid, fit, grid_search, Checkpoint};

use crate::{AblateArgs, ConfigArgs, EvalArgs, StatsArgs, SynthArgs, TrainArgs};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: 1,
            error: e.into(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if !path.is_file() {
        return Err(usage(anyhow!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let base = match &args.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path).map_err(usage)?;
            RunConfig::from_toml(&text)
                .with_context(|| format!("in {}", path.display()))
                .map_err(usage)?
        }
        None => RunConfig::default(),
    };
    base.with_overrides(&args.set).map_err(usage)
}

fn load(path: &Path) -> Result<(DatasetManifest, Vec<TrialRecord>), Failure> {
    require_file(path, "data file")?;
    Ok(load_dataset(path)?)
}

fn prepare_out(dir: &Path, config: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(())
}

fn split(config: &RunConfig, records: &[TrialRecord]) -> Result<Splits, Failure> {
    let date = match config.data.split_date {
        Some(d) => d,
        None => quantile_split_date(records, config.data.test_fraction)
            .ok_or_else(|| anyhow!("cannot place a split date in an empty dataset"))?,
    };
    let s = temporal_split(records, date, config.data.validation_fraction, config.seed)?;
    info!(
        "split at {date}: {} train, {} validation, {} test",
        s.train.len(),
        s.valid.len(),
        s.test.len()
    );
    Ok(s)
}

fn bootstrap(config: &RunConfig, scores: &[f64], records: &[TrialRecord]) -> mexa_core::Result<MetricReport> {
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let e = &config.eval;
    bootstrap_eval(
        scores,
        &labels,
        &BootstrapConfig {
            reps: e.reps,
            fraction: e.fraction,
            with_replacement: e.with_replacement,
            threshold: e.threshold,
            seed: config.seed,
        },
    )
}

fn write_predictions(path: &Path, records: &[TrialRecord], scores: &[f64]) -> Result<(), Failure> {
    let mut out = String::from("trial_id,label,score\n");
    for (r, s) in records.iter().zip(scores) {
        writeln!(out, "{},{},{}", r.trial_id, r.label, s).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_metrics(dir: &Path, report: &MetricReport) -> Result<(), Failure> {
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Outcome {
    if !(0.0..=1.0).contains(&a.separability) {
        return Err(usage(anyhow!("separability must lie in [0, 1], got {}", a.separability)));
    }
    let (manifest, records) = synthesize(a.n, a.seed, a.separability).map_err(usage)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_dataset(&a.out, &manifest, &records)?;
    let mut sidecar = a.out.clone().into_os_string();
    sidecar.push(".synth.toml");
    fs::write(
        PathBuf::from(sidecar),
        format!("n = {}\nseed = {}\nseparability = {}\n", a.n, a.seed, a.separability),
    )?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn parse_axes(specs: &[String]) -> Result<Vec<(String, Vec<String>)>, Failure> {
    specs
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| usage(anyhow!("grid axis `{s}` is not key=v1,v2")))?;
            Ok((k.trim().to_string(), v.split(',').map(|x| x.trim().to_string()).collect()))
        })
        .collect()
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut config = resolve_config(&a.config)?;
    let axes = parse_axes(&a.grid)?;
    let cells = if axes.is_empty() {
        Vec::new()
    } else {
        expand_grid(&config, &axes).map_err(usage)?
    };
    let (manifest, records) = load(&a.data)?;
    let dims = Dims::of(&manifest);
    let s = split(&config, &records)?;
    fs::create_dir_all(&a.out)?;

    if !cells.is_empty() {
        let result = grid_search(&cells, &s.train, &s.valid, dims)?;
        fs::write(a.out.join("grid.csv"), result.to_csv())?;
        let best = result.best();
        info!("grid winner: {} (validation loss {})", best.label, best.valid_loss);
        config = cells[best.index].config.clone();
    }
    prepare_out(&a.out, &config)?;

    let out = fit(&s.train, &s.valid, &config, dims)?;
    let ck = Checkpoint::of(&out.model, &out.rng);
    let digest = ck.save(&a.out.join("model.ckpt"))?;
    fs::write(a.out.join("train_report.json"), serde_json::to_string_pretty(&out.report)?)?;

    if !s.test.is_empty() {
        let scores = out.model.predict(&s.test)?;
        write_predictions(&a.out.join("test_predictions.csv"), &s.test, &scores)?;
        match bootstrap(&config, &scores, &s.test) {
            Ok(report) => write_metrics(&a.out, &report)?,
            Err(e) => warn!("test metrics skipped: {e}"),
        }
    }
    println!("checkpoint {} sha256 {digest}", a.out.join("model.ckpt").display());
    Ok(())
}

/// Loads a checkpoint, applies overrides, and checks it against the data.
fn restore(checkpoint: &Path, set: &[String], manifest: &DatasetManifest) -> Result<Model, Failure> {
    require_file(checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(checkpoint)?;
    let config = ck.config.with_overrides(set).map_err(usage)?;
    let dims = Dims::of(manifest);
    if dims != ck.dims {
        return Err(usage(anyhow!(
            "data dimensions {:?} do not match the checkpoint's {:?}",
            dims.tuple(),
            ck.dims.tuple()
        )));
    }
    Ok(Model::from_params(&config, ck.dims, ck.params)?)
}

pub fn eval(a: EvalArgs) -> Outcome {
    let (manifest, records) = load(&a.data)?;
    let model = restore(&a.checkpoint, &a.set, &manifest)?;
    prepare_out(&a.out, &model.config)?;
    let scores = model.predict(&records)?;
    write_predictions(&a.out.join("predictions.csv"), &records, &scores)?;
    let report = bootstrap(&model.config, &scores, &records)?;
    write_metrics(&a.out, &report)?;
    for s in &report.summaries {
        println!("{} {:.4} ± {:.4}", s.metric, s.mean, s.std);
    }
    Ok(())
}

pub fn stats(a: StatsArgs) -> Outcome {
    let (manifest, records) = load(&a.data)?;
    let model = restore(&a.checkpoint, &a.set, &manifest)?;
    prepare_out(&a.out, &model.config)?;
    let usage = model.token_usage(&records)?;
    fs::write(a.out.join("token_usage.csv"), usage.to_csv())?;
    println!("wrote {} rows to {}", usage.rows().len(), a.out.join("token_usage.csv").display());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Outcome {
    let base = resolve_config(&a.config)?;
    let names: Vec<String> = if a.variants.is_empty() {
        ABLATIONS.iter().map(|v| v.0.to_string()).collect()
    } else {
        a.variants.clone()
    };
    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    let mut variants = Vec::new();
    for name in &names {
        let delta = ablation(name).ok_or_else(|| {
            let known: Vec<&str> = ABLATIONS.iter().map(|v| v.0).collect();
            usage(anyhow!("unknown variant `{name}`; known: {}", known.join(", ")))
        })?;
        variants.push((name.as_str(), base.with_overrides(delta).map_err(usage)?));
    }
    let (manifest, records) = load(&a.data)?;
    let dims = Dims::of(&manifest);
    prepare_out(&a.out, &base)?;
    fs::create_dir_all(a.out.join("variants"))?;

    let mut rows = String::from("variant,seed,valid_loss,f1,pr_auc,roc_auc\n");
    let mut summary = String::from("variant,valid_loss,f1,pr_auc,roc_auc\n");
    for (name, cfg) in &variants {
        fs::write(a.out.join("variants").join(format!("{name}.toml")), cfg.to_toml())?;
        let mut acc = [0.0; 4];
        for &seed in &seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let s = split(&cfg, &records)?;
            let out = fit(&s.train, &s.valid, &cfg, dims)?;
            let scores = out.model.predict(&s.test)?;
            let report = bootstrap(&cfg, &scores, &s.test)?;
            let m = |k: &str| report.get(k).map(|x| x.mean).unwrap_or(f64::NAN);
            let loss = out.report.best_valid_loss.unwrap_or(f64::NAN);
            let vals = [loss, m("f1"), m("pr_auc"), m("roc_auc")];
            writeln!(rows, "{name},{seed},{},{},{},{}", vals[0], vals[1], vals[2], vals[3]).expect("string write");
            for (x, v) in acc.iter_mut().zip(vals) {
                *x += v / seeds.len() as f64;
            }
            info!("{name} seed {seed}: validation loss {loss:.4}, test ROC-AUC {:.4}", vals[3]);
        }
        writeln!(summary, "{name},{},{},{},{}", acc[0], acc[1], acc[2], acc[3]).expect("string write");
        println!("{name}: validation loss {:.4}, test ROC-AUC {:.4}", acc[0], acc[3]);
    }
    fs::write(a.out.join("ablation_runs.csv"), rows)?;
    fs::write(a.out.join("ablation.csv"), summary)?;
    Ok(())
}
