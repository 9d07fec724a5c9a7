//! The five pipeline commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use msinet_core::data::{generate_synthetic, load_manifest, write_atomic, write_dataset, IdentityDataset};
use msinet_core::eval::{evaluate, RetrievalResult};
use msinet_core::losses::SamConfig;
use msinet_core::seed;
use msinet_core::space::{ArchDescriptor, SpaceConfig};
use msinet_core::tcm::{run_search, SearchConfig};
use msinet_core::train::{load_checkpoint, save_checkpoint, train_model, training_labels, Model, TrainConfig};
use msinet_core::{Error, Result};
use serde::Serialize;

use crate::config::{ArchChoice, RunConfig, SweepAxis};
use crate::metrics::{JsonLog, RunLogs};
use crate::CliError;

pub const CONFIG_ECHO: &str = "config.txt";
pub const DESCRIPTOR: &str = "descriptor.txt";
pub const ALPHA_HISTORY: &str = "alpha_history.txt";
pub const TRAIN_DESCRIPTOR: &str = "arch.txt";
pub const INIT_CHECKPOINT: &str = "init.json";
pub const CHECKPOINT: &str = "model.json";
pub const EVAL_RESULT: &str = "eval.json";
pub const SWEEP_SUMMARY: &str = "sweep.jsonl";

/// Loads the manifest named by the config, or generates the synthetic set.
pub fn load_dataset(cfg: &RunConfig) -> Result<IdentityDataset> {
    match &cfg.manifest {
        Some(path) => load_manifest(path),
        None => generate_synthetic(&cfg.data),
    }
}

/// The configured network shape at the dataset's image size.
pub fn space_for(cfg: &RunConfig, ds: &IdentityDataset) -> Result<SpaceConfig> {
    let space = SpaceConfig { height: ds.height, width: ds.width, ..cfg.space.clone() };
    space.validate()?;
    Ok(space)
}

fn prepare(out: &Path, cfg: &RunConfig) -> Result<RunLogs> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(CONFIG_ECHO), cfg.to_text().as_bytes())?;
    RunLogs::open(out)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> std::result::Result<PathBuf, CliError> {
    if cfg.manifest.is_some() {
        return Err(CliError::Config("data.manifest: gen-data only generates synthetic data".into()));
    }
    prepare(out, cfg)?;
    let ds = generate_synthetic(&cfg.data)?;
    let manifest = write_dataset(&out.join("data"), &ds)?;
    log::info!("wrote {} images to {}", ds.len(), manifest.display());
    Ok(manifest)
}

pub fn search(cfg: &RunConfig, out: &Path) -> Result<ArchDescriptor> {
    let mut logs = prepare(out, cfg)?;
    let ds = load_dataset(cfg)?;
    let s = &cfg.search;
    let scfg = SearchConfig {
        space: space_for(cfg, &ds)?,
        epochs: s.epochs,
        lr_weights: s.lr_weights,
        lr_arch: s.lr_arch,
        momentum: s.momentum,
        weight_decay: s.weight_decay,
        arch_betas: (s.arch_beta1, s.arch_beta2),
        tau: s.tau,
        beta: s.beta,
        p: s.p,
        k: s.k,
        split: cfg.split_config(),
        scheme: s.scheme,
        policy: s.policy,
        seed: cfg.seed,
    };
    let start = Instant::now();
    let history_path = out.join(ALPHA_HISTORY);
    let mut history = String::new();
    let mut failure = None;
    let outcome = run_search(&ds, &scfg, |epoch, losses, alpha| {
        if failure.is_some() {
            return;
        }
        let line: Vec<String> = alpha.iter().map(|v| v.to_string()).collect();
        writeln!(history, "{}", line.join(" ")).unwrap();
        let metrics = BTreeMap::from([("train_loss".into(), losses.train), ("val_loss".into(), losses.val)]);
        let step = write_atomic(&history_path, history.as_bytes())
            .and_then(|()| logs.record("search", epoch, metrics, start.elapsed().as_secs_f64()));
        if let Err(e) = step {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    write_atomic(&out.join(DESCRIPTOR), outcome.descriptor.to_text().as_bytes())?;
    log::info!("searched architecture {}", outcome.descriptor.ops_string());
    Ok(outcome.descriptor)
}

/// The descriptor `train` builds, at the configured shape.
pub fn resolve_arch(cfg: &RunConfig, space: &SpaceConfig) -> Result<ArchDescriptor> {
    Ok(match &cfg.train.arch {
        ArchChoice::Msinet => ArchDescriptor::msinet(space),
        ArchChoice::Random => ArchDescriptor::random(space, &mut seed::rng(cfg.seed, &[50])),
        ArchChoice::Fixed(op) => ArchDescriptor::uniform(*op, space),
        ArchChoice::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ArchDescriptor::parse(&text).map_err(|e| match e {
                Error::Parse { line, msg, .. } => Error::Parse { path: path.clone(), line, msg },
                other => other,
            })?
        }
    })
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        epochs: t.epochs,
        lr: t.lr,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        margin: t.margin,
        sam: SamConfig { mode: t.sam_mode, lambda: t.sam_lambda },
        p: t.p,
        k: t.k,
        policy: t.policy,
        seed: cfg.seed,
    }
}

/// Trains `descriptor` (or the configured architecture); saves the
/// initial and final checkpoints.
pub fn train(cfg: &RunConfig, out: &Path, descriptor: Option<ArchDescriptor>) -> Result<Model> {
    let mut logs = prepare(out, cfg)?;
    let ds = load_dataset(cfg)?;
    let space = space_for(cfg, &ds)?;
    let descriptor = match descriptor {
        Some(d) => d,
        None => resolve_arch(cfg, &space)?,
    };
    write_atomic(&out.join(TRAIN_DESCRIPTOR), descriptor.to_text().as_bytes())?;
    let (_, labels) = training_labels(&ds);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut model = Model::new(&descriptor, &space, classes, cfg.train.sam_mode, cfg.seed)?;
    save_checkpoint(&out.join(INIT_CHECKPOINT), &model)?;
    let start = Instant::now();
    let mut failure = None;
    train_model(&ds, &mut model, &train_config(cfg), |s| {
        if failure.is_some() {
            return;
        }
        let mut metrics = BTreeMap::from([
            ("lr".to_string(), s.lr),
            ("loss".to_string(), s.loss),
            ("id".to_string(), s.id),
            ("triplet".to_string(), s.triplet),
        ]);
        if let Some(sam) = s.sam {
            metrics.insert("sam".into(), sam);
        }
        if let Err(e) = logs.record("train", s.epoch, metrics, start.elapsed().as_secs_f64()) {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    save_checkpoint(&out.join(CHECKPOINT), &model)?;
    Ok(model)
}

/// Evaluates the configured checkpoint on the probe/gallery split.
pub fn eval(cfg: &RunConfig, out: &Path) -> Result<RetrievalResult> {
    let mut logs = prepare(out, cfg)?;
    let ds = load_dataset(cfg)?;
    let path = out.join(&cfg.checkpoint);
    let model = load_checkpoint(&path)?;
    let start = Instant::now();
    let res = evaluate(&model.net, &model.ps, &ds, cfg.max_rank)?;
    let json = serde_json::to_string(&res).map_err(|e| Error::Internal(format!("result encoding: {e}")))?;
    write_atomic(&out.join(EVAL_RESULT), format!("{json}\n").as_bytes())?;
    logs.record("eval", 0, result_metrics(&res), start.elapsed().as_secs_f64())?;
    Ok(res)
}

fn result_metrics(res: &RetrievalResult) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::from([
        ("map".to_string(), res.map),
        ("rank1".to_string(), res.rank1()),
        ("valid_queries".to_string(), res.num_valid_queries as f64),
    ]);
    if res.cmc.len() >= 5 {
        m.insert("rank5".into(), res.cmc[4]);
    }
    m
}

#[derive(Serialize)]
struct SweepRecord<'a> {
    axis: String,
    value: &'a str,
    descriptor: String,
    map: f64,
    rank1: f64,
}

/// Applies one sweep value to a copy of the config.
pub fn sweep_point(cfg: &RunConfig, axis: SweepAxis, value: &str) -> std::result::Result<RunConfig, CliError> {
    let mut point = cfg.clone();
    let bad = |msg: String| CliError::Config(format!("sweep.values: {value:?}: {msg}"));
    match axis {
        SweepAxis::Rho => point.set("space.rho", value).map_err(bad)?,
        SweepAxis::Lambda => point.set("train.sam_lambda", value).map_err(bad)?,
        SweepAxis::Fusion => point.set("space.fusion", value).map_err(bad)?,
        SweepAxis::Overlap => {
            let (tr, va) = value.split_once('/').ok_or_else(|| bad("expected train/val percentages".into()))?;
            point.set("split.train_pct", tr).map_err(bad)?;
            point.set("split.val_pct", va).map_err(bad)?;
        }
    }
    point.sweep_axis = None;
    point.sweep_values.clear();
    point.validate().map_err(|(k, m)| bad(format!("{k}: {m}")))?;
    Ok(point)
}

/// Runs train and eval (with a search first for the overlap axis) for every
/// value of the sweep axis, each in its own subdirectory.
pub fn sweep(cfg: &RunConfig, out: &Path) -> std::result::Result<Vec<RetrievalResult>, CliError> {
    let axis = cfg.sweep_axis.ok_or_else(|| CliError::Config("sweep.axis: required by the sweep command".into()))?;
    let points = cfg.sweep_values.iter().map(|v| sweep_point(cfg, axis, v)).collect::<std::result::Result<Vec<_>, _>>()?;
    prepare(out, cfg)?;
    let mut summary = JsonLog::open(&out.join(SWEEP_SUMMARY))?;
    let mut results = Vec::new();
    for (i, (value, point)) in cfg.sweep_values.iter().zip(&points).enumerate() {
        let dir = out.join(format!("{axis}-{}", value.replace('/', "-")));
        log::info!("sweep {axis}={value} in {}", dir.display());
        let ds = load_dataset(point)?;
        let space = space_for(point, &ds)?;
        let mut descriptor = match axis {
            SweepAxis::Overlap => search(point, &dir)?,
            _ => resolve_arch(point, &space)?,
        };
        // a descriptor file fixes its own shape; the swept field still wins
        match axis {
            SweepAxis::Rho => descriptor.rho = space.rho,
            SweepAxis::Fusion => descriptor.fusion = space.fusion,
            SweepAxis::Lambda | SweepAxis::Overlap => {}
        }
        train(point, &dir, Some(descriptor.clone()))?;
        let res = eval(point, &dir)?;
        let record = SweepRecord {
            axis: axis.to_string(),
            value,
            descriptor: descriptor.ops_string(),
            map: res.map,
            rank1: res.rank1(),
        };
        summary.push(&axis.to_string(), i, &record)?;
        results.push(res);
    }
    Ok(results)
}
