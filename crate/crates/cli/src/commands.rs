use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use atriaseg::infer::{postprocess, predict_case, threshold_argmax, Model};
use atriaseg::metrics::{comparison_table, evaluate_manifest, prediction_file_name, MetricsReport};
use atriaseg::synth::{generate, write_dataset};
use atriaseg::train::{train_bagging, train_loop, TrainOptions, BEST_CHECKPOINT};
use atriaseg::volume::{load_manifest, load_volume, CaseRecord};
use atriaseg::{Error, Result};
use serde::Serialize;

use crate::config::{io, RunConfig};

/// Runtime switches that never change what a command computes.
#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub force: bool,
    pub resume: bool,
    pub workers: usize,
    /// Single worker and no wall-clock values in written files.
    pub strict_repro: bool,
    pub quiet: bool,
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory".into()))
}

fn manifest(cfg: &RunConfig) -> Result<Vec<CaseRecord>> {
    let path = cfg
        .paths
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset manifest given (--manifest or paths.manifest)".into()))?;
    load_manifest(path)
}

fn is_non_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    if is_non_empty_dir(dir) {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

pub fn synth(cfg: &RunConfig, flags: &RunFlags) -> Result<PathBuf> {
    cfg.synth.validate()?;
    let dir = out_dir(cfg)?;
    claim_dir(dir, flags.force)?;
    let phantoms = generate(&cfg.synth)?;
    let manifest = write_dataset(&phantoms, dir)?;
    cfg.write_resolved(dir)?;
    println!("{}", manifest.display());
    Ok(manifest)
}

pub fn train(cfg: &RunConfig, flags: &RunFlags) -> Result<Vec<PathBuf>> {
    cfg.train.validate()?;
    if let Some(n) = cfg.bagging {
        if n < 2 {
            return Err(Error::Config(format!("--bagging needs at least 2 models, got {n}")));
        }
    }
    let cases = manifest(cfg)?;
    let dir = out_dir(cfg)?;
    if flags.resume {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    } else {
        claim_dir(dir, flags.force)?;
    }
    cfg.write_resolved(dir)?;
    let opts = TrainOptions {
        resume: flags.resume,
        workers: if flags.strict_repro { 1 } else { flags.workers.max(1) },
        verbose: !flags.quiet,
        ..TrainOptions::new(dir)
    };
    let outcomes = match cfg.bagging {
        Some(n) => train_bagging(&cases, &cfg.train, n, &opts)?,
        None => vec![train_loop(&cases, &cfg.train, &opts)?],
    };
    let mut best = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        println!(
            "{}: best val dice {:.4}, final {}",
            o.best_checkpoint().display(),
            o.best_val_dice,
            o.final_checkpoint().display()
        );
        best.push(o.best_checkpoint());
    }
    Ok(best)
}

/// A directory stands for its `best.ckpt`, or for every `model_*/best.ckpt`
/// of a bagging run.
pub fn resolve_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let own = p.join(BEST_CHECKPOINT);
        if own.is_file() {
            out.push(own);
            continue;
        }
        let mut members: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| io(p, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("model_"))
            .map(|e| e.path().join(BEST_CHECKPOINT))
            .filter(|c| c.is_file())
            .collect();
        if members.is_empty() {
            return Err(Error::Checkpoint(format!("{} holds no checkpoint", p.display())));
        }
        members.sort();
        out.extend(members);
    }
    if out.is_empty() {
        return Err(Error::Config("no checkpoint given (--checkpoint)".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct CaseOutput<'a> {
    case_id: &'a str,
    ablation_probability: f64,
    predicted_label: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    runtime_ms: Option<f64>,
}

pub fn infer(cfg: &RunConfig, flags: &RunFlags) -> Result<()> {
    let checkpoints = resolve_checkpoints(&cfg.paths.checkpoints)?;
    let models = checkpoints
        .iter()
        .map(|p| Model::load(p))
        .collect::<Result<Vec<_>>>()?;
    let cases = manifest(cfg)?;
    let dir = out_dir(cfg)?;
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    cfg.write_resolved(dir)?;
    for case in &cases {
        let start = Instant::now();
        let volume = load_volume(&case.volume)?;
        let pred = predict_case(&models, &volume)?;
        let mask = if cfg.infer.apply_postprocess {
            postprocess(&pred.probability, &cfg.infer.postprocess)?
        } else {
            threshold_argmax(&pred.probability)
        };
        mask.save(dir.join(prediction_file_name(&case.case_id)))?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let record = CaseOutput {
            case_id: &case.case_id,
            ablation_probability: pred.ablation_probability,
            predicted_label: pred.ablation().as_str(),
            runtime_ms: (!flags.strict_repro).then_some(ms),
        };
        let jpath = dir.join(format!("{}.json", case.case_id));
        fs::write(&jpath, serde_json::to_vec_pretty(&record)?).map_err(|e| io(&jpath, e))?;
        println!(
            "{}  {}  p={:.3}  {:.0} ms",
            case.case_id, record.predicted_label, record.ablation_probability, ms
        );
    }
    Ok(())
}

fn label_for(dir: &Path, i: usize, labels: &[String]) -> String {
    labels.get(i).cloned().unwrap_or_else(|| {
        dir.file_name()
            .map_or_else(|| format!("run{i}"), |n| n.to_string_lossy().into_owned())
    })
}

/// Scores each prediction directory; returns `(label, report)` pairs.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<(String, MetricsReport)>> {
    let preds = &cfg.paths.predictions;
    if preds.is_empty() {
        return Err(Error::Config("no prediction directory given (--pred)".into()));
    }
    if cfg.paths.labels.len() > preds.len() {
        return Err(Error::Config("more --label values than --pred directories".into()));
    }
    let cases = manifest(cfg)?;
    let dir = out_dir(cfg)?;
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    cfg.write_resolved(dir)?;
    let mut reports = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let label = label_for(p, i, &cfg.paths.labels);
        if reports.iter().any(|(l, _)| l == &label) {
            return Err(Error::Config(format!("duplicate report label `{label}`")));
        }
        let report = evaluate_manifest(p, &cases)?;
        let table = report.to_table();
        let jpath = dir.join(format!("{label}.metrics.json"));
        fs::write(&jpath, serde_json::to_vec_pretty(&report)?).map_err(|e| io(&jpath, e))?;
        let tpath = dir.join(format!("{label}.table.txt"));
        fs::write(&tpath, &table).map_err(|e| io(&tpath, e))?;
        println!("{label}\n{table}");
        reports.push((label, report));
    }
    if reports.len() > 1 {
        let rows: Vec<(&str, &MetricsReport)> = reports.iter().map(|(l, r)| (l.as_str(), r)).collect();
        let table = comparison_table(&rows);
        let path = dir.join("comparison.txt");
        fs::write(&path, &table).map_err(|e| io(&path, e))?;
        println!("{table}");
    }
    Ok(reports)
}
