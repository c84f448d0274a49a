use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use graphfnp::checkpoint::{config_hash, load_checkpoint, save_checkpoint, DirectorySink};
use graphfnp::eval::{
    default_temperature_grid, ece, explain, explain_rationale, logits_from_probs, predict_all, reliability_csv, softmax_rows, temperature_scale,
    to_dot, DecodedGraph, ExplainOptions, Metrics,
};
use graphfnp::graph::{discover_tu_name, generate_ba_motif_dataset, parse_tu_dataset, split, write_tu_dataset, DEFAULT_BA_NODES_RANGE};
use graphfnp::trainer::loss_csv;
use graphfnp::{evaluate, train, Ablation, Dataset, GraphFnp, TrainConfig};
use serde::Serialize;

use crate::manifest::{unix_now, RunManifest};
use crate::{Cli, Command, DataKind, EvalArgs, ExplainArgs, Failure, GenDataArgs, SplitChoice, TrainArgs};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(args) => gen_data(cli, args),
        Command::Train(args) => train_cmd(cli, args),
        Command::Eval(args) => eval_cmd(cli, args),
        Command::Explain(args) => explain_cmd(cli, args),
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn require_out(cli: &Cli) -> Result<&Path, Failure> {
    let out = cli.out.as_deref().ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

/// Config file (or defaults) with the global overrides applied.
fn load_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::from_toml_str(&text)?
        }
        None => TrainConfig::default(),
    };
    apply_overrides(cli, &mut cfg)?;
    Ok(cfg)
}

fn apply_overrides(cli: &Cli, cfg: &mut TrainConfig) -> Result<(), Failure> {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for name in &cli.ablation {
        let a: Ablation = name.parse().map_err(|e: graphfnp::Error| Failure::Usage(e.into()))?;
        cfg.ablation.insert(a);
    }
    cfg.validate()?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    let name = discover_tu_name(dir)?;
    Ok(parse_tu_dataset(dir, &name)?)
}

fn write_text(path: PathBuf, body: &str) -> Result<PathBuf, Failure> {
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<PathBuf, Failure> {
    let body = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    write_text(path, &body)
}

fn gen_data(cli: &Cli, args: &GenDataArgs) -> Result<(), Failure> {
    let started = unix_now();
    let out = require_out(cli)?;
    let seed = match &cli.config {
        Some(_) => cli.seed.unwrap_or(load_config(cli)?.seed),
        None => cli.seed.unwrap_or(0),
    };
    let ds = match args.kind {
        DataKind::BaMotif => {
            let range = match args.ba_nodes.as_deref() {
                Some(&[lo, hi]) => (lo, hi),
                _ => DEFAULT_BA_NODES_RANGE,
            };
            generate_ba_motif_dataset(args.count, range, seed).map_err(|e| Failure::Usage(e.into()))?
        }
        DataKind::Tu => {
            let dir = args.tu_dir.as_deref().ok_or_else(|| usage("--kind tu needs --tu-dir"))?;
            let name = match &args.tu_name {
                Some(n) => n.clone(),
                None => discover_tu_name(dir)?,
            };
            parse_tu_dataset(dir, &name)?
        }
    };
    write_tu_dataset(&ds, out)?;
    let mut manifest = RunManifest::new("gen-data", None, seed, started);
    manifest.dataset_fingerprint = Some(ds.fingerprint());
    manifest.output_paths = fs::read_dir(out)
        .context("listing output")?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    manifest.output_paths.sort();
    manifest.write(out)?;
    log::info!("wrote {} graphs ({}) to {}", ds.len(), ds.fingerprint(), out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> Result<(), Failure> {
    let started = unix_now();
    let mut cfg = load_config(cli)?;
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    let out = require_out(cli)?;
    let ds = load_dataset(&args.data)?;
    let fingerprint = ds.fingerprint();
    let (tr, va, _) = split(&ds, &cfg.split)?;
    let mut sink = DirectorySink::new(out.join("checkpoints"), &cfg, Some(fingerprint.clone()));
    let outcome = train(&tr, Some(&va), &cfg, &mut sink)?;
    let final_dir = save_checkpoint(&out.join("checkpoint"), &outcome.model, &cfg, cfg.epochs, Some(&fingerprint))?;
    let losses = write_text(out.join("losses.csv"), &loss_csv(&outcome.reports))?;

    let mut manifest = RunManifest::new("train", Some(&cfg), cfg.seed, started);
    manifest.dataset_fingerprint = Some(fingerprint);
    manifest.checkpoint_paths.push(final_dir.clone());
    manifest.checkpoint_paths.extend(sink.saved.iter().cloned());
    if sink.best_dir().exists() {
        manifest.checkpoint_paths.push(sink.best_dir());
    }
    manifest.metric_paths.push(losses);
    manifest.write(out)?;
    match outcome.best_val {
        Some((epoch, acc)) => log::info!("best validation accuracy {acc:.4} at epoch {epoch}"),
        None => log::info!("no validation epochs run"),
    }
    log::info!("final checkpoint in {}", final_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    split: String,
    #[serde(flatten)]
    metrics: Metrics,
    temperature: Option<f64>,
    ece_raw: f64,
    ece_scaled: Option<f64>,
}

fn pick_split(ds: &Dataset, cfg: &TrainConfig, choice: SplitChoice) -> Result<(Dataset, Dataset), Failure> {
    let (tr, va, te) = split(ds, &cfg.split)?;
    let chosen = match choice {
        SplitChoice::Train => tr,
        SplitChoice::Val => va.clone(),
        SplitChoice::Test => te,
        SplitChoice::All => ds.clone(),
    };
    Ok((chosen, va))
}

/// The checkpoint's config, checked against `--config` when one is given.
fn checkpoint_config(cli: &Cli, stored: &TrainConfig, stored_hash: &str) -> Result<TrainConfig, Failure> {
    if cli.config.is_some() {
        let given = load_config(cli)?;
        if config_hash(&given) != stored_hash {
            return Err(Failure::Runtime(anyhow!("config does not match the checkpoint (hash {} vs {stored_hash})", config_hash(&given))));
        }
    }
    let mut cfg = stored.clone();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn eval_cmd(cli: &Cli, args: &EvalArgs) -> Result<(), Failure> {
    let started = unix_now();
    let out = require_out(cli)?;
    let (model, stored) = load_checkpoint(&args.checkpoint)?;
    let cfg = checkpoint_config(cli, &stored.config, &stored.config_hash)?;
    let ds = load_dataset(&args.data)?;
    if stored.dataset_fingerprint.as_deref().is_some_and(|f| f != ds.fingerprint()) {
        log::warn!("dataset differs from the one the checkpoint was trained on");
    }
    let (target, val) = pick_split(&ds, &cfg, args.split)?;
    let metrics = evaluate(&model, &target, &cfg)?;
    let (temperature, ece_scaled) = if args.temperature_scale {
        let (t, scaled) = scaled_ece(&model, &val, &target, &metrics, &cfg)?;
        (Some(t), Some(scaled))
    } else {
        (None, None)
    };
    let reliability = write_text(out.join("reliability.csv"), &reliability_csv(&metrics.calibration))?;
    let report = EvalReport {
        checkpoint: args.checkpoint.clone(),
        split: format!("{:?}", args.split).to_lowercase(),
        ece_raw: metrics.ece,
        metrics,
        temperature,
        ece_scaled,
    };
    let metrics_path = write_json(out.join("metrics.json"), &report)?;
    let mut manifest = RunManifest::new("eval", Some(&cfg), cfg.seed, started);
    manifest.dataset_fingerprint = Some(ds.fingerprint());
    manifest.checkpoint_paths.push(args.checkpoint.clone());
    manifest.metric_paths = vec![metrics_path, reliability];
    manifest.write(out)?;
    log::info!("accuracy {:.4}, ece {:.4}", report.metrics.accuracy, report.ece_raw);
    Ok(())
}

/// Fits a temperature on `val` and recomputes the calibration of `target`.
fn scaled_ece(model: &GraphFnp, val: &Dataset, target: &Dataset, metrics: &Metrics, cfg: &TrainConfig) -> Result<(f64, f64), Failure> {
    let val_out = predict_all(model, val, cfg.mc_samples_eval, cfg.seed)?;
    let val_probs: Vec<Vec<f64>> = val_out.iter().map(|o| o.mean_probs.clone()).collect();
    let labels: Vec<usize> = val.graphs.iter().map(|g| g.label).collect();
    let t = temperature_scale(&logits_from_probs(&val_probs), &labels, &default_temperature_grid())?;
    let probs: Vec<Vec<f64>> = metrics.graphs.iter().map(|r| r.mean_probs.clone()).collect();
    let scaled = softmax_rows(&logits_from_probs(&probs), t);
    let confidences: Vec<f64> = scaled.rows().into_iter().map(|r| r.fold(0.0, |m: f64, &x| m.max(x))).collect();
    let correct: Vec<bool> = target.graphs.iter().zip(&metrics.graphs).map(|(g, r)| g.label == r.predicted_label).collect();
    Ok((t, ece(&confidences, &correct, cfg.ece_bins)?.ece))
}

fn explain_cmd(cli: &Cli, args: &ExplainArgs) -> Result<(), Failure> {
    let started = unix_now();
    let out = require_out(cli)?;
    let (model, stored) = load_checkpoint(&args.checkpoint)?;
    let cfg = checkpoint_config(cli, &stored.config, &stored.config_hash)?;
    model.require_rationales()?;
    let mut manifest = RunManifest::new("explain", Some(&cfg), cfg.seed, started);
    manifest.checkpoint_paths.push(args.checkpoint.clone());
    let decoded: Vec<DecodedGraph> = match (args.rationale_index, &args.graph_id) {
        (Some(index), _) => {
            let record = explain_rationale(&model, index, args.decodes, cfg.seed, cfg.max_nodes)?;
            manifest.output_paths.push(write_json(out.join("explanation.json"), &record)?);
            record.decoded
        }
        (None, Some(id)) => {
            let data = args.data.as_deref().ok_or_else(|| usage("--graph-id needs --data"))?;
            let ds = load_dataset(data)?;
            let graph = ds.find(id).ok_or_else(|| Failure::Runtime(anyhow!("unknown graph id {id:?}")))?;
            manifest.dataset_fingerprint = Some(ds.fingerprint());
            let record = explain(&model, graph, args.decodes, cfg.seed, &ExplainOptions::from(&cfg))?;
            manifest.output_paths.push(write_json(out.join("explanation.json"), &record)?);
            record.decoded
        }
        (None, None) => return Err(usage("give --graph-id or --rationale-index")),
    };
    for (k, g) in decoded.iter().enumerate() {
        manifest.output_paths.push(write_text(out.join(format!("decoded_{k}.dot")), &to_dot(g))?);
    }
    manifest.write(out)?;
    log::info!("wrote {} decoded graphs to {}", decoded.len(), out.display());
    Ok(())
}
