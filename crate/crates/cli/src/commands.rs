// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use causalgaze::dataio::{self, load_manifest, load_record, Dataset, Split, MANIFEST_FILE};
use causalgaze::detector::checkpoint;
use causalgaze::interpret::{causal_subgraph, export_dot, export_json, SubgraphOptions};
use causalgaze::seed::derive_seed;
use causalgaze::synth::{bayes_separability, generate_dataset};
use causalgaze::train::{evaluate, train, Metrics};
use causalgaze::verify::{full_suite, SuiteConfig};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::CliConfig;
use crate::exit::{io_failure, usage, verification};

pub const CHECKPOINT_FILE: &str = "checkpoint.cgzc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(|e| io_failure(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| io_failure(format!("cannot create {}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output types serialize to JSON") + "\n"
}

/// Accepts either a dataset directory or a manifest path.
fn load_dataset(cfg: &CliConfig) -> anyhow::Result<Dataset> {
    let data = cfg.require_data()?;
    let manifest = if data.is_dir() { data.join(MANIFEST_FILE) } else { data.to_path_buf() };
    let mut ds = load_manifest(&manifest).with_context(|| format!("loading dataset {}", manifest.display()))?;
    for note in &ds.count_mismatches {
        log::warn!("{note}");
    }
    if let Some(layer) = cfg.run.layer {
        ds.filter_layer(layer);
        info!("kept {} records from layer {layer}", ds.len());
    }
    Ok(ds)
}

pub fn synth(cfg: &CliConfig) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let ds = generate_dataset(&cfg.synth).map_err(|e| usage(e.to_string()))?;
    create_dir(out)?;
    let manifest = ds.save(out)?;
    let bayes = bayes_separability(&ds).map_err(|e| usage(e.to_string()))?;
    let counts: serde_json::Map<String, serde_json::Value> =
        ds.counts().into_iter().map(|(s, n)| (s.to_string(), n.into())).collect();
    print!(
        "{}",
        pretty(&json!({
            "manifest": manifest,
            "records": ds.len(),
            "counts": counts,
            "bayes_separability": bayes,
            "config": cfg.to_json(),
        }))
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    best_epoch: usize,
    best_monitor: f64,
    test: Option<Metrics>,
    config: serde_json::Value,
}

fn train_one(cfg: &CliConfig, ds: &Dataset, out: &Path) -> anyhow::Result<RunSummary> {
    create_dir(out)?;
    let outcome = train(ds, &cfg.detector, &cfg.train).context("training")?;
    let config = cfg.to_json();
    let metadata = json!({
        "config": config,
        "best_epoch": outcome.best_epoch,
        "best_monitor": outcome.best_monitor,
    });
    checkpoint::save(&out.join(CHECKPOINT_FILE), &outcome.params, &metadata)?;
    write(&out.join(METRICS_FILE), outcome.metrics_jsonl())?;
    let test = if ds.split(Split::Test).is_empty() {
        None
    } else {
        Some(evaluate(&outcome.params, ds, Split::Test)?)
    };
    let summary = RunSummary {
        seed: cfg.train.seed,
        best_epoch: outcome.best_epoch,
        best_monitor: outcome.best_monitor,
        test,
        config,
    };
    write(&out.join(RUN_FILE), pretty(&summary))?;
    Ok(summary)
}

/// Sample mean and (n - 1)-denominator standard deviation; 0 for one value.
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed of run `index` when several runs are requested.
pub fn run_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, "run", index as u64)
}

pub fn train_cmd(cfg: &CliConfig) -> anyhow::Result<()> {
    let out = cfg.require_out()?.to_path_buf();
    if cfg.run.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let ds = load_dataset(cfg)?;
    if cfg.run.runs == 1 {
        let s = train_one(cfg, &ds, &out)?;
        print!("{}", pretty(&json!({ "best_epoch": s.best_epoch, "best_monitor": s.best_monitor, "test": s.test })));
        return Ok(());
    }
    let mut tests = Vec::new();
    for i in 0..cfg.run.runs {
        let mut child = cfg.clone();
        child.train.seed = run_seed(cfg.train.seed, i);
        let dir: PathBuf = out.join(format!("run-{i}"));
        child.paths.out = Some(dir.clone());
        info!("run {i}: seed {}", child.train.seed);
        let s = train_one(&child, &ds, &dir)?;
        tests.extend(s.test);
    }
    if tests.is_empty() {
        println!("no test split; per-run outputs written under {}", out.display());
        return Ok(());
    }
    let (am, asd) = mean_stdev(&tests.iter().map(|m| m.auroc).collect::<Vec<_>>());
    let (fm, fsd) = mean_stdev(&tests.iter().map(|m| m.f1).collect::<Vec<_>>());
    println!("test over {} runs: auroc {am:.4} ± {asd:.4}, f1 {fm:.4} ± {fsd:.4}", tests.len());
    Ok(())
}

pub fn eval(cfg: &CliConfig, split: Split) -> anyhow::Result<()> {
    let ckpt = checkpoint::load(cfg.require_checkpoint()?)?;
    let ds = load_dataset(cfg)?;
    let m = evaluate(&ckpt.params, &ds, split).with_context(|| format!("evaluating the {split} split"))?;
    print!("{}", pretty(&m));
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn explain(cfg: &CliConfig, ids: &[String]) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    if ids.is_empty() {
        return Err(usage("at least one --id is required"));
    }
    let ds = load_dataset(cfg)?;
    let unknown: Vec<&str> = ids.iter().filter(|id| ds.get(id).is_none()).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(usage(format!("unknown sample id(s): {}", unknown.join(", "))));
    }
    let ckpt = checkpoint::load(cfg.require_checkpoint()?)?;
    let options = SubgraphOptions {
        node_quantile: cfg.explain.node_quantile,
        edge_floor: cfg.explain.edge_floor,
        target: cfg.explain.target,
        graph: cfg.explain.graph,
    };
    options.validate().map_err(|e| usage(e.to_string()))?;
    create_dir(out)?;
    let config_line = serde_json::to_string(&cfg.to_json()).expect("config serializes");
    for id in ids {
        let record = ds.get(id).expect("checked above");
        let report = causal_subgraph(record, &ckpt.params, &options).with_context(|| format!("explaining {id}"))?;
        let stem = out.join(file_stem(id));
        let dot = export_dot(&report, &record.tokens)?;
        write(&stem.with_extension("dot"), format!("// config: {config_line}\n{dot}"))?;
        let mut value: serde_json::Value = serde_json::from_str(&export_json(&report, &record.tokens)?)?;
        value["sample_id"] = json!(id);
        value["config"] = cfg.to_json();
        write(&stem.with_extension("json"), pretty(&value))?;
        println!("{id}: p_hallucination {:.6}, {} nodes, {} edges", report.prediction.p_hallucination, report.kept_nodes.len(), report.kept_edges.len());
    }
    Ok(())
}

pub fn inspect(cfg: &CliConfig, record: Option<&Path>, id: Option<&str>) -> anyhow::Result<()> {
    let rec = match (record, id) {
        (Some(path), None) => load_record(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(id)) => {
            let ds = load_dataset(cfg)?;
            ds.get(id).cloned().ok_or_else(|| usage(format!("unknown sample id: {id}")))?
        }
        _ => return Err(usage("give exactly one of a record path or --id (with --data)")),
    };
    let violations: Vec<String> = dataio::validate(&rec).iter().map(ToString::to_string).collect();
    print!(
        "{}",
        pretty(&json!({
            "sample_id": rec.sample_id,
            "tokens": rec.len(),
            "dim": rec.dim(),
            "label": rec.label,
            "model_id": rec.meta.model_id,
            "layer_index": rec.meta.layer_index,
            "valid": violations.is_empty(),
            "violations": violations,
        }))
    );
    Ok(())
}

pub fn gradcheck(suite: &SuiteConfig, json_out: Option<&Path>) -> anyhow::Result<()> {
    let report = full_suite(suite).context("running the gradient-check suite")?;
    for c in &report.checks {
        println!(
            "{} {:<28} max_rel {:.3e} tol {:.0e} coords {}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.coordinates
        );
    }
    println!("redraws {} elapsed {:.1}s", report.redraws, report.elapsed.as_secs_f64());
    if let Some(path) = json_out {
        write(path, pretty(&json!({ "suite": suite, "report": report })))?;
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(verification(format!("tolerance breached by: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_stdev_matches_hand_values() {
        assert_eq!(mean_stdev(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_stdev(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn run_seeds_are_distinct_and_fixed() {
        let s: Vec<u64> = (0..3).map(|i| run_seed(1, i)).collect();
        assert_eq!(s, (0..3).map(|i| run_seed(1, i)).collect::<Vec<_>>());
        assert!(s[0] != s[1] && s[1] != s[2]);
    }

    #[test]
    fn file_stems_are_sanitized() {
        assert_eq!(file_stem("a/b c-1_x"), "a_b_c-1_x");
    }
}
