//! Experiment execution and trace/summary emission.

use crate::config::{Experiment, Method};
use anyhow::{Context, Result};
use flute_core::fedrep::fedrep_train;
use flute_core::flute::{flute_train, GradientMode};
use flute_core::general::{general_flute_train, GeneralRecord};
use flute_core::metrics::RoundRecord;
use flute_core::synth::{make_classification_tasks, make_client_shards, make_ground_truth};
use serde_json::{json, Value};
use std::fs;
use std::path::Path;

/// Per-seed trace, one variant per CSV schema.
#[derive(Debug, Clone)]
pub enum SeedTrace {
    Linear(Vec<RoundRecord>),
    General(Vec<GeneralRecord>),
}

/// Outcome of a full multi-seed run.
#[derive(Debug)]
pub struct RunOutcome {
    pub summary: Value,
    /// Seeds whose trace hit non-finite values and was truncated.
    pub nonfinite_seeds: Vec<u64>,
}

/// Run one seed of the configured experiment.
pub fn run_seed(exp: &Experiment, seed: u64) -> Result<SeedTrace> {
    match exp.method {
        Method::Flute => {
            let p = exp.problem.as_ref().expect("validated");
            let gt = make_ground_truth(p.d, p.clients, seed)?;
            let cfg = exp.flute_config(seed);
            let shards = if cfg.mode == GradientMode::Empirical {
                Some(make_client_shards(&gt, p.samples, p.sigma2, seed))
            } else {
                None
            };
            let (_, trace) = flute_train(&cfg, &gt, shards.as_deref(), p.k)?;
            Ok(SeedTrace::Linear(trace))
        }
        Method::Fedrep | Method::FedrepRi => {
            let p = exp.problem.as_ref().expect("validated");
            let gt = make_ground_truth(p.d, p.clients, seed)?;
            let shards = make_client_shards(&gt, p.samples, p.sigma2, seed);
            let cfg = exp.fedrep_config(seed);
            let run = fedrep_train(&cfg, &gt, &shards, p.k)?;
            Ok(SeedTrace::Linear(run.trace))
        }
        Method::GeneralFlute => {
            let c = exp.classification.as_ref().expect("validated");
            let shards = make_classification_tasks(
                c.classes,
                c.classes_per_client,
                c.clients,
                c.samples_per_class,
                c.dim,
                c.separation,
                seed,
            )?;
            let cfg = exp.general_config(seed);
            let (_, trace) = general_flute_train(&cfg, &shards)?;
            Ok(SeedTrace::General(trace))
        }
    }
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// CSV body for the linear methods, fixed column order, 17 significant
/// digits per float.
pub fn linear_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(
        "t,avg_err_gt,avg_err_opt,frob_to_opt,in_R,in_Rs,inv_snr,d_spec,q_norm,q_tilde_norm\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            f(r.avg_err_gt),
            f(r.avg_err_opt),
            f(r.frob_to_opt),
            flag(r.in_r),
            flag(r.in_rs),
            r.inv_snr.csv_token(),
            f(r.d_spec),
            f(r.q_norm),
            f(r.q_tilde_norm),
        ));
    }
    out
}

/// CSV body for the general method.
pub fn general_csv(records: &[GeneralRecord]) -> String {
    let mut out = String::from("t,acc,global_nc2,local_nc2\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.round,
            f(r.accuracy),
            f(r.global_nc2),
            f(r.local_nc2),
        ));
    }
    out
}

fn linear_row_finite(r: &RoundRecord) -> bool {
    // The inverse-SNR sentinel is a legitimate value, not a failure.
    [r.avg_err_gt, r.avg_err_opt, r.frob_to_opt, r.d_spec, r.q_norm, r.q_tilde_norm]
        .iter()
        .all(|v| v.is_finite())
}

fn general_row_finite(r: &GeneralRecord) -> bool {
    r.accuracy.is_finite() && r.global_nc2.is_finite()
}

/// Truncate a trace at the first non-finite row. Returns whether anything
/// was dropped.
fn truncate_nonfinite(trace: &mut SeedTrace) -> bool {
    match trace {
        SeedTrace::Linear(rows) => {
            if let Some(pos) = rows.iter().position(|r| !linear_row_finite(r)) {
                rows.truncate(pos);
                true
            } else {
                false
            }
        }
        SeedTrace::General(rows) => {
            if let Some(pos) = rows.iter().position(|r| !general_row_finite(r)) {
                rows.truncate(pos);
                true
            } else {
                false
            }
        }
    }
}

fn stats(values: &mut Vec<f64>) -> Value {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    json!({ "median": median, "mean": mean, "std": var.sqrt() })
}

/// Across-seed per-round statistics for one named metric. Rounds missing
/// from any seed (truncated traces) are skipped.
fn per_round_stats(per_seed: &[Vec<(usize, f64)>]) -> Value {
    let mut rows = Vec::new();
    if let Some(first) = per_seed.first() {
        for &(t, _) in first {
            let mut vals: Vec<f64> = Vec::with_capacity(per_seed.len());
            let mut complete = true;
            for seed_rows in per_seed {
                match seed_rows.iter().find(|(tt, _)| *tt == t) {
                    Some((_, v)) => vals.push(*v),
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                let mut entry = stats(&mut vals);
                entry["t"] = json!(t);
                rows.push(entry);
            }
        }
    }
    Value::Array(rows)
}

/// Run every seed, write one CSV per seed plus `summary.json` into
/// `out_dir`, and return the summary. Non-finite traces are truncated and
/// reported in the outcome.
pub fn run_experiment(exp: &Experiment, out_dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let mut traces = Vec::new();
    let mut nonfinite_seeds = Vec::new();
    for &seed in &exp.seeds {
        let mut trace = run_seed(exp, seed)?;
        if truncate_nonfinite(&mut trace) {
            nonfinite_seeds.push(seed);
        }
        let csv = match &trace {
            SeedTrace::Linear(rows) => linear_csv(rows),
            SeedTrace::General(rows) => general_csv(rows),
        };
        let path = out_dir.join(format!("{}_seed{}.csv", exp.method.name(), seed));
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        traces.push((seed, trace));
    }

    let metric_names: &[&str] = if exp.method.is_linear() {
        &["avg_err_gt", "avg_err_opt", "frob_to_opt"]
    } else {
        &["acc", "global_nc2", "local_nc2"]
    };
    let extract = |trace: &SeedTrace, name: &str| -> Vec<(usize, f64)> {
        match trace {
            SeedTrace::Linear(rows) => rows
                .iter()
                .map(|r| {
                    let v = match name {
                        "avg_err_gt" => r.avg_err_gt,
                        "avg_err_opt" => r.avg_err_opt,
                        _ => r.frob_to_opt,
                    };
                    (r.round, v)
                })
                .collect(),
            SeedTrace::General(rows) => rows
                .iter()
                .map(|r| {
                    let v = match name {
                        "acc" => r.accuracy,
                        "global_nc2" => r.global_nc2,
                        _ => r.local_nc2,
                    };
                    (r.round, v)
                })
                .collect(),
        }
    };

    let mut per_seed_final = serde_json::Map::new();
    for (seed, trace) in &traces {
        let mut entry = serde_json::Map::new();
        for name in metric_names {
            if let Some(&(t, v)) = extract(trace, name).last() {
                entry.insert("t".to_string(), json!(t));
                entry.insert(name.to_string(), json!(v));
            }
        }
        per_seed_final.insert(seed.to_string(), Value::Object(entry));
    }

    let mut across = serde_json::Map::new();
    for name in metric_names {
        let per_seed: Vec<Vec<(usize, f64)>> =
            traces.iter().map(|(_, tr)| extract(tr, name)).collect();
        across.insert(name.to_string(), per_round_stats(&per_seed));
    }

    let summary = json!({
        "method": exp.method.name(),
        "rounds": exp.rounds,
        "seeds": exp.seeds,
        "record_stride": exp.record_stride,
        "overparameterized": exp.overparameterized,
        "nonfinite_seeds": nonfinite_seeds,
        "per_seed_final": Value::Object(per_seed_final),
        "across_seeds": Value::Object(across),
    });
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(RunOutcome {
        summary,
        nonfinite_seeds,
    })
}
