//! Metric emission and recomputation: the per-epoch CSV stream, the summary
//! file, per-run probe streams, and the `report` verb's recompute path.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! the CSV back recovers bit-identical values and re-running a seeded config
//! reproduces the bytes exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};

use super::protocols::ExperimentResult;
use super::runner::RunRecord;

pub const CSV_HEADER: &str =
    "run_id,seed,protocol,sweep_key,phase,epoch,step,train_loss,train_acc,test_acc,lr,wallclock_s";

/// Renders all per-epoch rows of all runs, in run order.
pub fn metrics_csv(runs: &[RunRecord]) -> Result<String> {
    if runs.is_empty() || runs.iter().all(|r| r.rows.is_empty()) {
        return Err(Error::Contract("no records to emit".into()));
    }
    let mut out = String::with_capacity(64 * 1024);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for run in runs {
        for row in &run.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.run_id,
                row.seed,
                row.protocol,
                row.sweep_key,
                row.phase,
                row.epoch,
                row.step,
                row.train_loss,
                row.train_acc,
                row.test_acc,
                row.lr,
                row.wallclock_s,
            ));
        }
    }
    Ok(out)
}

/// One parsed line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub run_id: String,
    pub seed: u64,
    pub protocol: String,
    pub sweep_key: String,
    pub phase: String,
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wallclock_s: f64,
}

/// Parses a metrics CSV; malformed input is a format error, never a panic.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad metrics header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Format(format!(
                "line {}: expected 12 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let err = |what: &str| Error::Format(format!("line {}: bad {what}", lineno + 2));
        rows.push(CsvRow {
            run_id: fields[0].to_string(),
            seed: fields[1].parse().map_err(|_| err("seed"))?,
            protocol: fields[2].to_string(),
            sweep_key: fields[3].to_string(),
            phase: fields[4].to_string(),
            epoch: fields[5].parse().map_err(|_| err("epoch"))?,
            step: fields[6].parse().map_err(|_| err("step"))?,
            train_loss: fields[7].parse().map_err(|_| err("train_loss"))?,
            train_acc: fields[8].parse().map_err(|_| err("train_acc"))?,
            test_acc: fields[9].parse().map_err(|_| err("test_acc"))?,
            lr: fields[10].parse().map_err(|_| err("lr"))?,
            wallclock_s: fields[11].parse().map_err(|_| err("wallclock_s"))?,
        });
    }
    Ok(rows)
}

/// Recomputes each run's last-K mean test accuracy over its final phase.
pub fn recompute_last_k(rows: &[CsvRow], k: usize) -> BTreeMap<String, f64> {
    let mut by_run: BTreeMap<String, Vec<&CsvRow>> = BTreeMap::new();
    for row in rows {
        by_run.entry(row.run_id.clone()).or_default().push(row);
    }
    let mut out = BTreeMap::new();
    for (run_id, rows) in by_run {
        let final_phase = &rows.last().unwrap().phase;
        let series: Vec<f64> = rows
            .iter()
            .filter(|r| &r.phase == final_phase)
            .map(|r| r.test_acc)
            .collect();
        let k = k.min(series.len()).max(1);
        let mean = series[series.len() - k..].iter().sum::<f64>() / k as f64;
        out.insert(run_id, mean);
    }
    out
}

pub fn summary_json(result: &ExperimentResult) -> serde_json::Value {
    json!({
        "protocol": result.config.protocol.name(),
        "master_seed": result.config.master_seed,
        "last_k": result.config.resolved_last_k(),
        "diverged_runs": result.diverged_count(),
        "runs": result.runs.iter().map(|r| json!({
            "run_id": r.run_id,
            "seed": r.seed,
            "arm": r.arm,
            "sweep_key": r.sweep_key,
            "diverged": r.diverged,
            "last_k_test_acc": r.last_k_test_acc,
            "total_steps": r.total_steps,
            "planned_steps": r.planned_steps,
            "blending_realized_fraction": r.blending_realized_fraction,
            "checkpoints": r.checkpoints,
        })).collect::<Vec<_>>(),
        "gaps": result.gaps,
        "detail": result.detail,
        "config": result.config,
    })
}

/// Per-sweep-point summary table: mean, std, gap.
pub fn summary_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("sweep_key,warm_mean,warm_std,fresh_mean,fresh_std,gap\n");
    for gap in &result.gaps {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            gap.sweep_key, gap.warm_mean, gap.warm_std, gap.fresh_mean, gap.fresh_std, gap.gap
        ));
    }
    out
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Writes metrics.csv, summary.json, summary.csv, and per-run probe streams.
pub fn write_outputs(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&result.runs)?)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary_json(result))
            .map_err(|e| Error::Contract(format!("summary serialization: {e}")))?,
    )?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(result))?;
    for run in &result.runs {
        if run.probe_rows.is_empty() {
            continue;
        }
        let mut text = String::from("probe_kind,value,detail_json\n");
        for probe in &run.probe_rows {
            text.push_str(&format!(
                "{},{},{}\n",
                probe.probe_kind,
                probe.value,
                csv_quote(&probe.detail_json)
            ));
        }
        std::fs::write(out_dir.join(format!("{}.probes.csv", run.run_id)), text)?;
    }
    Ok(())
}

/// Outcome of recomputing a run directory's summary from its raw CSV.
#[derive(Debug)]
pub struct Recomputed {
    pub rendered: String,
    pub max_abs_delta: f64,
}

/// Reads metrics.csv and summary.json from `run_dir`, recomputes every run's
/// last-K mean, and renders a comparison in the requested format.
pub fn report_from_dir(run_dir: &Path, format: &str) -> Result<Recomputed> {
    let csv_text = std::fs::read_to_string(run_dir.join("metrics.csv"))?;
    let summary_text = std::fs::read_to_string(run_dir.join("summary.json"))?;
    let summary: serde_json::Value = serde_json::from_str(&summary_text)
        .map_err(|e| Error::Format(format!("summary.json: {e}")))?;
    let k = summary["last_k"]
        .as_u64()
        .ok_or_else(|| Error::Format("summary.json lacks last_k".into()))? as usize;

    let rows = parse_metrics_csv(&csv_text)?;
    let recomputed = recompute_last_k(&rows, k);

    let mut reference: BTreeMap<String, Option<f64>> = BTreeMap::new();
    for run in summary["runs"]
        .as_array()
        .ok_or_else(|| Error::Format("summary.json lacks runs".into()))?
    {
        let id = run["run_id"]
            .as_str()
            .ok_or_else(|| Error::Format("run without run_id".into()))?;
        reference.insert(id.to_string(), run["last_k_test_acc"].as_f64());
    }

    let mut max_abs_delta = 0.0f64;
    let mut lines = Vec::new();
    for (run_id, value) in &recomputed {
        let summary_value = reference.get(run_id).copied().flatten();
        let delta = summary_value.map(|s| (s - value).abs());
        if let Some(d) = delta {
            max_abs_delta = max_abs_delta.max(d);
        }
        lines.push((run_id.clone(), *value, summary_value, delta));
    }

    let rendered = match format {
        "json" => serde_json::to_string_pretty(&json!({
            "last_k": k,
            "max_abs_delta": max_abs_delta,
            "runs": lines.iter().map(|(id, v, s, d)| json!({
                "run_id": id,
                "recomputed_last_k": v,
                "summary_last_k": s,
                "abs_delta": d,
            })).collect::<Vec<_>>(),
        }))
        .expect("json rendering"),
        "csv" => {
            let mut out =
                String::from("run_id,recomputed_last_k,summary_last_k,abs_delta\n");
            for (id, v, s, d) in &lines {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    id,
                    v,
                    s.map(|x| x.to_string()).unwrap_or_default(),
                    d.map(|x| x.to_string()).unwrap_or_default()
                ));
            }
            out
        }
        other => {
            return Err(Error::Config(format!(
                "unknown report format {other:?}; use csv or json"
            )))
        }
    };
    Ok(Recomputed {
        rendered,
        max_abs_delta,
    })
}
