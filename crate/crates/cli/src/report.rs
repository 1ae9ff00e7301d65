//! Median and interquartile aggregation of evaluation curves across seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dagmix_core::training::MetricsRow;

use crate::config::RunConfig;
use crate::CliError;

pub const HEADER: &str =
    "algo,env,env_steps,seeds,return_median,return_p25,return_p75,success_median,success_p25,success_p75";

/// Metrics of one run directory.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub algo: String,
    pub env: String,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub algo: String,
    pub env: String,
    pub env_steps: u64,
    pub seeds: usize,
    pub mean_return: Band,
    pub success_rate: Band,
}

/// Linearly interpolated quantile of sorted values, `q` in [0, 1].
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn band(mut values: Vec<f64>) -> Band {
    values.sort_by(f64::total_cmp);
    Band { median: quantile(&values, 0.5), p25: quantile(&values, 0.25), p75: quantile(&values, 0.75) }
}

/// One row per (algo, env, eval step), over the runs that reached that step.
pub fn aggregate(runs: &[RunMetrics]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, String, u64), Vec<&MetricsRow>> = BTreeMap::new();
    for run in runs {
        for row in &run.rows {
            groups.entry((run.algo.clone(), run.env.clone(), row.env_steps)).or_default().push(row);
        }
    }
    groups
        .into_iter()
        .map(|((algo, env, env_steps), rows)| ReportRow {
            algo,
            env,
            env_steps,
            seeds: rows.len(),
            mean_return: band(rows.iter().map(|r| r.mean_return).collect()),
            success_rate: band(rows.iter().map(|r| r.success_rate).collect()),
        })
        .collect()
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in rows {
        let (m, s) = (&r.mean_return, &r.success_rate);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.algo, r.env, r.env_steps, r.seeds, m.median, m.p25, m.p75, s.median, s.p25, s.p75
        ));
    }
    out
}

fn find_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            find_metrics(&path, found)?;
        } else if e.file_name() == "metrics.jsonl" {
            found.push(path);
        }
    }
    Ok(())
}

/// Reads every `metrics.jsonl` under `dir`, labelled by the `config.txt`
/// beside it.
pub fn load_runs(dir: &Path) -> Result<Vec<RunMetrics>, CliError> {
    let mut files = Vec::new();
    find_metrics(dir, &mut files)?;
    let mut runs = Vec::new();
    for file in files {
        let run_dir = file.parent().unwrap();
        let cfg = RunConfig::load(&run_dir.join("config.txt"))?;
        let text = fs::read_to_string(&file)?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| CliError::Config(format!("{} line {}: {e}", file.display(), i + 1)))
            })
            .collect::<Result<Vec<MetricsRow>, _>>()?;
        if !rows.is_empty() {
            runs.push(RunMetrics { algo: cfg.train.algo.to_string(), env: cfg.env.name(), rows });
        }
    }
    Ok(runs)
}

pub fn report(dir: &Path) -> Result<String, CliError> {
    let runs = load_runs(dir)?;
    if runs.is_empty() {
        return Err(CliError::Usage(format!("no metrics rows found under {}", dir.display())));
    }
    Ok(to_csv(&aggregate(&runs)))
}
