//! Seeded multi-run experiments and their summary tables.

use std::path::{Path, PathBuf};

use sbo_core::engine::{run_with_config, trace_to_csv, BaselineKind, SessionConfig, TraceRow};
use sbo_core::sim::SyntheticTask;
use sbo_core::Result;

#[derive(Debug, Clone)]
pub struct Experiment {
    pub task: SyntheticTask,
    pub baseline: BaselineKind,
    pub q: f64,
    pub iters: usize,
    pub seeds: usize,
    pub jobs: usize,
}

impl Experiment {
    pub fn config(&self, seed: u64) -> SessionConfig {
        let mut c = SessionConfig::for_task(&self.task, self.baseline, seed);
        c.q = self.q;
        c
    }

    /// Runs seeds `0..seeds`, spreading them over `jobs` threads. Results are
    /// in seed order.
    pub fn run(&self) -> Result<Vec<Vec<TraceRow>>> {
        let jobs = self.jobs.clamp(1, self.seeds.max(1));
        let mut slots: Vec<Option<Result<Vec<TraceRow>>>> = (0..self.seeds).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunks: Vec<_> = slots.chunks_mut(self.seeds.div_ceil(jobs).max(1)).enumerate().collect();
            let width = self.seeds.div_ceil(jobs).max(1);
            for (c, chunk) in chunks {
                scope.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        let seed = (c * width + k) as u64;
                        *slot = Some(run_with_config(&self.task, self.config(seed), self.iters).map(|o| o.trace));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every seed ran")).collect()
    }
}

/// Linear-interpolation quantile of an unsorted sample; NaN when empty.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

const SUMMARY_METRICS: [&str; 4] = ["regret", "cum_regret", "simple_regret", "qu_count"];

fn metric(row: &TraceRow, name: &str) -> f64 {
    match name {
        "regret" => row.regret.unwrap_or(f64::NAN),
        "cum_regret" => row.cum_regret.unwrap_or(f64::NAN),
        "simple_regret" => row.simple_regret.unwrap_or(f64::NAN),
        "qu_count" => row.qu_count as f64,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Per-round median, 25th and 75th percentile across runs.
pub fn summary_csv(runs: &[Vec<TraceRow>]) -> String {
    let mut out = String::from("t,runs");
    for m in SUMMARY_METRICS {
        out.push_str(&format!(",{m}_median,{m}_q25,{m}_q75"));
    }
    out.push('\n');
    let rounds = runs.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..rounds {
        let rows: Vec<&TraceRow> = runs.iter().filter_map(|r| r.get(k)).collect();
        out.push_str(&format!("{},{}", k + 1, rows.len()));
        for m in SUMMARY_METRICS {
            let vals: Vec<f64> = rows.iter().map(|r| metric(r, m)).collect();
            out.push_str(&format!(",{},{},{}", quantile(&vals, 0.5), quantile(&vals, 0.25), quantile(&vals, 0.75)));
        }
        out.push('\n');
    }
    out
}

/// `<dir>/<stem>_seed<k>.csv` next to the summary path.
pub fn seed_path(summary: &Path, seed: usize) -> PathBuf {
    let stem = summary.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    summary.with_file_name(format!("{stem}_seed{seed}.csv"))
}

/// Writes one trace per seed plus the summary. Returns the paths written.
pub fn write_outputs(summary: &Path, runs: &[Vec<TraceRow>]) -> std::io::Result<Vec<PathBuf>> {
    if let Some(dir) = summary.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut written = Vec::with_capacity(runs.len() + 1);
    for (k, run) in runs.iter().enumerate() {
        let p = seed_path(summary, k);
        std::fs::write(&p, trace_to_csv(run))?;
        written.push(p);
    }
    std::fs::write(summary, summary_csv(runs))?;
    written.push(summary.to_path_buf());
    Ok(written)
}
