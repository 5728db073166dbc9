//! Suppression-strategy ablations and lambda sweeps.
//!
//! Each experiment pre-trains under one setting and linear-probes the
//! resulting encoder, emitting one [`ResultRow`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plot::{line_plot_svg, Series};
use super::probe::{linear_probe_encoder, load_eval_splits, ProbeOptions};
use crate::config::{Mode, Strategy, TrainConfig};
use crate::data::LoadedSplit;
use crate::error::{Error, Result};
use crate::trainer::{pretrain, MetricsRow, TrainRun};

pub const RESULTS_HEADER: &str = "method,strategy,fraction,lambda,seed,top1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Mode,
    pub strategy: Strategy,
    pub fraction: f64,
    pub lambda: f64,
    pub seed: u64,
    pub top1: f64,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6}",
            self.method,
            self.strategy.name(),
            self.fraction,
            self.lambda,
            self.seed,
            self.top1
        )
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for r in rows {
        text += &r.to_csv();
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Which mask source the suppressed branch uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub strategy: Strategy,
}

/// Images shared by every run of an experiment.
pub struct ExperimentData {
    pub train: LoadedSplit,
    pub test: LoadedSplit,
    pub n_classes: usize,
}

impl ExperimentData {
    /// Loads the dataset named by `base`, subsetting its training split.
    pub fn load(base: &TrainConfig) -> Result<Self> {
        let (m, train, test) = load_eval_splits(&base.dataset, base.fraction, base.seed)?;
        Ok(Self {
            train,
            test,
            n_classes: m.num_classes(),
        })
    }
}

pub struct ExperimentOutcome {
    pub row: ResultRow,
    pub run: TrainRun,
}

/// Median seconds per optimizer step, from consecutive wall-clock stamps.
pub fn median_step_seconds(metrics: &[MetricsRow]) -> Option<f64> {
    let mut d: Vec<f64> = metrics.windows(2).map(|w| w[1].wall_clock_s - w[0].wall_clock_s).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(d[d.len() / 2])
}

fn pretrain_and_probe(
    cfg: &TrainConfig,
    data: &ExperimentData,
    probe: &ProbeOptions,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let run = pretrain(cfg, &data.train.images, out_dir)?;
    let result = linear_probe_encoder(&run.net.encoder, &data.train, &data.test, data.n_classes, probe)?;
    Ok(ExperimentOutcome {
        row: ResultRow {
            method: cfg.mode,
            strategy: cfg.strategy,
            fraction: cfg.fraction,
            lambda: cfg.effective_lambda(),
            seed: cfg.seed,
            top1: result.accuracy,
        },
        run,
    })
}

/// Pre-trains `base` under `spec.strategy`, then linear-probes.
pub fn run_ablation(
    base: &TrainConfig,
    spec: AblationSpec,
    data: &ExperimentData,
    probe: &ProbeOptions,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let cfg = TrainConfig {
        strategy: spec.strategy,
        ..base.clone()
    };
    pretrain_and_probe(&cfg, data, probe, out_dir)
}

/// Removes repeated values, keeping first occurrences; returns the warnings.
pub fn dedup_grid(grid: &[f64]) -> (Vec<f64>, Vec<String>) {
    let mut out: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    for &l in grid {
        if out.iter().any(|&v| v == l) {
            let msg = format!("duplicate lambda {l} in sweep grid ignored");
            log::warn!("{msg}");
            warnings.push(msg);
        } else {
            out.push(l);
        }
    }
    (out, warnings)
}

pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub warnings: Vec<String>,
    pub runs: Vec<TrainRun>,
}

/// One pre-train and probe per distinct lambda. With `out_dir` set, each run
/// gets a `lambda_<value>` sub-directory and the table and plot are written
/// as `lambda_sweep.csv` / `lambda_sweep.svg`.
pub fn sweep_lambda(
    base: &TrainConfig,
    grid: &[f64],
    data: &ExperimentData,
    probe: &ProbeOptions,
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::validation("lambda grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::validation(format!("lambda must be finite and non-negative, got {bad}")));
    }
    let (grid, warnings) = dedup_grid(grid);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &lambda in &grid {
        let cfg = TrainConfig {
            lambda,
            ..base.clone()
        };
        let dir = out_dir.map(|d| d.join(format!("lambda_{lambda}")));
        let o = pretrain_and_probe(&cfg, data, probe, dir.as_deref())?;
        rows.push(o.row);
        runs.push(o.run);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_results_csv(&dir.join("lambda_sweep.csv"), &rows)?;
        let svg = line_plot_svg(
            "Linear-probe accuracy vs lambda",
            "lambda",
            "top-1",
            &[Series {
                label: format!("{} / {}", base.mode, base.strategy.name()),
                points: rows.iter().map(|r| (r.lambda, r.top1)).collect(),
            }],
        );
        let p = dir.join("lambda_sweep.svg");
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    }
    Ok(SweepOutcome { rows, warnings, runs })
}
