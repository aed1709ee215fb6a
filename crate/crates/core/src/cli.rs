//! Experiment commands behind the `dpfl` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Deserialize;

use crate::config::{SimConfig, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{final_mean_accuracy, rounds_to_target, write_metrics_csv};
use crate::sim::{run_simulation, PeerValidation, Simulation};

pub const SUMMARY_HEADER: &str = "strategy,median_rounds_to_target,final_mean_acc";
pub const VALIDATION_HEADER: &str = "round,peer_id,peer_acc,own_acc";
pub const NOT_REACHED: &str = "not reached";

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
}

impl Overrides {
    pub fn apply(&self, config: &mut SimConfig) {
        if let Some(seed) = self.seed {
            config.sim.master_seed = seed;
        }
        if let Some(strategy) = self.strategy {
            config.sim.strategy = strategy;
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one simulation and writes `metrics.csv` and `config.toml` (the
/// effective-config echo) into `out_dir`.
pub fn run_to_dir(config: &SimConfig, out_dir: &Path) -> Result<Vec<crate::metrics::RoundMetrics>> {
    create_dir(out_dir)?;
    write(&out_dir.join("config.toml"), &config.echo())?;
    let output = run_simulation(config)?;
    write_metrics_csv(&output.metrics, out_dir.join("metrics.csv"))?;
    Ok(output.metrics)
}

pub fn cmd_run(config_path: &Path, out_dir: &Path, overrides: &Overrides) -> Result<PathBuf> {
    let mut config = SimConfig::load(config_path)?;
    overrides.apply(&mut config);
    config.validate()?;
    let metrics = run_to_dir(&config, out_dir)?;
    if let Some(acc) = final_mean_accuracy(&metrics) {
        info!("final mean accuracy {acc:.4}");
    }
    Ok(out_dir.join("metrics.csv"))
}

/// A strategy comparison across seeds.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Base config; relative paths resolve against the spec file.
    pub config: PathBuf,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub target_accuracy: f64,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: ExperimentSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if spec.config.is_relative() {
            spec.config = base.join(&spec.config);
        }
        if spec.output_dir.is_relative() {
            spec.output_dir = base.join(&spec.output_dir);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("experiment needs at least one strategy".into()));
        }
        Ok(())
    }
}

/// Outcome of one (strategy, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub outcome: std::result::Result<(Option<usize>, f64), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: Strategy,
    /// `None` when the median run never reached the target.
    pub median_rounds: Option<f64>,
    pub final_mean_acc: Option<f64>,
    pub runs: Vec<RunResult>,
}

impl SummaryRow {
    pub fn succeeded(&self) -> bool {
        self.runs.iter().any(|r| r.outcome.is_ok())
    }
}

/// Median with `None` ordered after every value. `None` if the median
/// position falls on an unreached run.
pub fn median_rounds(values: &[Option<usize>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|r| r.map_or(f64::INFINITY, |x| x as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    m.is_finite().then_some(m)
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Runs every (strategy, seed) cell in parallel. When `out_dir` is given,
/// each cell writes its metrics and config echo under
/// `<out_dir>/<strategy>/seed_<seed>/`.
pub fn compare(base: &SimConfig, spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<Vec<SummaryRow>> {
    spec.validate()?;
    let cells: Vec<(Strategy, u64)> = spec
        .strategies
        .iter()
        .flat_map(|&st| spec.seeds.iter().map(move |&seed| (st, seed)))
        .collect();
    let results: Vec<RunResult> = cells
        .into_par_iter()
        .map(|(strategy, seed)| {
            let mut config = base.clone();
            config.sim.strategy = strategy;
            config.sim.master_seed = seed;
            let metrics = match out_dir {
                Some(dir) => run_to_dir(&config, &dir.join(strategy.name()).join(format!("seed_{seed}"))),
                None => run_simulation(&config).map(|o| o.metrics),
            };
            let outcome = metrics
                .map(|m| (rounds_to_target(&m, spec.target_accuracy), final_mean_accuracy(&m).unwrap_or(0.0)))
                .map_err(|e| {
                    warn!("{strategy} seed {seed} failed: {e}");
                    e.to_string()
                });
            RunResult { strategy, seed, outcome }
        })
        .collect();
    Ok(spec
        .strategies
        .iter()
        .map(|&strategy| {
            let runs: Vec<RunResult> = results.iter().filter(|r| r.strategy == strategy).cloned().collect();
            let ok: Vec<(Option<usize>, f64)> = runs.iter().filter_map(|r| r.outcome.clone().ok()).collect();
            let rounds: Vec<Option<usize>> = ok.iter().map(|o| o.0).collect();
            let finals: Vec<f64> = ok.iter().map(|o| o.1).collect();
            SummaryRow {
                strategy,
                median_rounds: median_rounds(&rounds),
                final_mean_acc: median(&finals),
                runs,
            }
        })
        .collect())
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        if !r.succeeded() {
            let _ = writeln!(out, "{},error,error", r.strategy);
            continue;
        }
        let rounds = r.median_rounds.map_or(NOT_REACHED.to_string(), |x| x.to_string());
        let acc = r.final_mean_acc.map_or(String::new(), |x| x.to_string());
        let _ = writeln!(out, "{},{rounds},{acc}", r.strategy);
    }
    out
}

fn format_runs(rows: &[SummaryRow]) -> String {
    let mut out = String::from("strategy,seed,rounds_to_target,final_mean_acc,status\n");
    for run in rows.iter().flat_map(|r| &r.runs) {
        match &run.outcome {
            Ok((rounds, acc)) => {
                let rounds = rounds.map_or(NOT_REACHED.to_string(), |x| x.to_string());
                let _ = writeln!(out, "{},{},{rounds},{acc},ok", run.strategy, run.seed);
            }
            Err(e) => {
                let _ = writeln!(out, "{},{},,,\"error: {}\"", run.strategy, run.seed, e.replace('"', "'"));
            }
        }
    }
    out
}

pub fn cmd_compare(spec_path: &Path) -> Result<PathBuf> {
    let spec = ExperimentSpec::load(spec_path)?;
    let base = SimConfig::load(&spec.config)?;
    create_dir(&spec.output_dir)?;
    let rows = compare(&base, &spec, Some(&spec.output_dir))?;
    let summary = spec.output_dir.join("summary.csv");
    write(&summary, &format_summary(&rows))?;
    write(&spec.output_dir.join("runs.csv"), &format_runs(&rows))?;
    Ok(summary)
}

/// Accuracy of each selected peer's published model on `client`'s test
/// split, every round the client is active.
pub fn validate_selection(config: &SimConfig, client: usize) -> Result<Vec<PeerValidation>> {
    let mut sim = Simulation::new(config.clone())?;
    sim.observe_client(client)?;
    Ok(sim.run()?.validation)
}

pub fn format_validation(rows: &[PeerValidation]) -> String {
    let mut out = format!("{VALIDATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.round, r.peer_id, r.peer_acc, r.own_acc);
    }
    out
}

pub fn cmd_validate_selection(config_path: &Path, client: usize, out_dir: &Path, overrides: &Overrides) -> Result<PathBuf> {
    let mut config = SimConfig::load(config_path)?;
    overrides.apply(&mut config);
    config.validate()?;
    if client >= config.sim.num_clients {
        return Err(Error::Precondition(format!(
            "client {client} out of range (0..{})",
            config.sim.num_clients
        )));
    }
    let rows = validate_selection(&config, client)?;
    create_dir(out_dir)?;
    write(&out_dir.join("config.toml"), &config.echo())?;
    let path = out_dir.join("validation.csv");
    write(&path, &format_validation(&rows))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_unreached() {
        assert_eq!(median_rounds(&[Some(3), Some(1), Some(2)]), Some(2.0));
        assert_eq!(median_rounds(&[Some(3), None, None]), None);
        assert_eq!(median_rounds(&[Some(3), Some(5), None]), Some(5.0));
        assert_eq!(median_rounds(&[Some(2), Some(4)]), Some(3.0));
        assert_eq!(median_rounds(&[Some(2), None]), None);
        assert_eq!(median_rounds(&[]), None);
    }

    #[test]
    fn summary_formats_cells() {
        let rows = vec![
            SummaryRow {
                strategy: Strategy::Score,
                median_rounds: Some(7.0),
                final_mean_acc: Some(0.95),
                runs: vec![RunResult {
                    strategy: Strategy::Score,
                    seed: 1,
                    outcome: Ok((Some(7), 0.95)),
                }],
            },
            SummaryRow {
                strategy: Strategy::PlainAverage,
                median_rounds: None,
                final_mean_acc: Some(0.5),
                runs: vec![RunResult {
                    strategy: Strategy::PlainAverage,
                    seed: 1,
                    outcome: Ok((None, 0.5)),
                }],
            },
            SummaryRow {
                strategy: Strategy::Random,
                median_rounds: None,
                final_mean_acc: None,
                runs: vec![RunResult {
                    strategy: Strategy::Random,
                    seed: 1,
                    outcome: Err("boom".into()),
                }],
            },
        ];
        let text = format_summary(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines[1], "score,7,0.95");
        assert_eq!(lines[2], "plain_average,not reached,0.5");
        assert_eq!(lines[3], "random,error,error");
    }
}
