//! Run artifacts on disk: single runs, sweeps, reports and contribution
//! tables.
//!
//! Reals are written as `{:.16e}`, i.e. 17 significant digits, which
//! round-trips every `f64`. `rounds.csv` excludes wall-clock time so that
//! reruns are byte-identical; timings go to `timing.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{accuracy_stats, paired_t_test, LevelContribution};
use crate::config::ExperimentConfig;
use crate::engine::{run_experiment, ExperimentResult, RoundRecord};
use crate::error::{Error, Result};
use crate::strategies::StrategyKind;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MODEL_FILE: &str = "final_model.bin";
pub const PER_CLIENT_FILE: &str = "per_client.csv";
pub const BIAS_FILE: &str = "bias.csv";
pub const CONFIG_ECHO_FILE: &str = "config.echo.json";
pub const META_FILE: &str = "meta.json";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const STATS_FILE: &str = "stats.csv";
pub const TTEST_FILE: &str = "ttest.csv";
pub const SHAPLEY_FILE: &str = "shapley.csv";

pub const ROUNDS_HEADER: [&str; 5] = [
    "round",
    "global_train_loss",
    "global_test_accuracy",
    "participating",
    "contributors",
];

pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })
}

fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(ROUNDS_HEADER)?;
    for r in records {
        let participants: Vec<String> = r.participating.iter().map(usize::to_string).collect();
        w.write_record([
            r.round.to_string(),
            fmt_real(r.global_train_loss),
            fmt_real(r.global_test_accuracy),
            participants.join(" "),
            r.contributors.to_string(),
        ])?;
    }
    flush(w, path)
}

/// Read back a `rounds.csv`. Wall time is not stored there and comes back
/// as zero.
pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv_reader(path)?;
    let bad = |what: &str, row: usize| Error::Format(format!("{}: bad {what} in row {row}", path.display()));
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != ROUNDS_HEADER.len() {
            return Err(bad("field count", row + 1));
        }
        let participating = rec[3]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("participant", row + 1)))
            .collect::<Result<Vec<usize>>>()?;
        out.push(RoundRecord {
            round: rec[0].parse().map_err(|_| bad("round", row + 1))?,
            global_train_loss: rec[1].parse().map_err(|_| bad("loss", row + 1))?,
            global_test_accuracy: rec[2].parse().map_err(|_| bad("accuracy", row + 1))?,
            participating,
            contributors: rec[4].parse().map_err(|_| bad("contributors", row + 1))?,
            wall_time: 0.0,
        });
    }
    Ok(out)
}

fn write_timing_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["round", "wall_time"])?;
    for r in records {
        w.write_record([r.round.to_string(), fmt_real(r.wall_time)])?;
    }
    flush(w, path)
}

fn write_per_client_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["client", "accuracy", "probability", "rounds_participated"])?;
    for (i, acc) in result.per_client_accuracy.iter().enumerate() {
        w.write_record([
            i.to_string(),
            fmt_real(*acc),
            fmt_real(result.probabilities[i]),
            result.participation[i].to_string(),
        ])?;
    }
    flush(w, path)
}

pub fn write_bias_csv(path: &Path, per_client: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["client", "accuracy"])?;
    for (i, acc) in per_client.iter().enumerate() {
        w.write_record([i.to_string(), fmt_real(*acc)])?;
    }
    flush(w, path)
}

pub fn read_bias_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv_reader(path)?;
    rdr.records()
        .enumerate()
        .map(|(row, rec)| {
            let rec = rec?;
            rec.get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad accuracy in row {}", path.display(), row + 1)))
        })
        .collect()
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub seed: u64,
    pub version: String,
    pub git_hash: String,
    pub config: ExperimentConfig,
}

impl Meta {
    pub fn new(config: &ExperimentConfig) -> Self {
        Meta {
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_hash: option_env!("FEDAR_GIT_HASH").unwrap_or("unknown").to_string(),
            config: config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Write every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, config: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    create_dir(dir)?;
    write_rounds_csv(&dir.join(ROUNDS_FILE), &result.records)?;
    write_timing_csv(&dir.join(TIMING_FILE), &result.records)?;
    write_file(&dir.join(MODEL_FILE), result.final_model.to_le_bytes())?;
    write_per_client_csv(&dir.join(PER_CLIENT_FILE), result)?;
    write_bias_csv(&dir.join(BIAS_FILE), &result.per_client_accuracy)?;
    write_file(&dir.join(CONFIG_ECHO_FILE), config.to_json_pretty() + "\n")?;
    let meta = serde_json::to_string_pretty(&Meta::new(config))?;
    write_file(&dir.join(META_FILE), meta + "\n")
}

/// Validate, run and write. The output directory is created before the run
/// so an unwritable destination fails fast.
pub fn run_command(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult> {
    config.validate()?;
    create_dir(out_dir)?;
    let result = run_experiment(config)?;
    write_run(out_dir, config, &result)?;
    Ok(result)
}

/// The swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    PMin(Vec<f64>),
    NumClients(Vec<usize>),
    Rho(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::PMin(_) => "p_min",
            SweepAxis::NumClients(_) => "num_clients",
            SweepAxis::Rho(_) => "rho",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::PMin(v) | SweepAxis::Rho(v) => v.len(),
            SweepAxis::NumClients(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value `k` rendered for directory names and the summary.
    pub fn label(&self, k: usize) -> String {
        match self {
            SweepAxis::PMin(v) | SweepAxis::Rho(v) => v[k].to_string(),
            SweepAxis::NumClients(v) => v[k].to_string(),
        }
    }

    fn apply(&self, k: usize, config: &mut ExperimentConfig) {
        match self {
            SweepAxis::PMin(v) => config.p_min = v[k],
            SweepAxis::NumClients(v) => config.num_clients = v[k],
            SweepAxis::Rho(v) => config.rho = v[k],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: SweepAxis,
    pub strategies: Vec<StrategyKind>,
    pub seeds: Vec<u64>,
}

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub axis_index: usize,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Directory relative to the sweep root.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: SweepCell,
    /// Final loss and accuracy, or the error message.
    pub outcome: std::result::Result<(f64, f64), String>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })
    }

    /// Every `(axis value, strategy, seed)` cell, with a validated config.
    /// Within one axis value and seed, strategies differ only in the
    /// strategy, so their runs share data, partition and availability.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        if self.axis.is_empty() {
            return Err(Error::config("axis.values", "must not be empty"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        let mut cells = Vec::new();
        for k in 0..self.axis.len() {
            for &strategy in &self.strategies {
                for &seed in &self.seeds {
                    let mut config = self.base.clone();
                    self.axis.apply(k, &mut config);
                    config.strategy = strategy;
                    config.seed = seed;
                    config.validate().map_err(|e| match e {
                        Error::Config { path, message } => Error::config(
                            format!("axis.values[{k}]"),
                            format!("{path}: {message}"),
                        ),
                        other => other,
                    })?;
                    let dir = PathBuf::from(format!("{}={}", self.axis.name(), self.axis.label(k)))
                        .join(strategy.as_str())
                        .join(format!("seed={seed}"));
                    cells.push(SweepCell {
                        axis_index: k,
                        strategy,
                        seed,
                        config,
                        dir,
                    });
                }
            }
        }
        Ok(cells)
    }
}

/// Run every cell (in parallel), write each run directory and
/// `sweep_summary.csv`. Failed cells are recorded rather than aborting the
/// sweep; the caller decides how to report them.
pub fn sweep_command(spec: &SweepSpec, out_dir: &Path) -> Result<Vec<CellOutcome>> {
    let cells = spec.cells()?;
    create_dir(out_dir)?;
    let outcomes: Vec<CellOutcome> = cells
        .into_par_iter()
        .map(|cell| {
            let outcome = run_command(&cell.config, &out_dir.join(&cell.dir))
                .map(|r| {
                    let last = r.final_record();
                    (last.global_train_loss, last.global_test_accuracy)
                })
                .map_err(|e| e.to_string());
            if let Err(message) = &outcome {
                log::error!("sweep cell {} failed: {message}", cell.dir.display());
            }
            CellOutcome { cell, outcome }
        })
        .collect();
    write_sweep_summary(&out_dir.join(SWEEP_SUMMARY_FILE), spec, &outcomes)?;
    Ok(outcomes)
}

fn write_sweep_summary(path: &Path, spec: &SweepSpec, outcomes: &[CellOutcome]) -> Result<()> {
    let mut groups: BTreeMap<(usize, StrategyKind), Vec<&CellOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups.entry((o.cell.axis_index, o.cell.strategy)).or_default().push(o);
    }
    let mut w = csv_writer(path)?;
    w.write_record([
        "axis",
        "value",
        "strategy",
        "seeds",
        "failed",
        "mean_final_loss",
        "mean_final_accuracy",
    ])?;
    for ((k, strategy), group) in groups {
        let ok: Vec<(f64, f64)> = group.iter().filter_map(|o| o.outcome.clone().ok()).collect();
        let mean = |f: fn(&(f64, f64)) -> f64| {
            if ok.is_empty() {
                String::new()
            } else {
                fmt_real(ok.iter().map(f).sum::<f64>() / ok.len() as f64)
            }
        };
        w.write_record([
            spec.axis.name().to_string(),
            spec.axis.label(k),
            strategy.to_string(),
            ok.len().to_string(),
            (group.len() - ok.len()).to_string(),
            mean(|x| x.0),
            mean(|x| x.1),
        ])?;
    }
    flush(w, path)
}

/// Run directories under `root` (any directory holding a `meta.json`), in
/// sorted order.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(META_FILE).is_file() {
            found.push(dir);
            continue;
        }
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
                stack.push(entry.path());
            }
        }
    }
    found.sort();
    Ok(found)
}

/// A finished run as seen by `report`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub meta: Meta,
    pub per_client: Vec<f64>,
    pub final_accuracy: f64,
}

pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let meta = Meta::load(&dir.join(META_FILE))?;
    let per_client = read_bias_csv(&dir.join(BIAS_FILE))?;
    let rounds = read_rounds_csv(&dir.join(ROUNDS_FILE))?;
    let final_accuracy = rounds
        .last()
        .map(|r| r.global_test_accuracy)
        .ok_or_else(|| Error::Format(format!("{}: no rounds recorded", dir.display())))?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        meta,
        per_client,
        final_accuracy,
    })
}

/// Key that pairs runs across strategies: the config with the strategy
/// field blanked out.
fn pairing_key(config: &ExperimentConfig) -> String {
    let mut c = config.clone();
    c.strategy = StrategyKind::Fedar;
    c.to_json_pretty()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub strategy: StrategyKind,
    pub runs: usize,
    pub mean: f64,
    pub var: f64,
    pub worst10: f64,
    pub best10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTestRow {
    pub strategy_a: StrategyKind,
    pub strategy_b: StrategyKind,
    pub pairs: usize,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub stats: Vec<StatsRow>,
    pub ttests: Vec<TTestRow>,
}

/// Per-strategy accuracy statistics (averaged over runs) and paired t-tests
/// on final test accuracy between every pair of strategies.
pub fn build_report(runs: &[RunSummary]) -> Result<Report> {
    let mut by_strategy: BTreeMap<StrategyKind, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_strategy.entry(r.meta.config.strategy).or_default().push(r);
    }
    let mut report = Report::default();
    for (&strategy, group) in &by_strategy {
        let stats = group
            .iter()
            .map(|r| accuracy_stats(&r.per_client))
            .collect::<Result<Vec<_>>>()?;
        let avg = |f: fn(&crate::analysis::AccuracyStats) -> f64| stats.iter().map(f).sum::<f64>() / stats.len() as f64;
        report.stats.push(StatsRow {
            strategy,
            runs: group.len(),
            mean: avg(|s| s.mean),
            var: avg(|s| s.variance),
            worst10: avg(|s| s.worst10_mean),
            best10: avg(|s| s.best10_mean),
        });
    }
    let keyed: BTreeMap<StrategyKind, BTreeMap<String, f64>> = by_strategy
        .iter()
        .map(|(&s, group)| (s, group.iter().map(|r| (pairing_key(&r.meta.config), r.final_accuracy)).collect()))
        .collect();
    let kinds: Vec<StrategyKind> = keyed.keys().copied().collect();
    for (x, &a) in kinds.iter().enumerate() {
        for &b in &kinds[x + 1..] {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for (key, &acc) in &keyed[&a] {
                if let Some(&other) = keyed[&b].get(key) {
                    xs.push(acc);
                    ys.push(other);
                }
            }
            if xs.len() < 2 {
                log::warn!("skipping t-test {a} vs {b}: only {} paired runs", xs.len());
                continue;
            }
            let t = paired_t_test(&xs, &ys)?;
            report.ttests.push(TTestRow {
                strategy_a: a,
                strategy_b: b,
                pairs: xs.len(),
                t: t.t,
                p: t.p,
            });
        }
    }
    Ok(report)
}

pub fn write_report(out_dir: &Path, report: &Report) -> Result<()> {
    create_dir(out_dir)?;
    let path = out_dir.join(STATS_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["strategy", "mean", "var", "worst10", "best10", "runs"])?;
    for s in &report.stats {
        w.write_record([
            s.strategy.to_string(),
            fmt_real(s.mean),
            fmt_real(s.var),
            fmt_real(s.worst10),
            fmt_real(s.best10),
            s.runs.to_string(),
        ])?;
    }
    flush(w, &path)?;

    let path = out_dir.join(TTEST_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["strategy_a", "strategy_b", "t", "p", "pairs"])?;
    for t in &report.ttests {
        w.write_record([
            t.strategy_a.to_string(),
            t.strategy_b.to_string(),
            fmt_real(t.t),
            fmt_real(t.p),
            t.pairs.to_string(),
        ])?;
    }
    flush(w, &path)
}

/// Recompute statistics and t-tests from every run directory under `roots`.
pub fn report_command(roots: &[PathBuf], out_dir: &Path) -> Result<Report> {
    let mut runs = Vec::new();
    for root in roots {
        for dir in find_runs(root)? {
            runs.push(load_run(&dir)?);
        }
    }
    if runs.is_empty() {
        return Err(Error::Data("no run directories found".into()));
    }
    let report = build_report(&runs)?;
    write_report(out_dir, &report)?;
    Ok(report)
}

pub fn write_shapley_csv(path: &Path, levels: &[LevelContribution]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["level", "client", "phi", "percent"])?;
    for l in levels {
        for (client, (phi, pct)) in l.report.values.iter().zip(&l.report.percentages).enumerate() {
            w.write_record([l.level.to_string(), client.to_string(), fmt_real(*phi), fmt_real(*pct)])?;
        }
    }
    flush(w, path)
}
