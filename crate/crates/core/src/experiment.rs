//! The experiment commands behind the CLI: dataset generation, single runs,
//! strategy ablations, and noise stress tests. Every output is a pure
//! function of the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{apply_noise, fmt_real, save_features, Split};
use crate::encoder::{embed_images, embed_texts};
use crate::error::{Error, Result};
use crate::eval::{export_embeddings, relative_drop_value, Direction, RetrievalReport, DEFAULT_KS};
use crate::manifest::{load_splits, DatasetSource, ExperimentManifest, Scenario, Splits};
use crate::scheduler::Strategy;
use crate::trainer::{evaluate, save_checkpoint, train, Checkpoint, TrainConfig, TrainOutcome, TrainRecord};

pub const METRICS_HEADER: &str = "run,strategy,seed,scenario,direction,k,recall,queries";

/// One (strategy, seed, scenario) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub strategy: Strategy,
    pub seed: u64,
    pub scenario: Scenario,
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!("{}-s{}-{}", self.strategy, self.seed, self.scenario.name)
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            strategy: self.strategy,
            seed: self.seed,
            ..*base
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: TrainOutcome,
    /// Clean test-split recall of the selected parameters.
    pub test: RetrievalReport,
}

impl CellResult {
    pub fn record(&self) -> &TrainRecord {
        &self.outcome.record
    }

    pub fn test_recall(&self, dir: Direction, k: usize) -> f64 {
        self.test.get(dir, k).unwrap_or(f64::NAN)
    }
}

/// Trains one cell on the scenario's noisy copy of the training split and
/// evaluates on the clean test split.
pub fn run_cell(splits: &Splits, base: &TrainConfig, cell: &Cell) -> Result<CellResult> {
    let config = cell.config(base);
    let train_ds = apply_noise(&splits.train, &cell.scenario.noise())?;
    let outcome = train(&train_ds, &splits.val, &config)?;
    let test = evaluate(&outcome.best_params, &splits.test, &DEFAULT_KS)?;
    Ok(CellResult {
        cell: cell.clone(),
        outcome,
        test,
    })
}

/// Runs cells in parallel; results come back in input order.
pub fn run_cells(splits: &Splits, base: &TrainConfig, cells: &[Cell]) -> Result<Vec<CellResult>> {
    cells.par_iter().map(|c| run_cell(splits, base, c)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn metrics_rows(out: &mut String, result: &CellResult) {
    let c = &result.cell;
    for (dir, k, v) in result.test.entries() {
        let _ = writeln!(
            out,
            "{},{},{},{},{dir},{k},{},{}",
            c.run_id(),
            c.strategy,
            c.seed,
            c.scenario.name,
            fmt_real(v),
            result.test.query_count
        );
    }
}

fn metrics_csv(results: &[CellResult]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in results {
        metrics_rows(&mut out, r);
    }
    out
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

/// Writes the train/val/test feature files for a synthetic dataset.
pub fn cmd_gen(manifest: &ExperimentManifest) -> Result<[PathBuf; 3]> {
    if !matches!(manifest.dataset, DatasetSource::Synthetic { .. }) {
        return Err(Error::Manifest("gen needs a synthetic dataset source".into()));
    }
    let splits = load_splits(&manifest.dataset)?;
    ensure_dir(&manifest.out_dir)?;
    let mut paths = Vec::with_capacity(3);
    for (ds, split) in [(&splits.train, Split::Train), (&splits.val, Split::Val), (&splits.test, Split::Test)] {
        let path = manifest.out_dir.join(format!("{}.feat", split.as_str()));
        save_features(ds, &path)?;
        paths.push(path);
    }
    Ok(paths.try_into().expect("three splits"))
}

/// Files written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub weights: PathBuf,
    pub metrics: PathBuf,
    pub embeddings: PathBuf,
    pub projection: PathBuf,
    pub result: CellResult,
}

/// Trains `train.strategy` at `train.seed` on the first scenario.
pub fn cmd_train(manifest: &ExperimentManifest) -> Result<TrainArtifacts> {
    manifest.validate()?;
    let splits = load_splits(&manifest.dataset)?;
    let cell = Cell {
        strategy: manifest.train.strategy,
        seed: manifest.train.seed,
        scenario: manifest.scenarios[0].clone(),
    };
    let result = run_cell(&splits, &manifest.train, &cell)?;

    let dir = &manifest.out_dir;
    ensure_dir(dir)?;
    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&Checkpoint::from_outcome(&result.outcome, &cell.config(&manifest.train)), &checkpoint)?;
    let train_log = dir.join("train_log.csv");
    write_text(&train_log, &result.record().log_csv())?;
    let weights = dir.join("weights.csv");
    write_text(&weights, &result.record().trajectory_csv())?;
    let metrics = dir.join("metrics.csv");
    write_text(&metrics, &metrics_csv(std::slice::from_ref(&result)))?;

    let params = &result.outcome.best_params;
    let ei = embed_images(params, splits.test.img())?;
    let et = embed_texts(params, splits.test.txt())?;
    let exported = export_embeddings(&ei, &et, splits.test.ids(), &dir.join("embeddings.csv"))?;
    Ok(TrainArtifacts {
        checkpoint,
        train_log,
        weights,
        metrics,
        embeddings: exported.embeddings,
        projection: exported.projection,
        result,
    })
}

/// Seed-averaged test recall for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellResult>,
    pub table: PathBuf,
    pub runs: PathBuf,
    pub metrics: PathBuf,
    pub batch_log: PathBuf,
}

impl AblationReport {
    pub fn row(&self, strategy: Strategy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

fn per_run_logs(dir: &Path, results: &[CellResult]) -> Result<()> {
    for r in results {
        let run_dir = dir.join("runs").join(r.cell.run_id());
        ensure_dir(&run_dir)?;
        write_text(&run_dir.join("train_log.csv"), &r.record().log_csv())?;
        write_text(&run_dir.join("weights.csv"), &r.record().trajectory_csv())?;
    }
    Ok(())
}

/// Every strategy × seed on the first scenario, with identical batch
/// sequences per seed.
pub fn cmd_ablation(manifest: &ExperimentManifest) -> Result<AblationReport> {
    manifest.validate()?;
    if manifest.strategies.len() < 2 {
        return Err(Error::Manifest("ablation needs at least two strategies".into()));
    }
    let splits = load_splits(&manifest.dataset)?;
    let scenario = manifest.scenarios[0].clone();
    let seeds = manifest.seeds();
    let cells: Vec<Cell> = manifest
        .strategies
        .iter()
        .flat_map(|&strategy| {
            let scenario = scenario.clone();
            seeds.iter().map(move |&seed| Cell {
                strategy,
                seed,
                scenario: scenario.clone(),
            })
        })
        .collect();
    let results = run_cells(&splits, &manifest.train, &cells)?;

    for r in &results {
        let reference = results
            .iter()
            .find(|o| o.cell.seed == r.cell.seed)
            .expect("a cell exists for every seed");
        let same = r
            .record()
            .epochs
            .iter()
            .zip(&reference.record().epochs)
            .all(|(a, b)| a.first_batch == b.first_batch && a.batch_fingerprint == b.batch_fingerprint);
        if !same {
            return Err(Error::invalid(
                "ablation",
                format!("batch sequence of {} differs from {}", r.cell.run_id(), reference.cell.run_id()),
            ));
        }
    }

    let dir = &manifest.out_dir;
    ensure_dir(dir)?;
    let rows: Vec<AblationRow> = manifest
        .strategies
        .iter()
        .map(|&strategy| {
            let mine: Vec<&CellResult> = results.iter().filter(|r| r.cell.strategy == strategy).collect();
            let avg = |dir, k| mean(mine.iter().map(|r| r.test_recall(dir, k)));
            AblationRow {
                strategy,
                r1_i2t: avg(Direction::I2T, 1),
                r5_i2t: avg(Direction::I2T, 5),
                r1_t2i: avg(Direction::T2I, 1),
                r5_t2i: avg(Direction::T2I, 5),
            }
        })
        .collect();

    let mut table = String::from("strategy,r1_i2t,r5_i2t,r1_t2i,r5_t2i\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            r.strategy,
            fmt_real(r.r1_i2t),
            fmt_real(r.r5_i2t),
            fmt_real(r.r1_t2i),
            fmt_real(r.r5_t2i)
        );
    }
    let mut runs = String::from("strategy,seed,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,best_epoch\n");
    for r in &results {
        let _ = write!(runs, "{},{}", r.cell.strategy, r.cell.seed);
        for dir in [Direction::I2T, Direction::T2I] {
            for k in DEFAULT_KS {
                let _ = write!(runs, ",{}", fmt_real(r.test_recall(dir, k)));
            }
        }
        let _ = writeln!(runs, ",{}", r.record().best_epoch);
    }
    let mut batch_log = String::from("strategy,seed,epoch,batches,fingerprint,first_batch\n");
    for r in &results {
        for e in &r.record().epochs {
            let first: Vec<String> = e.first_batch.iter().map(usize::to_string).collect();
            let _ = writeln!(
                batch_log,
                "{},{},{},{},{:016x},{}",
                r.cell.strategy,
                r.cell.seed,
                e.epoch,
                e.batch_count,
                e.batch_fingerprint,
                first.join(" ")
            );
        }
    }

    let report = AblationReport {
        table: dir.join("ablation_table.csv"),
        runs: dir.join("ablation_runs.csv"),
        metrics: dir.join("metrics.csv"),
        batch_log: dir.join("batch_log.csv"),
        rows,
        cells: Vec::new(),
    };
    write_text(&report.table, &table)?;
    write_text(&report.runs, &runs)?;
    write_text(&report.metrics, &metrics_csv(&results))?;
    write_text(&report.batch_log, &batch_log)?;
    per_run_logs(dir, &results)?;
    Ok(AblationReport {
        cells: results,
        ..report
    })
}

/// Relative test-recall drop of one noisy cell against its clean twin.
#[derive(Debug, Clone, PartialEq)]
pub struct DropEntry {
    pub strategy: Strategy,
    pub seed: u64,
    pub scenario: String,
    pub direction: Direction,
    pub k: usize,
    pub clean: f64,
    pub noisy: f64,
    /// `None` when the clean value is zero.
    pub relative_drop: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StressReport {
    pub cells: Vec<CellResult>,
    pub drops: Vec<DropEntry>,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub drops_csv: PathBuf,
    pub loss_curves: PathBuf,
}

impl StressReport {
    pub fn drop_of(&self, strategy: Strategy, seed: u64, scenario: &str, dir: Direction, k: usize) -> Option<&DropEntry> {
        self.drops
            .iter()
            .find(|d| d.strategy == strategy && d.seed == seed && d.scenario == scenario && d.direction == dir && d.k == k)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_else(|| "nan".into())
}

/// Trains every strategy on clean data and on each noisy scenario, then
/// evaluates all of them on the clean test split.
pub fn cmd_stress(manifest: &ExperimentManifest) -> Result<StressReport> {
    manifest.validate()?;
    if manifest.scenarios.iter().all(Scenario::is_clean) {
        return Err(Error::Manifest("stress needs at least one noisy scenario".into()));
    }
    let mut scenarios = manifest.scenarios.clone();
    let clean_name = match scenarios.iter().find(|s| s.is_clean()) {
        Some(s) => s.name.clone(),
        None => {
            if scenarios.iter().any(|s| s.name == "clean") {
                return Err(Error::Manifest("scenario `clean` must have no noise".into()));
            }
            scenarios.insert(0, Scenario::clean());
            "clean".into()
        }
    };
    let splits = load_splits(&manifest.dataset)?;
    let seeds = manifest.seeds();
    let mut cells = Vec::new();
    for &strategy in &manifest.strategies {
        for &seed in &seeds {
            for scenario in &scenarios {
                cells.push(Cell {
                    strategy,
                    seed,
                    scenario: scenario.clone(),
                });
            }
        }
    }
    let results = run_cells(&splits, &manifest.train, &cells)?;
    let find = |strategy, seed, name: &str| {
        results
            .iter()
            .find(|r| r.cell.strategy == strategy && r.cell.seed == seed && r.cell.scenario.name == name)
            .expect("cell was scheduled")
    };

    let mut drops = Vec::new();
    for r in &results {
        let clean = find(r.cell.strategy, r.cell.seed, &clean_name);
        for (dir, k, noisy) in r.test.entries() {
            let c = clean.test_recall(dir, k);
            drops.push(DropEntry {
                strategy: r.cell.strategy,
                seed: r.cell.seed,
                scenario: r.cell.scenario.name.clone(),
                direction: dir,
                k,
                clean: c,
                noisy,
                relative_drop: relative_drop_value(c, noisy).ok(),
            });
        }
    }

    let mut summary = String::from(
        "strategy,scenario,runs,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,drop_r5_i2t,drop_r5_t2i\n",
    );
    for &strategy in &manifest.strategies {
        for scenario in &scenarios {
            let mine: Vec<&CellResult> = results
                .iter()
                .filter(|r| r.cell.strategy == strategy && r.cell.scenario.name == scenario.name)
                .collect();
            let clean: Vec<&CellResult> = results
                .iter()
                .filter(|r| r.cell.strategy == strategy && r.cell.scenario.name == clean_name)
                .collect();
            let avg = |set: &[&CellResult], dir, k| mean(set.iter().map(|r| r.test_recall(dir, k)));
            let _ = write!(summary, "{strategy},{},{}", scenario.name, mine.len());
            for dir in [Direction::I2T, Direction::T2I] {
                for k in DEFAULT_KS {
                    let _ = write!(summary, ",{}", fmt_real(avg(&mine, dir, k)));
                }
            }
            for dir in [Direction::I2T, Direction::T2I] {
                let d = relative_drop_value(avg(&clean, dir, 5), avg(&mine, dir, 5)).ok();
                let _ = write!(summary, ",{}", fmt_opt(d));
            }
            summary.push('\n');
        }
    }

    let mut drops_csv = String::from("strategy,seed,scenario,direction,k,clean,noisy,relative_drop\n");
    for d in &drops {
        let _ = writeln!(
            drops_csv,
            "{},{},{},{},{},{},{},{}",
            d.strategy,
            d.seed,
            d.scenario,
            d.direction,
            d.k,
            fmt_real(d.clean),
            fmt_real(d.noisy),
            fmt_opt(d.relative_drop)
        );
    }
    let mut curves = String::from("strategy,seed,scenario,epoch,mean_l_i2t,mean_l_t2i,mean_total,w_i,w_t\n");
    for r in &results {
        for e in &r.record().epochs {
            let _ = writeln!(
                curves,
                "{},{},{},{},{},{},{},{},{}",
                r.cell.strategy,
                r.cell.seed,
                r.cell.scenario.name,
                e.epoch,
                fmt_real(e.mean_l_i2t),
                fmt_real(e.mean_l_t2i),
                fmt_real(e.mean_total),
                fmt_real(e.w_i),
                fmt_real(e.w_t)
            );
        }
    }

    let dir = &manifest.out_dir;
    ensure_dir(dir)?;
    let report = StressReport {
        metrics: dir.join("stress_metrics.csv"),
        summary: dir.join("stress_summary.csv"),
        drops_csv: dir.join("stress_drops.csv"),
        loss_curves: dir.join("loss_curves.csv"),
        cells: Vec::new(),
        drops,
    };
    write_text(&report.metrics, &metrics_csv(&results))?;
    write_text(&report.summary, &summary)?;
    write_text(&report.drops_csv, &drops_csv)?;
    write_text(&report.loss_curves, &curves)?;
    per_run_logs(dir, &results)?;
    Ok(StressReport {
        cells: results,
        ..report
    })
}
