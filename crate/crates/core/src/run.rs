//! End-to-end runs: pretrain, evaluate and write a self-describing run
//! directory; plus the resumable ablation grid driver.
//!
//! ```text
//! <run>/config.toml          resolved config
//! <run>/metrics.csv          one MetricsRow per training step and validation
//! <run>/timing.csv           wall-clock seconds per epoch
//! <run>/summary.json         losses, hashes and evaluation results
//! <run>/checkpoints/final.*  parameters kept by early stopping
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointManifest, CHECKPOINT_VERSION};
use crate::config::{Alignment, Kernel, RunConfig, TermToggles};
use crate::corpus;
use crate::encoders::TextEncoder;
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate, EvalReport, Tasks};
use crate::params::ParamStore;
use crate::synth::{self, Corpus};
use crate::train::{pretrain, write_metrics, TrainOutcome};

pub const FINAL: &str = "final";
pub const LAST_GOOD: &str = "last_good";

pub fn checkpoint_dir(run: &Path) -> PathBuf {
    run.join("checkpoints")
}

/// Loads the config's corpus directory, or generates it from `[data]`.
pub fn corpus_for(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        Some(dir) => corpus::load(dir),
        None => synth::generate(&cfg.data, cfg.encoders.image_size),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub code_version: String,
    pub train_seed: u64,
    pub data_seed: u64,
    pub steps: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_valid: Option<f64>,
    pub text_encoder_hash: String,
    pub text_encoder_unchanged: bool,
    pub eval: EvalReport,
}

fn manifest(cfg: &RunConfig, store: &ParamStore, text_hash: &str, code_version: &str, steps: usize) -> CheckpointManifest {
    CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config_hash: cfg.hash(),
        params_hash: store.hash(),
        text_encoder_hash: text_hash.to_string(),
        code_version: code_version.to_string(),
        num_params: store.num_scalars(),
        steps,
    }
}

fn write_timing(path: &Path, seconds: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,seconds\n");
    for (e, s) in seconds.iter().enumerate() {
        text.push_str(&format!("{e},{s:.6}\n"));
    }
    fs::write(path, text).at(path)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").at(path)
}

/// Pretrains, checkpoints and evaluates into `dir`.
///
/// On divergence the parameters from before the failing step are saved as
/// the `last_good` checkpoint and the error is returned.
pub fn execute(cfg: &RunConfig, corpus: &Corpus, dir: &Path, tasks: &Tasks, code_version: &str) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(dir).at(dir)?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).at(&cfg_path)?;
    let text_hash = TextEncoder::new(corpus.vocab.len(), &cfg.encoders).hash();

    let outcome: TrainOutcome = match pretrain(corpus, cfg) {
        Ok(o) => o,
        Err(Error::NonFinite { term, step, last_good }) => {
            let m = manifest(cfg, &last_good, &text_hash, code_version, step);
            checkpoint::save(&checkpoint_dir(dir), LAST_GOOD, &last_good, &m)?;
            return Err(Error::NonFinite { term, step, last_good });
        }
        Err(e) => return Err(e),
    };

    let path = dir.join("metrics.csv");
    write_metrics(&outcome.metrics, fs::File::create(&path).at(&path)?)?;
    write_timing(&dir.join("timing.csv"), &outcome.epoch_seconds)?;
    let m = manifest(cfg, &outcome.params, &text_hash, code_version, outcome.steps);
    checkpoint::save(&checkpoint_dir(dir), FINAL, &outcome.params, &m)?;

    let eval = evaluate(corpus, cfg, &outcome.params, tasks)?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        code_version: code_version.to_string(),
        train_seed: cfg.train.seed,
        data_seed: cfg.data.seed,
        steps: outcome.steps,
        epochs_run: outcome.epochs_run,
        stopped_early: outcome.stopped_early,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        best_valid: outcome.best_valid,
        text_encoder_unchanged: outcome.text_hash_before == outcome.text_hash_after,
        text_encoder_hash: outcome.text_hash_after,
        eval,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One family of cells: the Cartesian product of the listed axes. Axes left
/// out keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub terms: Option<Vec<String>>,
    pub alignment: Option<Vec<Alignment>>,
    pub kernel: Option<Vec<Kernel>>,
    pub lambda: Option<Vec<f64>>,
    pub drop_ratios: Option<Vec<Vec<f64>>>,
}

/// Ablation grid file.
///
/// ```toml
/// seeds = [1, 2, 3]
/// tasks = ["zeroshot", "retrieval"]
/// [base.train]
/// epochs = 10
/// [[sweep]]
/// terms = ["VVH+VLH+VVM+VLM", "VVH+VLH", "VVH"]
/// [[sweep]]
/// lambda = [0.1, 0.2, 1.0]
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub base: RunConfig,
    /// Training seeds shared by every cell; empty means the base seed only.
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub sweep: Vec<Sweep>,
}

impl Grid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn tasks(&self) -> Result<Tasks> {
        if self.tasks.is_empty() {
            Tasks::from_names(&["zeroshot", "retrieval"])
        } else {
            Tasks::from_names(&self.tasks)
        }
    }

    /// Every distinct cell in sweep order, duplicates dropped. Cells whose
    /// config fails validation are logged and skipped.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let seeds = if self.seeds.is_empty() {
            vec![self.base.train.seed]
        } else {
            self.seeds.clone()
        };
        let b = &self.base;
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for sweep in &self.sweep {
            let terms = match &sweep.terms {
                Some(v) => v.iter().map(|s| TermToggles::parse(s)).collect::<Result<Vec<_>>>()?,
                None => vec![b.objective.terms],
            };
            let alignments = sweep.alignment.clone().unwrap_or_else(|| vec![b.objective.alignment]);
            let kernels = sweep.kernel.clone().unwrap_or_else(|| vec![b.objective.kernel]);
            let lambdas = sweep.lambda.clone().unwrap_or_else(|| vec![b.objective.lambda]);
            let drops = sweep.drop_ratios.clone().unwrap_or_else(|| vec![b.aggregator.drop_ratios.clone()]);
            for &t in &terms {
                for &a in &alignments {
                    for &k in &kernels {
                        for &l in &lambdas {
                            for d in &drops {
                                for &s in &seeds {
                                    let cell = Cell {
                                        terms: t,
                                        alignment: a,
                                        kernel: k,
                                        lambda: l,
                                        drop_ratios: d.clone(),
                                        seed: s,
                                    };
                                    if let Err(e) = cell.config(b).validate() {
                                        warn!("skipping cell {}: {e}", cell.key());
                                        continue;
                                    }
                                    if seen.insert(cell.key()) {
                                        out.push(cell);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub terms: TermToggles,
    pub alignment: Alignment,
    pub kernel: Kernel,
    pub lambda: f64,
    pub drop_ratios: Vec<f64>,
    pub seed: u64,
}

fn fmt_ratios(r: &[f64]) -> String {
    r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/")
}

impl Cell {
    /// The configuration without its seed, shared by all seeds of a cell.
    pub fn setting(&self) -> String {
        format!(
            "terms={};alignment={};kernel={};lambda={};drop={}",
            self.terms.label(),
            self.alignment.name(),
            self.kernel.name(),
            self.lambda,
            fmt_ratios(&self.drop_ratios)
        )
    }

    pub fn key(&self) -> String {
        format!("{};seed={}", self.setting(), self.seed)
    }

    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.objective.terms = self.terms;
        c.objective.alignment = self.alignment;
        c.objective.kernel = self.kernel;
        c.objective.lambda = self.lambda;
        c.aggregator.drop_ratios = self.drop_ratios.clone();
        c.train.seed = self.seed;
        c.output = None;
        c
    }

    fn dir_name(&self) -> String {
        hex::encode(&Sha256::digest(self.key().as_bytes())[..6])
    }
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub setting: String,
    pub seed: u64,
    pub terms: String,
    pub alignment: String,
    pub kernel: String,
    pub lambda: f64,
    pub drop_ratios: String,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_valid: Option<f64>,
    pub zero_shot_auc: Option<f64>,
    pub retrieval_p5: Option<f64>,
    pub retrieval_chance: Option<f64>,
    pub probe_auc: Option<f64>,
}

impl ResultRow {
    fn new(cell: &Cell, s: &RunSummary) -> Self {
        let p5 = s
            .eval
            .retrieval
            .as_ref()
            .and_then(|r| r.ks.iter().position(|&k| k == 5).map(|i| r.precision[i]));
        Self {
            setting: cell.setting(),
            seed: cell.seed,
            terms: cell.terms.label(),
            alignment: cell.alignment.name().to_string(),
            kernel: cell.kernel.name().to_string(),
            lambda: cell.lambda,
            drop_ratios: fmt_ratios(&cell.drop_ratios),
            steps: s.steps,
            initial_loss: s.initial_loss,
            final_loss: s.final_loss,
            best_valid: s.best_valid,
            zero_shot_auc: s.eval.zero_shot.as_ref().and_then(|z| z.macro_auc),
            retrieval_p5: p5,
            retrieval_chance: s.eval.retrieval.as_ref().map(|r| r.chance),
            probe_auc: s.eval.linear_probe.last().and_then(|p| p.macro_auc),
        }
    }
}

const DONE: &str = "DONE";

/// Runs every cell of `grid` under `out/cells/`, skipping cells that
/// already carry a completion marker, then writes `out/results.csv`.
pub fn ablate(grid: &Grid, out: &Path, code_version: &str) -> Result<Vec<ResultRow>> {
    let cells = grid.cells()?;
    let tasks = grid.tasks()?;
    fs::create_dir_all(out).at(out)?;
    let mut corpus = None;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let dir = out.join("cells").join(cell.dir_name());
        let row_path = dir.join("row.json");
        if dir.join(DONE).exists() {
            let text = fs::read_to_string(&row_path).at(&row_path)?;
            let row = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: row_path.clone(),
                msg: e.to_string(),
            })?;
            info!("cell {}/{} already done: {}", i + 1, cells.len(), cell.key());
            rows.push(row);
            continue;
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).at(&dir)?;
        }
        info!("cell {}/{}: {}", i + 1, cells.len(), cell.key());
        let cfg = cell.config(&grid.base);
        if corpus.is_none() {
            corpus = Some(corpus_for(&grid.base)?);
        }
        let summary = execute(&cfg, corpus.as_ref().expect("corpus loaded"), &dir, &tasks, code_version)?;
        let row = ResultRow::new(cell, &summary);
        write_json(&row_path, &row)?;
        fs::write(dir.join(DONE), b"").at(&dir)?;
        rows.push(row);
    }
    write_results(&out.join("results.csv"), &rows)?;
    Ok(rows)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        // csv only emits headers alongside the first record
        w.write_record([
            "setting",
            "seed",
            "terms",
            "alignment",
            "kernel",
            "lambda",
            "drop_ratios",
            "steps",
            "initial_loss",
            "final_loss",
            "best_valid",
            "zero_shot_auc",
            "retrieval_p5",
            "retrieval_chance",
            "probe_auc",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}
