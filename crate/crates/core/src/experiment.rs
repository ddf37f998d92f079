//! End-to-end experiments: load or generate data, split by class, train one
//! or more variants, evaluate every requested way/shot pair and collect a
//! summary table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, generate_synthetic, load_csv, Dataset, SplitManifest, SplitSpec, SyntheticSpec};
use crate::episodic::UnlabeledMode;
use crate::error::{EtmError, Result};
use crate::evaluator::{evaluate_with, EvalConfig, EvalReport, InferenceRule};
use crate::json::write_json;
use crate::par::Execution;
use crate::trainer::{write_log_jsonl, LossKind, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::Csv { path } => load_csv(path),
        }
    }
}

/// Class-level partition. Explicit counts win over fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_classes: Option<usize>,
    pub val_classes: Option<usize>,
    pub test_classes: Option<usize>,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_classes: None,
            val_classes: None,
            test_classes: None,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn spec(&self, ds: &Dataset, labeled_fraction: f64, seed: u64) -> Result<SplitSpec> {
        let classes = ds.classes();
        match (self.train_classes, self.val_classes, self.test_classes) {
            (Some(tr), va, te) => {
                let va = va.unwrap_or(0);
                let te = te.unwrap_or(classes.len().saturating_sub(tr + va));
                SplitSpec::by_counts(&classes, tr, va, te, labeled_fraction, seed)
            }
            (None, None, None) => {
                SplitSpec::by_fractions(&classes, self.train_fraction, self.val_fraction, labeled_fraction, seed)
            }
            _ => Err(EtmError::Config("class counts need train_classes set".into())),
        }
    }
}

/// One trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    #[serde(default)]
    pub loss_kind: LossKind,
    #[serde(default = "one")]
    pub labeled_fraction: f64,
    #[serde(default)]
    pub unlabeled_mode: UnlabeledMode,
    #[serde(default)]
    pub n_unlabeled: usize,
    /// Defaults to the vote rule for ETM and nearest prototype for the baseline.
    #[serde(default)]
    pub inference: Option<InferenceRule>,
}

fn one() -> f64 {
    1.0
}

impl RunSpec {
    pub fn inference_rule(&self) -> InferenceRule {
        self.inference.unwrap_or(match self.loss_kind {
            LossKind::Etm => InferenceRule::TopKVote,
            LossKind::Prototypical => InferenceRule::NearestPrototype,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WayShot {
    pub way: usize,
    pub shot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub runs: Vec<RunSpec>,
    pub evals: Vec<WayShot>,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_eval_queries")]
    pub eval_queries: usize,
    /// Seeds the split, training and evaluation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_eval_episodes() -> usize {
    1000
}

fn default_eval_queries() -> usize {
    15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub loss_kind: LossKind,
    pub labeled_fraction: f64,
    pub unlabeled_mode: UnlabeledMode,
    pub way: usize,
    pub shot: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub reports: Vec<EvalReport>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() || self.evals.is_empty() {
            return Err(EtmError::Config("experiment needs at least one run and one eval".into()));
        }
        let mut names: Vec<&str> = self.runs.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(EtmError::Config("run names must be unique".into()));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(EtmError::Config("run names must be non-empty plain names".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, run: &RunSpec) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = self.seed;
        cfg.loss_kind = run.loss_kind;
        cfg.episode.unlabeled_mode = run.unlabeled_mode;
        cfg.episode.n_unlabeled = run.n_unlabeled;
        cfg
    }

    pub fn eval_config(&self, run: &RunSpec, ws: WayShot) -> EvalConfig {
        EvalConfig {
            way: ws.way,
            shot: ws.shot,
            queries_per_class: self.eval_queries,
            episodes: self.eval_episodes,
            n_positive: self.train.mining.n_positive,
            seed: self.seed,
            inference: run.inference_rule(),
        }
    }
}

/// Trains and evaluates one run. Artifacts go under `out` when given.
pub fn run_one(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    run: &RunSpec,
    out: Option<&Path>,
    exec: Execution,
) -> Result<RunOutcome> {
    let spec = cfg.split.spec(ds, run.labeled_fraction, cfg.seed)?;
    let split = dataset::split(ds, &spec, cfg.seed)?;
    let mut trainer = Trainer::new(&split.train_labeled, &split.train_unlabeled, cfg.train_config(run))?
        .with_validation(&split.val)
        .with_execution(exec);
    trainer.run()?;

    let mut reports = Vec::with_capacity(cfg.evals.len());
    for ws in &cfg.evals {
        reports.push(evaluate_with(trainer.network(), &split.test, &cfg.eval_config(run, *ws), exec)?);
    }

    if let Some(root) = out {
        let dir = root.join(&run.name);
        std::fs::create_dir_all(&dir).map_err(|e| EtmError::io(&dir, e))?;
        write_json(&SplitManifest::new(&spec, cfg.seed), dir.join("split.json"))?;
        trainer.checkpoint().save(dir.join("checkpoint.json"))?;
        write_log_jsonl(trainer.log(), dir.join("train_log.jsonl"))?;
        for r in &reports {
            let stem = format!("eval_{}way_{}shot", r.config.way, r.config.shot);
            r.save_json(dir.join(format!("{stem}.json")))?;
            r.save_accuracies_csv(dir.join(format!("{stem}.csv")))?;
        }
    }
    Ok(RunOutcome {
        spec: run.clone(),
        reports,
    })
}

pub fn summarize(outcomes: &[RunOutcome]) -> Vec<SummaryRow> {
    outcomes
        .iter()
        .flat_map(|o| {
            o.reports.iter().map(move |r| SummaryRow {
                run: o.spec.name.clone(),
                loss_kind: o.spec.loss_kind,
                labeled_fraction: o.spec.labeled_fraction,
                unlabeled_mode: o.spec.unlabeled_mode,
                way: r.config.way,
                shot: r.config.shot,
                mean_acc: r.mean_accuracy,
                ci95: r.ci95,
            })
        })
        .collect()
}

pub fn write_summary(rows: &[SummaryRow], dir: &Path) -> Result<()> {
    write_json(rows, dir.join("summary.json"))?;
    let path = dir.join("summary.csv");
    let mut text = String::from("run,loss_kind,labeled_fraction,unlabeled_mode,way,shot,mean_acc,ci95\n");
    for r in rows {
        let kind = serde_json::to_value(r.loss_kind).expect("serializable");
        let mode = serde_json::to_value(r.unlabeled_mode).expect("serializable");
        text.push_str(&format!(
            "{},{},{:?},{},{},{},{:?},{:?}\n",
            r.run,
            kind.as_str().unwrap_or_default(),
            r.labeled_fraction,
            mode.as_str().unwrap_or_default(),
            r.way,
            r.shot,
            r.mean_acc,
            r.ci95
        ));
    }
    std::fs::write(&path, text).map_err(|e| EtmError::io(&path, e))
}

/// Runs every configured variant. With `out`, the directory receives a copy
/// of the config, per-run artifacts and `summary.{json,csv}`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, exec: Execution) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| EtmError::io(dir, e))?;
        write_json(cfg, dir.join("config.json"))?;
    }
    let outcomes = cfg
        .runs
        .iter()
        .map(|run| run_one(cfg, &ds, run, out, exec))
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&outcomes);
    if let Some(dir) = out {
        write_summary(&rows, dir)?;
    }
    Ok(rows)
}
