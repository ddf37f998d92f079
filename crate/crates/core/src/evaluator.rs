//! N-way K-shot evaluation.
//!
//! Inference looks at the `n_P` support samples nearest to a query and
//! takes a majority vote over their classes. Vote ties go to the class
//! whose voters are closer on average, then to the lower class id. For
//! 1-shot episodes every neighbour has a distinct class, so the rule
//! reduces to plain nearest-neighbour.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Dataset, SampleId};
use crate::embedder::EmbeddingNet;
use crate::episodic::{episode_rng, sample_episode, EpisodeConfig};
use crate::error::{EtmError, Result};
use crate::mining::{euclidean, top_k};
use crate::par::Execution;
use crate::proto;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub class: ClassId,
    pub votes: usize,
    /// Mean distance from the query to the winning class's voters.
    pub mean_distance: f64,
}

/// Top-`n_P` vote with the full tie-break chain.
pub fn infer_detailed(
    query: ArrayView1<f64>,
    support: ArrayView2<f64>,
    support_labels: &[ClassId],
    n_positive: usize,
) -> Result<Prediction> {
    if support.nrows() == 0 || support.nrows() != support_labels.len() {
        return Err(EtmError::Config(format!(
            "inference needs a non-empty support set with one label per row ({} rows, {} labels)",
            support.nrows(),
            support_labels.len()
        )));
    }
    if support.ncols() != query.len() {
        return Err(EtmError::Shape("query and support dimensions differ".into()));
    }
    let dists = ndarray::Array1::from_iter(support.rows().into_iter().map(|s| euclidean(query, s)));
    let all: Vec<usize> = (0..dists.len()).collect();
    let nearest = top_k(dists.view(), &all, n_positive.max(1), false);

    let mut tally: BTreeMap<ClassId, (usize, f64)> = BTreeMap::new();
    for &j in &nearest {
        let e = tally.entry(support_labels[j]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += dists[j];
    }
    // BTreeMap iterates in class order, so strict comparisons keep the
    // lower class id on a full tie.
    let mut best: Option<Prediction> = None;
    for (class, (votes, sum)) in tally {
        let mean_distance = sum / votes as f64;
        let better = match &best {
            None => true,
            Some(b) => votes > b.votes || (votes == b.votes && mean_distance < b.mean_distance),
        };
        if better {
            best = Some(Prediction {
                class,
                votes,
                mean_distance,
            });
        }
    }
    Ok(best.expect("at least one neighbour"))
}

pub fn infer(
    query: ArrayView1<f64>,
    support: ArrayView2<f64>,
    support_labels: &[ClassId],
    n_positive: usize,
) -> Result<ClassId> {
    infer_detailed(query, support, support_labels, n_positive).map(|p| p.class)
}

/// How an evaluated embedding turns support sets into predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceRule {
    /// Top-`n_P` nearest support samples, majority vote.
    #[default]
    TopKVote,
    /// Nearest class prototype (the prototypical baseline's rule).
    NearestPrototype,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub n_positive: usize,
    pub seed: u64,
    #[serde(default)]
    pub inference: InferenceRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            way: 5,
            shot: 1,
            queries_per_class: 15,
            episodes: 1000,
            n_positive: 3,
            seed: 0,
            inference: InferenceRule::TopKVote,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot < 1 || self.episodes < 1 || self.queries_per_class < 1 || self.n_positive < 1 {
            return Err(EtmError::Config(format!(
                "evaluation needs way >= 2, shot, queries, episodes and n_P >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }

    fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_way: self.way,
            n_support: self.shot,
            n_query: self.queries_per_class,
            ..EpisodeConfig::default().supervised()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub seed: u64,
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub episode_accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(config: EvalConfig, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        EvalReport {
            config,
            seed: config.seed,
            episodes: accuracies.len(),
            mean_accuracy: mean,
            std_accuracy: std,
            ci95: 1.96 * std / n.sqrt(),
            episode_accuracies: accuracies,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::json::write_json(self, path)
    }

    /// One `episode,accuracy` row per episode.
    pub fn save_accuracies_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "episode,accuracy")?;
            for (i, a) in self.episode_accuracies.iter().enumerate() {
                writeln!(w, "{i},{a:?}")?;
            }
            w.flush()
        };
        write().map_err(|e| EtmError::io(path, e))
    }
}

pub fn evaluate(net: &EmbeddingNet, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate_with(net, test, cfg, Execution::default())
}

/// Runs `cfg.episodes` seeded episodes over `test` and reports accuracy.
///
/// Episode `i` uses the RNG stream `seed + i`, so the report does not
/// depend on the execution mode.
pub fn evaluate_with(net: &EmbeddingNet, test: &Dataset, cfg: &EvalConfig, exec: Execution) -> Result<EvalReport> {
    cfg.validate()?;
    let classes = test.classes();
    if classes.len() < cfg.way {
        return Err(EtmError::Config(format!(
            "{}-way evaluation needs {} test classes, found {}",
            cfg.way,
            cfg.way,
            classes.len()
        )));
    }
    let need = cfg.shot + cfg.queries_per_class;
    if let Some(c) = classes.iter().find(|c| test.class_members(**c).len() < need) {
        return Err(EtmError::Config(format!(
            "test class {c} has {} samples, {}-shot evaluation with {} queries needs {need}",
            test.class_members(*c).len(),
            cfg.shot,
            cfg.queries_per_class
        )));
    }

    let labeled: Vec<SampleId> = test.class_index().values().flatten().copied().collect();
    let embeddings = net.embed(test.features(&labeled)?.view())?;
    let row_of: HashMap<SampleId, usize> = labeled.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let empty = Dataset::new(test.feature_dim(), Vec::new())?;
    let ep_cfg = cfg.episode_config();

    let accuracies = exec.try_map(cfg.episodes, |i| -> Result<f64> {
        let ep = sample_episode(test, &empty, &ep_cfg, &mut episode_rng(cfg.seed, i as u64))?;
        let rows = |ids: Vec<SampleId>| -> Vec<usize> { ids.iter().map(|id| row_of[id]).collect() };
        let es = embeddings.select(Axis(0), &rows(ep.support_ids()));
        let eq = embeddings.select(Axis(0), &rows(ep.query_ids()));
        let predictions = predict(&eq, &es, &ep.support_labels(), cfg)?;
        let correct = predictions
            .iter()
            .zip(ep.query_labels())
            .filter(|(p, t)| **p == *t)
            .count();
        Ok(correct as f64 / ep.query.len() as f64)
    })?;
    Ok(EvalReport::from_accuracies(*cfg, accuracies))
}

fn predict(
    queries: &Array2<f64>,
    support: &Array2<f64>,
    support_labels: &[ClassId],
    cfg: &EvalConfig,
) -> Result<Vec<ClassId>> {
    match cfg.inference {
        InferenceRule::TopKVote => queries
            .rows()
            .into_iter()
            .map(|q| infer(q, support.view(), support_labels, cfg.n_positive))
            .collect(),
        InferenceRule::NearestPrototype => {
            let protos = proto::prototypes(support.view(), support_labels)?;
            proto::proto_infer(queries.view(), &protos)
        }
    }
}
