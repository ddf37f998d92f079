//! Episode-loop training with Adam and a step-decay learning rate.
//!
//! One optimizer step per episode. When the episode config draws unlabeled
//! samples, the first `warmup_supervised_episodes` episodes run fully
//! supervised; afterwards the unlabeled draw is pseudo-labeled against the
//! support and appended to it before the loss is computed.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleId};
use crate::embedder::{EmbeddingNet, Gradients};
use crate::episodic::{episode_rng, sample_episode, EpisodeConfig};
use crate::error::{EtmError, Result};
use crate::evaluator::{evaluate_with, EvalConfig};
use crate::json::{read_json, write_json};
use crate::mining::{self, MiningConfig};
use crate::par::Execution;
use crate::proto;
use crate::semisup;

/// Salt separating episode RNG streams from the initialisation stream.
const EPISODE_STREAM_SALT: u64 = 0x5eed_0e91_50de_0001;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Etm,
    #[serde(alias = "proto")]
    Prototypical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_supervised_episodes: usize,
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub mining: MiningConfig,
    pub loss_kind: LossKind,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    /// Global-norm gradient clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Validation check interval in episodes (0 disables).
    pub monitor_every: usize,
    pub monitor_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 10_000,
            lr0: 1e-3,
            lr_halving_period: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_supervised_episodes: 50,
            seed: 0,
            episode: EpisodeConfig::default(),
            mining: MiningConfig::default(),
            loss_kind: LossKind::Etm,
            hidden_dims: vec![64, 64],
            embedding_dim: 128,
            grad_clip: None,
            monitor_every: 500,
            monitor_episodes: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(EtmError::Config("episodes must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || self.lr_halving_period == 0 {
            return Err(EtmError::Config("lr0 must be positive and lr_halving_period non-zero".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(EtmError::Config("Adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(EtmError::Config("layer widths must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(EtmError::Config("grad_clip must be positive".into()));
            }
        }
        self.episode.validate()?;
        self.mining.validate()
    }

    pub fn layer_dims(&self, feature_dim: usize) -> Vec<usize> {
        let mut dims = vec![feature_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// `lr0 · 0.5^⌊episode / period⌋`.
pub fn lr_at(episode: u64, cfg: &TrainConfig) -> f64 {
    let halvings = episode / cfg.lr_halving_period as u64;
    cfg.lr0 * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(net: &EmbeddingNet) -> Self {
        AdamState {
            m: vec![0.0; net.num_params()],
            v: vec![0.0; net.num_params()],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort without
/// touching the network or the state.
pub fn adam_step(
    net: &mut EmbeddingNet,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    params: &AdamParams,
) -> Result<()> {
    let n = net.num_params();
    if state.m.len() != n || state.v.len() != n || grads.iter().count() != n {
        return Err(EtmError::Shape("optimizer state does not match the network".into()));
    }
    if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(EtmError::Training(format!(
            "non-finite gradient {g} at parameter {i} (step {})",
            state.t + 1
        )));
    }
    state.t += 1;
    let t = state.t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - params.beta1.powi(t);
    let c2 = 1.0 - params.beta2.powi(t);
    for (((p, g), m), v) in net
        .params_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = params.beta1 * *m + (1.0 - params.beta1) * g;
        *v = params.beta2 * *v + (1.0 - params.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + params.eps);
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub loss: f64,
    pub lr: f64,
    /// Support size after pseudo-labeled samples were appended.
    pub n_support_effective: usize,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

impl EpisodeRecord {
    /// The record without its wall-clock field, for reproducibility checks.
    pub fn deterministic_part(&self) -> (u64, u64, u64, usize, Option<u64>) {
        (
            self.episode,
            self.loss.to_bits(),
            self.lr.to_bits(),
            self.n_support_effective,
            self.val_accuracy.map(f64::to_bits),
        )
    }
}

pub fn write_log_jsonl(records: &[EpisodeRecord], path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| EtmError::io(path, e))
}

/// Episode RNG position: the stream for episode `i` is derived from
/// `base_seed` and `i`, so this pair is the complete RNG state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub base_seed: u64,
    pub next_episode: u64,
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub params: Vec<f64>,
    pub episode: u64,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = read_json(path.as_ref())?;
        ck.network()?;
        if ck.adam.m.len() != ck.params.len() || ck.adam.v.len() != ck.params.len() {
            return Err(EtmError::Consistency(format!(
                "{}: optimizer state does not match parameters",
                path.as_ref().display()
            )));
        }
        Ok(ck)
    }

    pub fn network(&self) -> Result<EmbeddingNet> {
        let net = EmbeddingNet::from_flat(&self.layer_dims, &self.params)?;
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(EtmError::Consistency("checkpoint holds non-finite parameters".into()));
        }
        Ok(net)
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    labeled: &'a Dataset,
    unlabeled: &'a Dataset,
    validation: Option<&'a Dataset>,
    net: EmbeddingNet,
    adam: AdamState,
    episode: u64,
    log: Vec<EpisodeRecord>,
    exec: Execution,
}

impl<'a> Trainer<'a> {
    pub fn new(labeled: &'a Dataset, unlabeled: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = EmbeddingNet::init(&cfg.layer_dims(labeled.feature_dim()), cfg.seed)?;
        let adam = AdamState::new(&net);
        Self::assemble(labeled, unlabeled, cfg, net, adam, 0)
    }

    /// Continues from a checkpoint. `episodes` overrides the stored target
    /// when given.
    pub fn resume(
        labeled: &'a Dataset,
        unlabeled: &'a Dataset,
        checkpoint: &Checkpoint,
        episodes: Option<usize>,
    ) -> Result<Self> {
        let mut cfg = checkpoint.config.clone();
        if let Some(n) = episodes {
            cfg.episodes = n;
        }
        cfg.validate()?;
        if checkpoint.rng.base_seed != cfg.seed || checkpoint.rng.next_episode != checkpoint.episode {
            return Err(EtmError::Consistency("checkpoint RNG state does not match its config".into()));
        }
        let net = checkpoint.network()?;
        Self::assemble(labeled, unlabeled, cfg, net, checkpoint.adam.clone(), checkpoint.episode)
    }

    fn assemble(
        labeled: &'a Dataset,
        unlabeled: &'a Dataset,
        cfg: TrainConfig,
        net: EmbeddingNet,
        adam: AdamState,
        episode: u64,
    ) -> Result<Self> {
        if net.input_dim() != labeled.feature_dim() {
            return Err(EtmError::Shape(format!(
                "network expects {} features, data has {}",
                net.input_dim(),
                labeled.feature_dim()
            )));
        }
        if !unlabeled.is_empty() && unlabeled.feature_dim() != labeled.feature_dim() {
            return Err(EtmError::Shape("labeled and unlabeled feature dimensions differ".into()));
        }
        Ok(Trainer {
            cfg,
            labeled,
            unlabeled,
            validation: None,
            net,
            adam,
            episode,
            log: Vec::new(),
            exec: Execution::default(),
        })
    }

    /// Enables periodic accuracy checks on held-out classes. The checks
    /// only read the network and never influence training.
    pub fn with_validation(mut self, val: &'a Dataset) -> Self {
        self.validation = (!val.is_empty()).then_some(val);
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &EmbeddingNet {
        &self.net
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn log(&self) -> &[EpisodeRecord] {
        &self.log
    }

    pub fn is_finished(&self) -> bool {
        self.episode >= self.cfg.episodes as u64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layer_dims: self.net.layer_dims().to_vec(),
            params: self.net.to_flat(),
            episode: self.episode,
            config: self.cfg.clone(),
            adam: self.adam.clone(),
            rng: RngState {
                base_seed: self.cfg.seed,
                next_episode: self.episode,
            },
        }
    }

    /// True when episode `index` pseudo-labels an unlabeled draw.
    pub fn is_semi_supervised_episode(&self, index: u64) -> bool {
        self.cfg.episode.uses_unlabeled() && index >= self.cfg.warmup_supervised_episodes as u64
    }

    fn gather(&self, support: &[SampleId], unlabeled: &[SampleId], query: &[SampleId]) -> Result<Array2<f64>> {
        let parts = [
            self.labeled.features(support)?,
            self.unlabeled.features(unlabeled)?,
            self.labeled.features(query)?,
        ];
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| EtmError::Shape(e.to_string()))
    }

    /// Runs one training episode and returns its log record.
    pub fn step(&mut self) -> Result<EpisodeRecord> {
        let started = Instant::now();
        let index = self.episode;
        let semi = self.is_semi_supervised_episode(index);
        let ep_cfg = if semi { self.cfg.episode } else { self.cfg.episode.supervised() };
        let mut rng = episode_rng(self.cfg.seed ^ EPISODE_STREAM_SALT, index);
        let ep = sample_episode(self.labeled, self.unlabeled, &ep_cfg, &mut rng)?;

        let (ns, nr) = (ep.support.len(), ep.unlabeled.len());
        let batch = self.gather(&ep.support_ids(), &ep.unlabeled, &ep.query_ids())?;
        let (emb, trace) = self.net.forward(batch.view())?;
        let support_block = emb.slice(s![..ns + nr, ..]);
        let queries = emb.slice(s![ns + nr.., ..]);

        let mut support_labels = ep.support_labels();
        if nr > 0 {
            let pseudo = semisup::pseudo_label_with(
                emb.slice(s![ns..ns + nr, ..]),
                &ep.unlabeled,
                emb.slice(s![..ns, ..]),
                &support_labels,
                self.cfg.mining.n_positive,
                self.exec,
            )?;
            support_labels = semisup::augment_support(&ep.support, &pseudo)?
                .into_iter()
                .map(|(_, c)| c)
                .collect();
        }
        let query_labels = ep.query_labels();

        let (loss, grad_q, grad_s) = match self.cfg.loss_kind {
            LossKind::Etm => {
                let d = mining::distance_matrix_with(queries, support_block, self.exec)?;
                let results = mining::mine_with(&d, &query_labels, &support_labels, &self.cfg.mining, self.exec)?;
                let loss = mining::episode_loss(&results);
                let (gq, gs) = mining::loss_grad_embeddings_with(
                    queries,
                    support_block,
                    &results,
                    &self.cfg.mining,
                    self.exec,
                )?;
                (loss, gq, gs)
            }
            LossKind::Prototypical => {
                let protos = proto::prototypes(support_block, &support_labels)?;
                let out = proto::proto_loss(queries, &query_labels, &protos)?;
                let gs = proto::prototype_grad_to_support(out.grad_prototypes.view(), &protos, &support_labels)?;
                (out.loss, out.grad_queries, gs)
            }
        };
        if !loss.is_finite() {
            return Err(EtmError::Training(format!("non-finite loss {loss} at episode {index}")));
        }

        let mut grad_emb = Array2::zeros(emb.raw_dim());
        grad_emb.slice_mut(s![..ns + nr, ..]).assign(&grad_s);
        grad_emb.slice_mut(s![ns + nr.., ..]).assign(&grad_q);
        let mut grads = self.net.backward(&trace, grad_emb.view())?;
        if let Some(clip) = self.cfg.grad_clip {
            grads.clip_global_norm(clip);
        }
        let lr = lr_at(index, &self.cfg);
        adam_step(&mut self.net, &grads, &mut self.adam, lr, &self.cfg.adam())?;
        self.episode += 1;

        let val_accuracy = self.monitor();
        let record = EpisodeRecord {
            episode: index,
            loss,
            lr,
            n_support_effective: ns + nr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            val_accuracy,
        };
        self.log.push(record.clone());
        Ok(record)
    }

    fn monitor(&self) -> Option<f64> {
        let val = self.validation?;
        let every = self.cfg.monitor_every as u64;
        if every == 0 || !self.episode.is_multiple_of(every) {
            return None;
        }
        let way = self.cfg.episode.n_way.min(val.classes().len());
        let cfg = EvalConfig {
            way,
            shot: 1,
            queries_per_class: self.cfg.episode.n_query,
            episodes: self.cfg.monitor_episodes.max(1),
            n_positive: self.cfg.mining.n_positive,
            seed: self.cfg.seed.wrapping_add(self.episode),
            ..EvalConfig::default()
        };
        // Validation classes too small for the check simply skip it.
        evaluate_with(&self.net, val, &cfg, self.exec)
            .ok()
            .map(|r| r.mean_accuracy)
    }

    /// Runs episodes until the configured total is reached.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (EmbeddingNet, Vec<EpisodeRecord>) {
        (self.net, self.log)
    }
}

/// Trains a fresh network for `cfg.episodes` episodes.
pub fn train(labeled: &Dataset, unlabeled: &Dataset, cfg: &TrainConfig) -> Result<(EmbeddingNet, Vec<EpisodeRecord>)> {
    let mut trainer = Trainer::new(labeled, unlabeled, cfg.clone())?;
    trainer.run()?;
    Ok(trainer.into_parts())
}
