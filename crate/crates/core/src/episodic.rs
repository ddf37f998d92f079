//! Episode construction: class subset `V`, per-class support and query
//! draws, and an optional unlabeled draw for semi-supervised training.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Dataset, SampleId};
use crate::error::{EtmError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledMode {
    #[default]
    None,
    /// Unlabeled draws come from the episode's own classes (uses hidden labels).
    WeaklyLabeled,
    /// Unlabeled draws are uniform over the whole unlabeled pool.
    CompletelyUnlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Classes per episode.
    pub n_way: usize,
    /// Support samples per class.
    pub n_support: usize,
    /// Query samples per class.
    pub n_query: usize,
    /// Unlabeled samples per class slot; 0 disables the unlabeled draw.
    pub n_unlabeled: usize,
    pub unlabeled_mode: UnlabeledMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_way: 5,
            n_support: 20,
            n_query: 15,
            n_unlabeled: 0,
            unlabeled_mode: UnlabeledMode::None,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.n_support < 1 || self.n_query < 1 {
            return Err(EtmError::Config(format!(
                "episode needs n_way >= 2, n_support >= 1, n_query >= 1 (got {}, {}, {})",
                self.n_way, self.n_support, self.n_query
            )));
        }
        Ok(())
    }

    /// True when episodes built from this config carry unlabeled draws.
    pub fn uses_unlabeled(&self) -> bool {
        self.n_unlabeled > 0 && self.unlabeled_mode != UnlabeledMode::None
    }

    /// Same config with the unlabeled draw switched off.
    pub fn supervised(&self) -> Self {
        EpisodeConfig {
            n_unlabeled: 0,
            unlabeled_mode: UnlabeledMode::None,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Sampled classes in draw order.
    pub classes: Vec<ClassId>,
    /// Grouped by class in `classes` order.
    pub support: Vec<(SampleId, ClassId)>,
    pub query: Vec<(SampleId, ClassId)>,
    /// True classes are not carried here.
    pub unlabeled: Vec<SampleId>,
}

impl Episode {
    pub fn support_ids(&self) -> Vec<SampleId> {
        self.support.iter().map(|&(id, _)| id).collect()
    }

    pub fn support_labels(&self) -> Vec<ClassId> {
        self.support.iter().map(|&(_, c)| c).collect()
    }

    pub fn query_ids(&self) -> Vec<SampleId> {
        self.query.iter().map(|&(id, _)| id).collect()
    }

    pub fn query_labels(&self) -> Vec<ClassId> {
        self.query.iter().map(|&(_, c)| c).collect()
    }
}

/// The RNG for episode `index` of a run seeded with `base_seed`.
///
/// Streams are independent per episode so episodes can be generated in any
/// order, or in parallel, with identical results.
pub fn episode_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(index))
}

/// Draws one episode.
///
/// Classes are chosen uniformly without replacement; within each class the
/// support is drawn first and the query from the remainder. Every labeled
/// class must hold at least `n_support + n_query` samples.
pub fn sample_episode<R: Rng + ?Sized>(
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    cfg.validate()?;
    let classes = labeled.classes();
    if classes.len() < cfg.n_way {
        return Err(EtmError::Sampling(format!(
            "episode needs {} classes but the dataset has {}",
            cfg.n_way,
            classes.len()
        )));
    }
    let per_class = cfg.n_support + cfg.n_query;
    for &c in &classes {
        let have = labeled.class_members(c).len();
        if have < per_class {
            return Err(EtmError::Sampling(format!(
                "class {c} has {have} samples, episode needs {per_class}"
            )));
        }
    }

    let chosen: Vec<ClassId> = index::sample(rng, classes.len(), cfg.n_way)
        .into_iter()
        .map(|i| classes[i])
        .collect();

    let mut support = Vec::with_capacity(cfg.n_way * cfg.n_support);
    let mut query = Vec::with_capacity(cfg.n_way * cfg.n_query);
    for &c in &chosen {
        let members = labeled.class_members(c);
        let picks = index::sample(rng, members.len(), per_class).into_vec();
        let (s, q) = picks.split_at(cfg.n_support);
        support.extend(s.iter().map(|&i| (members[i], c)));
        query.extend(q.iter().map(|&i| (members[i], c)));
    }

    let unlabeled_ids = if cfg.uses_unlabeled() {
        draw_unlabeled(unlabeled, &chosen, cfg, rng)?
    } else {
        Vec::new()
    };

    Ok(Episode {
        classes: chosen,
        support,
        query,
        unlabeled: unlabeled_ids,
    })
}

fn draw_unlabeled<R: Rng + ?Sized>(
    pool: &Dataset,
    classes: &[ClassId],
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Vec<SampleId>> {
    if pool.is_empty() {
        return Err(EtmError::Sampling("unlabeled pool is empty".into()));
    }
    match cfg.unlabeled_mode {
        UnlabeledMode::None => Ok(Vec::new()),
        UnlabeledMode::WeaklyLabeled => {
            let mut out = Vec::with_capacity(classes.len() * cfg.n_unlabeled);
            for &c in classes {
                let members = pool.hidden_members(c);
                if members.len() < cfg.n_unlabeled {
                    return Err(EtmError::Sampling(format!(
                        "class {c} has {} unlabeled samples, episode needs {}",
                        members.len(),
                        cfg.n_unlabeled
                    )));
                }
                out.extend(
                    index::sample(rng, members.len(), cfg.n_unlabeled)
                        .into_iter()
                        .map(|i| members[i]),
                );
            }
            Ok(out)
        }
        UnlabeledMode::CompletelyUnlabeled => {
            let want = classes.len() * cfg.n_unlabeled;
            if pool.len() < want {
                return Err(EtmError::Sampling(format!(
                    "unlabeled pool has {} samples, episode needs {want}",
                    pool.len()
                )));
            }
            let samples = pool.samples();
            Ok(index::sample(rng, samples.len(), want)
                .into_iter()
                .map(|i| samples[i].id)
                .collect())
        }
    }
}
