#![allow(dead_code)]

use etm_core::embedder::EmbeddingNet;
use etm_core::mining::{self, MiningConfig, QueryMining};
use etm_core::ClassId;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

/// Finite differences of an O(10) loss at h = 1e-5 carry ~1e-10 of rounding
/// noise, so components below `GRAD_FLOOR` are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Oracle mining: distances recomputed from scratch, full sorts, no top-k.
pub fn brute_force_mine(
    queries: ArrayView2<f64>,
    query_labels: &[ClassId],
    support: ArrayView2<f64>,
    support_labels: &[ClassId],
    cfg: &MiningConfig,
) -> Vec<(f64, f64, f64)> {
    queries
        .rows()
        .into_iter()
        .zip(query_labels)
        .map(|(q, &y)| {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (s, &c) in support.rows().into_iter().zip(support_labels) {
                let d = q.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if c == y {
                    pos.push(d);
                } else {
                    neg.push(d);
                }
            }
            pos.sort_by(|a, b| b.partial_cmp(a).unwrap());
            neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let kp = cfg.n_positive.min(pos.len());
            let kn = cfg.n_negative.min(neg.len());
            let dp = pos[..kp].iter().sum::<f64>() / kp as f64;
            let dn = neg[..kn].iter().sum::<f64>() / kn as f64;
            (dp, dn, (dp - dn + cfg.margin).max(0.0))
        })
        .collect()
}

/// Random labelled episode of raw embeddings.
pub struct RawEpisode {
    pub queries: Array2<f64>,
    pub query_labels: Vec<ClassId>,
    pub support: Array2<f64>,
    pub support_labels: Vec<ClassId>,
}

pub fn random_raw_episode(rng: &mut ChaCha8Rng, max_way: usize, max_shot: usize, max_query: usize, dim: usize) -> RawEpisode {
    let way = rng.random_range(2..=max_way);
    let shot = rng.random_range(1..=max_shot);
    let nq = rng.random_range(1..=max_query);
    let labels = |per: usize| -> Vec<ClassId> { (0..way).flat_map(|c| std::iter::repeat_n(ClassId(c as u32 + 1), per)).collect() };
    RawEpisode {
        queries: gaussian(rng, way * nq, dim),
        query_labels: labels(nq),
        support: gaussian(rng, way * shot, dim),
        support_labels: labels(shot),
    }
}

/// Scalar objective `sum(w * net(x))` used to probe the embedder's backward pass.
fn weighted_output(net: &EmbeddingNet, x: ArrayView2<f64>, w: &Array2<f64>) -> (f64, Vec<bool>) {
    let (out, trace) = net.forward(x).unwrap();
    ((&out * w).sum(), trace.activation_pattern())
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck { max_rel_err: 0.0, checked: 0, skipped: 0 }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.checked += 1;
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    pub fn empty() -> Self {
        Self::new()
    }
}

fn perturbed(net: &EmbeddingNet, flat: &[f64], index: usize, delta: f64) -> EmbeddingNet {
    let mut p = flat.to_vec();
    p[index] += delta;
    EmbeddingNet::from_flat(net.layer_dims(), &p).unwrap()
}

/// Embedder backward against central differences on a random small net.
pub fn embedder_gradcheck(seed: u64, h: f64) -> GradCheck {
    let mut rng = rng(seed);
    let n_layers = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=n_layers).map(|_| rng.random_range(1..=8)).collect();
    let batch = rng.random_range(1..=5);
    let net = EmbeddingNet::init(&dims, seed).unwrap();
    let x = gaussian(&mut rng, batch, dims[0]);
    let w = gaussian(&mut rng, batch, *dims.last().unwrap());

    let (out, trace) = net.forward(x.view()).unwrap();
    assert_eq!(out.dim(), w.dim());
    let base_pattern = trace.activation_pattern();
    let analytic = net.backward(&trace, w.view()).unwrap().to_flat();
    let flat = net.to_flat();

    let mut check = GradCheck::new();
    for (i, &a) in analytic.iter().enumerate() {
        let (lp, pp) = weighted_output(&perturbed(&net, &flat, i, h), x.view(), &w);
        let (lm, pm) = weighted_output(&perturbed(&net, &flat, i, -h), x.view(), &w);
        if pp != base_pattern || pm != base_pattern {
            check.skipped += 1;
            continue;
        }
        check.record(a, (lp - lm) / (2.0 * h));
    }
    check
}

/// Mined index sets and active flags; FD is only valid when these stay put.
type Selection = Vec<(Vec<usize>, Vec<usize>, bool)>;

fn selection(results: &[QueryMining]) -> Selection {
    results.iter().map(|r| (r.positives.clone(), r.negatives.clone(), r.is_active())).collect()
}

fn episode_loss_of(net: &EmbeddingNet, ep: &RawEpisode, cfg: &MiningConfig) -> (f64, Selection, Vec<bool>) {
    let ns = ep.support.nrows();
    let batch = ndarray::concatenate![ndarray::Axis(0), ep.support, ep.queries];
    let (emb, trace) = net.forward(batch.view()).unwrap();
    let s = emb.slice(ndarray::s![..ns, ..]);
    let q = emb.slice(ndarray::s![ns.., ..]);
    let d = mining::distance_matrix(q, s).unwrap();
    let results = mining::mine(&d, &ep.query_labels, &ep.support_labels, cfg).unwrap();
    (mining::episode_loss(&results), selection(&results), trace.activation_pattern())
}

/// d(episode loss)/d(params) through mining and the embedder, against
/// central differences. Perturbations that move a top-k boundary, flip a
/// hinge or cross a rectifier kink are skipped.
pub fn end_to_end_gradcheck(seed: u64, h: f64) -> GradCheck {
    let mut rng = rng(seed);
    let f = rng.random_range(2..=6);
    let dims = vec![f, rng.random_range(4..=8), rng.random_range(4..=8), rng.random_range(2..=4)];
    let net = EmbeddingNet::init(&dims, seed).unwrap();
    let ep = random_raw_episode(&mut rng, 4, 4, 3, f);
    let cfg = MiningConfig {
        n_positive: rng.random_range(1..=3),
        n_negative: rng.random_range(1..=5),
        margin: rng.random_range(0.5..3.0),
    };

    let ns = ep.support.nrows();
    let batch = ndarray::concatenate![ndarray::Axis(0), ep.support, ep.queries];
    let (emb, trace) = net.forward(batch.view()).unwrap();
    let s = emb.slice(ndarray::s![..ns, ..]);
    let q = emb.slice(ndarray::s![ns.., ..]);
    let d = mining::distance_matrix(q, s).unwrap();
    let results = mining::mine(&d, &ep.query_labels, &ep.support_labels, &cfg).unwrap();
    let (gq, gs) = mining::loss_grad_embeddings(q, s, &results, &cfg).unwrap();
    let grad_emb = ndarray::concatenate![ndarray::Axis(0), gs, gq];
    let analytic = net.backward(&trace, grad_emb.view()).unwrap().to_flat();

    let base = (selection(&results), trace.activation_pattern());
    let flat = net.to_flat();
    let mut check = GradCheck::new();
    for (i, &a) in analytic.iter().enumerate() {
        let (lp, sp, pp) = episode_loss_of(&perturbed(&net, &flat, i, h), &ep, &cfg);
        let (lm, sm, pm) = episode_loss_of(&perturbed(&net, &flat, i, -h), &ep, &cfg);
        if sp != base.0 || sm != base.0 || pp != base.1 || pm != base.1 {
            check.skipped += 1;
            continue;
        }
        check.record(a, (lp - lm) / (2.0 * h));
    }
    check
}

/// Runs the mining module against [`brute_force_mine`] on random episodes
/// and returns the largest absolute deviation seen.
pub fn mining_oracle_max_deviation(episodes: u64, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for e in 0..episodes {
        let mut rng = rng(seed.wrapping_add(e));
        let ep = random_raw_episode(&mut rng, 6, 10, 8, 8);
        let cfg = MiningConfig {
            n_positive: rng.random_range(1..=12),
            n_negative: rng.random_range(1..=12),
            margin: rng.random_range(0.0..2.0),
        };
        let d = mining::distance_matrix(ep.queries.view(), ep.support.view()).unwrap();
        let got = mining::mine(&d, &ep.query_labels, &ep.support_labels, &cfg).unwrap();
        let want = brute_force_mine(ep.queries.view(), &ep.query_labels, ep.support.view(), &ep.support_labels, &cfg);
        for (g, w) in got.iter().zip(&want) {
            worst = worst
                .max((g.d_pos - w.0).abs())
                .max((g.d_neg - w.1).abs())
                .max((g.loss - w.2).abs());
        }
    }
    worst
}
