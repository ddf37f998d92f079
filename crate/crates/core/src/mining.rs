//! Semi-hard triplet mining over a query × support distance matrix.
//!
//! For each query `q` with class `y`:
//!
//! ```text
//! d_P  = mean of the n_P largest distances to support samples of class y
//! d_N  = mean of the n_N smallest distances to support samples of other classes
//! loss = max(d_P - d_N + margin, 0)
//! ```
//!
//! `n_P` and `n_N` are clamped to the number of available positives and
//! negatives. Ties at the top-k boundary go to the lower support column.
//! The episode loss is the sum over queries.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{EtmError, Result};
use crate::par::Execution;

/// Distances below this are treated as coincident points: the gradient of
/// the Euclidean norm is undefined there and is taken as zero.
pub const COINCIDENT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Farthest positives averaged into `d_P`.
    pub n_positive: usize,
    /// Nearest negatives averaged into `d_N`.
    pub n_negative: usize,
    pub margin: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            n_positive: 3,
            n_negative: 5,
            margin: 0.3,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_positive == 0 || self.n_negative == 0 {
            return Err(EtmError::Config("n_positive and n_negative must be at least 1".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(EtmError::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Plain (non-squared) Euclidean distances, queries on rows and support
/// samples on columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, query: usize, support: usize) -> f64 {
        self.values[(query, support)]
    }

    pub fn row(&self, query: usize) -> ArrayView1<'_, f64> {
        self.values.row(query)
    }

    pub fn n_queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_support(&self) -> usize {
        self.values.ncols()
    }
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn distance_matrix(queries: ArrayView2<f64>, support: ArrayView2<f64>) -> Result<DistanceMatrix> {
    distance_matrix_with(queries, support, Execution::default())
}

pub fn distance_matrix_with(
    queries: ArrayView2<f64>,
    support: ArrayView2<f64>,
    exec: Execution,
) -> Result<DistanceMatrix> {
    if queries.ncols() != support.ncols() {
        return Err(EtmError::Shape(format!(
            "query embeddings have dimension {}, support embeddings {}",
            queries.ncols(),
            support.ncols()
        )));
    }
    let (nq, ns) = (queries.nrows(), support.nrows());
    let rows = exec.map(nq, |i| {
        let q = queries.row(i);
        (0..ns).map(|j| euclidean(q, support.row(j))).collect::<Vec<f64>>()
    });
    let values = Array2::from_shape_vec((nq, ns), rows.concat()).expect("row lengths match");
    Ok(DistanceMatrix { values })
}

/// Mining outcome for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryMining {
    pub d_pos: f64,
    pub d_neg: f64,
    pub loss: f64,
    /// Support columns averaged into `d_pos`, farthest first.
    pub positives: Vec<usize>,
    /// Support columns averaged into `d_neg`, nearest first.
    pub negatives: Vec<usize>,
}

impl QueryMining {
    pub fn is_active(&self) -> bool {
        self.loss > 0.0
    }
}

/// Indices of the `k` best entries of `values` among `candidates`.
/// `largest` picks the largest values; ties favour the lower index.
pub fn top_k(values: ArrayView1<f64>, candidates: &[usize], k: usize, largest: bool) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| {
        let by_value = values[a].total_cmp(&values[b]);
        let by_value = if largest { by_value.reverse() } else { by_value };
        by_value.then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn mean_of(values: ArrayView1<f64>, picks: &[usize]) -> f64 {
    picks.iter().map(|&j| values[j]).sum::<f64>() / picks.len() as f64
}

/// Mines one query row.
pub fn mine_query(
    distances: ArrayView1<f64>,
    query_label: ClassId,
    support_labels: &[ClassId],
    cfg: &MiningConfig,
    query_index: usize,
) -> Result<QueryMining> {
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..support_labels.len()).partition(|&j| support_labels[j] == query_label);
    if pos.is_empty() || neg.is_empty() {
        return Err(EtmError::Mining(format!(
            "query {query_index} (class {query_label}) has {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let positives = top_k(distances, &pos, cfg.n_positive, true);
    let negatives = top_k(distances, &neg, cfg.n_negative, false);
    let d_pos = mean_of(distances, &positives);
    let d_neg = mean_of(distances, &negatives);
    Ok(QueryMining {
        d_pos,
        d_neg,
        loss: (d_pos - d_neg + cfg.margin).max(0.0),
        positives,
        negatives,
    })
}

pub fn mine(
    distances: &DistanceMatrix,
    query_labels: &[ClassId],
    support_labels: &[ClassId],
    cfg: &MiningConfig,
) -> Result<Vec<QueryMining>> {
    mine_with(distances, query_labels, support_labels, cfg, Execution::default())
}

pub fn mine_with(
    distances: &DistanceMatrix,
    query_labels: &[ClassId],
    support_labels: &[ClassId],
    cfg: &MiningConfig,
    exec: Execution,
) -> Result<Vec<QueryMining>> {
    cfg.validate()?;
    if query_labels.len() != distances.n_queries() || support_labels.len() != distances.n_support() {
        return Err(EtmError::Shape(format!(
            "labels ({}, {}) do not match distance matrix {:?}",
            query_labels.len(),
            support_labels.len(),
            distances.values.dim()
        )));
    }
    exec.try_map(distances.n_queries(), |i| {
        mine_query(distances.row(i), query_labels[i], support_labels, cfg, i)
    })
}

/// Sum of per-query hinge losses.
pub fn episode_loss(results: &[QueryMining]) -> f64 {
    results.iter().map(|r| r.loss).sum()
}

pub fn loss_grad_embeddings(
    queries: ArrayView2<f64>,
    support: ArrayView2<f64>,
    results: &[QueryMining],
    cfg: &MiningConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    loss_grad_embeddings_with(queries, support, results, cfg, Execution::default())
}

/// Gradient of [`episode_loss`] with respect to every query and support
/// embedding, holding the mined index sets fixed.
///
/// Support gradients are accumulated in query order, so the result does
/// not depend on the execution mode.
pub fn loss_grad_embeddings_with(
    queries: ArrayView2<f64>,
    support: ArrayView2<f64>,
    results: &[QueryMining],
    cfg: &MiningConfig,
    exec: Execution,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if queries.ncols() != support.ncols() {
        return Err(EtmError::Shape("query and support dimensions differ".into()));
    }
    if results.len() != queries.nrows() {
        return Err(EtmError::Consistency(format!(
            "{} mining results for {} queries",
            results.len(),
            queries.nrows()
        )));
    }
    let dim = queries.ncols();
    let ns = support.nrows();

    // Per query: its own gradient row plus (column, contribution) pairs.
    type QueryGrad = (Vec<f64>, Vec<(usize, Vec<f64>)>);
    let parts = exec.try_map(results.len(), |i| -> Result<QueryGrad> {
        let r = &results[i];
        let q = queries.row(i);
        if r.positives.iter().chain(&r.negatives).any(|&j| j >= ns)
            || r.positives.is_empty()
            || r.negatives.is_empty()
        {
            return Err(EtmError::Consistency(format!("query {i}: stale support indices")));
        }
        let dists = |picks: &[usize]| -> Vec<f64> {
            picks.iter().map(|&j| euclidean(q, support.row(j))).collect()
        };
        let pos_d = dists(&r.positives);
        let neg_d = dists(&r.negatives);
        let d_pos = pos_d.iter().sum::<f64>() / pos_d.len() as f64;
        let d_neg = neg_d.iter().sum::<f64>() / neg_d.len() as f64;
        let tol = |x: f64| 1e-9 * (1.0 + x.abs());
        if (d_pos - r.d_pos).abs() > tol(r.d_pos) || (d_neg - r.d_neg).abs() > tol(r.d_neg) {
            return Err(EtmError::Consistency(format!(
                "query {i}: mining results do not match these embeddings"
            )));
        }
        let expected_loss = (r.d_pos - r.d_neg + cfg.margin).max(0.0);
        if (expected_loss - r.loss).abs() > tol(r.loss) {
            return Err(EtmError::Consistency(format!(
                "query {i}: loss does not match margin {}",
                cfg.margin
            )));
        }

        let mut gq = vec![0.0; dim];
        let mut contrib = Vec::new();
        if !r.is_active() {
            return Ok((gq, contrib));
        }
        let mut route = |picks: &[usize], ds: &[f64], sign: f64| {
            let w = sign / picks.len() as f64;
            for (&j, &d) in picks.iter().zip(ds) {
                if d < COINCIDENT_EPS {
                    continue;
                }
                let s = support.row(j);
                let unit: Vec<f64> = q.iter().zip(s.iter()).map(|(a, b)| w * (a - b) / d).collect();
                gq.iter_mut().zip(&unit).for_each(|(g, u)| *g += u);
                contrib.push((j, unit.into_iter().map(|u| -u).collect()));
            }
        };
        route(&r.positives, &pos_d, 1.0);
        route(&r.negatives, &neg_d, -1.0);
        Ok((gq, contrib))
    })?;

    let mut grad_q = Array2::zeros((queries.nrows(), dim));
    let mut grad_s = Array2::zeros((ns, dim));
    for (i, (gq, contrib)) in parts.into_iter().enumerate() {
        grad_q.row_mut(i).iter_mut().zip(&gq).for_each(|(o, g)| *o = *g);
        for (j, g) in contrib {
            grad_s.row_mut(j).iter_mut().zip(&g).for_each(|(o, v)| *o += v);
        }
    }
    Ok((grad_q, grad_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn labels(v: &[u32]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    #[test]
    fn three_four_five() {
        let d = distance_matrix(array![[0.0, 0.0]].view(), array![[3.0, 4.0], [0.0, 0.0]].view()).unwrap();
        assert_eq!(d.values(), &array![[5.0, 0.0]]);
    }

    #[test]
    fn swapped_arguments_transpose() {
        let a = array![[0.1, 2.0, -1.0], [3.0, 0.5, 0.2]];
        let b = array![[1.0, 1.0, 1.0], [0.0, -2.0, 4.0], [7.0, 0.0, 0.0]];
        let ab = distance_matrix(a.view(), b.view()).unwrap();
        let ba = distance_matrix(b.view(), a.view()).unwrap();
        assert_eq!(ab.values(), &ba.values().t());
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let r = distance_matrix(Array2::zeros((1, 2)).view(), Array2::zeros((1, 3)).view());
        assert!(matches!(r, Err(EtmError::Shape(_))));
    }

    #[test]
    fn farthest_positives_are_averaged() {
        // positives at 0.1, 0.5, 0.9; n_P = 2 -> (0.9 + 0.5) / 2
        let row = Array1::from(vec![0.1, 0.5, 0.9, 2.0]);
        let cfg = MiningConfig {
            n_positive: 2,
            n_negative: 1,
            margin: 0.3,
        };
        let r = mine_query(row.view(), ClassId(1), &labels(&[1, 1, 1, 2]), &cfg, 0).unwrap();
        assert!((r.d_pos - 0.7).abs() < 1e-15);
        assert_eq!(r.positives, vec![2, 1]);
        assert_eq!(r.d_neg, 2.0);
    }

    #[test]
    fn inactive_hinge() {
        let row = Array1::from(vec![0.2, 0.6]);
        let r = mine_query(row.view(), ClassId(1), &labels(&[1, 2]), &MiningConfig::default(), 0).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(!r.is_active());
    }

    #[test]
    fn one_shot_clamps_positive_count() {
        let row = Array1::from(vec![0.4, 1.0, 2.0, 3.0]);
        let r = mine_query(row.view(), ClassId(1), &labels(&[1, 2, 3, 4]), &MiningConfig::default(), 0).unwrap();
        assert_eq!(r.positives, vec![0]);
        assert_eq!(r.d_pos, 0.4);
        assert_eq!(r.d_neg, 2.0);
    }

    #[test]
    fn ties_break_to_lower_column() {
        let row = Array1::from(vec![1.0, 1.0, 1.0, 1.0]);
        let cfg = MiningConfig {
            n_positive: 1,
            n_negative: 1,
            margin: 0.0,
        };
        let r = mine_query(row.view(), ClassId(1), &labels(&[2, 1, 1, 2]), &cfg, 0).unwrap();
        assert_eq!(r.positives, vec![1]);
        assert_eq!(r.negatives, vec![0]);
    }

    #[test]
    fn missing_negatives_name_the_query() {
        let d = distance_matrix(Array2::zeros((2, 2)).view(), Array2::ones((2, 2)).view()).unwrap();
        let err = mine(&d, &labels(&[1, 1]), &labels(&[1, 1]), &MiningConfig::default()).unwrap_err();
        match err {
            EtmError::Mining(m) => assert!(m.contains("query 0")),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn episode_loss_sums() {
        let mk = |loss| QueryMining {
            d_pos: 0.0,
            d_neg: 0.0,
            loss,
            positives: vec![],
            negatives: vec![],
        };
        assert_eq!(episode_loss(&[mk(0.0), mk(0.0)]), 0.0);
        assert!((episode_loss(&[mk(0.6), mk(0.0), mk(0.2)]) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn inactive_hinges_have_zero_gradient() {
        let q = array![[0.0, 0.0]];
        let s = array![[0.1, 0.0], [5.0, 0.0]];
        let cfg = MiningConfig::default();
        let d = distance_matrix(q.view(), s.view()).unwrap();
        let r = mine(&d, &labels(&[1]), &labels(&[1, 2]), &cfg).unwrap();
        let (gq, gs) = loss_grad_embeddings(q.view(), s.view(), &r, &cfg).unwrap();
        assert!(gq.iter().chain(gs.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn single_triplet_gradient_is_difference_of_unit_vectors() {
        // positive at (3,4): unit from positive to query is (-0.6,-0.8);
        // negative at (1,0): unit is (-1,0). dL/dq = u_pos - u_neg.
        let q = array![[0.0, 0.0]];
        let s = array![[3.0, 4.0], [1.0, 0.0]];
        let cfg = MiningConfig::default();
        let d = distance_matrix(q.view(), s.view()).unwrap();
        let r = mine(&d, &labels(&[1]), &labels(&[1, 2]), &cfg).unwrap();
        assert!((r[0].loss - (5.0 - 1.0 + 0.3)).abs() < 1e-15);
        let (gq, gs) = loss_grad_embeddings(q.view(), s.view(), &r, &cfg).unwrap();
        assert!((gq[(0, 0)] - 0.4).abs() < 1e-15);
        assert!((gq[(0, 1)] + 0.8).abs() < 1e-15);
        assert_eq!(gs.row(0).to_vec(), vec![0.6, 0.8]);
        assert_eq!(gs.row(1).to_vec(), vec![-1.0, 0.0]);
    }

    #[test]
    fn coincident_points_contribute_no_gradient() {
        let q = array![[1.0, 1.0]];
        let s = array![[1.0, 1.0], [1.0, 1.5]];
        let cfg = MiningConfig::default();
        let d = distance_matrix(q.view(), s.view()).unwrap();
        let r = mine(&d, &labels(&[1]), &labels(&[2, 1]), &cfg).unwrap();
        let (gq, gs) = loss_grad_embeddings(q.view(), s.view(), &r, &cfg).unwrap();
        assert!(gq.iter().all(|g| g.is_finite()));
        assert_eq!(gs.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn stale_results_are_rejected() {
        let q = array![[0.0, 0.0]];
        let s = array![[3.0, 4.0], [1.0, 0.0]];
        let cfg = MiningConfig::default();
        let d = distance_matrix(q.view(), s.view()).unwrap();
        let r = mine(&d, &labels(&[1]), &labels(&[1, 2]), &cfg).unwrap();
        let moved = array![[0.5, 0.0]];
        assert!(matches!(
            loss_grad_embeddings(moved.view(), s.view(), &r, &cfg),
            Err(EtmError::Consistency(_))
        ));
    }

    #[test]
    fn execution_modes_match_bitwise() {
        let q = Array2::from_shape_fn((9, 4), |(i, j)| ((i * 31 + j * 17) % 13) as f64 * 0.37 - 2.0);
        let s = Array2::from_shape_fn((12, 4), |(i, j)| ((i * 7 + j * 29) % 11) as f64 * 0.41 - 2.0);
        let ql: Vec<_> = (0..9).map(|i| ClassId(i as u32 % 3)).collect();
        let sl: Vec<_> = (0..12).map(|i| ClassId(i as u32 % 3)).collect();
        let cfg = MiningConfig::default();
        let run = |exec| {
            let d = distance_matrix_with(q.view(), s.view(), exec).unwrap();
            let r = mine_with(&d, &ql, &sl, &cfg, exec).unwrap();
            let g = loss_grad_embeddings_with(q.view(), s.view(), &r, &cfg, exec).unwrap();
            (d, r, g)
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }
}
