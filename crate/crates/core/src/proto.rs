//! Prototypical-loss baseline.
//!
//! Prototypes are per-class means of support embeddings. The loss is the
//! mean over queries of the cross-entropy of `softmax(-‖q - c_k‖²)` at the
//! true class; prediction picks the nearest prototype.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};

use crate::dataset::ClassId;
use crate::error::{EtmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// Ascending class ids, one per row of `centers`.
    pub classes: Vec<ClassId>,
    pub centers: Array2<f64>,
    /// Support rows averaged into each prototype.
    pub counts: Vec<usize>,
}

impl Prototypes {
    pub fn position(&self, class: ClassId) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }
}

pub fn prototypes(support: ArrayView2<f64>, support_labels: &[ClassId]) -> Result<Prototypes> {
    if support.nrows() == 0 {
        return Err(EtmError::Config("cannot build prototypes from an empty support set".into()));
    }
    if support.nrows() != support_labels.len() {
        return Err(EtmError::Shape(format!(
            "{} support rows but {} labels",
            support.nrows(),
            support_labels.len()
        )));
    }
    let mut groups: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (j, c) in support_labels.iter().enumerate() {
        groups.entry(*c).or_default().push(j);
    }
    let dim = support.ncols();
    let mut centers = Array2::zeros((groups.len(), dim));
    let mut counts = Vec::with_capacity(groups.len());
    for (row, rows) in groups.values().enumerate() {
        let mut sum = Array1::<f64>::zeros(dim);
        for &j in rows {
            sum += &support.row(j);
        }
        centers.row_mut(row).assign(&(sum / rows.len() as f64));
        counts.push(rows.len());
    }
    Ok(Prototypes {
        classes: groups.into_keys().collect(),
        centers,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoLoss {
    pub loss: f64,
    pub grad_queries: Array2<f64>,
    /// Gradient with respect to each prototype row.
    pub grad_prototypes: Array2<f64>,
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn proto_loss(queries: ArrayView2<f64>, query_labels: &[ClassId], protos: &Prototypes) -> Result<ProtoLoss> {
    if queries.nrows() != query_labels.len() || queries.nrows() == 0 {
        return Err(EtmError::Shape(format!(
            "{} query rows but {} labels",
            queries.nrows(),
            query_labels.len()
        )));
    }
    if queries.ncols() != protos.centers.ncols() {
        return Err(EtmError::Shape("query and prototype dimensions differ".into()));
    }
    let n = queries.nrows() as f64;
    let k = protos.classes.len();
    let mut loss = 0.0;
    let mut grad_q = Array2::zeros(queries.raw_dim());
    let mut grad_c = Array2::zeros(protos.centers.raw_dim());
    for (i, (q, label)) in queries.rows().into_iter().zip(query_labels).enumerate() {
        let y = protos
            .position(*label)
            .ok_or_else(|| EtmError::Config(format!("no prototype for query class {label}")))?;
        let d: Vec<f64> = (0..k).map(|c| squared_distance(q, protos.centers.row(c))).collect();
        // log-sum-exp of -d, shifted by the smallest distance
        let d_min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = d.iter().map(|dk| (d_min - dk).exp()).collect();
        let z: f64 = weights.iter().sum();
        loss += d[y] - d_min + z.ln();
        // dloss/dd_k = [k == y] - p_k ; dd_k/dq = 2(q - c_k) ; dd_k/dc_k = -2(q - c_k)
        for (c, w) in weights.iter().enumerate() {
            let coeff = (if c == y { 1.0 } else { 0.0 }) - w / z;
            if coeff == 0.0 {
                continue;
            }
            let center = protos.centers.row(c);
            for ((gq, gc), (qv, cv)) in grad_q
                .row_mut(i)
                .iter_mut()
                .zip(grad_c.row_mut(c).iter_mut())
                .zip(q.iter().zip(center.iter()))
            {
                let g = 2.0 * coeff * (qv - cv) / n;
                *gq += g;
                *gc -= g;
            }
        }
    }
    Ok(ProtoLoss {
        loss: loss / n,
        grad_queries: grad_q,
        grad_prototypes: grad_c,
    })
}

/// Chains prototype gradients back to the support rows that formed them.
pub fn prototype_grad_to_support(
    grad_prototypes: ArrayView2<f64>,
    protos: &Prototypes,
    support_labels: &[ClassId],
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((support_labels.len(), grad_prototypes.ncols()));
    for (j, c) in support_labels.iter().enumerate() {
        let p = protos
            .position(*c)
            .ok_or_else(|| EtmError::Consistency(format!("support class {c} has no prototype")))?;
        out.row_mut(j)
            .assign(&(&grad_prototypes.row(p) / protos.counts[p] as f64));
    }
    Ok(out)
}

/// Nearest prototype per query; ties go to the lower class id.
pub fn proto_infer(queries: ArrayView2<f64>, protos: &Prototypes) -> Result<Vec<ClassId>> {
    if queries.ncols() != protos.centers.ncols() {
        return Err(EtmError::Shape("query and prototype dimensions differ".into()));
    }
    Ok(queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut best = (f64::INFINITY, protos.classes[0]);
            for (c, center) in protos.classes.iter().zip(protos.centers.rows()) {
                let d = squared_distance(q, center);
                if d < best.0 {
                    best = (d, *c);
                }
            }
            best.1
        })
        .collect())
}
