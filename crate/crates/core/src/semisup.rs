//! Pseudo-labeling of unlabeled episode draws.
//!
//! Each unlabeled embedding is classified against the episode support with
//! the evaluator's top-`n_P` vote, then appended to the support as if it
//! were labeled. The label choice is discrete; gradients still reach the
//! pseudo-labeled embeddings through the mining loss.

use std::collections::HashSet;

use ndarray::ArrayView2;

use crate::dataset::{ClassId, SampleId};
use crate::error::{EtmError, Result};
use crate::evaluator::infer_detailed;
use crate::par::Execution;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    pub id: SampleId,
    pub class: ClassId,
    /// Mean distance to the neighbours that voted for `class`. Diagnostic only.
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabeledSet {
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<ClassId> {
        self.entries.iter().map(|e| e.class).collect()
    }
}

pub fn pseudo_label(
    unlabeled: ArrayView2<f64>,
    ids: &[SampleId],
    support: ArrayView2<f64>,
    support_labels: &[ClassId],
    n_positive: usize,
) -> Result<PseudoLabeledSet> {
    pseudo_label_with(unlabeled, ids, support, support_labels, n_positive, Execution::default())
}

pub fn pseudo_label_with(
    unlabeled: ArrayView2<f64>,
    ids: &[SampleId],
    support: ArrayView2<f64>,
    support_labels: &[ClassId],
    n_positive: usize,
    exec: Execution,
) -> Result<PseudoLabeledSet> {
    if support.nrows() == 0 {
        return Err(EtmError::Config("pseudo-labeling needs a non-empty support set".into()));
    }
    if unlabeled.nrows() != ids.len() {
        return Err(EtmError::Shape(format!(
            "{} unlabeled rows but {} ids",
            unlabeled.nrows(),
            ids.len()
        )));
    }
    let entries = exec.try_map(ids.len(), |i| {
        infer_detailed(unlabeled.row(i), support, support_labels, n_positive).map(|p| PseudoLabel {
            id: ids[i],
            class: p.class,
            confidence: p.mean_distance,
        })
    })?;
    Ok(PseudoLabeledSet { entries })
}

/// Original support first, then pseudo-labeled samples in draw order.
pub fn augment_support(
    support: &[(SampleId, ClassId)],
    pseudo: &PseudoLabeledSet,
) -> Result<Vec<(SampleId, ClassId)>> {
    let mut seen: HashSet<SampleId> = support.iter().map(|&(id, _)| id).collect();
    let mut out = support.to_vec();
    for e in &pseudo.entries {
        if !seen.insert(e.id) {
            return Err(EtmError::Consistency(format!(
                "pseudo-labeled sample {} collides with an existing support id",
                e.id
            )));
        }
        out.push((e.id, e.class));
    }
    Ok(out)
}
