//! Data model, class-disjoint splits, synthetic clusters and CSV I/O.
//!
//! CSV layout: header `id,label,f0,...,f{F-1}`, one sample per row, an
//! empty `label` field marks an unlabeled sample. Floats are written with
//! the shortest representation that parses back to the same bits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EtmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub features: Vec<f64>,
    /// `None` for unlabeled samples.
    pub label: Option<ClassId>,
}

impl Sample {
    pub fn new(id: u64, features: Vec<f64>, label: Option<u32>) -> Self {
        Sample {
            id: SampleId(id),
            features,
            label: label.map(ClassId),
        }
    }
}

/// An immutable collection of samples sharing one feature dimension.
///
/// Unlabeled samples produced by [`split`] keep their true class in a side
/// table ([`Dataset::hidden_label`]) so weakly-labeled episodes can draw
/// class-conditioned unlabeled data. The table is never exposed through
/// [`Sample::label`].
#[derive(Clone, Debug)]
pub struct Dataset {
    feature_dim: usize,
    samples: Vec<Sample>,
    positions: HashMap<SampleId, usize>,
    class_index: BTreeMap<ClassId, Vec<SampleId>>,
    hidden_labels: BTreeMap<SampleId, ClassId>,
    hidden_index: BTreeMap<ClassId, Vec<SampleId>>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim
            && self.samples == other.samples
            && self.hidden_labels == other.hidden_labels
    }
}

impl Dataset {
    pub fn new(feature_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(EtmError::Config("feature dimension must be at least 1".into()));
        }
        let mut positions = HashMap::with_capacity(samples.len());
        let mut class_index: BTreeMap<ClassId, Vec<SampleId>> = BTreeMap::new();
        for (pos, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(EtmError::Shape(format!(
                    "sample {} has {} features, expected {feature_dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if let Some(bad) = s.features.iter().find(|v| !v.is_finite()) {
                return Err(EtmError::Config(format!(
                    "sample {} has non-finite feature {bad}",
                    s.id
                )));
            }
            if positions.insert(s.id, pos).is_some() {
                return Err(EtmError::Config(format!("duplicate sample id {}", s.id)));
            }
            if let Some(c) = s.label {
                class_index.entry(c).or_default().push(s.id);
            }
        }
        Ok(Dataset {
            feature_dim,
            samples,
            positions,
            class_index,
            hidden_labels: BTreeMap::new(),
            hidden_index: BTreeMap::new(),
        })
    }

    /// Attaches true classes for unlabeled samples.
    pub fn with_hidden_labels(mut self, hidden: BTreeMap<SampleId, ClassId>) -> Result<Self> {
        let mut hidden_index: BTreeMap<ClassId, Vec<SampleId>> = BTreeMap::new();
        for s in &self.samples {
            if let Some(&c) = hidden.get(&s.id) {
                if s.label.is_some() {
                    return Err(EtmError::Consistency(format!(
                        "hidden label given for labeled sample {}",
                        s.id
                    )));
                }
                hidden_index.entry(c).or_default().push(s.id);
            }
        }
        if let Some(id) = hidden.keys().find(|id| !self.positions.contains_key(id)) {
            return Err(EtmError::Consistency(format!(
                "hidden label given for unknown sample {id}"
            )));
        }
        self.hidden_labels = hidden;
        self.hidden_index = hidden_index;
        Ok(self)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: SampleId) -> Option<&Sample> {
        self.positions.get(&id).map(|&p| &self.samples[p])
    }

    /// Labeled classes in ascending order.
    pub fn classes(&self) -> Vec<ClassId> {
        self.class_index.keys().copied().collect()
    }

    pub fn class_index(&self) -> &BTreeMap<ClassId, Vec<SampleId>> {
        &self.class_index
    }

    pub fn class_members(&self, class: ClassId) -> &[SampleId] {
        self.class_index.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn hidden_label(&self, id: SampleId) -> Option<ClassId> {
        self.hidden_labels.get(&id).copied()
    }

    pub fn hidden_labels(&self) -> &BTreeMap<SampleId, ClassId> {
        &self.hidden_labels
    }

    /// Unlabeled samples whose hidden class is `class`.
    pub fn hidden_members(&self, class: ClassId) -> &[SampleId] {
        self.hidden_index.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Stacks the features of `ids` into a `len × F` matrix.
    pub fn features(&self, ids: &[SampleId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.feature_dim));
        for (row, id) in ids.iter().enumerate() {
            let s = self
                .get(*id)
                .ok_or_else(|| EtmError::Consistency(format!("unknown sample id {id}")))?;
            out.row_mut(row)
                .iter_mut()
                .zip(&s.features)
                .for_each(|(o, v)| *o = *v);
        }
        Ok(out)
    }

    /// Copy with class labels permuted at random across labeled samples.
    /// Class sizes are preserved; any link between features and labels is
    /// destroyed. Used as a chance-level control.
    pub fn with_shuffled_labels(&self, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<ClassId> = self.samples.iter().filter_map(|s| s.label).collect();
        labels.shuffle(&mut rng);
        let mut it = labels.into_iter();
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                id: s.id,
                features: s.features.clone(),
                label: s.label.and_then(|_| it.next()),
            })
            .collect();
        Dataset::new(self.feature_dim, samples)
    }
}

/// Parameters of a Gaussian-cluster dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Class means are drawn from `N(0, class_mean_scale² I)`.
    pub class_mean_scale: f64,
    /// Isotropic within-class standard deviation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.feature_dim == 0 {
            return Err(EtmError::Config(
                "synthetic spec counts must all be at least 1".into(),
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(EtmError::Config(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        if !(self.class_mean_scale >= 0.0 && self.class_mean_scale.is_finite()) {
            return Err(EtmError::Config(format!(
                "class_mean_scale must be non-negative, got {}",
                self.class_mean_scale
            )));
        }
        Ok(())
    }
}

/// Labeled Gaussian clusters. Classes are numbered `1..=num_classes`, ids
/// run from 0 in class-major order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.feature_dim;
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..f)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.class_mean_scale * z
                })
                .collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.noise_sigma * z
                })
                .collect();
            samples.push(Sample {
                id: SampleId(samples.len() as u64),
                features,
                label: Some(ClassId(k as u32 + 1)),
            });
        }
    }
    Dataset::new(f, samples)
}

/// Class-level partition plus the labeled fraction applied within train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_classes: BTreeSet<ClassId>,
    pub val_classes: BTreeSet<ClassId>,
    pub test_classes: BTreeSet<ClassId>,
    pub labeled_fraction: f64,
}

impl SplitSpec {
    /// Shuffles `classes` with `seed` and assigns the first `n_train` to
    /// train, the next `n_val` to validation and the next `n_test` to test.
    pub fn by_counts(
        classes: &[ClassId],
        n_train: usize,
        n_val: usize,
        n_test: usize,
        labeled_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_train + n_val + n_test > classes.len() {
            return Err(EtmError::Config(format!(
                "requested {} classes but only {} exist",
                n_train + n_val + n_test,
                classes.len()
            )));
        }
        let mut shuffled = classes.to_vec();
        shuffled.sort();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (train, rest) = shuffled.split_at(n_train);
        let (val, rest) = rest.split_at(n_val);
        let spec = SplitSpec {
            train_classes: train.iter().copied().collect(),
            val_classes: val.iter().copied().collect(),
            test_classes: rest[..n_test].iter().copied().collect(),
            labeled_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Fraction-based variant of [`SplitSpec::by_counts`]: train and
    /// validation counts are rounded, test takes the remainder.
    pub fn by_fractions(
        classes: &[ClassId],
        train_fraction: f64,
        val_fraction: f64,
        labeled_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction)
            || !(0.0..=1.0).contains(&val_fraction)
            || train_fraction + val_fraction > 1.0
        {
            return Err(EtmError::Config(format!(
                "invalid class fractions train={train_fraction} val={val_fraction}"
            )));
        }
        let k = classes.len();
        let n_train = (train_fraction * k as f64).round() as usize;
        let n_val = ((val_fraction * k as f64).round() as usize).min(k - n_train);
        Self::by_counts(classes, n_train, n_val, k - n_train - n_val, labeled_fraction, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(EtmError::Config(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        let pairs = [
            ("train", &self.train_classes, "val", &self.val_classes),
            ("train", &self.train_classes, "test", &self.test_classes),
            ("val", &self.val_classes, "test", &self.test_classes),
        ];
        for (an, a, bn, b) in pairs {
            if let Some(c) = a.intersection(b).next() {
                return Err(EtmError::Config(format!(
                    "class {c} appears in both {an} and {bn} splits"
                )));
            }
        }
        if self.train_classes.is_empty() {
            return Err(EtmError::Config("train split has no classes".into()));
        }
        if self.test_classes.is_empty() {
            return Err(EtmError::Config("test split has no classes".into()));
        }
        Ok(())
    }
}

/// Number of labeled samples kept out of `n`: `⌈fraction·n⌉`, at least 1.
///
/// A 1e-9 slack absorbs representation error so that e.g. `0.7 × 10`
/// yields 7 rather than 8.
pub fn labeled_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train_labeled: Dataset,
    /// Train samples with labels stripped; true classes kept as hidden labels.
    pub train_unlabeled: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Partitions `ds` by class and, within each train class, chooses
/// `labeled_count(labeled_fraction, n)` samples without replacement to
/// stay labeled. Output datasets keep the source sample order.
pub fn split(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Split> {
    spec.validate()?;
    let known: BTreeSet<ClassId> = ds.class_index.keys().copied().collect();
    for c in spec
        .train_classes
        .iter()
        .chain(&spec.val_classes)
        .chain(&spec.test_classes)
    {
        if !known.contains(c) {
            return Err(EtmError::Config(format!("class {c} is not present in the dataset")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled_ids: HashSet<SampleId> = HashSet::new();
    for c in &spec.train_classes {
        let members = &ds.class_index[c];
        let keep = labeled_count(spec.labeled_fraction, members.len());
        for i in index::sample(&mut rng, members.len(), keep) {
            labeled_ids.insert(members[i]);
        }
    }

    let mut train_labeled = Vec::new();
    let mut train_unlabeled = Vec::new();
    let mut hidden = BTreeMap::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for s in &ds.samples {
        let Some(c) = s.label else { continue };
        if spec.train_classes.contains(&c) {
            if labeled_ids.contains(&s.id) {
                train_labeled.push(s.clone());
            } else {
                hidden.insert(s.id, c);
                train_unlabeled.push(Sample {
                    label: None,
                    ..s.clone()
                });
            }
        } else if spec.val_classes.contains(&c) {
            val.push(s.clone());
        } else if spec.test_classes.contains(&c) {
            test.push(s.clone());
        }
    }
    if train_labeled.is_empty() || test.is_empty() {
        return Err(EtmError::Config("split produced an empty train or test set".into()));
    }
    let f = ds.feature_dim;
    Ok(Split {
        train_labeled: Dataset::new(f, train_labeled)?,
        train_unlabeled: Dataset::new(f, train_unlabeled)?.with_hidden_labels(hidden)?,
        val: Dataset::new(f, val)?,
        test: Dataset::new(f, test)?,
    })
}

/// JSON sidecar that makes a split reproducible on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub labeled_fraction: f64,
    pub train_classes: Vec<ClassId>,
    pub val_classes: Vec<ClassId>,
    pub test_classes: Vec<ClassId>,
}

impl SplitManifest {
    pub fn new(spec: &SplitSpec, seed: u64) -> Self {
        SplitManifest {
            seed,
            labeled_fraction: spec.labeled_fraction,
            train_classes: spec.train_classes.iter().copied().collect(),
            val_classes: spec.val_classes.iter().copied().collect(),
            test_classes: spec.test_classes.iter().copied().collect(),
        }
    }

    pub fn spec(&self) -> SplitSpec {
        SplitSpec {
            train_classes: self.train_classes.iter().copied().collect(),
            val_classes: self.val_classes.iter().copied().collect(),
            test_classes: self.test_classes.iter().copied().collect(),
            labeled_fraction: self.labeled_fraction,
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Split> {
        split(ds, &self.spec(), self.seed)
    }
}

/// Manifest written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub synthetic: SyntheticSpec,
    pub rows: usize,
    pub feature_dim: usize,
    pub csv: String,
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| EtmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        write!(w, "id,label")?;
        for j in 0..ds.feature_dim {
            write!(w, ",f{j}")?;
        }
        writeln!(w)?;
        for s in &ds.samples {
            write!(w, "{},", s.id)?;
            if let Some(c) = s.label {
                write!(w, "{c}")?;
            }
            for v in &s.features {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| EtmError::io(path, e))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EtmError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        match e.into_kind() {
            csv::ErrorKind::Io(source) => EtmError::io(path, source),
            kind => EtmError::Parse {
                line,
                message: format!("{kind:?}"),
            },
        }
    };

    let header = reader.headers().map_err(csv_err)?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(EtmError::Parse {
            line: 1,
            message: "header must be `id,label,f0,...`".into(),
        });
    }
    let feature_dim = header.len() - 2;

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| EtmError::Parse { line, message };
        if record.len() != feature_dim + 2 {
            return Err(err(format!(
                "expected {} fields, found {}",
                feature_dim + 2,
                record.len()
            )));
        }
        let id: u64 = record[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("invalid id `{}`", &record[0])))?;
        if !seen.insert(id) {
            return Err(err(format!("duplicate id {id}")));
        }
        let label = match record[1].trim() {
            "" => None,
            text => Some(
                text.parse::<u32>()
                    .map_err(|_| err(format!("invalid label `{text}`")))?,
            ),
        };
        let features = record
            .iter()
            .skip(2)
            .enumerate()
            .map(|(j, text)| match text.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("non-numeric feature f{j} `{text}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample::new(id, features, label));
    }
    Dataset::new(feature_dim, samples)
}
