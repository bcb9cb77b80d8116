//! Open-set datasets and the labeled / unlabeled / invalid pool bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
    #[error("mismatch ratio {ratio} with {classes} classes yields no known class")]
    NoKnownClasses { ratio: f64, classes: usize },
    #[error("known class {class} has {available} training examples, need {needed}")]
    InsufficientExamples { class: usize, available: usize, needed: usize },
    #[error("query index {index} is not in the unlabeled pool ({location})")]
    NotUnlabeled { index: usize, location: &'static str },
    #[error("query batch contains index {0} more than once")]
    DuplicateIndex(usize),
    #[error("csv {path}: {message}")]
    Csv { path: String, message: String },
}

/// Features are stored row-major, `n × dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: usize,
    pub n_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Test indices grouped by class.
    pub fn test_indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for &i in &self.test_indices {
            out[self.labels[i]].push(i);
        }
        out
    }

    /// Z-scores every feature column with the mean/std of the training rows.
    pub fn standardize(&mut self) {
        let n = self.train_indices.len().max(1) as f64;
        for j in 0..self.dims {
            let mean = self.train_indices.iter().map(|&i| self.features[i * self.dims + j]).sum::<f64>() / n;
            let var = self
                .train_indices
                .iter()
                .map(|&i| (self.features[i * self.dims + j] - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.len() {
                let v = &mut self.features[i * self.dims + j];
                *v = (*v - mean) / sd;
            }
        }
    }

    fn validate(&self) -> Result<(), PoolError> {
        if self.features.len() != self.labels.len() * self.dims {
            return Err(PoolError::InvalidParams("feature matrix shape does not match labels".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(PoolError::InvalidParams(format!("label {bad} >= class count {}", self.n_classes)));
        }
        let train: BTreeSet<_> = self.train_indices.iter().collect();
        if self.test_indices.iter().any(|i| train.contains(i)) {
            return Err(PoolError::InvalidParams("train and test indices overlap".into()));
        }
        Ok(())
    }

    /// Loads a train CSV and a test CSV with header `f0,...,f{d-1},label`.
    /// Rows of the train file come first in the resulting index space.
    pub fn from_csv(train: &Path, test: &Path) -> Result<Dataset, PoolError> {
        let (dims, mut features, mut labels) = read_csv(train)?;
        let (test_dims, test_features, test_labels) = read_csv(test)?;
        if test_dims != dims {
            return Err(PoolError::Csv {
                path: test.display().to_string(),
                message: format!("has {test_dims} features, train file has {dims}"),
            });
        }
        let n_train = labels.len();
        features.extend(test_features);
        labels.extend(test_labels);
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let ds = Dataset {
            dims,
            n_classes,
            features,
            train_indices: (0..n_train).collect(),
            test_indices: (n_train..labels.len()).collect(),
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the train and test splits in the CSV exchange format.
    pub fn to_csv(&self, train: &Path, test: &Path) -> Result<(), PoolError> {
        self.write_split(train, &self.train_indices)?;
        self.write_split(test, &self.test_indices)
    }

    fn write_split(&self, path: &Path, indices: &[usize]) -> Result<(), PoolError> {
        let err = |e: csv::Error| PoolError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header: Vec<String> = (0..self.dims).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(err)?;
        for &i in indices {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| PoolError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn read_csv(path: &Path) -> Result<(usize, Vec<f64>, Vec<usize>), PoolError> {
    let fail = |message: String| PoolError::Csv {
        path: path.display().to_string(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    let dims = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..dims).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    if dims == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(fail(format!(
            "header must be f0,...,f{{d-1}},label; got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        for field in rec.iter().take(dims) {
            features.push(field.trim().parse::<f64>().map_err(|e| fail(format!("row {}: {e}", line + 1)))?);
        }
        labels.push(
            rec[dims]
                .trim()
                .parse::<usize>()
                .map_err(|e| fail(format!("row {}: label: {e}", line + 1)))?,
        );
    }
    Ok((dims, features, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub n_classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub cluster_spread: f64,
    pub center_scale: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_classes: 20,
            dims: 20,
            per_class: 200,
            cluster_spread: 1.0,
            center_scale: 10.0,
        }
    }
}

/// Gaussian clusters: class `c` has a center drawn from `U[-r, r]^d` and its
/// examples are `center + N(0, σ²)` per coordinate. The last 20% (rounded) of
/// each class are held out as test examples.
pub fn make_synthetic_openset(p: &SyntheticParams, seed: u64) -> Result<Dataset, PoolError> {
    if p.n_classes < 2 || p.dims < 2 {
        return Err(PoolError::InvalidParams("need at least 2 classes and 2 dimensions".into()));
    }
    if !(p.cluster_spread >= 0.0 && p.cluster_spread.is_finite() && p.center_scale >= 0.0 && p.center_scale.is_finite()) {
        return Err(PoolError::InvalidParams(
            "cluster_spread and center_scale must be finite and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n_test = (p.per_class as f64 * 0.2).round() as usize;
    let mut ds = Dataset {
        dims: p.dims,
        n_classes: p.n_classes,
        features: Vec::with_capacity(p.n_classes * p.per_class * p.dims),
        labels: Vec::with_capacity(p.n_classes * p.per_class),
        train_indices: Vec::new(),
        test_indices: Vec::new(),
    };
    for c in 0..p.n_classes {
        let center: Vec<f64> = (0..p.dims)
            .map(|_| {
                if p.center_scale > 0.0 {
                    rng.random_range(-p.center_scale..=p.center_scale)
                } else {
                    0.0
                }
            })
            .collect();
        for k in 0..p.per_class {
            let idx = ds.labels.len();
            ds.features
                .extend(center.iter().map(|&m| m + p.cluster_spread * noise.sample(&mut rng)));
            ds.labels.push(c);
            if k < p.per_class - n_test {
                ds.train_indices.push(idx);
            } else {
                ds.test_indices.push(idx);
            }
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetSplit {
    pub known_classes: Vec<usize>,
    pub unknown_classes: Vec<usize>,
    pub mismatch_ratio: f64,
}

impl OpenSetSplit {
    pub fn k(&self) -> usize {
        self.known_classes.len()
    }

    /// Position of `class` in the known list, i.e. its classifier output index.
    pub fn known_index(&self, class: usize) -> Option<usize> {
        self.known_classes.iter().position(|&c| c == class)
    }

    pub fn is_known(&self, class: usize) -> bool {
        self.known_index(class).is_some()
    }
}

/// The first `round(ratio·C)` classes are known, the rest unknown.
pub fn split_known_unknown(n_classes: usize, mismatch_ratio: f64) -> Result<OpenSetSplit, PoolError> {
    if !(mismatch_ratio > 0.0 && mismatch_ratio <= 1.0) {
        return Err(PoolError::InvalidParams(format!(
            "mismatch_ratio must be in (0,1], got {mismatch_ratio}"
        )));
    }
    let k = (mismatch_ratio * n_classes as f64).round() as usize;
    if k == 0 {
        return Err(PoolError::NoKnownClasses {
            ratio: mismatch_ratio,
            classes: n_classes,
        });
    }
    Ok(OpenSetSplit {
        known_classes: (0..k).collect(),
        unknown_classes: (k..n_classes).collect(),
        mismatch_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleAnswer {
    /// Carries the dataset class id.
    Known(usize),
    Unknown,
}

pub fn oracle_label(ds: &Dataset, split: &OpenSetSplit, idx: usize) -> OracleAnswer {
    let class = ds.label(idx);
    if split.is_known(class) {
        OracleAnswer::Known(class)
    } else {
        OracleAnswer::Unknown
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoolState {
    /// index → oracle class id
    pub labeled: BTreeMap<usize, usize>,
    pub unlabeled: BTreeSet<usize>,
    pub invalid: BTreeSet<usize>,
    pub round: usize,
}

impl PoolState {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.invalid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unlabeled_vec(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    /// Count of known-class examples currently unlabeled.
    pub fn count_known_unlabeled(&self, ds: &Dataset, split: &OpenSetSplit) -> usize {
        self.unlabeled.iter().filter(|&&i| split.is_known(ds.label(i))).count()
    }
}

/// Samples `init_per_class` training examples of each known class into the
/// labeled set. Everything else from the training split is unlabeled.
pub fn init_pools(ds: &Dataset, split: &OpenSetSplit, init_per_class: usize, seed: u64) -> Result<PoolState, PoolError> {
    if init_per_class == 0 {
        return Err(PoolError::InvalidParams("init_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = BTreeMap::new();
    for &class in &split.known_classes {
        let members: Vec<usize> = ds.train_indices.iter().copied().filter(|&i| ds.label(i) == class).collect();
        if members.len() < init_per_class {
            return Err(PoolError::InsufficientExamples {
                class,
                available: members.len(),
                needed: init_per_class,
            });
        }
        for &i in members.choose_multiple(&mut rng, init_per_class) {
            labeled.insert(i, class);
        }
    }
    let unlabeled = ds.train_indices.iter().copied().filter(|i| !labeled.contains_key(i)).collect();
    Ok(PoolState {
        labeled,
        unlabeled,
        invalid: BTreeSet::new(),
        round: 0,
    })
}

/// Sends every queried index to the oracle. Known answers join the labeled set,
/// unknown answers join the invalid set. Returns the new state and `(k_i, l_i)`.
/// The whole batch is rejected if any index is not currently unlabeled.
pub fn apply_query<F>(pool: &PoolState, batch: &[usize], oracle: F) -> Result<(PoolState, usize, usize), PoolError>
where
    F: Fn(usize) -> OracleAnswer,
{
    let mut seen = BTreeSet::new();
    for &i in batch {
        if !seen.insert(i) {
            return Err(PoolError::DuplicateIndex(i));
        }
        if !pool.unlabeled.contains(&i) {
            let location = if pool.labeled.contains_key(&i) {
                "already labeled"
            } else if pool.invalid.contains(&i) {
                "already invalid"
            } else {
                "outside the pool"
            };
            return Err(PoolError::NotUnlabeled { index: i, location });
        }
    }
    let mut next = pool.clone();
    let (mut known, mut unknown) = (0, 0);
    for &i in batch {
        next.unlabeled.remove(&i);
        match oracle(i) {
            OracleAnswer::Known(c) => {
                next.labeled.insert(i, c);
                known += 1;
            }
            OracleAnswer::Unknown => {
                next.invalid.insert(i);
                unknown += 1;
            }
        }
    }
    next.round += 1;
    Ok((next, known, unknown))
}
