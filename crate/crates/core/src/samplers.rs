//! Query strategies. Each maps a model snapshot and the current pool to a
//! [`QueryBatch`] of at most `b` unlabeled indices.
//!
//! Ordering is fully deterministic: score descending, then (where a MAV exists)
//! MAV descending, then dataset index ascending.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datapool::{Dataset, PoolState};
use crate::gmm::{fit_gmm2, EmOptions};
use crate::nn::{argmax, entropy, softmax_t, NetParams, NnError};
use crate::seeds;

/// Classes with fewer predicted members than this get the uninformative score.
pub const MIN_GMM_CLASS_SIZE: usize = 5;
/// Score assigned to records of a class that cannot be modelled by a GMM.
pub const UNMODELLED_SCORE: f64 = 0.5;
/// Score carried by fallback-fill entries.
pub const FALLBACK_SCORE: f64 = -1.0;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("unlabeled pool is empty")]
    EmptyPool,
    #[error("query batch size must be at least 1")]
    ZeroBatch,
    #[error("detector has {got} outputs, expected K+1 = {expected}")]
    DetectorShape { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryBatch {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// LfOSA only: the score of the last primary-path entry.
    pub threshold: Option<f64>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Random,
    Uncertainty,
    Certainty,
    Coreset,
    Bald,
    Lfosa,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::Uncertainty,
        Strategy::Certainty,
        Strategy::Coreset,
        Strategy::Bald,
        Strategy::Lfosa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Certainty => "certainty",
            Strategy::Coreset => "coreset",
            Strategy::Bald => "bald",
            Strategy::Lfosa => "lfosa",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| format!("unknown strategy `{s}` (expected random|uncertainty|certainty|coreset|bald|lfosa)"))
    }
}

/// How the certainty baseline scores an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CertaintyScore {
    #[default]
    MaxProb,
    NegEntropy,
}

impl FromStr for CertaintyScore {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "max_prob" => Ok(CertaintyScore::MaxProb),
            "neg_entropy" => Ok(CertaintyScore::NegEntropy),
            other => Err(format!("unknown certainty score `{other}` (expected max_prob|neg_entropy)")),
        }
    }
}

impl fmt::Display for CertaintyScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CertaintyScore::MaxProb => "max_prob",
            CertaintyScore::NegEntropy => "neg_entropy",
        })
    }
}

/// A K-way classifier seen through a network that may have extra outputs.
/// A dedicated classifier uses all of its outputs; a shared detector exposes
/// only its first K logits.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierView<'a> {
    pub net: &'a NetParams,
    pub n_classes: usize,
}

impl<'a> ClassifierView<'a> {
    pub fn full(net: &'a NetParams) -> Self {
        ClassifierView {
            net,
            n_classes: net.output_dim(),
        }
    }

    pub fn first_k(net: &'a NetParams, k: usize) -> Self {
        ClassifierView {
            net,
            n_classes: k.min(net.output_dim()),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut l = self.net.logits(x)?;
        l.truncate(self.n_classes);
        Ok(l)
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(softmax_t(&self.logits(x)?, 1.0))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, NnError> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.net.forward(x, None)?.penultimate)
    }

    /// MC-dropout probability vectors over the view's classes, T = 1.
    pub fn mc_probs(&self, x: &[f64], n_samples: usize, seed: u64) -> Result<Vec<Vec<f64>>, NnError> {
        (0..n_samples)
            .map(|s| {
                let mut l = self.net.forward(x, Some(seeds::mix(seed, s as u64)))?.logits;
                l.truncate(self.n_classes);
                Ok(softmax_t(&l, 1.0))
            })
            .collect()
    }
}

fn check_request(pool: &PoolState, b: usize) -> Result<(), SamplerError> {
    if b == 0 {
        return Err(SamplerError::ZeroBatch);
    }
    if pool.unlabeled.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    Ok(())
}

/// Sorts `(index, score)` by score descending then index ascending and keeps `b`.
fn top_b(mut scored: Vec<(usize, f64)>, b: usize) -> QueryBatch {
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    scored.truncate(b);
    let (indices, scores) = scored.into_iter().unzip();
    QueryBatch {
        indices,
        scores,
        threshold: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MavRecord {
    pub index: usize,
    /// Argmax over all K+1 detector outputs; `K` means "unknown".
    pub predicted_class: usize,
    /// Maximum over the first K detector outputs.
    pub mav: f64,
}

pub fn collect_mavs(detector: &NetParams, ds: &Dataset, pool: &PoolState, k: usize) -> Result<Vec<MavRecord>, SamplerError> {
    if detector.output_dim() != k + 1 {
        return Err(SamplerError::DetectorShape {
            expected: k + 1,
            got: detector.output_dim(),
        });
    }
    pool.unlabeled
        .iter()
        .map(|&index| {
            let logits = detector.logits(ds.row(index))?;
            Ok(mav_record(index, &logits, k))
        })
        .collect()
}

pub fn mav_record(index: usize, logits: &[f64], k: usize) -> MavRecord {
    MavRecord {
        index,
        predicted_class: argmax(logits),
        mav: logits[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRecord {
    pub record: MavRecord,
    /// Known-probability `w_i`.
    pub score: f64,
}

/// Drops records predicted unknown, fits a GMM per predicted class and scores
/// each record with the posterior of the larger-mean component. Output order
/// follows the input order.
pub fn known_probabilities(records: &[MavRecord], k: usize, em: EmOptions) -> Vec<ScoredRecord> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, r) in records.iter().enumerate() {
        if r.predicted_class < k {
            by_class[r.predicted_class].push(pos);
        }
    }
    let mut scores = vec![None; records.len()];
    for members in by_class.iter().filter(|m| !m.is_empty()) {
        let mavs: Vec<f64> = members.iter().map(|&p| records[p].mav).collect();
        let gmm = if members.len() >= MIN_GMM_CLASS_SIZE {
            fit_gmm2(&mavs, em).ok()
        } else {
            None
        };
        for (&p, &v) in members.iter().zip(&mavs) {
            scores[p] = Some(gmm.map_or(UNMODELLED_SCORE, |g| g.posterior_known(v)));
        }
    }
    records
        .iter()
        .zip(scores)
        .filter_map(|(r, s)| s.map(|score| ScoredRecord { record: *r, score }))
        .collect()
}

fn lfosa_order(a: &ScoredRecord, b: &ScoredRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.record.mav.total_cmp(&a.record.mav))
        .then(a.record.index.cmp(&b.record.index))
}

/// Open-set sampling: detector MAVs, per-class two-component GMM, merged
/// known-probabilities, top-`b`. If fewer than `b` examples are predicted
/// known, the batch is filled with the remaining unlabeled examples by MAV.
pub fn lfosa_select(
    detector: &NetParams,
    ds: &Dataset,
    pool: &PoolState,
    b: usize,
    k: usize,
    em: EmOptions,
) -> Result<QueryBatch, SamplerError> {
    check_request(pool, b)?;
    let records = collect_mavs(detector, ds, pool, k)?;
    Ok(lfosa_from_records(&records, b, k, em))
}

pub fn lfosa_from_records(records: &[MavRecord], b: usize, k: usize, em: EmOptions) -> QueryBatch {
    let mut scored = known_probabilities(records, k, em);
    scored.sort_by(lfosa_order);
    scored.truncate(b);
    let threshold = scored.last().map(|s| s.score);
    let mut batch = QueryBatch {
        indices: scored.iter().map(|s| s.record.index).collect(),
        scores: scored.iter().map(|s| s.score).collect(),
        threshold,
    };
    let want = b.min(records.len());
    if batch.len() < want {
        let taken: std::collections::BTreeSet<usize> = batch.indices.iter().copied().collect();
        let mut rest: Vec<&MavRecord> = records.iter().filter(|r| !taken.contains(&r.index)).collect();
        rest.sort_by(|x, y| y.mav.total_cmp(&x.mav).then(x.index.cmp(&y.index)));
        for r in rest.into_iter().take(want - batch.len()) {
            batch.indices.push(r.index);
            batch.scores.push(FALLBACK_SCORE);
        }
    }
    batch
}

/// Uniform sample without replacement.
pub fn random_select(pool: &PoolState, b: usize, seed: u64) -> Result<QueryBatch, SamplerError> {
    check_request(pool, b)?;
    let candidates = pool.unlabeled_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, candidates.len(), b.min(candidates.len()));
    let indices: Vec<usize> = picked.into_iter().map(|i| candidates[i]).collect();
    Ok(QueryBatch {
        scores: vec![0.0; indices.len()],
        indices,
        threshold: None,
    })
}

fn score_each<F>(view: &ClassifierView<'_>, ds: &Dataset, pool: &PoolState, f: F) -> Result<Vec<(usize, f64)>, SamplerError>
where
    F: Fn(&[f64]) -> f64,
{
    pool.unlabeled.iter().map(|&i| Ok((i, f(&view.probs(ds.row(i))?)))).collect()
}

/// Highest predictive entropy first.
pub fn uncertainty_select(view: &ClassifierView<'_>, ds: &Dataset, pool: &PoolState, b: usize) -> Result<QueryBatch, SamplerError> {
    check_request(pool, b)?;
    Ok(top_b(score_each(view, ds, pool, entropy)?, b))
}

/// Most confident predictions first.
pub fn certainty_select(
    view: &ClassifierView<'_>,
    ds: &Dataset,
    pool: &PoolState,
    b: usize,
    mode: CertaintyScore,
) -> Result<QueryBatch, SamplerError> {
    check_request(pool, b)?;
    let scored = match mode {
        CertaintyScore::MaxProb => score_each(view, ds, pool, |p| p.iter().cloned().fold(0.0, f64::max))?,
        CertaintyScore::NegEntropy => score_each(view, ds, pool, |p| -entropy(p))?,
    };
    Ok(top_b(scored, b))
}

/// k-center greedy over penultimate features, seeded with the labeled set.
/// Scores are the distance to the nearest center at the time of selection.
pub fn coreset_select(view: &ClassifierView<'_>, ds: &Dataset, pool: &PoolState, b: usize) -> Result<QueryBatch, SamplerError> {
    check_request(pool, b)?;
    let candidates = pool.unlabeled_vec();
    let feats: Vec<Vec<f64>> = candidates.iter().map(|&i| view.penultimate(ds.row(i))).collect::<Result<_, _>>()?;
    let centers: Vec<Vec<f64>> = pool
        .labeled
        .keys()
        .map(|&i| view.penultimate(ds.row(i)))
        .collect::<Result<_, _>>()?;
    Ok(k_center_greedy(&candidates, &feats, &centers, b))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Farthest-first traversal. `candidates` must be sorted ascending so ties go
/// to the smallest index. With no initial centers the first pick is
/// `candidates[0]`.
pub fn k_center_greedy(candidates: &[usize], feats: &[Vec<f64>], centers: &[Vec<f64>], b: usize) -> QueryBatch {
    let mut nearest: Vec<f64> = feats
        .iter()
        .map(|f| centers.iter().map(|c| sq_dist(f, c)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut chosen = vec![false; candidates.len()];
    let mut batch = QueryBatch::default();
    for _ in 0..b.min(candidates.len()) {
        let mut best: Option<usize> = None;
        for j in (0..candidates.len()).filter(|&j| !chosen[j]) {
            if best.is_none_or(|bj| nearest[j] > nearest[bj]) {
                best = Some(j);
            }
        }
        let j = best.expect("unchosen candidate remains");
        chosen[j] = true;
        batch.indices.push(candidates[j]);
        batch
            .scores
            .push(if nearest[j].is_finite() { nearest[j].sqrt() } else { f64::INFINITY });
        for (m, f) in nearest.iter_mut().zip(feats) {
            *m = m.min(sq_dist(f, &feats[j]));
        }
    }
    batch
}

/// BALD mutual information from stored MC samples:
/// `H(mean p) - mean H(p)`.
pub fn mutual_information(samples: &[Vec<f64>]) -> f64 {
    // identical samples carry no epistemic information; skip the rounding noise
    if samples.iter().all(|s| s == &samples[0]) {
        return 0.0;
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; samples[0].len()];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, p)| *m += p / n);
    }
    let expected_entropy = samples.iter().map(|s| entropy(s)).sum::<f64>() / n;
    entropy(&mean) - expected_entropy
}

/// Per-example MC-dropout seed used by [`bald_select`].
pub fn bald_example_seed(seed: u64, index: usize) -> u64 {
    seeds::mix(seed, index as u64)
}

pub fn bald_select(
    view: &ClassifierView<'_>,
    ds: &Dataset,
    pool: &PoolState,
    b: usize,
    n_samples: usize,
    seed: u64,
) -> Result<QueryBatch, SamplerError> {
    check_request(pool, b)?;
    let scored = pool
        .unlabeled
        .iter()
        .map(|&i| {
            let samples = view.mc_probs(ds.row(i), n_samples, bald_example_seed(seed, i))?;
            Ok((i, mutual_information(&samples)))
        })
        .collect::<Result<Vec<_>, SamplerError>>()?;
    Ok(top_b(scored, b))
}
