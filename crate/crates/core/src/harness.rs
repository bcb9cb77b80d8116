//! Active-learning loop: per-round detector/classifier training, query
//! selection, oracle feedback and metrics, repeated over several seeds.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use log::{debug, info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::datapool::{
    apply_query, init_pools, make_synthetic_openset, oracle_label, split_known_unknown, Dataset, OpenSetSplit, PoolError, PoolState,
    SyntheticParams,
};
use crate::gmm::EmOptions;
use crate::nn::{train, NetParams, NetSpec, NnError, TrainConfig};
use crate::samplers::{self, CertaintyScore, ClassifierView, QueryBatch, SamplerError, Strategy};
use crate::seeds::{derive_seed, Purpose};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("training failed in round {round}: {source}")]
    Training { round: usize, source: NnError },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("unlabeled pool exhausted before round {0}")]
    PoolExhausted(usize),
    #[error("test split contains no known-class examples")]
    EmptyTestSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Full,
    /// Detector temperature forced to 1.
    NoTemperature,
    /// Detector temperature forced to 2.
    HighTemperature,
    /// One (K+1)-way network does detection and classification.
    SharedNetwork,
    /// Detector trains on the labeled set only.
    NoInvalidSet,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoTemperature,
        Ablation::HighTemperature,
        Ablation::SharedNetwork,
        Ablation::NoInvalidSet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTemperature => "no_temperature",
            Ablation::HighTemperature => "high_temperature",
            Ablation::SharedNetwork => "shared_network",
            Ablation::NoInvalidSet => "no_invalid_set",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| format!("unknown ablation `{s}` (expected full|no_temperature|high_temperature|shared_network|no_invalid_set)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Regenerated per experiment seed.
    Synthetic(SyntheticParams),
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

/// Architecture and optimizer settings for one network role. `train.seed` is
/// overwritten per round from the experiment seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NetTraining {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Z-score features with training-split statistics.
    pub standardize: bool,
    pub mismatch_ratio: f64,
    pub init_per_class: usize,
    pub rounds: usize,
    pub b: usize,
    pub strategy: Strategy,
    pub detector: NetTraining,
    pub classifier: NetTraining,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub bald_samples: usize,
    /// Classifier dropout used when the strategy is BALD.
    pub bald_dropout: f64,
    pub certainty_score: CertaintyScore,
    pub em: EmOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticParams::default()),
            standardize: true,
            mismatch_ratio: 0.25,
            init_per_class: 10,
            rounds: 5,
            b: 100,
            strategy: Strategy::Lfosa,
            detector: NetTraining {
                hidden_dims: vec![64],
                dropout_rate: 0.0,
                train: TrainConfig::default(),
            },
            classifier: NetTraining {
                hidden_dims: vec![64],
                dropout_rate: 0.0,
                train: TrainConfig {
                    temperature: 1.0,
                    ..TrainConfig::default()
                },
            },
            ablation: Ablation::Full,
            seeds: vec![1, 2, 3, 4],
            bald_samples: 10,
            bald_dropout: 0.5,
            certainty_score: CertaintyScore::MaxProb,
            em: EmOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if self.b == 0 {
            return bad("b must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.init_per_class == 0 {
            return bad("init_per_class must be >= 1");
        }
        if self.bald_samples == 0 {
            return bad("bald_samples must be >= 1");
        }
        if !(0.0..1.0).contains(&self.bald_dropout) {
            return bad("bald_dropout must be in [0,1)");
        }
        if self.em.max_iter == 0 || self.em.tol.is_nan() || self.em.tol <= 0.0 {
            return bad("gmm_max_iter and gmm_tol must be positive");
        }
        for (name, net) in [("detector", &self.detector), ("classifier", &self.classifier)] {
            net.train.validate().map_err(|e| HarnessError::Config(format!("{name}: {e}")))?;
            if net.train.epochs == 0 {
                return Err(HarnessError::Config(format!("{name}: epochs must be >= 1")));
            }
        }
        Ok(())
    }

    /// Detector temperature after applying the ablation.
    pub fn detector_temperature(&self) -> f64 {
        match self.ablation {
            Ablation::NoTemperature => 1.0,
            Ablation::HighTemperature => 2.0,
            _ => self.detector.train.temperature,
        }
    }

    fn classifier_dropout(&self) -> f64 {
        if self.strategy == Strategy::Bald {
            self.bald_dropout
        } else {
            self.classifier.dropout_rate
        }
    }

    fn uses_detector(&self) -> bool {
        self.strategy == Strategy::Lfosa || self.ablation == Ablation::SharedNetwork
    }
}

// ---------------------------------------------------------------------------
// metrics

/// Cumulative known examples queried over `n_kno`. The initial labeled set is
/// not counted. Returns 0 when `n_kno` is 0.
pub fn selection_recall(known_per_round: &[usize], n_kno: usize) -> f64 {
    if n_kno == 0 {
        return 0.0;
    }
    known_per_round.iter().sum::<usize>() as f64 / n_kno as f64
}

/// `k / (k + l)`; 0 for an empty batch.
pub fn selection_precision(k: usize, l: usize) -> f64 {
    if k + l == 0 {
        return 0.0;
    }
    k as f64 / (k + l) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Accuracy plus unweighted per-class averages over `k` classes. A class
/// never predicted has precision 0; F1 is 0 when P + R = 0.
pub fn classification_metrics(truth: &[usize], pred: &[usize], k: usize) -> ClassMetrics {
    assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
    if truth.is_empty() || k == 0 {
        return ClassMetrics::default();
    }
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut actual = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(pred) {
        actual[t] += 1;
        if p < k {
            predicted[p] += 1;
        }
        if t == p {
            tp[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut out = ClassMetrics {
        accuracy: ratio(tp.iter().sum(), truth.len()),
        ..ClassMetrics::default()
    };
    for c in 0..k {
        let p = ratio(tp[c], predicted[c]);
        let r = ratio(tp[c], actual[c]);
        out.macro_precision += p / k as f64;
        out.macro_recall += r / k as f64;
        out.macro_f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 } / k as f64;
    }
    out
}

/// Evaluates on the known-class test examples only.
pub fn classifier_metrics(view: &ClassifierView<'_>, ds: &Dataset, split: &OpenSetSplit) -> Result<ClassMetrics, HarnessError> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for &i in &ds.test_indices {
        if let Some(t) = split.known_index(ds.label(i)) {
            truth.push(t);
            pred.push(view.predict(ds.row(i))?);
        }
    }
    if truth.is_empty() {
        return Err(HarnessError::EmptyTestSplit);
    }
    Ok(classification_metrics(&truth, &pred, split.k()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub k_i: usize,
    pub l_i: usize,
    pub recall: f64,
    pub precision: f64,
    pub test_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub const METRIC_NAMES: [&str; 8] = [
    "k_i",
    "l_i",
    "recall",
    "precision",
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_f1",
];

impl RoundMetrics {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 8] {
        [
            self.k_i as f64,
            self.l_i as f64,
            self.recall,
            self.precision,
            self.test_accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
        ]
    }
}

// ---------------------------------------------------------------------------
// round loop

/// Everything fixed for one seed's run.
pub struct Episode<'a> {
    pub cfg: &'a ExperimentConfig,
    pub ds: &'a Dataset,
    pub split: OpenSetSplit,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RoundState {
    pub pool: PoolState,
    /// K-way classifier from the previous round; `None` under the shared-network ablation.
    pub classifier: Option<NetParams>,
    /// Known-class count in the unlabeled pool at round 0.
    pub n_kno: usize,
    pub known_per_round: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub batch: QueryBatch,
    /// Number of examples the detector was trained on this round, if one was trained.
    pub detector_train_size: Option<usize>,
    /// Detector trained this round (before the query), if any.
    pub detector: Option<NetParams>,
}

impl<'a> Episode<'a> {
    pub fn new(cfg: &'a ExperimentConfig, ds: &'a Dataset, seed: u64) -> Result<Self, HarnessError> {
        let split = split_known_unknown(ds.n_classes, cfg.mismatch_ratio)?;
        Ok(Episode { cfg, ds, split, seed })
    }

    fn k(&self) -> usize {
        self.split.k()
    }

    pub fn initial_state(&self) -> Result<RoundState, HarnessError> {
        let pool = init_pools(
            self.ds,
            &self.split,
            self.cfg.init_per_class,
            derive_seed(self.seed, Purpose::PoolInit, 0),
        )?;
        let n_kno = pool.count_known_unlabeled(self.ds, &self.split);
        let classifier = if self.cfg.ablation == Ablation::SharedNetwork {
            None
        } else {
            Some(self.train_classifier(&pool, 0)?)
        };
        Ok(RoundState {
            pool,
            classifier,
            n_kno,
            known_per_round: Vec::new(),
        })
    }

    fn fit(
        &self,
        spec: NetSpec,
        data: &[(&[f64], usize)],
        mut train_cfg: TrainConfig,
        round: usize,
        init: Purpose,
        fit: Purpose,
    ) -> Result<NetParams, HarnessError> {
        let params = NetParams::init(&spec, derive_seed(self.seed, init, round as u32))?;
        train_cfg.seed = derive_seed(self.seed, fit, round as u32);
        train(params, data, &train_cfg).map_err(|source| HarnessError::Training { round, source })
    }

    /// Detector training set: labeled examples with their known index, plus
    /// (unless ablated) invalid examples mapped to class K.
    pub fn detector_data(&self, pool: &PoolState) -> Vec<(&'a [f64], usize)> {
        let k = self.k();
        let mut data: Vec<(&[f64], usize)> = pool
            .labeled
            .iter()
            .map(|(&i, &c)| (self.ds.row(i), self.split.known_index(c).expect("labeled class is known")))
            .collect();
        if self.cfg.ablation != Ablation::NoInvalidSet {
            data.extend(pool.invalid.iter().map(|&i| (self.ds.row(i), k)));
        }
        data
    }

    pub fn train_detector(&self, pool: &PoolState, round: usize, purpose_offset: bool) -> Result<(NetParams, usize), HarnessError> {
        let spec = NetSpec::new(
            self.ds.dims,
            self.cfg.detector.hidden_dims.clone(),
            self.k() + 1,
            self.cfg.detector.dropout_rate,
        )?;
        let data = self.detector_data(pool);
        let train_cfg = TrainConfig {
            temperature: self.cfg.detector_temperature(),
            ..self.cfg.detector.train.clone()
        };
        // the shared-network ablation retrains after the query under the classifier streams
        let (init, fit) = if purpose_offset {
            (Purpose::ClassifierInit, Purpose::ClassifierTrain)
        } else {
            (Purpose::DetectorInit, Purpose::DetectorTrain)
        };
        let net = self.fit(spec, &data, train_cfg, round, init, fit)?;
        Ok((net, data.len()))
    }

    pub fn train_classifier(&self, pool: &PoolState, round: usize) -> Result<NetParams, HarnessError> {
        let spec = NetSpec::new(
            self.ds.dims,
            self.cfg.classifier.hidden_dims.clone(),
            self.k(),
            self.cfg.classifier_dropout(),
        )?;
        let data: Vec<(&[f64], usize)> = pool
            .labeled
            .iter()
            .map(|(&i, &c)| (self.ds.row(i), self.split.known_index(c).expect("labeled class is known")))
            .collect();
        self.fit(
            spec,
            &data,
            self.cfg.classifier.train.clone(),
            round,
            Purpose::ClassifierInit,
            Purpose::ClassifierTrain,
        )
    }

    fn select(&self, state: &RoundState, detector: Option<&NetParams>, round: usize) -> Result<QueryBatch, HarnessError> {
        let cfg = self.cfg;
        let (pool, b, k) = (&state.pool, cfg.b, self.k());
        let view = match (cfg.ablation, detector, &state.classifier) {
            (Ablation::SharedNetwork, Some(d), _) => ClassifierView::first_k(d, k),
            (_, _, Some(c)) => ClassifierView::full(c),
            _ => unreachable!("a classifier or shared detector always exists"),
        };
        let sampler_seed = derive_seed(self.seed, Purpose::Sampler, round as u32);
        let batch = match cfg.strategy {
            Strategy::Lfosa => samplers::lfosa_select(detector.expect("lfosa trains a detector"), self.ds, pool, b, k, cfg.em)?,
            Strategy::Random => samplers::random_select(pool, b, sampler_seed)?,
            Strategy::Uncertainty => samplers::uncertainty_select(&view, self.ds, pool, b)?,
            Strategy::Certainty => samplers::certainty_select(&view, self.ds, pool, b, cfg.certainty_score)?,
            Strategy::Coreset => samplers::coreset_select(&view, self.ds, pool, b)?,
            Strategy::Bald => samplers::bald_select(
                &view,
                self.ds,
                pool,
                b,
                cfg.bald_samples,
                derive_seed(self.seed, Purpose::Dropout, round as u32),
            )?,
        };
        Ok(batch)
    }

    /// One active-learning round (1-based `state.pool.round + 1`).
    pub fn run_round(&self, state: &RoundState) -> Result<(RoundState, RoundOutcome), HarnessError> {
        let round = state.pool.round + 1;
        if state.pool.unlabeled.is_empty() {
            return Err(HarnessError::PoolExhausted(round));
        }
        let (detector, detector_train_size) = if self.cfg.uses_detector() {
            let (d, n) = self.train_detector(&state.pool, round, false)?;
            (Some(d), Some(n))
        } else {
            (None, None)
        };
        let batch = self.select(state, detector.as_ref(), round)?;
        let (pool, k_i, l_i) = apply_query(&state.pool, &batch.indices, |i| oracle_label(self.ds, &self.split, i))?;
        debug!(
            "seed {} round {round}: queried {} (known {k_i}, unknown {l_i}), threshold {:?}",
            self.seed,
            batch.len(),
            batch.threshold
        );

        let mut known_per_round = state.known_per_round.clone();
        known_per_round.push(k_i);

        let (classifier, shared) = if self.cfg.ablation == Ablation::SharedNetwork {
            (None, Some(self.train_detector(&pool, round, true)?.0))
        } else {
            (Some(self.train_classifier(&pool, round)?), None)
        };
        let view = match (&classifier, &shared) {
            (Some(c), _) => ClassifierView::full(c),
            (None, Some(s)) => ClassifierView::first_k(s, self.k()),
            (None, None) => unreachable!(),
        };
        let cm = classifier_metrics(&view, self.ds, &self.split)?;
        let metrics = RoundMetrics {
            round,
            k_i,
            l_i,
            recall: selection_recall(&known_per_round, state.n_kno),
            precision: selection_precision(k_i, l_i),
            test_accuracy: cm.accuracy,
            macro_precision: cm.macro_precision,
            macro_recall: cm.macro_recall,
            macro_f1: cm.macro_f1,
        };
        let next = RoundState {
            pool,
            classifier,
            n_kno: state.n_kno,
            known_per_round,
        };
        Ok((
            next,
            RoundOutcome {
                metrics,
                batch,
                detector_train_size,
                detector,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// experiments

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub rounds: Vec<RoundMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub strategy: Strategy,
    pub ablation: Ablation,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    /// Seeds that reached this round.
    pub n: usize,
    pub mean: [f64; 8],
    /// Sample standard deviation (n-1 denominator); 0 for a single seed.
    pub std: [f64; 8],
}

/// Builds the dataset for one seed. Synthetic data is regenerated from the
/// seed; CSV data is loaded as given.
pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset, HarnessError> {
    let mut ds = match &cfg.data {
        DataSource::Synthetic(p) => make_synthetic_openset(p, derive_seed(seed, Purpose::Dataset, 0))?,
        DataSource::Csv { train, test } => Dataset::from_csv(train, test)?,
    };
    if cfg.standardize {
        ds.standardize();
    }
    Ok(ds)
}

/// Runs all rounds for one seed. Stops early (with a warning) if the
/// unlabeled pool runs out.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, HarnessError> {
    let ds = load_dataset(cfg, seed)?;
    let episode = Episode::new(cfg, &ds, seed)?;
    let mut state = episode.initial_state()?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        if state.pool.unlabeled.is_empty() {
            warn!("seed {seed}: unlabeled pool exhausted after round {}", state.pool.round);
            break;
        }
        let (next, outcome) = episode.run_round(&state)?;
        let m = outcome.metrics;
        info!(
            "{} seed {seed} round {}: precision {:.3} recall {:.3} accuracy {:.3}",
            cfg.strategy, m.round, m.precision, m.recall, m.test_accuracy
        );
        rounds.push(m);
        state = next;
    }
    Ok(SeedRun { seed, rounds })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    run_experiment_jobs(cfg, 1)
}

/// Runs seeds on up to `jobs` threads. Output order follows `cfg.seeds`.
pub fn run_experiment_jobs(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let runs = if jobs <= 1 {
        cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>, _>>())?
    };
    Ok(ExperimentResult {
        strategy: cfg.strategy,
        ablation: cfg.ablation,
        runs,
    })
}

pub fn aggregate(result: &ExperimentResult) -> Vec<RoundSummary> {
    let max_rounds = result.runs.iter().map(|r| r.rounds.len()).max().unwrap_or(0);
    (0..max_rounds)
        .map(|r| {
            let rows: Vec<[f64; 8]> = result
                .runs
                .iter()
                .filter_map(|run| run.rounds.get(r))
                .map(RoundMetrics::values)
                .collect();
            let n = rows.len() as f64;
            let mut mean = [0.0; 8];
            let mut std = [0.0; 8];
            for j in 0..8 {
                mean[j] = rows.iter().map(|v| v[j]).sum::<f64>() / n;
                if rows.len() > 1 {
                    std[j] = (rows.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                }
            }
            RoundSummary {
                round: r + 1,
                n: rows.len(),
                mean,
                std,
            }
        })
        .collect()
}
