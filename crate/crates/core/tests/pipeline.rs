use osal_core::datapool::{oracle_label, SyntheticParams};
use osal_core::harness::{aggregate, load_dataset, run_experiment, run_experiment_jobs, DataSource, Episode, METRIC_NAMES};
use osal_core::report::results_csv_string;
use osal_core::{Ablation, ExperimentConfig, OracleAnswer, Strategy};

fn small_config(strategy: Strategy) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data: DataSource::Synthetic(SyntheticParams {
            n_classes: 8,
            dims: 6,
            per_class: 50,
            ..SyntheticParams::default()
        }),
        init_per_class: 4,
        rounds: 3,
        b: 30,
        strategy,
        seeds: vec![1, 2],
        ..ExperimentConfig::default()
    };
    cfg.detector.train.epochs = 20;
    cfg.classifier.train.epochs = 20;
    cfg
}

#[test]
fn random_round_spends_the_whole_budget() {
    let cfg = ExperimentConfig {
        strategy: Strategy::Random,
        ..ExperimentConfig::default()
    };
    let ds = load_dataset(&cfg, 1).unwrap();
    let ep = Episode::new(&cfg, &ds, 1).unwrap();
    let state = ep.initial_state().unwrap();
    let (next, out) = ep.run_round(&state).unwrap();
    assert_eq!(out.metrics.k_i + out.metrics.l_i, cfg.b);
    assert_eq!(next.pool.len(), state.pool.len());
    assert!(out.detector.is_none());
}

#[test]
fn detector_targets_follow_the_ablation() {
    for ablation in [Ablation::Full, Ablation::NoInvalidSet] {
        let cfg = ExperimentConfig {
            ablation,
            ..small_config(Strategy::Lfosa)
        };
        let ds = load_dataset(&cfg, 3).unwrap();
        let ep = Episode::new(&cfg, &ds, 3).unwrap();
        let mut state = ep.initial_state().unwrap();
        for _ in 0..2 {
            let (next, out) = ep.run_round(&state).unwrap();
            let data = ep.detector_data(&state.pool);
            let k = ep.split.k();
            assert!(data.iter().all(|&(_, y)| y <= k));
            let expected = match ablation {
                Ablation::NoInvalidSet => state.pool.labeled.len(),
                _ => state.pool.labeled.len() + state.pool.invalid.len(),
            };
            assert_eq!(out.detector_train_size, Some(expected));
            state = next;
        }
        assert!(!state.pool.invalid.is_empty());
    }
}

#[test]
fn metrics_match_a_recount_of_the_query_log() {
    for strategy in Strategy::ALL {
        let cfg = small_config(strategy);
        let ds = load_dataset(&cfg, 2).unwrap();
        let ep = Episode::new(&cfg, &ds, 2).unwrap();
        let mut state = ep.initial_state().unwrap();
        let n_kno = state.pool.unlabeled.iter().filter(|&&i| ep.split.is_known(ds.label(i))).count();
        assert_eq!(state.n_kno, n_kno);
        let mut known_so_far = 0;
        let mut last_recall = 0.0;
        for _ in 0..cfg.rounds {
            let (next, out) = ep.run_round(&state).unwrap();
            let k = out
                .batch
                .indices
                .iter()
                .filter(|&&i| matches!(oracle_label(&ds, &ep.split, i), OracleAnswer::Known(_)))
                .count();
            known_so_far += k;
            let m = out.metrics;
            assert_eq!((m.k_i, m.l_i), (k, out.batch.len() - k), "{strategy}");
            assert_eq!(m.precision, k as f64 / out.batch.len() as f64);
            assert_eq!(m.recall, known_so_far as f64 / n_kno as f64);
            assert!(m.recall >= last_recall && m.recall <= 1.0);
            last_recall = m.recall;
            assert_eq!(next.n_kno, n_kno);
            state = next;
        }
    }
}

#[test]
fn shared_network_ablation_runs() {
    let cfg = ExperimentConfig {
        ablation: Ablation::SharedNetwork,
        ..small_config(Strategy::Lfosa)
    };
    let res = run_experiment(&cfg).unwrap();
    assert_eq!(res.runs.len(), 2);
    assert!(res.runs.iter().all(|r| r.rounds.len() == 3));
}

#[test]
fn single_seed_single_round_gives_one_row() {
    let cfg = ExperimentConfig {
        seeds: vec![1],
        rounds: 1,
        ..small_config(Strategy::Random)
    };
    let res = run_experiment(&cfg).unwrap();
    assert_eq!(res.runs.len(), 1);
    assert_eq!(res.runs[0].rounds.len(), 1);
    assert_eq!(results_csv_string(&[&res]).lines().count(), 2);
}

#[test]
fn experiments_are_pure_functions_of_the_config() {
    let cfg = small_config(Strategy::Bald);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let c = run_experiment_jobs(&cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn pool_exhaustion_ends_a_seed_early() {
    let cfg = ExperimentConfig {
        b: 200,
        rounds: 5,
        ..small_config(Strategy::Random)
    };
    let res = run_experiment(&cfg).unwrap();
    // 8 classes x 40 train = 320 examples; 2 known classes x 4 initially labeled
    assert!(res.runs.iter().all(|r| r.rounds.len() == 2));
    let last = &res.runs[0].rounds[1];
    assert_eq!(last.k_i + last.l_i, 320 - 8 - 200);
    assert_eq!(last.recall, 1.0);
}

#[test]
fn aggregate_matches_brute_force_means() {
    let cfg = ExperimentConfig {
        seeds: vec![1, 2, 3],
        ..small_config(Strategy::Certainty)
    };
    let res = run_experiment(&cfg).unwrap();
    let summary = aggregate(&res);
    assert_eq!(summary.len(), cfg.rounds);
    for s in &summary {
        for m in 0..METRIC_NAMES.len() {
            let vals: Vec<f64> = res.runs.iter().map(|r| r.rounds[s.round - 1].values()[m]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            assert!((s.mean[m] - mean).abs() < 1e-12);
            assert!((s.std[m] - var.sqrt()).abs() < 1e-12);
        }
    }
}
