use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osal_core::nn::{argmax, ce_loss_t, softmax_t, train, train_with_history, NetParams, NetSpec, TrainConfig};

fn two_clusters(n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = i % 2;
            let cx = if c == 0 { -2.0 } else { 2.0 };
            (vec![cx + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], c)
        })
        .collect()
}

#[test]
fn separable_clusters_are_fitted_exactly() {
    let data = two_clusters(200, 1);
    let samples: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let spec = NetSpec::new(2, vec![16], 2, 0.0).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 32,
        seed: 4,
        ..TrainConfig::default()
    };
    let net = train(NetParams::init(&spec, 2).unwrap(), &samples, &cfg).unwrap();
    let correct = samples.iter().filter(|(x, y)| net.predict_class(x).unwrap() == *y).count();
    assert_eq!(correct, samples.len());
}

#[test]
fn convex_full_batch_loss_never_increases() {
    let data = two_clusters(60, 2);
    let samples: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let spec = NetSpec::new(2, vec![], 2, 0.0).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 0.05,
        momentum: 0.0,
        weight_decay: 0.0,
        batch_size: samples.len(),
        temperature: 1.0,
        seed: 1,
    };
    let (net, history) = train_with_history(NetParams::init(&spec, 3).unwrap(), &samples, &cfg).unwrap();
    assert_eq!(history.len(), 50);
    assert!(history.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{history:?}");
    let final_loss: f64 = samples
        .iter()
        .map(|(x, y)| ce_loss_t(&net.logits(x).unwrap(), *y, 1.0))
        .sum::<f64>()
        / samples.len() as f64;
    assert!(final_loss < history[0]);
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = two_clusters(50, 3);
    let samples: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let spec = NetSpec::new(2, vec![8, 4], 2, 0.2).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 7,
        ..TrainConfig::default()
    };
    let a = train(NetParams::init(&spec, 1).unwrap(), &samples, &cfg).unwrap();
    let b = train(NetParams::init(&spec, 1).unwrap(), &samples, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn predicted_class_is_softmax_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = NetSpec::new(4, vec![10], 6, 0.0).unwrap();
    let net = NetParams::init(&spec, 8).unwrap();
    for _ in 0..1000 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = net.logits(&x).unwrap();
        let predicted = net.predict_class(&x).unwrap();
        for t in [0.1, 0.5, 1.0, 2.0, 10.0] {
            assert_eq!(argmax(&softmax_t(&logits, t)), predicted);
        }
    }
}

#[test]
fn mc_dropout_samples_are_distributions() {
    let spec = NetSpec::new(3, vec![12], 4, 0.5).unwrap();
    let net = NetParams::init(&spec, 2).unwrap();
    let x = [0.3, -1.2, 2.0];
    let a = net.mc_dropout_probs(&x, 10, 77).unwrap();
    assert_eq!(a, net.mc_dropout_probs(&x, 10, 77).unwrap());
    for p in &a {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= 0.0));
    }
    let frozen = NetParams::init(&NetSpec::new(3, vec![12], 4, 0.0).unwrap(), 2).unwrap();
    let s = frozen.mc_dropout_probs(&x, 10, 77).unwrap();
    assert!(s.iter().all(|p| p == &s[0]));
}

#[test]
fn backprop_matches_finite_differences_on_random_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..10 {
        let spec = NetSpec::new(3, vec![5, 4], 3, 0.0).unwrap();
        let net = NetParams::init(&spec, trial).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = rng.random_range(0..3);
        let t = [0.5, 1.0, 2.0][trial as usize % 3];
        let (_, grads) = net.loss_and_grad(&x, target, t).unwrap();
        let loss_at = |p: &NetParams| ce_loss_t(&p.logits(&x).unwrap(), target, t);
        for (l, layer) in net.layers().iter().enumerate() {
            for w in 0..layer.weights.len() + layer.bias.len() {
                let h = 1e-5;
                let bump = |d: f64| {
                    let mut q = net.clone();
                    let ly = &mut q.layers_mut()[l];
                    if w < ly.weights.len() {
                        ly.weights[w] += d;
                    } else {
                        ly.bias[w - ly.weights.len()] += d;
                    }
                    loss_at(&q)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let g = if w < layer.weights.len() {
                    grads[l].weights[w]
                } else {
                    grads[l].bias[w - layer.weights.len()]
                };
                // a ReLU kink inside ±h makes the difference meaningless
                if (fd - g).abs() > 1e-4 * fd.abs().max(g.abs()).max(1e-3) {
                    let kink = (bump(h) - 2.0 * loss_at(&net) + bump(-h)).abs() > 1e-9;
                    assert!(kink, "layer {l} param {w}: fd {fd} vs analytic {g}");
                }
            }
        }
    }
}
