use etmpc::closed_loop::{EpisodeHeader, EpisodeRecord, StepRecord, TerminalRecord};
use etmpc::harness::build_testset;
use etmpc::policy::{log_prob, log_prob_grad, prob_no_recompute, sigmoid};
use etmpc::rl::{
    gpomdp_gradient, gpomdp_gradient_with, train, Baseline, TrainConfig, TrainOptions,
};
use etmpc::systems::{EpisodeSeeds, Pendulum, PendulumConfig};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn score_matches_central_differences_on_1000_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    for _ in 0..1000 {
        let dim = rng.random_range(1..12);
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = rng.random::<bool>();
        let g = log_prob_grad(&theta, &s, a);
        for i in 0..dim {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (log_prob(&tp, &s, a) - log_prob(&tm, &s, a)) / (2.0 * h);
            let err = (fd - g[i]).abs() / g[i].abs().max(1e-3);
            assert!(err < 1e-6, "component {i}: fd {fd} vs {}", g[i]);
        }
    }
}

proptest! {
    #[test]
    fn score_identity(theta in prop::collection::vec(-20.0f64..20.0, 1..8), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = theta.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let p0 = prob_no_recompute(&theta, &s);
        let g0 = log_prob_grad(&theta, &s, false);
        let g1 = log_prob_grad(&theta, &s, true);
        for (a, b) in g0.iter().zip(&g1) {
            let scale = a.abs().max(b.abs()).max(1e-300);
            prop_assert!((p0 * a + (1.0 - p0) * b).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn probabilities_are_complementary(z in -700.0f64..700.0) {
        let p0 = sigmoid(z);
        prop_assert!((0.0..=1.0).contains(&p0));
        prop_assert!((log_prob(&[z], &[1.0], false).exp() - p0).abs() < 1e-12);
        prop_assert!((log_prob(&[z], &[1.0], true).exp() - (1.0 - p0)).abs() < 1e-12);
    }
}

/// One-step episode with a bias-only policy; recomputing costs 1.
fn bandit_episode(theta: f64, rng: &mut impl Rng) -> EpisodeRecord {
    let p1 = 1.0 - sigmoid(theta);
    let a = rng.random::<f64>() < p1;
    EpisodeRecord {
        header: EpisodeHeader {
            id: 0,
            seeds: EpisodeSeeds::derive(0, 0),
            policy_seed: 0,
            policy: "rl".into(),
            unconverged_solves: 0,
        },
        steps: vec![StepRecord {
            step: 0,
            state: DVector::zeros(1),
            input: DVector::zeros(1),
            action: Some(a),
            recompute: a,
            cost: if a { 1.0 } else { 0.0 },
            steps_since: 1,
            error: None,
            raw_features: None,
            features: Some(vec![1.0]),
            score: Some(log_prob_grad(&[theta], &[1.0], a)),
            plan: None,
        }],
        terminal: TerminalRecord {
            state: DVector::zeros(1),
            cost: 0.0,
        },
    }
}

/// Mean and standard error of batch gradient estimates over `episodes` episodes.
fn bandit_estimate(
    theta: f64,
    episodes: usize,
    batch: usize,
    baseline: Baseline,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let estimates: Vec<f64> = (0..episodes / batch)
        .map(|_| {
            let b: Vec<EpisodeRecord> = (0..batch)
                .map(|_| bandit_episode(theta, &mut rng))
                .collect();
            gpomdp_gradient_with(&b, 0.975, baseline).unwrap()[0]
        })
        .collect();
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn bandit_estimator_is_unbiased_at_five_parameters() {
    for (k, theta) in [-2.0, -0.5, 0.0, 0.7, 1.5].into_iter().enumerate() {
        let exact = -sigmoid(theta) * (1.0 - sigmoid(theta));
        let (mean, se) = bandit_estimate(theta, 100_000, 10, Baseline::LeaveOneOut, k as u64);
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "theta {theta}: {mean} vs {exact} (se {se})"
        );
    }
}

#[test]
fn baseline_keeps_the_mean_and_cuts_the_variance() {
    let (with, se_with) = bandit_estimate(0.0, 100_000, 10, Baseline::LeaveOneOut, 42);
    let (without, se_without) = bandit_estimate(0.0, 100_000, 10, Baseline::None, 42);
    assert!((with + 0.25).abs() <= 3.0 * se_with);
    assert!((without + 0.25).abs() <= 3.0 * se_without);
    assert!((with - without).abs() <= 3.0 * (se_with.powi(2) + se_without.powi(2)).sqrt());
    assert!(se_with < se_without, "{se_with} vs {se_without}");
}

#[test]
fn single_episode_batches_match_the_analytic_gradient() {
    let (mean, se) = bandit_estimate(0.0, 100_000, 1, Baseline::LeaveOneOut, 3);
    assert!((mean + 0.25).abs() <= 3.0 * se, "{mean} (se {se})");
    assert!(gpomdp_gradient(&[], 0.975).is_err());
}

fn small_training(cfg: TrainConfig) -> etmpc::rl::TrainOutcome {
    let sys = Pendulum::new(PendulumConfig::default()).unwrap();
    let ts = build_testset(&sys, 4, 30, 11);
    train(
        &sys,
        &cfg,
        &ts,
        &TrainOptions {
            steps: 30,
            ..TrainOptions::default()
        },
    )
    .unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        episodes: 20,
        batch_size: 5,
        eval_interval: 10,
        warmup_episodes: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let out = small_training(TrainConfig {
        learning_rate: 0.0,
        ..tiny_config()
    });
    assert_eq!(out.params, out.initial_params);
    assert_eq!(out.curve.len(), 3);
}

#[test]
fn training_is_reproducible_and_logs_the_curve() {
    let a = small_training(tiny_config());
    let b = small_training(tiny_config());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params, b.params);
    assert_eq!(
        a.curve.iter().map(|p| p.episode).collect::<Vec<_>>(),
        vec![0, 10, 20]
    );
    assert_eq!(a.checkpoints.len(), 3);
    assert_ne!(a.params.theta, a.initial_params.theta);
    assert!(a.params.stats.std.iter().all(|s| *s > 0.0));
}
