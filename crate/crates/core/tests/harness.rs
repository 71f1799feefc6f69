use etmpc::harness::{build_testset, compare, evaluate_policy, TestSet};
use etmpc::mpc::SolverSettings;
use etmpc::policy::FeatureStats;
use etmpc::policy::{PolicyKind, PolicyParams};
use etmpc::rl::expanded_feature_names;
use etmpc::systems::{Pendulum, PendulumConfig, SystemModel};
use etmpc::Error;

fn pendulum() -> Pendulum {
    Pendulum::new(PendulumConfig::default()).unwrap()
}

#[test]
fn fixed_schedules_hit_their_recompute_fractions() {
    let sys = pendulum();
    let ts = build_testset(&sys, 6, 100, 3);
    let s = SolverSettings::default();
    let always = evaluate_policy(&sys, &PolicyKind::Always, &ts, 5, &s).unwrap();
    assert_eq!(always.recompute_fraction, 1.0);
    assert_eq!(always.repeats, 1);
    let never = evaluate_policy(&sys, &PolicyKind::Never, &ts, 1, &s).unwrap();
    assert!((never.recompute_fraction - 0.05).abs() < 1e-12);
    let again = evaluate_policy(&sys, &PolicyKind::Never, &ts, 1, &s).unwrap();
    assert_eq!(never, again);
    assert_eq!(never.failed_episodes, 0);
}

#[test]
fn comparison_has_one_row_per_policy() {
    let sys = pendulum();
    let ts = build_testset(&sys, 3, 40, 4);
    let names = expanded_feature_names(&sys);
    let params = PolicyParams::initial(FeatureStats::identity(names.len()), names);
    let policies = vec![
        PolicyKind::Always,
        PolicyKind::Never,
        PolicyKind::Periodic(5),
        PolicyKind::Logistic(params),
    ];
    let cmp = compare(&sys, &policies, &ts, 2, &SolverSettings::default()).unwrap();
    assert_eq!(cmp.reports.len(), 4);
    assert_eq!(cmp.reports[3].repeats, 2);
    assert_eq!(cmp.reports[3].episodes.len(), 6);
    let mut csv = Vec::new();
    cmp.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    let best = cmp
        .reports
        .iter()
        .map(|r| cmp.relative_gap(r))
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best, 0.0);
    assert!(compare(&sys, &policies[..1], &ts, 1, &SolverSettings::default()).is_err());
}

#[test]
fn changed_system_config_is_refused() {
    let ts = build_testset(&pendulum(), 2, 20, 5);
    let other = Pendulum::new(PendulumConfig {
        compute_cost: 1e-3,
        ..PendulumConfig::default()
    })
    .unwrap();
    let err = evaluate_policy(
        &other,
        &PolicyKind::Always,
        &ts,
        1,
        &SolverSettings::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }), "{err}");
}

#[test]
fn testset_survives_save_and_load() {
    let sys = pendulum();
    let ts = build_testset(&sys, 10, 100, 6);
    let dir = std::env::temp_dir().join(format!("etmpc-ts-{}", std::process::id()));
    ts.save(&dir).unwrap();
    let back = TestSet::load(&dir).unwrap();
    assert_eq!(back, ts);
    back.check(&sys as &dyn SystemModel).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
}
