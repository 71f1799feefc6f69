//! Frozen test sets and paired policy evaluation.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closed_loop::{run_episode, EpisodeOptions, EpisodeTask};
use crate::error::{Error, Result};
use crate::mpc::SolverSettings;
use crate::policy::PolicyKind;
use crate::seed::{derive_seed, stream};
use crate::systems::{EpisodeSeeds, SystemKind, SystemModel};

pub const TESTSET_FILE: &str = "testset.json";

/// Hex SHA-256 of the system configuration and episode length.
pub fn config_hash(system: &dyn SystemModel, steps: usize) -> String {
    let snapshot = serde_json::json!({
        "system": system.kind(),
        "config": system.config_json(),
        "steps": steps,
    });
    let digest = Sha256::digest(snapshot.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub system: SystemKind,
    pub master_seed: u64,
    pub steps: usize,
    pub config_hash: String,
    pub episodes: Vec<EpisodeSeeds>,
}

pub fn build_testset(
    system: &dyn SystemModel,
    episodes: usize,
    steps: usize,
    master_seed: u64,
) -> TestSet {
    TestSet {
        system: system.kind(),
        master_seed,
        steps,
        config_hash: config_hash(system, steps),
        episodes: (0..episodes as u64)
            .map(|i| EpisodeSeeds::derive(master_seed, i))
            .collect(),
    }
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Refuses a test set built for another configuration.
    pub fn check(&self, system: &dyn SystemModel) -> Result<()> {
        if self.system != system.kind() {
            return Err(Error::Config(format!(
                "test set is for the {} system, not {}",
                self.system,
                system.kind()
            )));
        }
        let got = config_hash(system, self.steps);
        if got != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: self.config_hash.clone(),
                got,
            });
        }
        Ok(())
    }

    /// Episode `index` under policy-sampling repeat `repeat`.
    pub fn task(&self, index: usize, repeat: usize) -> EpisodeTask {
        let policy_master = derive_seed(self.master_seed, stream::POLICY, repeat as u64);
        EpisodeTask {
            id: index as u64,
            seeds: self.episodes[index],
            policy_seed: derive_seed(policy_master, stream::POLICY, index as u64),
        }
    }

    /// Writes `testset.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(TESTSET_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Reads a test set from a directory or a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(TESTSET_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| Error::Config(format!("cannot read test set {}: {e}", file.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub repeat: usize,
    pub episode: usize,
    pub total_return: f64,
    pub recompute_fraction: f64,
    pub unconverged_solves: usize,
    /// Error message of a failed episode.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub repeats: usize,
    /// Mean undiscounted return over successful episodes and repeats.
    pub mean_return: f64,
    /// Spread of the per-episode returns.
    pub std_return: f64,
    /// Spread of the per-repeat mean returns (zero for a single repeat).
    pub std_across_repeats: f64,
    pub recompute_fraction: f64,
    pub failed_episodes: usize,
    pub episodes: Vec<EpisodeOutcome>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `policy` on every test-set episode. Fixed schedules run once regardless of `repeats`.
pub fn evaluate_policy(
    system: &dyn SystemModel,
    policy: &PolicyKind,
    testset: &TestSet,
    repeats: usize,
    settings: &SolverSettings,
) -> Result<EvalReport> {
    testset.check(system)?;
    if testset.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let repeats = if policy.is_stochastic() {
        repeats.max(1)
    } else {
        1
    };
    let options = EpisodeOptions {
        steps: testset.steps,
        settings: *settings,
        ..EpisodeOptions::default()
    };
    let jobs: Vec<(usize, usize)> = (0..repeats)
        .flat_map(|r| (0..testset.len()).map(move |i| (r, i)))
        .collect();
    let episodes: Vec<EpisodeOutcome> = jobs
        .par_iter()
        .map(|&(repeat, episode)| {
            match run_episode(system, policy, &testset.task(episode, repeat), &options) {
                Ok(rec) => EpisodeOutcome {
                    repeat,
                    episode,
                    total_return: rec.total_return(),
                    recompute_fraction: rec.recompute_fraction(),
                    unconverged_solves: rec.header.unconverged_solves,
                    failure: None,
                },
                Err(e) => EpisodeOutcome {
                    repeat,
                    episode,
                    total_return: f64::NAN,
                    recompute_fraction: f64::NAN,
                    unconverged_solves: 0,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();

    let ok: Vec<&EpisodeOutcome> = episodes.iter().filter(|e| e.failure.is_none()).collect();
    let failed_episodes = episodes.len() - ok.len();
    for e in episodes.iter().filter(|e| e.failure.is_some()) {
        log::warn!(
            "{}: episode {} failed: {}",
            policy,
            e.episode,
            e.failure.as_deref().unwrap_or("")
        );
    }
    let returns: Vec<f64> = ok.iter().map(|e| e.total_return).collect();
    let (mean_return, std_return) = mean_std(&returns);
    let repeat_means: Vec<f64> = (0..repeats)
        .filter_map(|r| {
            let v: Vec<f64> = ok
                .iter()
                .filter(|e| e.repeat == r)
                .map(|e| e.total_return)
                .collect();
            (!v.is_empty()).then(|| mean_std(&v).0)
        })
        .collect();
    let std_across_repeats = if repeat_means.len() > 1 {
        mean_std(&repeat_means).1
    } else {
        0.0
    };
    let fractions: Vec<f64> = ok.iter().map(|e| e.recompute_fraction).collect();
    Ok(EvalReport {
        policy: policy.label(),
        repeats,
        mean_return,
        std_return,
        std_across_repeats,
        recompute_fraction: mean_std(&fractions).0,
        failed_episodes,
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
}

impl Comparison {
    /// Lowest mean return among policies without failed episodes.
    pub fn best_return(&self) -> f64 {
        self.reports
            .iter()
            .filter(|r| r.failed_episodes == 0)
            .map(|r| r.mean_return)
            .fold(f64::INFINITY, f64::min)
    }

    /// `(G - G_best) / |G_best|`.
    pub fn relative_gap(&self, report: &EvalReport) -> f64 {
        let best = self.best_return();
        (report.mean_return - best) / best.abs()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "policy,mean_G,std_G,std_repeats,recompute_fraction,relative_gap,failed_episodes"
        )?;
        for r in &self.reports {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.policy,
                r.mean_return,
                r.std_return,
                r.std_across_repeats,
                r.recompute_fraction,
                self.relative_gap(r),
                r.failed_episodes
            )?;
        }
        Ok(())
    }

    pub fn write_episodes_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "policy,repeat,episode,G,recompute_fraction,unconverged_solves,failed"
        )?;
        for r in &self.reports {
            for e in &r.episodes {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    r.policy,
                    e.repeat,
                    e.episode,
                    e.total_return,
                    e.recompute_fraction,
                    e.unconverged_solves,
                    e.failure.is_some()
                )?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>14} {:>12} {:>10} {:>10}  flags",
            "policy", "mean G", "std G", "recompute", "gap"
        )?;
        for r in &self.reports {
            writeln!(
                f,
                "{:<16} {:>14.6} {:>12.6} {:>10.3} {:>9.2}%  {}",
                r.policy,
                r.mean_return,
                r.std_return,
                r.recompute_fraction,
                100.0 * self.relative_gap(r),
                if r.failed_episodes > 0 {
                    format!("FAILED x{}", r.failed_episodes)
                } else {
                    String::new()
                }
            )?;
        }
        Ok(())
    }
}

/// Evaluates every policy on the same test set.
pub fn compare(
    system: &dyn SystemModel,
    policies: &[PolicyKind],
    testset: &TestSet,
    repeats: usize,
    settings: &SolverSettings,
) -> Result<Comparison> {
    if policies.len() < 2 {
        return Err(Error::Config(
            "a comparison needs at least two policies".into(),
        ));
    }
    let reports = policies
        .iter()
        .map(|p| evaluate_policy(system, p, testset, repeats, settings))
        .collect::<Result<_>>()?;
    Ok(Comparison { reports })
}
