//! Policy features and GPOMDP training of the recomputation policy.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{run_episode, AugmentedState, EpisodeOptions, EpisodeRecord, EpisodeTask};
use crate::error::{Error, Result};
use crate::harness::{evaluate_policy, TestSet};
use crate::mpc::SolverSettings;
use crate::policy::{FeatureStats, PolicyKind, PolicyParams};
use crate::seed::{derive_seed, stream};
use crate::systems::{EpisodeSeeds, SystemModel};

/// `[x, eps, steps_since / N]` followed by the plant's exogenous features.
pub fn raw_features(
    system: &dyn SystemModel,
    aug: &AugmentedState,
    eps: &DVector<f64>,
) -> Vec<f64> {
    let mut raw: Vec<f64> = aug.x_current.iter().chain(eps.iter()).copied().collect();
    raw.push(aug.steps_since as f64 / system.horizon() as f64);
    raw.extend(system.exogenous_features(&aug.params_current));
    raw
}

pub fn raw_feature_names(system: &dyn SystemModel) -> Vec<String> {
    let nx = system.nx();
    let mut names: Vec<String> = (0..nx).map(|i| format!("x{i}")).collect();
    names.extend((0..nx).map(|i| format!("err{i}")));
    names.push("steps_since".into());
    names.extend(system.exogenous_feature_names());
    names
}

/// Names of the expanded features, bias excluded.
pub fn expanded_feature_names(system: &dyn SystemModel) -> Vec<String> {
    let raw = raw_feature_names(system);
    let squares: Vec<String> = raw.iter().map(|n| format!("{n}^2")).collect();
    raw.into_iter().chain(squares).collect()
}

/// Raw features followed by their squares.
pub fn expand(raw: &[f64]) -> Vec<f64> {
    raw.iter()
        .copied()
        .chain(raw.iter().map(|v| v * v))
        .collect()
}

/// Expands, normalizes each component with the frozen statistics and appends the bias.
pub fn expand_and_normalize(raw: &[f64], stats: &FeatureStats) -> Vec<f64> {
    let expanded = expand(raw);
    debug_assert_eq!(expanded.len(), stats.len());
    let mut out: Vec<f64> = expanded
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect();
    out.push(1.0);
    out
}

pub fn build_features(
    system: &dyn SystemModel,
    aug: &AugmentedState,
    eps: &DVector<f64>,
    stats: &FeatureStats,
) -> Vec<f64> {
    expand_and_normalize(&raw_features(system, aug, eps), stats)
}

/// Running mean and variance (Welford) of the expanded features.
#[derive(Debug, Clone, Default)]
pub struct FeatureAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl FeatureAccumulator {
    pub fn push(&mut self, expanded: &[f64]) {
        if self.count == 0 {
            self.mean = vec![0.0; expanded.len()];
            self.m2 = vec![0.0; expanded.len()];
        }
        self.count += 1;
        let n = self.count as f64;
        for (i, &v) in expanded.iter().enumerate() {
            let d = v - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (v - self.mean[i]);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Frozen statistics; components without spread keep unit scale.
    pub fn freeze(&self) -> FeatureStats {
        let n = self.count.max(1) as f64;
        let std = self
            .m2
            .iter()
            .map(|m2| {
                let s = (m2 / n).sqrt();
                if s > 1e-12 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        FeatureStats {
            mean: self.mean.clone(),
            std,
        }
    }
}

/// Discounted cost-to-go `sum_{t' >= t} gamma^t' c_t'` at every step, terminal cost included.
pub fn discounted_cost_to_go(record: &EpisodeRecord, gamma: f64) -> Vec<f64> {
    let t_len = record.steps.len();
    let mut out = vec![0.0; t_len];
    let mut acc = gamma.powi(t_len as i32) * record.terminal.cost;
    for t in (0..t_len).rev() {
        acc += gamma.powi(t as i32) * record.steps[t].cost;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    /// Mean cost-to-go of the other episodes in the batch at the same step.
    #[default]
    LeaveOneOut,
}

/// GPOMDP estimate of the gradient of the expected discounted cost.
///
/// Only steps where the policy was sampled contribute score terms. Returns an
/// empty vector when the batch holds no decision points.
pub fn gpomdp_gradient(batch: &[EpisodeRecord], gamma: f64) -> Result<Vec<f64>> {
    gpomdp_gradient_with(batch, gamma, Baseline::LeaveOneOut)
}

pub fn gpomdp_gradient_with(
    batch: &[EpisodeRecord],
    gamma: f64,
    baseline: Baseline,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Contract("gradient of an empty batch".into()));
    }
    let dim = batch
        .iter()
        .flat_map(|r| r.steps.iter())
        .find_map(|s| s.score.as_ref().map(Vec::len));
    let Some(dim) = dim else {
        return Ok(Vec::new());
    };
    let ctg: Vec<Vec<f64>> = batch
        .iter()
        .map(|r| discounted_cost_to_go(r, gamma))
        .collect();
    let max_len = ctg.iter().map(Vec::len).max().unwrap_or(0);
    let mut sums = vec![0.0; max_len];
    let mut counts = vec![0usize; max_len];
    for c in &ctg {
        for (t, v) in c.iter().enumerate() {
            sums[t] += v;
            counts[t] += 1;
        }
    }

    let mut grad = vec![0.0; dim];
    for (record, c) in batch.iter().zip(&ctg) {
        for (t, step) in record.steps.iter().enumerate() {
            let Some(score) = &step.score else { continue };
            if score.len() != dim {
                return Err(Error::Dimension {
                    context: "score vector",
                    expected: dim,
                    got: score.len(),
                });
            }
            let b = match baseline {
                Baseline::None => 0.0,
                Baseline::LeaveOneOut if counts[t] > 1 => (sums[t] - c[t]) / (counts[t] - 1) as f64,
                Baseline::LeaveOneOut => 0.0,
            };
            let adv = c[t] - b;
            for (g, s) in grad.iter_mut().zip(score) {
                *g += s * adv;
            }
        }
    }
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training episodes, warm-up excluded.
    pub episodes: usize,
    /// Episodes between test-set evaluations.
    pub eval_interval: usize,
    /// Test-set passes per evaluation during training.
    pub eval_repeats: usize,
    pub warmup_episodes: usize,
    pub clip_norm: f64,
    pub baseline: Baseline,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.975,
            learning_rate: 0.05,
            batch_size: 10,
            episodes: 1500,
            eval_interval: 150,
            eval_repeats: 1,
            warmup_episodes: 50,
            clip_norm: 10.0,
            baseline: Baseline::LeaveOneOut,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "discount {} must lie in [0, 1)",
                self.gamma
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_repeats == 0 {
            return Err(Error::Config(
                "batch size, evaluation interval and repeats must be positive".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub recompute_fraction: f64,
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "episode,mean_return,std_return,recompute_fraction")?;
    for p in curve {
        writeln!(
            w,
            "{},{},{},{}",
            p.episode, p.mean_return, p.std_return, p.recompute_fraction
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub initial_params: PolicyParams,
    pub curve: Vec<CurvePoint>,
    pub checkpoints: Vec<(usize, PolicyParams)>,
    pub clip_events: usize,
    /// Episode count at which the weights stopped being finite.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub settings: SolverSettings,
    pub steps: usize,
    /// Where checkpoints and the learning curve go.
    pub out_dir: Option<PathBuf>,
}

fn training_task(seed: u64, phase: u64, index: u64) -> EpisodeTask {
    let master = derive_seed(seed, stream::TRAINING, phase);
    EpisodeTask {
        id: index,
        seeds: EpisodeSeeds::derive(master, index),
        policy_seed: derive_seed(master, stream::POLICY, index),
    }
}

/// Normalization statistics from `never`-policy episodes, which visit every plan offset.
pub fn warmup_statistics(
    system: &dyn SystemModel,
    episodes: usize,
    seed: u64,
    options: &EpisodeOptions,
) -> Result<FeatureStats> {
    let opts = EpisodeOptions {
        record_features: true,
        ..*options
    };
    let records: Vec<EpisodeRecord> = (0..episodes as u64)
        .into_par_iter()
        .map(|k| {
            run_episode(
                system,
                &PolicyKind::Never,
                &training_task(seed, 0, k),
                &opts,
            )
        })
        .collect::<Result<_>>()?;
    let mut acc = FeatureAccumulator::default();
    for r in &records {
        for s in &r.steps {
            if let Some(raw) = &s.raw_features {
                acc.push(&expand(raw));
            }
        }
    }
    if acc.count() == 0 {
        return Ok(FeatureStats::identity(2 * raw_feature_names(system).len()));
    }
    Ok(acc.freeze())
}

fn clip(grad: &mut [f64], max_norm: f64) -> bool {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
        true
    } else {
        false
    }
}

fn write_checkpoint(
    dir: &Path,
    episode: usize,
    params: &PolicyParams,
    curve: &[CurvePoint],
) -> Result<()> {
    params.save(&dir.join(format!("checkpoint_{episode:05}.json")))?;
    let f = std::fs::File::create(dir.join("learning_curve.csv"))?;
    write_curve_csv(curve, std::io::BufWriter::new(f))?;
    Ok(())
}

/// Trains the logistic policy with `theta <- theta - alpha * g` per batch,
/// evaluating on `testset` every `eval_interval` episodes.
pub fn train(
    system: &dyn SystemModel,
    cfg: &TrainConfig,
    testset: &TestSet,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let episode_options = EpisodeOptions {
        steps: if options.steps == 0 {
            testset.steps
        } else {
            options.steps
        },
        settings: options.settings,
        ..EpisodeOptions::default()
    };
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let stats = warmup_statistics(system, cfg.warmup_episodes, cfg.seed, &episode_options)?;
    let initial = PolicyParams::initial(stats, expanded_feature_names(system));
    let mut params = initial.clone();
    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    let mut clip_events = 0;
    let mut diverged_at = None;

    let evaluate =
        |params: &PolicyParams, episode: usize, curve: &mut Vec<CurvePoint>| -> Result<()> {
            let policy = PolicyKind::Logistic(params.clone());
            let report = evaluate_policy(
                system,
                &policy,
                testset,
                cfg.eval_repeats,
                &options.settings,
            )?;
            log::info!(
                "episode {episode}: test return {:.6} recompute fraction {:.3}",
                report.mean_return,
                report.recompute_fraction
            );
            curve.push(CurvePoint {
                episode,
                mean_return: report.mean_return,
                std_return: report.std_return,
                recompute_fraction: report.recompute_fraction,
            });
            Ok(())
        };

    evaluate(&params, 0, &mut curve)?;
    checkpoints.push((0, params.clone()));
    if let Some(dir) = &options.out_dir {
        write_checkpoint(dir, 0, &params, &curve)?;
    }

    let mut done = 0;
    while done < cfg.episodes {
        let batch_len = cfg.batch_size.min(cfg.episodes - done);
        let policy = PolicyKind::Logistic(params.clone());
        let batch: Vec<EpisodeRecord> = (done..done + batch_len)
            .into_par_iter()
            .map(|k| {
                run_episode(
                    system,
                    &policy,
                    &training_task(cfg.seed, 1, k as u64),
                    &episode_options,
                )
            })
            .collect::<Result<_>>()?;
        let mut grad = gpomdp_gradient_with(&batch, cfg.gamma, cfg.baseline)?;
        if !grad.is_empty() {
            if clip(&mut grad, cfg.clip_norm) {
                clip_events += 1;
                log::warn!("gradient clipped at episode {}", done + batch_len);
            }
            for (t, g) in params.theta.iter_mut().zip(&grad) {
                *t -= cfg.learning_rate * g;
            }
        }
        done += batch_len;

        if params.theta.iter().any(|t| !t.is_finite()) {
            log::error!("policy weights diverged after {done} episodes");
            diverged_at = Some(done);
            break;
        }

        let crossed = (done - batch_len) / cfg.eval_interval != done / cfg.eval_interval;
        if crossed || done == cfg.episodes {
            evaluate(&params, done, &mut curve)?;
            checkpoints.push((done, params.clone()));
            if let Some(dir) = &options.out_dir {
                write_checkpoint(dir, done, &params, &curve)?;
            }
        }
    }

    if let Some(dir) = &options.out_dir {
        params.save(&dir.join("policy.json"))?;
    }
    Ok(TrainOutcome {
        params,
        initial_params: initial,
        curve,
        checkpoints,
        clip_events,
        diverged_at,
    })
}
