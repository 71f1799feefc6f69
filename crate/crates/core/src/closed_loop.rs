//! Event-triggered closed loop: MPC plans, LQR plan tracking, and the
//! recomputation policy over the augmented state.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::{shift_warm_start, solve_ocp, NlpSolution, OcpSpec, SolverSettings};
use crate::policy::{log_prob_grad, sample_action, PolicyKind};
use crate::rl::{expand_and_normalize, raw_features};
use crate::systems::{EpisodeEnv, EpisodeSeeds, SystemModel};

/// Markov state of the triggered loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x_current: DVector<f64>,
    pub x_anchor: DVector<f64>,
    pub steps_since: usize,
    pub params_current: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanState {
    /// Predicted states at offsets `0..=N`.
    pub x_hat: Vec<DVector<f64>>,
    pub u_mpc: Vec<DVector<f64>>,
    pub anchor_time: usize,
    /// Parameter forecast frozen at the anchor.
    pub forecast: Vec<DVector<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

impl PlanState {
    fn from_solution(sol: &NlpSolution, anchor_time: usize, forecast: Vec<DVector<f64>>) -> Self {
        Self {
            x_hat: sol.states.clone(),
            u_mpc: sol.inputs.clone(),
            anchor_time,
            forecast,
            converged: sol.converged,
            iterations: sol.iterations,
        }
    }

    pub fn horizon(&self) -> usize {
        self.u_mpc.len()
    }
}

/// `x_hat_i - x_i` for the plan anchored at `k`, valid for `k <= i < k + N`.
pub fn compute_prediction_error(
    plan: &PlanState,
    x_measured: &DVector<f64>,
    i: usize,
) -> Result<DVector<f64>> {
    let n = plan.horizon();
    if i < plan.anchor_time || i >= plan.anchor_time + n {
        return Err(Error::Contract(format!(
            "step {i} outside the plan anchored at {} with horizon {n}",
            plan.anchor_time
        )));
    }
    let predicted = &plan.x_hat[i - plan.anchor_time];
    if predicted.len() != x_measured.len() {
        return Err(Error::Dimension {
            context: "measured state",
            expected: predicted.len(),
            got: x_measured.len(),
        });
    }
    Ok(predicted - x_measured)
}

pub fn clamp_input(u: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].max(lo[i]).min(hi[i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: DVector<f64>,
    pub input: DVector<f64>,
    /// Action sampled from the policy; absent when no query took place.
    pub action: Option<bool>,
    pub recompute: bool,
    pub cost: f64,
    /// Offset from the plan anchor before this step's decision.
    pub steps_since: usize,
    /// Prediction error at decision points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<DVector<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    /// Score of the sampled action (learned policies only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanState>,
}

impl StepRecord {
    pub fn is_decision(&self) -> bool {
        self.action.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub state: DVector<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub id: u64,
    pub seeds: EpisodeSeeds,
    pub policy_seed: u64,
    pub policy: String,
    pub unconverged_solves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
    pub terminal: TerminalRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(EpisodeHeader),
    Step(Box<StepRecord>),
    Terminal(TerminalRecord),
}

impl EpisodeRecord {
    /// `sum_t gamma^t c_t + gamma^T c_T`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut total = 0.0;
        let mut w = 1.0;
        for s in &self.steps {
            total += w * s.cost;
            w *= gamma;
        }
        total + w * self.terminal.cost
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum::<f64>() + self.terminal.cost
    }

    pub fn recompute_count(&self) -> usize {
        self.steps.iter().filter(|s| s.recompute).count()
    }

    pub fn recompute_fraction(&self) -> f64 {
        self.recompute_count() as f64 / self.steps.len() as f64
    }

    pub fn plans(&self) -> impl Iterator<Item = &PlanState> {
        self.steps.iter().filter_map(|s| s.plan.as_ref())
    }

    /// One JSON object per line: header, steps, terminal.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &Line::Header(self.header.clone()))?;
        writeln!(w)?;
        for s in &self.steps {
            serde_json::to_writer(&mut w, &Line::Step(Box::new(s.clone())))?;
            writeln!(w)?;
        }
        serde_json::to_writer(&mut w, &Line::Terminal(self.terminal.clone()))?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut terminal = None;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(&line)? {
                Line::Header(h) => header = Some(h),
                Line::Step(s) => steps.push(*s),
                Line::Terminal(t) => terminal = Some(t),
            }
        }
        match (header, terminal) {
            (Some(header), Some(terminal)) => Ok(Self {
                header,
                steps,
                terminal,
            }),
            _ => Err(Error::Config(
                "episode log lacks a header or terminal line".into(),
            )),
        }
    }
}

/// Identifies one episode: environment seeds plus the policy-sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTask {
    pub id: u64,
    pub seeds: EpisodeSeeds,
    pub policy_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOptions {
    pub steps: usize,
    pub settings: SolverSettings,
    /// Keep every plan in the record.
    pub record_plans: bool,
    /// Record raw features at decision points even for fixed schedules.
    pub record_features: bool,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            settings: SolverSettings::default(),
            record_plans: false,
            record_features: false,
        }
    }
}

/// Closed-loop simulation of one episode, advanced one step at a time.
pub struct ClosedLoop<'a> {
    system: &'a dyn SystemModel,
    env: Box<dyn EpisodeEnv + 'a>,
    policy: &'a PolicyKind,
    policy_rng: ChaCha8Rng,
    options: EpisodeOptions,
    task: EpisodeTask,
    lower: DVector<f64>,
    upper: DVector<f64>,
    change_weight: DMatrix<f64>,
    step: usize,
    x: DVector<f64>,
    u_prev: DVector<f64>,
    plan: Option<PlanState>,
    solution: Option<NlpSolution>,
    aug: Option<AugmentedState>,
    unconverged: usize,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        system: &'a dyn SystemModel,
        policy: &'a PolicyKind,
        task: &EpisodeTask,
        options: EpisodeOptions,
    ) -> Self {
        let env = system.episode(&task.seeds, options.steps);
        let (lower, upper) = system.input_bounds();
        let x = env.initial_state();
        Self {
            system,
            env,
            policy,
            policy_rng: ChaCha8Rng::seed_from_u64(task.policy_seed),
            options,
            task: *task,
            lower,
            upper,
            change_weight: system.input_change_weight(),
            step: 0,
            x,
            // no input precedes the episode
            u_prev: DVector::zeros(system.nu()),
            plan: None,
            solution: None,
            aug: None,
            unconverged: 0,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn plan(&self) -> Option<&PlanState> {
        self.plan.as_ref()
    }

    /// Augmented state after the last completed step.
    pub fn augmented_state(&self) -> Option<&AugmentedState> {
        self.aug.as_ref()
    }

    pub fn env(&self) -> &dyn EpisodeEnv {
        self.env.as_ref()
    }

    fn episode_error(&self, source: Error) -> Error {
        Error::Episode {
            seed: self.task.id,
            step: self.step,
            source: Box::new(source),
        }
    }

    fn solve(&mut self, offset: usize) -> Result<()> {
        let n = self.system.horizon();
        let forecast = self.env.forecast(self.step, n);
        let spec = OcpSpec {
            model: self.system.ocp_model(),
            horizon: n,
            input_change_weight: self.change_weight.clone(),
            u_lower: self.lower.clone(),
            u_upper: self.upper.clone(),
            soft_penalty: self.system.soft_penalty(),
            forecast: forecast.clone(),
            u_prev: self.u_prev.clone(),
            settings: self.options.settings,
        };
        let warm = match &self.solution {
            Some(prev) => shift_warm_start(&spec, prev, offset).ok(),
            None => None,
        };
        let sol = solve_ocp(&spec, &self.x, warm.as_ref()).map_err(|e| self.episode_error(e))?;
        if !sol.converged {
            self.unconverged += 1;
            log::debug!(
                "episode {} step {}: solver stopped at kkt {:e}",
                self.task.id,
                self.step,
                sol.kkt_residual
            );
        }
        self.plan = Some(PlanState::from_solution(&sol, self.step, forecast));
        self.solution = Some(sol);
        Ok(())
    }

    /// Executes one sampling instant and returns its log entry.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.step >= self.options.steps {
            return Err(Error::Contract(format!(
                "episode already ran {} steps",
                self.options.steps
            )));
        }
        let n = self.system.horizon();
        let i = self.step;
        let params_current = self.env.observation(i);

        let offset = match &self.plan {
            Some(plan) => i - plan.anchor_time,
            None => 0,
        };

        let mut action = None;
        let mut error = None;
        let mut raw = None;
        let mut features = None;
        let mut score = None;
        let recompute = match &self.plan {
            None => true,
            Some(_) if offset >= n => true,
            Some(plan) => {
                let eps = compute_prediction_error(plan, &self.x, i)
                    .map_err(|e| self.episode_error(e))?;
                let aug = AugmentedState {
                    x_current: self.x.clone(),
                    x_anchor: plan.x_hat[0].clone(),
                    steps_since: offset,
                    params_current: params_current.clone(),
                };
                let needs_raw =
                    self.options.record_features || matches!(self.policy, PolicyKind::Logistic(_));
                let r = needs_raw.then(|| raw_features(self.system, &aug, &eps));
                let (a, f) = match self.policy {
                    PolicyKind::Logistic(params) => {
                        let f = expand_and_normalize(
                            r.as_deref().expect("raw features"),
                            &params.stats,
                        );
                        let a = sample_action(self.policy, &f, i, &mut self.policy_rng);
                        score = Some(log_prob_grad(&params.theta, &f, a));
                        (a, Some(f))
                    }
                    other => (sample_action(other, &[], i, &mut self.policy_rng), None),
                };
                action = Some(a);
                error = Some(eps);
                raw = r;
                features = f;
                a
            }
        };

        let u = if recompute {
            self.solve(offset)?;
            self.plan.as_ref().expect("just solved").u_mpc[0].clone()
        } else {
            let plan = self.plan.as_ref().expect("plan exists");
            let eps = error.as_ref().expect("error computed at decision points");
            let u = &plan.u_mpc[offset] + self.system.compensator().compensate(eps);
            clamp_input(&u, &self.lower, &self.upper)
        };

        let cost = self.env.step_cost(&self.x, &u, recompute, i);
        let next = self.env.plant_step(&self.x, &u, recompute, i);
        if !next.iter().all(|v| v.is_finite()) || !cost.is_finite() {
            return Err(
                self.episode_error(Error::Solver("plant state left the finite range".into()))
            );
        }

        let record = StepRecord {
            step: i,
            state: self.x.clone(),
            input: u.clone(),
            action,
            recompute,
            cost,
            steps_since: offset,
            error,
            raw_features: raw,
            features,
            score,
            plan: if recompute && self.options.record_plans {
                self.plan.clone()
            } else {
                None
            },
        };

        let plan = self
            .plan
            .as_ref()
            .expect("plan exists after the first step");
        self.aug = Some(AugmentedState {
            x_current: self.x.clone(),
            x_anchor: plan.x_hat[0].clone(),
            steps_since: i - plan.anchor_time,
            params_current,
        });
        self.x = next;
        self.u_prev = u;
        self.step += 1;
        Ok(record)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.options.steps
    }

    pub fn terminal(&self) -> TerminalRecord {
        TerminalRecord {
            state: self.x.clone(),
            cost: self.env.terminal_cost(&self.x),
        }
    }

    pub fn unconverged_solves(&self) -> usize {
        self.unconverged
    }
}

pub fn step_closed_loop(sim: &mut ClosedLoop<'_>) -> Result<StepRecord> {
    sim.step()
}

pub fn run_episode(
    system: &dyn SystemModel,
    policy: &PolicyKind,
    task: &EpisodeTask,
    options: &EpisodeOptions,
) -> Result<EpisodeRecord> {
    if options.steps == 0 {
        return Err(Error::Contract("an episode needs at least one step".into()));
    }
    let mut sim = ClosedLoop::new(system, policy, task, *options);
    let mut steps = Vec::with_capacity(options.steps);
    while !sim.is_done() {
        steps.push(sim.step()?);
    }
    Ok(EpisodeRecord {
        header: EpisodeHeader {
            id: task.id,
            seeds: task.seeds,
            policy_seed: task.policy_seed,
            policy: policy.label(),
            unconverged_solves: sim.unconverged_solves(),
        },
        terminal: sim.terminal(),
        steps,
    })
}
