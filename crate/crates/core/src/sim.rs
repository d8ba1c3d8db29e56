//! Scenario generation, closed-loop trials and paired Monte Carlo runs.

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{filter_update, init_particles, BeliefError, BeliefParticles, ParamBox, PriorSpec, UpdateStatus};
use crate::controllers::{plan, PlanError, PlanSeeds, PlanStepResult, PlannerConfig, PlannerKind};
use crate::cost::indicators;
use crate::logs::{BeliefLog, TrajectoryLog};
use crate::mppi::{Control, ControlPlan};
use crate::rng::{derive_seed, Domain, RngKey};
use crate::traffic::{self, Disturbance, DriverParams, StackedState, VehicleState};

use rand::seq::index::sample as sample_indices;
use rand::Rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_vehicles: usize,
    pub initial_speed: f64,
    pub spacing: f64,
    pub ego_lateral: f64,
    /// Vehicles whose true parameters come from the friendly box.
    pub n_friendly: usize,
    /// Trial time limit (s).
    pub time_budget: f64,
    /// Time the ego must stay merged before the trial counts as a success (s).
    pub merge_dwell: f64,
    /// Standard-deviation multiplier on the environment noise relative to
    /// the planner's disturbance model.
    pub env_noise_scale: f64,
    pub friendly: ParamBox,
    pub aggressive: ParamBox,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 5,
            initial_speed: 10.0,
            spacing: 8.0,
            ego_lateral: -3.5,
            n_friendly: 1,
            time_budget: 20.0,
            merge_dwell: 1.0,
            env_noise_scale: 1.0,
            friendly: PriorSpec::friendly_box(),
            aggressive: PriorSpec::aggressive_box(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScenario(m.into()));
        if self.n_vehicles < 2 {
            return bad("n_vehicles must be >= 2");
        }
        if self.n_friendly > self.n_vehicles {
            return bad("n_friendly exceeds n_vehicles");
        }
        if !(self.spacing > 0.0 && self.initial_speed >= 0.0) {
            return bad("spacing must be > 0 and initial_speed >= 0");
        }
        if !(self.time_budget > 0.0 && self.merge_dwell >= 0.0 && self.env_noise_scale >= 0.0) {
            return bad("time_budget must be > 0, merge_dwell and env_noise_scale >= 0");
        }
        Ok(())
    }
}

/// Everything that determines a trial apart from seeds and planner kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub planner: PlannerConfig,
    /// Particles in the filter belief.
    pub n_filter_particles: usize,
    pub prior: PriorSpec,
    pub scenario: ScenarioConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            n_filter_particles: 10_000,
            prior: PriorSpec::merge_default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

impl TrialConfig {
    /// 140 m ramp with two friendly vehicles.
    pub fn short_ramp() -> Self {
        let mut cfg = Self::default();
        cfg.planner.cost.road.ramp_end = 140.0;
        cfg.scenario.n_friendly = 2;
        cfg
    }

    /// The reduced sample budget used for desk-scale Monte Carlo runs.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.planner.mppi.n_control_samples = 512;
        cfg.planner.n_control_particles = 10;
        cfg.planner.disturbance.n_samples = 3;
        cfg
    }

    /// Desk budget with the dense-platoon populations for both the true
    /// drivers and the prior. The Monte Carlo benchmark preset.
    pub fn dense_platoon() -> Self {
        let mut cfg = Self::desk();
        let (friendly, aggressive) = (PriorSpec::dense_friendly_box(), PriorSpec::dense_aggressive_box());
        cfg.scenario.friendly = friendly;
        cfg.scenario.aggressive = aggressive;
        cfg.prior = PriorSpec::mixture(friendly, aggressive);
        cfg
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.planner.validate()?;
        self.prior.validate()?;
        self.scenario.validate()?;
        if self.n_filter_particles < 1 {
            return Err(BeliefError::EmptyParticleSet.into());
        }
        Ok(())
    }

    pub fn max_steps(&self) -> u64 {
        (self.scenario.time_budget / self.planner.model.limits.dt).round() as u64
    }

    fn dwell_steps(&self) -> u32 {
        (self.scenario.merge_dwell / self.planner.model.limits.dt).round() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub initial: StackedState,
    /// Hidden parameters driving the true traffic.
    pub true_params: Vec<DriverParams>,
    /// Indices (0-based, rear to front) of the friendly vehicles.
    pub friendly: Vec<usize>,
}

impl Scenario {
    /// FNV-1a over the initial state and hidden parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for v in self.initial.to_vec() {
            eat(v);
        }
        for p in &self.true_params {
            for v in p.to_array() {
                eat(v);
            }
        }
        h
    }
}

pub fn make_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario, SimError> {
    cfg.validate()?;
    let mut rng = RngKey::new(seed).stream(Domain::Scenario, 0);
    let n = cfg.n_vehicles;
    let traffic = (0..n)
        .map(|m| VehicleState::new(cfg.initial_speed, 0.0, cfg.spacing * m as f64, 0.0))
        .collect::<Vec<_>>();
    let span = cfg.spacing * (n - 1) as f64;
    let ego_s = span * rng.random::<f64>();
    let mut friendly = sample_indices(&mut rng, n, cfg.n_friendly).into_vec();
    friendly.sort_unstable();
    let true_params = (0..n)
        .map(|m| {
            if friendly.contains(&m) {
                cfg.friendly.sample(&mut rng)
            } else {
                cfg.aggressive.sample(&mut rng)
            }
        })
        .collect();
    Ok(Scenario {
        seed,
        initial: StackedState {
            ego: VehicleState::new(cfg.initial_speed, 0.0, ego_s, cfg.ego_lateral),
            traffic,
        },
        true_params,
        friendly,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Merged,
    RampEndFailure,
    InvalidMergeFailure,
    Collision,
    Timeout,
}

impl Outcome {
    pub const ALL: [Outcome; 5] = [
        Outcome::Merged,
        Outcome::RampEndFailure,
        Outcome::InvalidMergeFailure,
        Outcome::Collision,
        Outcome::Timeout,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Merged => "merged",
            Outcome::RampEndFailure => "ramp_end_failure",
            Outcome::InvalidMergeFailure => "invalid_merge_failure",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
        }
    }
}

/// Per-trial numbers without the logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub planner: PlannerKind,
    pub scenario_seed: u64,
    pub planner_seed: u64,
    pub scenario_hash: String,
    pub outcome: Outcome,
    pub steps: u64,
    pub min_longitudinal_gap: f64,
    pub min_lateral_gap: f64,
    pub max_accel: f64,
    pub degraded_steps: u64,
    pub inconsistent_updates: u64,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub summary: TrialSummary,
    pub trajectory: TrajectoryLog,
    pub belief: BeliefLog,
    pub total_rollouts: u64,
    pub plan_time: Duration,
}

/// Running minimum of footprint-edge gaps. Longitudinal gaps count only for
/// pairs that overlap laterally and vice versa; if that never happens the
/// unconditional minimum is reported.
#[derive(Debug, Clone, Copy)]
struct GapTracker {
    lon: f64,
    lat: f64,
    lon_any: f64,
    lat_any: f64,
}

impl GapTracker {
    fn new() -> Self {
        Self {
            lon: f64::INFINITY,
            lat: f64::INFINITY,
            lon_any: f64::INFINITY,
            lat_any: f64::INFINITY,
        }
    }

    fn observe(&mut self, x: &StackedState, fp: &crate::cost::Footprint) {
        for v in &x.traffic {
            let (lon, lat) = fp.edge_gaps(&x.ego, v);
            self.lon_any = self.lon_any.min(lon);
            self.lat_any = self.lat_any.min(lat);
            if lat == 0.0 {
                self.lon = self.lon.min(lon);
            }
            if lon == 0.0 {
                self.lat = self.lat.min(lat);
            }
        }
    }

    fn result(&self) -> (f64, f64) {
        let pick = |a: f64, b: f64| if a.is_finite() { a } else { b };
        (pick(self.lon, self.lon_any), pick(self.lat, self.lat_any))
    }
}

/// Step-by-step closed loop. [`run_trial`] drives it with planner output and
/// environment noise; tests can drive it directly.
pub struct ClosedLoop<'a> {
    cfg: &'a TrialConfig,
    kind: PlannerKind,
    scenario: &'a Scenario,
    planner_seed: u64,
    state: StackedState,
    belief: BeliefParticles,
    warm_start: ControlPlan,
    step: u64,
    dwell: u32,
    outcome: Option<Outcome>,
    trajectory: TrajectoryLog,
    belief_log: BeliefLog,
    gaps: GapTracker,
    max_accel: f64,
    degraded_steps: u64,
    inconsistent_updates: u64,
    total_rollouts: u64,
    plan_time: Duration,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        cfg: &'a TrialConfig,
        kind: PlannerKind,
        scenario: &'a Scenario,
        planner_seed: u64,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        let n_v = scenario.initial.n_traffic();
        let belief = init_particles(&cfg.prior, n_v, cfg.n_filter_particles, RngKey::new(planner_seed))?;
        let state = scenario.initial.clone();
        let mut trajectory = TrajectoryLog::new(n_v);
        let flags = indicators(&state, &cfg.planner.cost.road, &cfg.planner.cost.footprint);
        trajectory.push(0.0, &state, flags);
        let mut belief_log = BeliefLog::new(n_v);
        belief_log.push(0.0, &belief);
        let mut gaps = GapTracker::new();
        gaps.observe(&state, &cfg.planner.cost.footprint);
        Ok(Self {
            cfg,
            kind,
            scenario,
            planner_seed,
            state,
            belief,
            warm_start: ControlPlan::zeros(cfg.planner.mppi.horizon),
            step: 0,
            dwell: 0,
            outcome: None,
            trajectory,
            belief_log,
            gaps,
            max_accel: 0.0,
            degraded_steps: 0,
            inconsistent_updates: 0,
            total_rollouts: 0,
            plan_time: Duration::ZERO,
        })
    }

    pub fn state(&self) -> &StackedState {
        &self.state
    }

    pub fn belief(&self) -> &BeliefParticles {
        &self.belief
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn plan(&self) -> Result<PlanStepResult, SimError> {
        Ok(plan(
            self.kind,
            &self.state,
            &self.belief,
            &self.warm_start,
            &self.cfg.planner,
            PlanSeeds::new(self.planner_seed, self.step),
        )?)
    }

    /// Environment noise the true system applies at the current step.
    pub fn environment_noise(&self) -> Disturbance {
        let model = self.cfg.planner.disturbance.scaled(self.cfg.scenario.env_noise_scale);
        let mut rng = RngKey::new(derive_seed(self.scenario.seed, 1))
            .at_step(self.step)
            .stream(Domain::Environment, 0);
        model.sample_step(self.state.n_traffic(), &mut rng)
    }

    /// Applies `result.applied` to the true system with `noise`, updates the
    /// belief and classifies the new state.
    pub fn advance(&mut self, result: &PlanStepResult, noise: &Disturbance) -> Option<Outcome> {
        assert!(self.outcome.is_none(), "trial already finished");
        self.total_rollouts += result.rollouts;
        self.plan_time += result.elapsed;
        if result.degraded {
            self.degraded_steps += 1;
        }
        let u = result.applied;
        let mut next = self.state.clone();
        let applied = traffic::step_into(
            &self.state,
            &u,
            &self.scenario.true_params,
            Some(noise),
            &self.cfg.planner.model,
            &mut next,
        );
        self.max_accel = self.max_accel.max(applied.norm());
        self.trajectory.set_last_control(applied);

        let (updated, status) = filter_update(
            &self.belief,
            &self.state,
            &u,
            &next,
            &self.cfg.planner.disturbance,
            &self.cfg.planner.model,
        );
        if status == UpdateStatus::Inconsistent {
            self.inconsistent_updates += 1;
        }
        self.belief = updated;
        self.warm_start = result.next_warm_start.clone();
        self.state = next;
        self.step += 1;

        let t = self.step as f64 * self.cfg.planner.model.limits.dt;
        let cost = &self.cfg.planner.cost;
        let flags = indicators(&self.state, &cost.road, &cost.footprint);
        self.trajectory.push(t, &self.state, flags);
        self.belief_log.push(t, &self.belief);
        self.gaps.observe(&self.state, &cost.footprint);
        self.outcome = self.classify(flags);
        self.outcome
    }

    fn classify(&mut self, flags: crate::cost::Indicators) -> Option<Outcome> {
        let road = &self.cfg.planner.cost.road;
        let ego = &self.state.ego;
        if flags.collision {
            return Some(Outcome::Collision);
        }
        if ego.s > road.ramp_end && !road.in_main_lane(ego.d) {
            return Some(Outcome::RampEndFailure);
        }
        if flags.off_road || flags.invalid_merge {
            return Some(Outcome::InvalidMergeFailure);
        }
        if road.in_main_lane(ego.d) {
            self.dwell += 1;
            if self.dwell >= self.cfg.dwell_steps() {
                return Some(Outcome::Merged);
            }
        } else {
            self.dwell = 0;
        }
        if self.step >= self.cfg.max_steps() {
            return Some(Outcome::Timeout);
        }
        None
    }

    pub fn finish(self) -> TrialResult {
        let mut outcome = self.outcome.unwrap_or(Outcome::Timeout);
        let mut diagnostic = None;
        if self.step > 0 && self.degraded_steps == self.step {
            diagnostic = Some("planner degraded on every step".to_string());
            if outcome == Outcome::Merged {
                outcome = Outcome::Timeout;
            }
        }
        if self.inconsistent_updates > 0 && diagnostic.is_none() {
            diagnostic = Some(format!("{} inconsistent filter updates", self.inconsistent_updates));
        }
        let (lon, lat) = self.gaps.result();
        TrialResult {
            summary: TrialSummary {
                planner: self.kind,
                scenario_seed: self.scenario.seed,
                planner_seed: self.planner_seed,
                scenario_hash: format!("{:016x}", self.scenario.fingerprint()),
                outcome,
                steps: self.step,
                min_longitudinal_gap: lon,
                min_lateral_gap: lat,
                max_accel: self.max_accel,
                degraded_steps: self.degraded_steps,
                inconsistent_updates: self.inconsistent_updates,
                diagnostic,
            },
            trajectory: self.trajectory,
            belief: self.belief_log,
            total_rollouts: self.total_rollouts,
            plan_time: self.plan_time,
        }
    }
}

/// Runs one closed-loop trial to completion.
pub fn run_trial(
    cfg: &TrialConfig,
    kind: PlannerKind,
    scenario: &Scenario,
    planner_seed: u64,
) -> Result<TrialResult, SimError> {
    let mut sim = ClosedLoop::new(cfg, kind, scenario, planner_seed)?;
    while sim.outcome().is_none() {
        let result = sim.plan()?;
        let noise = sim.environment_noise();
        sim.advance(&result, &noise);
    }
    Ok(sim.finish())
}

/// Seeds of trial `j`: the scenario seed and the planner seed are shared by
/// every planner kind.
pub fn trial_seeds(base_seed: u64, j: u64) -> (u64, u64) {
    (derive_seed(base_seed, 2 * j), derive_seed(base_seed, 2 * j + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSummary {
    pub planner: PlannerKind,
    pub trials: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub avg_min_longitudinal_gap: f64,
    pub avg_min_lateral_gap: f64,
    pub avg_max_accel: f64,
    pub outcomes: Vec<(Outcome, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub base_seed: u64,
    pub n_trials: usize,
    pub planners: Vec<PlannerSummary>,
    pub trials: Vec<TrialSummary>,
}

impl MonteCarloReport {
    pub fn summary(&self, kind: PlannerKind) -> Option<&PlannerSummary> {
        self.planners.iter().find(|p| p.planner == kind)
    }
}

fn summarize(kind: PlannerKind, trials: &[&TrialSummary]) -> PlannerSummary {
    let n = trials.len();
    let frac = |o: Outcome| trials.iter().filter(|t| t.outcome == o).count() as f64 / n as f64;
    let mean = |f: &dyn Fn(&TrialSummary) -> f64| trials.iter().map(|t| f(t)).sum::<f64>() / n as f64;
    PlannerSummary {
        planner: kind,
        trials: n,
        success_rate: frac(Outcome::Merged),
        collision_rate: frac(Outcome::Collision),
        avg_min_longitudinal_gap: mean(&|t| t.min_longitudinal_gap),
        avg_min_lateral_gap: mean(&|t| t.min_lateral_gap),
        avg_max_accel: mean(&|t| t.max_accel),
        outcomes: Outcome::ALL
            .iter()
            .map(|&o| (o, trials.iter().filter(|t| t.outcome == o).count()))
            .collect(),
    }
}

/// Paired-seed comparison: trial `j` uses the same scenario and planner seed
/// for every planner kind. `on_trial` sees each finished trial (in any
/// order); results come back sorted by trial, then planner.
pub fn monte_carlo<F>(
    cfg: &TrialConfig,
    planners: &[PlannerKind],
    n_trials: usize,
    base_seed: u64,
    workers: Option<usize>,
    on_trial: F,
) -> Result<(MonteCarloReport, Vec<TrialResult>), SimError>
where
    F: Fn(usize, &TrialResult) + Sync,
{
    if n_trials < 1 || planners.is_empty() {
        return Err(SimError::InvalidScenario("need at least one trial and one planner".into()));
    }
    cfg.validate()?;
    let scenarios = (0..n_trials as u64)
        .map(|j| make_scenario(&cfg.scenario, trial_seeds(base_seed, j).0))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..n_trials)
        .flat_map(|j| (0..planners.len()).map(move |p| (j, p)))
        .collect();
    let run = || {
        jobs.par_iter()
            .map(|&(j, p)| {
                let r = run_trial(cfg, planners[p], &scenarios[j], trial_seeds(base_seed, j as u64).1)?;
                on_trial(j, &r);
                Ok(r)
            })
            .collect::<Result<Vec<_>, SimError>>()
    };
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| SimError::Pool(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let planner_summaries = planners
        .iter()
        .map(|&k| {
            let mine: Vec<&TrialSummary> = results
                .iter()
                .map(|r| &r.summary)
                .filter(|s| s.planner == k)
                .collect();
            summarize(k, &mine)
        })
        .collect();
    let report = MonteCarloReport {
        base_seed,
        n_trials,
        planners: planner_summaries,
        trials: results.iter().map(|r| r.summary.clone()).collect(),
    };
    Ok((report, results))
}

/// Replays a fixed control sequence, ignoring the belief. Used to script
/// trials in tests; the sequence is held at its last value once exhausted.
pub fn run_scripted(
    cfg: &TrialConfig,
    scenario: &Scenario,
    controls: &[Control],
    planner_seed: u64,
) -> Result<TrialResult, SimError> {
    let mut sim = ClosedLoop::new(cfg, PlannerKind::CeMppi, scenario, planner_seed)?;
    let horizon = cfg.planner.mppi.horizon;
    while sim.outcome().is_none() {
        let k = (sim.step_index() as usize).min(controls.len().saturating_sub(1));
        let u = controls.get(k).copied().unwrap_or_else(Control::zeros);
        let scripted = PlanStepResult {
            applied: u,
            optimal: ControlPlan {
                mean: vec![u; horizon],
            },
            next_warm_start: ControlPlan {
                mean: vec![u; horizon],
            },
            costs: Vec::new(),
            mppi_weights: Vec::new(),
            effective_sample_size: 0.0,
            degraded: false,
            rollouts: 0,
            diagnostics: None,
            elapsed: Duration::ZERO,
        };
        let noise = sim.environment_noise();
        sim.advance(&scripted, &noise);
    }
    Ok(sim.finish())
}
