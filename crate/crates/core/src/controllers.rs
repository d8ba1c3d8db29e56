//! The three belief-aware planners.
//!
//! All three share the MPPI machinery in [`crate::mppi`] and differ only in the
//! objective evaluated for each sampled control sequence:
//!
//! - **DMPPI** weights each particle's cost by the predicted future belief
//!   along that control sequence, so information gathering is rewarded.
//! - **EMPPI** weights each particle's cost by the current belief.
//! - **CE-MPPI** rolls out a single parameter vector, the belief mean.
//!
//! The three objectives run through one accumulation routine so that with a
//! single particle they produce bit-identical costs and therefore identical
//! plans.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{
    self, downsample, BeliefError, BeliefParticles, DisturbanceModel, RolloutObservations,
};
use crate::cost::{stage_cost, terminal_cost, CostConfig};
use crate::mppi::{
    compute_weights, sample_controls, shift_plan, weighted_update, Control, ControlPlan, MppiConfig,
    MppiError,
};
use crate::rng::RngKey;
use crate::traffic::{self, Disturbance, DriverParams, StackedState, TrafficModel};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Mppi(#[from] MppiError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlannerKind {
    #[serde(rename = "DMPPI", alias = "dmppi")]
    Dmppi,
    #[serde(rename = "EMPPI", alias = "emppi")]
    Emppi,
    #[serde(rename = "CE_MPPI", alias = "cemppi", alias = "ce_mppi", alias = "ce-mppi")]
    CeMppi,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 3] = [PlannerKind::Dmppi, PlannerKind::Emppi, PlannerKind::CeMppi];
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlannerKind::Dmppi => "DMPPI",
            PlannerKind::Emppi => "EMPPI",
            PlannerKind::CeMppi => "CE_MPPI",
        })
    }
}

impl FromStr for PlannerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "dmppi" => Ok(PlannerKind::Dmppi),
            "emppi" => Ok(PlannerKind::Emppi),
            "cemppi" => Ok(PlannerKind::CeMppi),
            _ => Err(format!("unknown planner '{s}' (expected dmppi, emppi or cemppi)")),
        }
    }
}

/// Everything a plan call needs besides the state, belief and warm start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub mppi: MppiConfig,
    /// Particles kept for planning after downsampling.
    pub n_control_particles: usize,
    pub disturbance: DisturbanceModel,
    pub cost: CostConfig,
    pub model: TrafficModel,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            mppi: MppiConfig::default(),
            n_control_particles: 20,
            disturbance: DisturbanceModel::default(),
            cost: CostConfig::default(),
            model: TrafficModel::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        self.mppi.validate()?;
        self.disturbance.validate()?;
        if self.n_control_particles < 1 {
            return Err(PlanError::InvalidConfig("n_control_particles must be >= 1".into()));
        }
        if !self.cost.is_valid() {
            return Err(PlanError::InvalidConfig("cost weights must be finite and nonnegative".into()));
        }
        if !self.model.limits.is_valid() {
            return Err(PlanError::InvalidConfig("kinematic limits are inconsistent".into()));
        }
        Ok(())
    }

    /// Rollouts one plan call performs.
    pub fn rollouts_per_plan(&self, kind: PlannerKind) -> u64 {
        let per_sample = match kind {
            PlannerKind::Dmppi | PlannerKind::Emppi => self.n_control_particles * self.disturbance.n_samples,
            PlannerKind::CeMppi => self.disturbance.n_samples,
        };
        (self.mppi.n_control_samples * per_sample) as u64
    }
}

/// Per-rollout stage costs, `[i][j][r]`, where entry `r` belongs to state
/// `x_{t+r+1}` and the last entry is the terminal cost.
struct CostTable {
    n_disturbances: usize,
    horizon: usize,
    data: Vec<f64>,
}

impl CostTable {
    fn new(n_particles: usize, n_disturbances: usize, horizon: usize) -> Self {
        Self {
            n_disturbances,
            horizon,
            data: vec![0.0; n_particles * n_disturbances * horizon],
        }
    }

    fn row_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let at = (i * self.n_disturbances + j) * self.horizon;
        &mut self.data[at..at + self.horizon]
    }
}

/// `(1/N_w) Σ_i Σ_j Σ_r c_ijr · w(i, r + 1)`.
fn accumulate<W: Fn(usize, usize) -> f64>(table: &CostTable, n_particles: usize, weight: W) -> f64 {
    let mut total = 0.0;
    for i in 0..n_particles {
        for j in 0..table.n_disturbances {
            let at = (i * table.n_disturbances + j) * table.horizon;
            for (r, c) in table.data[at..at + table.horizon].iter().enumerate() {
                total += c * weight(i, r + 1);
            }
        }
    }
    total / table.n_disturbances as f64
}

fn fill_costs(
    particles: &[Vec<DriverParams>],
    x_t: &StackedState,
    controls: &[Control],
    disturbances: &[Vec<Disturbance>],
    cfg: &PlannerConfig,
    mut obs: Option<&mut RolloutObservations>,
) -> (CostTable, u64) {
    let horizon = controls.len();
    let mut table = CostTable::new(particles.len(), disturbances.len(), horizon);
    let mut completed = 0;
    for (i, theta) in particles.iter().enumerate() {
        for (j, w) in disturbances.iter().enumerate() {
            let row = table.row_mut(i, j);
            let mut visited = 0;
            traffic::rollout_each(x_t, controls, theta, Some(w), &cfg.model, |r, x| {
                visited += 1;
                row[r] = if r + 1 == horizon {
                    terminal_cost(x, &cfg.cost)
                } else {
                    stage_cost(x, &cfg.cost)
                };
                if let Some(o) = obs.as_deref_mut() {
                    belief::observed_channels(x, o.slot(i, j, r));
                }
            });
            if visited == horizon {
                completed += 1;
            }
        }
    }
    (table, completed)
}

/// Objective of one sampled sequence plus, for DMPPI, the entropy of its
/// final predicted belief.
struct SampleEval {
    objective: f64,
    final_entropy: Option<f64>,
    /// Full-length rollouts actually simulated.
    rollouts: u64,
}

fn check_lengths(controls: &[Control], disturbances: &[Vec<Disturbance>]) -> Result<(), PlanError> {
    if disturbances.is_empty() {
        return Err(PlanError::InvalidConfig("need at least one disturbance sequence".into()));
    }
    for w in disturbances {
        if w.len() != controls.len() {
            return Err(MppiError::LengthMismatch {
                expected: controls.len(),
                found: w.len(),
            }
            .into());
        }
    }
    Ok(())
}

fn eval_dmppi(
    x_t: &StackedState,
    controls: &[Control],
    particles: &BeliefParticles,
    disturbances: &[Vec<Disturbance>],
    cfg: &PlannerConfig,
) -> Result<SampleEval, PlanError> {
    let mut obs = RolloutObservations::new(
        particles.len(),
        disturbances.len(),
        controls.len(),
        2 * x_t.n_traffic(),
    );
    let (table, rollouts) = fill_costs(&particles.particles, x_t, controls, disturbances, cfg, Some(&mut obs));
    let predicted = belief::predicted_weights(&particles.weights, &obs, &cfg.disturbance)?;
    let objective = accumulate(&table, particles.len(), |i, k| predicted.weights[k][i]);
    Ok(SampleEval {
        objective,
        final_entropy: Some(belief::entropy(predicted.final_weights())),
        rollouts,
    })
}

fn eval_static(
    x_t: &StackedState,
    controls: &[Control],
    particles: &BeliefParticles,
    disturbances: &[Vec<Disturbance>],
    cfg: &PlannerConfig,
) -> SampleEval {
    let (table, rollouts) = fill_costs(&particles.particles, x_t, controls, disturbances, cfg, None);
    SampleEval {
        objective: accumulate(&table, particles.len(), |i, _| particles.weights[i]),
        final_entropy: None,
        rollouts,
    }
}

/// Belief mean with the yield factor clipped back into `[0, 1]`.
pub fn certainty_equivalent(b: &BeliefParticles) -> Vec<DriverParams> {
    b.mean_params()
        .into_iter()
        .map(|mut p| {
            p.yield_factor = p.yield_factor.clamp(0.0, 1.0);
            p
        })
        .collect()
}

/// DMPPI objective of one control sequence under `particles`.
pub fn objective_dmppi(
    x_t: &StackedState,
    controls: &[Control],
    particles: &BeliefParticles,
    disturbances: &[Vec<Disturbance>],
    cfg: &PlannerConfig,
) -> Result<f64, PlanError> {
    check_lengths(controls, disturbances)?;
    Ok(eval_dmppi(x_t, controls, particles, disturbances, cfg)?.objective)
}

/// EMPPI objective: particle costs weighted by the current belief.
pub fn objective_emppi(
    x_t: &StackedState,
    controls: &[Control],
    particles: &BeliefParticles,
    disturbances: &[Vec<Disturbance>],
    cfg: &PlannerConfig,
) -> Result<f64, PlanError> {
    check_lengths(controls, disturbances)?;
    Ok(eval_static(x_t, controls, particles, disturbances, cfg).objective)
}

/// CE-MPPI objective: rollouts under the belief mean only.
pub fn objective_cemppi(
    x_t: &StackedState,
    controls: &[Control],
    belief: &BeliefParticles,
    disturbances: &[Vec<Disturbance>],
    cfg: &PlannerConfig,
) -> Result<f64, PlanError> {
    check_lengths(controls, disturbances)?;
    let ce = BeliefParticles::point_mass(certainty_equivalent(belief));
    Ok(eval_static(x_t, controls, &ce, disturbances, cfg).objective)
}

/// Entropy statistics of the final predicted beliefs over the control samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionDiagnostics {
    /// Entropy of the downsampled planning belief.
    pub initial_entropy: f64,
    /// MPPI-weighted mean of the final predicted entropies.
    pub weighted_final_entropy: f64,
    pub min_final_entropy: f64,
    pub max_final_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStepResult {
    /// First control of the optimized sequence.
    pub applied: Control,
    pub optimal: ControlPlan,
    /// Warm start for the next call.
    pub next_warm_start: ControlPlan,
    /// Objective of every control sample, in sample order.
    pub costs: Vec<f64>,
    pub mppi_weights: Vec<f64>,
    pub effective_sample_size: f64,
    /// Every sample was penalized; `optimal` is the lowest-cost sample.
    pub degraded: bool,
    /// Length-`N` rollouts simulated during the call.
    pub rollouts: u64,
    pub diagnostics: Option<PredictionDiagnostics>,
    pub elapsed: Duration,
}

/// Seeds for one plan call; every random draw is keyed off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanSeeds {
    pub key: RngKey,
}

impl PlanSeeds {
    pub fn new(seed: u64, step: u64) -> Self {
        Self {
            key: RngKey::new(seed).at_step(step),
        }
    }
}

/// One receding-horizon optimization.
pub fn plan(
    kind: PlannerKind,
    x_t: &StackedState,
    belief: &BeliefParticles,
    warm_start: &ControlPlan,
    cfg: &PlannerConfig,
    seeds: PlanSeeds,
) -> Result<PlanStepResult, PlanError> {
    let started = Instant::now();
    cfg.validate()?;
    if belief.is_empty() {
        return Err(BeliefError::EmptyParticleSet.into());
    }
    if belief.n_vehicles() != x_t.n_traffic() {
        return Err(PlanError::InvalidConfig(format!(
            "belief covers {} vehicles but the state has {}",
            belief.n_vehicles(),
            x_t.n_traffic()
        )));
    }
    let key = seeds.key;
    let particles = match kind {
        PlannerKind::Dmppi | PlannerKind::Emppi => downsample(belief, cfg.n_control_particles, key)?,
        PlannerKind::CeMppi => BeliefParticles::point_mass(certainty_equivalent(belief)),
    };
    let disturbances = cfg
        .disturbance
        .sample_sequences(x_t.n_traffic(), cfg.mppi.horizon, key);
    let batch = sample_controls(warm_start, &cfg.mppi, key)?;

    let evals: Vec<SampleEval> = batch
        .samples
        .par_iter()
        .map(|u| match kind {
            PlannerKind::Dmppi => eval_dmppi(x_t, u, &particles, &disturbances, cfg),
            PlannerKind::Emppi | PlannerKind::CeMppi => Ok(eval_static(x_t, u, &particles, &disturbances, cfg)),
        })
        .collect::<Result<_, _>>()?;
    let rollouts = evals.iter().map(|e| e.rollouts).sum();

    let costs: Vec<f64> = evals.iter().map(|e| e.objective).collect();
    let weights = compute_weights(&costs, &batch, &cfg.mppi)?;
    let degraded = costs.iter().all(|&c| !(c < cfg.cost.q_penalty));
    let optimal = if degraded {
        let best = costs
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (l, &c)| if c < acc.1 { (l, c) } else { acc })
            .0;
        log::warn!("every control sample is penalized; using the lowest-cost sample");
        ControlPlan {
            mean: batch.samples[best].clone(),
        }
    } else {
        weighted_update(&batch, &weights)?
    };

    let diagnostics = (kind == PlannerKind::Dmppi).then(|| {
        let finals: Vec<f64> = evals.iter().filter_map(|e| e.final_entropy).collect();
        PredictionDiagnostics {
            initial_entropy: particles.entropy(),
            weighted_final_entropy: finals.iter().zip(weights.as_slice()).map(|(h, w)| h * w).sum(),
            min_final_entropy: finals.iter().copied().fold(f64::INFINITY, f64::min),
            max_final_entropy: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    });

    Ok(PlanStepResult {
        applied: optimal.first(),
        next_warm_start: shift_plan(&optimal),
        optimal,
        effective_sample_size: weights.effective_sample_size(),
        mppi_weights: weights.into_inner(),
        costs,
        degraded,
        rollouts,
        diagnostics,
        elapsed: started.elapsed(),
    })
}
