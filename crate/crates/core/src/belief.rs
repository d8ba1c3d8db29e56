//! Particle belief over the traffic drivers' hidden parameters.
//!
//! The filter keeps a fixed set of joint particles (one `DriverParams` per
//! traffic vehicle) and only reweights them; resampling happens exclusively in
//! [`downsample`], which produces the small particle set handed to the planner.
//! [`predict_belief`] forecasts how the planner's own future observations
//! along a candidate control sequence would reweight that small set.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mppi::Control;
use crate::rng::{Domain, RngKey};
use crate::traffic::{self, Disturbance, LongitudinalNoise, StackedState, TrafficModel, VehicleState};

pub use crate::traffic::DriverParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid disturbance model: {0}")]
    InvalidDisturbance(String),
    #[error("particle count must be >= 1")]
    EmptyParticleSet,
    #[error("regularized covariance is singular at step {step}, particle {particle}")]
    SingularCovariance { step: usize, particle: usize },
}

/// Axis-aligned box of driver parameters; `lo == hi` on a field pins it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBox {
    pub lo: DriverParams,
    pub hi: DriverParams,
}

impl ParamBox {
    pub fn point(p: DriverParams) -> Self {
        Self { lo: p, hi: p }
    }

    pub fn contains(&self, p: &DriverParams) -> bool {
        let (lo, hi, v) = (self.lo.to_array(), self.hi.to_array(), p.to_array());
        (0..6).all(|f| lo[f] <= v[f] && v[f] <= hi[f])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DriverParams {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        let mut out = [0.0; 6];
        for f in 0..6 {
            let u: f64 = rng.random();
            out[f] = lo[f] + u * (hi[f] - lo[f]);
        }
        DriverParams::from_array(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorComponent {
    pub name: String,
    pub weight: f64,
    pub bounds: ParamBox,
}

/// Mixture prior applied independently to every traffic vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub components: Vec<PriorComponent>,
}

impl PriorSpec {
    pub fn friendly_box() -> ParamBox {
        ParamBox {
            lo: DriverParams {
                desired_speed: 8.0,
                time_headway: 1.5,
                max_accel: 1.0,
                comfort_decel: 1.5,
                min_gap: 2.0,
                yield_factor: 0.7,
            },
            hi: DriverParams {
                desired_speed: 10.0,
                time_headway: 2.0,
                max_accel: 1.5,
                comfort_decel: 2.5,
                min_gap: 3.0,
                yield_factor: 1.0,
            },
        }
    }

    pub fn aggressive_box() -> ParamBox {
        let mut b = Self::friendly_box();
        b.lo.time_headway = 0.5;
        b.hi.time_headway = 0.9;
        b.lo.yield_factor = 0.0;
        b.hi.yield_factor = 0.2;
        b
    }

    /// Close-following friendly population: short headways keep an 8 m
    /// platoon tight instead of letting it spread open.
    pub fn dense_friendly_box() -> ParamBox {
        let mut b = Self::friendly_box();
        b.lo.time_headway = 0.1;
        b.hi.time_headway = 0.2;
        b.lo.min_gap = 1.5;
        b.hi.min_gap = 2.0;
        b
    }

    /// Close-following aggressive population that ignores a cut-in.
    pub fn dense_aggressive_box() -> ParamBox {
        let mut b = Self::dense_friendly_box();
        b.lo.yield_factor = 0.0;
        b.hi.yield_factor = 0.02;
        b
    }

    /// `0.8·friendly + 0.2·aggressive`.
    pub fn mixture(friendly: ParamBox, aggressive: ParamBox) -> Self {
        Self {
            components: vec![
                PriorComponent {
                    name: "friendly".into(),
                    weight: 0.8,
                    bounds: friendly,
                },
                PriorComponent {
                    name: "aggressive".into(),
                    weight: 0.2,
                    bounds: aggressive,
                },
            ],
        }
    }

    pub fn merge_default() -> Self {
        Self::mixture(Self::friendly_box(), Self::aggressive_box())
    }

    pub fn component(&self, name: &str) -> Option<&PriorComponent> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Mixture weights must sum to one; degenerate (zero-width) fields are
    /// allowed, inverted ones are not.
    pub fn validate(&self) -> Result<(), BeliefError> {
        if self.components.is_empty() {
            return Err(BeliefError::InvalidPrior("no mixture components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(BeliefError::InvalidPrior(format!(
                "mixture weights must be nonnegative and sum to 1 (sum = {total})"
            )));
        }
        for c in &self.components {
            let (lo, hi) = (c.bounds.lo.to_array(), c.bounds.hi.to_array());
            if (0..6).any(|f| !(lo[f] <= hi[f])) {
                return Err(BeliefError::InvalidPrior(format!("component {} has an inverted range", c.name)));
            }
            if !c.bounds.lo.is_valid() || !c.bounds.hi.is_valid() {
                return Err(BeliefError::InvalidPrior(format!(
                    "component {} admits invalid driver parameters",
                    c.name
                )));
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> DriverParams {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c.bounds.sample(rng);
            }
        }
        self.components.last().expect("validated non-empty").bounds.sample(rng)
    }
}

/// Diagonal additive noise model, identical for every vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceModel {
    /// Variances of `[v_s, v_d, s, d]`. Traffic vehicles only use the
    /// longitudinal pair.
    pub variances: [f64; 4],
    pub n_samples: usize,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self {
            variances: [2.5e-3, 2.5e-3, 1e-4, 1e-4],
            n_samples: 5,
        }
    }
}

impl DisturbanceModel {
    pub fn validate(&self) -> Result<(), BeliefError> {
        let v = self.variances;
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(BeliefError::InvalidDisturbance("variances must be finite and >= 0".into()));
        }
        if !(v[0] > 0.0 && v[1] > 0.0) {
            return Err(BeliefError::InvalidDisturbance("velocity variances must be > 0".into()));
        }
        if self.n_samples < 1 {
            return Err(BeliefError::InvalidDisturbance("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Same model with every standard deviation multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let f2 = factor * factor;
        Self {
            variances: self.variances.map(|v| v * f2),
            ..*self
        }
    }

    pub fn sample_step<R: Rng>(&self, n_traffic: usize, rng: &mut R) -> Disturbance {
        let sd = self.variances.map(f64::sqrt);
        let mut draw = |s: f64| -> f64 {
            if s > 0.0 {
                Normal::new(0.0, s).expect("finite sd").sample(rng)
            } else {
                0.0
            }
        };
        let ego = VehicleState::new(draw(sd[0]), draw(sd[1]), draw(sd[2]), draw(sd[3]));
        let traffic = (0..n_traffic)
            .map(|_| LongitudinalNoise {
                v_s: draw(sd[0]),
                s: draw(sd[2]),
            })
            .collect();
        Disturbance { ego, traffic }
    }

    /// `n_samples` disturbance sequences of length `horizon`, stream `j` for
    /// sequence `j`.
    pub fn sample_sequences(&self, n_traffic: usize, horizon: usize, key: RngKey) -> Vec<Vec<Disturbance>> {
        (0..self.n_samples)
            .map(|j| {
                let mut rng = key.stream(Domain::Disturbances, j as u64);
                (0..horizon).map(|_| self.sample_step(n_traffic, &mut rng)).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefParticles {
    /// `particles[i][m]` is hypothesis `i` for traffic vehicle `m`.
    pub particles: Vec<Vec<DriverParams>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStatus {
    Updated,
    /// Every particle assigned zero likelihood; previous weights kept.
    Inconsistent,
}

impl BeliefParticles {
    pub fn uniform(particles: Vec<Vec<DriverParams>>) -> Self {
        let n = particles.len();
        Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(params: Vec<DriverParams>) -> Self {
        Self::uniform(vec![params])
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn n_vehicles(&self) -> usize {
        self.particles.first().map_or(0, Vec::len)
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.weights)
    }

    pub fn effective_sample_size(&self) -> f64 {
        let sq: f64 = self.weights.iter().map(|w| w * w).sum();
        1.0 / sq
    }

    /// Weighted mean of every field, per vehicle.
    pub fn mean_params(&self) -> Vec<DriverParams> {
        let n_v = self.n_vehicles();
        let mut acc = vec![[0.0; 6]; n_v];
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(p) {
                for (af, vf) in a.iter_mut().zip(v.to_array()) {
                    *af += w * vf;
                }
            }
        }
        acc.into_iter().map(DriverParams::from_array).collect()
    }
}

/// Draws `n` joint particles, each vehicle independently from the mixture.
pub fn init_particles(
    prior: &PriorSpec,
    n_vehicles: usize,
    n: usize,
    key: RngKey,
) -> Result<BeliefParticles, BeliefError> {
    prior.validate()?;
    if n < 1 {
        return Err(BeliefError::EmptyParticleSet);
    }
    let particles = (0..n)
        .map(|i| {
            let mut rng = key.stream(Domain::Prior, i as u64);
            (0..n_vehicles).map(|_| prior.sample(&mut rng)).collect()
        })
        .collect();
    Ok(BeliefParticles::uniform(particles))
}

/// Gaussian log-likelihood of the observed traffic transition under each
/// particle, up to a particle-independent constant. Ego channels and traffic
/// lateral channels do not depend on the parameters and cancel on
/// normalization, so they are skipped.
pub fn transition_log_likelihoods(
    b: &BeliefParticles,
    x_t: &StackedState,
    u_t: &Control,
    x_next: &StackedState,
    dist: &DisturbanceModel,
    model: &TrafficModel,
) -> Vec<f64> {
    let var_v = dist.variances[0];
    let var_s = dist.variances[2];
    let mut pred = x_t.clone();
    b.particles
        .iter()
        .map(|theta| {
            traffic::step_into(x_t, u_t, theta, None, model, &mut pred);
            let mut ll = 0.0;
            for (p, o) in pred.traffic.iter().zip(&x_next.traffic) {
                ll -= 0.5 * (o.v_s - p.v_s).powi(2) / var_v;
                if var_s > 0.0 {
                    ll -= 0.5 * (o.s - p.s).powi(2) / var_s;
                }
            }
            ll
        })
        .collect()
}

/// Bayes reweighting with the one-step transition density; particles are not
/// moved or resampled.
pub fn filter_update(
    b: &BeliefParticles,
    x_t: &StackedState,
    u_t: &Control,
    x_next: &StackedState,
    dist: &DisturbanceModel,
    model: &TrafficModel,
) -> (BeliefParticles, UpdateStatus) {
    let ll = transition_log_likelihoods(b, x_t, u_t, x_next, dist, model);
    let log_w: Vec<f64> = b
        .weights
        .iter()
        .zip(&ll)
        .map(|(&w, &l)| if w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    match normalize_log_weights(&log_w) {
        Some(weights) => (
            BeliefParticles {
                particles: b.particles.clone(),
                weights,
            },
            UpdateStatus::Updated,
        ),
        None => {
            log::warn!("observation has zero likelihood under every particle; keeping previous belief");
            (b.clone(), UpdateStatus::Inconsistent)
        }
    }
}

/// Exponentiates and normalizes log-weights after subtracting their maximum.
/// `None` if no entry is finite.
pub fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let max = log_w.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut w: Vec<f64> = log_w
        .iter()
        .map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= sum;
    }
    Some(w)
}

/// Systematic resampling to `m` particles with uniform output weights.
pub fn downsample(b: &BeliefParticles, m: usize, key: RngKey) -> Result<BeliefParticles, BeliefError> {
    if m < 1 || b.is_empty() {
        return Err(BeliefError::EmptyParticleSet);
    }
    let idx = systematic_indices(&b.weights, m, key.stream(Domain::Downsample, 0).random());
    Ok(BeliefParticles::uniform(idx.into_iter().map(|i| b.particles[i].clone()).collect()))
}

/// Indices chosen by systematic resampling with offset `u ∈ [0, 1)`.
pub fn systematic_indices(weights: &[f64], m: usize, u: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let step = total / m as f64;
    let mut out = Vec::with_capacity(m);
    let mut i = 0;
    let mut cum = weights[0];
    for j in 0..m {
        let pos = (u + j as f64) * step;
        while pos >= cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

pub fn entropy(weights: &[f64]) -> f64 {
    weights.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum()
}

/// Traffic longitudinal channels `(v_s, s)` per vehicle, which are the only
/// ones the driver parameters influence.
#[inline]
pub fn observed_channels(x: &StackedState, out: &mut [f64]) {
    for (m, v) in x.traffic.iter().enumerate() {
        out[2 * m] = v.v_s;
        out[2 * m + 1] = v.s;
    }
}

/// Rollout observations `obs[i][j][k]` flattened, for `n_particles` particles,
/// `n_disturbances` disturbance sequences and `horizon` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutObservations {
    pub n_particles: usize,
    pub n_disturbances: usize,
    pub horizon: usize,
    pub n_channels: usize,
    data: Vec<f64>,
}

impl RolloutObservations {
    pub fn new(n_particles: usize, n_disturbances: usize, horizon: usize, n_channels: usize) -> Self {
        Self {
            n_particles,
            n_disturbances,
            horizon,
            n_channels,
            data: vec![0.0; n_particles * n_disturbances * horizon * n_channels],
        }
    }

    #[inline]
    pub fn slot(&mut self, i: usize, j: usize, k: usize) -> &mut [f64] {
        let c = self.n_channels;
        let at = ((i * self.n_disturbances + j) * self.horizon + k) * c;
        &mut self.data[at..at + c]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let c = self.n_channels;
        let at = ((i * self.n_disturbances + j) * self.horizon + k) * c;
        &self.data[at..at + c]
    }
}

/// Predicted weight trajectories along one control sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedBelief {
    /// `weights[k][i]` for `k = 0..=N`; row 0 is the current belief.
    pub weights: Vec<Vec<f64>>,
    /// Belief-weighted pseudo-observation for each of the `N` future steps.
    pub pseudo_observations: Vec<Vec<f64>>,
    n_particles: usize,
    n_channels: usize,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl PredictedBelief {
    pub fn final_weights(&self) -> &[f64] {
        self.weights.last().expect("at least the current belief")
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.weights.iter().map(|w| entropy(w)).collect()
    }

    /// Disturbance-averaged rollout mean of particle `i` at future step `k`.
    pub fn particle_mean(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.n_particles + i) * self.n_channels;
        &self.means[o..o + self.n_channels]
    }

    /// Regularized diagonal covariance of particle `i` at future step `k`.
    pub fn particle_variance(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.n_particles + i) * self.n_channels;
        &self.variances[o..o + self.n_channels]
    }
}

/// Predicted-weight recursion from stored rollouts.
///
/// For each future step the per-particle disturbance mean and (diagonal)
/// sample covariance are formed, the covariance is regularized with the
/// accumulated process noise, and every particle is scored on how well it
/// explains the belief-weighted mean prediction.
pub fn predicted_weights(
    current: &[f64],
    obs: &RolloutObservations,
    dist: &DisturbanceModel,
) -> Result<PredictedBelief, BeliefError> {
    predicted_weights_inner(current, obs, dist, current)
}

/// `pseudo_weights` mixes the particle means into the pseudo-observation.
pub(crate) fn predicted_weights_inner(
    current: &[f64],
    obs: &RolloutObservations,
    dist: &DisturbanceModel,
    pseudo_weights: &[f64],
) -> Result<PredictedBelief, BeliefError> {
    let (np, nw, horizon, nc) = (obs.n_particles, obs.n_disturbances, obs.horizon, obs.n_channels);
    assert_eq!(current.len(), np);
    let base_var: Vec<f64> = (0..nc)
        .map(|c| if c % 2 == 0 { dist.variances[0] } else { dist.variances[2] })
        .collect();

    let mut weights = Vec::with_capacity(horizon + 1);
    weights.push(current.to_vec());
    let mut log_w: Vec<f64> = current.iter().map(|w| w.ln()).collect();
    let mut pseudo_observations = Vec::with_capacity(horizon);
    let mut all_means = vec![0.0; horizon * np * nc];
    let mut all_vars = vec![0.0; horizon * np * nc];
    let inv_nw = 1.0 / nw as f64;

    for k in 0..horizon {
        let block = k * np * nc..(k + 1) * np * nc;
        let means = &mut all_means[block.clone()];
        let vars = &mut all_vars[block];
        let steps = (k + 1) as f64;
        for i in 0..np {
            let m = &mut means[i * nc..(i + 1) * nc];
            let s = &mut vars[i * nc..(i + 1) * nc];
            for j in 0..nw {
                for (mc, v) in m.iter_mut().zip(obs.get(i, j, k)) {
                    *mc += v;
                }
            }
            for mc in m.iter_mut() {
                *mc *= inv_nw;
            }
            for j in 0..nw {
                for ((sc, v), mc) in s.iter_mut().zip(obs.get(i, j, k)).zip(m.iter()) {
                    *sc += (v - mc) * (v - mc);
                }
            }
            for (c, sc) in s.iter_mut().enumerate() {
                *sc = *sc * inv_nw + base_var[c] * steps;
            }
        }

        let mut pseudo = vec![0.0; nc];
        for i in 0..np {
            for (p, mc) in pseudo.iter_mut().zip(&means[i * nc..(i + 1) * nc]) {
                *p += pseudo_weights[i] * mc;
            }
        }

        for i in 0..np {
            let mut quad = 0.0;
            let mut det = 1.0;
            let mut log_det = 0.0;
            for c in 0..nc {
                let var = vars[i * nc + c];
                if !(var > 0.0) {
                    return Err(BeliefError::SingularCovariance { step: k, particle: i });
                }
                let r = pseudo[c] - means[i * nc + c];
                quad += r * r / var;
                det *= var;
                if !(1e-200..=1e200).contains(&det) {
                    log_det += det.ln();
                    det = 1.0;
                }
            }
            log_w[i] -= 0.5 * (quad + log_det + det.ln());
        }
        let w = normalize_log_weights(&log_w).ok_or(BeliefError::SingularCovariance { step: k, particle: 0 })?;
        // Keep the recursion normalized: log_w <- log_w - logsumexp(log_w).
        let max = log_w.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        let shift = max + w.iter().zip(&log_w).find(|(_, l)| **l == max).map_or(0.0, |(x, _)| -x.ln());
        for lw in log_w.iter_mut() {
            *lw -= shift;
        }
        weights.push(w);
        pseudo_observations.push(pseudo);
    }

    Ok(PredictedBelief {
        weights,
        pseudo_observations,
        n_particles: np,
        n_channels: nc,
        means: all_means,
        variances: all_vars,
    })
}

/// Rolls every control particle out under every shared disturbance sequence
/// and records the observed channels.
pub fn collect_observations(
    b: &BeliefParticles,
    x_t: &StackedState,
    controls: &[Control],
    disturbances: &[Vec<Disturbance>],
    model: &TrafficModel,
) -> RolloutObservations {
    let nc = 2 * x_t.n_traffic();
    let mut obs = RolloutObservations::new(b.len(), disturbances.len(), controls.len(), nc);
    for (i, theta) in b.particles.iter().enumerate() {
        for (j, w) in disturbances.iter().enumerate() {
            traffic::rollout_each(x_t, controls, theta, Some(w), model, |k, x| {
                observed_channels(x, obs.slot(i, j, k));
            });
        }
    }
    obs
}

pub fn predict_belief(
    b: &BeliefParticles,
    x_t: &StackedState,
    controls: &[Control],
    disturbances: &[Vec<Disturbance>],
    dist: &DisturbanceModel,
    model: &TrafficModel,
) -> Result<PredictedBelief, BeliefError> {
    let obs = collect_observations(b, x_t, controls, disturbances, model);
    predicted_weights(&b.weights, &obs, dist)
}
