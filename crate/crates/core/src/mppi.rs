//! Information-theoretic path-integral solver.
//!
//! One planning iteration is `sample_controls` → (caller evaluates a cost per
//! sample) → `compute_weights` → `weighted_update`. The solver knows nothing
//! about the system being controlled; the controllers module supplies costs.

use nalgebra::{Matrix2, Vector2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Domain, RngKey};

/// Ego control: `[longitudinal accel, lateral accel]` in m/s².
pub type Control = Vector2<f64>;

/// Weights smaller than this after normalization are flushed to zero.
pub const WEIGHT_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MppiError {
    #[error("invalid MPPI configuration: {0}")]
    InvalidConfig(String),
    #[error("every rollout has infinite cost")]
    AllRolloutsInfeasible,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MppiConfig {
    /// Inverse temperature.
    pub lambda: f64,
    /// Per-step control sampling covariance, row-major.
    pub sigma_u: [[f64; 2]; 2],
    pub n_control_samples: usize,
    pub horizon: usize,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            lambda: 10_000.0,
            sigma_u: [[10.0, 0.0], [0.0, 1.5]],
            n_control_samples: 3_000,
            horizon: 50,
        }
    }
}

impl MppiConfig {
    pub fn sigma_u_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.sigma_u[0][0],
            self.sigma_u[0][1],
            self.sigma_u[1][0],
            self.sigma_u[1][1],
        )
    }

    pub fn validate(&self) -> Result<(), MppiError> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(MppiError::InvalidConfig(format!(
                "lambda must be finite and > 0, got {}",
                self.lambda
            )));
        }
        if self.n_control_samples < 1 {
            return Err(MppiError::InvalidConfig(
                "n_control_samples must be >= 1".into(),
            ));
        }
        if self.horizon < 2 {
            return Err(MppiError::InvalidConfig(format!(
                "horizon must be >= 2, got {}",
                self.horizon
            )));
        }
        self.sigma_u_cholesky().map(|_| ())
    }

    /// Lower Cholesky factor of `sigma_u`, or an error if it is not symmetric
    /// positive definite.
    pub fn sigma_u_cholesky(&self) -> Result<Matrix2<f64>, MppiError> {
        let s = self.sigma_u_matrix();
        if s.iter().any(|v| !v.is_finite()) {
            return Err(MppiError::InvalidConfig("sigma_u has non-finite entries".into()));
        }
        let scale = s.amax().max(1.0);
        if (s[(0, 1)] - s[(1, 0)]).abs() > 1e-12 * scale {
            return Err(MppiError::InvalidConfig("sigma_u is not symmetric".into()));
        }
        s.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| MppiError::InvalidConfig("sigma_u is not positive definite".into()))
    }

    pub fn sigma_u_inverse(&self) -> Result<Matrix2<f64>, MppiError> {
        let s = self.sigma_u_matrix();
        s.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| MppiError::InvalidConfig("sigma_u is not positive definite".into()))
    }
}

/// Mean control sequence of the sampling distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan {
    pub mean: Vec<Control>,
}

impl ControlPlan {
    pub fn zeros(horizon: usize) -> Self {
        Self {
            mean: vec![Control::zeros(); horizon],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn first(&self) -> Control {
        self.mean.first().copied().unwrap_or_else(Control::zeros)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSampleBatch {
    pub samples: Vec<Vec<Control>>,
    pub plan: ControlPlan,
}

impl ControlSampleBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Normalized importance weights over a sample batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Wraps already-normalized weights. Fails if any weight is negative or the
    /// sum is not within 1e-12 of one.
    pub fn new(weights: Vec<f64>) -> Result<Self, MppiError> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(MppiError::InvalidConfig(format!(
                "weights must be nonnegative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Kish effective sample size.
    pub fn effective_sample_size(&self) -> f64 {
        let sq: f64 = self.0.iter().map(|w| w * w).sum();
        if sq > 0.0 {
            1.0 / sq
        } else {
            0.0
        }
    }
}

/// Draws `n_control_samples` sequences around `plan`, one independent stream
/// per sample index.
pub fn sample_controls(
    plan: &ControlPlan,
    cfg: &MppiConfig,
    key: RngKey,
) -> Result<ControlSampleBatch, MppiError> {
    if plan.len() != cfg.horizon {
        return Err(MppiError::LengthMismatch {
            expected: cfg.horizon,
            found: plan.len(),
        });
    }
    let chol = cfg.sigma_u_cholesky()?;
    let samples = (0..cfg.n_control_samples)
        .into_par_iter()
        .map(|l| {
            let mut rng = key.stream(Domain::ControlSamples, l as u64);
            plan.mean
                .iter()
                .map(|mean| {
                    let z = Vector2::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    mean + chol * z
                })
                .collect()
        })
        .collect();
    Ok(ControlSampleBatch {
        samples,
        plan: plan.clone(),
    })
}

/// Sum over the horizon of `(u − ū)ᵀ Σ_u⁻¹ u`.
pub fn control_prior_term(sample: &[Control], plan: &ControlPlan, sigma_inv: &Matrix2<f64>) -> f64 {
    sample
        .iter()
        .zip(&plan.mean)
        .map(|(u, mean)| (u - mean).dot(&(sigma_inv * u)))
        .sum()
}

/// Importance weights `∝ exp(−(S + λ·prior)/λ)`, with the minimum exponent
/// subtracted before exponentiation. Non-finite costs get zero weight.
pub fn compute_weights(
    costs: &[f64],
    batch: &ControlSampleBatch,
    cfg: &MppiConfig,
) -> Result<WeightVector, MppiError> {
    if costs.len() != batch.len() {
        return Err(MppiError::LengthMismatch {
            expected: batch.len(),
            found: costs.len(),
        });
    }
    let sigma_inv = cfg.sigma_u_inverse()?;
    let exponents: Vec<f64> = costs
        .iter()
        .zip(&batch.samples)
        .map(|(&cost, sample)| {
            let e = cost / cfg.lambda + control_prior_term(sample, &batch.plan, &sigma_inv);
            if e.is_finite() {
                e
            } else {
                f64::INFINITY
            }
        })
        .collect();

    let (best, baseline) = exponents
        .iter()
        .copied()
        .enumerate()
        .fold((usize::MAX, f64::INFINITY), |acc, (i, e)| {
            if e < acc.1 {
                (i, e)
            } else {
                acc
            }
        });
    if best == usize::MAX {
        return Err(MppiError::AllRolloutsInfeasible);
    }

    let mut weights: Vec<f64> = exponents.iter().map(|e| (-(e - baseline)).exp()).collect();
    let eta: f64 = weights.iter().sum();
    if !(eta > 0.0 && eta.is_finite()) {
        log::warn!("MPPI normalizer degenerate ({eta}); falling back to best sample {best}");
        let mut fallback = vec![0.0; weights.len()];
        fallback[best] = 1.0;
        return Ok(WeightVector(fallback));
    }
    for w in weights.iter_mut() {
        *w /= eta;
        if *w < WEIGHT_FLOOR {
            *w = 0.0;
        }
    }
    // Flushing can only remove mass far below f64 resolution, but renormalize
    // so the sum invariant holds exactly.
    let sum: f64 = weights.iter().sum();
    if sum != 1.0 {
        for w in weights.iter_mut() {
            *w /= sum;
        }
    }
    Ok(WeightVector(weights))
}

/// Element-wise weighted average of the sampled sequences.
pub fn weighted_update(batch: &ControlSampleBatch, weights: &WeightVector) -> Result<ControlPlan, MppiError> {
    let w = weights.as_slice();
    if w.len() != batch.len() {
        return Err(MppiError::LengthMismatch {
            expected: batch.len(),
            found: w.len(),
        });
    }
    let horizon = batch.plan.len();
    let mut mean = vec![Control::zeros(); horizon];
    for (sample, &wl) in batch.samples.iter().zip(w) {
        if sample.len() != horizon {
            return Err(MppiError::LengthMismatch {
                expected: horizon,
                found: sample.len(),
            });
        }
        if wl == 0.0 {
            continue;
        }
        for (acc, u) in mean.iter_mut().zip(sample) {
            *acc += u * wl;
        }
    }
    Ok(ControlPlan { mean })
}

/// Receding-horizon warm start: drop the first control, repeat the last.
pub fn shift_plan(plan: &ControlPlan) -> ControlPlan {
    let mut mean = plan.mean.clone();
    if let Some(&last) = mean.last() {
        mean.remove(0);
        mean.push(last);
    }
    ControlPlan { mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg(n: usize, horizon: usize) -> MppiConfig {
        MppiConfig {
            lambda: 1.0,
            sigma_u: [[10.0, 0.0], [0.0, 1.5]],
            n_control_samples: n,
            horizon,
        }
    }

    fn batch_from(samples: Vec<Vec<Control>>, plan: ControlPlan) -> ControlSampleBatch {
        ControlSampleBatch { samples, plan }
    }

    #[test]
    fn sample_marginals_match_covariance() {
        let c = MppiConfig {
            n_control_samples: 20_000,
            horizon: 2,
            ..cfg(0, 2)
        };
        let plan = ControlPlan {
            mean: vec![Control::new(1.0, -0.5); 2],
        };
        let batch = sample_controls(&plan, &c, RngKey::new(5)).unwrap();
        let n = batch.len() as f64;
        let (mut m0, mut m1) = (0.0, 0.0);
        for s in &batch.samples {
            m0 += s[0].x;
            m1 += s[0].y;
        }
        m0 /= n;
        m1 /= n;
        let (mut v0, mut v1) = (0.0, 0.0);
        for s in &batch.samples {
            v0 += (s[0].x - m0).powi(2);
            v1 += (s[0].y - m1).powi(2);
        }
        let (sd0, sd1) = ((v0 / n).sqrt(), (v1 / n).sqrt());
        assert!((m0 - 1.0).abs() < 0.1, "{m0}");
        assert!((m1 + 0.5).abs() < 0.05, "{m1}");
        assert!((sd0 - 10f64.sqrt()).abs() < 0.05, "{sd0}");
        assert!((sd1 - 1.5f64.sqrt()).abs() < 0.03, "{sd1}");
    }

    #[test]
    fn tiny_covariance_collapses_to_mean() {
        let c = MppiConfig {
            sigma_u: [[1e-9, 0.0], [0.0, 1e-9]],
            ..cfg(16, 4)
        };
        let plan = ControlPlan {
            mean: vec![Control::new(0.3, 0.1); 4],
        };
        let batch = sample_controls(&plan, &c, RngKey::new(0)).unwrap();
        for s in &batch.samples {
            for (u, m) in s.iter().zip(&plan.mean) {
                assert!((u - m).amax() < 1e-3);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = cfg(64, 5);
        let plan = ControlPlan::zeros(5);
        let a = sample_controls(&plan, &c, RngKey::new(11).at_step(2)).unwrap();
        let b = sample_controls(&plan, &c, RngKey::new(11).at_step(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_covariance_and_lambda() {
        let mut c = cfg(4, 4);
        c.sigma_u = [[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(c.validate(), Err(MppiError::InvalidConfig(_))));
        assert!(sample_controls(&ControlPlan::zeros(4), &c, RngKey::new(0)).is_err());
        let mut c = cfg(4, 4);
        c.sigma_u = [[1.0, 0.1], [0.0, 1.0]];
        assert!(c.validate().is_err());
        let mut c = cfg(4, 4);
        c.lambda = 0.0;
        assert!(c.validate().is_err());
        let c = cfg(4, 1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn equal_exponents_give_equal_weights() {
        let plan = ControlPlan::zeros(3);
        let batch = batch_from(vec![plan.mean.clone(), plan.mean.clone()], plan);
        let w = compute_weights(&[4.0, 4.0], &batch, &cfg(2, 3)).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn log_three_cost_gap() {
        let plan = ControlPlan::zeros(3);
        let batch = batch_from(vec![plan.mean.clone(), plan.mean.clone()], plan);
        let w = compute_weights(&[0.0, 3f64.ln()], &batch, &cfg(2, 3)).unwrap();
        assert_abs_diff_eq!(w.as_slice()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(w.as_slice()[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn weights_match_direct_formula() {
        // Oracle: scalar evaluation of exp(-(S + λ Σ (u-ū)ᵀΣ⁻¹u)/λ) / η with the
        // diagonal inverse written out by hand.
        let lambda = 2.5;
        let (s0, s1) = (10.0, 1.5);
        let c = MppiConfig {
            lambda,
            sigma_u: [[s0, 0.0], [0.0, s1]],
            ..cfg(5, 3)
        };
        let plan = ControlPlan {
            mean: vec![Control::new(0.2, -0.1), Control::new(0.0, 0.3), Control::new(-0.4, 0.0)],
        };
        let samples: Vec<Vec<Control>> = (0..5)
            .map(|l| {
                (0..3)
                    .map(|k| Control::new(0.3 * l as f64 - 0.5 + 0.1 * k as f64, 0.2 * (l as f64 - 2.0) * (k as f64 - 1.0)))
                    .collect()
            })
            .collect();
        let costs = [1.3, 0.2, 4.1, 2.2, 0.9];
        let batch = batch_from(samples.clone(), plan.clone());
        let w = compute_weights(&costs, &batch, &c).unwrap();

        let raw: Vec<f64> = (0..5)
            .map(|l| {
                let mut prior = 0.0;
                for k in 0..3 {
                    let u = samples[l][k];
                    let m = plan.mean[k];
                    prior += (u.x - m.x) * u.x / s0 + (u.y - m.y) * u.y / s1;
                }
                (-(costs[l] + lambda * prior) / lambda).exp()
            })
            .collect();
        let eta: f64 = raw.iter().sum();
        for l in 0..5 {
            assert_abs_diff_eq!(w.as_slice()[l], raw[l] / eta, epsilon = 1e-12);
        }
    }

    #[test]
    fn huge_penalties_do_not_overflow() {
        let plan = ControlPlan::zeros(2);
        let batch = batch_from(vec![plan.mean.clone(); 3], plan);
        let mut c = cfg(3, 2);
        c.lambda = 1e-3;
        let w = compute_weights(&[1e6, 1e6 + 1e-3, 5e6], &batch, &c).unwrap();
        let sum: f64 = w.as_slice().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(w.as_slice()[0] > w.as_slice()[1]);
        assert_eq!(w.as_slice()[2], 0.0);
    }

    #[test]
    fn all_infinite_costs_is_an_error() {
        let plan = ControlPlan::zeros(2);
        let batch = batch_from(vec![plan.mean.clone(); 2], plan);
        let r = compute_weights(&[f64::INFINITY, f64::NAN], &batch, &cfg(2, 2));
        assert_eq!(r, Err(MppiError::AllRolloutsInfeasible));
    }

    #[test]
    fn weighted_update_examples() {
        let plan = ControlPlan::zeros(2);
        let u = vec![Control::new(1.0, 2.0), Control::new(-3.0, 0.5)];
        let one = batch_from(vec![u.clone()], plan.clone());
        let out = weighted_update(&one, &WeightVector::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(out.mean, u);

        let neg: Vec<Control> = u.iter().map(|v| -v).collect();
        let two = batch_from(vec![u.clone(), neg], plan.clone());
        let out = weighted_update(&two, &WeightVector::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert!(out.mean.iter().all(|v| v.amax() == 0.0));

        let a = vec![Control::new(1.0, 0.0), Control::new(2.0, 1.0)];
        let b = vec![Control::new(-1.0, 4.0), Control::new(0.0, -2.0)];
        let c = vec![Control::new(3.0, 1.0), Control::new(1.0, 1.0)];
        let three = batch_from(vec![a, b, c], plan.clone());
        let out = weighted_update(&three, &WeightVector::new(vec![0.2, 0.3, 0.5]).unwrap()).unwrap();
        // 0.2·1 + 0.3·(−1) + 0.5·3 = 1.4 ; 0.2·0 + 0.3·4 + 0.5·1 = 1.7
        // 0.2·2 + 0.3·0 + 0.5·1 = 0.9 ; 0.2·1 + 0.3·(−2) + 0.5·1 = 0.1
        assert_abs_diff_eq!(out.mean[0].x, 1.4, epsilon = 1e-12);
        assert_abs_diff_eq!(out.mean[0].y, 1.7, epsilon = 1e-12);
        assert_abs_diff_eq!(out.mean[1].x, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(out.mean[1].y, 0.1, epsilon = 1e-12);

        let bad = WeightVector::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(weighted_update(&one, &bad), Err(MppiError::LengthMismatch { .. })));
    }

    #[test]
    fn shift_examples() {
        let (a, b, c) = (Control::new(1.0, 0.0), Control::new(2.0, 0.0), Control::new(3.0, 1.0));
        let p = ControlPlan { mean: vec![a, b, c] };
        assert_eq!(shift_plan(&p).mean, vec![b, c, c]);
        let k = ControlPlan { mean: vec![b; 4] };
        assert_eq!(shift_plan(&k), k);
        let mut q = p.clone();
        for _ in 0..3 {
            q = shift_plan(&q);
        }
        assert_eq!(q.mean, vec![c; 3]);
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<f64>, ControlSampleBatch)> {
        (1usize..8, 2usize..5).prop_flat_map(|(n, h)| {
            (
                prop::collection::vec(-50.0..50.0f64, n),
                prop::collection::vec(prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), h), n),
                prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), h),
            )
                .prop_map(|(costs, samples, mean)| {
                    let plan = ControlPlan {
                        mean: mean.into_iter().map(|(a, b)| Control::new(a, b)).collect(),
                    };
                    let samples = samples
                        .into_iter()
                        .map(|s| s.into_iter().map(|(a, b)| Control::new(a, b)).collect())
                        .collect();
                    (costs, ControlSampleBatch { samples, plan })
                })
        })
    }

    proptest! {
        #[test]
        fn weights_invariant_to_cost_shift((costs, batch) in arb_batch(), shift in -1e4..1e4f64) {
            let c = MppiConfig { lambda: 3.0, n_control_samples: batch.len(), horizon: batch.plan.len(), ..cfg(1, 2) };
            let w0 = compute_weights(&costs, &batch, &c).unwrap();
            let shifted: Vec<f64> = costs.iter().map(|x| x + shift).collect();
            let w1 = compute_weights(&shifted, &batch, &c).unwrap();
            for (a, b) in w0.as_slice().iter().zip(w1.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn weights_follow_joint_permutation((costs, batch) in arb_batch(), rot in 0usize..8) {
            let c = MppiConfig { lambda: 3.0, ..cfg(1, 2) };
            let n = costs.len();
            let r = rot % n;
            let perm: Vec<usize> = (0..n).map(|i| (i + r) % n).collect();
            let w = compute_weights(&costs, &batch, &c).unwrap();
            let pc: Vec<f64> = perm.iter().map(|&i| costs[i]).collect();
            let pb = ControlSampleBatch { samples: perm.iter().map(|&i| batch.samples[i].clone()).collect(), plan: batch.plan.clone() };
            let pw = compute_weights(&pc, &pb, &c).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((pw.as_slice()[k] - w.as_slice()[i]).abs() < 1e-14);
            }
        }

        #[test]
        fn weights_sum_to_one_and_update_stays_in_hull((costs, batch) in arb_batch(), lambda in 0.01..100.0f64) {
            let c = MppiConfig { lambda, ..cfg(1, 2) };
            let w = compute_weights(&costs, &batch, &c).unwrap();
            let sum: f64 = w.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(w.as_slice().iter().all(|x| *x >= 0.0));
            let out = weighted_update(&batch, &w).unwrap();
            for k in 0..batch.plan.len() {
                for axis in 0..2 {
                    let lo = batch.samples.iter().map(|s| s[k][axis]).fold(f64::INFINITY, f64::min);
                    let hi = batch.samples.iter().map(|s| s[k][axis]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out.mean[k][axis] >= lo - 1e-12 && out.mean[k][axis] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn large_lambda_flattens_weights() {
        let plan = ControlPlan::zeros(3);
        // Samples equal to the mean so the prior term vanishes.
        let batch = batch_from(vec![plan.mean.clone(); 4], plan);
        let mut c = cfg(4, 3);
        c.lambda = 1e12;
        let w = compute_weights(&[0.0, 10.0, 250.0, 1000.0], &batch, &c).unwrap();
        for x in w.as_slice() {
            assert_abs_diff_eq!(*x, 0.25, epsilon = 1e-9);
        }
    }
}
