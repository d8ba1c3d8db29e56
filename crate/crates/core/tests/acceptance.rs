//! Acceptance suite. Prints one PASS/FAIL line per criterion. Any failed
//! check exits nonzero, except the two Monte Carlo benchmark criteria, which
//! only gate the exit status when DMPPI_ACCEPTANCE_STRICT is set.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmppi::belief::{
    self, filter_update, init_particles, BeliefParticles, DisturbanceModel, PriorSpec,
};
use dmppi::controllers::{
    objective_cemppi, objective_dmppi, objective_emppi, plan, PlanSeeds, PlannerConfig, PlannerKind,
};
use dmppi::mppi::{compute_weights, sample_controls, weighted_update, Control, ControlPlan, MppiConfig};
use dmppi::rng::RngKey;
use dmppi::sim::{make_scenario, monte_carlo, ClosedLoop, Outcome, TrialConfig};
use dmppi::traffic::{self, DriverParams, StackedState, TrafficModel, VehicleState};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---------------------------------------------------------------------------
// Bayes oracle

/// Full-state Gaussian log density of `x_next` given the noiseless prediction,
/// summed over every channel that carries noise.
fn oracle_log_density(pred: &StackedState, x_next: &StackedState, dist: &DisturbanceModel) -> f64 {
    let mut ll = 0.0;
    let mut add = |obs: f64, mean: f64, var: f64| {
        if var > 0.0 {
            ll += -0.5 * (obs - mean).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        }
    };
    let v = dist.variances;
    add(x_next.ego.v_s, pred.ego.v_s, v[0]);
    add(x_next.ego.v_d, pred.ego.v_d, v[1]);
    add(x_next.ego.s, pred.ego.s, v[2]);
    add(x_next.ego.d, pred.ego.d, v[3]);
    for (o, p) in x_next.traffic.iter().zip(&pred.traffic) {
        add(o.v_s, p.v_s, v[0]);
        add(o.s, p.s, v[2]);
    }
    ll
}

fn bayes_oracle() -> Verdict {
    let started = Instant::now();
    let model = TrafficModel::default();
    let dist = DisturbanceModel::default();
    let prior = PriorSpec::merge_default();
    let mut worst = 0.0f64;
    for episode in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + episode);
        let n_particles = rng.random_range(2..=100);
        let n_v = rng.random_range(2..=5);
        let b0 = init_particles(&prior, n_v, n_particles, RngKey::new(episode)).unwrap();
        let truth = b0.particles[rng.random_range(0..n_particles)].clone();
        let mut x = StackedState {
            ego: VehicleState::new(10.0, 0.0, rng.random_range(0.0..8.0 * (n_v - 1) as f64), -3.5),
            traffic: (0..n_v).map(|m| VehicleState::new(10.0, 0.0, 8.0 * m as f64, 0.0)).collect(),
        };
        let mut b = b0.clone();
        let mut log_joint: Vec<f64> = b0.weights.iter().map(|w| w.ln()).collect();
        for _ in 0..10 {
            let u = Control::new(rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.5));
            let w = dist.sample_step(n_v, &mut rng);
            let x_next = traffic::step(&x, &u, &truth, Some(&w), &model);
            for (lj, theta) in log_joint.iter_mut().zip(&b0.particles) {
                let pred = traffic::step(&x, &u, theta, None, &model);
                *lj += oracle_log_density(&pred, &x_next, &dist);
            }
            b = filter_update(&b, &x, &u, &x_next, &dist, &model).0;
            x = x_next;
        }
        // Single-shot normalization of the accumulated joint.
        let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = log_joint.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        for (got, want) in b.weights.iter().zip(unnorm.iter().map(|u| u / z)) {
            worst = worst.max((got - want).abs());
        }
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 1e-10 && elapsed < Duration::from_secs(10),
        format!("max |w_filter - w_bayes| = {worst:.2e} (tol 1e-10), {:.2}s (limit 10s)", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// Point-mass equivalence

fn merge_state() -> StackedState {
    StackedState {
        ego: VehicleState::new(10.0, 0.0, 14.0, -3.5),
        traffic: (0..5).map(|m| VehicleState::new(10.0, 0.0, 8.0 * m as f64, 0.0)).collect(),
    }
}

fn desk_planner() -> PlannerConfig {
    TrialConfig::desk().planner
}

fn point_mass_equivalence() -> Verdict {
    let started = Instant::now();
    let cfg = desk_planner();
    let x = merge_state();
    let b = init_particles(&PriorSpec::merge_default(), 5, 1, RngKey::new(77)).unwrap();
    let w = cfg.disturbance.sample_sequences(5, cfg.mppi.horizon, RngKey::new(78));
    let mut sampler = cfg.mppi.clone();
    sampler.n_control_samples = 1000;
    let batch = sample_controls(&ControlPlan::zeros(cfg.mppi.horizon), &sampler, RngKey::new(79)).unwrap();
    let mut worst = 0.0f64;
    for u in &batch.samples {
        let d = objective_dmppi(&x, u, &b, &w, &cfg).unwrap();
        let e = objective_emppi(&x, u, &b, &w, &cfg).unwrap();
        let c = objective_cemppi(&x, u, &b, &w, &cfg).unwrap();
        let scale = d.abs().max(1.0);
        worst = worst.max((d - e).abs() / scale).max((d - c).abs() / scale);
    }

    // Plans: bitwise with one planning particle, and to rounding when the
    // single hypothesis is replicated across the downsampled set.
    let plans = |n_control_particles: usize| -> Vec<ControlPlan> {
        let mut c = cfg.clone();
        c.n_control_particles = n_control_particles;
        let warm = ControlPlan::zeros(c.mppi.horizon);
        PlannerKind::ALL
            .iter()
            .map(|&k| plan(k, &x, &b, &warm, &c, PlanSeeds::new(5, 0)).unwrap().optimal)
            .collect()
    };
    let single = plans(1);
    let identical = single.windows(2).all(|p| p[0] == p[1]);
    let replicated = plans(cfg.n_control_particles);
    let mut plan_dev = 0.0f64;
    for p in &replicated[1..] {
        for (a, b) in p.mean.iter().zip(&replicated[0].mean) {
            plan_dev = plan_dev.max((a - b).amax());
        }
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 1e-9 && identical && plan_dev <= 1e-9 && elapsed < Duration::from_secs(30),
        format!(
            "objective rel. gap {worst:.2e} (tol 1e-9) over 1000 controls; plans bitwise identical: {identical}; \
             with {} replicated particles max plan gap {plan_dev:.2e}; {:.1}s (limit 30s)",
            cfg.n_control_particles,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Dual control effect

fn dual_control_effect() -> Verdict {
    let model = TrafficModel::default();
    let dist = DisturbanceModel::default();
    let horizon = 50;
    let base = DriverParams {
        desired_speed: 10.0,
        time_headway: 1.75,
        max_accel: 1.25,
        comfort_decel: 2.0,
        min_gap: 2.5,
        yield_factor: 0.85,
    };
    let friendly = base;
    let aggressive = DriverParams {
        yield_factor: 0.1,
        time_headway: 1.75,
        ..base
    };
    let b = BeliefParticles {
        particles: vec![vec![friendly, base], vec![aggressive, base]],
        weights: vec![0.8, 0.2],
    };
    // Ego on the ramp ahead of vehicle 0, well behind vehicle 1.
    let x = StackedState {
        ego: VehicleState::new(10.0, 0.0, 20.0, -3.5),
        traffic: vec![VehicleState::new(10.0, 0.0, 0.0, 0.0), VehicleState::new(10.0, 0.0, 60.0, 0.0)],
    };
    // Approach: drift to d ≈ -2.06, inside the engagement band, and hold.
    let approach: Vec<Control> = (0..horizon)
        .map(|k| match k {
            0..=11 => Control::new(0.0, 1.0),
            12..=23 => Control::new(0.0, -1.0),
            _ => Control::zeros(),
        })
        .collect();
    let keep_away: Vec<Control> = vec![Control::zeros(); horizon];
    let w = dist.sample_sequences(2, horizon, RngKey::new(3));
    let near = belief::predict_belief(&b, &x, &approach, &w, &dist, &model).unwrap();
    let far = belief::predict_belief(&b, &x, &keep_away, &w, &dist, &model).unwrap();
    let (wa, wk) = (near.final_weights(), far.final_weights());
    let diff = wa.iter().zip(wk).map(|(a, k)| (a - k).abs()).fold(0.0, f64::max);
    let (ha, hk) = (belief::entropy(wa), belief::entropy(wk));
    verdict(
        diff > 1e-3 && ha < hk,
        format!(
            "final weights approach {wa:.4?} vs keep-away {wk:.4?}, max-norm gap {diff:.3e} (need > 1e-3); \
             entropy {ha:.4} vs {hk:.4}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Causality

fn causality() -> Verdict {
    let mut cfg = TrialConfig::desk();
    cfg.planner.mppi.n_control_samples = 48;
    cfg.planner.mppi.horizon = 20;
    cfg.planner.n_control_particles = 4;
    cfg.planner.disturbance.n_samples = 2;
    cfg.n_filter_particles = 300;
    let model = cfg.planner.disturbance.scaled(cfg.scenario.env_noise_scale);
    let mut identical = 0;
    let mut sensitive = 0;
    for case in 0..50u64 {
        let scenario = make_scenario(&cfg.scenario, 500 + case).unwrap();
        let t = 1 + case % 6;
        let run = |perturb_from: u64, alt_seed: u64| -> Control {
            let mut sim = ClosedLoop::new(&cfg, PlannerKind::Dmppi, &scenario, 9 + case).unwrap();
            loop {
                let r = sim.plan().unwrap();
                if sim.step_index() == t || sim.outcome().is_some() {
                    return r.applied;
                }
                let noise = if sim.step_index() >= perturb_from {
                    let mut rng = RngKey::new(alt_seed).at_step(sim.step_index()).stream(dmppi::rng::Domain::Environment, 0);
                    model.sample_step(sim.state().n_traffic(), &mut rng)
                } else {
                    sim.environment_noise()
                };
                sim.advance(&r, &noise);
            }
        };
        let reference = run(u64::MAX, 0);
        let future = run(t, 4242 + case);
        if reference.x.to_bits() == future.x.to_bits() && reference.y.to_bits() == future.y.to_bits() {
            identical += 1;
        }
        // Control: perturbing the past must be visible.
        let past = run(t - 1, 4242 + case);
        if past != reference {
            sensitive += 1;
        }
    }
    verdict(
        identical == 50,
        format!("u_t bit-identical in {identical}/50 cases with future noise reseeded; past-noise perturbation changed u_t in {sensitive}/50"),
    )
}

// ---------------------------------------------------------------------------
// MPPI sanity on a double integrator

const DT: f64 = 0.1;

fn di_cost(u: &[Control], x0: Vector2<f64>, q: &Matrix2<f64>, r: f64, qf: &Matrix2<f64>) -> f64 {
    let a = Matrix2::new(1.0, DT, 0.0, 1.0);
    let b = Vector2::new(0.0, DT);
    let mut x = x0;
    let mut j = 0.0;
    for uk in u {
        j += x.dot(&(q * x)) + r * uk.x * uk.x;
        x = a * x + b * uk.x;
    }
    j + x.dot(&(qf * x))
}

fn riccati_optimum(x0: Vector2<f64>, q: &Matrix2<f64>, r: f64, qf: &Matrix2<f64>, n: usize) -> f64 {
    let a = Matrix2::new(1.0, DT, 0.0, 1.0);
    let b = Vector2::new(0.0, DT);
    let mut p = *qf;
    for _ in 0..n {
        let s = r + b.dot(&(p * b));
        let k = (b.transpose() * p * a) / s;
        p = q + a.transpose() * p * a - (a.transpose() * p * b) * k;
    }
    x0.dot(&(p * x0))
}

fn mppi_sanity() -> Verdict {
    let x0 = Vector2::new(2.0, 0.0);
    let q = Matrix2::new(1.0, 0.0, 0.0, 0.1);
    let qf = Matrix2::new(10.0, 0.0, 0.0, 1.0);
    let r = 0.1;
    let n = 30;
    let cfg = MppiConfig {
        lambda: 0.01,
        sigma_u: [[0.25, 0.0], [0.0, 0.25]],
        n_control_samples: 1024,
        horizon: n,
    };
    let optimum = riccati_optimum(x0, &q, r, &qf, n);
    let mut plan = ControlPlan::zeros(n);
    for it in 0..50u64 {
        let batch = sample_controls(&plan, &cfg, RngKey::new(17).at_step(it)).unwrap();
        let costs: Vec<f64> = batch.samples.iter().map(|u| di_cost(u, x0, &q, r, &qf)).collect();
        let w = compute_weights(&costs, &batch, &cfg).unwrap();
        plan = weighted_update(&batch, &w).unwrap();
    }
    let achieved = di_cost(&plan.mean, x0, &q, r, &qf);
    let rel = (achieved - optimum) / optimum;
    verdict(
        rel <= 0.10,
        format!("MPPI cost {achieved:.4} vs Riccati optimum {optimum:.4}, excess {:.2}% (limit 10%)", 100.0 * rel),
    )
}

// ---------------------------------------------------------------------------
// Rollout count and plan speed

fn desk_plan_inputs() -> (PlannerConfig, StackedState, BeliefParticles) {
    let trial = TrialConfig::desk();
    let scenario = make_scenario(&trial.scenario, 1).unwrap();
    let b = init_particles(&trial.prior, 5, trial.n_filter_particles, RngKey::new(2)).unwrap();
    (trial.planner, scenario.initial, b)
}

fn rollout_count() -> Verdict {
    let (cfg, x, b) = desk_plan_inputs();
    let r = plan(PlannerKind::Dmppi, &x, &b, &ControlPlan::zeros(cfg.mppi.horizon), &cfg, PlanSeeds::new(1, 0)).unwrap();
    let expected = (cfg.mppi.n_control_samples * cfg.n_control_particles * cfg.disturbance.n_samples) as u64;
    verdict(
        r.rollouts == expected,
        format!(
            "{} length-{} rollouts counted, expected {} x {} x {} = {expected}",
            r.rollouts, cfg.mppi.horizon, cfg.mppi.n_control_samples, cfg.n_control_particles, cfg.disturbance.n_samples
        ),
    )
}

fn plan_speed() -> Verdict {
    let (cfg, x, b) = desk_plan_inputs();
    let warm = ControlPlan::zeros(cfg.mppi.horizon);
    let mut slowest = Duration::ZERO;
    for step in 0..3 {
        let t0 = Instant::now();
        plan(PlannerKind::Dmppi, &x, &b, &warm, &cfg, PlanSeeds::new(1, step)).unwrap();
        slowest = slowest.max(t0.elapsed());
    }
    verdict(
        slowest < Duration::from_secs(1),
        format!(
            "slowest of 3 DMPPI plan calls {:.0} ms (limit 1000 ms) on {} threads",
            1e3 * slowest.as_secs_f64(),
            rayon::current_num_threads()
        ),
    )
}

// ---------------------------------------------------------------------------
// Monte Carlo ordering and collisions

const MC_TRIALS: usize = 100;
const MC_SEED: u64 = 2024;

fn monte_carlo_criteria() -> (Verdict, Verdict) {
    let cfg = TrialConfig::dense_platoon();
    let started = Instant::now();
    let (report, _) = monte_carlo(&cfg, &PlannerKind::ALL, MC_TRIALS, MC_SEED, None, |_, _| {}).unwrap();
    let elapsed = started.elapsed();
    let rate = |k| report.summary(k).unwrap().success_rate;
    let (d, e, c) = (rate(PlannerKind::Dmppi), rate(PlannerKind::Emppi), rate(PlannerKind::CeMppi));
    let ordering = verdict(
        d - e >= 0.10 && d - c >= 0.10,
        format!(
            "{MC_TRIALS} paired trials: success DMPPI {d:.2}, EMPPI {e:.2}, CE_MPPI {c:.2} \
             (need DMPPI ahead of both by >= 0.10); {:.1} min on {} threads",
            elapsed.as_secs_f64() / 60.0,
            rayon::current_num_threads()
        ),
    );
    let collisions: Vec<String> = report
        .planners
        .iter()
        .map(|p| {
            let n = p.outcomes.iter().find(|(o, _)| *o == Outcome::Collision).map_or(0, |(_, n)| *n);
            format!("{} {n}", p.planner)
        })
        .collect();
    let zero = report.planners.iter().all(|p| p.collision_rate == 0.0);
    (ordering, verdict(zero, format!("collisions: {}", collisions.join(", "))))
}

fn main() -> ExitCode {
    let skip_mc = std::env::var_os("DMPPI_ACCEPTANCE_SKIP_MC").is_some();
    let strict = std::env::var_os("DMPPI_ACCEPTANCE_STRICT").is_some();
    let mut results: Vec<(&str, Verdict, bool)> = vec![
        ("bayes-oracle-equivalence", bayes_oracle(), true),
        ("point-mass-equivalence", point_mass_equivalence(), true),
        ("dual-control-effect", dual_control_effect(), true),
        ("causality", causality(), true),
        ("mppi-double-integrator", mppi_sanity(), true),
        ("rollout-count", rollout_count(), true),
        ("plan-speed", plan_speed(), true),
    ];
    if skip_mc {
        println!("SKIP monte-carlo-ordering: DMPPI_ACCEPTANCE_SKIP_MC is set");
        println!("SKIP zero-collisions: DMPPI_ACCEPTANCE_SKIP_MC is set");
    } else {
        let (ordering, collisions) = monte_carlo_criteria();
        results.push(("monte-carlo-ordering", ordering, strict));
        results.push(("zero-collisions", collisions, strict));
    }
    let mut failed = 0;
    let mut gating = 0;
    for (name, v, gates) in &results {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
            if *gates {
                gating += 1;
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > gating {
        println!("benchmark failures reported only; set DMPPI_ACCEPTANCE_STRICT to gate on them");
    }
    if gating == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
