//! Merge-task costs: quadratic tracking of the ego plus indicator penalties.

use serde::{Deserialize, Serialize};

use crate::traffic::{StackedState, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadGeometry {
    pub main_center: f64,
    pub ramp_center: f64,
    pub lane_width: f64,
    /// Station where the ramp starts running alongside the main lane (m).
    pub soft_nose: f64,
    /// Last station at which the ramp exists (m).
    pub ramp_end: f64,
}

impl Default for RoadGeometry {
    fn default() -> Self {
        Self {
            main_center: 0.0,
            ramp_center: -3.5,
            lane_width: 3.5,
            soft_nose: 0.0,
            ramp_end: 300.0,
        }
    }
}

impl RoadGeometry {
    pub fn in_main_lane(&self, d: f64) -> bool {
        (d - self.main_center).abs() < 0.5 * self.lane_width
    }
}

/// Axis-aligned vehicle rectangle in the Frenet frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
    /// Edge-to-edge clearance below which two vehicles count as colliding.
    pub margin: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Self {
            length: 4.5,
            width: 1.8,
            margin: 0.2,
        }
    }
}

impl Footprint {
    /// Edge gaps `(longitudinal, lateral)` between two footprints, each
    /// clipped at zero.
    pub fn edge_gaps(&self, a: &VehicleState, b: &VehicleState) -> (f64, f64) {
        (
            ((a.s - b.s).abs() - self.length).max(0.0),
            ((a.d - b.d).abs() - self.width).max(0.0),
        )
    }

    pub fn overlaps(&self, a: &VehicleState, b: &VehicleState) -> bool {
        (a.s - b.s).abs() < self.length + self.margin && (a.d - b.d).abs() < self.width + self.margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// Goal longitudinal speed v^g (m/s).
    pub goal_speed: f64,
    pub q_vs: f64,
    pub q_vd: f64,
    pub q_s: f64,
    pub q_d: f64,
    pub q_d_terminal: f64,
    /// Penalty per active indicator.
    pub q_penalty: f64,
    pub road: RoadGeometry,
    pub footprint: Footprint,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            goal_speed: 10.0,
            q_vs: 10.0,
            q_vd: 0.1,
            q_s: 0.0,
            q_d: 10.0,
            q_d_terminal: 10_000.0,
            q_penalty: 1_000_000.0,
            road: RoadGeometry::default(),
            footprint: Footprint::default(),
        }
    }
}

impl CostConfig {
    pub fn is_valid(&self) -> bool {
        let q = [self.q_vs, self.q_vd, self.q_s, self.q_d, self.q_d_terminal];
        q.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.q_penalty > 0.0
            && self.road.ramp_end > self.road.soft_nose
            && self.road.lane_width > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Indicators {
    pub collision: bool,
    pub off_road: bool,
    pub invalid_merge: bool,
}

impl Indicators {
    pub fn count(&self) -> u32 {
        self.collision as u32 + self.off_road as u32 + self.invalid_merge as u32
    }

    pub fn any(&self) -> bool {
        self.count() > 0
    }
}

pub fn indicators(x: &StackedState, road: &RoadGeometry, fp: &Footprint) -> Indicators {
    let ego = &x.ego;
    let collision = x.traffic.iter().any(|v| fp.overlaps(ego, v));

    let half = 0.5 * fp.width;
    let (lo, hi) = if ego.s <= road.ramp_end {
        (
            road.ramp_center - 0.5 * road.lane_width,
            road.main_center + 0.5 * road.lane_width,
        )
    } else {
        (
            road.main_center - 0.5 * road.lane_width,
            road.main_center + 0.5 * road.lane_width,
        )
    };
    let off_road = ego.d - half < lo || ego.d + half > hi;

    let invalid_merge = match (x.traffic.first(), x.traffic.last()) {
        (Some(rear), Some(lead)) => road.in_main_lane(ego.d) && !(rear.s < ego.s && ego.s < lead.s),
        _ => false,
    };

    Indicators {
        collision,
        off_road,
        invalid_merge,
    }
}

#[inline]
fn penalty(x: &StackedState, cfg: &CostConfig) -> f64 {
    cfg.q_penalty * indicators(x, &cfg.road, &cfg.footprint).count() as f64
}

/// `(x − x^g)ᵀ Q (x − x^g)` on the ego channels plus indicator penalties.
pub fn stage_cost(x: &StackedState, cfg: &CostConfig) -> f64 {
    let e = &x.ego;
    cfg.q_vs * (e.v_s - cfg.goal_speed).powi(2)
        + cfg.q_vd * e.v_d.powi(2)
        + cfg.q_s * e.s.powi(2)
        + cfg.q_d * e.d.powi(2)
        + penalty(x, cfg)
}

pub fn terminal_cost(x: &StackedState, cfg: &CostConfig) -> f64 {
    cfg.q_d_terminal * x.ego.d.powi(2) + penalty(x, cfg)
}

/// Terminal cost of the last state plus stage costs of all earlier states.
pub fn trajectory_cost(traj: &[StackedState], cfg: &CostConfig) -> f64 {
    match traj.split_last() {
        Some((last, rest)) => terminal_cost(last, cfg) + rest.iter().map(|x| stage_cost(x, cfg)).sum::<f64>(),
        None => 0.0,
    }
}
