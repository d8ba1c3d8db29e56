//! Frenet-frame ego and traffic dynamics.
//!
//! The ego is a clamped double integrator. Main-lane traffic follows an
//! IDM-family longitudinal law that also reacts to the merging ego: once the
//! ego is laterally engaged and longitudinally ahead, it is treated as a
//! second, virtual lead whose interaction is scaled by the driver's yield
//! factor. Traffic never moves laterally.

use serde::{Deserialize, Serialize};

use crate::mppi::Control;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    /// Longitudinal speed (m/s).
    pub v_s: f64,
    /// Lateral speed (m/s).
    pub v_d: f64,
    /// Station (m).
    pub s: f64,
    /// Lateral offset (m).
    pub d: f64,
}

impl VehicleState {
    pub fn new(v_s: f64, v_d: f64, s: f64, d: f64) -> Self {
        Self { v_s, v_d, s, d }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.v_s, self.v_d, self.s, self.d]
    }
}

/// Ego (index 0) plus traffic ordered rear-most first, lead last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedState {
    pub ego: VehicleState,
    pub traffic: Vec<VehicleState>,
}

impl StackedState {
    pub fn n_traffic(&self) -> usize {
        self.traffic.len()
    }

    /// Flattened `[ego, traffic_1, ..., traffic_nv]`, four channels each.
    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(&self.ego)
            .chain(&self.traffic)
            .flat_map(|v| v.as_array())
            .collect()
    }

    pub fn is_ordered(&self) -> bool {
        self.traffic.windows(2).all(|w| w[0].s < w[1].s)
    }
}

/// Additive process noise for one step. Traffic vehicles only receive noise
/// on their longitudinal channels, which keeps their lateral state fixed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Disturbance {
    pub ego: VehicleState,
    pub traffic: Vec<LongitudinalNoise>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LongitudinalNoise {
    pub v_s: f64,
    pub s: f64,
}

impl Disturbance {
    pub fn zeros(n_traffic: usize) -> Self {
        Self {
            ego: VehicleState::default(),
            traffic: vec![LongitudinalNoise::default(); n_traffic],
        }
    }
}

/// Hidden behaviour parameters of one traffic driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    /// Desired speed v0 (m/s).
    pub desired_speed: f64,
    /// Time headway T (s).
    pub time_headway: f64,
    /// Maximum acceleration (m/s²).
    pub max_accel: f64,
    /// Comfortable deceleration b (m/s²).
    pub comfort_decel: f64,
    /// Jam distance s0 (m).
    pub min_gap: f64,
    /// Willingness to yield to a merging vehicle, in [0, 1].
    pub yield_factor: f64,
}

pub const DRIVER_PARAM_FIELDS: [&str; 6] = [
    "desired_speed",
    "time_headway",
    "max_accel",
    "comfort_decel",
    "min_gap",
    "yield_factor",
];

impl DriverParams {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.desired_speed,
            self.time_headway,
            self.max_accel,
            self.comfort_decel,
            self.min_gap,
            self.yield_factor,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            desired_speed: a[0],
            time_headway: a[1],
            max_accel: a[2],
            comfort_decel: a[3],
            min_gap: a[4],
            yield_factor: a[5],
        }
    }

    pub fn is_valid(&self) -> bool {
        let a = self.to_array();
        a[..5].iter().all(|v| v.is_finite() && *v > 0.0) && (0.0..=1.0).contains(&self.yield_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicLimits {
    pub lon_accel_min: f64,
    pub lon_accel_max: f64,
    pub lat_accel_min: f64,
    pub lat_accel_max: f64,
    /// Step length (s).
    pub dt: f64,
}

impl Default for KinematicLimits {
    fn default() -> Self {
        Self {
            lon_accel_min: -4.0,
            lon_accel_max: 3.0,
            lat_accel_min: -2.0,
            lat_accel_max: 2.0,
            dt: 0.1,
        }
    }
}

impl KinematicLimits {
    pub fn is_valid(&self) -> bool {
        self.lon_accel_min < self.lon_accel_max && self.lat_accel_min < self.lat_accel_max && self.dt > 0.0
    }
}

/// Constants of the traffic driver law that are not per-driver parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverModel {
    /// Bumper-to-bumper gaps subtract this from the centre distance (m).
    pub vehicle_length: f64,
    /// Hardest braking a traffic driver applies (m/s², positive).
    pub emergency_decel: f64,
    /// Ego counts as in-lane when |d_ego − d_self| is below this (m).
    pub lane_engage_band: f64,
    /// Ego on the ramp counts as engaged once its offset exceeds this (m).
    pub ramp_engage_offset: f64,
    /// Lateral boundary between ramp (below) and main lane (above) (m).
    pub ramp_boundary: f64,
}

impl Default for DriverModel {
    fn default() -> Self {
        Self {
            vehicle_length: 4.5,
            emergency_decel: 6.0,
            lane_engage_band: 2.0,
            ramp_engage_offset: -2.5,
            ramp_boundary: -1.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficModel {
    pub limits: KinematicLimits,
    pub driver: DriverModel,
}

/// Clamping σ: clip each axis to its bounds, then raise the longitudinal
/// command so the ego speed stays nonnegative over the step.
pub fn clamp_ego(ego: &VehicleState, u: &Control, lim: &KinematicLimits) -> Control {
    let lon = u.x.clamp(lim.lon_accel_min, lim.lon_accel_max);
    let lat = u.y.clamp(lim.lat_accel_min, lim.lat_accel_max);
    let floor = -ego.v_s / lim.dt;
    Control::new(lon.max(floor), lat)
}

/// Whether the ego currently acts as a virtual lead for `me`. An ego that
/// still overlaps `me` longitudinally is alongside, not ahead.
pub fn ego_engaged(me: &VehicleState, ego: &VehicleState, driver: &DriverModel) -> bool {
    if ego.s - me.s <= driver.vehicle_length {
        return false;
    }
    let in_lane = (ego.d - me.d).abs() < driver.lane_engage_band;
    let on_ramp = ego.d < driver.ramp_boundary;
    in_lane || (on_ramp && ego.d > driver.ramp_engage_offset)
}

#[inline]
fn desired_gap(v: f64, closing_speed: f64, p: &DriverParams) -> f64 {
    let dynamic = v * p.time_headway + v * closing_speed / (2.0 * (p.max_accel * p.comfort_decel).sqrt());
    p.min_gap + dynamic.max(0.0)
}

/// Longitudinal acceleration of a traffic driver. `lead` is the next vehicle
/// ahead in the main lane, or `None` for the front-most vehicle.
pub fn driver_accel(
    me: &VehicleState,
    ego: &VehicleState,
    lead: Option<&VehicleState>,
    p: &DriverParams,
    driver: &DriverModel,
) -> f64 {
    let v = me.v_s;
    let free = 1.0 - (v / p.desired_speed).powi(4);
    let mut deficit = 0.0f64;
    if let Some(lead) = lead {
        let gap = lead.s - me.s - driver.vehicle_length;
        if gap <= 0.0 {
            return -driver.emergency_decel;
        }
        deficit = (desired_gap(v, v - lead.v_s, p) / gap).powi(2);
    }
    if ego_engaged(me, ego, driver) {
        let gap = ego.s - me.s - driver.vehicle_length;
        let reaction = p.yield_factor * (desired_gap(v, v - ego.v_s, p) / gap).powi(2);
        deficit = deficit.max(reaction);
    }
    (p.max_accel * (free - deficit)).clamp(-driver.emergency_decel, p.max_accel)
}

/// One step of the stacked dynamics into `out`. Returns the clamped ego
/// acceleration that was applied.
///
/// Positions integrate the current velocity, velocities integrate the
/// acceleration; traffic accelerations are floored so no vehicle reverses.
pub fn step_into(
    x: &StackedState,
    u: &Control,
    params: &[DriverParams],
    w: Option<&Disturbance>,
    model: &TrafficModel,
    out: &mut StackedState,
) -> Control {
    let dt = model.limits.dt;
    let n = x.traffic.len();
    debug_assert_eq!(params.len(), n);
    let acc = clamp_ego(&x.ego, u, &model.limits);
    out.ego = VehicleState {
        v_s: x.ego.v_s + dt * acc.x,
        v_d: x.ego.v_d + dt * acc.y,
        s: x.ego.s + dt * x.ego.v_s,
        d: x.ego.d + dt * x.ego.v_d,
    };
    out.traffic.resize(n, VehicleState::default());
    for m in 0..n {
        let me = &x.traffic[m];
        let lead = x.traffic.get(m + 1);
        let a = driver_accel(me, &x.ego, lead, &params[m], &model.driver).max(-me.v_s.max(0.0) / dt);
        out.traffic[m] = VehicleState {
            v_s: me.v_s + dt * a,
            v_d: me.v_d,
            s: me.s + dt * me.v_s,
            d: me.d,
        };
    }
    if let Some(w) = w {
        out.ego.v_s += w.ego.v_s;
        out.ego.v_d += w.ego.v_d;
        out.ego.s += w.ego.s;
        out.ego.d += w.ego.d;
        for (v, n) in out.traffic.iter_mut().zip(&w.traffic) {
            v.v_s += n.v_s;
            v.s += n.s;
        }
    }
    acc
}

pub fn step(
    x: &StackedState,
    u: &Control,
    params: &[DriverParams],
    w: Option<&Disturbance>,
    model: &TrafficModel,
) -> StackedState {
    let mut out = x.clone();
    step_into(x, u, params, w, model, &mut out);
    out
}

/// Calls `visit(k, x_{t+k+1})` along the lifted trajectory without storing it.
pub fn rollout_each<F: FnMut(usize, &StackedState)>(
    x_t: &StackedState,
    controls: &[Control],
    params: &[DriverParams],
    w_seq: Option<&[Disturbance]>,
    model: &TrafficModel,
    mut visit: F,
) {
    if let Some(w) = w_seq {
        assert_eq!(w.len(), controls.len(), "disturbance sequence length");
    }
    let mut cur = x_t.clone();
    let mut next = x_t.clone();
    for (k, u) in controls.iter().enumerate() {
        step_into(&cur, u, params, w_seq.map(|w| &w[k]), model, &mut next);
        visit(k, &next);
        std::mem::swap(&mut cur, &mut next);
    }
}

/// Trajectory `[x_{t+1}, ..., x_{t+N}]`.
pub fn rollout(
    x_t: &StackedState,
    controls: &[Control],
    params: &[DriverParams],
    w_seq: Option<&[Disturbance]>,
    model: &TrafficModel,
) -> Vec<StackedState> {
    let mut traj = Vec::with_capacity(controls.len());
    rollout_each(x_t, controls, params, w_seq, model, |_, x| traj.push(x.clone()));
    traj
}
