//! On-disk artifacts: trajectory and belief CSV logs, Monte Carlo reports.
//!
//! Column layouts are fixed; the plotting scripts read them by header name.
//!
//! Trajectory log: `t`, then for vehicle `i` (0 is the ego, `1..=n_v` the
//! traffic from rear to front) `v_s_i, v_d_i, s_i, d_i`, then the ego
//! acceleration applied from that row's state `u_s, u_d` (NaN on the last
//! row), then the indicator flags `collision, off_road, invalid_merge` as 0/1.
//!
//! Belief log: `t`, then for traffic vehicle `m` the posterior mean of every
//! driver parameter as `<field>_m`, then `entropy`.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::belief::BeliefParticles;
use crate::cost::Indicators;
use crate::mppi::Control;
use crate::sim::{MonteCarloReport, TrialSummary};
use crate::traffic::{StackedState, DRIVER_PARAM_FIELDS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    n_traffic: usize,
    rows: Vec<Vec<f64>>,
}

impl TrajectoryLog {
    pub fn new(n_traffic: usize) -> Self {
        Self {
            n_traffic,
            rows: Vec::new(),
        }
    }

    pub fn header(n_traffic: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        for i in 0..=n_traffic {
            for f in ["v_s", "v_d", "s", "d"] {
                h.push(format!("{f}_{i}"));
            }
        }
        h.extend(["u_s", "u_d", "collision", "off_road", "invalid_merge"].map(String::from));
        h
    }

    pub fn push(&mut self, t: f64, x: &StackedState, flags: Indicators) {
        assert_eq!(x.n_traffic(), self.n_traffic);
        let mut row = vec![t];
        row.extend(x.to_vec());
        row.extend([f64::NAN, f64::NAN]);
        row.extend([flags.collision, flags.off_road, flags.invalid_merge].map(|b| if b { 1.0 } else { 0.0 }));
        self.rows.push(row);
    }

    /// Records the control applied from the most recent row's state.
    pub fn set_last_control(&mut self, u: Control) {
        let at = 1 + 4 * (self.n_traffic + 1);
        if let Some(row) = self.rows.last_mut() {
            row[at] = u.x;
            row[at + 1] = u.y;
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        write_table(w, &Self::header(self.n_traffic), &self.rows, 3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefLog {
    n_traffic: usize,
    rows: Vec<Vec<f64>>,
}

impl BeliefLog {
    pub fn new(n_traffic: usize) -> Self {
        Self {
            n_traffic,
            rows: Vec::new(),
        }
    }

    pub fn header(n_traffic: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        for m in 1..=n_traffic {
            for f in DRIVER_PARAM_FIELDS {
                h.push(format!("{f}_{m}"));
            }
        }
        h.push("entropy".into());
        h
    }

    pub fn push(&mut self, t: f64, b: &BeliefParticles) {
        assert_eq!(b.n_vehicles(), self.n_traffic);
        let mut row = vec![t];
        for p in b.mean_params() {
            row.extend(p.to_array());
        }
        row.push(b.entropy());
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        write_table(w, &Self::header(self.n_traffic), &self.rows, 0)
    }
}

/// The last `n_flags` columns are written as integers.
fn write_table<W: Write>(w: W, header: &[String], rows: &[Vec<f64>], n_flags: usize) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for row in rows {
        let split = row.len() - n_flags;
        let record = row[..split]
            .iter()
            .map(|v| v.to_string())
            .chain(row[split..].iter().map(|v| format!("{}", *v as u8)));
        out.write_record(record)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")
}

/// Summary of one trial as written by the `run` command.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a> {
    #[serde(flatten)]
    pub trial: &'a TrialSummary,
    pub total_rollouts: u64,
    pub mean_plan_ms: f64,
}

/// Markdown table with one column per planner and one row per metric.
pub fn render_report_table(report: &MonteCarloReport) -> String {
    let mut s = format!("# Monte Carlo merge results\n\n{} paired trials, base seed {}.\n\n", report.n_trials, report.base_seed);
    s.push_str("| Metric |");
    for p in &report.planners {
        s.push_str(&format!(" {} |", p.planner));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(report.planners.len()));
    s.push('\n');
    let rows: [(&str, fn(&crate::sim::PlannerSummary) -> f64, usize); 5] = [
        ("Success Rate", |p| p.success_rate, 2),
        ("Collision Rate", |p| p.collision_rate, 2),
        ("Avg. Min Long. Distance (m)", |p| p.avg_min_longitudinal_gap, 2),
        ("Avg. Min Lat. Distance (m)", |p| p.avg_min_lateral_gap, 2),
        ("Avg. Max Acceleration (m/s^2)", |p| p.avg_max_accel, 2),
    ];
    for (name, f, prec) in rows {
        s.push_str(&format!("| {name} |"));
        for p in &report.planners {
            s.push_str(&format!(" {:.*} |", prec, f(p)));
        }
        s.push('\n');
    }
    s
}

pub fn write_report(dir: &Path, report: &MonteCarloReport) -> io::Result<()> {
    write_json(&dir.join("report.json"), report)?;
    std::fs::write(dir.join("report.md"), render_report_table(report))
}
