use serde::{Deserialize, Serialize};

use super::{run_closed_loop, DisturbanceCase, DisturbanceSpec, RunConfig, RunResult};
use crate::error::{Error, Result};
use crate::knode::KnodeModel;

/// Estimation traces are scored after this transient, s.
pub const ESTIMATE_TRANSIENT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub t: f64,
    pub true_moment: f64,
    pub est_moment: f64,
    pub true_force: f64,
    pub est_force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub rows: Vec<EstimateRow>,
    /// Normalized RMS error of the roll-moment estimate after the transient.
    pub moment_error: f64,
    /// Normalized RMS error of the side-force estimate after the transient.
    pub force_error: f64,
}

/// `||est - truth|| / ||truth||` over samples at or after `t0`.
pub fn normalized_rms_error(t: &[f64], truth: &[f64], est: &[f64], t0: f64) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((&ti, &a), &b) in t.iter().zip(truth).zip(est) {
        if ti >= t0 {
            num += (b - a) * (b - a);
            den += a * a;
        }
    }
    if !(den > 0.0) {
        return Err(Error::Precondition("reference trace is identically zero".into()));
    }
    Ok((num / den).sqrt())
}

/// Roll moment implied by the estimate, N m.
pub fn implied_moment(run: &RunResult) -> Vec<f64> {
    run.series.iter().map(|s| s.sigma_hat[1]).collect()
}

/// Body-y force implied by the estimate, N. The estimate is expressed
/// through the believed mass, so it is rescaled to the true mass.
pub fn implied_force(run: &RunResult) -> Vec<f64> {
    let ratio = run.config.plant.mass / run.config.believed_mass;
    run.series.iter().map(|s| s.sigma_hat[5] * ratio).collect()
}

/// Fly the roll moment and the side force in two separate runs and compare
/// the uncertainty estimate with each.
pub fn estimate_disturbances(base: &RunConfig, model: Option<&KnodeModel>) -> Result<(EstimateReport, RunResult, RunResult)> {
    if !base.controller.uses_l1() {
        return Err(Error::Config(format!("controller {} has no uncertainty estimate", base.controller)));
    }
    let with = |case| RunConfig { disturbance: DisturbanceSpec { case, ..base.disturbance }, ..base.clone() };
    let moment_run = run_closed_loop(&with(DisturbanceCase::Case1), model)?;
    let force_run = run_closed_loop(&with(DisturbanceCase::SideForce), model)?;
    for r in [&moment_run, &force_run] {
        if r.crashed() {
            return Err(Error::Divergence(format!("estimation run crashed: {:?}", r.status)));
        }
    }
    let t: Vec<f64> = moment_run.series.iter().map(|s| s.t).collect();
    let true_m: Vec<f64> = moment_run.series.iter().map(|s| s.disturbance.moment.x).collect();
    let true_f: Vec<f64> = force_run.series.iter().map(|s| s.disturbance.force.y).collect();
    let est_m = implied_moment(&moment_run);
    let est_f = implied_force(&force_run);
    let rows = (0..t.len())
        .map(|i| EstimateRow {
            t: t[i],
            true_moment: true_m[i],
            est_moment: est_m[i],
            true_force: true_f[i],
            est_force: est_f[i],
        })
        .collect();
    let report = EstimateReport {
        rows,
        moment_error: normalized_rms_error(&t, &true_m, &est_m, ESTIMATE_TRANSIENT)?,
        force_error: normalized_rms_error(&t, &true_f, &est_f, ESTIMATE_TRANSIENT)?,
    };
    Ok((report, moment_run, force_run))
}

pub const ESTIMATE_COLUMNS: [&str; 5] = ["t", "true_moment_x", "est_moment_x", "true_force_y", "est_force_y"];

pub fn write_estimate_csv(report: &EstimateReport, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ESTIMATE_COLUMNS)?;
    for r in &report.rows {
        w.write_record([r.t, r.true_moment, r.est_moment, r.true_force, r.est_force].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
