use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Rmse, RunConfig, RunResult, RunStatus};
use crate::controllers::SolverStats;
use crate::error::Result;

const STATE_COLS: [&str; 13] = ["px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz"];

/// Column names of a run CSV: time, state, input, reference, σ̂ and the
/// true body-frame disturbance.
pub fn run_csv_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(STATE_COLS.iter().map(|c| c.to_string()));
    h.extend(["thrust", "tau_x", "tau_y", "tau_z"].iter().map(|c| c.to_string()));
    h.extend(STATE_COLS.iter().map(|c| format!("ref_{c}")));
    h.extend((0..6).map(|i| format!("sigma_{i}")));
    h.extend(["dist_fx", "dist_fy", "dist_fz", "dist_mx", "dist_my", "dist_mz"].iter().map(|c| c.to_string()));
    h
}

pub fn write_run_csv(result: &RunResult, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(run_csv_header())?;
    for s in &result.series {
        let mut row = Vec::with_capacity(43);
        row.push(s.t);
        row.extend(s.x.to_vector().iter());
        row.extend(s.u.to_vector().iter());
        row.extend(s.x_ref.to_vector().iter());
        row.extend(s.sigma_hat.iter());
        row.extend(s.disturbance.as_array());
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub rmse: Rmse,
    pub stats: SolverStats,
    pub status: RunStatus,
    pub steps: usize,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn of(result: &RunResult) -> Self {
        Self {
            config: result.config.clone(),
            rmse: result.rmse,
            stats: result.stats,
            status: result.status.clone(),
            steps: result.series.len(),
            warnings: result.warnings.clone(),
        }
    }
}

pub fn write_run_summary(result: &RunResult, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(&RunSummary::of(result))?)?;
    Ok(())
}
