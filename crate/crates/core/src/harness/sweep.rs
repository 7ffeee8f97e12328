use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_closed_loop, DisturbanceCase, DisturbanceSpec, RunConfig, Shape, TrajectoryProfile};
use crate::controllers::ControllerKind;
use crate::error::{Error, Result};
use crate::knode::KnodeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub shapes: Vec<Shape>,
    pub radii: Vec<f64>,
    pub speeds: Vec<f64>,
    pub cases: Vec<DisturbanceCase>,
    pub controllers: Vec<ControllerKind>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            shapes: vec![Shape::Circle, Shape::Lemniscate],
            radii: vec![3.0, 6.0],
            speeds: vec![0.5, 1.0, 2.0],
            cases: vec![DisturbanceCase::Case1, DisturbanceCase::Case2, DisturbanceCase::Case3],
            controllers: ControllerKind::ALL.to_vec(),
        }
    }
}

impl SweepGrid {
    /// One circle at 3 m and 1 m/s under every case and controller.
    pub fn smoke() -> Self {
        Self { shapes: vec![Shape::Circle], radii: vec![3.0], speeds: vec![1.0], ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.shapes.len() * self.radii.len() * self.speeds.len() * self.cases.len() * self.controllers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Expand into run configurations ordered shape, radius, speed, case,
    /// controller (outermost first).
    pub fn configs(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &shape in &self.shapes {
            for &radius in &self.radii {
                for &speed in &self.speeds {
                    for &case in &self.cases {
                        for &controller in &self.controllers {
                            out.push(RunConfig {
                                controller,
                                profile: TrajectoryProfile { shape, radius, speed, ..base.profile },
                                disturbance: DisturbanceSpec { case, ..base.disturbance },
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub controller: ControllerKind,
    pub shape: Shape,
    pub radius: f64,
    pub speed: f64,
    pub case: DisturbanceCase,
    /// NaN when the run failed before producing samples.
    pub rmse_position: f64,
    pub rmse_xy: f64,
    pub crashed: bool,
    pub error: Option<String>,
    pub solves: usize,
    pub converged: usize,
    pub mean_iterations: f64,
}

impl SweepRow {
    pub fn failed(&self) -> bool {
        self.crashed || self.error.is_some()
    }
}

fn row_for(index: usize, cfg: &RunConfig, model: Option<&KnodeModel>) -> SweepRow {
    let mut row = SweepRow {
        index,
        controller: cfg.controller,
        shape: cfg.profile.shape,
        radius: cfg.profile.radius,
        speed: cfg.profile.speed,
        case: cfg.disturbance.case,
        rmse_position: f64::NAN,
        rmse_xy: f64::NAN,
        crashed: false,
        error: None,
        solves: 0,
        converged: 0,
        mean_iterations: 0.0,
    };
    match run_closed_loop(cfg, model) {
        Ok(res) => {
            row.rmse_position = res.rmse.position;
            row.rmse_xy = res.rmse.xy;
            row.crashed = res.crashed();
            row.solves = res.stats.solves;
            row.converged = res.stats.converged;
            if res.stats.solves > 0 {
                row.mean_iterations = res.stats.total_iterations as f64 / res.stats.solves as f64;
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Run every configuration on a pool of `jobs` threads. Rows come back in
/// configuration order; a failing run marks its row instead of aborting.
pub fn sweep(configs: &[RunConfig], model: Option<&KnodeModel>, jobs: usize) -> Result<Vec<SweepRow>> {
    if configs.is_empty() {
        return Err(Error::Precondition("empty sweep".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(format!("thread pool: {e}"))))?;
    Ok(pool.install(|| configs.par_iter().enumerate().map(|(i, c)| row_for(i, c, model)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerMean {
    pub controller: ControllerKind,
    /// Mean position RMSE over completed rows, m.
    pub mean_rmse: f64,
    pub runs: usize,
    pub failures: usize,
    /// Mean position RMSE per disturbance case.
    pub per_case: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub controllers: Vec<ControllerMean>,
    /// `(mean_bench - mean_int) / mean_bench` for every other controller.
    pub int_improvement: BTreeMap<String, f64>,
    /// Improvement of the Int variant over the best of the other controllers.
    pub int_improvement_over_best: Option<f64>,
    pub failures: usize,
}

impl SweepSummary {
    pub fn mean(&self, kind: ControllerKind) -> Option<f64> {
        self.controllers.iter().find(|c| c.controller == kind).map(|c| c.mean_rmse)
    }

    pub fn case_mean(&self, kind: ControllerKind, case: DisturbanceCase) -> Option<f64> {
        self.controllers
            .iter()
            .find(|c| c.controller == kind)
            .and_then(|c| c.per_case.get(case.name()).copied())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn improvement(mean_bench: f64, mean_int: f64) -> f64 {
    (mean_bench - mean_int) / mean_bench
}

/// Mean RMSE per controller and case over rows that completed.
pub fn aggregate(rows: &[SweepRow]) -> SweepSummary {
    let mut kinds: Vec<ControllerKind> = rows.iter().map(|r| r.controller).collect();
    kinds.sort();
    kinds.dedup();
    let controllers: Vec<ControllerMean> = kinds
        .iter()
        .map(|&k| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.controller == k).collect();
            let ok: Vec<f64> = mine.iter().filter(|r| !r.failed()).map(|r| r.rmse_position).collect();
            let mut cases: Vec<DisturbanceCase> = mine.iter().map(|r| r.case).collect();
            cases.sort();
            cases.dedup();
            let per_case = cases
                .into_iter()
                .map(|c| {
                    let v: Vec<f64> =
                        mine.iter().filter(|r| r.case == c && !r.failed()).map(|r| r.rmse_position).collect();
                    (c.name().to_string(), mean(&v))
                })
                .collect();
            ControllerMean {
                controller: k,
                mean_rmse: mean(&ok),
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                per_case,
            }
        })
        .collect();

    let int = controllers.iter().find(|c| c.controller == ControllerKind::L1KnodeInt).map(|c| c.mean_rmse);
    let mut int_improvement = BTreeMap::new();
    let mut best: Option<f64> = None;
    if let Some(mi) = int {
        for c in controllers.iter().filter(|c| c.controller != ControllerKind::L1KnodeInt) {
            int_improvement.insert(c.controller.name().to_string(), improvement(c.mean_rmse, mi));
            best = Some(best.map_or(c.mean_rmse, |b: f64| b.min(c.mean_rmse)));
        }
    }
    SweepSummary {
        int_improvement_over_best: int.zip(best).map(|(mi, b)| improvement(b, mi)),
        controllers,
        int_improvement,
        failures: rows.iter().filter(|r| r.failed()).count(),
    }
}

/// Expand the grid over `base` and run it.
pub fn run_sweep(
    grid: &SweepGrid,
    base: &RunConfig,
    model: Option<&KnodeModel>,
    jobs: usize,
) -> Result<(Vec<SweepRow>, SweepSummary)> {
    let rows = sweep(&grid.configs(base), model, jobs)?;
    let summary = aggregate(&rows);
    Ok((rows, summary))
}

#[derive(Serialize)]
struct SweepIndex<'a> {
    runs: usize,
    table: &'a str,
    grid: &'a SweepGrid,
    summary: &'a SweepSummary,
    rows: &'a [SweepRow],
}

/// Write `sweep.csv` and `sweep.json` into `dir`.
pub fn write_sweep(dir: &Path, grid: &SweepGrid, rows: &[SweepRow], summary: &SweepSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record([
        "index",
        "controller",
        "shape",
        "radius",
        "speed",
        "case",
        "rmse_position",
        "rmse_xy",
        "status",
        "solves",
        "converged",
        "mean_iterations",
    ])?;
    for r in rows {
        let status = match (&r.error, r.crashed) {
            (Some(e), _) => format!("error: {e}"),
            (None, true) => "crashed".to_string(),
            (None, false) => "ok".to_string(),
        };
        w.write_record([
            r.index.to_string(),
            r.controller.name().to_string(),
            r.shape.name().to_string(),
            r.radius.to_string(),
            r.speed.to_string(),
            r.case.name().to_string(),
            r.rmse_position.to_string(),
            r.rmse_xy.to_string(),
            status,
            r.solves.to_string(),
            r.converged.to_string(),
            r.mean_iterations.to_string(),
        ])?;
    }
    w.flush()?;
    let index = SweepIndex { runs: rows.len(), table: "sweep.csv", grid, summary, rows };
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(controller: ControllerKind, case: DisturbanceCase, rmse: f64) -> SweepRow {
        SweepRow {
            index: 0,
            controller,
            shape: Shape::Circle,
            radius: 3.0,
            speed: 1.0,
            case,
            rmse_position: rmse,
            rmse_xy: rmse,
            crashed: false,
            error: None,
            solves: 1,
            converged: 1,
            mean_iterations: 1.0,
        }
    }

    #[test]
    fn default_grid_has_180_runs() {
        let g = SweepGrid::default();
        assert_eq!(g.len(), 180);
        assert_eq!(g.configs(&RunConfig::default()).len(), 180);
        assert_eq!(SweepGrid::smoke().len(), 15);
    }

    #[test]
    fn aggregation_identity_and_improvement_formula() {
        use ControllerKind::*;
        use DisturbanceCase::*;
        let rows = vec![
            row(NominalMpc, Case1, 0.3),
            row(NominalMpc, Case2, 0.5),
            row(L1KnodeInt, Case1, 0.1),
            row(L1KnodeInt, Case2, 0.2),
        ];
        let s = aggregate(&rows);
        let mn = s.mean(NominalMpc).unwrap();
        assert!((mn - 0.4).abs() < 1e-12);
        assert!((s.mean(L1KnodeInt).unwrap() - 0.15).abs() < 1e-12);
        assert!((s.case_mean(NominalMpc, Case2).unwrap() - 0.5).abs() < 1e-12);
        let imp = s.int_improvement["nominal-mpc"];
        assert_eq!(imp, (mn - s.mean(L1KnodeInt).unwrap()) / mn);
        assert_eq!(s.int_improvement_over_best, Some(imp));
    }

    #[test]
    fn failed_rows_are_excluded_and_counted() {
        let mut bad = row(ControllerKind::L1Mpc, DisturbanceCase::Case1, f64::NAN);
        bad.crashed = true;
        let rows = vec![bad, row(ControllerKind::L1Mpc, DisturbanceCase::Case1, 0.2)];
        let s = aggregate(&rows);
        assert_eq!(s.failures, 1);
        assert_eq!(s.mean(ControllerKind::L1Mpc), Some(0.2));
    }

    #[test]
    fn empty_sweep_rejected() {
        assert!(sweep(&[], None, 1).is_err());
    }
}
