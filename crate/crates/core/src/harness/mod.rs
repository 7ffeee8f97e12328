//! Closed-loop simulation of the true vehicle under scripted disturbances,
//! training-data collection, tracking metrics and experiment sweeps.

mod disturbance;
mod estimate;
mod output;
mod reference;
mod sweep;

pub use disturbance::{disturbance, roll_moment, side_force, Disturbance, DisturbanceCase, DisturbanceSpec};
pub use estimate::{
    estimate_disturbances, implied_force, implied_moment, normalized_rms_error, write_estimate_csv, EstimateReport,
    EstimateRow, ESTIMATE_COLUMNS, ESTIMATE_TRANSIENT,
};
pub use output::{run_csv_header, write_run_csv, write_run_summary, RunSummary};
pub use reference::{reference_state, Reference, Shape, TrajectoryProfile};
pub use sweep::{
    aggregate, run_sweep, sweep, write_sweep, ControllerMean, SweepGrid, SweepRow, SweepSummary,
};

use nalgebra::{Vector3, Vector4, Vector6};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::{make_controller, ControllerKind, SolverStats};
use crate::dynamics::{nominal_deriv, rk5_state_step, ControlInput, QuadrotorParams, State, RATE, VEL};
use crate::error::{Error, Result};
use crate::knode::{KnodeModel, Record, TrainingDataset};
use crate::l1::L1Config;
use crate::mpc::MpcSettings;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// True mass, kg.
    pub mass: f64,
    pub inertia: [f64; 3],
    /// Integration step, s.
    pub step: f64,
    /// Actuator thrust limit as a multiple of the true hover thrust.
    pub thrust_factor: f64,
    /// N m
    pub torque_limit: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            mass: 0.04,
            inertia: QuadrotorParams::DEFAULT_INERTIA,
            step: 0.002,
            thrust_factor: 2.0,
            torque_limit: 5e-3,
        }
    }
}

/// The simulated vehicle: true parameters and actuator limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plant {
    pub params: QuadrotorParams,
    pub u_min: Vector4<f64>,
    pub u_max: Vector4<f64>,
}

impl Plant {
    pub fn from_config(cfg: &PlantConfig) -> Result<Self> {
        let params = QuadrotorParams::new(cfg.mass, Vector3::from(cfg.inertia))?;
        if !(cfg.thrust_factor > 0.0) || !(cfg.torque_limit >= 0.0) {
            return Err(Error::Config("actuator limits must be positive".into()));
        }
        let tl = cfg.torque_limit;
        Ok(Self {
            params,
            u_min: Vector4::new(0.0, -tl, -tl, -tl),
            u_max: Vector4::new(cfg.thrust_factor * params.mass * params.gravity.z, tl, tl, tl),
        })
    }

    pub fn saturate(&self, u: &ControlInput) -> ControlInput {
        let v = u.to_vector();
        ControlInput::from_vector(&Vector4::from_fn(|i, _| v[i].clamp(self.u_min[i], self.u_max[i])))
    }
}

/// Advance the true vehicle by `h` with the input saturated by the actuators
/// and the disturbance evaluated at every integrator stage.
pub fn plant_step(x: &State, u: &ControlInput, spec: &DisturbanceSpec, plant: &Plant, t: f64, h: f64) -> Result<State> {
    let u = plant.saturate(u);
    let p = &plant.params;
    rk5_state_step(
        |tau, s| {
            let mut d = nominal_deriv(s, &u, p);
            let dist = disturbance(spec, tau, s);
            let accel = s.rotation() * dist.force / p.mass;
            let ang = dist.moment.component_div(&p.inertia);
            for i in 0..3 {
                d[VEL + i] += accel[i];
                d[RATE + i] += ang[i];
            }
            d
        },
        t,
        x,
        h,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub controller: ControllerKind,
    pub profile: TrajectoryProfile,
    pub disturbance: DisturbanceSpec,
    pub plant: PlantConfig,
    /// Mass the controllers believe, kg.
    pub believed_mass: f64,
    pub mpc: MpcSettings,
    pub l1: L1Config,
    /// s
    pub control_period: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            controller: ControllerKind::NominalMpc,
            profile: TrajectoryProfile::default(),
            disturbance: DisturbanceSpec::default(),
            plant: PlantConfig::default(),
            believed_mass: 0.03,
            mpc: MpcSettings::default(),
            l1: L1Config::default(),
            control_period: 0.01,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn believed_params(&self) -> Result<QuadrotorParams> {
        QuadrotorParams::new(self.believed_mass, Vector3::from(self.plant.inertia))
    }

    /// Plant substeps per control period.
    pub fn substeps(&self) -> Result<usize> {
        let ratio = self.control_period / self.plant.step;
        let n = ratio.round();
        if !(self.plant.step > 0.0) || n < 1.0 || (ratio - n).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "control period {} must be an integer multiple of the plant step {}",
                self.control_period, self.plant.step
            )));
        }
        Ok(n as usize)
    }

    pub fn control_steps(&self) -> usize {
        (self.profile.duration / self.control_period).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.disturbance.validate()?;
        Plant::from_config(&self.plant)?;
        self.believed_params()?;
        self.substeps()?;
        self.mpc.to_ocp(&self.believed_params()?)?;
        if self.controller.uses_l1() {
            self.l1.validate()?;
        }
        Ok(())
    }
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: State,
    /// Input applied by the actuators over the following period.
    pub u: ControlInput,
    pub x_ref: State,
    pub sigma_hat: Vector6<f64>,
    pub disturbance: Disturbance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Crashed { step: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rmse {
    pub position: f64,
    pub xy: f64,
    pub axes: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: RunConfig,
    pub series: Vec<Sample>,
    pub rmse: Rmse,
    pub stats: SolverStats,
    pub status: RunStatus,
    pub warnings: Vec<String>,
}

impl RunResult {
    pub fn crashed(&self) -> bool {
        matches!(self.status, RunStatus::Crashed { .. })
    }
}

/// RMS of position errors: full vector, horizontal plane and per axis.
pub fn rmse_of(errors: &[Vector3<f64>]) -> Result<Rmse> {
    if errors.is_empty() {
        return Err(Error::Precondition("RMSE of an empty series".into()));
    }
    let n = errors.len() as f64;
    let mut axes = [0.0; 3];
    for e in errors {
        for (a, c) in axes.iter_mut().zip(e.iter()) {
            *a += c * c;
        }
    }
    Ok(Rmse {
        position: ((axes[0] + axes[1] + axes[2]) / n).sqrt(),
        xy: ((axes[0] + axes[1]) / n).sqrt(),
        axes: axes.map(|a| (a / n).sqrt()),
    })
}

pub fn rmse(series: &[Sample]) -> Result<Rmse> {
    let errors: Vec<Vector3<f64>> = series.iter().map(|s| s.x.r - s.x_ref.r).collect();
    rmse_of(&errors)
}

/// Random input dither added during data collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Excitation {
    /// Half-width of the uniform thrust dither, N.
    pub thrust: f64,
    /// Half-width of the uniform torque dither, N m.
    pub torque: f64,
}

impl Default for Excitation {
    fn default() -> Self {
        Self { thrust: 0.1, torque: 2e-4 }
    }
}

impl Excitation {
    pub fn none() -> Self {
        Self { thrust: 0.0, torque: 0.0 }
    }
}

struct LoopOutput {
    result: RunResult,
    records: Vec<Record>,
}

fn run_loop(cfg: &RunConfig, model: Option<&KnodeModel>, excitation: Option<&Excitation>) -> Result<LoopOutput> {
    cfg.validate()?;
    let plant = Plant::from_config(&cfg.plant)?;
    let believed = cfg.believed_params()?;
    let ocp = cfg.mpc.to_ocp(&believed)?;
    let model = if cfg.controller.needs_model() { model.cloned() } else { None };
    let mut ctrl = make_controller(cfg.controller, believed, model, ocp.clone(), cfg.l1)?;
    let reference = Reference::new(cfg.profile)?;
    let substeps = cfg.substeps()?;
    let h = cfg.control_period / substeps as f64;
    let steps = cfg.control_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x = reference.state(0.0);
    let mut series = Vec::with_capacity(steps);
    let mut records = Vec::new();
    let mut status = RunStatus::Completed;

    for k in 0..steps {
        let t = k as f64 * cfg.control_period;
        let x_ref = reference.state(t);
        let window = reference.window(t, ocp.horizon, ocp.dt)?;
        let commanded = match ctrl.step(&x, &window) {
            Ok(u) => u,
            Err(e) => {
                status = RunStatus::Crashed { step: k, reason: e.to_string() };
                break;
            }
        };
        let mut u = commanded;
        if let Some(ex) = excitation {
            if ex.thrust > 0.0 {
                u.thrust += rng.random_range(-ex.thrust..ex.thrust);
            }
            if ex.torque > 0.0 {
                for i in 0..3 {
                    u.torque[i] += rng.random_range(-ex.torque..ex.torque);
                }
            }
        }
        let applied = plant.saturate(&u);
        series.push(Sample {
            t,
            x,
            u: applied,
            x_ref,
            sigma_hat: ctrl.sigma_hat(),
            disturbance: disturbance(&cfg.disturbance, t, &x),
        });
        let x_start = x;
        let mut failure = None;
        for s in 0..substeps {
            match plant_step(&x, &applied, &cfg.disturbance, &plant, t + s as f64 * h, h) {
                Ok(next) => x = next,
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        if let Some(reason) = failure {
            status = RunStatus::Crashed { step: k, reason };
            break;
        }
        if excitation.is_some() {
            records.push(Record { x: x_start, u: applied, x_next: x });
        }
    }

    let rmse = if series.is_empty() { Rmse::default() } else { rmse(&series)? };
    Ok(LoopOutput {
        result: RunResult {
            config: cfg.clone(),
            series,
            rmse,
            stats: ctrl.stats,
            status,
            warnings: ctrl.warnings,
        },
        records,
    })
}

/// Fly one configuration for the profile duration. Solver trouble is
/// counted in the statistics; a diverging plant ends the run as crashed.
pub fn run_closed_loop(cfg: &RunConfig, model: Option<&KnodeModel>) -> Result<RunResult> {
    Ok(run_loop(cfg, model, None)?.result)
}

/// Fly the nominal MPC on the true vehicle and record `(x_k, u_k, x_{k+1})`
/// at the control rate. `cfg.controller` and `cfg.disturbance` are
/// overridden.
pub fn collect_training_data(cfg: &RunConfig, excitation: &Excitation) -> Result<TrainingDataset> {
    let cfg = RunConfig {
        controller: ControllerKind::NominalMpc,
        disturbance: DisturbanceSpec::of(DisturbanceCase::None),
        ..cfg.clone()
    };
    let out = run_loop(&cfg, None, Some(excitation))?;
    if let RunStatus::Crashed { step, reason } = &out.result.status {
        return Err(Error::Divergence(format!("data collection crashed at step {step}: {reason}")));
    }
    let source = format!(
        "{} r={} v={} T={}",
        cfg.profile.shape.name(),
        cfg.profile.radius,
        cfg.profile.speed,
        cfg.profile.duration
    );
    TrainingDataset::new(out.records, cfg.control_period, source)
}
