//! Per-step orchestration of the five controllers behind one interface.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, Dynamics, InputJacobian, QuadrotorParams, State, StateDeriv, StateJacobian};
use crate::error::{Error, Result};
use crate::knode::KnodeModel;
use crate::l1::{
    adaptation_update, augment_deriv, build_g, lpf_step, predictor_step, uncertainty_to_accels,
    L1Config, L1State, UncertaintyAccels,
};
use crate::mpc::{discretize, solve_ocp, warm_start_shift, OcpConfig, OcpSolution, ReferenceWindow, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    NominalMpc,
    KnodeMpc,
    L1Mpc,
    L1KnodeDirect,
    L1KnodeInt,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::NominalMpc,
        ControllerKind::KnodeMpc,
        ControllerKind::L1Mpc,
        ControllerKind::L1KnodeDirect,
        ControllerKind::L1KnodeInt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::NominalMpc => "nominal-mpc",
            ControllerKind::KnodeMpc => "knode-mpc",
            ControllerKind::L1Mpc => "l1-mpc",
            ControllerKind::L1KnodeDirect => "l1-knode-direct",
            ControllerKind::L1KnodeInt => "l1-knode-int",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, ControllerKind::KnodeMpc | ControllerKind::L1KnodeDirect | ControllerKind::L1KnodeInt)
    }

    pub fn uses_l1(self) -> bool {
        matches!(self, ControllerKind::L1Mpc | ControllerKind::L1KnodeDirect | ControllerKind::L1KnodeInt)
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller '{s}' (valid: {})", Self::valid_names())))
    }
}

/// The model a controller predicts with.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionModel {
    Nominal(QuadrotorParams),
    Knode(KnodeModel),
}

impl PredictionModel {
    pub fn params(&self) -> &QuadrotorParams {
        match self {
            PredictionModel::Nominal(p) => p,
            PredictionModel::Knode(m) => &m.nominal,
        }
    }

    /// Learned residual on `(v, omega)`; zero for the nominal model.
    pub fn residual_z(&self, x: &State, u: &ControlInput) -> Vector6<f64> {
        match self {
            PredictionModel::Nominal(_) => Vector6::zeros(),
            PredictionModel::Knode(m) => m.residual_z(x, u),
        }
    }
}

impl Dynamics for PredictionModel {
    fn deriv(&self, x: &State, u: &ControlInput) -> StateDeriv {
        match self {
            PredictionModel::Nominal(p) => p.deriv(x, u),
            PredictionModel::Knode(m) => m.deriv(x, u),
        }
    }

    fn jacobian(&self, x: &State, u: &ControlInput) -> (StateJacobian, InputJacobian) {
        match self {
            PredictionModel::Nominal(p) => p.jacobian(x, u),
            PredictionModel::Knode(m) => m.jacobian(x, u),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub solves: usize,
    pub converged: usize,
    pub max_iterations: usize,
    pub line_search_failures: usize,
    pub qp_failures: usize,
    pub total_iterations: usize,
    pub worst_kkt: f64,
}

impl SolverStats {
    fn record(&mut self, sol: &OcpSolution) {
        self.solves += 1;
        self.total_iterations += sol.iterations;
        match sol.status {
            SolveStatus::Converged => self.converged += 1,
            SolveStatus::MaxIterations => self.max_iterations += 1,
            SolveStatus::LineSearchFailed => self.line_search_failures += 1,
            SolveStatus::QpFailed => self.qp_failures += 1,
        }
        if sol.kkt.is_finite() {
            self.worst_kkt = self.worst_kkt.max(sol.kkt);
        } else {
            self.worst_kkt = f64::INFINITY;
        }
    }
}

/// Everything a controller carries between control periods.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub kind: ControllerKind,
    pub model: PredictionModel,
    pub ocp: OcpConfig,
    pub l1_cfg: L1Config,
    pub l1: Option<L1State>,
    pub prev_solution: Option<OcpSolution>,
    /// `x(k-1)` and the input applied over `[k-1, k]`.
    prev: Option<(State, ControlInput)>,
    pub last_accels: UncertaintyAccels,
    pub last_status: Option<SolveStatus>,
    pub stats: SolverStats,
    pub warnings: Vec<String>,
}

/// Validated controller. `nominal` is the believed vehicle; a learning kind
/// takes its nominal part from `model` instead.
pub fn make_controller(
    kind: ControllerKind,
    nominal: QuadrotorParams,
    model: Option<KnodeModel>,
    ocp: OcpConfig,
    l1_cfg: L1Config,
) -> Result<ControllerState> {
    ocp.validate()?;
    if kind.uses_l1() {
        l1_cfg.validate()?;
    }
    let mut warnings = Vec::new();
    let model = match (kind.needs_model(), model) {
        (true, Some(m)) => {
            m.validate()?;
            PredictionModel::Knode(m)
        }
        (true, None) => {
            return Err(Error::Config(format!("controller {kind} requires a trained model")));
        }
        (false, Some(_)) => {
            warnings.push(format!("controller {kind} ignores the provided model"));
            PredictionModel::Nominal(nominal)
        }
        (false, None) => PredictionModel::Nominal(nominal),
    };
    model.params().validate()?;
    Ok(ControllerState {
        kind,
        model,
        ocp,
        l1_cfg,
        l1: None,
        prev_solution: None,
        prev: None,
        last_accels: UncertaintyAccels::default(),
        last_status: None,
        stats: SolverStats::default(),
        warnings,
    })
}

impl ControllerState {
    /// Current uncertainty estimate; zero for controllers without L1.
    pub fn sigma_hat(&self) -> Vector6<f64> {
        self.l1.map_or(Vector6::zeros(), |l| l.sigma_hat)
    }

    pub fn u_l1(&self) -> Vector4<f64> {
        self.l1.map_or(Vector4::zeros(), |l| l.u_l1)
    }

    /// One control period: dispatch on the controller kind.
    pub fn step(&mut self, x_k: &State, refw: &ReferenceWindow) -> Result<ControlInput> {
        match self.kind {
            ControllerKind::L1KnodeDirect => step_direct(self, x_k, refw),
            ControllerKind::L1KnodeInt => step_int(self, x_k, refw),
            _ => step_benchmark(self, x_k, refw),
        }
    }

    /// Predictor, then adaptation. Initializes on the first measurement.
    fn adapt(&mut self, x_k: &State) -> Result<()> {
        let z = x_k.partial();
        let (l1, prev) = match (self.l1, self.prev) {
            (Some(l1), Some(prev)) => (l1, prev),
            _ => {
                self.l1 = Some(L1State::new(z));
                return Ok(());
            }
        };
        let (x_prev, u_prev) = prev;
        let p = *self.model.params();
        let d = self.model.residual_z(&x_prev, &u_prev);
        let z_hat = predictor_step(&l1, &x_prev, &u_prev, &d, &p, &self.l1_cfg)?;
        let geom = build_g(&x_prev, &p);
        let sigma_hat = adaptation_update(&z, &z_hat, &geom, &self.l1_cfg);
        self.l1 = Some(L1State { z_hat, sigma_hat, ..l1 });
        Ok(())
    }

    fn solve<M: Dynamics + ?Sized>(&mut self, model: &M, x_k: &State, refw: &ReferenceWindow) -> Result<ControlInput> {
        let map = discretize(model, self.ocp.dt)?;
        let guess = match &self.prev_solution {
            Some(prev) if prev.u_star.len() >= 2 => Some(warm_start_shift(prev)?),
            Some(prev) => Some(prev.as_guess()),
            None => None,
        };
        let sol = solve_ocp(&map, x_k, refw, &self.ocp, guess.as_ref())?;
        self.stats.record(&sol);
        self.last_status = Some(sol.status);
        let u = sol.u_star[0];
        self.prev_solution = Some(sol);
        Ok(u)
    }

    fn clamp(&self, u: &Vector4<f64>) -> ControlInput {
        ControlInput::from_vector(&Vector4::from_fn(|i, _| u[i].clamp(self.ocp.u_min[i], self.ocp.u_max[i])))
    }

    fn finish(&mut self, x_k: &State, u: ControlInput) -> ControlInput {
        self.prev = Some((*x_k, u));
        u
    }
}

fn require(cs: &ControllerState, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{what} called for a {} controller", cs.kind)))
    }
}

/// L1 correction at the input level:
/// predictor, adaptation, filter, OCP with the plain model, `u_bar = u*_0 + u_L1`.
pub fn step_direct(cs: &mut ControllerState, x_k: &State, refw: &ReferenceWindow) -> Result<ControlInput> {
    require(cs, matches!(cs.kind, ControllerKind::L1KnodeDirect | ControllerKind::L1Mpc), "step_direct")?;
    cs.adapt(x_k)?;
    let mut l1 = cs.l1.expect("adapt initializes the estimator");
    l1.u_l1 = lpf_step(&l1.u_l1, &l1.sigma_m(), &cs.l1_cfg);
    cs.l1 = Some(l1);
    let model = cs.model.clone();
    let u_b = cs.solve(&model, x_k, refw)?;
    let u_bar = cs.clamp(&(u_b.to_vector() + l1.u_l1));
    Ok(cs.finish(x_k, u_bar))
}

/// Estimated uncertainty injected into the prediction model; returns `u*_0`.
pub fn step_int(cs: &mut ControllerState, x_k: &State, refw: &ReferenceWindow) -> Result<ControlInput> {
    require(cs, cs.kind == ControllerKind::L1KnodeInt, "step_int")?;
    cs.adapt(x_k)?;
    let l1 = cs.l1.expect("adapt initializes the estimator");
    let geom = build_g(x_k, cs.model.params());
    let accels = uncertainty_to_accels(&geom, &l1.sigma_hat);
    cs.last_accels = accels;
    let model = cs.model.clone();
    let augmented = augment_deriv(&model, accels);
    let u = cs.solve(&augmented, x_k, refw)?;
    Ok(cs.finish(x_k, u))
}

/// The three benchmarks: plain MPC with the nominal or learned model, and
/// the L1 input-level scheme on the nominal model.
pub fn step_benchmark(cs: &mut ControllerState, x_k: &State, refw: &ReferenceWindow) -> Result<ControlInput> {
    match cs.kind {
        ControllerKind::NominalMpc | ControllerKind::KnodeMpc => {
            let model = cs.model.clone();
            let u = cs.solve(&model, x_k, refw)?;
            Ok(cs.finish(x_k, u))
        }
        ControllerKind::L1Mpc => step_direct(cs, x_k, refw),
        _ => require(cs, false, "step_benchmark").map(|_| ControlInput::zero()),
    }
}
