//! Command-line front end: `train`, `simulate`, `sweep`, `estimate` and
//! `report`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::charts::{bar_chart, line_chart, LineSeries};
use crate::controllers::ControllerKind;
use crate::dynamics::QuadrotorParams;
use crate::error::{Error, Result};
use crate::harness::{
    collect_training_data, estimate_disturbances, run_closed_loop, run_sweep, write_estimate_csv, write_run_csv,
    write_run_summary, write_sweep, DisturbanceCase, DisturbanceSpec, Excitation, PlantConfig, RunConfig, SweepGrid,
    SweepRow, SweepSummary, TrajectoryProfile,
};
use crate::knode::{load_model, save_dataset, save_model, train_knode, KnodeModel, TrainConfig};
use crate::l1::L1Config;
use crate::mpc::MpcSettings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Mass the controllers believe, kg.
    pub believed_mass: f64,
    /// Learned model file; `<output>/model.json` when absent.
    pub path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { believed_mass: 0.03, path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnodeSection {
    pub training: TrainConfig,
    /// Flight flown to collect data.
    pub data_profile: TrajectoryProfile,
    pub excitation: Excitation,
}

impl Default for KnodeSection {
    fn default() -> Self {
        Self {
            training: TrainConfig::default(),
            data_profile: TrajectoryProfile::default(),
            excitation: Excitation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub controller: ControllerKind,
    /// s
    pub control_period: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { controller: ControllerKind::NominalMpc, control_period: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub plant: PlantConfig,
    pub model: ModelSection,
    pub knode: KnodeSection,
    pub mpc: MpcSettings,
    pub l1: L1Config,
    pub run: RunSection,
    pub profile: TrajectoryProfile,
    pub disturbance: DisturbanceSpec,
    pub sweep: SweepGrid,
    pub output: OutputSection,
    pub seed: u64,
    /// Worker threads for sweeps.
    pub jobs: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            model: ModelSection::default(),
            knode: KnodeSection::default(),
            mpc: MpcSettings::default(),
            l1: L1Config::default(),
            run: RunSection::default(),
            profile: TrajectoryProfile::default(),
            disturbance: DisturbanceSpec::default(),
            sweep: SweepGrid::default(),
            output: OutputSection::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn run_config(&self, controller: ControllerKind) -> RunConfig {
        RunConfig {
            controller,
            profile: self.profile,
            disturbance: self.disturbance,
            plant: self.plant,
            believed_mass: self.model.believed_mass,
            mpc: self.mpc,
            l1: self.l1,
            control_period: self.run.control_period,
            seed: self.seed,
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.path.clone().unwrap_or_else(|| self.output.dir.join("model.json"))
    }

    pub fn believed_params(&self) -> Result<QuadrotorParams> {
        self.run_config(self.run.controller).believed_params()
    }

    /// Load the learned model and check it was built around the believed
    /// vehicle.
    pub fn load_model(&self) -> Result<KnodeModel> {
        let path = self.model_path();
        if !path.exists() {
            return Err(Error::Config(format!("model file {} not found; run `train` first", path.display())));
        }
        let model = load_model(&path)?;
        if (model.nominal.mass - self.model.believed_mass).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "model was trained around mass {} but believed mass is {}",
                model.nominal.mass, self.model.believed_mass
            )));
        }
        Ok(model)
    }
}

#[derive(Debug, Parser)]
#[command(name = "l1knode", version, about = "Quadrotor MPC with learned dynamics and L1 adaptive estimation")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect flight data and fit the residual model.
    Train,
    /// Fly one closed-loop run.
    Simulate {
        #[arg(long)]
        controller: Option<ControllerKind>,
    },
    /// Run the controller comparison grid.
    Sweep {
        /// One circle at 3 m and 1 m/s instead of the configured grid.
        #[arg(long)]
        smoke: bool,
    },
    /// Compare the uncertainty estimate with the scripted roll moment and
    /// side force.
    Estimate {
        #[arg(long, default_value = "l1-mpc")]
        controller: ControllerKind,
    },
    /// Redraw charts and the markdown summary from an existing sweep.
    Report,
}

fn resolve(cli: &Cli) -> Result<CliConfig> {
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if cfg.jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn echo_config(cfg: &CliConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output.dir)?;
    fs::write(cfg.output.dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Precondition(_))
}

/// Parse `args` (program name first), run the command and return the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let outcome = match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Simulate { controller } => cmd_simulate(&cfg, controller.unwrap_or(cfg.run.controller)),
        Command::Sweep { smoke } => cmd_sweep(&cfg, *smoke),
        Command::Estimate { controller } => cmd_estimate(&cfg, *controller),
        Command::Report => cmd_report(&cfg),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn cmd_train(cfg: &CliConfig) -> Result<i32> {
    echo_config(cfg)?;
    let run = RunConfig { profile: cfg.knode.data_profile, ..cfg.run_config(ControllerKind::NominalMpc) };
    run.validate()?;
    cfg.knode.training.validate()?;
    let dataset = collect_training_data(&run, &cfg.knode.excitation)?;
    save_dataset(&dataset, &cfg.output.dir.join("dataset.csv"))?;
    let (model, report) = train_knode(run.believed_params()?, &dataset, &cfg.knode.training)?;
    let path = cfg.model_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    save_model(&model, &path)?;
    let mut w = csv::Writer::from_path(cfg.output.dir.join("training_curve.csv"))?;
    w.write_record(["epoch", "loss", "learning_rate"])?;
    for (i, (l, lr)) in report.loss_history.iter().zip(&report.learning_rate_history).enumerate() {
        w.write_record([i.to_string(), l.to_string(), lr.to_string()])?;
    }
    w.flush()?;
    println!(
        "trained on {} records: loss {:.6e} -> {:.6e}; model written to {}",
        dataset.len(),
        report.initial_loss,
        report.final_loss,
        path.display()
    );
    Ok(EXIT_OK)
}

fn model_for(cfg: &CliConfig, kinds: &[ControllerKind]) -> Result<Option<KnodeModel>> {
    if kinds.iter().any(|k| k.needs_model()) {
        cfg.load_model().map(Some)
    } else {
        Ok(None)
    }
}

pub fn cmd_simulate(cfg: &CliConfig, controller: ControllerKind) -> Result<i32> {
    let run = cfg.run_config(controller);
    run.validate()?;
    let model = model_for(cfg, &[controller])?;
    echo_config(cfg)?;
    let result = run_closed_loop(&run, model.as_ref())?;
    let stem = format!("run_{}", controller.name());
    write_run_csv(&result, &cfg.output.dir.join(format!("{stem}.csv")))?;
    write_run_summary(&result, &cfg.output.dir.join(format!("{stem}.json")))?;
    println!(
        "{} {} {}: rmse_position={:.6} m rmse_xy={:.6} m solves={} converged={}",
        controller,
        cfg.profile.shape.name(),
        cfg.disturbance.case.name(),
        result.rmse.position,
        result.rmse.xy,
        result.stats.solves,
        result.stats.converged
    );
    if result.crashed() {
        eprintln!("error: run crashed: {:?}", result.status);
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

fn profile_label(r: &SweepRow) -> String {
    format!("{} {}m {}m/s", r.shape.name(), r.radius, r.speed)
}

fn write_charts(dir: &Path, rows: &[SweepRow], summary: &SweepSummary) -> Result<()> {
    let mut kinds: Vec<ControllerKind> = rows.iter().map(|r| r.controller).collect();
    kinds.sort();
    kinds.dedup();
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    let mut cases: Vec<DisturbanceCase> = rows.iter().map(|r| r.case).collect();
    cases.sort();
    cases.dedup();
    for case in &cases {
        let mut groups: Vec<String> = Vec::new();
        for r in rows.iter().filter(|r| r.case == *case) {
            let label = profile_label(r);
            if !groups.contains(&label) {
                groups.push(label);
            }
        }
        let values: Vec<Vec<f64>> = kinds
            .iter()
            .map(|k| {
                groups
                    .iter()
                    .map(|g| {
                        rows.iter()
                            .find(|r| r.case == *case && r.controller == *k && profile_label(r) == *g && !r.failed())
                            .map_or(f64::NAN, |r| r.rmse_position)
                    })
                    .collect()
            })
            .collect();
        let svg = bar_chart(&format!("Position RMSE, {}", case.name()), "RMSE (m)", &groups, &names, &values);
        fs::write(dir.join(format!("rmse_{}.svg", case.name())), svg)?;
    }
    let case_names: Vec<String> = cases.iter().map(|c| c.name().to_string()).collect();
    let values: Vec<Vec<f64>> = kinds
        .iter()
        .map(|k| cases.iter().map(|c| summary.case_mean(*k, *c).unwrap_or(f64::NAN)).collect())
        .collect();
    fs::write(
        dir.join("rmse_mean.svg"),
        bar_chart("Mean position RMSE per case", "RMSE (m)", &case_names, &names, &values),
    )?;
    Ok(())
}

fn report_markdown(rows: &[SweepRow], summary: &SweepSummary) -> String {
    let mut s = String::from("# Sweep summary\n\n| controller | mean RMSE (m) |");
    let mut cases: Vec<DisturbanceCase> = rows.iter().map(|r| r.case).collect();
    cases.sort();
    cases.dedup();
    for c in &cases {
        s.push_str(&format!(" {} |", c.name()));
    }
    s.push_str(" failures |\n|---|---|");
    for _ in &cases {
        s.push_str("---|");
    }
    s.push_str("---|\n");
    for c in &summary.controllers {
        s.push_str(&format!("| {} | {:.4} |", c.controller, c.mean_rmse));
        for case in &cases {
            s.push_str(&format!(" {:.4} |", c.per_case.get(case.name()).copied().unwrap_or(f64::NAN)));
        }
        s.push_str(&format!(" {} |\n", c.failures));
    }
    if !summary.int_improvement.is_empty() {
        s.push_str("\nImprovement of l1-knode-int:\n\n");
        for (k, v) in &summary.int_improvement {
            s.push_str(&format!("- over {k}: {:.1}%\n", 100.0 * v));
        }
    }
    s.push_str(&format!("\nRuns: {}, failed: {}\n", rows.len(), summary.failures));
    s
}

fn print_summary(summary: &SweepSummary) {
    for c in &summary.controllers {
        println!("{:16} mean_rmse={:.6} m failures={}", c.controller.name(), c.mean_rmse, c.failures);
    }
    for (k, v) in &summary.int_improvement {
        println!("l1-knode-int improvement over {k}: {:.2}%", 100.0 * v);
    }
}

pub fn cmd_sweep(cfg: &CliConfig, smoke: bool) -> Result<i32> {
    let grid = if smoke { SweepGrid { controllers: cfg.sweep.controllers.clone(), ..SweepGrid::smoke() } } else { cfg.sweep.clone() };
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let base = cfg.run_config(cfg.run.controller);
    for c in grid.configs(&base) {
        c.validate()?;
    }
    let model = model_for(cfg, &grid.controllers)?;
    echo_config(cfg)?;
    let (rows, summary) = run_sweep(&grid, &base, model.as_ref(), cfg.jobs)?;
    write_sweep(&cfg.output.dir, &grid, &rows, &summary)?;
    write_charts(&cfg.output.dir, &rows, &summary)?;
    fs::write(cfg.output.dir.join("report.md"), report_markdown(&rows, &summary))?;
    println!("{} runs", rows.len());
    print_summary(&summary);
    if summary.failures > 0 {
        eprintln!("error: {} runs failed", summary.failures);
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

pub fn cmd_estimate(cfg: &CliConfig, controller: ControllerKind) -> Result<i32> {
    let run = cfg.run_config(controller);
    run.validate()?;
    let model = model_for(cfg, &[controller])?;
    echo_config(cfg)?;
    let (report, _, _) = estimate_disturbances(&run, model.as_ref())?;
    write_estimate_csv(&report, &cfg.output.dir.join("estimate.csv"))?;
    let t: Vec<f64> = report.rows.iter().map(|r| r.t).collect();
    let col = |f: fn(&crate::harness::EstimateRow) -> f64| report.rows.iter().map(f).collect::<Vec<f64>>();
    let (tm, em, tf, ef) = (col(|r| r.true_moment), col(|r| r.est_moment), col(|r| r.true_force), col(|r| r.est_force));
    fs::write(
        cfg.output.dir.join("estimate_moment.svg"),
        line_chart(
            "Roll moment",
            "t (s)",
            "N m",
            &[LineSeries { name: "true", x: &t, y: &tm }, LineSeries { name: "estimated", x: &t, y: &em }],
        ),
    )?;
    fs::write(
        cfg.output.dir.join("estimate_force.svg"),
        line_chart(
            "Side force",
            "t (s)",
            "N",
            &[LineSeries { name: "true", x: &t, y: &tf }, LineSeries { name: "estimated", x: &t, y: &ef }],
        ),
    )?;
    println!(
        "{controller}: normalized RMS error after 1 s: moment {:.4}, force {:.4}",
        report.moment_error, report.force_error
    );
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
struct StoredSweep {
    rows: Vec<SweepRow>,
    summary: SweepSummary,
}

pub fn cmd_report(cfg: &CliConfig) -> Result<i32> {
    let path = cfg.output.dir.join("sweep.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}; run `sweep` first", path.display())))?;
    let stored: StoredSweep = serde_json::from_str(&text)?;
    write_charts(&cfg.output.dir, &stored.rows, &stored.summary)?;
    fs::write(cfg.output.dir.join("report.md"), report_markdown(&stored.rows, &stored.summary))?;
    print_summary(&stored.summary);
    Ok(EXIT_OK)
}
