//! Command-line runner for the zone-tracking MPC pipeline.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{ExperimentConfig, DEFAULT_CONFIG};
use zmpc::closedloop::{
    compute_metrics, gamma_sweep, simulate, write_sweep_csv, write_trajectory_csv, DisturbanceGenerator,
    DisturbanceMode, SimulationSettings,
};
use zmpc::design::{shrinkage_for, xd_max_for, CisCache, ControllerDesign, TerminalDesign};
use zmpc::dynamics::SystemModel;
use zmpc::ocp::Variant;
use zmpc::sets::BoxSet;
use zmpc::ZmpcError;

#[derive(Parser, Debug)]
#[command(name = "zmpc", version, about = "Robust zone-tracking MPC experiments on the CSTR benchmark")]
struct Cli {
    /// Experiment config (TOML); the embedded default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base output directory; overrides run.output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Disturbance seed for `run`; replaces the seed list for `sweep`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Risk factor; overrides controller.gamma.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Controller variant: nominal, proposed, original-zone-modified-terminal, no-terminal.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute invariant sets of the actual and modified targets.
    Cis,
    /// Estimate the worst one-step disturbance effect and shrink the target.
    Shrink,
    /// Simulate one controller variant in closed loop.
    Run,
    /// Sweep the risk factor over several seeds.
    Sweep {
        /// Comma-separated risk factors; overrides run.gammas.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Print the embedded default config.
    PrintDefaultConfig,
}

enum Failure {
    Config(String),
    Core(ZmpcError),
    Other(anyhow::Error),
}

impl From<ZmpcError> for Failure {
    fn from(e: ZmpcError) -> Self {
        Failure::Core(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ZmpcError>() {
            Ok(z) => Failure::Core(z),
            Err(e) => Failure::Other(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Core(ZmpcError::EmptyInvariantSet(_)) => 3,
            Failure::Core(ZmpcError::EmptyModifiedSet { .. }) => 4,
            Failure::Core(ZmpcError::AbortedRun { .. }) => 5,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(m) => format!("config error: {m}"),
            Failure::Core(e) => e.to_string(),
            Failure::Other(e) => format!("{e:#}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

/// Effective configuration and the directories it writes to.
struct Context {
    config: ExperimentConfig,
    model: SystemModel,
    run_dir: PathBuf,
    cache: CisCache,
}

fn load(cli: &Cli, sweep: bool, gammas: Option<&[f64]>) -> Result<Context, Failure> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => DEFAULT_CONFIG.to_string(),
    };
    let mut config = ExperimentConfig::parse(&text).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(out) = &cli.out {
        config.run.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
        if sweep {
            config.run.seeds = vec![seed];
        }
    }
    if let Some(g) = cli.gamma {
        config.controller.gamma = g;
    }
    if let Some(v) = cli.variant {
        config.controller.variant = v;
    }
    if let Some(gs) = gammas {
        config.run.gammas = gs.to_vec();
    }
    config.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let model = config.model()?;
    let base = PathBuf::from(&config.run.output_dir);
    let run_dir = base.join(config.content_hash());
    let cache_dir = match &config.cis.cache_dir {
        Some(d) if Path::new(d).is_absolute() => PathBuf::from(d),
        Some(d) => base.join(d),
        None => run_dir.join("cache"),
    };
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.toml"), config.to_toml())?;
    Ok(Context {
        config,
        model,
        run_dir,
        cache: CisCache::new(cache_dir),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.into()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::PrintDefaultConfig => {
            print!("{DEFAULT_CONFIG}");
            Ok(())
        }
        Command::Cis => cmd_cis(&load(&cli, false, None)?),
        Command::Shrink => cmd_shrink(&load(&cli, false, None)?),
        Command::Run => cmd_run(&load(&cli, false, None)?),
        Command::Sweep { gammas } => cmd_sweep(&load(&cli, true, gammas.as_deref())?),
    }
}

#[derive(Serialize)]
struct SetSummary {
    region: BoxSet,
    cells_per_axis: Vec<usize>,
    member_fraction: f64,
    sweeps: usize,
    bounding_box: Option<BoxSet>,
    inner_box: BoxSet,
    verify_worst_margin: f64,
    grid_file: String,
}

fn summarize(name: &str, ctx: &Context, design: &TerminalDesign) -> Result<SetSummary, Failure> {
    let file = format!("cis_{name}.json");
    design.cis.write(&ctx.run_dir.join(&file))?;
    let s = SetSummary {
        region: design.cis.region.clone(),
        cells_per_axis: design.cis.cells_per_axis.clone(),
        member_fraction: design.cis.member_fraction(),
        sweeps: design.cis.sweeps,
        bounding_box: design.cis.bounding_box(),
        inner_box: design.terminal.bounds.clone(),
        verify_worst_margin: design.terminal.report.worst_margin,
        grid_file: file,
    };
    println!(
        "{name}: region {:?}-{:?} members {:.4} inner box {:?}-{:?}",
        s.region.lb(),
        s.region.ub(),
        s.member_fraction,
        s.inner_box.lb(),
        s.inner_box.ub()
    );
    Ok(s)
}

fn build_design(ctx: &Context) -> Result<ControllerDesign, Failure> {
    let c = &ctx.config;
    Ok(ControllerDesign::build(
        &ctx.model,
        &c.setup(),
        &c.grid(),
        c.controller.gamma,
        Some(&ctx.cache),
    )?)
}

fn cmd_cis(ctx: &Context) -> Result<(), Failure> {
    let design = build_design(ctx)?;
    let summary = serde_json::json!({
        "actual": summarize("actual", ctx, &design.actual)?,
        "modified": summarize("modified", ctx, &design.modified)?,
    });
    write_json(&ctx.run_dir.join("cis_summary.json"), &summary)?;
    println!("output: {}", ctx.run_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ShrinkRecord {
    gamma: f64,
    xd_max: Vec<f64>,
    xd_max_norm: f64,
    argmax_x: Vec<f64>,
    argmax_u: Vec<f64>,
    argmax_w: Vec<f64>,
    s: Vec<f64>,
    modified_target: BoxSet,
}

fn cmd_shrink(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let setup = c.setup();
    let (cis, _) = ctx.cache.get_or_compute(
        &ctx.model,
        &setup.target,
        &setup.input_bounds,
        &c.cis.cells_per_axis,
        &c.cis.inputs_per_axis,
    )?;
    let xd = xd_max_for(&ctx.model, &setup, &cis)?;
    let (spec, modified) = shrinkage_for(&setup, &xd, c.controller.gamma)?;
    let rec = ShrinkRecord {
        gamma: c.controller.gamma,
        xd_max_norm: xd.norm(),
        xd_max: xd.xd_max,
        argmax_x: xd.argmax_x,
        argmax_u: xd.argmax_u,
        argmax_w: xd.argmax_w,
        s: spec.s(),
        modified_target: modified,
    };
    write_json(&ctx.run_dir.join("shrink.json"), &rec)?;
    println!("{}", serde_json::to_string_pretty(&rec).map_err(|e| Failure::Other(e.into()))?);
    Ok(())
}

fn cmd_run(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let setup = c.setup();
    let design = build_design(ctx)?;
    let variant = c.controller.variant;
    let controller = design.config(&setup, variant)?;
    let disturbance = match c.run.disturbance {
        DisturbanceMode::UniformIid => DisturbanceGenerator::uniform(setup.disturbance_bounds.clone(), c.run.seed),
        DisturbanceMode::Zero => DisturbanceGenerator::zero(setup.disturbance_bounds.dim()),
    };
    let settings = SimulationSettings {
        steps: c.run.steps,
        actual_target: setup.target.clone(),
        failure_budget: c.controller.failure_budget,
    };
    write_json(
        &ctx.run_dir.join("design.json"),
        &serde_json::json!({
            "variant": variant,
            "xd_max": design.xd,
            "modified_target": design.modified_target,
            "terminal_set": controller.terminal_set,
            "tracked_target": controller.zone_cost.target,
        }),
    )?;
    let record = simulate(&ctx.model, &controller, &c.run.x0, &settings, &disturbance)?;
    let file = fs::File::create(ctx.run_dir.join("trajectory.csv"))?;
    write_trajectory_csv(&record, std::io::BufWriter::new(file))?;
    let metrics = compute_metrics(&record, &setup.target, &setup.state_bounds);
    write_json(&ctx.run_dir.join("metrics.json"), &metrics)?;
    println!(
        "{variant}: first entry {:?}, violations after entry {}, state-bound violations {}, max one-step deviation {:.4}",
        metrics.first_entry_step,
        metrics.violations_after_entry,
        metrics.state_constraint_violations,
        record.max_prediction_deviation()
    );
    println!("output: {}", ctx.run_dir.display());
    Ok(())
}

fn cmd_sweep(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let setup = c.setup();
    let grid = c.grid();
    let actual = TerminalDesign::compute(&ctx.model, &setup, &grid, &setup.target, Some(&ctx.cache))?;
    let xd = xd_max_for(&ctx.model, &setup, &actual.cis)?;
    let rows = gamma_sweep(
        &ctx.model,
        &setup,
        &grid,
        &actual,
        &xd,
        c.controller.variant,
        &c.run.gammas,
        &c.run.x0,
        c.run.steps,
        &c.run.seeds,
        Some(&ctx.cache),
    );
    let file = fs::File::create(ctx.run_dir.join("sweep.csv"))?;
    write_sweep_csv(&rows, std::io::BufWriter::new(file))?;
    for r in &rows {
        match &r.error {
            Some(e) => println!("gamma {}: {e}", r.gamma),
            None => println!(
                "gamma {}: violations {:.2}, zone cost {:.2}, economic cost {:.4}, aborted {}/{}",
                r.gamma,
                r.mean_violations_after_entry,
                r.mean_accumulated_zone_cost_actual,
                r.mean_accumulated_economic_cost,
                r.aborted_runs,
                r.runs + r.aborted_runs
            ),
        }
    }
    println!("output: {}", ctx.run_dir.display());
    Ok(())
}
