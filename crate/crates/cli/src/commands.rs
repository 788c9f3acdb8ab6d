//! Argument parsing and dispatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use heatlab_core::feynman_kac::{self, FlatProblem, McParams};
use heatlab_core::geometry::{self, LaplaceProblem, Settings};
use heatlab_core::verification::{self, Suite};
use heatlab_core::{psi, sdw, synge};

use crate::config::{Command, PresetSpec, ProblemSpec, RunConfig};
use crate::error::CliError;
use crate::output::{self, Results};

#[derive(Debug, Parser)]
#[command(name = "heatlab", version, about = "Local heat kernel numerics on a coordinate chart")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Fast,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::Fast => Suite::Fast,
            SuiteArg::All => Suite::All,
        }
    }
}

/// Problem selection shared by the computing subcommands.
#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Named preset
    #[arg(long, default_value = "flat")]
    pub preset: String,
    /// JSON problem description; overrides --preset
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// JSON settings overriding the defaults
    #[arg(long)]
    pub settings: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub c: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub c2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub omega: Option<f64>,
    /// Comma-separated connection strengths
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub xi: Option<Vec<f64>>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub center: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Output directory
    #[arg(long, default_value = "heatlab-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct PairArgs {
    /// Evaluation point, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub x: Vec<f64>,
    /// Base point, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub y: Vec<f64>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Geodesic from y to x
    Geodesic {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// World function and Van Vleck determinant
    Synge {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Seeley-DeWitt coefficients a_0 .. a_k
    Sdw {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Psi_k for k_min <= k <= k_max
    Psi {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = -2, allow_hyphen_values = true)]
        k_min: i32,
        #[arg(long, default_value_t = 2, allow_hyphen_values = true)]
        k_max: i32,
        /// Series truncation
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Feynman-Kac Monte Carlo kernel
    KernelMc {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 200_000)]
        paths: usize,
        #[arg(long, default_value_t = 128)]
        steps: usize,
        /// Plain midpoint rule instead of the two-level combination
        #[arg(long)]
        no_extrapolate: bool,
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Scaling identity at z = y = x and diagonal coefficient scaling
    Scaling {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,1")]
        tau: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 128)]
        steps: usize,
        /// Highest diagonal coefficient compared
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the verification battery
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        suite: SuiteArg,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a complete JSON run configuration
    Run { config: PathBuf },
    /// Print the summary table of a result file or run directory
    Report { path: PathBuf },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid {what} in {}: {e}", path.display())))
}

impl ProblemArgs {
    fn spec(&self) -> Result<(ProblemSpec, Settings), CliError> {
        let settings = match &self.settings {
            Some(p) => read_json(p, "settings")?,
            None => Settings::default(),
        };
        if let Some(p) = &self.problem {
            return Ok((read_json(p, "problem")?, settings));
        }
        let mut spec = PresetSpec::named(&self.preset);
        spec.dim = self.dim;
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut spec.c, self.c);
        set(&mut spec.c2, self.c2);
        set(&mut spec.omega, self.omega);
        set(&mut spec.width, self.width);
        set(&mut spec.center, self.center);
        if let Some(xi) = &self.xi {
            spec.xi = xi.clone();
        }
        Ok((ProblemSpec::Preset(spec), settings))
    }
}

/// Translates parsed arguments into a run configuration; `None` for `report`.
pub fn to_config(cmd: CliCommand) -> Result<Option<RunConfig>, CliError> {
    let with = |problem: &ProblemArgs, run: RunArgs, command: Command| -> Result<RunConfig, CliError> {
        let (spec, settings) = problem.spec()?;
        Ok(RunConfig { problem: Some(spec), settings, command, seed: run.seed, output: run.out })
    };
    let config = match cmd {
        CliCommand::Geodesic { pair, problem, run } => with(&problem, run, Command::Geodesic { x: pair.x, y: pair.y })?,
        CliCommand::Synge { pair, problem, run } => with(&problem, run, Command::Synge { x: pair.x, y: pair.y })?,
        CliCommand::Sdw { pair, k, problem, run } => with(&problem, run, Command::Sdw { x: pair.x, y: pair.y, k })?,
        CliCommand::Psi { pair, k_min, k_max, n, problem, run } => {
            with(&problem, run, Command::Psi { x: pair.x, y: pair.y, k_min, k_max, n })?
        }
        CliCommand::KernelMc { pair, tau, paths, steps, no_extrapolate, problem, run } => with(
            &problem,
            run,
            Command::KernelMc { x: pair.x, y: pair.y, tau, paths, steps, extrapolate: !no_extrapolate },
        )?,
        CliCommand::Scaling { x, tau, paths, steps, order, problem, run } => {
            with(&problem, run, Command::Scaling { x, taus: tau, paths, steps, order })?
        }
        CliCommand::Verify { suite, run } => RunConfig {
            problem: None,
            settings: Settings::default(),
            command: Command::Verify { suite: suite.into() },
            seed: run.seed,
            output: run.out,
        },
        CliCommand::Run { config } => {
            let text = fs::read_to_string(&config).map_err(|e| CliError::io(&config, e))?;
            RunConfig::from_json(&text)?
        }
        CliCommand::Report { .. } => return Ok(None),
    };
    Ok(Some(config))
}

fn problem_for(config: &RunConfig) -> Result<LaplaceProblem, CliError> {
    let spec = config
        .problem
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{} needs a problem", config.command.name())))?;
    spec.build(&config.settings)
}

fn check_dim(problem: &LaplaceProblem, points: &[&[f64]]) -> Result<(), CliError> {
    for p in points {
        if p.len() != problem.dim {
            return Err(CliError::Config(format!(
                "point {p:?} has {} coordinates, the problem has dimension {}",
                p.len(),
                problem.dim
            )));
        }
        if !problem.domain.contains(p) {
            return Err(CliError::Config(format!("point {p:?} lies outside the chart domain of {}", problem.name)));
        }
    }
    Ok(())
}

/// Computes the results of one configuration without writing anything.
pub fn compute(config: &RunConfig) -> Result<Results, CliError> {
    let seed = config.seed;
    Ok(match &config.command {
        Command::Verify { suite } => Results::Verify { suite: *suite, seed, reports: verification::run_battery(*suite, seed) },
        Command::Geodesic { x, y } => {
            let p = problem_for(config)?;
            check_dim(&p, &[x, y])?;
            Results::Geodesic { geodesic: geometry::geodesic_bvp(&p, y, x)? }
        }
        Command::Synge { x, y } => {
            let p = problem_for(config)?;
            check_dim(&p, &[x, y])?;
            Results::Synge { synge: synge::synge_data(&p, x, y)? }
        }
        Command::Sdw { x, y, k } => {
            let p = problem_for(config)?;
            check_dim(&p, &[x, y])?;
            Results::Sdw { table: sdw::sdw_coefficients(&p, x, y, *k)? }
        }
        Command::Psi { x, y, k_min, k_max, n } => {
            let p = problem_for(config)?;
            check_dim(&p, &[x, y])?;
            if k_min > k_max {
                return Err(CliError::Config(format!("k_min {k_min} exceeds k_max {k_max}")));
            }
            let values = (*k_min..=*k_max).map(|k| psi::psi(&p, k, x, y, *n)).collect::<Result<Vec<_>, _>>()?;
            Results::Psi { values }
        }
        Command::KernelMc { x, y, tau, paths, steps, extrapolate } => {
            let p = problem_for(config)?;
            check_dim(&p, &[x, y])?;
            let flat = FlatProblem::from_problem(&p)?;
            let params = McParams { n_paths: *paths, n_steps: *steps, seed, extrapolate: *extrapolate };
            Results::KernelMc { estimate: feynman_kac::kernel_mc(&flat, x, y, *tau, &params)? }
        }
        Command::Scaling { x, taus, paths, steps, order } => {
            let p = problem_for(config)?;
            check_dim(&p, &[x])?;
            let flat = FlatProblem::from_problem(&p)?;
            let params = McParams { n_paths: *paths, n_steps: *steps, seed, extrapolate: true };
            let coupled = taus
                .iter()
                .map(|&tau| feynman_kac::scaling_check(&flat, x, x, x, tau, &params))
                .collect::<Result<Vec<_>, _>>()?;
            let diagonal = taus
                .iter()
                .map(|&tau| feynman_kac::diagonal_scaling_check(&p, x, tau, *order))
                .collect::<Result<Vec<_>, _>>()?;
            Results::Scaling { coupled, diagonal }
        }
    })
}

/// Computes, writes the run directory and reports failed checks.
pub fn execute(config: &RunConfig) -> Result<Results, CliError> {
    let start = Instant::now();
    let results = compute(config)?;
    let wall = start.elapsed().as_millis() as u64;
    output::write_run(&config.output, &config.to_json(), &results, config.command.name(), config.seed, wall)?;
    if let Results::Verify { reports, .. } = &results {
        let failed = reports.iter().filter(|r| !r.passed).count();
        if failed > 0 {
            return Err(CliError::ChecksFailed { failed, total: reports.len() });
        }
    }
    Ok(results)
}

/// Caps the global worker pool from `HEATLAB_THREADS`.
pub fn init_threads(value: Option<&str>) -> Result<(), CliError> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("HEATLAB_THREADS must be a positive integer, got '{v}'")))?;
    // a pool that is already built keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return e.exit_code();
        }
    };
    if let Err(e) = init_threads(std::env::var("HEATLAB_THREADS").ok().as_deref()) {
        let _ = writeln!(err, "error: {e}");
        return e.exit_code();
    }
    let report_path = match &cli.command {
        CliCommand::Report { path } => Some(path.clone()),
        _ => None,
    };
    let outcome = match report_path {
        Some(path) => output::read_results(&path).map(|r| {
            let _ = write!(out, "{}", r.summary());
        }),
        None => to_config(cli.command).and_then(|config| {
            let config = config.expect("not a report");
            let results = execute(&config);
            match &results {
                Ok(r) => {
                    let _ = write!(out, "{}", r.summary());
                }
                Err(CliError::ChecksFailed { .. }) => {
                    let text = fs::read_to_string(config.output.join(output::RESULT_CSV)).unwrap_or_default();
                    let _ = write!(out, "{text}");
                }
                Err(_) => return results.map(|_| ()),
            }
            let _ = writeln!(err, "results written to {}", config.output.display());
            results.map(|_| ())
        }),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
