//! Command-line front end.
//!
//! Exit status: 0 success, 2 usage, 3 bad input or configuration,
//! 4 runtime failure, 5 finished but not converged. Failures print one
//! `error kind=<kind> msg=<text>` line on standard error.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::{diagnose, diagnose_matrices, posterior_summary, DEFAULT_THRESHOLD};
use crate::domain::{load_domain, ColumnSpec};
use crate::error::{Error, Result};
use crate::inference::{run_chains, RunSettings, Variant};
use crate::io::{
    parse_config, score_files, write_edge_list, write_input_config, write_keyed_table, write_outputs,
    write_units_table, ConfigOverrides, DiagnosticsOutcome,
};
use crate::simulation::{
    comparison_dataset, gen_pseudo_data, run_comparison, run_empirical_study, standin_survey_domain, ScenarioSpec,
    StudySettings,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;
pub const EXIT_UNCONVERGED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "nnsd", version, about = "Areal-unit models with learned neighborhood graphs")]
struct Cli {
    /// Print error details.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write the output bundle.
    Fit {
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Generate a synthetic scenario, or pseudo-data around a units table.
    Simulate(SimulateArgs),
    /// MSE and MAE between two tables keyed by unit id.
    Score {
        truth: PathBuf,
        estimates: PathBuf,
        /// Defaults to the second column.
        #[arg(long)]
        truth_column: Option<String>,
        /// Defaults to the second column.
        #[arg(long)]
        estimate_column: Option<String>,
    },
    /// Recompute convergence diagnostics from a traces file.
    Diagnose {
        traces: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Fit several variants to simulated data and tabulate their scores.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// `gamma=<value>`.
    #[arg(long, conflicts_with = "units")]
    scenario: Option<String>,
    /// Units table to draw pseudo-data around.
    #[arg(long)]
    units: Option<PathBuf>,
    #[arg(long, requires = "units")]
    edges: Option<PathBuf>,
    /// Column layout of `--units`.
    #[arg(long, requires = "units")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 67)]
    n_units: usize,
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// `gamma=<value>`, repeatable; all three settings when absent.
    #[arg(long, value_delimiter = ',')]
    scenario: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "icar,nn,sd,nnsd")]
    variants: Vec<Variant>,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    iterations: usize,
    #[arg(long, default_value_t = 2000)]
    burn_in: usize,
    #[arg(long, default_value_t = 2)]
    chains: usize,
    #[arg(long, default_value_t = 67)]
    n_units: usize,
    /// Pseudo-data study around a stand-in survey table (or `--units`).
    #[arg(long)]
    empirical: bool,
    #[arg(long, requires = "empirical")]
    units: Option<PathBuf>,
    #[arg(long, requires = "units")]
    edges: Option<PathBuf>,
    #[arg(long, requires = "units")]
    config: Option<PathBuf>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_)
        | Error::Constraint(_)
        | Error::SingularCovariance { .. }
        | Error::InsufficientDraws(_)
        | Error::Simulation(_) => EXIT_RUNTIME,
        _ => EXIT_INPUT,
    }
}

/// Writes to standard output, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

macro_rules! emitln {
    ($($arg:tt)*) => {
        emit(&format!("{}\n", format_args!($($arg)*)))
    };
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                emit(&e.to_string());
                return EXIT_OK;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={}", single_line(first));
            return EXIT_USAGE;
        }
    };
    let verbose = cli.verbose;
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error kind={} msg={}", e.kind(), single_line(&e.to_string()));
            if verbose {
                eprintln!("{e:#?}");
            }
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Fit { config, overrides } => fit(config, &overrides),
        Command::Simulate(args) => simulate(&args),
        Command::Score {
            truth,
            estimates,
            truth_column,
            estimate_column,
        } => {
            let (mse, mae) = score_files(&truth, &estimates, truth_column.as_deref(), estimate_column.as_deref())?;
            emit(&format!("mse={mse} mae={mae}\n"));
            Ok(EXIT_OK)
        }
        Command::Diagnose { traces, threshold } => {
            let (names, chains) = crate::io::read_traces(&traces)?;
            let report = diagnose_matrices(&chains, &names, threshold)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
            emit(&format!("{json}\n"));
            Ok(if report.passed { EXIT_OK } else { EXIT_UNCONVERGED })
        }
        Command::Compare(args) => compare(&args),
    }
}

fn fit(config: Option<PathBuf>, overrides: &ConfigOverrides) -> Result<i32> {
    let config = parse_config(config.as_deref(), overrides)?;
    let units = config
        .input
        .units
        .as_deref()
        .ok_or_else(|| Error::Config("no units table; set input.units or pass --units".into()))?;
    let domain = load_domain(units, config.input.edges.as_deref(), &config.columns)?;
    let chains = run_chains(&domain, &config.hyperparams(), &config.run_settings(), config.n_chains)?;
    let summary = posterior_summary(&chains)?;
    let outcome = match diagnose(&chains, config.threshold) {
        Ok(r) => DiagnosticsOutcome::Report(r),
        Err(e) => DiagnosticsOutcome::Failed {
            error: single_line(&e.to_string()),
        },
    };
    write_outputs(&config.output_dir, &config, &domain, &chains, &outcome, &summary)?;
    match &outcome {
        DiagnosticsOutcome::Report(r) => emitln!(
            "fit variant={} chains={} draws={} mpsrf={} out={}",
            config.variant,
            r.chains,
            r.draws_per_chain,
            r.mpsrf,
            config.output_dir.display()
        ),
        DiagnosticsOutcome::Failed { error } => eprintln!("warning kind=diagnostics msg={error}"),
    }
    if outcome.passed() {
        Ok(EXIT_OK)
    } else {
        if let Some(r) = outcome.report() {
            eprintln!(
                "warning kind=convergence msg=mpsrf {} is not below {}",
                r.mpsrf, r.threshold
            );
        }
        Ok(EXIT_UNCONVERGED)
    }
}

fn simulate(args: &SimulateArgs) -> Result<i32> {
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    if let Some(units) = &args.units {
        return simulate_pseudo(args, units);
    }
    let spec = match &args.scenario {
        Some(s) => ScenarioSpec::parse(s)?,
        None => return Err(Error::Config("pass --scenario or --units".into())),
    };
    let (geometry, network, data) = comparison_dataset(&spec, args.n_units, args.seed, 0, args.replicate)?;
    let columns = ColumnSpec {
        covariates: vec!["log_housing_cost".into()],
        ..ColumnSpec::default()
    };
    let se = vec![spec.sigma2_y_true.sqrt(); geometry.n()];
    let covariate = geometry.x.column(1).iter().copied().collect::<Vec<_>>();
    let ids = &geometry.unit_ids;
    write_units_table(
        &args.out.join("units.csv"),
        &columns,
        ids,
        &geometry.centroids,
        data.y.as_slice(),
        &se,
        &[("log_housing_cost".into(), covariate)],
    )?;
    write_edge_list(&args.out.join("edges.csv"), ids, &geometry.geo_adjacency)?;
    write_edge_list(&args.out.join("true_edges.csv"), ids, &network.adjacency.to_matrix())?;
    let z = network.positions.rows();
    let (z1, z2): (Vec<f64>, Vec<f64>) = z.iter().map(|p| (p[0], p[1])).unzip();
    write_keyed_table(
        &args.out.join("truth.csv"),
        ids,
        &[
            ("y", data.y.as_slice()),
            ("mu", data.mu.as_slice()),
            ("eps", data.eps.as_slice()),
            ("z1", &z1),
            ("z2", &z2),
        ],
    )?;
    write_input_config(&args.out.join("config.toml"), &columns, true)?;
    emitln!(
        "simulate scenario={} units={} edges={} out={}",
        spec.name,
        geometry.n(),
        network.adjacency.edge_count(),
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn simulate_pseudo(args: &SimulateArgs, units: &std::path::Path) -> Result<i32> {
    let columns = match &args.config {
        Some(p) => parse_config(Some(p), &ConfigOverrides::default())?.columns,
        None => ColumnSpec::default(),
    };
    let domain = load_domain(units, args.edges.as_deref(), &columns)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::inference::sub_seed(args.seed, args.replicate));
    let y = gen_pseudo_data(&domain.y, &domain.var_y, &mut rng);
    let se: Vec<f64> = domain.var_y.iter().map(|v| v.sqrt()).collect();
    let mut extra: Vec<(String, Vec<f64>)> = (1..domain.p())
        .map(|j| (format!("x{j}"), domain.x.column(j).iter().copied().collect()))
        .collect();
    extra.extend((0..domain.k()).map(|c| (format!("s{}", c + 1), domain.s.iter().map(|s| s[(0, c)]).collect())));
    let out_columns = ColumnSpec {
        covariates: (1..domain.p()).map(|j| format!("x{j}")).collect(),
        position_covariates: (0..domain.k()).map(|c| format!("s{}", c + 1)).collect(),
        ..ColumnSpec::default()
    };
    let ids = &domain.unit_ids;
    write_units_table(
        &args.out.join("units.csv"),
        &out_columns,
        ids,
        &domain.centroids,
        y.as_slice(),
        &se,
        &extra,
    )?;
    if let Some(geo) = &domain.geo_adjacency {
        write_edge_list(&args.out.join("edges.csv"), ids, geo)?;
    }
    write_keyed_table(&args.out.join("truth.csv"), ids, &[("y", y.as_slice())])?;
    write_input_config(&args.out.join("config.toml"), &out_columns, domain.geo_adjacency.is_some())?;
    emitln!("simulate pseudo units={} out={}", domain.n(), args.out.display());
    Ok(EXIT_OK)
}

fn compare(args: &CompareArgs) -> Result<i32> {
    let settings = StudySettings {
        n_units: args.n_units,
        n_chains: args.chains,
        run: RunSettings {
            iterations: args.iterations,
            burn_in: args.burn_in,
            seed: args.seed,
            ..RunSettings::default()
        },
        ..StudySettings::default()
    };
    settings.run.validate()?;
    let table = if args.empirical {
        let base = match &args.units {
            Some(units) => {
                let columns = match &args.config {
                    Some(p) => parse_config(Some(p), &ConfigOverrides::default())?.columns,
                    None => ColumnSpec::default(),
                };
                load_domain(units, args.edges.as_deref(), &columns)?
            }
            None => standin_survey_domain(args.n_units, args.seed)?,
        };
        run_empirical_study(&base, &args.variants, args.replicates, &settings)?
    } else {
        let scenarios = if args.scenario.is_empty() {
            ScenarioSpec::model_based_all()
        } else {
            args.scenario.iter().map(|s| ScenarioSpec::parse(s)).collect::<Result<Vec<_>>>()?
        };
        run_comparison(&scenarios, &args.variants, args.replicates, &settings)?
    };
    let csv = table.to_csv();
    match &args.out {
        Some(path) => fs::write(path, &csv).map_err(|e| Error::io(path, e))?,
        None => emit(&csv),
    }
    for cell in table.cells.iter().filter(|c| !c.failures.is_empty()) {
        for f in &cell.failures {
            eprintln!(
                "warning kind=fit_failed msg=scenario {} variant {} {}",
                cell.scenario,
                cell.variant,
                single_line(f)
            );
        }
    }
    Ok(EXIT_OK)
}
