//! Command-line pipeline: configuration merging, the four commands, and
//! report emission. All commands are pure functions of (config, input
//! files, seed); rerunning produces identical bytes, independent of the
//! thread cap.

pub mod config;
pub mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use stackdid::design::{
    balance_table, build_design_matrix, entropy_balance, nn_match, BalanceTable, DesignWeights,
};
use stackdid::estimator::event_study;
use stackdid::panel::{load_panel_path, PanelData, PanelSchema};
use stackdid::simulate::{monte_carlo, simulate_panel, DgpParams, EstimatorKind, McOptions};
use stackdid::stacking::{build_absorbing, build_episodes, StackPlan};
use stackdid::weights::{corrective_weights, effective_mass};
use stackdid::Error;

pub use config::RunConfig;

/// Exit codes: 0 success, 1 estimation failure, 2 input/config error.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Estimation(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Estimation(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Estimation(m) => m,
        }
    }

    fn from_input(e: Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_)
            | Error::Csv(_)
            | Error::MissingColumn(_)
            | Error::Row { .. }
            | Error::DuplicateKeys(_)
            | Error::InvalidTreatment { .. }
            | Error::NonMonotoneTreatment { .. }
            | Error::UnknownUnit(_)
            | Error::UnknownCovariate(_)
            | Error::InvalidWindow(_)
            | Error::InvalidSpec(_) => CliError::Input(e.to_string()),
            Error::EmptyStack(_)
            | Error::Design { .. }
            | Error::NoConvergence { .. }
            | Error::Degenerate { .. }
            | Error::Estimation(_)
            | Error::Bootstrap(_) => CliError::Estimation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "stackdid",
    version,
    about = "Design-weighted stacked difference-in-differences estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate an event study from a panel data file.
    Estimate(EstimateArgs),
    /// Print design diagnostics: frames, drops, balance, weight spread.
    Diagnose(EstimateArgs),
    /// Simulate one panel from the built-in data-generating process.
    Simulate(SimulateArgs),
    /// Run the Monte Carlo comparison of the estimator menu.
    Montecarlo(MontecarloArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimateArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Panel data file (delimited text with a header row).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub unit: Option<String>,
    #[arg(long)]
    pub time: Option<String>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    /// Covariate columns to load, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Field separator: "," or "tab".
    #[arg(long)]
    pub sep: Option<String>,

    /// absorbing | episode01 | episode10
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub kappa_pre: Option<u32>,
    #[arg(long)]
    pub kappa_post: Option<u32>,
    /// Treatment-history lags (episode modes).
    #[arg(long)]
    pub lags: Option<u32>,
    /// Relax treated stability to onset only (episode modes).
    #[arg(long)]
    pub onset_only: bool,

    /// uniform | match | ebalance
    #[arg(long)]
    pub design: Option<String>,
    /// Controls matched per treated unit.
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Match with replacement (true/false).
    #[arg(long)]
    pub replace: Option<bool>,
    /// mahalanobis | rank-mahalanobis
    #[arg(long)]
    pub distance: Option<String>,
    #[arg(long)]
    pub caliper: Option<f64>,
    /// Outcome lags entering the design matrix, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub outcome_lags: Option<Vec<u32>>,
    /// Covariate lags as "name:1,2;other:1".
    #[arg(long)]
    pub covariate_lags: Option<String>,
    /// Exact-match covariates, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub exact: Option<Vec<String>>,
    /// Covariates to log-transform, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub log: Option<Vec<String>>,
    /// Entropy balancing tolerance.
    #[arg(long)]
    pub balance_tol: Option<f64>,

    /// analytic | bootstrap | none
    #[arg(long)]
    pub se: Option<String>,
    /// Bootstrap replicates.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// unit | frame-unit
    #[arg(long)]
    pub cluster: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cap on parallel workers; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,

    /// Output prefix: writes <out>.csv and <out>.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write an SVG event-study chart.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of units.
    #[arg(long)]
    pub units: Option<usize>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct MontecarloArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Number of units per replicate.
    #[arg(long)]
    pub units: Option<usize>,
    /// Estimators: comma separated among sdid, wsdid, cbsdid_match,
    /// cbsdid_ebal.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// Output prefix: writes <out>.csv and <out>_manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

fn parse_covariate_lags(raw: &str) -> Result<BTreeMap<String, Vec<u32>>, CliError> {
    let mut out = BTreeMap::new();
    for part in raw.split(';').filter(|p| !p.trim().is_empty()) {
        let (name, lags) = part.split_once(':').ok_or_else(|| {
            CliError::Input(format!("covariate lags `{part}` must look like name:1,2,3"))
        })?;
        let lags = lags
            .split(',')
            .map(|l| l.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Input(format!("bad lag list in `{part}`: {e}")))?;
        out.insert(name.trim().to_string(), lags);
    }
    Ok(out)
}

/// Layer the CLI flags over the (optional) config file over the defaults.
pub fn merge_config(args: &EstimateArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    macro_rules! overlay {
        ($($field:ident),*) => {
            $(if let Some(v) = &args.$field { cfg.$field = Some(v.clone()); })*
        };
    }
    macro_rules! overlay_value {
        ($($field:ident),*) => {
            $(if let Some(v) = &args.$field { cfg.$field = v.clone(); })*
        };
    }
    overlay!(data, lags, caliper, threads, out, plot);
    overlay_value!(
        unit,
        time,
        outcome,
        treatment,
        covariates,
        sep,
        mode,
        kappa_pre,
        kappa_post,
        design,
        ratio,
        replace,
        distance,
        outcome_lags,
        exact,
        log,
        balance_tol,
        se,
        bootstrap,
        cluster,
        seed
    );
    if args.onset_only {
        cfg.onset_only = true;
    }
    if let Some(raw) = &args.covariate_lags {
        cfg.covariate_lags = parse_covariate_lags(raw)?;
    }
    Ok(cfg)
}

fn with_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Input(format!("cannot build thread pool: {e}")))?
            .install(f),
    }
}

struct Pipeline {
    panel: PanelData,
    plan: StackPlan,
    designs: Vec<DesignWeights>,
    balance: Vec<(String, BalanceTable)>,
}

fn run_pipeline(cfg: &RunConfig) -> Result<Pipeline, CliError> {
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Input("no input data file (--data)".into()))?;
    let schema: PanelSchema = cfg.schema()?;
    let panel = load_panel_path(&data, &schema)?;

    let window = cfg.window()?;
    let plan = match cfg.direction()? {
        None => build_absorbing(&panel, window)?,
        Some(direction) => {
            let lags = cfg
                .lags
                .ok_or_else(|| CliError::Input("episode modes require --lags >= 1".into()))?;
            build_episodes(&panel, window, lags, direction, cfg.onset_only)?
        }
    };

    let spec = cfg.covariate_spec();
    let designs: Vec<DesignWeights> = match cfg.design.as_str() {
        "uniform" => plan.frames.iter().map(DesignWeights::uniform).collect(),
        "match" => {
            let opts = cfg.nn_options()?;
            plan.frames
                .iter()
                .map(|frame| {
                    let dm = build_design_matrix(&panel, frame, &spec, Default::default())?;
                    nn_match(&dm, &opts)
                })
                .collect::<stackdid::Result<_>>()?
        }
        "ebalance" => {
            let opts = cfg.ebal_options()?;
            plan.frames
                .iter()
                .map(|frame| {
                    let dm = build_design_matrix(&panel, frame, &spec, Default::default())?;
                    entropy_balance(&dm, &opts)
                })
                .collect::<stackdid::Result<_>>()?
        }
        other => {
            return Err(CliError::Input(format!(
                "unknown design `{other}` (uniform | match | ebalance)"
            )));
        }
    };

    // Balance tables for reporting (recomputed for uniform designs too, when
    // a covariate spec exists).
    let mut balance = Vec::new();
    if !spec.is_empty() {
        for (frame, design) in plan.frames.iter().zip(&designs) {
            let dm = build_design_matrix(&panel, frame, &spec, Default::default())?;
            balance.push((frame.key.to_string(), balance_table(&dm, design)));
        }
    }

    Ok(Pipeline {
        panel,
        plan,
        designs,
        balance,
    })
}

#[derive(Serialize)]
struct EstimateDocument<'a> {
    result: &'a stackdid::EventStudyResult,
    balance: Vec<BalanceDocument<'a>>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct BalanceDocument<'a> {
    frame: &'a str,
    table: &'a BalanceTable,
}

#[derive(Serialize)]
struct DiagnoseDocument<'a> {
    plan: stackdid::stacking::PlanDiagnostics,
    balance: Vec<BalanceDocument<'a>>,
    config: &'a RunConfig,
}

fn write_text(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let cfg = merge_config(args)?;
    with_pool(cfg.threads, || {
        let pipeline = run_pipeline(&cfg)?;
        let opts = cfg.estimate_options()?;
        let result = event_study(&pipeline.panel, &pipeline.plan, &pipeline.designs, &opts)?;

        let csv = result.to_csv_string();
        match &cfg.out {
            Some(prefix) => {
                let doc = EstimateDocument {
                    result: &result,
                    balance: pipeline
                        .balance
                        .iter()
                        .map(|(frame, table)| BalanceDocument { frame, table })
                        .collect(),
                    config: &cfg,
                };
                let mut json = serde_json::to_string_pretty(&doc).expect("serializable document");
                json.push('\n');
                write_text(&prefix.with_extension("csv"), &csv)?;
                write_text(&prefix.with_extension("json"), &json)?;
            }
            None => print!("{csv}"),
        }
        if let Some(path) = &cfg.plot {
            write_text(path, &plot::event_study_svg(&result))?;
        }
        Ok(())
    })
}

fn gini(weights: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = weights.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite weight"));
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 || sorted.len() < 2 {
        return 0.0;
    }
    let weighted_rank_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, w)| (2.0 * (i as f64 + 1.0) - n - 1.0) * w)
        .sum();
    weighted_rank_sum / (n * total)
}

pub fn cmd_diagnose(args: &EstimateArgs) -> Result<(), CliError> {
    let cfg = merge_config(args)?;
    let report = with_pool(cfg.threads, || {
        let pipeline = run_pipeline(&cfg)?;
        let mass = effective_mass(&pipeline.plan, &pipeline.designs)?;
        let final_weights = corrective_weights(&pipeline.plan, &pipeline.designs, &mass)?;

        let mut out = String::new();
        let (n_treated, n_controls) = pipeline.plan.totals();
        let _ = writeln!(
            out,
            "stack: mode={} frames={} treated={} controls={} effective_mass={:.6}",
            pipeline.plan.mode,
            pipeline.plan.frames.len(),
            n_treated,
            n_controls,
            mass.total
        );
        for (idx, frame) in pipeline.plan.frames.iter().enumerate() {
            let _ = writeln!(
                out,
                "frame {}: anchor={} treated={} controls={} effective_mass={:.6}{}",
                frame.key,
                frame.anchor,
                frame.n_treated(),
                frame.n_controls(),
                mass.per_frame[idx],
                if frame.treated_dropped.is_empty() {
                    String::new()
                } else {
                    format!(" treated_dropped={}", frame.treated_dropped.len())
                }
            );
        }
        if pipeline.plan.dropped.is_empty() {
            let _ = writeln!(out, "dropped: none");
        } else {
            for (key, reason) in &pipeline.plan.dropped {
                let _ = writeln!(out, "dropped {key}: {reason}");
            }
        }

        for (frame, table) in &pipeline.balance {
            let _ = writeln!(out, "balance {frame}:");
            let _ = writeln!(
                out,
                "  {:<12} {:>10} {:>10} {:>10} {:>10} {:>10}",
                "column", "treated", "control", "weighted", "smd_before", "smd_after"
            );
            for row in &table.rows {
                let _ = writeln!(
                    out,
                    "  {:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}{}",
                    row.column,
                    row.treated_mean,
                    row.control_mean,
                    row.control_mean_weighted,
                    row.smd_before,
                    row.smd_after,
                    if row.flagged { "  [flagged]" } else { "" }
                );
            }
        }

        let control_weights: Vec<f64> = (0..pipeline.plan.frames.len())
            .flat_map(|idx| {
                final_weights.controls[idx]
                    .values()
                    .map(|&(_, w)| w)
                    .collect::<Vec<_>>()
            })
            .collect();
        let min = control_weights
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let max = control_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            "control weights: n={} min={:.6} max={:.6} gini={:.4}",
            control_weights.len(),
            min,
            max,
            gini(&control_weights)
        );
        for design in &pipeline.designs {
            for warning in &design.warnings {
                let _ = writeln!(out, "warning [{}]: {warning}", design.frame_key);
            }
        }

        if let Some(prefix) = &cfg.out {
            let doc = DiagnoseDocument {
                plan: pipeline.plan.diagnostics(&pipeline.panel),
                balance: pipeline
                    .balance
                    .iter()
                    .map(|(frame, table)| BalanceDocument { frame, table })
                    .collect(),
                config: &cfg,
            };
            let mut json = serde_json::to_string_pretty(&doc).expect("serializable");
            json.push('\n');
            write_text(&prefix.with_extension("json"), &json)?;
            let mut weights_csv = Vec::new();
            final_weights
                .write_csv(&mut weights_csv, &pipeline.plan, &pipeline.panel)
                .map_err(CliError::from)?;
            write_text(
                &prefix.with_extension("weights.csv"),
                std::str::from_utf8(&weights_csv).expect("utf8 csv"),
            )?;
        }
        Ok(out)
    })?;
    print!("{report}");
    Ok(())
}

fn sim_params(units: Option<usize>) -> DgpParams {
    match units {
        Some(n) => DgpParams {
            n_units: n,
            ..Default::default()
        },
        None => DgpParams::default(),
    }
}

fn sim_schema() -> PanelSchema {
    PanelSchema {
        outcome: "y".into(),
        treatment: "d".into(),
        covariates: vec!["x1".into(), "x2".into()],
        ..Default::default()
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let params = sim_params(args.units);
    let seed = args.seed.unwrap_or(0);
    let panel = simulate_panel(&params, seed)?;
    match &args.out {
        Some(path) => panel
            .write_csv_path(path, &sim_schema())
            .map_err(CliError::from)?,
        None => {
            let mut buf = Vec::new();
            panel.write_csv(&mut buf, &sim_schema())?;
            print!("{}", String::from_utf8(buf).expect("utf8 csv"));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct McManifest<'a> {
    seed: u64,
    params: &'a DgpParams,
    options: &'a McOptions,
    failures: &'a [(String, usize)],
    reps_requested: usize,
}

fn parse_estimators(names: &[String]) -> Result<Vec<EstimatorKind>, CliError> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "sdid" => Ok(EstimatorKind::Sdid),
            "wsdid" => Ok(EstimatorKind::Wsdid),
            "cbsdid_match" => Ok(EstimatorKind::BalancedMatch),
            "cbsdid_ebal" => Ok(EstimatorKind::BalancedEbal),
            other => Err(CliError::Input(format!(
                "unknown estimator `{other}` (sdid | wsdid | cbsdid_match | cbsdid_ebal)"
            ))),
        })
        .collect()
}

pub fn cmd_montecarlo(args: &MontecarloArgs) -> Result<(), CliError> {
    let params = sim_params(args.units);
    let mut opts = McOptions {
        seed: args.seed.unwrap_or(0),
        ..Default::default()
    };
    if let Some(reps) = args.reps {
        opts.reps = reps;
    }
    if let Some(names) = &args.estimators {
        opts.estimators = parse_estimators(names)?;
    }

    let result = with_pool(args.threads, || {
        monte_carlo(&params, &opts).map_err(CliError::from)
    })?;

    let csv = result.to_csv_string();
    let manifest = McManifest {
        seed: opts.seed,
        params: &params,
        options: &opts,
        failures: &result.failures,
        reps_requested: result.reps_requested,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    json.push('\n');
    match &args.out {
        Some(prefix) => {
            write_text(&prefix.with_extension("csv"), &csv)?;
            let manifest_path = prefix.with_file_name(format!(
                "{}_manifest.json",
                prefix
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("montecarlo")
            ));
            write_text(&manifest_path, &json)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Montecarlo(args) => cmd_montecarlo(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {}", err.message());
            err.code()
        }
    }
}
