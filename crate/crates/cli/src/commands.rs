//! Subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use compadre::simulation::{aggregate, run_campaign, Method, SimSetting, Summary, TrueFunction, TruthDesign};
use compadre::{fit, FitConfig, Mode};
use nalgebra::DMatrix;

use crate::archive::{ArchiveContext, ModelArchive};
use crate::config::{parse_config, FitSettings};
use crate::data::{write_matrix, write_rows, Table};
use crate::error::{CliError, CliResult};
use crate::network::{Format, NetworkExport};

#[derive(Parser, Debug)]
#[command(name = "compadre", version, about = "Sparse additive models for correlated responses")]
pub struct Cli {
    /// Seed for fold assignment and simulation. Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model and print the selected effect types.
    Fit(FitArgs),
    /// Predict responses for new covariates.
    Predict(PredictArgs),
    /// Run a simulation campaign.
    Simulate(SimulateArgs),
    /// Write the response network implied by the fitted precision.
    ExportNetwork(ExportArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 250)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub p: usize,
    #[arg(long, default_value_t = 10)]
    pub q: usize,
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 1)]
    pub reps: u64,
    /// Comma-separated methods: compadre, padre, lasso.
    #[arg(long, default_value = "compadre")]
    pub methods: String,
    /// Truth design: random, or f1..f5 for the function-specific design.
    #[arg(long, default_value = "random")]
    pub design: String,
    /// Output directory for replicates.csv and summary.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// dot or json.
    #[arg(long, default_value = "dot")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::input("--threads must be positive"));
        }
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::Fit(args) => {
            let table = cmd_fit(&args, cli.seed)?;
            print!("{table}");
            Ok(())
        }
        Command::Predict(args) => cmd_predict(&args),
        Command::Simulate(args) => cmd_simulate(&args, cli.seed.unwrap_or(0)),
        Command::ExportNetwork(args) => cmd_export_network(&args),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Response and covariate names after applying the default covariate set.
fn roles(settings: &FitSettings, table: &Table) -> CliResult<(Vec<String>, Vec<String>)> {
    let responses = settings.responses.clone();
    for r in &responses {
        if table.column(r).is_none() {
            return Err(CliError::input(format!("missing response column '{r}'")));
        }
    }
    let covariates = match &settings.covariates {
        Some(c) => c.clone(),
        None => table.names.iter().filter(|n| !responses.contains(n)).cloned().collect(),
    };
    if covariates.is_empty() {
        return Err(CliError::input("no covariate columns"));
    }
    let mut all: Vec<&String> = responses.iter().chain(&covariates).collect();
    all.sort();
    if all.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::input("a column is named twice among responses and covariates"));
    }
    Ok((responses, covariates))
}

fn column_sd(y: &DMatrix<f64>) -> CliResult<Vec<f64>> {
    let n = y.nrows() as f64;
    y.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if sd > 0.0 && sd.is_finite() {
                Ok(sd)
            } else {
                Err(CliError::input("cannot scale a constant response"))
            }
        })
        .collect()
}

/// Response rows by covariate columns of N, L and NL.
pub fn selection_table(archive: &ModelArchive) -> String {
    let mut width = archive.responses.iter().map(|r| r.len()).max().unwrap_or(0);
    width = width.max("response".len());
    let widths: Vec<usize> = archive.covariates.iter().map(|c| c.len().max(2)).collect();
    let mut out = format!("{:<width$}", "response");
    for (c, w) in archive.covariates.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (r, row) in archive.responses.iter().zip(&archive.labels) {
        let _ = write!(out, "{r:<width$}");
        for (code, w) in row.iter().zip(&widths) {
            let _ = write!(out, "  {code:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Fit, write the archive, and return the selection table.
pub fn cmd_fit(args: &FitArgs, seed: Option<u64>) -> CliResult<String> {
    let mut settings = parse_config(&read_text(&args.config)?)?;
    if let Some(s) = seed {
        settings.fit.seed = s;
    }
    let table = Table::read(&args.data)?;
    let (responses, covariates) = roles(&settings, &table)?;
    let mut y = table.matrix(&responses)?;
    let x = table.matrix(&covariates)?;
    let response_scales = if settings.scale_responses {
        let sd = column_sd(&y)?;
        for (mut col, s) in y.column_iter_mut().zip(&sd) {
            col /= *s;
        }
        Some(sd)
    } else {
        None
    };
    let config: &FitConfig = &settings.fit;
    let report = fit(&y, &x, config)?;
    let archive = ModelArchive::from_report(
        &report,
        ArchiveContext {
            responses: &responses,
            covariates: &covariates,
            response_scales,
            joint: config.mode == Mode::Compadre && responses.len() > 1,
            interior_knots: config.interior_knots,
            gcv_grid: &config.gcv_grid,
        },
    );
    archive.save(&args.out)?;
    if !report.converged {
        log::warn!("fit stopped after {} iterations without converging", report.mse_trace.len());
    }
    Ok(selection_table(&archive))
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<()> {
    let archive = ModelArchive::load(&args.model)?;
    let table = Table::read(&args.data)?;
    let x = table.matrix(&archive.covariates)?;
    let pred = archive.predict(&x)?;
    let names: Vec<String> = archive.responses.iter().map(|r| format!("pred_{r}")).collect();
    write_matrix(&args.out, &names, &pred)
}

fn parse_methods(s: &str) -> CliResult<Vec<Method>> {
    let mut methods = Vec::new();
    for name in s.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let m = Method::parse(name).ok_or_else(|| CliError::input(format!("unknown method '{name}'")))?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(CliError::input("no methods given"));
    }
    Ok(methods)
}

fn parse_design(s: &str) -> CliResult<TruthDesign> {
    if s.eq_ignore_ascii_case("random") {
        return Ok(TruthDesign::Random);
    }
    TrueFunction::parse(s)
        .map(TruthDesign::FunctionSpecific)
        .ok_or_else(|| CliError::input(format!("unknown design '{s}' (expected random or f1..f5)")))
}

fn design_name(d: TruthDesign) -> &'static str {
    match d {
        TruthDesign::Random => "random",
        TruthDesign::FunctionSpecific(f) => f.name(),
    }
}

fn setting_fields(s: &SimSetting) -> Vec<String> {
    vec![
        s.n.to_string(),
        s.p.to_string(),
        s.q.to_string(),
        s.rho.to_string(),
        s.delta.to_string(),
        s.seed.to_string(),
        design_name(s.design).to_string(),
    ]
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_fields(s: Option<Summary>) -> [String; 2] {
    [opt(s.map(|s| s.median)), opt(s.map(|s| s.iqr))]
}

const SETTING_HEADER: [&str; 7] = ["n", "p", "q", "rho", "delta", "seed", "design"];

pub fn cmd_simulate(args: &SimulateArgs, seed: u64) -> CliResult<()> {
    let setting = SimSetting {
        n: args.n,
        p: args.p,
        q: args.q,
        rho: args.rho,
        delta: args.delta,
        seed,
        design: parse_design(&args.design)?,
    };
    setting.validate()?;
    if args.reps == 0 {
        return Err(CliError::input("--reps must be positive"));
    }
    let methods = parse_methods(&args.methods)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::input(format!("{}: {e}", args.out.display())))?;
    let rows = run_campaign(&setting, args.reps, &methods, &FitConfig::default())?;

    let mut header: Vec<&str> = SETTING_HEADER.to_vec();
    header.extend(["replicate", "method", "tpr", "fpr", "mad", "mad_ratio"]);
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut rec = setting_fields(&r.setting);
            rec.extend([
                r.replicate.to_string(),
                r.method.name().to_string(),
                opt(r.scores.tpr),
                opt(r.scores.fpr),
                r.scores.mad.to_string(),
                opt(r.mad_ratio),
            ]);
            rec
        })
        .collect();
    write_rows(&args.out.join("replicates.csv"), &header, &records)?;

    let mut header: Vec<&str> = SETTING_HEADER.to_vec();
    header.extend([
        "method",
        "replicates",
        "tpr_median",
        "tpr_iqr",
        "fpr_median",
        "fpr_iqr",
        "mad_median",
        "mad_iqr",
        "mad_ratio_median",
        "mad_ratio_iqr",
    ]);
    let records: Vec<Vec<String>> = aggregate(&rows)
        .iter()
        .map(|a| {
            let mut rec = setting_fields(&a.setting);
            rec.extend([a.method.name().to_string(), a.replicates.to_string()]);
            for s in [a.tpr, a.fpr, a.mad, a.mad_ratio] {
                rec.extend(summary_fields(s));
            }
            rec
        })
        .collect();
    write_rows(&args.out.join("summary.csv"), &header, &records)
}

pub fn cmd_export_network(args: &ExportArgs) -> CliResult<()> {
    let format = Format::parse(&args.format)?;
    let archive = ModelArchive::load(&args.model)?;
    let (_, state) = archive.restore()?;
    let net = NetworkExport::from_precision(&archive.responses, &state.precision.precision)?;
    std::fs::write(&args.out, net.render(format)?).map_err(|e| CliError::input(format!("{}: {e}", args.out.display())))
}
