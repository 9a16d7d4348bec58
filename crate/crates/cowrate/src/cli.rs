//! Command-line front end: flag and config-file parsing, sweep
//! orchestration, and deterministic CSV/JSON emission of rate curves.
//!
//! The binary is a thin wrapper over [`main_with`]; everything here is
//! ordinary library code so the argument handling and the serialization
//! can be tested directly. Output is plot-ready data, one record per loss
//! point followed by a summary record with the located cutoff.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Parser;

use crate::channel::{ChannelParams, DEFAULT_EPSILON, DEFAULT_E_D, DEFAULT_E_M};
use crate::keyrate::{
    sweep_and_cutoff, IntensityChoice, SweepOutcome, SweepSpec, DEFAULT_MU_RANGE,
    DEFAULT_SDP_TOL,
};
use crate::protocol::{BlockConfig, PhaseMode};

// ====================================================================
// Exit codes
// ====================================================================

pub const EXIT_OK: i32 = 0;
/// Unknown flag, out-of-range value, or malformed config file.
pub const EXIT_USAGE: i32 = 2;
/// The sweep itself failed: no grid point produced a result.
pub const EXIT_NUMERIC: i32 = 3;
/// Some grid points failed; the emitted curve has gaps flagged as `nan`.
pub const EXIT_PARTIAL: i32 = 4;

// ====================================================================
// Argument surface
// ====================================================================

const LONG_ABOUT: &str = "Certified key-rate curves for coherent-one-way QKD.\n\
Writes one record per loss point (columns: loss_db, mu, m, G, e_bar, \
delta_max, rate_per_pulse, solver_gap) plus a summary record with the \
rate cutoff. All floating-point fields carry 12 significant digits and \
runs are byte-identical for identical configuration.";

/// Command-line flags. Every field is optional; [`resolve`] layers them
/// over config-file entries and the built-in defaults.
#[derive(Parser, Debug, Clone, Default)]
#[command(name = "cowrate", version, about = LONG_ABOUT)]
pub struct Cli {
    /// Flat key-value config file (`key = value` per line, keys identical
    /// to the long flag names, `#` comments). Flags override file entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Block preparation: `pure` (one shared phase) or `randomized`.
    #[arg(long, value_name = "MODE")]
    pub mode: Option<String>,
    /// Key bits per block (2m optical pulses).
    #[arg(long, value_name = "BITS")]
    pub m: Option<usize>,
    /// Highest exactly-tagged photon number in randomized mode.
    #[arg(long, value_name = "N")]
    pub ncut: Option<usize>,
    /// Dark count probability per slot per detector.
    #[arg(long, value_name = "PROB")]
    pub dark: Option<f64>,
    /// Data-line intrinsic flip probability.
    #[arg(long, value_name = "PROB")]
    pub ed: Option<f64>,
    /// Monitoring-line wrong-port probability.
    #[arg(long, value_name = "PROB")]
    pub em: Option<f64>,
    /// First total system loss of the grid, in dB.
    #[arg(long = "loss-start", value_name = "DB")]
    pub loss_start: Option<f64>,
    /// Last total system loss of the grid, in dB.
    #[arg(long = "loss-end", value_name = "DB")]
    pub loss_end: Option<f64>,
    /// Loss grid spacing, in dB.
    #[arg(long = "loss-step", value_name = "DB")]
    pub loss_step: Option<f64>,
    /// Fixed pulse intensity μ = α² for every grid point.
    #[arg(long, value_name = "MU", conflicts_with = "optimize_mu")]
    pub mu: Option<f64>,
    /// Optimize the intensity per loss point over `lo:hi`.
    #[arg(long = "optimize-mu", value_name = "LO:HI")]
    pub optimize_mu: Option<String>,
    /// Relative duality-gap target for the estimation SDP.
    #[arg(long, value_name = "GAP")]
    pub tol: Option<f64>,
    /// Output path; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Output encoding: `csv` or `json`.
    #[arg(long, value_name = "FMT")]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Fully resolved run parameters.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub m: usize,
    pub mode: PhaseMode,
    pub epsilon: f64,
    pub e_d: f64,
    pub e_m: f64,
    pub losses_db: Vec<f64>,
    pub intensity: IntensityChoice,
    pub sdp_tol: f64,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ====================================================================
// Config file and precedence
// ====================================================================

/// Parse a flat key-value config file into the same optional-field shape
/// as the command line. Keys are the long flag names; `#` starts a
/// comment; later entries override earlier ones.
pub fn parse_config_file(text: &str) -> Result<Cli, CliError> {
    let mut out = Cli::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(usage(format!("config line {}: empty value for `{key}`", lineno + 1)));
        }
        match key {
            "mode" => out.mode = Some(value.to_string()),
            "m" => out.m = Some(parse_num(key, value)?),
            "ncut" => out.ncut = Some(parse_num(key, value)?),
            "dark" => out.dark = Some(parse_num(key, value)?),
            "ed" => out.ed = Some(parse_num(key, value)?),
            "em" => out.em = Some(parse_num(key, value)?),
            "loss-start" => out.loss_start = Some(parse_num(key, value)?),
            "loss-end" => out.loss_end = Some(parse_num(key, value)?),
            "loss-step" => out.loss_step = Some(parse_num(key, value)?),
            "mu" => out.mu = Some(parse_num(key, value)?),
            "optimize-mu" => out.optimize_mu = Some(value.to_string()),
            "tol" => out.tol = Some(parse_num(key, value)?),
            "out" => out.out = Some(PathBuf::from(value)),
            "format" => out.format = Some(value.to_string()),
            other => return Err(usage(format!("config line {}: unknown key `{other}`", lineno + 1))),
        }
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_mu_range(text: &str) -> Result<(f64, f64), CliError> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| usage(format!("expected `lo:hi` for --optimize-mu, got `{text}`")))?;
    Ok((parse_num("optimize-mu", lo.trim())?, parse_num("optimize-mu", hi.trim())?))
}

/// Layer command-line flags over config-file entries and defaults, and
/// validate every parameter by constructing the domain types it feeds.
pub fn resolve(cli: &Cli, file: &Cli) -> Result<RunConfig, CliError> {
    let pick = |a: &Option<String>, b: &Option<String>| a.clone().or_else(|| b.clone());

    let m = cli.m.or(file.m).unwrap_or(3);
    let n_cut = cli.ncut.or(file.ncut).unwrap_or(2);
    let mode = match pick(&cli.mode, &file.mode).as_deref().unwrap_or("pure") {
        "pure" => PhaseMode::Pure,
        "randomized" => PhaseMode::Randomized { n_cut },
        other => return Err(usage(format!("mode must be `pure` or `randomized`, got `{other}`"))),
    };
    let epsilon = cli.dark.or(file.dark).unwrap_or(DEFAULT_EPSILON);
    let e_d = cli.ed.or(file.ed).unwrap_or(DEFAULT_E_D);
    let e_m = cli.em.or(file.em).unwrap_or(DEFAULT_E_M);

    let start = cli.loss_start.or(file.loss_start).unwrap_or(0.0);
    let end = cli.loss_end.or(file.loss_end).unwrap_or(25.0);
    let step = cli.loss_step.or(file.loss_step).unwrap_or(1.0);
    let losses_db = loss_grid(start, end, step)?;

    // Flags override the file's whole intensity policy, not key by key:
    // `--mu` must silence a file-side `optimize-mu` and vice versa.
    let cli_range = cli.optimize_mu.as_deref().map(parse_mu_range).transpose()?;
    let file_range = file.optimize_mu.as_deref().map(parse_mu_range).transpose()?;
    let intensity = match (cli.mu, cli_range, file.mu, file_range) {
        (Some(_), Some(_), _, _) => {
            return Err(usage("--mu and --optimize-mu are mutually exclusive"));
        }
        (Some(mu), None, _, _) => IntensityChoice::Fixed(mu),
        (None, Some((lo, hi)), _, _) => IntensityChoice::Optimize { lo, hi },
        (None, None, Some(_), Some(_)) => {
            return Err(usage("config file sets both `mu` and `optimize-mu`"));
        }
        (None, None, Some(mu), None) => IntensityChoice::Fixed(mu),
        (None, None, None, Some((lo, hi))) => IntensityChoice::Optimize { lo, hi },
        (None, None, None, None) => {
            IntensityChoice::Optimize { lo: DEFAULT_MU_RANGE.0, hi: DEFAULT_MU_RANGE.1 }
        }
    };

    let sdp_tol = cli.tol.or(file.tol).unwrap_or(DEFAULT_SDP_TOL);
    if !(sdp_tol.is_finite() && sdp_tol > 0.0) {
        return Err(usage(format!("tol must be positive, got {sdp_tol}")));
    }
    let format = match pick(&cli.format, &file.format).as_deref().unwrap_or("csv") {
        "csv" => OutputFormat::Csv,
        "json" => OutputFormat::Json,
        other => return Err(usage(format!("format must be `csv` or `json`, got `{other}`"))),
    };

    // Validate physics parameters eagerly so range errors are usage errors,
    // not mid-sweep failures.
    ChannelParams::from_loss_db(start, epsilon, e_d, e_m)
        .map_err(|e| usage(e.to_string()))?;
    match intensity {
        IntensityChoice::Fixed(mu) => {
            if !(mu.is_finite() && 0.0 < mu && mu <= 1.0) {
                return Err(usage(format!("mu = {mu} must lie in (0, 1]")));
            }
            BlockConfig::with_mode(m, mu, mode).map_err(|e| usage(e.to_string()))?;
        }
        IntensityChoice::Optimize { lo, hi } => {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi && hi <= 1.0) {
                return Err(usage(format!(
                    "optimize-mu range ({lo}, {hi}) must satisfy 0 < lo < hi <= 1"
                )));
            }
            BlockConfig::with_mode(m, hi, mode).map_err(|e| usage(e.to_string()))?;
        }
    }

    Ok(RunConfig {
        m,
        mode,
        epsilon,
        e_d,
        e_m,
        losses_db,
        intensity,
        sdp_tol,
        out: cli.out.clone().or_else(|| file.out.clone()),
        format,
    })
}

fn loss_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>, CliError> {
    if !(start.is_finite() && end.is_finite() && step.is_finite()) {
        return Err(usage("loss grid bounds must be finite"));
    }
    if start < 0.0 {
        return Err(usage(format!("loss-start {start} dB must be nonnegative")));
    }
    if end < start {
        return Err(usage(format!("loss-end {end} dB is below loss-start {start} dB")));
    }
    if step <= 0.0 {
        return Err(usage(format!("loss-step {step} dB must be positive")));
    }
    let count = ((end - start) / step + 1.5).floor() as usize;
    if count > 100_000 {
        return Err(usage(format!("loss grid has {count} points; cap is 100000")));
    }
    let mut grid: Vec<f64> =
        (0..count).map(|k| start + step * k as f64).filter(|&l| l <= end + 1e-9 * step).collect();
    if let Some(last) = grid.last_mut() {
        if (*last - end).abs() <= 1e-9 * step {
            *last = end;
        }
    }
    Ok(grid)
}

// ====================================================================
// Deterministic rendering
// ====================================================================

pub const CSV_HEADER: &str = "loss_db,mu,m,G,e_bar,delta_max,rate_per_pulse,solver_gap";

/// Fixed-format float: 12 significant digits, scientific notation. The
/// same spelling is used in CSV and JSON so the two encodings carry
/// identical numeric content.
fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.11e}")
    }
}

fn fmt_json_float(x: f64) -> String {
    if x.is_nan() {
        "null".into()
    } else {
        format!("{x:.11e}")
    }
}

pub fn render_csv(outcome: &SweepOutcome) -> String {
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for p in &outcome.points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            fmt_float(p.loss_db),
            fmt_float(p.mu),
            p.m,
            fmt_float(p.gain),
            fmt_float(p.e_bar),
            fmt_float(p.delta_max),
            fmt_float(p.rate_per_pulse),
            fmt_float(p.solver_gap),
        );
    }
    let cutoff = match outcome.cutoff_loss_db {
        Some(c) => fmt_float(c),
        None => "none".into(),
    };
    let _ = writeln!(s, "# cutoff_loss_db,{cutoff},cutoff_at_grid_end,{}", outcome.cutoff_at_grid_end);
    s
}

pub fn render_json(outcome: &SweepOutcome) -> String {
    let mut s = String::from("{\n  \"points\": [\n");
    for (k, p) in outcome.points.iter().enumerate() {
        let _ = write!(
            s,
            "    {{\"loss_db\": {}, \"mu\": {}, \"m\": {}, \"G\": {}, \"e_bar\": {}, \
             \"delta_max\": {}, \"rate_per_pulse\": {}, \"solver_gap\": {}}}",
            fmt_json_float(p.loss_db),
            fmt_json_float(p.mu),
            p.m,
            fmt_json_float(p.gain),
            fmt_json_float(p.e_bar),
            fmt_json_float(p.delta_max),
            fmt_json_float(p.rate_per_pulse),
            fmt_json_float(p.solver_gap),
        );
        s.push_str(if k + 1 < outcome.points.len() { ",\n" } else { "\n" });
    }
    let cutoff = match outcome.cutoff_loss_db {
        Some(c) => fmt_json_float(c),
        None => "null".into(),
    };
    let _ = write!(
        s,
        "  ],\n  \"cutoff_loss_db\": {cutoff},\n  \"cutoff_at_grid_end\": {}\n}}\n",
        outcome.cutoff_at_grid_end
    );
    s
}

// ====================================================================
// Entry point
// ====================================================================

/// Run a resolved sweep and emit the artifact. Returns the process exit
/// code: 0 on success, 3 when nothing succeeded, 4 on partial results.
pub fn run(cfg: &RunConfig) -> Result<i32, CliError> {
    let spec = SweepSpec {
        m: cfg.m,
        mode: cfg.mode,
        epsilon: cfg.epsilon,
        e_d: cfg.e_d,
        e_m: cfg.e_m,
        losses_db: cfg.losses_db.clone(),
        intensity: cfg.intensity,
        sdp_tol: cfg.sdp_tol,
    };
    let outcome = sweep_and_cutoff(&spec).map_err(|e| CliError::Numeric(e.to_string()))?;
    let rendered = match cfg.format {
        OutputFormat::Csv => render_csv(&outcome),
        OutputFormat::Json => render_json(&outcome),
    };
    match &cfg.out {
        Some(path) => std::fs::write(path, rendered)
            .map_err(|e| CliError::Numeric(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{rendered}"),
    }
    for (idx, reason) in &outcome.failures {
        eprintln!("point {} (loss {} dB) failed: {reason}", idx, spec.losses_db[*idx]);
    }
    if outcome.failures.len() == outcome.points.len() {
        Ok(EXIT_NUMERIC)
    } else if outcome.failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_PARTIAL)
    }
}

/// Full front-end pass for already-parsed flags: load the config file if
/// any, resolve precedence, run, report errors on stderr.
pub fn main_with(cli: Cli) -> i32 {
    let file = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match parse_config_file(&text) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("error: {e}");
                    return e.exit_code();
                }
            },
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return EXIT_USAGE;
            }
        },
        None => Cli::default(),
    };
    let cfg = match resolve(&cli, &file) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match run(&cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ====================================================================
// Tests
// ====================================================================
