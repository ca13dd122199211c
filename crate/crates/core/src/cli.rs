//! Command-line front end. Every option can also be given in a flat
//! `key = value` config file; flags win over the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand};
use thiserror::Error;

use crate::diagnostics::{
    check_ict, check_point_exposure_converse, read_point_exposure, read_treatment_table, theorem1_battery,
    verify_theorem1_battery, DiagnosticsError,
};
use crate::estimators::{EstimatorConfig, EstimatorError, EstimatorKind, InstrumentModel, TreatmentModel};
use crate::inference::{
    estimate_report, write_coverage_csv, BootstrapConfig, DgpSpec, EstimateReport, ExperimentConfig, InferenceError,
};
use crate::markov_analysis::{
    default_gamma_raw, iv_stab_growth, iv_unstab_growth, mc_iv_stab_second_moments, mc_iv_unstab_second_moment,
    mc_sra_stab_second_moment, mc_sra_unstab_second_moment, normalize_gamma, sra_stab_growth_report, sra_unstab_growth,
    write_growth_csv, AnalysisError, GrowthModel, GrowthReport, McEstimate,
};
use crate::nuisance::CovariateSpec;
use crate::panel::{fmt_f64, read_panel_csv, validate, write_panel_csv, MsmmSpec, PanelError};
use crate::simulate::{derive_seed, DgpKind, LinearDgpParams, MarkovDgpParams, SimError};

pub const JOBS_ENV: &str = "IVMSM_JOBS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    /// Argument parsing failure, already formatted by clap.
    #[error("{0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0} diagnostic check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    /// Process exit status: 2 for failed diagnostics, 1 for other errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "ivmsm", version, about = "IV estimation of marginal structural mean models")]
pub struct Cli {
    /// Worker threads (default from IVMSM_JOBS, else all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel and write it with a truth sidecar.
    Simulate(SimulateArgs),
    /// Estimate an MSMM on a panel file.
    Estimate(EstimateArgs),
    /// Monte Carlo bias and coverage experiment.
    Experiment(ExperimentArgs),
    /// Weight second-moment growth sweeps.
    AnalyzeWeights(AnalyzeArgs),
    /// Identification diagnostics on model tables or simulators.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct DgpArgs {
    /// Simulator: linear, markov or continuous.
    #[arg(long)]
    pub dgp: Option<DgpKind>,
    /// Number of periods.
    #[arg(long = "t", alias = "periods")]
    pub periods: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub nu0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub nu1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub nu2: Option<f64>,
    /// Per-period covariate loadings, comma or space separated.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<String>,
    /// Per-period latent loadings, comma or space separated.
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long = "p-l")]
    pub p_l: Option<f64>,
    #[arg(long = "p-u")]
    pub p_u: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub delta0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub delta1: Option<f64>,
    /// Slope of the Markov or continuous mean model.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Panel CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Truth sidecar path (default: `<out>.truth`).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Panel CSV path.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Truth sidecar (default: `<panel>.truth` when present).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<EstimatorKind>,
    /// Bootstrap replicates (0 disables the bootstrap).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mean model: linear (β0 + β1 Σa) or slope (β Σa).
    #[arg(long)]
    pub mean: Option<String>,
    /// Treatment model: probit or markov.
    #[arg(long)]
    pub treatment_model: Option<String>,
    /// Latent weight of the Markov treatment model.
    #[arg(long = "markov-q")]
    pub markov_q: Option<f64>,
    /// Instrument model: known or logistic.
    #[arg(long)]
    pub instrument_model: Option<String>,
    /// Known `P(Z=1)`.
    #[arg(long)]
    pub fz: Option<f64>,
    #[command(flatten)]
    pub dgp: DgpArgs,
    /// Report CSV path (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<EstimatorKind>,
    #[arg(long = "n-grid", value_delimiter = ',')]
    pub n_grid: Vec<usize>,
    #[arg(long = "t-grid", value_delimiter = ',')]
    pub t_grid: Vec<usize>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Bootstrap replicates per replication (0 disables the bootstrap).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip sandwich standard errors.
    #[arg(long)]
    pub no_sandwich: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sra_unstab, sra_stab, iv_unstab or iv_stab.
    #[arg(long)]
    pub model: Option<String>,
    /// Parameter to sweep (p_la, p_al, p, delta0, delta1, gamma0, gamma1).
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub from: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub to: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Horizons, comma separated.
    #[arg(long = "t", value_delimiter = ',')]
    pub periods: Vec<usize>,
    #[arg(long = "p-la")]
    pub p_la: Option<f64>,
    #[arg(long = "p-al")]
    pub p_al: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub delta0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub delta1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub gamma0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub gamma1: Option<f64>,
    /// Monte Carlo draws per row (0 disables the Monte Carlo columns).
    #[arg(long = "mc-n")]
    pub mc_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Treatment table (`t,cell,u,z,p0,p1,...`) or point-exposure model
    /// (`section,a,z,l,u,value`).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Run the Monte Carlo check of the weighting identity on a simulator.
    #[arg(long)]
    pub theorem1: bool,
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Multiply the compliance differences used in the weights (Markov only).
    #[arg(long = "perturb-delta", allow_hyphen_values = true)]
    pub perturb_delta: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn norm_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('-', "_")
}

/// Layered key-value settings; later layers win.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, (String, String)>,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
        let mut out = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            let key = norm_key(k);
            if key.is_empty() {
                return Err(CliError::Config(format!("{origin}:{}: empty key", i + 1)));
            }
            out.insert(key, v.trim().to_string());
        }
        Ok(out)
    }

    fn read(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Config::parse(&text, &path.display().to_string())
    }

    fn push(&mut self, layer: BTreeMap<String, String>, origin: &str) {
        for (k, v) in layer {
            self.values.insert(k, (v, origin.to_string()));
        }
    }

    /// Loads a user config, rejecting keys the subcommand does not accept.
    pub fn load(&mut self, path: Option<&Path>, subcommand: &str) -> Result<(), CliError> {
        let Some(path) = path else { return Ok(()) };
        let layer = Config::read(path)?;
        let known = known_keys(subcommand);
        if let Some(bad) = layer.keys().find(|k| !known.contains(k)) {
            return Err(CliError::Config(format!("{}: unknown key '{bad}' for {subcommand}", path.display())));
        }
        self.push(layer, &path.display().to_string());
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some((v, origin)) => {
                v.parse::<T>().map(Some).map_err(|e| CliError::Config(format!("{origin}: bad value for {key}: {e}")))
            }
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some((v, origin)) => parse_list(v)
                .map(Some)
                .map_err(|e| CliError::Config(format!("{origin}: bad value for {key}: {e}"))),
        }
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

fn known_keys(subcommand: &str) -> Vec<String> {
    let cmd = Cli::command();
    let mut keys = vec!["jobs".to_string()];
    if let Some(sub) = cmd.find_subcommand(subcommand) {
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                keys.push(norm_key(long));
            }
            if let Some(aliases) = arg.get_all_aliases() {
                keys.extend(aliases.iter().map(|a| norm_key(a)));
            }
        }
    }
    keys.retain(|k| k != "config");
    keys
}

fn pick<T: FromStr>(flag: Option<T>, cfg: &Config, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => cfg.get(key),
    }
}

fn pick_list<T: FromStr + Clone>(flag: &[T], cfg: &Config, key: &str) -> Result<Option<Vec<T>>, CliError>
where
    T::Err: Display,
{
    if flag.is_empty() {
        cfg.list(key)
    } else {
        Ok(Some(flag.to_vec()))
    }
}

fn pick_flag(flag: bool, cfg: &Config, key: &str) -> Result<bool, CliError> {
    Ok(flag || cfg.get::<bool>(key)?.unwrap_or(false))
}

fn required<T>(v: Option<T>, what: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing required option --{what}")))
}

fn dgp_spec(args: &DgpArgs, cfg: &Config) -> Result<DgpSpec, CliError> {
    let kind = pick(args.dgp, cfg, "dgp")?.unwrap_or(DgpKind::Linear);
    let periods = match pick(args.periods, cfg, "t")? {
        Some(t) => Some(t),
        None => cfg.get("periods")?,
    };
    let f = |flag: Option<f64>, key: &str, default: f64| -> Result<f64, CliError> {
        Ok(pick(flag, cfg, key)?.unwrap_or(default))
    };
    let loadings = |flag: &Option<String>, key: &str| -> Result<Vec<f64>, CliError> {
        match flag.clone().map(Ok).or_else(|| cfg.get::<String>(key).transpose()).transpose()? {
            None => Ok(Vec::new()),
            Some(s) => parse_list(&s).map_err(|e| CliError::Usage(format!("bad --{key}: {e}"))),
        }
    };
    Ok(match kind {
        DgpKind::Linear => {
            let d = LinearDgpParams::default();
            DgpSpec::Linear(LinearDgpParams {
                lambda0: f(args.lambda0, "lambda0", d.lambda0)?,
                lambda1: f(args.lambda1, "lambda1", d.lambda1)?,
                alpha0: f(args.alpha0, "alpha0", d.alpha0)?,
                alpha1: f(args.alpha1, "alpha1", d.alpha1)?,
                nu0: f(args.nu0, "nu0", d.nu0)?,
                nu1: f(args.nu1, "nu1", d.nu1)?,
                nu2: f(args.nu2, "nu2", d.nu2)?,
                tau: loadings(&args.tau, "tau")?,
                rho: loadings(&args.rho, "rho")?,
                beta0: f(args.beta0, "beta0", d.beta0)?,
                beta1: f(args.beta1, "beta1", d.beta1)?,
                periods: periods.unwrap_or(d.periods),
            })
        }
        DgpKind::Markov => {
            let d = MarkovDgpParams::default();
            let p = MarkovDgpParams {
                q: f(args.q, "q", d.q)?,
                p_l: f(args.p_l, "p_l", d.p_l)?,
                p_u: f(args.p_u, "p_u", d.p_u)?,
                delta0: f(args.delta0, "delta0", d.delta0)?,
                delta1: f(args.delta1, "delta1", d.delta1)?,
                beta: f(args.beta, "beta", d.beta)?,
                periods: periods.unwrap_or(d.periods),
            };
            p.validate()?;
            DgpSpec::Markov(p)
        }
        DgpKind::Continuous => {
            if let Some(t) = periods.filter(|&t| t != 1) {
                return Err(CliError::Usage(format!("the continuous simulator has one period (got --t {t})")));
            }
            DgpSpec::Continuous { beta: f(args.beta, "beta", 2.0)? }
        }
    })
}

/// Truth sidecar: the simulator settings as a config layer plus `n`, `seed`
/// and the true MSMM coefficients.
pub fn truth_sidecar(dgp: &DgpSpec, n: usize, seed: u64) -> String {
    let mut lines = vec![format!("dgp = {}", dgp.kind().name()), format!("n = {n}"), format!("seed = {seed}")];
    let kv = |k: &str, v: f64| format!("{k} = {}", fmt_f64(v));
    let join = |v: Vec<f64>| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ");
    match dgp {
        DgpSpec::Linear(p) => {
            lines.push(format!("t = {}", p.periods));
            lines.push(kv("beta0", p.beta0));
            lines.push(kv("beta1", p.beta1));
            for (k, v) in [
                ("lambda0", p.lambda0),
                ("lambda1", p.lambda1),
                ("alpha0", p.alpha0),
                ("alpha1", p.alpha1),
                ("nu0", p.nu0),
                ("nu1", p.nu1),
                ("nu2", p.nu2),
            ] {
                lines.push(kv(k, v));
            }
            lines.push(format!("tau = {}", join((0..p.periods).map(|t| p.tau_at(t)).collect())));
            lines.push(format!("rho = {}", join((0..p.periods).map(|t| p.rho_at(t)).collect())));
        }
        DgpSpec::Markov(p) => {
            lines.push(format!("t = {}", p.periods));
            lines.push(kv("beta0", 0.0));
            lines.push(kv("beta1", p.beta));
            lines.push(kv("beta", p.beta));
            for (k, v) in [("q", p.q), ("p_l", p.p_l), ("p_u", p.p_u), ("delta0", p.delta0), ("delta1", p.delta1)] {
                lines.push(kv(k, v));
            }
        }
        DgpSpec::Continuous { beta } => {
            lines.push("t = 1".into());
            lines.push(kv("beta0", 0.0));
            lines.push(kv("beta1", *beta));
            lines.push(kv("beta", *beta));
        }
    }
    lines.join("\n") + "\n"
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".truth");
    PathBuf::from(s)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = Config::default();
    cfg.load(args.config.as_deref(), "simulate")?;
    let dgp = dgp_spec(&args.dgp, &cfg)?;
    let n = pick(args.n, &cfg, "n")?.unwrap_or(1000);
    let seed = pick(args.seed, &cfg, "seed")?.unwrap_or(0);
    let out: PathBuf = required(pick(args.out.clone(), &cfg, "out")?, "out")?;
    let truth_path = pick(args.truth.clone(), &cfg, "truth")?.unwrap_or_else(|| sidecar_path(&out));
    let sim = dgp.simulate(n, seed)?;
    validate(&sim.panel).map_err(PanelError::Invalid)?;
    let mut w = create(&out)?;
    write_panel_csv(&sim.panel, &mut w)?;
    w.flush().map_err(io_err(&out))?;
    std::fs::write(&truth_path, truth_sidecar(&dgp, n, seed)).map_err(io_err(&truth_path))?;
    eprintln!("wrote {} ({} subjects, T={}) and {}", out.display(), n, sim.panel.periods, truth_path.display());
    Ok(())
}

fn estimator_config(args: &EstimateArgs, cfg: &Config, kind: EstimatorKind) -> Result<EstimatorConfig, CliError> {
    let has_dgp = args.dgp.dgp.is_some() || cfg.get::<String>("dgp")?.is_some();
    let mut ec = if has_dgp { dgp_spec(&args.dgp, cfg)?.estimator_config(kind) } else { EstimatorConfig::new(kind) };
    match pick(args.mean.clone(), cfg, "mean")?.as_deref() {
        None => {}
        Some("linear") => ec.spec = MsmmSpec::linear_cumulative(),
        Some("slope") => ec.spec = MsmmSpec::cumulative_slope(),
        Some(other) => return Err(CliError::Usage(format!("unknown mean model '{other}' (valid: linear, slope)"))),
    }
    match pick(args.treatment_model.clone(), cfg, "treatment_model")?.as_deref() {
        None => {}
        Some("probit") => ec.treatment = TreatmentModel::Probit(CovariateSpec::default()),
        Some("markov") => {
            let q = pick(args.markov_q, cfg, "markov_q")?.unwrap_or(MarkovDgpParams::default().q);
            ec.treatment = TreatmentModel::Markov { q };
        }
        Some(other) => return Err(CliError::Usage(format!("unknown treatment model '{other}' (valid: probit, markov)"))),
    }
    let fz = pick(args.fz, cfg, "fz")?;
    match pick(args.instrument_model.clone(), cfg, "instrument_model")?.as_deref() {
        None => {
            if let Some(f) = fz {
                ec.instrument = InstrumentModel::Known(f);
            }
        }
        Some("known") => ec.instrument = InstrumentModel::Known(fz.unwrap_or(0.5)),
        Some("logistic") => ec.instrument = InstrumentModel::Logistic(CovariateSpec::default()),
        Some(other) => return Err(CliError::Usage(format!("unknown instrument model '{other}' (valid: known, logistic)"))),
    }
    Ok(ec)
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let mut cfg = Config::default();
    let mut user = Config::default();
    user.load(args.config.as_deref(), "estimate")?;
    let panel_path: PathBuf = required(pick(args.panel.clone(), &user, "panel")?, "panel")?;
    let truth_path = match pick(args.truth.clone(), &user, "truth")? {
        Some(p) => Some(p),
        None => Some(sidecar_path(&panel_path)).filter(|p| p.exists()),
    };
    let mut sidecar_seed = None;
    if let Some(tp) = &truth_path {
        let mut layer = Config::read(tp)?;
        sidecar_seed = layer.get("seed").and_then(|s| s.parse::<u64>().ok());
        let dgp_keys = known_keys("simulate");
        layer.retain(|k, _| dgp_keys.contains(k) && !matches!(k.as_str(), "n" | "seed" | "out" | "truth"));
        cfg.push(layer, &tp.display().to_string());
    }
    cfg.values.extend(user.values);
    let file = File::open(&panel_path).map_err(io_err(&panel_path))?;
    let panel = read_panel_csv(io::BufReader::new(file))?;
    let kind = pick(args.kind, &cfg, "kind")?.unwrap_or(EstimatorKind::Iv);
    let ec = estimator_config(args, &cfg, kind)?;
    let level = pick(args.level, &cfg, "level")?.unwrap_or(0.95);
    let seed = pick(args.seed, &cfg, "seed")?.or(sidecar_seed).unwrap_or(0);
    let b = pick(args.bootstrap, &cfg, "bootstrap")?.unwrap_or(0);
    let bcfg = (b > 0).then_some(BootstrapConfig { replicates: b, seed, level });
    let report = estimate_report(&panel, &ec, level, bcfg.as_ref(), seed)?;
    print!("{}", report.summary());
    let out = pick(args.out.clone(), &cfg, "out")?;
    let mut w = output(out.as_deref())?;
    EstimateReport::write_csv(std::slice::from_ref(&report), &mut w)?;
    w.flush().map_err(|e| CliError::Io { path: "output".into(), source: e })?;
    Ok(())
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    let mut cfg = Config::default();
    cfg.load(args.config.as_deref(), "experiment")?;
    let dgp = dgp_spec(&args.dgp, &cfg)?;
    let default_t = match &dgp {
        DgpSpec::Linear(p) => p.periods,
        DgpSpec::Markov(p) => p.periods,
        DgpSpec::Continuous { .. } => 1,
    };
    let kinds = pick_list(&args.kinds, &cfg, "kinds")?
        .unwrap_or_else(|| vec![EstimatorKind::Associational, EstimatorKind::Sra, EstimatorKind::Iv]);
    let replications = pick(args.replications, &cfg, "replications")?.unwrap_or(200);
    if replications == 0 {
        return Err(CliError::Usage("--replications must be at least 1".into()));
    }
    let ecfg = ExperimentConfig {
        dgp,
        kinds,
        n_grid: pick_list(&args.n_grid, &cfg, "n_grid")?.unwrap_or_else(|| vec![2000, 8000, 32000]),
        t_grid: pick_list(&args.t_grid, &cfg, "t_grid")?.unwrap_or_else(|| vec![default_t]),
        replications,
        level: pick(args.level, &cfg, "level")?.unwrap_or(0.95),
        seed: pick(args.seed, &cfg, "seed")?.unwrap_or(0),
        bootstrap_replicates: pick(args.bootstrap, &cfg, "bootstrap")?.unwrap_or(0),
        sandwich: !pick_flag(args.no_sandwich, &cfg, "no_sandwich")?,
    };
    if ecfg.bootstrap_replicates > 0 && ecfg.bootstrap_replicates < crate::inference::MIN_BOOTSTRAP_REPLICATES {
        return Err(CliError::Usage(format!(
            "--bootstrap must be 0 or at least {}",
            crate::inference::MIN_BOOTSTRAP_REPLICATES
        )));
    }
    let rows = crate::inference::coverage_experiment(&ecfg)?;
    let out = pick(args.out.clone(), &cfg, "out")?;
    let mut w = output(out.as_deref())?;
    write_coverage_csv(&rows, &mut w)?;
    for r in rows.iter().filter(|r| r.failures > 0) {
        eprintln!("warning: {} n={} T={}: {} of {} replications failed", r.kind, r.n, r.periods, r.failures, r.replications);
    }
    Ok(())
}

struct GrowthParams {
    p_la: f64,
    p_al: f64,
    p: f64,
    delta0: f64,
    delta1: f64,
    gamma0: Option<f64>,
    gamma1: Option<f64>,
}

impl GrowthParams {
    fn set(&mut self, name: &str, v: f64) -> Result<(), CliError> {
        match name {
            "p_la" => self.p_la = v,
            "p_al" => self.p_al = v,
            "p" => self.p = v,
            "delta0" => self.delta0 = v,
            "delta1" => self.delta1 = v,
            "gamma0" => self.gamma0 = Some(v),
            "gamma1" => self.gamma1 = Some(v),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown sweep parameter '{other}' (valid: p_la, p_al, p, delta0, delta1, gamma0, gamma1)"
                )))
            }
        }
        Ok(())
    }

    fn gamma(&self) -> [f64; 2] {
        let d = default_gamma_raw(self.p_al, self.delta0, self.delta1);
        [self.gamma0.unwrap_or(d[0]), self.gamma1.unwrap_or(d[1])]
    }
}

fn growth_row(model: GrowthModel, g: &GrowthParams, periods: usize, mc_n: usize, seed: u64) -> Result<(GrowthReport, Option<McEstimate>), CliError> {
    let mc = mc_n > 0;
    Ok(match model {
        GrowthModel::SraUnstab => (
            sra_unstab_growth(g.p_la, periods)?,
            mc.then(|| mc_sra_unstab_second_moment(g.p_la, g.p_al, periods, mc_n, seed)),
        ),
        GrowthModel::SraStab => (
            sra_stab_growth_report(g.p_la, g.p_al, periods)?,
            mc.then(|| mc_sra_stab_second_moment(g.p_la, g.p_al, periods, mc_n, seed)),
        ),
        GrowthModel::IvUnstab => (
            iv_unstab_growth(g.p, g.delta0, g.delta1, periods)?,
            mc.then(|| mc_iv_unstab_second_moment(g.p, g.delta0, g.delta1, periods, mc_n, seed)),
        ),
        GrowthModel::IvStab => {
            let raw = g.gamma();
            let r = iv_stab_growth(g.p_la, g.p_al, g.delta0, g.delta1, raw[0], raw[1], periods)?;
            let gam = normalize_gamma(raw)?;
            let m = mc.then(|| {
                mc_iv_stab_second_moments(g.p_la, g.p_al, [g.delta0, g.delta1], gam, periods, mc_n, seed)[periods - 1]
            });
            (r, m)
        }
    })
}

pub fn cmd_analyze_weights(args: &AnalyzeArgs) -> Result<(), CliError> {
    let mut cfg = Config::default();
    cfg.load(args.config.as_deref(), "analyze-weights")?;
    let model_name: String = required(pick(args.model.clone(), &cfg, "model")?, "model")?;
    let model: GrowthModel = model_name.parse().map_err(CliError::Usage)?;
    let mut g = GrowthParams {
        p_la: pick(args.p_la, &cfg, "p_la")?.unwrap_or(0.7),
        p_al: pick(args.p_al, &cfg, "p_al")?.unwrap_or(0.6),
        p: pick(args.p, &cfg, "p")?.unwrap_or(0.7),
        delta0: pick(args.delta0, &cfg, "delta0")?.unwrap_or(0.2),
        delta1: pick(args.delta1, &cfg, "delta1")?.unwrap_or(0.3),
        gamma0: pick(args.gamma0, &cfg, "gamma0")?,
        gamma1: pick(args.gamma1, &cfg, "gamma1")?,
    };
    let horizons = pick_list(&args.periods, &cfg, "t")?.unwrap_or_else(|| vec![7]);
    if horizons.contains(&0) {
        return Err(CliError::Usage("horizons must be at least 1".into()));
    }
    let mc_n = pick(args.mc_n, &cfg, "mc_n")?.unwrap_or(100_000);
    let seed = pick(args.seed, &cfg, "seed")?.unwrap_or(0);
    let sweep = match pick(args.sweep.clone(), &cfg, "sweep")? {
        None => vec![None],
        Some(name) => {
            let name = norm_key(&name);
            let from: f64 = required(pick(args.from, &cfg, "from")?, "from")?;
            let to: f64 = required(pick(args.to, &cfg, "to")?, "to")?;
            let steps = pick(args.steps, &cfg, "steps")?.unwrap_or(9);
            if steps == 0 {
                return Err(CliError::Usage("--steps must be at least 1".into()));
            }
            (0..steps)
                .map(|k| {
                    let x = if steps == 1 { from } else { from + (to - from) * k as f64 / (steps - 1) as f64 };
                    Some((name.clone(), x))
                })
                .collect()
        }
    };
    let mut reports = Vec::new();
    let mut mc_cols: [Vec<String>; 4] = Default::default();
    for (row, point) in sweep.iter().flat_map(|s| horizons.iter().map(move |t| (s, *t))).enumerate() {
        let (value, periods) = point;
        if let Some((name, x)) = value {
            g.set(name, *x)?;
        }
        let (r, m) = growth_row(model, &g, periods, mc_n, derive_seed(seed, row as u64))?;
        let fmt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        mc_cols[0].push(fmt(m.map(|m| m.mean)));
        mc_cols[1].push(fmt(m.map(|m| m.se)));
        mc_cols[2].push(fmt(m.map(|m| m.z(r.second_moment))));
        mc_cols[3].push(seed.to_string());
        reports.push(r);
    }
    let [mc_mean, mc_se, z, seeds] = mc_cols;
    let out = pick(args.out.clone(), &cfg, "out")?;
    let mut w = output(out.as_deref())?;
    write_growth_csv(&reports, &[("mc_mean", mc_mean), ("mc_se", mc_se), ("z", z), ("seed", seeds)], &mut w)?;
    Ok(())
}

fn diagnose_table(path: &Path, w: &mut dyn Write) -> Result<usize, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let header = text.lines().next().unwrap_or("").trim();
    let werr = |e| CliError::Io { path: "output".into(), source: e };
    if header.starts_with("section,") {
        let report = check_point_exposure_converse(&read_point_exposure(text.as_bytes())?)?;
        eprint!("{report}");
        writeln!(w, "check,result,failed_condition").map_err(werr)?;
        writeln!(w, "{}", report.csv_row()).map_err(werr)?;
        Ok(usize::from(!report.pass))
    } else {
        let report = check_ict(&read_treatment_table(text.as_bytes())?)?;
        eprint!("{report}");
        writeln!(w, "check,result,max_deviation,max_abs_delta,iv_irrelevant").map_err(werr)?;
        writeln!(w, "{}", report.csv_row()).map_err(werr)?;
        Ok(usize::from(!report.pass))
    }
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let mut cfg = Config::default();
    cfg.load(args.config.as_deref(), "diagnose")?;
    let model = pick(args.model.clone(), &cfg, "model")?;
    let theorem1 = pick_flag(args.theorem1, &cfg, "theorem1")?;
    if model.is_none() && !theorem1 {
        return Err(CliError::Usage("diagnose needs --model FILE or --theorem1".into()));
    }
    let out = pick(args.out.clone(), &cfg, "out")?;
    let mut w = output(out.as_deref())?;
    let mut failed = 0;
    if let Some(path) = &model {
        failed += diagnose_table(path, &mut w)?;
    }
    if theorem1 {
        let dgp = dgp_spec(&args.dgp, &cfg)?;
        let n = pick(args.n, &cfg, "n")?.unwrap_or(50_000);
        let seed = pick(args.seed, &cfg, "seed")?.unwrap_or(0);
        let weight_dgp = match (pick(args.perturb_delta, &cfg, "perturb_delta")?, &dgp) {
            (None, _) => dgp.clone(),
            (Some(c), DgpSpec::Markov(p)) => {
                DgpSpec::Markov(MarkovDgpParams { delta0: p.delta0 * c, delta1: p.delta1 * c, ..p.clone() })
            }
            (Some(_), _) => return Err(CliError::Usage("--perturb-delta applies to the markov simulator only".into())),
        };
        let truth = dgp.simulate(1, seed)?.truth;
        let checks = verify_theorem1_battery(&dgp, &weight_dgp, &theorem1_battery(&truth), n, seed)?;
        let werr = |e| CliError::Io { path: "output".into(), source: e };
        writeln!(w, "check,dgp,function,n,seed,lhs,lhs_se,rhs,rhs_se,z,result").map_err(werr)?;
        for c in &checks {
            eprintln!(
                "{}: lhs = {} ± {}, rhs = {} ± {}, z = {:.3} {}",
                c.function,
                fmt_f64(c.lhs.mean),
                fmt_f64(c.lhs.se),
                fmt_f64(c.rhs.mean),
                fmt_f64(c.rhs.se),
                c.z,
                if c.pass() { "PASS" } else { "FAIL" }
            );
            writeln!(w, "{}", c.csv_row(dgp.kind().name(), n, seed)).map_err(werr)?;
            failed += usize::from(!c.pass());
        }
    }
    w.flush().map_err(|e| CliError::Io { path: "output".into(), source: e })?;
    if failed > 0 {
        Err(CliError::ChecksFailed(failed))
    } else {
        Ok(())
    }
}

fn configure_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    let jobs = match jobs {
        Some(j) => Some(j),
        None => match std::env::var(JOBS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| CliError::Usage(format!("{JOBS_ENV}={v} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // A second initialization (e.g. repeated calls in one process) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    Ok(())
}

fn config_jobs(cmd: &Command) -> Result<Option<usize>, CliError> {
    let path = match cmd {
        Command::Simulate(a) => a.config.as_deref(),
        Command::Estimate(a) => a.config.as_deref(),
        Command::Experiment(a) => a.config.as_deref(),
        Command::AnalyzeWeights(a) => a.config.as_deref(),
        Command::Diagnose(a) => a.config.as_deref(),
    };
    match path {
        None => Ok(None),
        Some(p) => Config::read(p)?.get("jobs").map(|v| v.parse().map_err(|_| CliError::Config(format!("bad jobs value '{v}'")))).transpose(),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let jobs = match cli.jobs {
        Some(j) => Some(j),
        None => config_jobs(&cli.command)?,
    };
    configure_jobs(jobs)?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::AnalyzeWeights(a) => cmd_analyze_weights(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            Ok(())
        }
        Err(e) => Err(CliError::Parse(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let m = Config::parse("# comment\nn = 10\np-l: 0.6  # trailing\n\nkinds = iv, sra\n", "x").unwrap();
        assert_eq!(m["n"], "10");
        assert_eq!(m["p_l"], "0.6");
        let mut c = Config::default();
        c.push(m, "x");
        assert_eq!(c.list::<EstimatorKind>("kinds").unwrap().unwrap(), vec![EstimatorKind::Iv, EstimatorKind::Sra]);
        assert!(Config::parse("novalue\n", "x").is_err());
    }

    #[test]
    fn flags_win_over_config() {
        let mut c = Config::default();
        c.push(Config::parse("n = 10\n", "x").unwrap(), "x");
        assert_eq!(pick(Some(5usize), &c, "n").unwrap(), Some(5));
        assert_eq!(pick(None::<usize>, &c, "n").unwrap(), Some(10));
    }

    #[test]
    fn known_keys_cover_flags() {
        let k = known_keys("simulate");
        for key in ["n", "seed", "dgp", "t", "periods", "p_l", "delta0", "out"] {
            assert!(k.contains(&key.to_string()), "{key}");
        }
        assert!(!k.contains(&"kinds".to_string()));
    }

    #[test]
    fn sidecar_round_trips_parameters() {
        let p = MarkovDgpParams { delta0: 0.15, periods: 4, ..Default::default() };
        let text = truth_sidecar(&DgpSpec::Markov(p.clone()), 100, 9);
        let mut c = Config::default();
        c.push(Config::parse(&text, "t").unwrap(), "t");
        assert_eq!(dgp_spec(&DgpArgs::default(), &c).unwrap(), DgpSpec::Markov(p));
    }
}
