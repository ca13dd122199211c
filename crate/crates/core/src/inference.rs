//! Sandwich variance from the stacked influence function, the
//! subject-level nonparametric bootstrap and Monte Carlo coverage
//! experiments.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::estimators::{
    estimate, estimate_weighted, estimating_rows, log_weight_gradients, Estimate, EstimatorConfig, EstimatorError,
    EstimatorKind, FittedNuisances, InstrumentModel, TreatmentModel,
};
use crate::numerics::{invert, normal_quantile, solve_linear, Matrix};
use crate::panel::{fmt_f64, LongitudinalPanel, MsmmSpec};
use crate::simulate::{
    continuous_delta, derive_seed, simulate_continuous, simulate_linear, simulate_markov, substream, DgpKind,
    LinearDgpParams, MarkovDgpParams, SimError, SimOutput,
};

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 500;
pub const MIN_BOOTSTRAP_REPLICATES: usize = 100;
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("singular information or jacobian in the sandwich")]
    SingularInformation,
    #[error("too many failed bootstrap replicates: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

/// Per-subject influence values `ψ_i` of `β̂` (`n × p`) together with the
/// β-block Jacobians `A = Pₙ ∂s_β/∂βᵀ` and `B = Pₙ ∂s_β/∂θᵀ`.
#[derive(Debug, Clone)]
pub struct Influence {
    pub psi: Matrix,
    pub jacobian_beta: Matrix,
    pub jacobian_nuisance: Matrix,
}

/// `A` and `B` from the analytic expressions together with the
/// per-subject `s_β` values.
pub fn beta_jacobians(panel: &LongitudinalPanel, cfg: &EstimatorConfig, est: &Estimate) -> (Matrix, Matrix, Matrix) {
    let p = cfg.spec.dim();
    let d = est.nuisances.dim();
    let n = panel.n;
    let mut a = Matrix::zeros(p, p);
    let mut b = Matrix::zeros(p, d);
    let mut s = Matrix::zeros(n, p);
    let mut cum = vec![0.0; d];
    for i in 0..n {
        let grads = log_weight_gradients(panel, cfg, &est.nuisances, i);
        cum.iter_mut().for_each(|v| *v = 0.0);
        let mut next_t = 0;
        for (h, g, y, t) in estimating_rows(panel, &cfg.spec, cfg.kind, i) {
            while next_t <= t {
                for (c, v) in cum.iter_mut().zip(grads.row(next_t)) {
                    *c += v;
                }
                next_t += 1;
            }
            let iw = est.weights.inverse_wbar_t(i, t);
            let r = y - g.iter().zip(&est.beta).map(|(x, bb)| x * bb).sum::<f64>();
            let sb: Vec<f64> = h.iter().map(|hj| hj * r * iw).collect();
            for j in 0..p {
                s.row_mut(i)[j] += sb[j];
            }
            a.add_outer(-iw, &h, &g);
            if d > 0 {
                b.add_outer(-1.0, &sb, &cum);
            }
        }
    }
    (a.scale(1.0 / n as f64), b.scale(1.0 / n as f64), s)
}

/// Influence values of the weighted estimator stacked with its nuisance scores.
pub fn influence(panel: &LongitudinalPanel, cfg: &EstimatorConfig, est: &Estimate) -> Result<Influence, InferenceError> {
    if cfg.kind == EstimatorKind::Wald {
        return wald_influence(panel, est.beta[0]);
    }
    let (a, b, s) = beta_jacobians(panel, cfg, est);
    let p = a.rows();
    let d = b.cols();
    let a_inv = invert(&a).map_err(|_| InferenceError::SingularInformation)?;
    let n = panel.n;
    let mut psi = Matrix::zeros(n, p);
    let k = if d > 0 {
        let i_inv = invert(&est.nuisances.information()).map_err(|_| InferenceError::SingularInformation)?;
        Some((b.matmul(&i_inv), est.nuisances.scores(n)))
    } else {
        None
    };
    for i in 0..n {
        let mut v = s.row(i).to_vec();
        if let Some((k, scores)) = &k {
            let adj = k.mul_vec(scores.row(i));
            for j in 0..p {
                v[j] += adj[j];
            }
        }
        let out = a_inv.mul_vec(&v);
        for j in 0..p {
            psi.row_mut(i)[j] = -out[j];
        }
    }
    Ok(Influence { psi, jacobian_beta: a, jacobian_nuisance: b })
}

fn wald_influence(panel: &LongitudinalPanel, beta: f64) -> Result<Influence, InferenceError> {
    let n = panel.n as f64;
    let mut cnt = [0.0; 2];
    let mut sa = [0.0; 2];
    let mut sy = [0.0; 2];
    for i in 0..panel.n {
        let g = usize::from(panel.instrument(i, 0) == 1.0);
        cnt[g] += 1.0;
        sa[g] += panel.treatment(i, 0);
        sy[g] += panel.terminal_outcome(i);
    }
    let ma = [sa[0] / cnt[0], sa[1] / cnt[1]];
    let my = [sy[0] / cnt[0], sy[1] / cnt[1]];
    let den = ma[1] - ma[0];
    let mut psi = Matrix::zeros(panel.n, 1);
    for i in 0..panel.n {
        let g = usize::from(panel.instrument(i, 0) == 1.0);
        let e = panel.terminal_outcome(i) - my[g] - beta * (panel.treatment(i, 0) - ma[g]);
        let sign = if g == 1 { 1.0 } else { -1.0 };
        psi[(i, 0)] = sign * e / (cnt[g] / n) / den;
    }
    Ok(Influence { psi, jacobian_beta: Matrix::from_rows(&[&[-den]]), jacobian_nuisance: Matrix::zeros(1, 0) })
}

fn centered_covariance(rows: usize, cols: usize, get: impl Fn(usize, usize) -> f64) -> Matrix {
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            mean[j] += get(i, j);
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut cov = Matrix::zeros(cols, cols);
    let mut c = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            c[j] = get(i, j) - mean[j];
        }
        cov.add_outer(1.0, &c, &c);
    }
    cov
}

/// Covariance of `β̂`: the empirical covariance of the influence values divided by `n`.
pub fn sandwich_variance(panel: &LongitudinalPanel, cfg: &EstimatorConfig, est: &Estimate) -> Result<Matrix, InferenceError> {
    let inf = influence(panel, cfg, est)?;
    let n = panel.n as f64;
    let cov = centered_covariance(panel.n, inf.psi.cols(), |i, j| inf.psi[(i, j)]);
    Ok(symmetrize(&cov.scale(1.0 / (n * n))))
}

fn symmetrize(m: &Matrix) -> Matrix {
    m.add(&m.transpose()).scale(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: DEFAULT_BOOTSTRAP_REPLICATES, seed: 0, level: 0.95 }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub cov: Matrix,
    pub intervals: Vec<(f64, f64)>,
    /// Successful replicate estimates in replicate order.
    pub estimates: Vec<Vec<f64>>,
    pub failures: usize,
}

/// Multinomial resampling counts for replicate `b`.
pub fn resample_counts(n: usize, seed: u64, b: usize) -> Vec<f64> {
    let mut rng = substream(seed, b as u64);
    let mut counts = vec![0.0; n];
    for _ in 0..n {
        counts[rng.gen_range(0..n)] += 1.0;
    }
    counts
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Starting values `θ̂ + I⁻¹ (Σ c_i s_i / Σ c_i)` for a resample with
/// counts `c`, from the full-sample per-subject scores `s_i`.
fn one_step_start(full: &FittedNuisances, counts: &[f64]) -> Option<FittedNuisances> {
    let n = counts.len();
    if full.dim() == 0 || full.components().iter().any(|c| c.per_obs_scores.rows() != n) {
        return None;
    }
    let scores = full.scores(n);
    let total: f64 = counts.iter().sum();
    let mut g = vec![0.0; full.dim()];
    for (i, c) in counts.iter().enumerate().filter(|(_, c)| **c != 0.0) {
        for (gj, s) in g.iter_mut().zip(scores.row(i)) {
            *gj += c * s / total;
        }
    }
    let step = solve_linear(&full.information(), &g).ok()?;
    let theta: Vec<f64> = full.theta().iter().zip(&step).map(|(t, s)| t + s).collect();
    theta.iter().all(|v| v.is_finite()).then(|| full.with_theta(&theta))
}

/// Subject-level nonparametric bootstrap. Each replicate refits every
/// nuisance model, warm-started from the full-sample estimate.
pub fn bootstrap(
    panel: &LongitudinalPanel,
    cfg: &EstimatorConfig,
    full: &Estimate,
    bcfg: &BootstrapConfig,
) -> Result<BootstrapResult, InferenceError> {
    if bcfg.replicates < MIN_BOOTSTRAP_REPLICATES {
        return Err(InferenceError::InvalidArgument(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_REPLICATES} replicates, got {}",
            bcfg.replicates
        )));
    }
    let results: Vec<Option<Vec<f64>>> = (0..bcfg.replicates)
        .into_par_iter()
        .map(|b| {
            let counts = resample_counts(panel.n, bcfg.seed, b);
            one_step_start(&full.nuisances, &counts)
                .and_then(|start| estimate_weighted(panel, cfg, Some(&counts), Some(&start), false).ok())
                .or_else(|| estimate_weighted(panel, cfg, Some(&counts), Some(&full.nuisances), false).ok())
                .map(|e| e.beta)
        })
        .collect();
    let estimates: Vec<Vec<f64>> = results.iter().flatten().cloned().collect();
    let failures = bcfg.replicates - estimates.len();
    if failures as f64 > MAX_FAILURE_FRACTION * bcfg.replicates as f64 {
        return Err(InferenceError::TooManyFailures { failed: failures, total: bcfg.replicates });
    }
    let p = full.beta.len();
    let m = estimates.len();
    let cov = centered_covariance(m, p, |i, j| estimates[i][j]).scale(1.0 / (m as f64 - 1.0).max(1.0));
    let tail = (1.0 - bcfg.level) / 2.0;
    let intervals = (0..p)
        .map(|j| {
            let mut v: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
        })
        .collect();
    Ok(BootstrapResult { cov: symmetrize(&cov), intervals, estimates, failures })
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub kind: EstimatorKind,
    pub beta_hat: Vec<f64>,
    pub sandwich_cov: Matrix,
    pub bootstrap_cov: Option<Matrix>,
    pub ci_sandwich: Vec<(f64, f64)>,
    pub ci_bootstrap: Option<Vec<(f64, f64)>>,
    pub level: f64,
    pub replicates: usize,
    pub failures: usize,
    pub weight_second_moment: f64,
    pub nuisance_converged: bool,
    pub n: usize,
    pub periods: usize,
    pub seed: u64,
}

fn normal_intervals(beta: &[f64], cov: &Matrix, level: f64) -> Vec<(f64, f64)> {
    let zq = normal_quantile(0.5 + level / 2.0);
    beta.iter().enumerate().map(|(j, b)| {
        let se = cov[(j, j)].max(0.0).sqrt();
        (b - zq * se, b + zq * se)
    })
    .collect()
}

/// Point estimate, sandwich covariance and (optionally) bootstrap.
pub fn estimate_report(
    panel: &LongitudinalPanel,
    cfg: &EstimatorConfig,
    level: f64,
    bootstrap_cfg: Option<&BootstrapConfig>,
    seed: u64,
) -> Result<EstimateReport, InferenceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::InvalidArgument(format!("level {level} outside (0,1)")));
    }
    let est = estimate(panel, cfg)?;
    let sandwich_cov = sandwich_variance(panel, cfg, &est)?;
    let ci_sandwich = normal_intervals(&est.beta, &sandwich_cov, level);
    let (bootstrap_cov, ci_bootstrap, replicates, failures) = match bootstrap_cfg {
        Some(b) => {
            let r = bootstrap(panel, cfg, &est, &BootstrapConfig { level, ..*b })?;
            (Some(r.cov), Some(r.intervals), b.replicates, r.failures)
        }
        None => (None, None, 0, 0),
    };
    let nuisance_converged = est.nuisances.components().iter().all(|c| c.converged);
    Ok(EstimateReport {
        kind: est.kind,
        beta_hat: est.beta,
        sandwich_cov,
        bootstrap_cov,
        ci_sandwich,
        ci_bootstrap,
        level,
        replicates,
        failures,
        weight_second_moment: est.weight_second_moment,
        nuisance_converged,
        n: panel.n,
        periods: panel.periods,
        seed,
    })
}

impl EstimateReport {
    pub fn sandwich_se(&self) -> Vec<f64> {
        (0..self.beta_hat.len()).map(|j| self.sandwich_cov[(j, j)].max(0.0).sqrt()).collect()
    }

    pub fn bootstrap_se(&self) -> Option<Vec<f64>> {
        self.bootstrap_cov.as_ref().map(|c| (0..self.beta_hat.len()).map(|j| c[(j, j)].max(0.0).sqrt()).collect())
    }

    pub fn csv_header(p: usize) -> Vec<String> {
        let mut h = vec!["kind".to_string()];
        h.extend((0..p).map(|j| format!("beta{j}")));
        h.extend((0..p).map(|j| format!("se{j}")));
        h.extend((0..p).map(|j| format!("bs_se{j}")));
        h.extend(["n", "T", "seed"].map(String::from));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![self.kind.name().to_string()];
        r.extend(self.beta_hat.iter().map(|v| fmt_f64(*v)));
        r.extend(self.sandwich_se().iter().map(|v| fmt_f64(*v)));
        match self.bootstrap_se() {
            Some(se) => r.extend(se.iter().map(|v| fmt_f64(*v))),
            None => r.extend(std::iter::repeat(String::new()).take(self.beta_hat.len())),
        }
        r.extend([self.n.to_string(), self.periods.to_string(), self.seed.to_string()]);
        r
    }

    pub fn write_csv<W: Write>(reports: &[EstimateReport], w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        if let Some(first) = reports.first() {
            wr.write_record(EstimateReport::csv_header(first.beta_hat.len()))?;
        }
        for r in reports {
            wr.write_record(r.csv_row())?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("estimator: {}\nn = {}, T = {}, seed = {}\n", self.kind.name(), self.n, self.periods, self.seed);
        let se = self.sandwich_se();
        let bs = self.bootstrap_se();
        for (j, b) in self.beta_hat.iter().enumerate() {
            s.push_str(&format!(
                "beta{j} = {b:.6}  sandwich se = {:.6}  {:.0}% ci [{:.6}, {:.6}]",
                se[j],
                100.0 * self.level,
                self.ci_sandwich[j].0,
                self.ci_sandwich[j].1
            ));
            if let (Some(bs), Some(ci)) = (&bs, &self.ci_bootstrap) {
                s.push_str(&format!("  bootstrap se = {:.6}  percentile ci [{:.6}, {:.6}]", bs[j], ci[j].0, ci[j].1));
            }
            s.push('\n');
        }
        s.push_str(&format!("mean 1/wbar^2 = {}\n", fmt_f64(self.weight_second_moment)));
        if self.replicates > 0 {
            s.push_str(&format!("bootstrap replicates = {}, failed = {}\n", self.replicates, self.failures));
        }
        s
    }
}

/// A simulator together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DgpSpec {
    Linear(LinearDgpParams),
    Markov(MarkovDgpParams),
    Continuous { beta: f64 },
}

impl DgpSpec {
    pub fn kind(&self) -> DgpKind {
        match self {
            DgpSpec::Linear(_) => DgpKind::Linear,
            DgpSpec::Markov(_) => DgpKind::Markov,
            DgpSpec::Continuous { .. } => DgpKind::Continuous,
        }
    }

    /// The same process with `periods` time points (ignored by the continuous process).
    pub fn with_periods(&self, periods: usize) -> DgpSpec {
        match self {
            DgpSpec::Linear(p) => DgpSpec::Linear(LinearDgpParams { periods, ..p.clone() }),
            DgpSpec::Markov(p) => DgpSpec::Markov(MarkovDgpParams { periods, ..p.clone() }),
            DgpSpec::Continuous { beta } => DgpSpec::Continuous { beta: *beta },
        }
    }

    pub fn simulate(&self, n: usize, seed: u64) -> Result<SimOutput, SimError> {
        match self {
            DgpSpec::Linear(p) => simulate_linear(p, n, seed),
            DgpSpec::Markov(p) => simulate_markov(p, n, seed),
            DgpSpec::Continuous { beta } => simulate_continuous(n, seed, *beta),
        }
    }

    /// Estimator configuration matching the process.
    pub fn estimator_config(&self, kind: EstimatorKind) -> EstimatorConfig {
        match self {
            DgpSpec::Linear(p) => EstimatorConfig::for_linear(kind, p),
            DgpSpec::Markov(p) => EstimatorConfig::for_markov(kind, p),
            DgpSpec::Continuous { .. } => EstimatorConfig::new(kind)
                .with_spec(MsmmSpec::cumulative_slope())
                .with_instrument(InstrumentModel::Known(0.5))
                .with_treatment(TreatmentModel::KnownDelta(Arc::new(|panel: &LongitudinalPanel, i, t, a| {
                    continuous_delta(a, panel.covariates(i, t)[0])
                }))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dgp: DgpSpec,
    pub kinds: Vec<EstimatorKind>,
    pub n_grid: Vec<usize>,
    pub t_grid: Vec<usize>,
    pub replications: usize,
    pub level: f64,
    pub seed: u64,
    /// Bootstrap replicates per Monte Carlo replication; 0 disables the bootstrap.
    pub bootstrap_replicates: usize,
    pub sandwich: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub dgp: DgpKind,
    pub kind: EstimatorKind,
    pub n: usize,
    pub periods: usize,
    pub replications: usize,
    pub bias: f64,
    pub mc_sd: f64,
    pub sw_sd: f64,
    pub bs_sd: f64,
    pub sw_cover: f64,
    pub bs_cover: f64,
    pub median_abs_error: f64,
    pub failures: usize,
    pub seed: u64,
}

pub const COVERAGE_HEADER: [&str; 12] =
    ["dgp", "kind", "n", "T", "R", "bias", "mc_sd", "sw_sd", "bs_sd", "sw_cover", "bs_cover", "seed"];

impl CoverageRow {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.dgp.name().to_string(),
            self.kind.name().to_string(),
            self.n.to_string(),
            self.periods.to_string(),
            self.replications.to_string(),
            fmt_f64(self.bias),
            fmt_f64(self.mc_sd),
            fmt_f64(self.sw_sd),
            fmt_f64(self.bs_sd),
            fmt_f64(self.sw_cover),
            fmt_f64(self.bs_cover),
            self.seed.to_string(),
        ]
    }
}

pub fn write_coverage_csv<W: Write>(rows: &[CoverageRow], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(COVERAGE_HEADER)?;
    for r in rows {
        wr.write_record(r.csv_row())?;
    }
    wr.flush()?;
    Ok(())
}

/// Outcome of one estimator on one Monte Carlo panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub estimate: f64,
    pub sandwich_se: f64,
    pub bootstrap_se: f64,
    pub sw_covered: bool,
    pub bs_covered: bool,
}

/// Seed of Monte Carlo replication `r` in cell `(n, T)`.
pub fn replication_seed(seed: u64, n: usize, periods: usize, r: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, n as u64), periods as u64), r as u64)
}

fn run_replicate(
    cfg: &ExperimentConfig,
    dgp: &DgpSpec,
    kind: EstimatorKind,
    n: usize,
    periods: usize,
    r: usize,
) -> Option<ReplicateResult> {
    let data_seed = replication_seed(cfg.seed, n, periods, r);
    let sim = dgp.simulate(n, data_seed).ok()?;
    let truth = sim.truth.slope();
    let ecfg = dgp.estimator_config(kind);
    let est = estimate(&sim.panel, &ecfg).ok()?;
    let j = est.beta.len() - 1;
    let b = est.beta[j];
    let zq = normal_quantile(0.5 + cfg.level / 2.0);
    let (sandwich_se, sw_covered) = if cfg.sandwich {
        let cov = sandwich_variance(&sim.panel, &ecfg, &est).ok()?;
        let se = cov[(j, j)].max(0.0).sqrt();
        (se, (b - truth).abs() <= zq * se)
    } else {
        (f64::NAN, false)
    };
    let (bootstrap_se, bs_covered) = if cfg.bootstrap_replicates > 0 {
        let bcfg = BootstrapConfig { replicates: cfg.bootstrap_replicates, seed: derive_seed(data_seed, 1 + kind as u64), level: cfg.level };
        let res = bootstrap(&sim.panel, &ecfg, &est, &bcfg).ok()?;
        let (lo, hi) = res.intervals[j];
        (res.cov[(j, j)].max(0.0).sqrt(), lo <= truth && truth <= hi)
    } else {
        (f64::NAN, false)
    };
    Some(ReplicateResult { estimate: b - truth, sandwich_se, bootstrap_se, sw_covered, bs_covered })
}

/// Errors of the slope estimate across replications, per `(n, T, kind)`.
pub fn coverage_experiment(cfg: &ExperimentConfig) -> Result<Vec<CoverageRow>, InferenceError> {
    if cfg.replications == 0 {
        return Err(InferenceError::InvalidArgument("replications must be positive".into()));
    }
    if cfg.kinds.is_empty() || cfg.n_grid.is_empty() || cfg.t_grid.is_empty() {
        return Err(InferenceError::InvalidArgument("empty estimator, n or T grid".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(InferenceError::InvalidArgument(format!("level {} outside (0,1)", cfg.level)));
    }
    let mut rows = Vec::new();
    for &periods in &cfg.t_grid {
        let dgp = cfg.dgp.with_periods(periods);
        for &n in &cfg.n_grid {
            for &kind in &cfg.kinds {
                let results: Vec<Option<ReplicateResult>> =
                    (0..cfg.replications).into_par_iter().map(|r| run_replicate(cfg, &dgp, kind, n, periods, r)).collect();
                rows.push(summarize(cfg, dgp.kind(), kind, n, periods, &results));
            }
        }
    }
    Ok(rows)
}

/// Per-replication results for one cell, in replication order.
pub fn replicate_results(cfg: &ExperimentConfig, kind: EstimatorKind, n: usize, periods: usize) -> Vec<Option<ReplicateResult>> {
    let dgp = cfg.dgp.with_periods(periods);
    (0..cfg.replications).into_par_iter().map(|r| run_replicate(cfg, &dgp, kind, n, periods, r)).collect()
}

pub fn summarize(
    cfg: &ExperimentConfig,
    dgp: DgpKind,
    kind: EstimatorKind,
    n: usize,
    periods: usize,
    results: &[Option<ReplicateResult>],
) -> CoverageRow {
    let ok: Vec<&ReplicateResult> = results.iter().flatten().collect();
    let m = ok.len() as f64;
    let mean = |f: &dyn Fn(&ReplicateResult) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / m;
    let bias = mean(&|r| r.estimate);
    let mc_sd = (ok.iter().map(|r| (r.estimate - bias).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let mut abs: Vec<f64> = ok.iter().map(|r| r.estimate.abs()).collect();
    abs.sort_by(|a, b| a.total_cmp(b));
    let median_abs_error = if abs.is_empty() { f64::NAN } else { quantile_sorted(&abs, 0.5) };
    CoverageRow {
        dgp,
        kind,
        n,
        periods,
        replications: cfg.replications,
        bias,
        mc_sd,
        sw_sd: mean(&|r| r.sandwich_se),
        bs_sd: mean(&|r| r.bootstrap_se),
        sw_cover: if cfg.sandwich { mean(&|r| f64::from(u8::from(r.sw_covered))) } else { f64::NAN },
        bs_cover: if cfg.bootstrap_replicates > 0 { mean(&|r| f64::from(u8::from(r.bs_covered))) } else { f64::NAN },
        median_abs_error,
        failures: results.len() - ok.len(),
        seed: cfg.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Outcome;
    use crate::simulate::substream;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn unit_weight_sandwich_matches_ols() {
        let n = 10_000;
        let mut rng = substream(11, 0);
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.gen::<f64>() < 0.4)).collect();
        let y: Vec<f64> = a
            .iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                1.0 + 2.0 * v + 1.5 * e
            })
            .collect();
        let panel = LongitudinalPanel {
            n,
            periods: 1,
            k: 1,
            ku: 0,
            subject_ids: (1..=n as u64).collect(),
            a: a.clone(),
            z: vec![0.0; n],
            l: vec![0.0; n],
            u: None,
            outcome: Outcome::Terminal(y),
            binary: true,
        };
        let cfg = EstimatorConfig::new(EstimatorKind::Associational);
        let est = estimate(&panel, &cfg).unwrap();
        let cov = sandwich_variance(&panel, &cfg, &est).unwrap();
        // σ²(XᵀX)⁻¹ with X = (1, a)
        let s1: f64 = a.iter().sum();
        let det = n as f64 * s1 - s1 * s1;
        let ols = [2.25 * s1 / det, 2.25 * n as f64 / det];
        assert!((cov[(0, 0)] / ols[0] - 1.0).abs() < 0.1);
        assert!((cov[(1, 1)] / ols[1] - 1.0).abs() < 0.1);
        assert!(cov.asymmetry() == 0.0);
    }

    #[test]
    fn identical_subjects_have_zero_bootstrap_variance() {
        let n = 50;
        let panel = LongitudinalPanel {
            n,
            periods: 2,
            k: 1,
            ku: 0,
            subject_ids: (1..=n as u64).collect(),
            a: vec![1.0; 2 * n],
            z: vec![1.0; 2 * n],
            l: vec![0.3; 2 * n],
            u: None,
            outcome: Outcome::Terminal(vec![4.0; n]),
            binary: true,
        };
        let cfg = EstimatorConfig::new(EstimatorKind::Associational).with_spec(MsmmSpec::cumulative_slope());
        let est = estimate(&panel, &cfg).unwrap();
        assert_eq!(est.beta, vec![2.0]);
        let res = bootstrap(&panel, &cfg, &est, &BootstrapConfig { replicates: 100, seed: 1, level: 0.95 }).unwrap();
        assert_eq!(res.cov[(0, 0)], 0.0);
        assert_eq!(res.failures, 0);
        assert_eq!(res.intervals[0], (2.0, 2.0));
    }

    #[test]
    fn bootstrap_is_reproducible_and_rejects_small_b() {
        let dgp = DgpSpec::Linear(LinearDgpParams::default());
        let sim = dgp.simulate(400, 3).unwrap();
        let cfg = dgp.estimator_config(EstimatorKind::Iv);
        let est = estimate(&sim.panel, &cfg).unwrap();
        let b = BootstrapConfig { replicates: 100, seed: 9, level: 0.9 };
        let r1 = bootstrap(&sim.panel, &cfg, &est, &b).unwrap();
        let r2 = bootstrap(&sim.panel, &cfg, &est, &b).unwrap();
        assert_eq!(r1.estimates, r2.estimates);
        let small = BootstrapConfig { replicates: 10, ..b };
        assert!(matches!(bootstrap(&sim.panel, &cfg, &est, &small), Err(InferenceError::InvalidArgument(_))));
    }

    #[test]
    fn zero_replications_is_an_error() {
        let cfg = ExperimentConfig {
            dgp: DgpSpec::Linear(LinearDgpParams::default()),
            kinds: vec![EstimatorKind::Iv],
            n_grid: vec![100],
            t_grid: vec![2],
            replications: 0,
            level: 0.95,
            seed: 1,
            bootstrap_replicates: 0,
            sandwich: true,
        };
        assert!(matches!(coverage_experiment(&cfg), Err(InferenceError::InvalidArgument(_))));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
    }
}
