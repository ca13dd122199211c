//! Maximum-likelihood fits of the nuisance models: the observed-data
//! probit treatment model carrying the compliance difference, the
//! logistic instrument density, the Markov treatment model and a plain
//! probit used for marginal (stabilizing) treatment models.
//!
//! All fits pool over periods. Log-likelihoods, gradients and
//! information matrices are averaged over subjects, so the Newton
//! tolerance applies to the mean score.

use thiserror::Error;

use crate::numerics::{
    logistic, newton_maximize_joint, normal_cdf, normal_cdf_pair, normal_pdf, Evaluation, Matrix, NewtonConfig,
    NumericsError,
};
use crate::panel::LongitudinalPanel;

pub const SEPARATION_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NuisanceError {
    #[error("nuisance fit did not converge: {0}")]
    NoConvergence(NumericsError),
    #[error("separation detected: fitted probability {prob:e} at subject index {subject}, period {t}")]
    SeparationDetected { subject: usize, t: usize, prob: f64 },
    #[error("invalid estimate: {0}")]
    InvalidParams(String),
    #[error("panel unsuitable for this model: {0}")]
    Panel(String),
}

impl From<NumericsError> for NuisanceError {
    fn from(e: NumericsError) -> Self {
        NuisanceError::NoConvergence(e)
    }
}

/// Rows of history covariates used by the nuisance regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSpec {
    pub intercept: bool,
    /// Covariate columns (zero-based); `None` uses every column.
    pub columns: Option<Vec<usize>>,
    pub previous_treatment: bool,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec { intercept: true, columns: None, previous_treatment: false }
    }
}

impl CovariateSpec {
    pub fn intercept_only() -> Self {
        CovariateSpec { intercept: true, columns: Some(Vec::new()), previous_treatment: false }
    }

    /// Intercept plus the previous treatment (0 before the first period).
    pub fn treatment_history() -> Self {
        CovariateSpec { intercept: true, columns: Some(Vec::new()), previous_treatment: true }
    }

    pub fn width(&self, panel: &LongitudinalPanel) -> usize {
        let cols = self.columns.as_ref().map_or(panel.k, |c| c.len());
        usize::from(self.intercept) + cols + usize::from(self.previous_treatment)
    }

    pub fn fill(&self, panel: &LongitudinalPanel, i: usize, t: usize, out: &mut Vec<f64>) {
        out.clear();
        if self.intercept {
            out.push(1.0);
        }
        let l = panel.covariates(i, t);
        match &self.columns {
            None => out.extend_from_slice(l),
            Some(cols) => out.extend(cols.iter().map(|&c| l[c])),
        }
        if self.previous_treatment {
            out.push(if t == 0 { 0.0 } else { panel.treatment(i, t - 1) });
        }
    }

    fn check(&self, panel: &LongitudinalPanel) -> Result<(), NuisanceError> {
        if let Some(cols) = &self.columns {
            if let Some(&c) = cols.iter().find(|&&c| c >= panel.k) {
                return Err(NuisanceError::Panel(format!("covariate column {c} out of range (k = {})", panel.k)));
            }
        }
        if self.width(panel) == 0 {
            return Err(NuisanceError::Panel("empty covariate row".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NuisanceModel {
    /// `π = Φ(νᵀx)(1 − Φ(αᵀx)) + Z Φ(αᵀx)`, parameters `(α, ν)`.
    ProbitTreatment,
    /// `P(Z=1 | x) = logistic(γᵀx)`.
    LogisticInstrument,
    /// `P(A=a | L=l, Z=z) = q/2 + (1−q) p_L^{l=a} (1−p_L)^{l≠a} ± δ_l/2`, parameters `(δ0, δ1, p_L)`.
    MarkovTreatment { q: f64 },
    /// `P(A=1 | x) = Φ(νᵀx)`.
    Probit,
}

impl NuisanceModel {
    pub fn name(&self) -> &'static str {
        match self {
            NuisanceModel::ProbitTreatment => "probit_treatment",
            NuisanceModel::LogisticInstrument => "logistic_instrument",
            NuisanceModel::MarkovTreatment { .. } => "markov_treatment",
            NuisanceModel::Probit => "probit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InstrumentDensity {
    Known(f64),
    Logistic(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub model: NuisanceModel,
    pub covariates: CovariateSpec,
    pub alpha: Vec<f64>,
    pub nu: Vec<f64>,
    pub gamma: InstrumentDensity,
    /// Per-subject scores (summed over periods), `n × dim`; empty when not requested.
    pub per_obs_scores: Matrix,
    /// Mean per-subject information (negative Hessian).
    pub information: Matrix,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct FitOptions<'a> {
    pub newton: NewtonConfig,
    pub init: Option<Vec<f64>>,
    /// Subject frequency weights (bootstrap counts).
    pub freq: Option<&'a [f64]>,
    pub keep_scores: bool,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions { newton: NewtonConfig::default(), init: None, freq: None, keep_scores: true }
    }
}

#[inline]
fn sign01(x: f64) -> f64 {
    if x == 1.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl NuisanceFit {
    pub fn theta(&self) -> Vec<f64> {
        match &self.model {
            NuisanceModel::LogisticInstrument => match &self.gamma {
                InstrumentDensity::Logistic(g) => g.clone(),
                InstrumentDensity::Known(_) => Vec::new(),
            },
            _ => self.alpha.iter().chain(&self.nu).copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta().len()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        match &self.model {
            NuisanceModel::ProbitTreatment => (0..self.alpha.len())
                .map(|j| format!("alpha{j}"))
                .chain((0..self.nu.len()).map(|j| format!("nu{j}")))
                .collect(),
            NuisanceModel::LogisticInstrument => (0..self.dim()).map(|j| format!("gamma{j}")).collect(),
            NuisanceModel::MarkovTreatment { .. } => vec!["delta0".into(), "delta1".into(), "p_l".into()],
            NuisanceModel::Probit => (0..self.nu.len()).map(|j| format!("nu{j}")).collect(),
        }
    }

    /// Same model with parameters replaced by `theta`.
    pub fn with_theta(&self, theta: &[f64]) -> NuisanceFit {
        let mut f = self.clone();
        match &self.model {
            NuisanceModel::LogisticInstrument => f.gamma = InstrumentDensity::Logistic(theta.to_vec()),
            _ => {
                let p = self.alpha.len();
                f.alpha = theta[..p].to_vec();
                f.nu = theta[p..].to_vec();
            }
        }
        f
    }

    /// Compliance difference `Δ_t(a)` at treatment level `a`.
    pub fn delta(&self, panel: &LongitudinalPanel, i: usize, t: usize, a: f64, buf: &mut Vec<f64>) -> f64 {
        match &self.model {
            NuisanceModel::ProbitTreatment => {
                self.covariates.fill(panel, i, t, buf);
                sign01(a) * normal_cdf(dot(&self.alpha, buf))
            }
            NuisanceModel::MarkovTreatment { .. } => {
                let l = panel.covariates(i, t)[0];
                sign01(a) * if l == 1.0 { self.alpha[1] } else { self.alpha[0] }
            }
            _ => panic!("model {} carries no compliance difference", self.model.name()),
        }
    }

    /// `∂ log|Δ_t| / ∂θ`, written into `out` (length `dim`).
    pub fn delta_log_gradient(&self, panel: &LongitudinalPanel, i: usize, t: usize, buf: &mut Vec<f64>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.model {
            NuisanceModel::ProbitTreatment => {
                self.covariates.fill(panel, i, t, buf);
                let xa = dot(&self.alpha, buf);
                let ratio = normal_pdf(xa) / normal_cdf(xa);
                for (o, x) in out.iter_mut().zip(buf.iter()) {
                    *o = ratio * x;
                }
            }
            NuisanceModel::MarkovTreatment { .. } => {
                let l = panel.covariates(i, t)[0];
                if l == 1.0 {
                    out[1] = 1.0 / self.alpha[1];
                } else {
                    out[0] = 1.0 / self.alpha[0];
                }
            }
            _ => panic!("model {} carries no compliance difference", self.model.name()),
        }
    }

    /// Fitted `P(A_t = 1 | observed history)`.
    pub fn treatment_prob1(&self, panel: &LongitudinalPanel, i: usize, t: usize, buf: &mut Vec<f64>) -> f64 {
        let z = panel.instrument(i, t);
        match &self.model {
            NuisanceModel::ProbitTreatment => {
                self.covariates.fill(panel, i, t, buf);
                let d = normal_cdf(dot(&self.alpha, buf));
                normal_cdf(dot(&self.nu, buf)) * (1.0 - d) + z * d
            }
            NuisanceModel::MarkovTreatment { q } => {
                let l = panel.covariates(i, t)[0];
                markov_prob1(*q, &self.alpha, self.nu[0], l, z)
            }
            NuisanceModel::Probit => {
                self.covariates.fill(panel, i, t, buf);
                normal_cdf(dot(&self.nu, buf))
            }
            NuisanceModel::LogisticInstrument => panic!("instrument model carries no treatment probability"),
        }
    }

    /// `∂ log f(A_t | history) / ∂θ` at the observed treatment, i.e. the
    /// observation's score.
    pub fn treatment_log_gradient(&self, panel: &LongitudinalPanel, i: usize, t: usize, buf: &mut Vec<f64>, out: &mut [f64]) {
        let a = panel.treatment(i, t);
        let z = panel.instrument(i, t);
        match &self.model {
            NuisanceModel::ProbitTreatment => {
                self.covariates.fill(panel, i, t, buf);
                let o = probit_treatment_obs(&self.alpha, &self.nu, buf, a, z);
                let p = buf.len();
                for j in 0..p {
                    out[j] = o.r * o.c_alpha * buf[j];
                    out[p + j] = o.r * o.c_nu * buf[j];
                }
            }
            NuisanceModel::MarkovTreatment { q } => {
                let l = panel.covariates(i, t)[0];
                let pi = markov_prob1(*q, &self.alpha, self.nu[0], l, z);
                let r = a / pi - (1.0 - a) / (1.0 - pi);
                let d = markov_dpi(*q, l, z);
                for j in 0..3 {
                    out[j] = r * d[j];
                }
            }
            NuisanceModel::Probit => {
                self.covariates.fill(panel, i, t, buf);
                let xb = dot(&self.nu, buf);
                let (pi, pdf) = (normal_cdf(xb), normal_pdf(xb));
                let r = if a == 1.0 { pdf / pi } else { -pdf / normal_cdf(-xb) };
                for (o, x) in out.iter_mut().zip(buf.iter()) {
                    *o = r * x;
                }
            }
            NuisanceModel::LogisticInstrument => panic!("instrument model carries no treatment probability"),
        }
    }

    /// Fitted `f_{Z_t}(Z_t | history)`.
    pub fn instrument_density(&self, panel: &LongitudinalPanel, i: usize, t: usize, buf: &mut Vec<f64>) -> f64 {
        let z = panel.instrument(i, t);
        match &self.gamma {
            InstrumentDensity::Known(p1) => {
                if z == 1.0 {
                    *p1
                } else {
                    1.0 - p1
                }
            }
            InstrumentDensity::Logistic(g) => {
                self.covariates.fill(panel, i, t, buf);
                let p = logistic(dot(g, buf));
                if z == 1.0 {
                    p
                } else {
                    1.0 - p
                }
            }
        }
    }

    /// `∂ log f_{Z_t} / ∂γ` (the instrument-model score).
    pub fn instrument_log_gradient(&self, panel: &LongitudinalPanel, i: usize, t: usize, buf: &mut Vec<f64>, out: &mut [f64]) {
        match &self.gamma {
            InstrumentDensity::Known(_) => {}
            InstrumentDensity::Logistic(g) => {
                self.covariates.fill(panel, i, t, buf);
                let p = logistic(dot(g, buf));
                let r = panel.instrument(i, t) - p;
                for (o, x) in out.iter_mut().zip(buf.iter()) {
                    *o = r * x;
                }
            }
        }
    }

    /// Serializes to `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("model = {}\n", self.model.name()));
        if let NuisanceModel::MarkovTreatment { q } = self.model {
            s.push_str(&format!("q = {q}\n"));
        }
        s.push_str(&format!("intercept = {}\n", self.covariates.intercept));
        if let Some(c) = &self.covariates.columns {
            s.push_str(&format!("columns = {}\n", c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")));
        }
        s.push_str(&format!("previous_treatment = {}\n", self.covariates.previous_treatment));
        for (name, v) in self.parameter_names().iter().zip(self.theta()) {
            s.push_str(&format!("{name} = {v}\n"));
        }
        if let InstrumentDensity::Known(p) = self.gamma {
            s.push_str(&format!("instrument_density = known {p}\n"));
        }
        s.push_str(&format!("loglik = {}\n", self.loglik));
        s.push_str(&format!("iterations = {}\n", self.iterations));
        s.push_str(&format!("converged = {}\n", self.converged));
        s
    }
}

pub(crate) struct ProbitObs {
    pub ll: f64,
    /// `A/π − (1−A)/(1−π)`.
    pub r: f64,
    /// `∂π/∂α = c_alpha x`, `∂π/∂ν = c_nu x`.
    pub c_alpha: f64,
    pub c_nu: f64,
    /// Second-derivative coefficients of `π` (times `x xᵀ`).
    pub h_aa: f64,
    pub h_an: f64,
    pub h_nn: f64,
    /// `A/π² + (1−A)/(1−π)²`.
    pub w: f64,
}

#[inline]
pub(crate) fn probit_treatment_obs(alpha: &[f64], nu: &[f64], x: &[f64], a: f64, z: f64) -> ProbitObs {
    let xa = dot(alpha, x);
    let xn = dot(nu, x);
    let (cdf_a, pdf_a) = (normal_cdf(xa), normal_pdf(xa));
    let (cdf_n, sf_n) = normal_cdf_pair(xn);
    let pdf_n = normal_pdf(xn);
    let pi = cdf_n * (1.0 - cdf_a) + z * cdf_a;
    let one_minus = sf_n * (1.0 - cdf_a) + (1.0 - z) * cdf_a;
    let (ll, r, w) = if a == 1.0 {
        (pi.ln(), 1.0 / pi, 1.0 / (pi * pi))
    } else {
        (one_minus.ln(), -1.0 / one_minus, 1.0 / (one_minus * one_minus))
    };
    ProbitObs {
        ll,
        r,
        c_alpha: (z - cdf_n) * pdf_a,
        c_nu: (1.0 - cdf_a) * pdf_n,
        h_aa: -(z - cdf_n) * pdf_a * xa,
        h_an: -pdf_n * pdf_a,
        h_nn: -(1.0 - cdf_a) * pdf_n * xn,
        w,
    }
}

#[inline]
fn markov_prob1(q: f64, delta: &[f64], p_l: f64, l: f64, z: f64) -> f64 {
    let base = if l == 1.0 { p_l } else { 1.0 - p_l };
    let d = if l == 1.0 { delta[1] } else { delta[0] };
    q / 2.0 + (1.0 - q) * base + sign01(z) * d / 2.0
}

#[inline]
fn markov_dpi(q: f64, l: f64, z: f64) -> [f64; 3] {
    let s = sign01(z) / 2.0;
    if l == 1.0 {
        [0.0, s, 1.0 - q]
    } else {
        [s, 0.0, -(1.0 - q)]
    }
}

fn subject_weight(freq: Option<&[f64]>, i: usize) -> f64 {
    freq.map_or(1.0, |f| f[i])
}

fn total_weight(panel: &LongitudinalPanel, freq: Option<&[f64]>) -> f64 {
    freq.map_or(panel.n as f64, |f| f.iter().sum())
}

fn require_binary(panel: &LongitudinalPanel) -> Result<(), NuisanceError> {
    if !panel.binary {
        return Err(NuisanceError::Panel("binary treatment required".into()));
    }
    Ok(())
}

/// Mean log-likelihood, score and information of the observed-data
/// probit treatment model at `theta = (α, ν)`.
pub fn probit_treatment_evaluation(
    panel: &LongitudinalPanel,
    cov: &CovariateSpec,
    theta: &[f64],
    freq: Option<&[f64]>,
) -> Option<Evaluation> {
    let p = cov.width(panel);
    let (alpha, nu) = theta.split_at(p);
    let dim = 2 * p;
    let mut ll = 0.0;
    let mut grad = vec![0.0; dim];
    // Upper triangles of the three p×p blocks of the Hessian.
    let mut h = vec![0.0; 3 * p * p];
    let mut x = Vec::with_capacity(p);
    for i in 0..panel.n {
        let wi = subject_weight(freq, i);
        if wi == 0.0 {
            continue;
        }
        for t in 0..panel.periods {
            cov.fill(panel, i, t, &mut x);
            let o = probit_treatment_obs(alpha, nu, &x, panel.treatment(i, t), panel.instrument(i, t));
            if !o.ll.is_finite() {
                return None;
            }
            ll += wi * o.ll;
            let ga = wi * o.r * o.c_alpha;
            let gn = wi * o.r * o.c_nu;
            let m_aa = wi * (-o.w * o.c_alpha * o.c_alpha + o.r * o.h_aa);
            let m_an = wi * (-o.w * o.c_alpha * o.c_nu + o.r * o.h_an);
            let m_nn = wi * (-o.w * o.c_nu * o.c_nu + o.r * o.h_nn);
            for j in 0..p {
                grad[j] += ga * x[j];
                grad[p + j] += gn * x[j];
                for k in j..p {
                    let xx = x[j] * x[k];
                    h[j * p + k] += m_aa * xx;
                    h[p * p + j * p + k] += m_an * xx;
                    h[2 * p * p + j * p + k] += m_nn * xx;
                }
            }
        }
    }
    let total = total_weight(panel, freq);
    let mut info = Matrix::zeros(dim, dim);
    for j in 0..p {
        for k in j..p {
            let aa = -h[j * p + k] / total;
            let an = -h[p * p + j * p + k] / total;
            let nn = -h[2 * p * p + j * p + k] / total;
            info[(j, k)] = aa;
            info[(k, j)] = aa;
            info[(p + j, p + k)] = nn;
            info[(p + k, p + j)] = nn;
            info[(j, p + k)] = an;
            info[(k, p + j)] = an;
            info[(p + j, k)] = an;
            info[(p + k, j)] = an;
        }
    }
    grad.iter_mut().for_each(|g| *g /= total);
    Some(Evaluation { loglik: ll / total, gradient: grad, information: info })
}

fn per_subject_scores<F>(panel: &LongitudinalPanel, dim: usize, mut obs: F) -> Matrix
where
    F: FnMut(usize, usize, &mut [f64]),
{
    let mut m = Matrix::zeros(panel.n, dim);
    let mut g = vec![0.0; dim];
    for i in 0..panel.n {
        for t in 0..panel.periods {
            g.iter_mut().for_each(|v| *v = 0.0);
            obs(i, t, &mut g);
            for (dst, v) in m.row_mut(i).iter_mut().zip(&g) {
                *dst += v;
            }
        }
    }
    m
}

fn check_separation<F>(panel: &LongitudinalPanel, freq: Option<&[f64]>, mut prob: F) -> Result<(), NuisanceError>
where
    F: FnMut(usize, usize) -> f64,
{
    for i in 0..panel.n {
        if subject_weight(freq, i) == 0.0 {
            continue;
        }
        for t in 0..panel.periods {
            let p = prob(i, t);
            if !(p > SEPARATION_THRESHOLD && p < 1.0 - SEPARATION_THRESHOLD) {
                return Err(NuisanceError::SeparationDetected { subject: i, t, prob: p });
            }
        }
    }
    Ok(())
}

/// Observed-data probit treatment model with the compliance difference
/// `Δ = Φ(αᵀx)` and baseline `Φ(νᵀx)`, pooled over periods.
pub fn fit_probit_treatment(panel: &LongitudinalPanel, cov: &CovariateSpec) -> Result<NuisanceFit, NuisanceError> {
    fit_probit_treatment_with(panel, cov, &FitOptions::default())
}

pub fn fit_probit_treatment_with(
    panel: &LongitudinalPanel,
    cov: &CovariateSpec,
    opts: &FitOptions<'_>,
) -> Result<NuisanceFit, NuisanceError> {
    require_binary(panel)?;
    cov.check(panel)?;
    let p = cov.width(panel);
    let init = opts.init.clone().unwrap_or_else(|| vec![0.0; 2 * p]);
    let res = newton_maximize_joint(|th| probit_treatment_evaluation(panel, cov, th, opts.freq), &init, &opts.newton)?;
    let (alpha, nu) = res.theta.split_at(p);
    let mut fit = NuisanceFit {
        model: NuisanceModel::ProbitTreatment,
        covariates: cov.clone(),
        alpha: alpha.to_vec(),
        nu: nu.to_vec(),
        gamma: InstrumentDensity::Known(0.5),
        per_obs_scores: Matrix::zeros(0, 2 * p),
        information: res.information,
        loglik: res.loglik,
        converged: true,
        iterations: res.iterations,
    };
    let mut buf = Vec::with_capacity(p);
    check_separation(panel, opts.freq, |i, t| fit.treatment_prob1(panel, i, t, &mut buf))?;
    if opts.keep_scores {
        let mut b = Vec::with_capacity(p);
        fit.per_obs_scores = per_subject_scores(panel, 2 * p, |i, t, g| fit.treatment_log_gradient(panel, i, t, &mut b, g));
    }
    Ok(fit)
}

/// Mean log-likelihood, score and information of a plain probit of `A_t` on `x_t`.
pub fn probit_evaluation(
    panel: &LongitudinalPanel,
    cov: &CovariateSpec,
    theta: &[f64],
    freq: Option<&[f64]>,
) -> Option<Evaluation> {
    let p = theta.len();
    let mut ll = 0.0;
    let mut grad = vec![0.0; p];
    let mut info = Matrix::zeros(p, p);
    let mut x = Vec::with_capacity(p);
    for i in 0..panel.n {
        let wi = subject_weight(freq, i);
        if wi == 0.0 {
            continue;
        }
        for t in 0..panel.periods {
            cov.fill(panel, i, t, &mut x);
            let xb = dot(theta, &x);
            let a = panel.treatment(i, t);
            let (cdf, sf, pdf) = (normal_cdf(xb), normal_cdf(-xb), normal_pdf(xb));
            let (lli, r) = if a == 1.0 { (cdf.ln(), pdf / cdf) } else { (sf.ln(), -pdf / sf) };
            if !lli.is_finite() {
                return None;
            }
            ll += wi * lli;
            // d²/dη² log-likelihood = −r(r + η)
            let curv = r * (r + xb);
            for j in 0..p {
                grad[j] += wi * r * x[j];
            }
            info.add_outer(wi * curv, &x, &x);
        }
    }
    let total = total_weight(panel, freq);
    grad.iter_mut().for_each(|g| *g /= total);
    Some(Evaluation { loglik: ll / total, gradient: grad, information: info.scale(1.0 / total) })
}

pub fn fit_probit(panel: &LongitudinalPanel, cov: &CovariateSpec) -> Result<NuisanceFit, NuisanceError> {
    fit_probit_with(panel, cov, &FitOptions::default())
}

pub fn fit_probit_with(
    panel: &LongitudinalPanel,
    cov: &CovariateSpec,
    opts: &FitOptions<'_>,
) -> Result<NuisanceFit, NuisanceError> {
    require_binary(panel)?;
    cov.check(panel)?;
    let p = cov.width(panel);
    let init = opts.init.clone().unwrap_or_else(|| vec![0.0; p]);
    let res = newton_maximize_joint(|th| probit_evaluation(panel, cov, th, opts.freq), &init, &opts.newton)?;
    let mut fit = NuisanceFit {
        model: NuisanceModel::Probit,
        covariates: cov.clone(),
        alpha: Vec::new(),
        nu: res.theta,
        gamma: InstrumentDensity::Known(0.5),
        per_obs_scores: Matrix::zeros(0, p),
        information: res.information,
        loglik: res.loglik,
        converged: true,
        iterations: res.iterations,
    };
    let mut buf = Vec::with_capacity(p);
    check_separation(panel, opts.freq, |i, t| fit.treatment_prob1(panel, i, t, &mut buf))?;
    if opts.keep_scores {
        let mut b = Vec::with_capacity(p);
        fit.per_obs_scores = per_subject_scores(panel, p, |i, t, g| fit.treatment_log_gradient(panel, i, t, &mut b, g));
    }
    Ok(fit)
}

/// Mean Bernoulli log-likelihood of `Z_t` under `logistic(γᵀx_t)`.
pub fn logistic_instrument_evaluation(
    panel: &LongitudinalPanel,
    cov: &CovariateSpec,
    gamma: &[f64],
    freq: Option<&[f64]>,
) -> Option<Evaluation> {
    let p = gamma.len();
    let mut ll = 0.0;
    let mut grad = vec![0.0; p];
    let mut info = Matrix::zeros(p, p);
    let mut x = Vec::with_capacity(p);
    for i in 0..panel.n {
        let wi = subject_weight(freq, i);
        if wi == 0.0 {
            continue;
        }
        for t in 0..panel.periods {
            cov.fill(panel, i, t, &mut x);
            let eta = dot(gamma, &x);
            let pr = logistic(eta);
            let z = panel.instrument(i, t);
            // log p = −log(1+e^{−η}), log(1−p) = −log(1+e^{η})
            let lli = if z == 1.0 { -softplus(-eta) } else { -softplus(eta) };
            ll += wi * lli;
            for j in 0..p {
                grad[j] += wi * (z - pr) * x[j];
            }
            info.add_outer(wi * pr * (1.0 - pr), &x, &x);
        }
    }
    let total = total_weight(panel, freq);
    grad.iter_mut().for_each(|g| *g /= total);
    Some(Evaluation { loglik: ll / total, gradient: grad, information: info.scale(1.0 / total) })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic regression of the instrument on history covariates.
pub fn fit_logistic_iv_density(panel: &LongitudinalPanel, cov: &CovariateSpec) -> Result<NuisanceFit, NuisanceError> {
    fit_logistic_iv_density_with(panel, cov, &FitOptions::default())
}

pub fn fit_logistic_iv_density_with(
    panel: &LongitudinalPanel,
    cov: &CovariateSpec,
    opts: &FitOptions<'_>,
) -> Result<NuisanceFit, NuisanceError> {
    cov.check(panel)?;
    let p = cov.width(panel);
    let init = opts.init.clone().unwrap_or_else(|| vec![0.0; p]);
    let res = newton_maximize_joint(|g| logistic_instrument_evaluation(panel, cov, g, opts.freq), &init, &opts.newton)?;
    let mut fit = NuisanceFit {
        model: NuisanceModel::LogisticInstrument,
        covariates: cov.clone(),
        alpha: Vec::new(),
        nu: Vec::new(),
        gamma: InstrumentDensity::Logistic(res.theta),
        per_obs_scores: Matrix::zeros(0, p),
        information: res.information,
        loglik: res.loglik,
        converged: true,
        iterations: res.iterations,
    };
    let mut buf = Vec::with_capacity(p);
    let g = match &fit.gamma {
        InstrumentDensity::Logistic(g) => g.clone(),
        InstrumentDensity::Known(_) => unreachable!(),
    };
    check_separation(panel, opts.freq, |i, t| {
        cov.fill(panel, i, t, &mut buf);
        logistic(dot(&g, &buf))
    })?;
    if opts.keep_scores {
        let mut b = Vec::with_capacity(p);
        fit.per_obs_scores = per_subject_scores(panel, p, |i, t, out| fit.instrument_log_gradient(panel, i, t, &mut b, out));
    }
    Ok(fit)
}

/// Mean log-likelihood of the Markov treatment model at `(δ0, δ1, p_L)`.
pub fn markov_treatment_evaluation(
    panel: &LongitudinalPanel,
    q: f64,
    theta: &[f64],
    freq: Option<&[f64]>,
) -> Option<Evaluation> {
    let mut ll = 0.0;
    let mut grad = [0.0; 3];
    let mut info = Matrix::zeros(3, 3);
    for i in 0..panel.n {
        let wi = subject_weight(freq, i);
        if wi == 0.0 {
            continue;
        }
        for t in 0..panel.periods {
            let l = panel.covariates(i, t)[0];
            let z = panel.instrument(i, t);
            let a = panel.treatment(i, t);
            let pi = markov_prob1(q, &theta[..2], theta[2], l, z);
            if !(pi > 0.0 && pi < 1.0) {
                return None;
            }
            let (lli, r, w) = if a == 1.0 {
                (pi.ln(), 1.0 / pi, 1.0 / (pi * pi))
            } else {
                ((1.0 - pi).ln(), -1.0 / (1.0 - pi), 1.0 / ((1.0 - pi) * (1.0 - pi)))
            };
            ll += wi * lli;
            let d = markov_dpi(q, l, z);
            for j in 0..3 {
                grad[j] += wi * r * d[j];
            }
            info.add_outer(wi * w, &d, &d);
        }
    }
    let total = total_weight(panel, freq);
    Some(Evaluation {
        loglik: ll / total,
        gradient: grad.iter().map(|g| g / total).collect(),
        information: info.scale(1.0 / total),
    })
}

/// Markov treatment model with known mixing probability `q`.
pub fn fit_markov_treatment(panel: &LongitudinalPanel, q_known: f64) -> Result<NuisanceFit, NuisanceError> {
    fit_markov_treatment_with(panel, q_known, &FitOptions::default())
}

pub fn fit_markov_treatment_with(
    panel: &LongitudinalPanel,
    q_known: f64,
    opts: &FitOptions<'_>,
) -> Result<NuisanceFit, NuisanceError> {
    require_binary(panel)?;
    if panel.k < 1 || panel.l.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(NuisanceError::Panel("markov model needs a binary first covariate".into()));
    }
    if !(q_known > 0.0 && q_known < 1.0) {
        return Err(NuisanceError::InvalidParams(format!("q = {q_known} outside (0,1)")));
    }
    let init = opts.init.clone().unwrap_or_else(|| vec![0.1, 0.1, 0.5]);
    let res = newton_maximize_joint(|th| markov_treatment_evaluation(panel, q_known, th, opts.freq), &init, &opts.newton)?;
    let th = &res.theta;
    if !(0.0..=1.0).contains(&th[2]) {
        return Err(NuisanceError::InvalidParams(format!("p_l estimate {} outside [0,1]", th[2])));
    }
    if th[0] == 0.0 || th[1] == 0.0 {
        return Err(NuisanceError::InvalidParams("estimated compliance difference is zero".into()));
    }
    let mut fit = NuisanceFit {
        model: NuisanceModel::MarkovTreatment { q: q_known },
        covariates: CovariateSpec { intercept: false, columns: Some(vec![0]), previous_treatment: false },
        alpha: th[..2].to_vec(),
        nu: vec![th[2]],
        gamma: InstrumentDensity::Known(0.5),
        per_obs_scores: Matrix::zeros(0, 3),
        information: res.information,
        loglik: res.loglik,
        converged: true,
        iterations: res.iterations,
    };
    let mut buf = Vec::new();
    check_separation(panel, opts.freq, |i, t| fit.treatment_prob1(panel, i, t, &mut buf))?;
    if opts.keep_scores {
        let mut b = Vec::new();
        fit.per_obs_scores = per_subject_scores(panel, 3, |i, t, g| fit.treatment_log_gradient(panel, i, t, &mut b, g));
    }
    Ok(fit)
}

/// `Δ̂ = Φ(α̂ᵀx)` for a history covariate row `x`, or `δ̂_l` for the Markov model.
pub fn delta_from_fit(fit: &NuisanceFit, history_covariates: &[f64]) -> f64 {
    match &fit.model {
        NuisanceModel::ProbitTreatment => normal_cdf(dot(&fit.alpha, history_covariates)),
        NuisanceModel::MarkovTreatment { .. } => {
            if history_covariates[0] == 1.0 {
                fit.alpha[1]
            } else {
                fit.alpha[0]
            }
        }
        _ => panic!("model {} carries no compliance difference", fit.model.name()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normal_quantile;
    use crate::panel::Outcome;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iid_panel(n: usize, p1: f64, seed: u64) -> LongitudinalPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LongitudinalPanel {
            n,
            periods: 1,
            k: 1,
            ku: 0,
            subject_ids: (1..=n as u64).collect(),
            a: (0..n).map(|_| f64::from(rng.gen::<f64>() < p1)).collect(),
            z: (0..n).map(|_| f64::from(rng.gen::<bool>())).collect(),
            l: (0..n).map(|_| rng.gen::<f64>()).collect(),
            u: None,
            outcome: Outcome::Terminal(vec![0.0; n]),
            binary: true,
        }
    }

    #[test]
    fn intercept_probit_matches_closed_form() {
        let panel = iid_panel(3000, normal_cdf(0.5), 4);
        let mean = panel.a.iter().sum::<f64>() / panel.n as f64;
        let fit = fit_probit(&panel, &CovariateSpec::intercept_only()).unwrap();
        assert!((fit.nu[0] - normal_quantile(mean)).abs() < 1e-8);
    }

    #[test]
    fn intercept_logistic_matches_closed_form() {
        let panel = iid_panel(2000, 0.5, 5);
        let zbar = panel.z.iter().sum::<f64>() / panel.n as f64;
        let fit = fit_logistic_iv_density(&panel, &CovariateSpec::intercept_only()).unwrap();
        let g = match &fit.gamma {
            InstrumentDensity::Logistic(g) => g[0],
            _ => unreachable!(),
        };
        assert!((g - (zbar / (1.0 - zbar)).ln()).abs() < 1e-8);
        assert!(g.abs() < 0.15);
    }

    #[test]
    fn balanced_instrument_gives_zero_slope() {
        // Every covariate cell holds one Z=0 and one Z=1 row.
        let n = 40;
        let panel = LongitudinalPanel {
            n,
            periods: 1,
            k: 1,
            ku: 0,
            subject_ids: (1..=n as u64).collect(),
            a: vec![0.0; n],
            z: (0..n).map(|i| (i % 2) as f64).collect(),
            l: (0..n).map(|i| (i / 2) as f64 / 10.0).collect(),
            u: None,
            outcome: Outcome::Terminal(vec![0.0; n]),
            binary: true,
        };
        let fit = fit_logistic_iv_density(&panel, &CovariateSpec::default()).unwrap();
        for v in fit.theta() {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn separated_instrument_is_detected() {
        let n = 20;
        let panel = LongitudinalPanel {
            n,
            periods: 1,
            k: 1,
            ku: 0,
            subject_ids: (1..=n as u64).collect(),
            a: vec![0.0; n],
            z: (0..n).map(|i| f64::from(i >= 10)).collect(),
            l: (0..n).map(|i| i as f64).collect(),
            u: None,
            outcome: Outcome::Terminal(vec![0.0; n]),
            binary: true,
        };
        let r = fit_logistic_iv_density(&panel, &CovariateSpec::default());
        assert!(matches!(r, Err(NuisanceError::SeparationDetected { .. }) | Err(NuisanceError::NoConvergence(_))));
    }

    #[test]
    fn delta_from_fit_values() {
        let fit = NuisanceFit {
            model: NuisanceModel::ProbitTreatment,
            covariates: CovariateSpec::default(),
            alpha: vec![0.0, 0.0],
            nu: vec![0.0, 0.0],
            gamma: InstrumentDensity::Known(0.5),
            per_obs_scores: Matrix::zeros(0, 4),
            information: Matrix::identity(4),
            loglik: 0.0,
            converged: true,
            iterations: 0,
        };
        assert_eq!(delta_from_fit(&fit, &[1.0, 3.0]), 0.5);
        let f2 = fit.with_theta(&[0.3, 0.3, 0.0, 0.0]);
        assert!((delta_from_fit(&f2, &[1.0, 1.0]) - 0.725_746_882).abs() < 1e-8);
    }
}
