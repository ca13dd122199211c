//! Point estimators for the marginal structural mean model: weighted
//! least squares under every weight family, the Wald estimator and the
//! stacked repeated-measures IV estimator.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::numerics::{condition_number, solve_linear, Matrix, NewtonConfig, NumericsError};
use crate::nuisance::{
    fit_logistic_iv_density_with, fit_markov_treatment_with, fit_probit_treatment_with, fit_probit_with, CovariateSpec,
    FitOptions, NuisanceError, NuisanceFit,
};
use crate::panel::{design_row, LongitudinalPanel, MsmmSpec, Outcome};
use crate::simulate::{LinearDgpParams, MarkovDgpParams, SimError};
use crate::weights::{
    iv_stabilized_weights, iv_weights, oracle_weights, sra_stabilized_weights, sra_weights, unit_weights, WeightError,
    WeightSet,
};

pub const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("singular design (condition number {condition:e})")]
    SingularDesign { condition: f64 },
    #[error("zero denominator: instrument groups have equal mean treatment")]
    ZeroDenominator,
    #[error("latent columns required for the oracle estimator")]
    LatentRequired,
    #[error("wald requires T=1 (panel has T={0})")]
    WaldRequiresSinglePeriod(usize),
    #[error("wald requires both instrument groups to be nonempty")]
    EmptyInstrumentGroup,
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Associational,
    Sra,
    SraStabilized,
    Oracle,
    Iv,
    IvStabilized,
    Wald,
    RepeatedMeasuresIv,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::Associational,
        EstimatorKind::Sra,
        EstimatorKind::SraStabilized,
        EstimatorKind::Oracle,
        EstimatorKind::Iv,
        EstimatorKind::IvStabilized,
        EstimatorKind::Wald,
        EstimatorKind::RepeatedMeasuresIv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Associational => "associational",
            EstimatorKind::Sra => "sra",
            EstimatorKind::SraStabilized => "sra_stabilized",
            EstimatorKind::Oracle => "oracle",
            EstimatorKind::Iv => "iv",
            EstimatorKind::IvStabilized => "iv_stabilized",
            EstimatorKind::Wald => "wald",
            EstimatorKind::RepeatedMeasuresIv => "repeated_measures_iv",
        }
    }

    fn is_iv(&self) -> bool {
        matches!(self, EstimatorKind::Iv | EstimatorKind::IvStabilized | EstimatorKind::RepeatedMeasuresIv)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown estimator kind '{s}' (valid: {})", names.join(", "))
        })
    }
}

/// `P(A_t = 1 | full history including latent covariates)`.
pub type PropensityFn = Arc<dyn Fn(&LongitudinalPanel, usize, usize) -> f64 + Send + Sync>;
/// Known compliance difference `Δ_t(a)`.
pub type DeltaFn = Arc<dyn Fn(&LongitudinalPanel, usize, usize, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum TreatmentModel {
    Probit(CovariateSpec),
    Markov { q: f64 },
    /// Known compliance difference; nothing is estimated.
    KnownDelta(DeltaFn),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InstrumentModel {
    Known(f64),
    Logistic(CovariateSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaChoice {
    /// `γ_a` = mean fitted `|Δ_t|` among observations with `A_{t−1} = a`.
    Empirical,
    Fixed([f64; 2]),
}

#[derive(Clone)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub spec: MsmmSpec,
    pub treatment: TreatmentModel,
    /// Covariates of the marginal treatment model used by stabilized SRA weights.
    pub marginal: CovariateSpec,
    pub instrument: InstrumentModel,
    pub gamma: GammaChoice,
    pub oracle: Option<PropensityFn>,
    pub newton: NewtonConfig,
}

impl fmt::Debug for EstimatorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let treatment = match &self.treatment {
            TreatmentModel::Probit(c) => format!("probit({c:?})"),
            TreatmentModel::Markov { q } => format!("markov(q={q})"),
            TreatmentModel::KnownDelta(_) => "known".into(),
        };
        f.debug_struct("EstimatorConfig")
            .field("kind", &self.kind)
            .field("spec", &self.spec)
            .field("treatment", &treatment)
            .field("instrument", &self.instrument)
            .field("gamma", &self.gamma)
            .field("oracle", &self.oracle.is_some())
            .finish()
    }
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorConfig {
            kind,
            spec: MsmmSpec::linear_cumulative(),
            treatment: TreatmentModel::Probit(CovariateSpec::default()),
            marginal: CovariateSpec::treatment_history(),
            instrument: InstrumentModel::Known(0.5),
            gamma: GammaChoice::Empirical,
            oracle: None,
            newton: NewtonConfig::default(),
        }
    }

    pub fn with_spec(mut self, spec: MsmmSpec) -> Self {
        self.spec = spec;
        self
    }

    pub fn with_treatment(mut self, treatment: TreatmentModel) -> Self {
        self.treatment = treatment;
        self
    }

    pub fn with_instrument(mut self, instrument: InstrumentModel) -> Self {
        self.instrument = instrument;
        self
    }

    pub fn with_oracle(mut self, oracle: PropensityFn) -> Self {
        self.oracle = Some(oracle);
        self
    }

    /// Defaults matching the linear process: probit treatment model on
    /// `(1, L_t)` and the true propensity as oracle.
    pub fn for_linear(kind: EstimatorKind, params: &LinearDgpParams) -> Self {
        let p = params.clone();
        EstimatorConfig::new(kind).with_oracle(Arc::new(move |panel: &LongitudinalPanel, i, t| {
            p.propensity(panel.covariates(i, t)[0], panel.latent(i, t).expect("latent")[0], panel.instrument(i, t))
        }))
    }

    /// Defaults matching the Markov process: `m = β Σ a`, Markov treatment model.
    pub fn for_markov(kind: EstimatorKind, params: &MarkovDgpParams) -> Self {
        let p = params.clone();
        EstimatorConfig::new(kind)
            .with_spec(MsmmSpec::cumulative_slope())
            .with_treatment(TreatmentModel::Markov { q: params.q })
            .with_oracle(Arc::new(move |panel: &LongitudinalPanel, i, t| {
                p.treatment_prob(1.0, panel.covariates(i, t)[0], panel.latent(i, t).expect("latent")[0], panel.instrument(i, t))
            }))
    }
}

/// Estimated nuisance components, stacked in the order treatment,
/// marginal, instrument.
#[derive(Debug, Clone, Default)]
pub struct FittedNuisances {
    pub treatment: Option<NuisanceFit>,
    pub marginal: Option<NuisanceFit>,
    pub instrument: Option<NuisanceFit>,
    /// Stabilizing factors `(γ0, γ1)`, treated as fixed.
    pub gamma: Option<[f64; 2]>,
}

impl FittedNuisances {
    pub fn components(&self) -> Vec<&NuisanceFit> {
        [&self.treatment, &self.marginal, &self.instrument].into_iter().flatten().collect()
    }

    pub fn dim(&self) -> usize {
        self.components().iter().map(|c| c.dim()).sum()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.components().iter().flat_map(|c| c.theta()).collect()
    }

    pub fn with_theta(&self, theta: &[f64]) -> FittedNuisances {
        let mut out = self.clone();
        let mut off = 0;
        for slot in [&mut out.treatment, &mut out.marginal, &mut out.instrument] {
            if let Some(c) = slot.as_mut() {
                let d = c.dim();
                *c = c.with_theta(&theta[off..off + d]);
                off += d;
            }
        }
        out
    }

    fn offsets(&self) -> [usize; 3] {
        let t = self.treatment.as_ref().map_or(0, |c| c.dim());
        let m = self.marginal.as_ref().map_or(0, |c| c.dim());
        [0, t, t + m]
    }

    /// Block-diagonal mean information of the stacked nuisance scores.
    pub fn information(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        let mut off = 0;
        for c in self.components() {
            let k = c.dim();
            for a in 0..k {
                for b in 0..k {
                    m[(off + a, off + b)] = c.information[(a, b)];
                }
            }
            off += k;
        }
        m
    }

    /// Per-subject stacked scores (`n × dim`).
    pub fn scores(&self, n: usize) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(n, d);
        let mut off = 0;
        for c in self.components() {
            let k = c.dim();
            assert_eq!(c.per_obs_scores.rows(), n, "nuisance fit was run without per-subject scores");
            for i in 0..n {
                m.row_mut(i)[off..off + k].copy_from_slice(c.per_obs_scores.row(i));
            }
            off += k;
        }
        m
    }
}

fn treatment_fit_options<'a>(cfg: &EstimatorConfig, freq: Option<&'a [f64]>, init: Option<Vec<f64>>, keep: bool) -> FitOptions<'a> {
    FitOptions { newton: cfg.newton, init, freq, keep_scores: keep }
}

/// Fits the nuisance models required by `cfg.kind`. `warm` supplies
/// starting values (bootstrap replicates start from the full-sample fit).
pub fn fit_nuisances(
    panel: &LongitudinalPanel,
    cfg: &EstimatorConfig,
    freq: Option<&[f64]>,
    warm: Option<&FittedNuisances>,
    keep_scores: bool,
) -> Result<FittedNuisances, EstimatorError> {
    let kind = cfg.kind;
    let mut out = FittedNuisances::default();
    let needs_treatment = matches!(kind, EstimatorKind::Sra | EstimatorKind::SraStabilized) || kind.is_iv();
    if needs_treatment {
        let init = warm.and_then(|w| w.treatment.as_ref()).map(|f| f.theta());
        let opts = treatment_fit_options(cfg, freq, init, keep_scores);
        out.treatment = match &cfg.treatment {
            TreatmentModel::Probit(cov) => Some(fit_probit_treatment_with(panel, cov, &opts)?),
            TreatmentModel::Markov { q } => Some(fit_markov_treatment_with(panel, *q, &opts)?),
            TreatmentModel::KnownDelta(_) => {
                if !kind.is_iv() {
                    return Err(EstimatorError::Unsupported(format!(
                        "{} weights need a fitted treatment model",
                        kind.name()
                    )));
                }
                None
            }
        };
    }
    if kind == EstimatorKind::SraStabilized {
        let init = warm.and_then(|w| w.marginal.as_ref()).map(|f| f.theta());
        let opts = treatment_fit_options(cfg, freq, init, keep_scores);
        out.marginal = Some(fit_probit_with(panel, &cfg.marginal, &opts)?);
    }
    if kind.is_iv() {
        if let InstrumentModel::Logistic(cov) = &cfg.instrument {
            let init = warm.and_then(|w| w.instrument.as_ref()).map(|f| f.theta());
            let opts = treatment_fit_options(cfg, freq, init, keep_scores);
            out.instrument = Some(fit_logistic_iv_density_with(panel, cov, &opts)?);
        }
    }
    if kind == EstimatorKind::IvStabilized {
        out.gamma = Some(match cfg.gamma {
            GammaChoice::Fixed(g) => g,
            GammaChoice::Empirical => empirical_gamma(panel, cfg, &out, freq),
        });
    }
    Ok(out)
}

fn empirical_gamma(panel: &LongitudinalPanel, cfg: &EstimatorConfig, nuis: &FittedNuisances, freq: Option<&[f64]>) -> [f64; 2] {
    let mut sum = [0.0; 2];
    let mut cnt = [0.0; 2];
    let mut buf = Vec::new();
    for i in 0..panel.n {
        let c = freq.map_or(1.0, |f| f[i]);
        if c == 0.0 {
            continue;
        }
        for t in 1..panel.periods {
            let a = panel.treatment(i, t - 1) as usize;
            sum[a] += c * delta_value(panel, cfg, nuis, i, t, 1.0, &mut buf).abs();
            cnt[a] += c;
        }
    }
    let mut g = [0.0; 2];
    for a in 0..2 {
        g[a] = if cnt[a] > 0.0 { sum[a] / cnt[a] } else { f64::NAN };
    }
    match (g[0].is_nan(), g[1].is_nan()) {
        (true, true) => [0.5, 0.5],
        (true, false) => [0.5, 0.5],
        (false, true) => [0.5, 0.5],
        _ => {
            let s = g[0] + g[1];
            [g[0] / s, g[1] / s]
        }
    }
}

fn delta_value(
    panel: &LongitudinalPanel,
    cfg: &EstimatorConfig,
    nuis: &FittedNuisances,
    i: usize,
    t: usize,
    a: f64,
    buf: &mut Vec<f64>,
) -> f64 {
    match (&nuis.treatment, &cfg.treatment) {
        (Some(fit), _) => fit.delta(panel, i, t, a, buf),
        (None, TreatmentModel::KnownDelta(d)) => d(panel, i, t, a),
        _ => panic!("no compliance-difference model available"),
    }
}

fn instrument_value(panel: &LongitudinalPanel, cfg: &EstimatorConfig, nuis: &FittedNuisances, i: usize, t: usize, buf: &mut Vec<f64>) -> f64 {
    match (&nuis.instrument, &cfg.instrument) {
        (Some(fit), _) => fit.instrument_density(panel, i, t, buf),
        (None, InstrumentModel::Known(p)) => {
            if panel.instrument(i, t) == 1.0 {
                *p
            } else {
                1.0 - p
            }
        }
        (None, InstrumentModel::Logistic(_)) => panic!("instrument model was not fitted"),
    }
}

/// Constructs the weights implied by the configuration and fitted nuisances.
pub fn build_weights(panel: &LongitudinalPanel, cfg: &EstimatorConfig, nuis: &FittedNuisances) -> Result<WeightSet, EstimatorError> {
    let buf = RefCell::new(Vec::new());
    let buf2 = RefCell::new(Vec::new());
    let ws = match cfg.kind {
        EstimatorKind::Associational | EstimatorKind::Wald => unit_weights(panel),
        EstimatorKind::Sra => {
            let fit = nuis.treatment.as_ref().expect("treatment fit");
            sra_weights(panel, |i, t| fit.treatment_prob1(panel, i, t, &mut buf.borrow_mut()))?
        }
        EstimatorKind::SraStabilized => {
            let fit = nuis.treatment.as_ref().expect("treatment fit");
            let marg = nuis.marginal.as_ref().expect("marginal fit");
            sra_stabilized_weights(
                panel,
                |i, t| marg.treatment_prob1(panel, i, t, &mut buf2.borrow_mut()),
                |i, t| fit.treatment_prob1(panel, i, t, &mut buf.borrow_mut()),
            )?
        }
        EstimatorKind::Oracle => {
            if !panel.has_latent() {
                return Err(EstimatorError::LatentRequired);
            }
            let oracle = cfg
                .oracle
                .as_ref()
                .ok_or_else(|| EstimatorError::Unsupported("oracle estimator needs the true propensity".into()))?;
            oracle_weights(panel, |i, t| oracle(panel, i, t))?
        }
        EstimatorKind::Iv | EstimatorKind::RepeatedMeasuresIv => iv_weights(
            panel,
            |i, t| instrument_value(panel, cfg, nuis, i, t, &mut buf2.borrow_mut()),
            |i, t, a| delta_value(panel, cfg, nuis, i, t, a, &mut buf.borrow_mut()),
        )?,
        EstimatorKind::IvStabilized => {
            let g = nuis.gamma.unwrap_or([0.5, 0.5]);
            iv_stabilized_weights(
                panel,
                |_, prev| match prev {
                    None => 1.0,
                    Some(a) => g[a as usize],
                },
                |i, t| instrument_value(panel, cfg, nuis, i, t, &mut buf2.borrow_mut()),
                |i, t, a| delta_value(panel, cfg, nuis, i, t, a, &mut buf.borrow_mut()),
            )?
        }
    };
    Ok(ws)
}

/// Per-period `∂ log|w_t| / ∂θ` for subject `i`, one row per period in
/// the stacked nuisance coordinates.
pub fn log_weight_gradients(panel: &LongitudinalPanel, cfg: &EstimatorConfig, nuis: &FittedNuisances, i: usize) -> Matrix {
    let d = nuis.dim();
    let mut out = Matrix::zeros(panel.periods, d);
    if d == 0 {
        return out;
    }
    let off = nuis.offsets();
    let mut buf = Vec::new();
    let mut tmp = vec![0.0; d];
    for t in 0..panel.periods {
        let row = out.row_mut(t);
        match cfg.kind {
            EstimatorKind::Sra | EstimatorKind::SraStabilized => {
                let fit = nuis.treatment.as_ref().expect("treatment fit");
                let k = fit.dim();
                fit.treatment_log_gradient(panel, i, t, &mut buf, &mut tmp[..k]);
                row[off[0]..off[0] + k].copy_from_slice(&tmp[..k]);
                if let Some(m) = &nuis.marginal {
                    let km = m.dim();
                    m.treatment_log_gradient(panel, i, t, &mut buf, &mut tmp[..km]);
                    for j in 0..km {
                        row[off[1] + j] = -tmp[j];
                    }
                }
            }
            EstimatorKind::Iv | EstimatorKind::IvStabilized | EstimatorKind::RepeatedMeasuresIv => {
                if let Some(fit) = &nuis.treatment {
                    let k = fit.dim();
                    fit.delta_log_gradient(panel, i, t, &mut buf, &mut tmp[..k]);
                    row[off[0]..off[0] + k].copy_from_slice(&tmp[..k]);
                }
                if let Some(z) = &nuis.instrument {
                    let k = z.dim();
                    z.instrument_log_gradient(panel, i, t, &mut buf, &mut tmp[..k]);
                    row[off[2]..off[2] + k].copy_from_slice(&tmp[..k]);
                }
            }
            _ => {}
        }
    }
    out
}

/// Terms `(h, g, y, t)` of the estimating equation contributed by subject
/// `i`: one row at the last period for a terminal outcome, one row per
/// period for the stacked repeated-measures equation.
pub fn estimating_rows(panel: &LongitudinalPanel, spec: &MsmmSpec, kind: EstimatorKind, i: usize) -> Vec<(Vec<f64>, Vec<f64>, f64, usize)> {
    let path = panel.treatment_path(i);
    if kind == EstimatorKind::RepeatedMeasuresIv {
        (0..panel.periods)
            .map(|t| {
                let prefix = &path[..=t];
                let y = panel.period_outcome(i, t).expect("per-period outcome");
                (design_row(spec, prefix), spec.basis(prefix), y, t)
            })
            .collect()
    } else {
        vec![(design_row(spec, path), spec.basis(path), panel.terminal_outcome(i), panel.periods - 1)]
    }
}

fn check_panel(panel: &LongitudinalPanel, kind: EstimatorKind) -> Result<(), EstimatorError> {
    match kind {
        EstimatorKind::Wald if panel.periods != 1 => Err(EstimatorError::WaldRequiresSinglePeriod(panel.periods)),
        EstimatorKind::Oracle if !panel.has_latent() => Err(EstimatorError::LatentRequired),
        EstimatorKind::RepeatedMeasuresIv if !panel.is_repeated() => {
            Err(EstimatorError::Unsupported("repeated-measures estimator needs per-period outcomes (y_t)".into()))
        }
        k if k != EstimatorKind::RepeatedMeasuresIv && panel.is_repeated() => Err(EstimatorError::Unsupported(format!(
            "{} needs a terminal outcome (y), panel has per-period outcomes",
            k.name()
        ))),
        _ => Ok(()),
    }
}

fn solve_system(m: &Matrix, b: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    let cond = match condition_number(m) {
        Ok(c) => c,
        Err(NumericsError::SingularMatrix { .. }) | Err(NumericsError::NonFinite) => f64::INFINITY,
        Err(_) => f64::INFINITY,
    };
    if !(cond <= SINGULAR_CONDITION) {
        return Err(EstimatorError::SingularDesign { condition: cond });
    }
    let mut x = solve_linear(m, b).map_err(|_| EstimatorError::SingularDesign { condition: cond })?;
    // One step of iterative refinement.
    let r: Vec<f64> = (0..b.len()).map(|i| b[i] - m.row(i).iter().zip(&x).map(|(a, v)| a * v).sum::<f64>()).collect();
    if let Ok(dx) = solve_linear(m, &r) {
        for (v, d) in x.iter_mut().zip(dx) {
            *v += d;
        }
    }
    Ok(x)
}

fn weighted_normal_equations(
    panel: &LongitudinalPanel,
    weights: &WeightSet,
    spec: &MsmmSpec,
    kind: EstimatorKind,
    freq: Option<&[f64]>,
) -> (Matrix, Vec<f64>) {
    let p = spec.dim();
    let mut m = Matrix::zeros(p, p);
    let mut b = vec![0.0; p];
    for i in 0..panel.n {
        let c = freq.map_or(1.0, |f| f[i]);
        if c == 0.0 {
            continue;
        }
        for (h, g, y, t) in estimating_rows(panel, spec, kind, i) {
            let iw = c * weights.inverse_wbar_t(i, t);
            m.add_outer(iw, &h, &g);
            for j in 0..p {
                b[j] += iw * h[j] * y;
            }
        }
    }
    (m, b)
}

/// `β̂ = (Pₙ h gᵀ/W̄)⁻¹ Pₙ h Y/W̄`.
pub fn wls_estimate(panel: &LongitudinalPanel, weights: &WeightSet, spec: &MsmmSpec) -> Result<Vec<f64>, EstimatorError> {
    wls_estimate_weighted(panel, weights, spec, None)
}

/// Frequency-weighted form of [`wls_estimate`].
pub fn wls_estimate_weighted(
    panel: &LongitudinalPanel,
    weights: &WeightSet,
    spec: &MsmmSpec,
    freq: Option<&[f64]>,
) -> Result<Vec<f64>, EstimatorError> {
    let (m, b) = weighted_normal_equations(panel, weights, spec, EstimatorKind::Associational, freq);
    solve_system(&m, &b)
}

/// Stacked estimator `Σ_i Σ_t h_t (Y_t − m_β(Ā_t))/W̄_t = 0` with
/// `h_t = g_t` the basis of the prefix path.
pub fn repeated_measures_iv_estimate(
    panel: &LongitudinalPanel,
    weights: &WeightSet,
    spec: &MsmmSpec,
) -> Result<Vec<f64>, EstimatorError> {
    repeated_measures_weighted(panel, weights, spec, None)
}

fn repeated_measures_weighted(
    panel: &LongitudinalPanel,
    weights: &WeightSet,
    spec: &MsmmSpec,
    freq: Option<&[f64]>,
) -> Result<Vec<f64>, EstimatorError> {
    if !panel.is_repeated() {
        return Err(EstimatorError::Unsupported("repeated-measures estimator needs per-period outcomes (y_t)".into()));
    }
    let (m, b) = weighted_normal_equations(panel, weights, spec, EstimatorKind::RepeatedMeasuresIv, freq);
    solve_system(&m, &b)
}

/// `Pₙ Σ_rows h (Y − gᵀβ)/W̄` with frequency weights.
pub fn mean_beta_score(panel: &LongitudinalPanel, cfg: &EstimatorConfig, weights: &WeightSet, beta: &[f64]) -> Vec<f64> {
    let p = cfg.spec.dim();
    let mut s = vec![0.0; p];
    for i in 0..panel.n {
        for (h, g, y, t) in estimating_rows(panel, &cfg.spec, cfg.kind, i) {
            let r = (y - g.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()) * weights.inverse_wbar_t(i, t);
            for j in 0..p {
                s[j] += h[j] * r;
            }
        }
    }
    s.iter().map(|v| v / panel.n as f64).collect()
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub kind: EstimatorKind,
    pub beta: Vec<f64>,
    pub nuisances: FittedNuisances,
    pub weights: WeightSet,
    pub weight_second_moment: f64,
}

/// Fits nuisances, builds the weights and solves the estimating equation.
pub fn estimate(panel: &LongitudinalPanel, cfg: &EstimatorConfig) -> Result<Estimate, EstimatorError> {
    estimate_weighted(panel, cfg, None, None, true)
}

/// Frequency-weighted estimation with optional warm-started nuisances.
pub fn estimate_weighted(
    panel: &LongitudinalPanel,
    cfg: &EstimatorConfig,
    freq: Option<&[f64]>,
    warm: Option<&FittedNuisances>,
    keep_scores: bool,
) -> Result<Estimate, EstimatorError> {
    check_panel(panel, cfg.kind)?;
    if cfg.kind == EstimatorKind::Wald {
        let beta = wald_weighted_counts(panel, freq)?;
        let weights = unit_weights(panel);
        return Ok(Estimate {
            kind: cfg.kind,
            beta: vec![beta],
            nuisances: FittedNuisances::default(),
            weight_second_moment: 1.0,
            weights,
        });
    }
    let nuisances = fit_nuisances(panel, cfg, freq, warm, keep_scores)?;
    let weights = build_weights(panel, cfg, &nuisances)?;
    let beta = if cfg.kind == EstimatorKind::RepeatedMeasuresIv {
        repeated_measures_weighted(panel, &weights, &cfg.spec, freq)?
    } else {
        wls_estimate_weighted(panel, &weights, &cfg.spec, freq)?
    };
    Ok(Estimate { kind: cfg.kind, beta, nuisances, weight_second_moment: weights.second_moment(), weights })
}

fn wald_weighted_counts(panel: &LongitudinalPanel, freq: Option<&[f64]>) -> Result<f64, EstimatorError> {
    if panel.periods != 1 {
        return Err(EstimatorError::WaldRequiresSinglePeriod(panel.periods));
    }
    let mut n = [0.0; 2];
    let mut sa = [0.0; 2];
    let mut sy = [0.0; 2];
    for i in 0..panel.n {
        let c = freq.map_or(1.0, |f| f[i]);
        let g = usize::from(panel.instrument(i, 0) == 1.0);
        n[g] += c;
        sa[g] += c * panel.treatment(i, 0);
        sy[g] += c * panel.terminal_outcome(i);
    }
    if n[0] == 0.0 || n[1] == 0.0 {
        return Err(EstimatorError::EmptyInstrumentGroup);
    }
    let den = sa[1] / n[1] - sa[0] / n[0];
    if den == 0.0 {
        return Err(EstimatorError::ZeroDenominator);
    }
    Ok((sy[1] / n[1] - sy[0] / n[0]) / den)
}

/// `(Pₙ Y{Z=1} − Pₙ Y{Z=0}) / (Pₙ A{Z=1} − Pₙ A{Z=0})` with group means.
pub fn wald_estimate(panel: &LongitudinalPanel) -> Result<f64, EstimatorError> {
    check_panel(panel, EstimatorKind::Wald)?;
    wald_weighted_counts(panel, None)
}

/// The signed-weight form `(Pₙ A (−1)^{1−Z}/f̂_Z)⁻¹ Pₙ (−1)^{1−Z} Y/f̂_Z`
/// with the empirical instrument distribution `f̂_Z`.
pub fn wald_weighted_form(panel: &LongitudinalPanel) -> Result<f64, EstimatorError> {
    check_panel(panel, EstimatorKind::Wald)?;
    let n = panel.n as f64;
    let n1 = (0..panel.n).filter(|&i| panel.instrument(i, 0) == 1.0).count() as f64;
    let n0 = n - n1;
    if n0 == 0.0 || n1 == 0.0 {
        return Err(EstimatorError::EmptyInstrumentGroup);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..panel.n {
        let w = if panel.instrument(i, 0) == 1.0 { n / n1 } else { -n / n0 };
        num += w * panel.terminal_outcome(i);
        den += w * panel.treatment(i, 0);
    }
    if den == 0.0 {
        return Err(EstimatorError::ZeroDenominator);
    }
    Ok(num / den)
}

/// Plug-in Monte Carlo evaluation of the population bias of the
/// associational and SRA estimators on the linear process. The
/// confounding part of the outcome, `Σ_t τ_t(L_t − E(L_t|A_{t−1})) + ρ_t U_t`,
/// is projected on the design with unit or observed-propensity weights.
pub fn theoretical_bias(kind: EstimatorKind, params: &LinearDgpParams, n: usize, seed: u64) -> Result<Vec<f64>, EstimatorError> {
    let spec = MsmmSpec::linear_cumulative();
    match kind {
        EstimatorKind::Iv | EstimatorKind::IvStabilized | EstimatorKind::Oracle | EstimatorKind::Wald => {
            return Ok(vec![0.0; spec.dim()])
        }
        EstimatorKind::Associational | EstimatorKind::Sra => {}
        other => return Err(EstimatorError::Unsupported(format!("no bias formula for {}", other.name()))),
    }
    let sim = crate::simulate::simulate_linear(params, n, seed)?;
    let mut panel = sim.panel;
    let mut eta = Vec::with_capacity(n);
    for i in 0..n {
        let mut e = 0.0;
        for t in 0..panel.periods {
            let prev = if t == 0 { 0.0 } else { panel.treatment(i, t - 1) };
            let l = panel.covariates(i, t)[0];
            let u = panel.latent(i, t).expect("latent")[0];
            e += params.tau_at(t) * (l - params.lambda0 - params.lambda1 * prev) + params.rho_at(t) * u;
        }
        eta.push(e);
    }
    panel.outcome = Outcome::Terminal(eta);
    let weights = if kind == EstimatorKind::Sra {
        sra_weights(&panel, |i, t| params.observed_propensity(panel.covariates(i, t)[0], panel.instrument(i, t)))?
    } else {
        unit_weights(&panel)
    };
    wls_estimate(&panel, &weights, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_period(z: &[f64], a: &[f64], y: &[f64]) -> LongitudinalPanel {
        let n = a.len();
        LongitudinalPanel {
            n,
            periods: 1,
            k: 1,
            ku: 0,
            subject_ids: (1..=n as u64).collect(),
            a: a.to_vec(),
            z: z.to_vec(),
            l: vec![0.0; n],
            u: None,
            outcome: Outcome::Terminal(y.to_vec()),
            binary: true,
        }
    }

    #[test]
    fn noiseless_unit_weights_interpolate() {
        let a = [0.0, 1.0, 1.0, 0.0, 1.0];
        let y: Vec<f64> = a.iter().map(|v| 1.0 + 2.0 * v).collect();
        let p = one_period(&[0.0; 5], &a, &y);
        let b = wls_estimate(&p, &unit_weights(&p), &MsmmSpec::linear_cumulative()).unwrap();
        assert_eq!(b, vec![1.0, 2.0]);
    }

    #[test]
    fn three_subject_hand_solve() {
        // Weights 1/W̄ = (2, 1.25, 4); design (1, a) with a = (0, 1, 1); y = (1, 2, 4).
        // Normal equations: [7.25 5.25; 5.25 5.25] β = [20.5, 18.5].
        let p = one_period(&[1.0, 1.0, 1.0], &[0.0, 1.0, 1.0], &[1.0, 2.0, 4.0]);
        let inv = [2.0, 1.25, 4.0];
        let ws = sra_weights(&p, |i, _| if p.treatment(i, 0) == 1.0 { 1.0 / inv[i] } else { 1.0 - 1.0 / inv[i] }).unwrap();
        let b = wls_estimate(&p, &ws, &MsmmSpec::linear_cumulative()).unwrap();
        // det = 10.5, β0 = 5.25·2/10.5 = 1, β1 = (7.25·18.5 − 5.25·20.5)/10.5 = 26.5/10.5
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((b[1] - 26.5 / 10.5).abs() < 1e-12, "{b:?}");
    }

    #[test]
    fn no_treatment_variation_is_singular() {
        let p = one_period(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]);
        let r = wls_estimate(&p, &unit_weights(&p), &MsmmSpec::linear_cumulative());
        assert!(matches!(r, Err(EstimatorError::SingularDesign { .. })));
    }

    #[test]
    fn wald_examples() {
        let p = one_period(&[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], &[3.0, 3.0, 1.0, 1.0]);
        assert_eq!(wald_estimate(&p).unwrap(), 2.0);
        let a = [1.0, 0.0, 1.0, 0.0, 1.0];
        let y: Vec<f64> = a.iter().map(|v| 5.0 * v).collect();
        let p = one_period(&a, &a, &y);
        assert_eq!(wald_estimate(&p).unwrap(), 5.0);
        let p = one_period(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[3.0, 1.0, 1.0, 1.0]);
        assert_eq!(wald_estimate(&p), Err(EstimatorError::ZeroDenominator));
        assert_eq!(wald_weighted_form(&p), Err(EstimatorError::ZeroDenominator));
    }

    #[test]
    fn wald_needs_single_period() {
        let mut p = one_period(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]);
        p.periods = 2;
        p.n = 1;
        assert_eq!(wald_estimate(&p), Err(EstimatorError::WaldRequiresSinglePeriod(2)));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("bogus".parse::<EstimatorKind>().unwrap_err().contains("valid"));
    }

    #[test]
    fn exogenous_treatment_has_no_associational_bias() {
        // The compliance term must not depend on L either.
        let params = LinearDgpParams { nu1: 0.0, nu2: 0.0, alpha1: 0.0, ..Default::default() };
        let b = theoretical_bias(EstimatorKind::Associational, &params, 40_000, 3).unwrap();
        assert!(b[1].abs() < 0.05, "{b:?}");
        assert_eq!(theoretical_bias(EstimatorKind::Iv, &params, 10, 3).unwrap(), vec![0.0, 0.0]);
    }
}
