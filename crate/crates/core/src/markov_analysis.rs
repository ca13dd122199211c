//! Second moments and growth rates of inverse weights in two-state
//! Markov chain models, with Monte Carlo counterparts.
//!
//! SRA chain: `L_t → A_t → L_{t+1}` with `p_LA = P(A_t = L_t)` and
//! `p_AL = P(L_{t+1} = A_t)`. IV chain: covariates follow a symmetric
//! chain with persistence `p` and the inverse weight is `Π_t δ_{L_t}⁻²`.

use std::io::Write;

use rand::Rng;
use thiserror::Error;

use crate::numerics::{eig2x2, Matrix, NumericsError};
use crate::panel::fmt_f64;
use crate::simulate::{simulate_markov, substream, MarkovDgpParams, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

fn open_unit(name: &str, p: f64) -> Result<(), AnalysisError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(AnalysisError::InvalidParams(format!("{name} = {p} outside (0,1)")))
    }
}

fn nonzero(name: &str, d: f64) -> Result<(), AnalysisError> {
    if d != 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(AnalysisError::InvalidParams(format!("{name} must be finite and nonzero")))
    }
}

fn rho(p: f64) -> f64 {
    p * (1.0 - p)
}

/// `E(1/W̄²) = (p_LA(1 − p_LA))^{−T}` for unstabilized SRA weights.
pub fn sra_unstab_second_moment(p_la: f64, periods: usize) -> Result<f64, AnalysisError> {
    open_unit("p_la", p_la)?;
    Ok(rho(p_la).powi(-(periods as i32)))
}

/// Per-period factor `1 + 4 ρ(p_AL)/ρ(p_LA) (p_LA − 1/2)²` of the
/// stabilized SRA second moment.
pub fn sra_stab_growth(p_la: f64, p_al: f64) -> Result<f64, AnalysisError> {
    open_unit("p_la", p_la)?;
    open_unit("p_al", p_al)?;
    Ok(1.0 + 4.0 * rho(p_al) / rho(p_la) * (p_la - 0.5).powi(2))
}

/// `E(1/W̄²)` for stabilized SRA weights `Π f(A_t|A_{t−1})/f(A_t|L_t)`
/// with a stationary start.
pub fn sra_stab_second_moment(p_la: f64, p_al: f64, periods: usize) -> Result<f64, AnalysisError> {
    Ok(sra_stab_growth(p_la, p_al)?.powi(periods as i32))
}

/// First-order approximation of `n Var(β̂)` for the unstabilized SRA
/// estimator of `m = β Σ a` with `h = Σ a`, when `p_LA = p_AL = p` and
/// `Y = λ Σ_t (L_t − E(L_t|A_{t−1})) + β Σ A_t + ε`, `Var ε = σ²`.
pub fn sra_variance_approx(p: f64, periods: usize, lambda: f64, sigma2: f64) -> Result<f64, AnalysisError> {
    open_unit("p", p)?;
    if periods == 0 {
        return Err(AnalysisError::InvalidParams("periods must be at least 1".into()));
    }
    let t = periods as f64;
    let r = rho(p);
    Ok((lambda * lambda + sigma2 / (t * r)) / ((t + 1.0) * (4.0 * r).powi(periods as i32 - 1)))
}

/// `ω = 1/(δ0 δ1)`, `κ = 1/δ0² − 1/δ1²`.
pub fn omega_kappa(delta0: f64, delta1: f64) -> Result<(f64, f64), AnalysisError> {
    nonzero("delta0", delta0)?;
    nonzero("delta1", delta1)?;
    Ok((1.0 / (delta0 * delta1), 1.0 / (delta0 * delta0) - 1.0 / (delta1 * delta1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthModel {
    SraUnstab,
    SraStab,
    IvUnstab,
    IvStab,
}

impl GrowthModel {
    pub const ALL: [GrowthModel; 4] = [GrowthModel::SraUnstab, GrowthModel::SraStab, GrowthModel::IvUnstab, GrowthModel::IvStab];

    pub fn name(&self) -> &'static str {
        match self {
            GrowthModel::SraUnstab => "sra_unstab",
            GrowthModel::SraStab => "sra_stab",
            GrowthModel::IvUnstab => "iv_unstab",
            GrowthModel::IvStab => "iv_stab",
        }
    }
}

impl std::str::FromStr for GrowthModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GrowthModel::ALL.iter().copied().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = GrowthModel::ALL.iter().map(|m| m.name()).collect();
            format!("unknown model '{s}' (valid models: {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone)]
pub struct GrowthReport {
    pub model: GrowthModel,
    pub params: Vec<(String, f64)>,
    pub periods: usize,
    pub second_moment: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub omega: Option<f64>,
    pub kappa: Option<f64>,
    pub recurrence_matrix: Matrix,
    /// Stabilizing factors before normalization.
    pub raw_gamma: Option<[f64; 2]>,
    /// `λ1 ≤ p √(κ² + 4ω²)` for the unstabilized IV chain.
    pub bound_holds: Option<bool>,
    /// Stabilized IV: κ-dependent and ω-dependent parts of `tr/2`.
    pub kappa_term: Option<f64>,
    pub omega_term: Option<f64>,
    /// Stabilized IV: `λ1` from the `(ω, κ, γ0 − γ1)` parametrization.
    pub lambda1_reparam: Option<f64>,
}

fn report(model: GrowthModel, params: Vec<(String, f64)>, periods: usize, second_moment: f64, m: Matrix) -> Result<GrowthReport, AnalysisError> {
    let (l1, l2) = eig2x2(&m)?;
    Ok(GrowthReport {
        model,
        params,
        periods,
        second_moment,
        lambda1: l1,
        lambda2: l2,
        omega: None,
        kappa: None,
        recurrence_matrix: m,
        raw_gamma: None,
        bound_holds: None,
        kappa_term: None,
        omega_term: None,
        lambda1_reparam: None,
    })
}

pub fn sra_unstab_growth(p_la: f64, periods: usize) -> Result<GrowthReport, AnalysisError> {
    let g = 1.0 / rho(p_la);
    report(
        GrowthModel::SraUnstab,
        vec![("p_la".into(), p_la)],
        periods,
        sra_unstab_second_moment(p_la, periods)?,
        Matrix::diagonal(&[g, g]),
    )
}

pub fn sra_stab_growth_report(p_la: f64, p_al: f64, periods: usize) -> Result<GrowthReport, AnalysisError> {
    let g = sra_stab_growth(p_la, p_al)?;
    report(
        GrowthModel::SraStab,
        vec![("p_la".into(), p_la), ("p_al".into(), p_al)],
        periods,
        g.powi(periods as i32),
        Matrix::diagonal(&[g, g]),
    )
}

/// `[[p/δ0², (1−p)/δ1²], [(1−p)/δ0², p/δ1²]]`.
pub fn iv_unstab_matrix(p: f64, delta0: f64, delta1: f64) -> Matrix {
    let (a, b) = (1.0 / (delta0 * delta0), 1.0 / (delta1 * delta1));
    Matrix::from_rows(&[&[p * a, (1.0 - p) * b], &[(1.0 - p) * a, p * b]])
}

/// Closed-form principal eigenvalue of the unstabilized IV recurrence.
pub fn iv_unstab_lambda1(p: f64, delta0: f64, delta1: f64) -> f64 {
    let s = 1.0 / (delta0 * delta0) + 1.0 / (delta1 * delta1);
    let dd = (delta0 * delta1).powi(2);
    p / 2.0 * s + (p * p / 4.0 * s * s - (2.0 * p - 1.0) / dd).sqrt()
}

/// `E(Π_t δ_{L_t}⁻²)` by the backward recurrence `φ_t = M φ_{t+1}`, `φ_{T+1} = (1, 1)`.
pub fn iv_exact_second_moment(p: f64, delta0: f64, delta1: f64, periods: usize) -> Result<f64, AnalysisError> {
    open_unit("p", p)?;
    nonzero("delta0", delta0)?;
    nonzero("delta1", delta1)?;
    if periods == 0 {
        return Err(AnalysisError::InvalidParams("periods must be at least 1".into()));
    }
    let m = iv_unstab_matrix(p, delta0, delta1);
    let mut phi = vec![1.0, 1.0];
    for _ in 2..=periods {
        phi = m.mul_vec(&phi);
    }
    Ok(phi[0] / (2.0 * delta0 * delta0) + phi[1] / (2.0 * delta1 * delta1))
}

pub fn iv_unstab_growth(p: f64, delta0: f64, delta1: f64, periods: usize) -> Result<GrowthReport, AnalysisError> {
    let (omega, kappa) = omega_kappa(delta0, delta1)?;
    let m = iv_unstab_matrix(p, delta0, delta1);
    let mut r = report(
        GrowthModel::IvUnstab,
        vec![("p".into(), p), ("delta0".into(), delta0), ("delta1".into(), delta1)],
        periods,
        iv_exact_second_moment(p, delta0, delta1, periods)?,
        m,
    )?;
    r.lambda1 = iv_unstab_lambda1(p, delta0, delta1);
    let bound = p * (kappa * kappa + 4.0 * omega * omega).sqrt();
    r.bound_holds = Some(r.lambda1 <= bound * (1.0 + 1e-12));
    r.omega = Some(omega);
    r.kappa = Some(kappa);
    Ok(r)
}

/// `K[l][l'] = Σ_a P(a|l) P(l'|a) γ_a² / δ_{l'}²`.
pub fn iv_stab_matrix(p_la: f64, p_al: f64, delta: [f64; 2], gamma: [f64; 2]) -> Matrix {
    let mut k = Matrix::zeros(2, 2);
    for l in 0..2 {
        for lp in 0..2 {
            let mut s = 0.0;
            for a in 0..2 {
                let pa = if a == l { p_la } else { 1.0 - p_la };
                let pl = if lp == a { p_al } else { 1.0 - p_al };
                s += pa * pl * gamma[a] * gamma[a];
            }
            k[(l, lp)] = s / (delta[lp] * delta[lp]);
        }
    }
    k
}

/// `E(Π_t γ²_{A_{t−1}} / δ²_{L_t})` with `A_0` uniform and the chain
/// `A_{t−1} → L_t → A_t`.
pub fn iv_stab_exact_second_moment(p_la: f64, p_al: f64, delta: [f64; 2], gamma: [f64; 2], periods: usize) -> Result<f64, AnalysisError> {
    open_unit("p_la", p_la)?;
    open_unit("p_al", p_al)?;
    nonzero("delta0", delta[0])?;
    nonzero("delta1", delta[1])?;
    if periods == 0 {
        return Err(AnalysisError::InvalidParams("periods must be at least 1".into()));
    }
    let k = iv_stab_matrix(p_la, p_al, delta, gamma);
    let mut phi = vec![1.0, 1.0];
    for _ in 1..periods {
        phi = k.mul_vec(&phi);
    }
    let mut e = 0.0;
    for a0 in 0..2 {
        for l1 in 0..2 {
            let pl = if l1 == a0 { p_al } else { 1.0 - p_al };
            e += 0.5 * pl * gamma[a0] * gamma[a0] / (delta[l1] * delta[l1]) * phi[l1];
        }
    }
    Ok(e)
}

/// `γ_a = p_L δ_a + (1 − p_L) δ_{1−a}` before normalization.
pub fn default_gamma_raw(p_l: f64, delta0: f64, delta1: f64) -> [f64; 2] {
    [p_l * delta0 + (1.0 - p_l) * delta1, p_l * delta1 + (1.0 - p_l) * delta0]
}

/// Default stabilizing factors normalized to `γ0 + γ1 = 1`.
pub fn default_gamma(p_l: f64, delta0: f64, delta1: f64) -> Result<[f64; 2], AnalysisError> {
    normalize_gamma(default_gamma_raw(p_l, delta0, delta1))
}

pub fn normalize_gamma(g: [f64; 2]) -> Result<[f64; 2], AnalysisError> {
    let s = g[0] + g[1];
    if s == 0.0 || !s.is_finite() {
        return Err(AnalysisError::InvalidParams("stabilizing factors sum to zero".into()));
    }
    Ok([g[0] / s, g[1] / s])
}

/// Parts of `tr(K)/2` under `γ0 + γ1 = 1`, `d = γ0 − γ1`:
/// the ω-dependent `(1+d²)/8 √(κ²+4ω²)(a+b)` and the κ-dependent
/// `−dκ(1 − p_LA − p_AL)/4`, where `a = p_LA p_AL`, `b = (1−p_LA)(1−p_AL)`.
pub fn iv_stab_trace_terms(p_la: f64, p_al: f64, omega: f64, kappa: f64, d: f64) -> (f64, f64) {
    let a = p_la * p_al;
    let b = (1.0 - p_la) * (1.0 - p_al);
    let s = (kappa * kappa + 4.0 * omega * omega).sqrt();
    ((1.0 + d * d) / 8.0 * s * (a + b), -d * kappa * (1.0 - p_la - p_al) / 4.0)
}

pub fn iv_stab_growth(
    p_la: f64,
    p_al: f64,
    delta0: f64,
    delta1: f64,
    gamma0: f64,
    gamma1: f64,
    periods: usize,
) -> Result<GrowthReport, AnalysisError> {
    let (omega, kappa) = omega_kappa(delta0, delta1)?;
    let raw = [gamma0, gamma1];
    let g = normalize_gamma(raw)?;
    let delta = [delta0, delta1];
    let k = iv_stab_matrix(p_la, p_al, delta, g);
    let second = iv_stab_exact_second_moment(p_la, p_al, delta, g, periods)?;
    let mut r = report(
        GrowthModel::IvStab,
        vec![
            ("p_la".into(), p_la),
            ("p_al".into(), p_al),
            ("delta0".into(), delta0),
            ("delta1".into(), delta1),
            ("gamma0".into(), gamma0),
            ("gamma1".into(), gamma1),
        ],
        periods,
        second,
        k,
    )?;
    let d = g[0] - g[1];
    let (w_term, k_term) = iv_stab_trace_terms(p_la, p_al, omega, kappa, d);
    let half_tr = w_term + k_term;
    let det = (2.0 * p_la - 1.0) * (2.0 * p_al - 1.0) * (g[0] * g[1]).powi(2) / (delta0 * delta1).powi(2);
    let tr = 2.0 * half_tr;
    r.lambda1_reparam = Some(half_tr * (1.0 + (1.0 - 4.0 * det / (tr * tr)).max(0.0).sqrt()));
    r.omega = Some(omega);
    r.kappa = Some(kappa);
    r.raw_gamma = Some(raw);
    r.kappa_term = Some(k_term);
    r.omega_term = Some(w_term);
    Ok(r)
}

/// Header `model,<params>,T,second_moment,lambda1` for a homogeneous sweep.
pub fn write_growth_csv<W: Write>(reports: &[GrowthReport], extra: &[(&str, Vec<String>)], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    if let Some(first) = reports.first() {
        let mut h = vec!["model".to_string()];
        h.extend(first.params.iter().map(|(k, _)| k.clone()));
        h.extend(["T", "second_moment", "lambda1"].map(String::from));
        h.extend(extra.iter().map(|(k, _)| k.to_string()));
        wr.write_record(&h)?;
    }
    for (i, r) in reports.iter().enumerate() {
        let mut row = vec![r.model.name().to_string()];
        row.extend(r.params.iter().map(|(_, v)| fmt_f64(*v)));
        row.extend([r.periods.to_string(), fmt_f64(r.second_moment), fmt_f64(r.lambda1)]);
        row.extend(extra.iter().map(|(_, v)| v[i].clone()));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Monte Carlo mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

impl McEstimate {
    pub fn from_samples(x: &[f64]) -> McEstimate {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        McEstimate { mean, se: (var / n).sqrt() }
    }

    pub fn z(&self, target: f64) -> f64 {
        (self.mean - target) / self.se
    }
}

/// Draws of the SRA chain for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SraChainPath {
    pub a0: u8,
    pub l: Vec<u8>,
    pub a: Vec<u8>,
}

/// Simulates the SRA chain. With `stationary_start` an initial `A_0`
/// is drawn uniformly and `L_1 | A_0` follows `p_AL`; otherwise `L_1` is uniform.
pub fn simulate_sra_chain(p_la: f64, p_al: f64, periods: usize, rng: &mut impl Rng, stationary_start: bool) -> SraChainPath {
    let flip = |rng: &mut dyn rand::RngCore, keep: f64, x: u8| if rng.gen::<f64>() < keep { x } else { 1 - x };
    let a0 = u8::from(rng.gen::<bool>());
    let mut l = Vec::with_capacity(periods);
    let mut a = Vec::with_capacity(periods);
    let mut lt = if stationary_start { flip(rng, p_al, a0) } else { u8::from(rng.gen::<bool>()) };
    for _ in 0..periods {
        let at = flip(rng, p_la, lt);
        l.push(lt);
        a.push(at);
        lt = flip(rng, p_al, at);
    }
    SraChainPath { a0, l, a }
}

/// `1/W̄²` of unstabilized SRA weights along a path.
pub fn sra_unstab_inverse_sq(p_la: f64, path: &SraChainPath) -> f64 {
    path.l.iter().zip(&path.a).map(|(l, a)| if l == a { p_la } else { 1.0 - p_la }).map(|f| 1.0 / (f * f)).product()
}

/// `1/W̄²` of stabilized SRA weights `Π f(A_t|A_{t−1})/f(A_t|L_t)`.
pub fn sra_stab_inverse_sq(p_la: f64, p_al: f64, path: &SraChainPath) -> f64 {
    let r = p_la * p_al + (1.0 - p_la) * (1.0 - p_al);
    let mut prev = path.a0;
    let mut out = 1.0;
    for (l, a) in path.l.iter().zip(&path.a) {
        let cond = if l == a { p_la } else { 1.0 - p_la };
        let marg = if *a == prev { r } else { 1.0 - r };
        out *= (marg / cond).powi(2);
        prev = *a;
    }
    out
}

pub fn mc_sra_unstab_second_moment(p_la: f64, p_al: f64, periods: usize, n: usize, seed: u64) -> McEstimate {
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            sra_unstab_inverse_sq(p_la, &simulate_sra_chain(p_la, p_al, periods, &mut rng, false))
        })
        .collect();
    McEstimate::from_samples(&x)
}

pub fn mc_sra_stab_second_moment(p_la: f64, p_al: f64, periods: usize, n: usize, seed: u64) -> McEstimate {
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            sra_stab_inverse_sq(p_la, p_al, &simulate_sra_chain(p_la, p_al, periods, &mut rng, true))
        })
        .collect();
    McEstimate::from_samples(&x)
}

/// Monte Carlo `n Var(β̂)` of the unstabilized SRA estimator with
/// `h = Σ A`, `m = β Σ a` and true propensities, over `replications` panels.
pub fn mc_sra_estimator_variance(
    p: f64,
    periods: usize,
    n: usize,
    lambda: f64,
    sigma2: f64,
    replications: usize,
    seed: u64,
) -> McEstimate {
    let sigma = sigma2.sqrt();
    let beta = 1.0;
    let est: Vec<f64> = (0..replications)
        .map(|r| {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                let mut rng = substream(crate::simulate::derive_seed(seed, r as u64), i as u64);
                let path = simulate_sra_chain(p, p, periods, &mut rng, false);
                let mut y = 0.0;
                let mut prev: Option<u8> = None;
                for (l, a) in path.l.iter().zip(&path.a) {
                    let mean = match prev {
                        None => 0.5,
                        Some(ap) => {
                            if ap == 1 {
                                p
                            } else {
                                1.0 - p
                            }
                        }
                    };
                    y += lambda * (f64::from(*l) - mean) + beta * f64::from(*a);
                    prev = Some(*a);
                }
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                y += sigma * e;
                let h: f64 = path.a.iter().map(|a| f64::from(*a)).sum();
                let iw = sra_unstab_inverse_sq(p, &path).sqrt();
                num += h * y * iw;
                den += h * h * iw;
            }
            num / den
        })
        .collect();
    let m = McEstimate::from_samples(&est);
    let var = est.iter().map(|b| (b - m.mean).powi(2)).sum::<f64>() / (replications as f64 - 1.0);
    // Standard error of a sample variance under approximate normality.
    McEstimate { mean: n as f64 * var, se: n as f64 * var * (2.0 / (replications as f64 - 1.0)).sqrt() }
}

/// Monte Carlo `E(Π δ_{L_t}⁻²)` on a symmetric covariate chain with persistence `p`.
pub fn mc_iv_unstab_second_moment(p: f64, delta0: f64, delta1: f64, periods: usize, n: usize, seed: u64) -> McEstimate {
    let d = [delta0, delta1];
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let mut l = usize::from(rng.gen::<bool>());
            let mut v = 1.0;
            for t in 0..periods {
                if t > 0 && rng.gen::<f64>() >= p {
                    l = 1 - l;
                }
                v /= d[l] * d[l];
            }
            v
        })
        .collect();
    McEstimate::from_samples(&x)
}

/// Monte Carlo `E(Π γ²_{A_{t−1}}/δ²_{L_t})` over the first `periods`
/// periods of each simulated chain, for every horizon up to `periods`.
pub fn mc_iv_stab_second_moments(
    p_la: f64,
    p_al: f64,
    delta: [f64; 2],
    gamma: [f64; 2],
    periods: usize,
    n: usize,
    seed: u64,
) -> Vec<McEstimate> {
    let mut samples = vec![Vec::with_capacity(n); periods];
    for i in 0..n {
        let mut rng = substream(seed, i as u64);
        let path = simulate_sra_chain(p_la, p_al, periods, &mut rng, true);
        let mut prev = path.a0 as usize;
        let mut v = 1.0;
        for t in 0..periods {
            let l = path.l[t] as usize;
            v *= gamma[prev] * gamma[prev] / (delta[l] * delta[l]);
            samples[t].push(v);
            prev = path.a[t] as usize;
        }
    }
    samples.iter().map(|s| McEstimate::from_samples(s)).collect()
}

/// Approximate `P(L_{t−1} = 1 | L_t = 1)` for the Markov process,
/// treating `L` as a chain with `P(L_t = 1 | L_{t−1} = 1) = (1−q)p_L + q/2`.
pub fn markov_back_transition(params: &MarkovDgpParams) -> f64 {
    let stay = (1.0 - params.q) * params.p_l + params.q / 2.0;
    stay * stay + (1.0 - stay) * (1.0 - stay)
}

/// Empirical `P(L_{t−1} = 1 | L_t = 1)` pooled over periods of a simulated Markov panel.
pub fn mc_back_transition(params: &MarkovDgpParams, n: usize, seed: u64) -> Result<f64, AnalysisError> {
    if params.periods < 2 {
        return Err(AnalysisError::InvalidParams("back-transition needs at least 2 periods".into()));
    }
    let sim = simulate_markov(params, n, seed)?;
    let p = &sim.panel;
    let (mut hit, mut tot) = (0.0, 0.0);
    for i in 0..p.n {
        for t in 1..p.periods {
            if p.covariates(i, t)[0] == 1.0 {
                tot += 1.0;
                hit += p.covariates(i, t - 1)[0];
            }
        }
    }
    Ok(hit / tot)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sra_unstab_examples() {
        assert_eq!(sra_unstab_second_moment(0.5, 1).unwrap(), 4.0);
        assert_eq!(sra_unstab_second_moment(0.5, 3).unwrap(), 64.0);
        assert!((sra_unstab_second_moment(0.3, 2).unwrap() - 22.675_736_961_451_25).abs() < 1e-9);
        assert!(sra_unstab_second_moment(1.0, 2).is_err());
    }

    #[test]
    fn sra_stab_examples() {
        for p_al in [0.1, 0.5, 0.8] {
            assert_eq!(sra_stab_second_moment(0.5, p_al, 4).unwrap(), 1.0);
        }
        let g = sra_stab_growth(0.7, 0.6).unwrap();
        assert!((g - (1.0 + 4.0 * 0.24 / 0.21 * 0.04)).abs() < 1e-15);
        assert!((g - 1.182_857_142_857_143).abs() < 1e-12);
    }

    #[test]
    fn variance_approx_at_half() {
        let (lambda, s2, t) = (1.3, 0.7, 5);
        let v = sra_variance_approx(0.5, t, lambda, s2).unwrap();
        assert!((v - (lambda * lambda + 4.0 * s2 / t as f64) / (t as f64 + 1.0)).abs() < 1e-12);
        assert!((sra_variance_approx(0.5, 3, 0.0, 1.0).unwrap() - 4.0 / 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn omega_kappa_examples() {
        assert_eq!(omega_kappa(0.25, 0.25).unwrap(), (16.0, 0.0));
        let (w, k) = omega_kappa(0.5, 1.0).unwrap();
        assert_eq!((w, k), (2.0, 3.0));
        assert_eq!((k * k + 4.0 * w * w).sqrt(), 5.0);
        assert!(omega_kappa(0.0, 1.0).is_err());
    }

    #[test]
    fn iv_unstab_examples() {
        assert!((iv_unstab_lambda1(0.5, 0.2, 0.2) - 25.0).abs() < 1e-10);
        assert!((iv_unstab_lambda1(0.5, 0.2, 0.4) - 15.625).abs() < 1e-10);
        for (p, d0, d1) in [(0.5, 0.2, 0.4), (0.8, 0.3, 0.5), (0.3, 0.4, 0.2)] {
            let (l1, _) = eig2x2(&iv_unstab_matrix(p, d0, d1)).unwrap();
            assert!((l1 - iv_unstab_lambda1(p, d0, d1)).abs() < 1e-10);
        }
        assert!((iv_exact_second_moment(0.6, 0.2, 0.2, 1).unwrap() - 25.0).abs() < 1e-10);
        assert!((iv_exact_second_moment(0.6, 0.2, 0.4, 1).unwrap() - 15.625).abs() < 1e-10);
    }

    #[test]
    fn iv_bound_equality_at_half() {
        let r = iv_unstab_growth(0.5, 0.3, 0.6, 4).unwrap();
        let bound = 0.5 * (r.kappa.unwrap().powi(2) + 4.0 * r.omega.unwrap().powi(2)).sqrt();
        assert!((r.lambda1 - bound).abs() < 1e-10);
        assert_eq!(r.bound_holds, Some(true));
    }

    #[test]
    fn default_gamma_examples() {
        assert_eq!(default_gamma(0.7, 0.3, 0.3).unwrap(), [0.5, 0.5]);
        assert_eq!(default_gamma_raw(1.0, 0.2, 0.4), [0.2, 0.4]);
        let raw = default_gamma_raw(0.7, 0.2, 0.4);
        assert!((raw[0] - 0.26).abs() < 1e-15 && (raw[1] - 0.34).abs() < 1e-15);
        let g = default_gamma(0.7, 0.2, 0.4).unwrap();
        assert!((g[0] - 0.26 / 0.6).abs() < 1e-15 && (g[1] - 0.34 / 0.6).abs() < 1e-15);
    }

    #[test]
    fn stabilized_reparametrization_matches_eigenvalue() {
        for (pla, pal, d0, d1, g0, g1) in [(0.7, 0.6, 0.2, 0.4, 0.3, 0.7), (0.6, 0.8, 0.3, 0.25, 0.5, 0.5), (0.55, 0.7, 0.4, 0.2, 1.0, 2.0)] {
            let r = iv_stab_growth(pla, pal, d0, d1, g0, g1, 3).unwrap();
            assert!((r.lambda1 - r.lambda1_reparam.unwrap()).abs() < 1e-10 * r.lambda1);
            let m = &r.recurrence_matrix;
            let tr = m.trace();
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            assert!((r.lambda1 - (tr / 2.0 + (tr * tr / 4.0 - det).sqrt())).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_gamma_drops_kappa_term() {
        let r = iv_stab_growth(0.7, 0.6, 0.3, 0.3, 0.5, 0.5, 2).unwrap();
        assert_eq!(r.kappa_term, Some(0.0));
    }

    #[test]
    fn unknown_model_lists_valid_ones() {
        let e = "nope".parse::<GrowthModel>().unwrap_err();
        assert!(e.contains("sra_unstab") && e.contains("iv_stab"));
    }
}
