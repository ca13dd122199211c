//! Data-generating processes with retained ground truth: the linear
//! probit process, the two-state Markov process with an instrument, and
//! the single-period continuous-treatment process.
//!
//! Randomness comes from ChaCha8 substreams: subject `i` of a panel drawn
//! with seed `s` always uses stream `i` of the generator keyed by `s`, so
//! panels are reproducible regardless of how replications are scheduled.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numerics::{normal_cdf, normal_pdf};
use crate::panel::{LongitudinalPanel, Outcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("rejection sampler exhausted {attempts} attempts")]
    RejectionFailure { attempts: u64 },
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one subject (or any other indexed unit) under `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[inline]
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[inline]
fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    if rng.gen::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpKind {
    Linear,
    Markov,
    Continuous,
}

impl DgpKind {
    pub fn name(&self) -> &'static str {
        match self {
            DgpKind::Linear => "linear",
            DgpKind::Markov => "markov",
            DgpKind::Continuous => "continuous",
        }
    }
}

impl std::str::FromStr for DgpKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(DgpKind::Linear),
            "markov" => Ok(DgpKind::Markov),
            "continuous" => Ok(DgpKind::Continuous),
            other => Err(format!("unknown dgp '{other}' (expected linear, markov or continuous)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub dgp: DgpKind,
    /// `(β0, β1)` for the linear process, `(β)` otherwise.
    pub beta: Vec<f64>,
    pub params: BTreeMap<String, String>,
}

impl Truth {
    pub fn slope(&self) -> f64 {
        *self.beta.last().expect("beta is nonempty")
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub panel: LongitudinalPanel,
    pub truth: Truth,
}

/// Forcing of treatments for interventional draws.
#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    Observational,
    /// Every subject receives the same path.
    Path(Vec<f64>),
    /// Subject `i` receives path `i`.
    PerSubject(Vec<Vec<f64>>),
}

impl Intervention {
    fn forced(&self, i: usize, t: usize) -> Option<f64> {
        match self {
            Intervention::Observational => None,
            Intervention::Path(p) => Some(p[t]),
            Intervention::PerSubject(ps) => Some(ps[i][t]),
        }
    }

    fn check(&self, n: usize, periods: usize) -> Result<(), SimError> {
        let bad = match self {
            Intervention::Observational => false,
            Intervention::Path(p) => p.len() != periods,
            Intervention::PerSubject(ps) => ps.len() != n || ps.iter().any(|p| p.len() != periods),
        };
        if bad {
            Err(SimError::InvalidParams("intervention does not match panel shape".into()))
        } else {
            Ok(())
        }
    }
}

/// Mean of the potential outcome under `path`.
pub fn counterfactual_mean(truth: &Truth, path: &[f64]) -> f64 {
    let s: f64 = path.iter().sum();
    match truth.dgp {
        DgpKind::Linear => truth.beta[0] + truth.beta[1] * s,
        DgpKind::Markov | DgpKind::Continuous => truth.beta[0] * s,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDgpParams {
    pub lambda0: f64,
    pub lambda1: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub nu0: f64,
    pub nu1: f64,
    pub nu2: f64,
    /// Per-period covariate loadings; missing entries default to 1.
    pub tau: Vec<f64>,
    /// Per-period latent loadings; missing entries default to 1.
    pub rho: Vec<f64>,
    pub beta0: f64,
    pub beta1: f64,
    pub periods: usize,
}

impl Default for LinearDgpParams {
    fn default() -> Self {
        LinearDgpParams {
            lambda0: 0.5,
            lambda1: 0.5,
            alpha0: 0.3,
            alpha1: 0.3,
            nu0: -0.2,
            nu1: 0.2,
            nu2: 0.2,
            tau: Vec::new(),
            rho: Vec::new(),
            beta0: 1.0,
            beta1: 1.0,
            periods: 2,
        }
    }
}

impl LinearDgpParams {
    pub fn with_periods(periods: usize) -> Self {
        LinearDgpParams { periods, ..Default::default() }
    }

    pub fn tau_at(&self, t: usize) -> f64 {
        self.tau.get(t).copied().unwrap_or(1.0)
    }

    pub fn rho_at(&self, t: usize) -> f64 {
        self.rho.get(t).copied().unwrap_or(1.0)
    }

    /// Compliance difference `Φ(α0 + α1 l)`.
    pub fn delta(&self, l: f64) -> f64 {
        normal_cdf(self.alpha0 + self.alpha1 * l)
    }

    /// `P(A=1 | L=l, U=u, Z=z)`.
    pub fn propensity(&self, l: f64, u: f64, z: f64) -> f64 {
        let d = self.delta(l);
        normal_cdf(self.nu0 + self.nu1 * l + self.nu2 * u) * (1.0 - d) + z * d
    }

    /// `P(A=1 | L=l, Z=z)` with the standard normal latent integrated out.
    pub fn observed_propensity(&self, l: f64, z: f64) -> f64 {
        let d = self.delta(l);
        let s = (1.0 + self.nu2 * self.nu2).sqrt();
        normal_cdf((self.nu0 + self.nu1 * l) / s) * (1.0 - d) + z * d
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let all = [
            self.lambda0, self.lambda1, self.alpha0, self.alpha1, self.nu0, self.nu1, self.nu2, self.beta0,
            self.beta1,
        ];
        if all.iter().chain(&self.tau).chain(&self.rho).any(|v| !v.is_finite()) {
            return Err(SimError::InvalidParams("non-finite linear parameter".into()));
        }
        if self.periods == 0 {
            return Err(SimError::InvalidParams("periods must be at least 1".into()));
        }
        Ok(())
    }

    pub fn truth(&self) -> Truth {
        let mut params = BTreeMap::new();
        for (k, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("alpha0", self.alpha0),
            ("alpha1", self.alpha1),
            ("nu0", self.nu0),
            ("nu1", self.nu1),
            ("nu2", self.nu2),
        ] {
            params.insert(k.to_string(), format!("{v}"));
        }
        params.insert("periods".into(), self.periods.to_string());
        params.insert("tau".into(), join(&(0..self.periods).map(|t| self.tau_at(t)).collect::<Vec<_>>()));
        params.insert("rho".into(), join(&(0..self.periods).map(|t| self.rho_at(t)).collect::<Vec<_>>()));
        Truth { dgp: DgpKind::Linear, beta: vec![self.beta0, self.beta1], params }
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

pub fn simulate_linear(params: &LinearDgpParams, n: usize, seed: u64) -> Result<SimOutput, SimError> {
    simulate_linear_with(params, n, seed, &Intervention::Observational)
}

pub fn simulate_linear_with(
    params: &LinearDgpParams,
    n: usize,
    seed: u64,
    intervention: &Intervention,
) -> Result<SimOutput, SimError> {
    params.validate()?;
    if n == 0 {
        return Err(SimError::InvalidParams("n must be at least 1".into()));
    }
    let periods = params.periods;
    intervention.check(n, periods)?;
    let cells = n * periods;
    let mut a = Vec::with_capacity(cells);
    let mut z = Vec::with_capacity(cells);
    let mut l = Vec::with_capacity(cells);
    let mut u = Vec::with_capacity(cells);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, i as u64);
        let mut a_prev = 0.0;
        let mut eta = 0.0;
        let mut cum = 0.0;
        for t in 0..periods {
            let lt = params.lambda0 + params.lambda1 * a_prev + normal(&mut rng);
            let ut = normal(&mut rng);
            let zt = bernoulli(&mut rng, 0.5);
            let p = params.propensity(lt, ut, zt);
            if !(p > 0.0 && p < 1.0) {
                return Err(SimError::InvalidParams(format!("treatment probability {p} outside (0,1)")));
            }
            let draw = bernoulli(&mut rng, p);
            let at = intervention.forced(i, t).unwrap_or(draw);
            eta += params.tau_at(t) * (lt - params.lambda0 - params.lambda1 * a_prev) + params.rho_at(t) * ut;
            cum += at;
            a.push(at);
            z.push(zt);
            l.push(lt);
            u.push(ut);
            a_prev = at;
        }
        y.push(eta + params.beta0 + params.beta1 * cum + normal(&mut rng));
    }
    Ok(SimOutput {
        panel: LongitudinalPanel {
            n,
            periods,
            k: 1,
            ku: 1,
            subject_ids: (1..=n as u64).collect(),
            a,
            z,
            l,
            u: Some(u),
            outcome: Outcome::Terminal(y),
            binary: true,
        },
        truth: params.truth(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovDgpParams {
    pub q: f64,
    pub p_l: f64,
    pub p_u: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub beta: f64,
    pub periods: usize,
}

impl Default for MarkovDgpParams {
    fn default() -> Self {
        MarkovDgpParams { q: 0.5, p_l: 0.7, p_u: 0.7, delta0: 0.2, delta1: 0.3, beta: 1.0, periods: 3 }
    }
}

#[inline]
fn concord(p: f64, same: bool) -> f64 {
    if same {
        p
    } else {
        1.0 - p
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

impl MarkovDgpParams {
    pub fn delta_at(&self, l: f64) -> f64 {
        if l == 1.0 {
            self.delta1
        } else {
            self.delta0
        }
    }

    /// Treatment kernel `P(A=a | L=l, U=u)` without the instrument term.
    pub fn base_prob(&self, a: f64, l: f64, u: f64) -> f64 {
        (1.0 - self.q) * concord(self.p_l, l == a) + self.q * concord(self.p_u, u == a)
    }

    /// `P(A=a | L=l, U=u, Z=z)`.
    pub fn treatment_prob(&self, a: f64, l: f64, u: f64, z: f64) -> f64 {
        self.base_prob(a, l, u) + sign01(z) * sign01(a) * self.delta_at(l) / 2.0
    }

    /// `P(A=a | L=l, Z=z)` with the latent state marginalized.
    pub fn observed_prob(&self, a: f64, l: f64, z: f64) -> f64 {
        self.q / 2.0 + (1.0 - self.q) * concord(self.p_l, l == a) + sign01(z) * sign01(a) * self.delta_at(l) / 2.0
    }

    /// `P(A=a | Z=1, L=l) − P(A=a | Z=0, L=l)`.
    pub fn delta(&self, a: f64, l: f64) -> f64 {
        sign01(a) * self.delta_at(l)
    }

    /// `E(L_t | A_{t−1}=a)`; `None` gives the initial mean 1/2.
    pub fn covariate_mean(&self, a_prev: Option<f64>) -> f64 {
        match a_prev {
            None => 0.5,
            Some(a) => (1.0 - self.q) * concord(self.p_l, a == 1.0) + self.q / 2.0,
        }
    }

    /// `E(U_t | A_{t−1}=a)`; `None` gives the initial mean 1/2.
    pub fn latent_mean(&self, a_prev: Option<f64>) -> f64 {
        match a_prev {
            None => 0.5,
            Some(a) => self.q * concord(self.p_u, a == 1.0) + (1.0 - self.q) / 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let vals = [self.q, self.p_l, self.p_u, self.delta0, self.delta1, self.beta];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidParams("non-finite markov parameter".into()));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(SimError::InvalidParams(format!("q = {} outside (0,1)", self.q)));
        }
        for (name, p) in [("p_l", self.p_l), ("p_u", self.p_u)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidParams(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.delta0 == 0.0 || self.delta1 == 0.0 {
            return Err(SimError::InvalidParams("instrument is irrelevant: delta0 and delta1 must be nonzero".into()));
        }
        if self.periods == 0 {
            return Err(SimError::InvalidParams("periods must be at least 1".into()));
        }
        for l in [0.0, 1.0] {
            for u in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    for a in [0.0, 1.0] {
                        let p = self.treatment_prob(a, l, u, z);
                        if !(p > 0.0 && p < 1.0) {
                            return Err(SimError::InvalidParams(format!(
                                "P(A={a}|L={l},U={u},Z={z}) = {p} outside (0,1)"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn truth(&self) -> Truth {
        let mut params = BTreeMap::new();
        for (k, v) in [("q", self.q), ("p_l", self.p_l), ("p_u", self.p_u), ("delta0", self.delta0), ("delta1", self.delta1)] {
            params.insert(k.to_string(), format!("{v}"));
        }
        params.insert("periods".into(), self.periods.to_string());
        Truth { dgp: DgpKind::Markov, beta: vec![self.beta], params }
    }
}

pub fn simulate_markov(params: &MarkovDgpParams, n: usize, seed: u64) -> Result<SimOutput, SimError> {
    simulate_markov_with(params, n, seed, &Intervention::Observational)
}

pub fn simulate_markov_with(
    params: &MarkovDgpParams,
    n: usize,
    seed: u64,
    intervention: &Intervention,
) -> Result<SimOutput, SimError> {
    params.validate()?;
    if n == 0 {
        return Err(SimError::InvalidParams("n must be at least 1".into()));
    }
    let periods = params.periods;
    intervention.check(n, periods)?;
    let cells = n * periods;
    let mut a = Vec::with_capacity(cells);
    let mut z = Vec::with_capacity(cells);
    let mut l = Vec::with_capacity(cells);
    let mut u = Vec::with_capacity(cells);
    let mut y = Vec::with_capacity(n);
    const STATES: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
    for i in 0..n {
        let mut rng = substream(seed, i as u64);
        let mut lt = bernoulli(&mut rng, 0.5);
        let mut ut = bernoulli(&mut rng, 0.5);
        let mut zt = bernoulli(&mut rng, 0.5);
        let mut a_prev: Option<f64> = None;
        let mut eta = 0.0;
        let mut cum = 0.0;
        for t in 0..periods {
            let p1 = params.treatment_prob(1.0, lt, ut, zt);
            let draw = bernoulli(&mut rng, p1);
            let at = intervention.forced(i, t).unwrap_or(draw);
            eta += (lt - params.covariate_mean(a_prev)) + (ut - params.latent_mean(a_prev));
            cum += at;
            a.push(at);
            z.push(zt);
            l.push(lt);
            u.push(ut);
            a_prev = Some(at);
            if t + 1 < periods {
                let r: f64 = rng.gen();
                let mut acc = 0.0;
                let mut next = STATES[3];
                for &(ls, us) in &STATES {
                    acc += params.base_prob(at, ls, us) / 2.0;
                    if r < acc {
                        next = (ls, us);
                        break;
                    }
                }
                lt = next.0;
                ut = next.1;
                zt = bernoulli(&mut rng, 0.5);
            }
        }
        y.push(eta + params.beta * cum + normal(&mut rng));
    }
    Ok(SimOutput {
        panel: LongitudinalPanel {
            n,
            periods,
            k: 1,
            ku: 1,
            subject_ids: (1..=n as u64).collect(),
            a,
            z,
            l,
            u: Some(u),
            outcome: Outcome::Terminal(y),
            binary: true,
        },
        truth: params.truth(),
    })
}

/// Area of the region `{0 < l < 1, l < u < min(1, l/(1−l))}` on which the
/// continuous treatment density is valid: `ln 2 − 1/2`.
pub fn continuous_region_area() -> f64 {
    std::f64::consts::LN_2 - 0.5
}

/// Mean of `L` under the uniform law on the valid region.
pub fn continuous_mean_l() -> f64 {
    let ln4096 = 12.0 * std::f64::consts::LN_2;
    (7.0 - ln4096) / (6.0 * (1.0 - 2.0 * std::f64::consts::LN_2))
}

/// Mean of `U` under the uniform law on the valid region.
pub fn continuous_mean_u() -> f64 {
    let ln64 = 6.0 * std::f64::consts::LN_2;
    (ln64 - 5.0) / (3.0 * (1.0 - 2.0 * std::f64::consts::LN_2))
}

pub fn continuous_region_contains(l: f64, u: f64) -> bool {
    l > 0.0 && l < 1.0 && u > l && u < 1.0f64.min(l / (1.0 - l))
}

/// `Δ(a | l) = φ(a) − φ(a/l)/l`.
pub fn continuous_delta(a: f64, l: f64) -> f64 {
    normal_pdf(a) - normal_pdf(a / l) / l
}

/// Treatment density `φ(a/u)/u + z Δ(a | l)`.
pub fn continuous_density(a: f64, l: f64, u: f64, z: f64) -> f64 {
    normal_pdf(a / u) / u + z * continuous_delta(a, l)
}

pub const CONTINUOUS_ATTEMPT_BUDGET: u64 = 1_000_000;

/// Draws from the `z = 1` density by rejection from the equal mixture of
/// `N(0, u²)` and `N(0, 1)`, whose density bounds the target by a factor 2.
pub fn sample_continuous_treatment(rng: &mut ChaCha8Rng, l: f64, u: f64, budget: u64) -> Result<f64, SimError> {
    for _ in 0..budget {
        let e = normal(rng);
        let a = if rng.gen::<bool>() { u * e } else { e };
        let envelope = normal_pdf(a / u) / u + normal_pdf(a);
        let target = continuous_density(a, l, u, 1.0);
        if rng.gen::<f64>() * envelope < target {
            return Ok(a);
        }
    }
    Err(SimError::RejectionFailure { attempts: budget })
}

pub fn continuous_truth(beta: f64) -> Truth {
    let mut params = BTreeMap::new();
    params.insert("region".into(), "valid".into());
    params.insert("mean_l".into(), format!("{}", continuous_mean_l()));
    params.insert("mean_u".into(), format!("{}", continuous_mean_u()));
    Truth { dgp: DgpKind::Continuous, beta: vec![beta], params }
}

pub fn simulate_continuous(n: usize, seed: u64, beta: f64) -> Result<SimOutput, SimError> {
    simulate_continuous_with(n, seed, beta, &Intervention::Observational)
}

/// Single-period continuous treatment. `(L, U)` is uniform on the region
/// where the `z = 1` density is nonnegative.
pub fn simulate_continuous_with(
    n: usize,
    seed: u64,
    beta: f64,
    intervention: &Intervention,
) -> Result<SimOutput, SimError> {
    if n == 0 {
        return Err(SimError::InvalidParams("n must be at least 1".into()));
    }
    if !beta.is_finite() {
        return Err(SimError::InvalidParams("beta must be finite".into()));
    }
    intervention.check(n, 1)?;
    let (ml, mu) = (continuous_mean_l(), continuous_mean_u());
    let mut a = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, i as u64);
        let (li, ui) = loop {
            let li: f64 = rng.gen();
            let ui: f64 = rng.gen();
            if continuous_region_contains(li, ui) {
                break (li, ui);
            }
        };
        let zi = bernoulli(&mut rng, 0.5);
        let ai = match intervention.forced(i, 0) {
            Some(v) => v,
            None if zi == 1.0 => sample_continuous_treatment(&mut rng, li, ui, CONTINUOUS_ATTEMPT_BUDGET)?,
            None => ui * normal(&mut rng),
        };
        let yi = (li - ml) + (ui - mu) + beta * ai + normal(&mut rng);
        a.push(ai);
        z.push(zi);
        l.push(li);
        u.push(ui);
        y.push(yi);
    }
    Ok(SimOutput {
        panel: LongitudinalPanel {
            n,
            periods: 1,
            k: 1,
            ku: 1,
            subject_ids: (1..=n as u64).collect(),
            a,
            z,
            l,
            u: Some(u),
            outcome: Outcome::Terminal(y),
            binary: false,
        },
        truth: continuous_truth(beta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::validate;

    #[test]
    fn linear_shape_and_domain() {
        let out = simulate_linear(&LinearDgpParams::default(), 4, 1).unwrap();
        let p = &out.panel;
        assert_eq!((p.n, p.periods), (4, 2));
        assert!(validate(p).is_ok());
        assert!(p.a.iter().all(|&a| a == 0.0 || a == 1.0));
        assert!(p.z.iter().all(|&z| z == 0.0 || z == 1.0));
    }

    #[test]
    fn simulation_is_deterministic() {
        let a = simulate_linear(&LinearDgpParams::default(), 50, 9).unwrap();
        let b = simulate_linear(&LinearDgpParams::default(), 50, 9).unwrap();
        assert_eq!(a.panel, b.panel);
        let m = MarkovDgpParams::default();
        assert_eq!(simulate_markov(&m, 30, 3).unwrap().panel, simulate_markov(&m, 30, 3).unwrap().panel);
        assert_eq!(simulate_continuous(30, 3, 2.0).unwrap().panel, simulate_continuous(30, 3, 2.0).unwrap().panel);
    }

    #[test]
    fn markov_rejects_irrelevant_instrument() {
        let p = MarkovDgpParams { delta0: 0.0, delta1: 0.0, ..Default::default() };
        assert!(matches!(simulate_markov(&p, 10, 1), Err(SimError::InvalidParams(_))));
        let big = MarkovDgpParams { delta0: 0.9, ..Default::default() };
        assert!(matches!(big.validate(), Err(SimError::InvalidParams(_))));
    }

    #[test]
    fn markov_kernel_rows_sum_to_one() {
        let p = MarkovDgpParams::default();
        for l in [0.0, 1.0] {
            for u in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    let s = p.treatment_prob(0.0, l, u, z) + p.treatment_prob(1.0, l, u, z);
                    assert!((s - 1.0).abs() < 1e-15);
                }
            }
        }
        for a in [0.0, 1.0] {
            let s: f64 = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
                .iter()
                .map(|&(l, u)| p.base_prob(a, l, u) / 2.0)
                .sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn continuous_density_example() {
        let v = continuous_density(0.0, 0.5, 0.6, 1.0);
        let expected = normal_pdf(0.0) / 0.6 + normal_pdf(0.0) - normal_pdf(0.0) / 0.5;
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.2660).abs() < 1e-4);
    }

    #[test]
    fn region_constants_match_quadrature() {
        // Midpoint rule over l, exact inner integral over u.
        let m = 200_000;
        let (mut area, mut sl, mut su) = (0.0, 0.0, 0.0);
        for j in 0..m {
            let l = (j as f64 + 0.5) / m as f64;
            let hi = 1.0f64.min(l / (1.0 - l));
            let w = (hi - l).max(0.0);
            area += w;
            sl += l * w;
            su += (hi * hi - l * l).max(0.0) / 2.0;
        }
        area /= m as f64;
        sl /= m as f64;
        su /= m as f64;
        assert!((area - continuous_region_area()).abs() < 1e-9);
        assert!((sl / area - continuous_mean_l()).abs() < 1e-8);
        assert!((su / area - continuous_mean_u()).abs() < 1e-8);
    }

    #[test]
    fn rejection_budget_is_reported() {
        let mut rng = substream(1, 0);
        assert!(matches!(
            sample_continuous_treatment(&mut rng, 0.5, 0.6, 0),
            Err(SimError::RejectionFailure { attempts: 0 })
        ));
    }

    #[test]
    fn counterfactual_means() {
        let t = Truth { dgp: DgpKind::Linear, beta: vec![1.0, 2.0], params: BTreeMap::new() };
        assert_eq!(counterfactual_mean(&t, &[1.0, 1.0]), 5.0);
        let t0 = Truth { beta: vec![0.0, 0.0], ..t };
        assert_eq!(counterfactual_mean(&t0, &[1.0, 0.0, 1.0]), 0.0);
    }

    #[test]
    fn substreams_differ() {
        let a: u64 = substream(5, 0).gen();
        let b: u64 = substream(5, 1).gen();
        let c: u64 = substream(6, 0).gen();
        assert!(a != b && a != c);
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
    }
}
