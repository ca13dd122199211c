//! Weight families: unit, SRA, stabilized SRA, oracle, IV and stabilized IV.
//!
//! Factors `w_t` are stored per subject and period. Cumulative products
//! are kept as a log-magnitude and a sign so that long panels neither
//! underflow nor overflow.

use std::io::Write;

use thiserror::Error;

use crate::panel::{fmt_f64, LongitudinalPanel};

pub const POSITIVITY_EPS: f64 = 1e-10;
pub const ZERO_DELTA_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("positivity violation: probability {value} at subject index {subject}, period {t}")]
    PositivityViolation { subject: usize, t: usize, value: f64 },
    #[error("compliance difference {value:e} is numerically zero at subject index {subject}, period {t}")]
    ZeroDelta { subject: usize, t: usize, value: f64 },
    #[error("instrument density {value} outside (0,1) at subject index {subject}, period {t}")]
    InvalidFz { subject: usize, t: usize, value: f64 },
    #[error("stabilizing factor is zero at period {t}")]
    ZeroGamma { t: usize },
    #[error("weight csv: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightKind {
    Unit,
    Sra,
    SraStabilized,
    Iv,
    IvStabilized,
    Oracle,
}

impl WeightKind {
    pub fn name(&self) -> &'static str {
        match self {
            WeightKind::Unit => "unit",
            WeightKind::Sra => "sra",
            WeightKind::SraStabilized => "sra_stabilized",
            WeightKind::Iv => "iv",
            WeightKind::IvStabilized => "iv_stabilized",
            WeightKind::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightSet {
    pub kind: WeightKind,
    pub n: usize,
    pub periods: usize,
    /// Factors `w_t`, subject-major.
    pub w: Vec<f64>,
    product_cum: Vec<f64>,
    negative_cum: Vec<bool>,
}

/// Direct products are used while they stay well inside the normal range.
const PRODUCT_RANGE: f64 = 1e280;

impl WeightSet {
    fn from_factors(kind: WeightKind, n: usize, periods: usize, w: Vec<f64>) -> WeightSet {
        let mut product_cum = Vec::with_capacity(w.len());
        let mut negative_cum = Vec::with_capacity(w.len());
        for i in 0..n {
            let mut prod = 1.0;
            let mut neg = false;
            for t in 0..periods {
                let f = w[i * periods + t];
                prod *= f;
                neg ^= f < 0.0;
                product_cum.push(prod);
                negative_cum.push(neg);
            }
        }
        WeightSet { kind, n, periods, w, product_cum, negative_cum }
    }

    /// `log |W̄_t|` summed factor by factor.
    fn log_abs_cum(&self, k: usize) -> f64 {
        let start = k - k % self.periods;
        self.w[start..=k].iter().map(|f| f.abs().ln()).sum()
    }

    pub fn factor(&self, i: usize, t: usize) -> f64 {
        self.w[i * self.periods + t]
    }

    fn signed(&self, k: usize, magnitude: f64) -> f64 {
        if self.negative_cum[k] {
            -magnitude
        } else {
            magnitude
        }
    }

    fn in_range(&self, k: usize) -> bool {
        let m = self.product_cum[k].abs();
        m < PRODUCT_RANGE && m > 1.0 / PRODUCT_RANGE
    }

    /// `W̄_t = Π_{τ≤t} w_τ`.
    pub fn wbar_t(&self, i: usize, t: usize) -> f64 {
        let k = i * self.periods + t;
        if self.in_range(k) {
            self.product_cum[k]
        } else {
            self.signed(k, self.log_abs_cum(k).exp())
        }
    }

    /// `1/W̄_t`.
    pub fn inverse_wbar_t(&self, i: usize, t: usize) -> f64 {
        let k = i * self.periods + t;
        if self.in_range(k) {
            1.0 / self.product_cum[k]
        } else {
            self.signed(k, (-self.log_abs_cum(k)).exp())
        }
    }

    pub fn wbar(&self, i: usize) -> f64 {
        self.wbar_t(i, self.periods - 1)
    }

    pub fn inverse_wbar(&self, i: usize) -> f64 {
        self.inverse_wbar_t(i, self.periods - 1)
    }

    pub fn log_abs_wbar(&self, i: usize) -> f64 {
        self.log_abs_cum(i * self.periods + self.periods - 1)
    }

    /// Sample mean of `1/W̄²`.
    pub fn second_moment(&self) -> f64 {
        (0..self.n).map(|i| self.inverse_wbar(i).powi(2)).sum::<f64>() / self.n as f64
    }

    /// Writes `subject,t,w,wbar`.
    pub fn write_csv<W: Write>(&self, panel: &LongitudinalPanel, w: W) -> Result<(), WeightError> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| WeightError::Io(e.to_string());
        wr.write_record(["subject", "t", "w", "wbar"]).map_err(io)?;
        for i in 0..self.n {
            for t in 0..self.periods {
                wr.write_record([
                    panel.subject_ids[i].to_string(),
                    (t + 1).to_string(),
                    fmt_f64(self.factor(i, t)),
                    fmt_f64(self.wbar_t(i, t)),
                ])
                .map_err(io)?;
            }
        }
        wr.flush().map_err(|e| WeightError::Io(e.to_string()))?;
        Ok(())
    }
}

pub fn unit_weights(panel: &LongitudinalPanel) -> WeightSet {
    WeightSet::from_factors(WeightKind::Unit, panel.n, panel.periods, vec![1.0; panel.n * panel.periods])
}

fn check_prob(p: f64, subject: usize, t: usize) -> Result<(), WeightError> {
    if p > POSITIVITY_EPS && p < 1.0 - POSITIVITY_EPS {
        Ok(())
    } else {
        Err(WeightError::PositivityViolation { subject, t, value: p })
    }
}

fn at_observed(p1: f64, a: f64) -> f64 {
    if a == 1.0 {
        p1
    } else {
        1.0 - p1
    }
}

/// `w_t = f(A_t | history)` from `propensity(i, t) = P(A_t = 1 | history)`.
pub fn sra_weights<P>(panel: &LongitudinalPanel, propensity: P) -> Result<WeightSet, WeightError>
where
    P: Fn(usize, usize) -> f64,
{
    let mut w = Vec::with_capacity(panel.n * panel.periods);
    for i in 0..panel.n {
        for t in 0..panel.periods {
            let p = propensity(i, t);
            check_prob(p, i, t)?;
            w.push(at_observed(p, panel.treatment(i, t)));
        }
    }
    Ok(WeightSet::from_factors(WeightKind::Sra, panel.n, panel.periods, w))
}

/// SRA weights built from the true propensity including latent covariates.
pub fn oracle_weights<P>(panel: &LongitudinalPanel, propensity: P) -> Result<WeightSet, WeightError>
where
    P: Fn(usize, usize) -> f64,
{
    let mut ws = sra_weights(panel, propensity)?;
    ws.kind = WeightKind::Oracle;
    Ok(ws)
}

/// `w_t = f(A_t | history) / f(A_t | treatment history)`.
pub fn sra_stabilized_weights<M, P>(panel: &LongitudinalPanel, marginal: M, propensity: P) -> Result<WeightSet, WeightError>
where
    M: Fn(usize, usize) -> f64,
    P: Fn(usize, usize) -> f64,
{
    let mut w = Vec::with_capacity(panel.n * panel.periods);
    for i in 0..panel.n {
        for t in 0..panel.periods {
            let p = propensity(i, t);
            let m = marginal(i, t);
            check_prob(p, i, t)?;
            check_prob(m, i, t)?;
            let a = panel.treatment(i, t);
            w.push(at_observed(p, a) / at_observed(m, a));
        }
    }
    Ok(WeightSet::from_factors(WeightKind::SraStabilized, panel.n, panel.periods, w))
}

/// `w_t = (−1)^{1−Z_t} f_{Z_t}(Z_t | history) Δ_t(A_t, history)`.
///
/// `fz(i, t)` is the density of the observed instrument value and
/// `delta(i, t, a)` the compliance difference at treatment `a`.
pub fn iv_weights<F, D>(panel: &LongitudinalPanel, fz: F, delta: D) -> Result<WeightSet, WeightError>
where
    F: Fn(usize, usize) -> f64,
    D: Fn(usize, usize, f64) -> f64,
{
    let mut w = Vec::with_capacity(panel.n * panel.periods);
    for i in 0..panel.n {
        for t in 0..panel.periods {
            w.push(iv_factor(panel, &fz, &delta, i, t)?);
        }
    }
    Ok(WeightSet::from_factors(WeightKind::Iv, panel.n, panel.periods, w))
}

fn iv_factor<F, D>(panel: &LongitudinalPanel, fz: &F, delta: &D, i: usize, t: usize) -> Result<f64, WeightError>
where
    F: Fn(usize, usize) -> f64,
    D: Fn(usize, usize, f64) -> f64,
{
    let f = fz(i, t);
    if !(f > 0.0 && f < 1.0) {
        return Err(WeightError::InvalidFz { subject: i, t, value: f });
    }
    let d = delta(i, t, panel.treatment(i, t));
    if !(d.abs() >= ZERO_DELTA_EPS) {
        return Err(WeightError::ZeroDelta { subject: i, t, value: d });
    }
    let sign = if panel.instrument(i, t) == 1.0 { 1.0 } else { -1.0 };
    Ok(sign * f * d)
}

/// IV weights divided by `γ(t, A_{t−1})`; `A_{t−1}` is `None` in the first period.
pub fn iv_stabilized_weights<G, F, D>(panel: &LongitudinalPanel, gamma: G, fz: F, delta: D) -> Result<WeightSet, WeightError>
where
    G: Fn(usize, Option<f64>) -> f64,
    F: Fn(usize, usize) -> f64,
    D: Fn(usize, usize, f64) -> f64,
{
    for t in 0..panel.periods {
        let levels: Vec<Option<f64>> = if t == 0 { vec![None] } else { vec![Some(0.0), Some(1.0)] };
        let g: Vec<f64> = levels.iter().map(|&a| gamma(t, a)).collect();
        if g.iter().any(|v| !v.is_finite()) || g.iter().all(|&v| v == 0.0) {
            return Err(WeightError::ZeroGamma { t });
        }
    }
    let mut w = Vec::with_capacity(panel.n * panel.periods);
    for i in 0..panel.n {
        for t in 0..panel.periods {
            let prev = if t == 0 { None } else { Some(panel.treatment(i, t - 1)) };
            let g = gamma(t, prev);
            if g == 0.0 {
                return Err(WeightError::ZeroGamma { t });
            }
            w.push(iv_factor(panel, &fz, &delta, i, t)? / g);
        }
    }
    Ok(WeightSet::from_factors(WeightKind::IvStabilized, panel.n, panel.periods, w))
}

/// For binary treatment `Δ(A=0) = −Δ(A=1)`.
pub fn binary_delta_symmetry(delta_at_1: f64) -> f64 {
    -delta_at_1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Outcome;

    fn panel(a: Vec<f64>, z: Vec<f64>, periods: usize) -> LongitudinalPanel {
        let n = a.len() / periods;
        LongitudinalPanel {
            n,
            periods,
            k: 1,
            ku: 0,
            subject_ids: (1..=n as u64).collect(),
            l: vec![0.0; a.len()],
            a,
            z,
            u: None,
            outcome: Outcome::Terminal(vec![0.0; n]),
            binary: true,
        }
    }

    #[test]
    fn constant_half_propensity() {
        let p = panel(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0.0; 6], 3);
        let ws = sra_weights(&p, |_, _| 0.5).unwrap();
        for i in 0..2 {
            assert_eq!(ws.wbar(i), 0.125);
        }
    }

    #[test]
    fn single_period_sra_factor() {
        let p = panel(vec![1.0, 0.0], vec![0.0; 2], 1);
        let ws = sra_weights(&p, |_, _| 0.7).unwrap();
        assert!((ws.factor(0, 0) - 0.7).abs() < 1e-15);
        assert!((ws.factor(1, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn positivity_violation() {
        let p = panel(vec![1.0], vec![0.0], 1);
        assert!(matches!(sra_weights(&p, |_, _| 1.0), Err(WeightError::PositivityViolation { .. })));
        assert!(matches!(sra_weights(&p, |_, _| 1e-12), Err(WeightError::PositivityViolation { .. })));
    }

    #[test]
    fn stabilized_without_confounding_is_one() {
        let p = panel(vec![1.0, 0.0, 1.0, 1.0], vec![0.0; 4], 2);
        let ws = sra_stabilized_weights(&p, |i, t| 0.3 + 0.1 * (i + t) as f64, |i, t| 0.3 + 0.1 * (i + t) as f64).unwrap();
        for i in 0..2 {
            assert_eq!(ws.wbar(i), 1.0);
        }
    }

    #[test]
    fn iv_factor_examples() {
        let p = panel(vec![1.0, 1.0], vec![1.0, 0.0], 1);
        let ws = iv_weights(&p, |_, _| 0.5, |_, _, _| 0.3).unwrap();
        assert!((ws.factor(0, 0) - 0.15).abs() < 1e-15);
        assert!((ws.inverse_wbar(0) - 6.666_666_666_666_667).abs() < 1e-12);
        assert!((ws.factor(1, 0) + 0.15).abs() < 1e-15);
        assert!(ws.wbar(1) < 0.0);
    }

    #[test]
    fn iv_errors() {
        let p = panel(vec![1.0], vec![1.0], 1);
        assert!(matches!(iv_weights(&p, |_, _| 0.5, |_, _, _| 1e-11), Err(WeightError::ZeroDelta { .. })));
        assert!(matches!(iv_weights(&p, |_, _| 1.0, |_, _, _| 0.3), Err(WeightError::InvalidFz { .. })));
        assert!(matches!(
            iv_stabilized_weights(&p, |_, _| 0.0, |_, _| 0.5, |_, _, _| 0.3),
            Err(WeightError::ZeroGamma { .. })
        ));
    }

    #[test]
    fn stabilized_iv_with_equal_delta_has_constant_magnitude() {
        let p = panel(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 3);
        let delta = 0.25;
        let ws = iv_stabilized_weights(&p, |_, _| delta, |_, _| 0.5, |_, _, a| if a == 1.0 { delta } else { -delta }).unwrap();
        for i in 0..2 {
            for t in 0..3 {
                assert!((ws.factor(i, t).abs() - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn delta_symmetry() {
        assert_eq!(binary_delta_symmetry(0.3), -0.3);
        assert_eq!(binary_delta_symmetry(0.0), 0.0);
    }

    #[test]
    fn csv_export() {
        let p = panel(vec![1.0, 0.0], vec![1.0, 1.0], 2);
        let ws = iv_weights(&p, |_, _| 0.5, |_, _, a| if a == 1.0 { 0.4 } else { -0.4 }).unwrap();
        let mut out = Vec::new();
        ws.write_csv(&p, &mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "subject,t,w,wbar");
        assert_eq!(lines[1], "1,1,0.2,0.2");
        let last: Vec<f64> = lines[2].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(&last[..3], &[1.0, 2.0, -0.2]);
        assert!((last[3] + 0.04).abs() < 1e-15);
    }
}
