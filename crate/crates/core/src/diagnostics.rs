//! Checks of the identification conditions on fully specified discrete
//! models and Monte Carlo verification of the IV-weighted identity
//! `E(g(Y, Ā)/W̄) = ∫ E g(Y_ā, ā) dμ(ā)`, where `μ` is counting measure
//! for binary treatment and Lebesgue measure for continuous treatment.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::inference::DgpSpec;
use crate::markov_analysis::McEstimate;
use crate::numerics::{normal_cdf, normal_pdf};
use crate::panel::{fmt_f64, LongitudinalPanel};
use crate::simulate::{
    continuous_delta, counterfactual_mean, derive_seed, simulate_continuous_with, simulate_linear_with,
    simulate_markov_with, substream, Intervention, LinearDgpParams, MarkovDgpParams, SimError, SimOutput, Truth,
};
use crate::weights::{iv_weights, WeightError};

pub const TABLE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("unnormalized table: row {row} sums to {sum}")]
    UnnormalizedTable { row: usize, sum: f64 },
    #[error("malformed table: {0}")]
    MalformedTable(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Weights(#[from] WeightError),
}

/// One row of a discrete treatment model: `P(A_t = a | cell, U = u, Z = z)`
/// for every treatment level `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub t: usize,
    /// Index of the observed-history cell (covariates and past treatment).
    pub cell: usize,
    pub u: usize,
    pub z: u8,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentTable {
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IctReport {
    pub pass: bool,
    /// Largest `|Δ(u) − Δ(u′)|` over cells, treatment levels and latent pairs.
    pub max_deviation: f64,
    /// `(t, cell, a)` attaining the largest deviation.
    pub worst: Option<(usize, usize, usize)>,
    pub max_abs_delta: f64,
    /// `Δ ≡ 0`: the instrument does not move treatment.
    pub iv_irrelevant: bool,
}

impl fmt::Display for IctReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "independent compliance type: {}", if self.pass { "PASS" } else { "FAIL" })?;
        writeln!(f, "max deviation of delta across latent levels: {:e}", self.max_deviation)?;
        if let (false, Some((t, c, a))) = (self.pass, self.worst) {
            writeln!(f, "worst cell: t={} cell={} a={}", t + 1, c, a)?;
        }
        if self.iv_irrelevant {
            writeln!(f, "warning: delta is identically zero (instrument irrelevant)")?;
        }
        Ok(())
    }
}

impl IctReport {
    pub fn csv_row(&self) -> String {
        format!(
            "ict,{},{},{},{}",
            if self.pass { "pass" } else { "fail" },
            fmt_f64(self.max_deviation),
            fmt_f64(self.max_abs_delta),
            self.iv_irrelevant
        )
    }
}

fn check_normalized(rows: &[TableRow]) -> Result<(), DiagnosticsError> {
    let k = rows.first().map_or(0, |r| r.probs.len());
    for (i, r) in rows.iter().enumerate() {
        if r.probs.len() != k || k == 0 {
            return Err(DiagnosticsError::MalformedTable(format!("row {i} has {} levels, expected {k}", r.probs.len())));
        }
        if r.z > 1 {
            return Err(DiagnosticsError::MalformedTable(format!("row {i}: instrument level {} not binary", r.z)));
        }
        let s: f64 = r.probs.iter().sum();
        if r.probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > TABLE_TOLERANCE {
            return Err(DiagnosticsError::UnnormalizedTable { row: i, sum: s });
        }
    }
    Ok(())
}

/// Checks that `Δ_t(a) = P(a | Z=1, ·) − P(a | Z=0, ·)` does not vary
/// with the latent level within any observed cell.
pub fn check_ict(model: &TreatmentTable) -> Result<IctReport, DiagnosticsError> {
    if model.rows.is_empty() {
        return Err(DiagnosticsError::MalformedTable("empty table".into()));
    }
    check_normalized(&model.rows)?;
    let mut by_key: BTreeMap<(usize, usize, usize), [Option<&Vec<f64>>; 2]> = BTreeMap::new();
    for r in &model.rows {
        let slot = &mut by_key.entry((r.t, r.cell, r.u)).or_insert([None, None])[r.z as usize];
        if slot.is_some() {
            return Err(DiagnosticsError::MalformedTable(format!(
                "duplicate row t={} cell={} u={} z={}",
                r.t + 1,
                r.cell,
                r.u,
                r.z
            )));
        }
        *slot = Some(&r.probs);
    }
    let mut deltas: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for ((t, cell, u), pair) in &by_key {
        match pair {
            [Some(p0), Some(p1)] => {
                deltas.entry((*t, *cell)).or_default().push(p1.iter().zip(p0.iter()).map(|(a, b)| a - b).collect());
            }
            _ => {
                return Err(DiagnosticsError::MalformedTable(format!(
                    "t={} cell={} u={} lacks one instrument level",
                    t + 1,
                    cell,
                    u
                )))
            }
        }
    }
    let mut max_dev: f64 = 0.0;
    let mut worst = None;
    let mut max_abs: f64 = 0.0;
    for ((t, cell), ds) in &deltas {
        for a in 0..ds[0].len() {
            let (lo, hi) = ds.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d[a]), hi.max(d[a])));
            max_abs = ds.iter().fold(max_abs, |m, d| m.max(d[a].abs()));
            if hi - lo > max_dev {
                max_dev = hi - lo;
                worst = Some((*t, *cell, a));
            }
        }
    }
    Ok(IctReport {
        pass: max_dev <= TABLE_TOLERANCE,
        max_deviation: max_dev,
        worst,
        max_abs_delta: max_abs,
        iv_irrelevant: max_abs <= TABLE_TOLERANCE,
    })
}

/// Single-period table of the Markov treatment kernel with cells `L ∈ {0, 1}`.
pub fn markov_treatment_table(params: &MarkovDgpParams) -> TreatmentTable {
    let mut rows = Vec::new();
    for l in 0..2 {
        for u in 0..2 {
            for z in 0..2u8 {
                let probs = [0.0, 1.0].map(|a| params.treatment_prob(a, l as f64, u as f64, f64::from(z))).to_vec();
                rows.push(TableRow { t: 0, cell: l, u, z, probs });
            }
        }
    }
    TreatmentTable { rows }
}

/// The linear process's treatment model evaluated on covariate and latent grids.
pub fn linear_treatment_table(params: &LinearDgpParams, l_grid: &[f64], u_grid: &[f64]) -> TreatmentTable {
    let mut rows = Vec::new();
    for (ci, &l) in l_grid.iter().enumerate() {
        for (ui, &u) in u_grid.iter().enumerate() {
            for z in 0..2u8 {
                let p1 = params.propensity(l, u, f64::from(z));
                rows.push(TableRow { t: 0, cell: ci, u: ui, z, probs: vec![1.0 - p1, p1] });
            }
        }
    }
    TreatmentTable { rows }
}

/// Reads `t,cell,u,z,p0,p1,...` rows (periods 1-based).
pub fn read_treatment_table<R: Read>(r: R) -> Result<TreatmentTable, DiagnosticsError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| DiagnosticsError::MalformedTable(e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 5 || names[..4] != ["t", "cell", "u", "z"] {
        return Err(DiagnosticsError::MalformedTable("expected header t,cell,u,z,p0,p1,...".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| DiagnosticsError::MalformedTable(e.to_string()))?;
        let bad = |what: &str| DiagnosticsError::MalformedTable(format!("row {}: bad {what}", i + 1));
        let t: usize = rec[0].trim().parse().map_err(|_| bad("t"))?;
        if t == 0 {
            return Err(bad("t (periods start at 1)"));
        }
        let cell: usize = rec[1].trim().parse().map_err(|_| bad("cell"))?;
        let u: usize = rec[2].trim().parse().map_err(|_| bad("u"))?;
        let z: u8 = rec[3].trim().parse().map_err(|_| bad("z"))?;
        let probs = rec.iter().skip(4).map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("probability"))?;
        rows.push(TableRow { t: t - 1, cell, u, z, probs });
    }
    Ok(TreatmentTable { rows })
}

/// Single-period binary model: weights `ω(a, z, l)` and
/// `P(A = 1 | Z = z, L = l, U = u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointExposureModel {
    /// `omega[l][a][z]`.
    pub omega: Vec<[[f64; 2]; 2]>,
    /// `p_a1[l][u][z]`.
    pub p_a1: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointExposureCell {
    pub l: usize,
    /// `c_a` when condition (i) holds.
    pub c: [f64; 2],
    /// Spread over `u` of the two linear combinations.
    pub spread: f64,
    pub linear_combination_constant: bool,
    pub ratio_condition: bool,
    pub consistency_condition: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointExposureReport {
    pub pass: bool,
    pub cells: Vec<PointExposureCell>,
    /// Name of the first failing condition.
    pub failed_condition: Option<String>,
}

impl fmt::Display for PointExposureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "point-exposure converse: {}", if self.pass { "PASS" } else { "FAIL" })?;
        for c in &self.cells {
            writeln!(
                f,
                "l={}: (i) {} spread={:e} c0={} c1={}; ratio {}; consistency {}{}",
                c.l,
                ok(c.linear_combination_constant),
                c.spread,
                fmt_f64(c.c[0]),
                fmt_f64(c.c[1]),
                ok(c.ratio_condition),
                ok(c.consistency_condition),
                if c.degenerate { " (treatment free of u)" } else { "" }
            )?;
        }
        if let Some(name) = &self.failed_condition {
            writeln!(f, "failed condition: {name}")?;
        }
        Ok(())
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fails"
    }
}

impl PointExposureReport {
    pub fn csv_row(&self) -> String {
        format!(
            "point_exposure,{},{}",
            if self.pass { "pass" } else { "fail" },
            self.failed_condition.clone().unwrap_or_default()
        )
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TABLE_TOLERANCE * (1.0 + a.abs().max(b.abs()))
}

/// Checks the necessary conditions for weights `ω` to identify the
/// treatment mean in the point-exposure model:
/// (i) `Σ_z ω(a,z,l) P(A=a | z, l, u) = c_a` free of `u` for each `a`,
/// (ii) `ω(0,1,l)/ω(0,0,l) = ω(1,1,l)/ω(1,0,l)` and
/// `ω(1,0,l) + ω(1,1,l) − c_1 = (ω(1,0,l)/ω(0,0,l)) c_0`.
/// Condition (ii) is implied by (i) only when treatment varies with `u`.
pub fn check_point_exposure_converse(model: &PointExposureModel) -> Result<PointExposureReport, DiagnosticsError> {
    if model.omega.len() != model.p_a1.len() || model.omega.is_empty() {
        return Err(DiagnosticsError::MalformedTable("omega and treatment tables cover different l levels".into()));
    }
    let mut cells = Vec::new();
    let mut failed = None;
    for (l, (om, pa)) in model.omega.iter().zip(&model.p_a1).enumerate() {
        if pa.is_empty() {
            return Err(DiagnosticsError::MalformedTable(format!("no latent levels at l={l}")));
        }
        for (u, p) in pa.iter().enumerate() {
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DiagnosticsError::UnnormalizedTable { row: l * pa.len() + u, sum: p[0] });
            }
        }
        let combos: Vec<[f64; 2]> = pa
            .iter()
            .map(|p| {
                let c0 = om[0][0] * (1.0 - p[0]) + om[0][1] * (1.0 - p[1]);
                let c1 = om[1][0] * p[0] + om[1][1] * p[1];
                [c0, c1]
            })
            .collect();
        let spread = (0..2)
            .map(|a| {
                let (lo, hi) = combos.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c[a]), hi.max(c[a])));
                hi - lo
            })
            .fold(0.0, f64::max);
        let degenerate = pa.iter().all(|p| close(p[0], pa[0][0]) && close(p[1], pa[0][1]));
        let c = combos[0];
        let constant = spread <= TABLE_TOLERANCE;
        let ratio = close(om[0][1] * om[1][0], om[1][1] * om[0][0]);
        let consistency = om[0][0] != 0.0 && close(om[1][0] + om[1][1] - c[1], om[1][0] / om[0][0] * c[0]);
        let cell = PointExposureCell {
            l,
            c,
            spread,
            linear_combination_constant: constant,
            ratio_condition: ratio,
            consistency_condition: consistency,
            degenerate,
        };
        if failed.is_none() {
            if !constant {
                failed = Some(format!("(i) linear combinations vary with u at l={l}"));
            } else if !degenerate && !ratio {
                failed = Some(format!("(ii) ratio condition at l={l}"));
            } else if !degenerate && !consistency {
                failed = Some(format!("(ii) consistency condition at l={l}"));
            }
        }
        cells.push(cell);
    }
    Ok(PointExposureReport { pass: failed.is_none(), cells, failed_condition: failed })
}

/// `ω(a, z, l) = 1/((−1)^{1−z} f_Z(z) Δ(a, l))` with `Δ(1, l) = delta1[l]`.
pub fn iv_point_exposure_omega(delta1: &[f64], fz1: f64) -> Vec<[[f64; 2]; 2]> {
    delta1
        .iter()
        .map(|&d| {
            let mut om = [[0.0; 2]; 2];
            for a in 0..2 {
                for z in 0..2 {
                    let sz = if z == 1 { 1.0 } else { -1.0 };
                    let fz = if z == 1 { fz1 } else { 1.0 - fz1 };
                    let da = if a == 1 { d } else { -d };
                    om[a][z] = 1.0 / (sz * fz * da);
                }
            }
            om
        })
        .collect()
}

/// Reads `section,a,z,l,u,value` rows: `omega` rows give `ω(a,z,l)`
/// (u empty) and `pa` rows give `P(A=1 | z, l, u)` (a empty).
pub fn read_point_exposure<R: Read>(r: R) -> Result<PointExposureModel, DiagnosticsError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| DiagnosticsError::MalformedTable(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["section", "a", "z", "l", "u", "value"] {
        return Err(DiagnosticsError::MalformedTable("expected header section,a,z,l,u,value".into()));
    }
    let mut omega: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| DiagnosticsError::MalformedTable(e.to_string()))?;
        let bad = |what: &str| DiagnosticsError::MalformedTable(format!("row {}: bad {what}", i + 1));
        let idx = |j: usize, what: &str| rec[j].trim().parse::<usize>().map_err(|_| bad(what));
        let value: f64 = rec[5].trim().parse().map_err(|_| bad("value"))?;
        match rec[0].trim() {
            "omega" => {
                let (a, z, l) = (idx(1, "a")?, idx(2, "z")?, idx(3, "l")?);
                if a > 1 || z > 1 {
                    return Err(bad("binary level"));
                }
                omega.insert((l, a, z), value);
            }
            "pa" => {
                let (z, l, u) = (idx(2, "z")?, idx(3, "l")?, idx(4, "u")?);
                if z > 1 {
                    return Err(bad("binary level"));
                }
                pa.insert((l, u, z), value);
            }
            other => return Err(bad(&format!("section '{other}'"))),
        }
    }
    let nl = omega.keys().map(|k| k.0 + 1).max().unwrap_or(0);
    let mut om = vec![[[f64::NAN; 2]; 2]; nl];
    for ((l, a, z), v) in omega {
        om[l][a][z] = v;
    }
    if om.iter().flatten().flatten().any(|v| v.is_nan()) {
        return Err(DiagnosticsError::MalformedTable("omega table incomplete".into()));
    }
    let mut p = vec![Vec::new(); nl];
    for ((l, u, z), v) in pa {
        if l >= nl {
            return Err(DiagnosticsError::MalformedTable(format!("treatment row for l={l} without omega")));
        }
        if p[l].len() <= u {
            p[l].resize(u + 1, [f64::NAN; 2]);
        }
        p[l][u][z] = v;
    }
    if p.iter().flatten().flatten().any(|v| v.is_nan()) || p.iter().any(|v| v.is_empty()) {
        return Err(DiagnosticsError::MalformedTable("treatment table incomplete".into()));
    }
    Ok(PointExposureModel { omega: om, p_a1: p })
}

pub type OutcomeFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub g: OutcomeFn,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl TestFunction {
    pub fn new(name: &str, g: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        TestFunction { name: name.into(), g: Arc::new(g) }
    }
}

/// Continuous battery taper: `φ(a)` outside `|a| ≤ 1.5`, where the
/// compliance difference has zeros for some covariate values.
pub fn continuous_taper(a: f64) -> f64 {
    if a.abs() > 1.5 {
        normal_pdf(a)
    } else {
        0.0
    }
}

/// Five test functions for the identity. Binary: `y − m(ā)`,
/// `Σa (y − m(ā))`, `1{ā = 1}·y`, `1 + Σa`, `Π(−1)^{1−a}`. Continuous:
/// the tapered `y − βa`, `a(y − βa)`, `y`, `1` and `a`.
pub fn theorem1_battery(truth: &Truth) -> Vec<TestFunction> {
    let t1 = truth.clone();
    let t2 = truth.clone();
    match truth.dgp {
        crate::simulate::DgpKind::Continuous => {
            let beta = truth.slope();
            vec![
                TestFunction::new("taper*(y-beta*a)", move |y, a| continuous_taper(a[0]) * (y - beta * a[0])),
                TestFunction::new("taper*a*(y-beta*a)", move |y, a| continuous_taper(a[0]) * a[0] * (y - beta * a[0])),
                TestFunction::new("taper*y", |y, a| continuous_taper(a[0]) * y),
                TestFunction::new("taper", |_, a| continuous_taper(a[0])),
                TestFunction::new("taper*a", |_, a| continuous_taper(a[0]) * a[0]),
            ]
        }
        _ => vec![
            TestFunction::new("y-m", move |y, a| y - counterfactual_mean(&t1, a)),
            TestFunction::new("sum(a)*(y-m)", move |y, a| a.iter().sum::<f64>() * (y - counterfactual_mean(&t2, a))),
            TestFunction::new("1{a=1..1}*y", |y, a| if a.iter().all(|&v| v == 1.0) { y } else { 0.0 }),
            TestFunction::new("1+sum(a)", |_, a| 1.0 + a.iter().sum::<f64>()),
            TestFunction::new("prod(2a-1)", |_, a| a.iter().map(|&v| 2.0 * v - 1.0).product()),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Check {
    pub function: String,
    pub lhs: McEstimate,
    pub rhs: McEstimate,
    pub z: f64,
}

impl Theorem1Check {
    pub fn pass(&self) -> bool {
        self.z.abs() <= 3.0
    }

    pub fn csv_row(&self, dgp: &str, n: usize, seed: u64) -> String {
        format!(
            "theorem1,{dgp},{},{n},{seed},{},{},{},{},{},{}",
            self.function,
            fmt_f64(self.lhs.mean),
            fmt_f64(self.lhs.se),
            fmt_f64(self.rhs.mean),
            fmt_f64(self.rhs.se),
            fmt_f64(self.z),
            if self.pass() { "pass" } else { "fail" }
        )
    }
}

fn pooled_z(lhs: &McEstimate, rhs: &McEstimate) -> f64 {
    let se = (lhs.se * lhs.se + rhs.se * rhs.se).sqrt();
    let d = lhs.mean - rhs.mean;
    if se > 0.0 {
        d / se
    } else if d.abs() <= 1e-12 * (1.0 + rhs.mean.abs()) {
        0.0
    } else {
        f64::INFINITY * d.signum()
    }
}

fn mc(x: &[f64]) -> McEstimate {
    if x.iter().all(|v| *v == x[0]) {
        McEstimate { mean: x[0], se: 0.0 }
    } else {
        McEstimate::from_samples(x)
    }
}

fn simulate_forced(dgp: &DgpSpec, n: usize, seed: u64, iv: &Intervention) -> Result<SimOutput, SimError> {
    match dgp {
        DgpSpec::Linear(p) => simulate_linear_with(p, n, seed, iv),
        DgpSpec::Markov(p) => simulate_markov_with(p, n, seed, iv),
        DgpSpec::Continuous { beta } => simulate_continuous_with(n, seed, *beta, iv),
    }
}

/// True IV weights of `weight_dgp` evaluated on `panel`.
fn true_inverse_weights(panel: &LongitudinalPanel, weight_dgp: &DgpSpec) -> Result<Vec<f64>, DiagnosticsError> {
    let fz = |_: usize, _: usize| 0.5;
    let ws = match weight_dgp {
        DgpSpec::Linear(p) => iv_weights(panel, fz, |i, t, a| {
            let d = normal_cdf(p.alpha0 + p.alpha1 * panel.covariates(i, t)[0]);
            if a == 1.0 {
                d
            } else {
                -d
            }
        })?,
        DgpSpec::Markov(p) => iv_weights(panel, fz, |i, t, a| p.delta(a, panel.covariates(i, t)[0]))?,
        DgpSpec::Continuous { .. } => iv_weights(panel, fz, |i, t, a| continuous_delta(a, panel.covariates(i, t)[0]))?,
    };
    Ok((0..panel.n).map(|i| ws.inverse_wbar(i)).collect())
}

/// Proposal scale for the continuous right-hand side.
const CONTINUOUS_PROPOSAL_SD: f64 = 1.5;

/// Monte Carlo check of the identity for every function in `battery`,
/// sharing draws across functions. Weights use the nuisances of
/// `weight_dgp`, which is normally `dgp` itself.
pub fn verify_theorem1_battery(
    dgp: &DgpSpec,
    weight_dgp: &DgpSpec,
    battery: &[TestFunction],
    n: usize,
    seed: u64,
) -> Result<Vec<Theorem1Check>, DiagnosticsError> {
    let obs = dgp.simulate(n, derive_seed(seed, 0))?;
    let inv_w = true_inverse_weights(&obs.panel, weight_dgp)?;
    let lhs: Vec<McEstimate> = battery
        .iter()
        .map(|f| {
            let x: Vec<f64> = (0..n).map(|i| (f.g)(obs.panel.terminal_outcome(i), obs.panel.treatment_path(i)) * inv_w[i]).collect();
            mc(&x)
        })
        .collect();
    let rhs: Vec<McEstimate> = match dgp {
        DgpSpec::Continuous { .. } => {
            let mut prop = substream(derive_seed(seed, 1), 0);
            let s = CONTINUOUS_PROPOSAL_SD;
            let draws: Vec<f64> = (0..n).map(|_| s * prop.sample::<f64, _>(StandardNormal)).collect();
            let iv = Intervention::PerSubject(draws.iter().map(|&a| vec![a]).collect());
            let sim = simulate_forced(dgp, n, derive_seed(seed, 2), &iv)?;
            battery
                .iter()
                .map(|f| {
                    let x: Vec<f64> = (0..n)
                        .map(|i| {
                            let a = draws[i];
                            let q = normal_pdf(a / s) / s;
                            (f.g)(sim.panel.terminal_outcome(i), &[a]) / q
                        })
                        .collect();
                    mc(&x)
                })
                .collect()
        }
        _ => {
            let periods = obs.panel.periods;
            let mut sums = vec![McEstimate { mean: 0.0, se: 0.0 }; battery.len()];
            for code in 0..(1usize << periods) {
                let path: Vec<f64> = (0..periods).map(|t| ((code >> t) & 1) as f64).collect();
                let sim = simulate_forced(dgp, n, derive_seed(seed, 10 + code as u64), &Intervention::Path(path.clone()))?;
                for (k, f) in battery.iter().enumerate() {
                    let x: Vec<f64> = (0..n).map(|i| (f.g)(sim.panel.terminal_outcome(i), &path)).collect();
                    let e = mc(&x);
                    sums[k].mean += e.mean;
                    sums[k].se = (sums[k].se.powi(2) + e.se.powi(2)).sqrt();
                }
            }
            sums
        }
    };
    Ok(battery
        .iter()
        .zip(lhs.into_iter().zip(rhs))
        .map(|(f, (l, r))| Theorem1Check { function: f.name.clone(), z: pooled_z(&l, &r), lhs: l, rhs: r })
        .collect())
}

/// Single-function form of [`verify_theorem1_battery`] with true nuisances.
pub fn verify_theorem1_mc(dgp: &DgpSpec, g: &TestFunction, n: usize, seed: u64) -> Result<Theorem1Check, DiagnosticsError> {
    Ok(verify_theorem1_battery(dgp, dgp, std::slice::from_ref(g), n, seed)?.remove(0))
}

/// Draws a uniform random point-exposure model with `Δ` free of `u`
/// (used by property tests and examples).
pub fn random_ict_model(rng: &mut impl Rng, l_levels: usize, u_levels: usize) -> (PointExposureModel, Vec<f64>) {
    let mut delta1 = Vec::with_capacity(l_levels);
    let mut p = Vec::with_capacity(l_levels);
    for _ in 0..l_levels {
        let d: f64 = rng.gen_range(0.05..0.4);
        delta1.push(d);
        p.push(
            (0..u_levels)
                .map(|_| {
                    let base: f64 = rng.gen_range(0.05..(0.95 - d));
                    [base, base + d]
                })
                .collect(),
        );
    }
    (PointExposureModel { omega: iv_point_exposure_omega(&delta1, 0.5), p_a1: p }, delta1)
}
