//! Longitudinal panel data, structural mean model specifications and the
//! long-format CSV schema.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    /// One terminal outcome per subject.
    Terminal(Vec<f64>),
    /// Subject-major `n × T` outcomes, one per period.
    PerPeriod(Vec<f64>),
}

/// Rectangular panel of `n` subjects observed over `periods` periods.
///
/// Per-period arrays are subject-major: entry `(i, t)` lives at
/// `i * periods + t`, with `t` zero-based. Covariate rows have width `k`,
/// latent rows width `ku`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalPanel {
    pub n: usize,
    pub periods: usize,
    pub k: usize,
    pub ku: usize,
    pub subject_ids: Vec<u64>,
    pub a: Vec<f64>,
    pub z: Vec<f64>,
    pub l: Vec<f64>,
    pub u: Option<Vec<f64>>,
    pub outcome: Outcome,
    pub binary: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PanelIssue {
    #[error("ragged subject {subject}: expected {expected} periods, found {found}")]
    RaggedSubject { subject: u64, expected: usize, found: usize },
    #[error("instrument not binary at subject {subject} period {t}: {value}")]
    InstrumentNotBinary { subject: u64, t: usize, value: f64 },
    #[error("treatment not binary at subject {subject} period {t}: {value}")]
    TreatmentNotBinary { subject: u64, t: usize, value: f64 },
    #[error("non-finite {field} at subject {subject} period {t}")]
    NonFinite { field: &'static str, subject: u64, t: usize },
    #[error("array {field} has length {found}, expected {expected}")]
    Shape { field: &'static str, expected: usize, found: usize },
    #[error("duplicate period {t} for subject {subject}")]
    DuplicatePeriod { subject: u64, t: usize },
    #[error("inconsistent terminal outcome for subject {subject}")]
    InconsistentOutcome { subject: u64 },
}

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("invalid panel: {}", join_issues(.0))]
    Invalid(Vec<PanelIssue>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
}

fn join_issues(v: &[PanelIssue]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

impl LongitudinalPanel {
    #[inline]
    pub fn idx(&self, i: usize, t: usize) -> usize {
        i * self.periods + t
    }

    #[inline]
    pub fn treatment(&self, i: usize, t: usize) -> f64 {
        self.a[i * self.periods + t]
    }

    #[inline]
    pub fn instrument(&self, i: usize, t: usize) -> f64 {
        self.z[i * self.periods + t]
    }

    #[inline]
    pub fn covariates(&self, i: usize, t: usize) -> &[f64] {
        let s = (i * self.periods + t) * self.k;
        &self.l[s..s + self.k]
    }

    #[inline]
    pub fn latent(&self, i: usize, t: usize) -> Option<&[f64]> {
        self.u.as_ref().map(|u| {
            let s = (i * self.periods + t) * self.ku;
            &u[s..s + self.ku]
        })
    }

    #[inline]
    pub fn treatment_path(&self, i: usize) -> &[f64] {
        &self.a[i * self.periods..(i + 1) * self.periods]
    }

    /// Terminal outcome; in per-period mode the last period's outcome.
    pub fn terminal_outcome(&self, i: usize) -> f64 {
        match &self.outcome {
            Outcome::Terminal(y) => y[i],
            Outcome::PerPeriod(y) => y[i * self.periods + self.periods - 1],
        }
    }

    pub fn period_outcome(&self, i: usize, t: usize) -> Option<f64> {
        match &self.outcome {
            Outcome::Terminal(_) => None,
            Outcome::PerPeriod(y) => Some(y[i * self.periods + t]),
        }
    }

    pub fn is_repeated(&self) -> bool {
        matches!(self.outcome, Outcome::PerPeriod(_))
    }

    pub fn has_latent(&self) -> bool {
        self.u.is_some()
    }

    /// Copy of the panel with latent columns removed.
    pub fn drop_latent(&self) -> LongitudinalPanel {
        LongitudinalPanel { u: None, ku: 0, ..self.clone() }
    }

    /// Panel made of the listed subjects, in order (repeats allowed).
    pub fn select(&self, subjects: &[usize]) -> LongitudinalPanel {
        let t = self.periods;
        let pick = |v: &[f64], w: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(subjects.len() * t * w);
            for &i in subjects {
                out.extend_from_slice(&v[i * t * w..(i + 1) * t * w]);
            }
            out
        };
        LongitudinalPanel {
            n: subjects.len(),
            periods: t,
            k: self.k,
            ku: self.ku,
            subject_ids: subjects.iter().map(|&i| self.subject_ids[i]).collect(),
            a: pick(&self.a, 1),
            z: pick(&self.z, 1),
            l: pick(&self.l, self.k),
            u: self.u.as_ref().map(|u| pick(u, self.ku)),
            outcome: match &self.outcome {
                Outcome::Terminal(y) => Outcome::Terminal(subjects.iter().map(|&i| y[i]).collect()),
                Outcome::PerPeriod(y) => Outcome::PerPeriod(pick(y, 1)),
            },
            binary: self.binary,
        }
    }
}

/// Checks every panel invariant, collecting all violations.
pub fn validate(panel: &LongitudinalPanel) -> Result<(), Vec<PanelIssue>> {
    let mut issues = Vec::new();
    let cells = panel.n * panel.periods;
    let mut shape = |field, expected, found| {
        if expected != found {
            issues.push(PanelIssue::Shape { field, expected, found });
        }
    };
    shape("subject_ids", panel.n, panel.subject_ids.len());
    shape("a", cells, panel.a.len());
    shape("z", cells, panel.z.len());
    shape("l", cells * panel.k, panel.l.len());
    if let Some(u) = &panel.u {
        shape("u", cells * panel.ku, u.len());
    }
    match &panel.outcome {
        Outcome::Terminal(y) => shape("y", panel.n, y.len()),
        Outcome::PerPeriod(y) => shape("y_t", cells, y.len()),
    }
    if !issues.is_empty() {
        return Err(issues);
    }
    for i in 0..panel.n {
        let id = panel.subject_ids[i];
        for t in 0..panel.periods {
            let a = panel.treatment(i, t);
            let z = panel.instrument(i, t);
            if !a.is_finite() {
                issues.push(PanelIssue::NonFinite { field: "a", subject: id, t: t + 1 });
            } else if panel.binary && a != 0.0 && a != 1.0 {
                issues.push(PanelIssue::TreatmentNotBinary { subject: id, t: t + 1, value: a });
            }
            if !z.is_finite() {
                issues.push(PanelIssue::NonFinite { field: "z", subject: id, t: t + 1 });
            } else if z != 0.0 && z != 1.0 {
                issues.push(PanelIssue::InstrumentNotBinary { subject: id, t: t + 1, value: z });
            }
            if panel.covariates(i, t).iter().any(|v| !v.is_finite()) {
                issues.push(PanelIssue::NonFinite { field: "l", subject: id, t: t + 1 });
            }
            if let Some(u) = panel.latent(i, t) {
                if u.iter().any(|v| !v.is_finite()) {
                    issues.push(PanelIssue::NonFinite { field: "u", subject: id, t: t + 1 });
                }
            }
            if let Some(y) = panel.period_outcome(i, t) {
                if !y.is_finite() {
                    issues.push(PanelIssue::NonFinite { field: "y_t", subject: id, t: t + 1 });
                }
            }
        }
        if let Outcome::Terminal(y) = &panel.outcome {
            if !y[i].is_finite() {
                issues.push(PanelIssue::NonFinite { field: "y", subject: id, t: panel.periods });
            }
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

pub fn cumulative_treatment(panel: &LongitudinalPanel) -> Vec<f64> {
    (0..panel.n).map(|i| panel.treatment_path(i).iter().sum()).collect()
}

pub type PathFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum MeanModel {
    /// `β0 + β1 Σ a_t`.
    LinearCumulative,
    /// `βᵀ g(ā)` for a supplied basis `g` of dimension `dim`.
    LinearGeneral { name: String, dim: usize, basis: PathFn },
}

#[derive(Clone)]
pub enum IndexFunction {
    /// The gradient of the mean model, i.e. its basis.
    Gradient,
    Custom { name: String, map: PathFn },
}

/// Mean model together with the index function `h` of the estimating
/// equation `Pₙ h(Ā)(Y − m_β(Ā))/W̄ = 0`.
#[derive(Clone)]
pub struct MsmmSpec {
    pub mean: MeanModel,
    pub index: IndexFunction,
}

impl fmt::Debug for MsmmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mean = match &self.mean {
            MeanModel::LinearCumulative => "linear_cumulative".to_string(),
            MeanModel::LinearGeneral { name, .. } => name.clone(),
        };
        let index = match &self.index {
            IndexFunction::Gradient => "gradient".to_string(),
            IndexFunction::Custom { name, .. } => name.clone(),
        };
        f.debug_struct("MsmmSpec").field("mean", &mean).field("index", &index).finish()
    }
}

impl Default for MsmmSpec {
    fn default() -> Self {
        MsmmSpec::linear_cumulative()
    }
}

impl MsmmSpec {
    pub fn linear_cumulative() -> Self {
        MsmmSpec { mean: MeanModel::LinearCumulative, index: IndexFunction::Gradient }
    }

    /// `m_β(ā) = β Σ a_t` with `h(ā) = Σ a_t`.
    pub fn cumulative_slope() -> Self {
        MsmmSpec {
            mean: MeanModel::LinearGeneral {
                name: "cumulative_slope".into(),
                dim: 1,
                basis: Arc::new(|a: &[f64]| vec![a.iter().sum()]),
            },
            index: IndexFunction::Gradient,
        }
    }

    pub fn with_index(mut self, name: &str, map: PathFn) -> Self {
        self.index = IndexFunction::Custom { name: name.into(), map };
        self
    }

    pub fn dim(&self) -> usize {
        match &self.mean {
            MeanModel::LinearCumulative => 2,
            MeanModel::LinearGeneral { dim, .. } => *dim,
        }
    }

    pub fn basis(&self, path: &[f64]) -> Vec<f64> {
        match &self.mean {
            MeanModel::LinearCumulative => vec![1.0, path.iter().sum()],
            MeanModel::LinearGeneral { basis, .. } => basis(path),
        }
    }

    pub fn mean_value(&self, beta: &[f64], path: &[f64]) -> f64 {
        self.basis(path).iter().zip(beta).map(|(g, b)| g * b).sum()
    }
}

/// `h(ā)` for the given spec.
pub fn design_row(spec: &MsmmSpec, path: &[f64]) -> Vec<f64> {
    match &spec.index {
        IndexFunction::Gradient => spec.basis(path),
        IndexFunction::Custom { map, .. } => map(path),
    }
}

/// Formats a float with the shortest representation that parses back to
/// the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Writes the long-format panel CSV.
///
/// Header: `subject,t,a,z,l1..lk[,u1..uk]` then `y` (terminal outcome,
/// repeated on every row of the subject) or `y_t` (per-period outcome).
pub fn write_panel_csv<W: Write>(panel: &LongitudinalPanel, w: W) -> Result<(), PanelError> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["subject".to_string(), "t".into(), "a".into(), "z".into()];
    header.extend((1..=panel.k).map(|j| format!("l{j}")));
    if panel.u.is_some() {
        header.extend((1..=panel.ku).map(|j| format!("u{j}")));
    }
    header.push(if panel.is_repeated() { "y_t".into() } else { "y".into() });
    wr.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..panel.n {
        for t in 0..panel.periods {
            rec.clear();
            rec.push(panel.subject_ids[i].to_string());
            rec.push((t + 1).to_string());
            rec.push(fmt_f64(panel.treatment(i, t)));
            rec.push(fmt_f64(panel.instrument(i, t)));
            rec.extend(panel.covariates(i, t).iter().map(|v| fmt_f64(*v)));
            if let Some(u) = panel.latent(i, t) {
                rec.extend(u.iter().map(|v| fmt_f64(*v)));
            }
            let y = match &panel.outcome {
                Outcome::Terminal(y) => y[i],
                Outcome::PerPeriod(y) => y[panel.idx(i, t)],
            };
            rec.push(fmt_f64(y));
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(())
}

struct Columns {
    k: usize,
    ku: usize,
    repeated: bool,
}

fn parse_header(h: &csv::StringRecord) -> Result<Columns, PanelError> {
    let names: Vec<&str> = h.iter().collect();
    if names.len() < 5 || names[..4] != ["subject", "t", "a", "z"] {
        return Err(PanelError::Header("expected leading columns subject,t,a,z".into()));
    }
    let mut pos = 4;
    let mut k = 0;
    while pos < names.len() && names[pos] == format!("l{}", k + 1) {
        k += 1;
        pos += 1;
    }
    let mut ku = 0;
    while pos < names.len() && names[pos] == format!("u{}", ku + 1) {
        ku += 1;
        pos += 1;
    }
    if pos + 1 != names.len() {
        return Err(PanelError::Header(format!("unexpected columns after position {pos}: {:?}", &names[pos..])));
    }
    let repeated = match names[pos] {
        "y" => false,
        "y_t" => true,
        other => return Err(PanelError::Header(format!("expected outcome column y or y_t, found {other}"))),
    };
    Ok(Columns { k, ku, repeated })
}

struct SubjectRows {
    rows: BTreeMap<usize, Vec<f64>>,
}

/// Reads the long-format panel CSV, rejecting ragged or invalid panels.
pub fn read_panel_csv<R: Read>(r: R) -> Result<LongitudinalPanel, PanelError> {
    let mut rd = csv::Reader::from_reader(r);
    let cols = parse_header(rd.headers()?)?;
    let width = 4 + cols.k + cols.ku + 1;
    let mut order: Vec<u64> = Vec::new();
    let mut subjects: BTreeMap<u64, SubjectRows> = BTreeMap::new();
    let mut issues = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(PanelError::Parse { line, message: format!("expected {width} fields, found {}", rec.len()) });
        }
        let parse = |j: usize| -> Result<f64, PanelError> {
            rec[j].trim().parse::<f64>().map_err(|e| PanelError::Parse {
                line,
                message: format!("column {}: {e}", j + 1),
            })
        };
        let subject: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|e| PanelError::Parse { line, message: format!("subject: {e}") })?;
        let t: usize = rec[1]
            .trim()
            .parse()
            .map_err(|e| PanelError::Parse { line, message: format!("t: {e}") })?;
        let values = (2..width).map(parse).collect::<Result<Vec<_>, _>>()?;
        let entry = subjects.entry(subject).or_insert_with(|| {
            order.push(subject);
            SubjectRows { rows: BTreeMap::new() }
        });
        if entry.rows.insert(t, values).is_some() {
            issues.push(PanelIssue::DuplicatePeriod { subject, t });
        }
    }
    let periods = subjects.values().map(|s| s.rows.len()).max().unwrap_or(0);
    for (&id, s) in &subjects {
        let complete = s.rows.len() == periods && s.rows.keys().copied().eq(1..=periods);
        if !complete {
            issues.push(PanelIssue::RaggedSubject { subject: id, expected: periods, found: s.rows.len() });
        }
    }
    if !issues.is_empty() {
        return Err(PanelError::Invalid(issues));
    }
    let n = order.len();
    let mut panel = LongitudinalPanel {
        n,
        periods,
        k: cols.k,
        ku: cols.ku,
        subject_ids: order.clone(),
        a: Vec::with_capacity(n * periods),
        z: Vec::with_capacity(n * periods),
        l: Vec::with_capacity(n * periods * cols.k),
        u: if cols.ku > 0 { Some(Vec::with_capacity(n * periods * cols.ku)) } else { None },
        outcome: Outcome::Terminal(Vec::new()),
        binary: true,
    };
    let mut y_terminal = Vec::with_capacity(n);
    let mut y_period = Vec::with_capacity(n * periods);
    for id in &order {
        let s = &subjects[id];
        let mut last_y = None;
        for v in s.rows.values() {
            panel.a.push(v[0]);
            panel.z.push(v[1]);
            panel.l.extend_from_slice(&v[2..2 + cols.k]);
            if let Some(u) = panel.u.as_mut() {
                u.extend_from_slice(&v[2 + cols.k..2 + cols.k + cols.ku]);
            }
            let y = v[2 + cols.k + cols.ku];
            if cols.repeated {
                y_period.push(y);
            } else {
                if let Some(prev) = last_y {
                    if prev != y && !(f64::is_nan(prev) && f64::is_nan(y)) {
                        issues.push(PanelIssue::InconsistentOutcome { subject: *id });
                    }
                }
                last_y = Some(y);
            }
        }
        if !cols.repeated {
            y_terminal.push(last_y.unwrap_or(f64::NAN));
        }
    }
    panel.outcome = if cols.repeated { Outcome::PerPeriod(y_period) } else { Outcome::Terminal(y_terminal) };
    panel.binary = panel.a.iter().all(|&a| a == 0.0 || a == 1.0);
    if !issues.is_empty() {
        return Err(PanelError::Invalid(issues));
    }
    validate(&panel).map_err(PanelError::Invalid)?;
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_panel() -> LongitudinalPanel {
        LongitudinalPanel {
            n: 4,
            periods: 2,
            k: 1,
            ku: 0,
            subject_ids: vec![1, 2, 3, 4],
            a: vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            z: vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            l: vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6, 0.7, -0.8],
            u: None,
            outcome: Outcome::Terminal(vec![1.0, 2.5, -0.5, 3.0]),
            binary: true,
        }
    }

    #[test]
    fn well_formed_panel_validates() {
        assert!(validate(&small_panel()).is_ok());
    }

    #[test]
    fn non_binary_instrument_is_reported() {
        let mut p = small_panel();
        p.z[3] = 2.0;
        let errs = validate(&p).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().contains("instrument not binary"));
    }

    #[test]
    fn nan_is_reported() {
        let mut p = small_panel();
        p.l[2] = f64::NAN;
        p.a[0] = f64::NAN;
        assert_eq!(validate(&p).unwrap_err().len(), 2);
    }

    #[test]
    fn missing_period_is_ragged() {
        let csv = "subject,t,a,z,l1,y\n1,1,0,1,0.5,2\n1,2,1,0,0.1,2\n2,1,1,1,0.3,4\n";
        match read_panel_csv(csv.as_bytes()) {
            Err(PanelError::Invalid(issues)) => {
                assert!(issues.iter().any(|i| i.to_string().contains("ragged subject 2")));
            }
            other => panic!("expected ragged error, got {other:?}"),
        }
    }

    #[test]
    fn cumulative_treatment_sums_paths() {
        let mut p = small_panel();
        p.periods = 3;
        p.n = 3;
        p.a = vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(cumulative_treatment(&p), vec![0.0, 2.0, 3.0]);
        let ones = LongitudinalPanel { n: 1, periods: 5, a: vec![1.0; 5], ..small_panel() };
        assert_eq!(cumulative_treatment(&ones), vec![5.0]);
    }

    #[test]
    fn design_rows() {
        let spec = MsmmSpec::linear_cumulative();
        assert_eq!(design_row(&spec, &[1.0, 1.0]), vec![1.0, 2.0]);
        assert_eq!(design_row(&spec, &[0.0, 0.0]), vec![1.0, 0.0]);
        let custom = spec.with_index("per_period", Arc::new(|a: &[f64]| vec![1.0, a[0], a[1]]));
        assert_eq!(design_row(&custom, &[1.0, 0.0]), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut p = small_panel();
        p.l = vec![0.1, 1.0 / 3.0, -2.0e-300, 7.123456789012345e10, 0.5, 0.6, std::f64::consts::PI, -0.8];
        p.u = Some(vec![0.25, -1.5, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        p.ku = 1;
        let mut buf = Vec::new();
        write_panel_csv(&p, &mut buf).unwrap();
        let back = read_panel_csv(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("subject,t,a,z,l1,u1,y\n"));
    }

    #[test]
    fn drop_latent_strips_u() {
        let mut p = small_panel();
        p.u = Some(vec![0.0; 8]);
        p.ku = 1;
        let d = p.drop_latent();
        assert!(!d.has_latent());
        assert_eq!(d.ku, 0);
    }
}
