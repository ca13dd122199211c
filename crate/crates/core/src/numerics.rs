//! Small dense numerical kernel: normal distribution functions, linear
//! solves, 2×2 spectra and a damped Newton maximizer.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("singular matrix: pivot {pivot:e} below relative threshold")]
    SingularMatrix { pivot: f64 },
    #[error("complex spectrum: discriminant {discriminant:e}")]
    ComplexSpectrum { discriminant: f64 },
    #[error("newton iteration did not converge after {iterations} iterations (gradient sup-norm {gradient:e})")]
    NoConvergence { iterations: usize, gradient: f64 },
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value encountered")]
    NonFinite,
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * c).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// Adds `c * x yᵀ` in place.
    pub fn add_outer(&mut self, c: f64, x: &[f64], y: &[f64]) {
        assert_eq!((self.rows, self.cols), (x.len(), y.len()));
        for (i, xi) in x.iter().enumerate() {
            let cx = c * xi;
            let row = self.row_mut(i);
            for (r, yj) in row.iter_mut().zip(y) {
                *r += cx * yj;
            }
        }
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Maximum absolute asymmetry `|M_ij − M_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    pub fn submatrix(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), cols.len());
        for (oi, i) in rows.clone().enumerate() {
            for (oj, j) in cols.clone().enumerate() {
                out[(oi, oj)] = self[(i, j)];
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// `(Φ(x), 1 − Φ(x))`, both to full relative accuracy, from one tail evaluation.
pub fn normal_cdf_pair(x: f64) -> (f64, f64) {
    if x < 0.0 {
        let lo = normal_cdf(x);
        (lo, 1.0 - lo)
    } else {
        let hi = normal_cdf(-x);
        (1.0 - hi, hi)
    }
}

/// Inverse of the standard normal CDF.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // Acklam's rational approximation followed by Halley refinement.
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let plow = 0.02425;
    let mut x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let e = if p < 0.5 { normal_cdf(x) - p } else { (1.0 - p) - normal_cdf(-x) };
        let u = e / normal_pdf(x);
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

const PIVOT_THRESHOLD: f64 = 1e-12;

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if !a.is_square() || a.rows() != b.len() {
        return Err(NumericsError::Dimension(format!(
            "{}x{} system with rhs of length {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let n = a.rows();
    let scale = a.max_abs();
    if !scale.is_finite() || b.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if scale == 0.0 {
        return Err(NumericsError::SingularMatrix { pivot: 0.0 });
    }
    let mut m = a.as_slice().to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv_row, piv_val) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_val < PIVOT_THRESHOLD * scale {
            return Err(NumericsError::SingularMatrix { pivot: piv_val });
        }
        if piv_row != col {
            for j in 0..n {
                m.swap(col * n + j, piv_row * n + j);
            }
            x.swap(col, piv_row);
        }
        let p = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[r * n + j] -= f * m[col * n + j];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for j in col + 1..n {
            s -= m[col * n + j] * x[j];
        }
        x[col] = s / m[col * n + col];
    }
    Ok(x)
}

pub fn invert(a: &Matrix) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_linear(a, &e)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

/// Infinity-norm condition number estimate `‖A‖ ‖A⁻¹‖`.
pub fn condition_number(a: &Matrix) -> Result<f64, NumericsError> {
    Ok(a.norm_inf() * invert(a)?.norm_inf())
}

/// Eigenvalues of a real 2×2 matrix with real spectrum, ordered by magnitude.
pub fn eig2x2(m: &Matrix) -> Result<(f64, f64), NumericsError> {
    if m.rows() != 2 || m.cols() != 2 {
        return Err(NumericsError::Dimension("eig2x2 needs a 2x2 matrix".into()));
    }
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let half = 0.5 * tr;
    let disc = half * half - det;
    let tol = 1e-12 * (1.0 + half * half + det.abs());
    if disc < -tol {
        return Err(NumericsError::ComplexSpectrum { discriminant: disc });
    }
    let root = disc.max(0.0).sqrt();
    // Larger-magnitude root first; the other from det/λ to avoid cancellation.
    let big = if half >= 0.0 { half + root } else { half - root };
    let small = if big != 0.0 { det / big } else { 0.0 };
    if big.abs() >= small.abs() {
        Ok((big, small))
    } else {
        Ok((small, big))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Sup-norm tolerance on the gradient.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub step_halvings: usize,
    /// Below this Newton decrement `gᵀ I⁻¹ g` the full step is taken
    /// without a line search, since objective differences are then at
    /// rounding level.
    pub decrement_tolerance: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { tolerance: 1e-9, max_iterations: 100, step_halvings: 30, decrement_tolerance: 1e-10 }
    }
}

/// Log-likelihood, gradient and information (negative Hessian) at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub information: Matrix,
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub information: Matrix,
    pub iterations: usize,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Damped Newton ascent driven by a joint evaluator.
///
/// `eval` returns `None` outside the parameter domain; such trial points
/// are treated like a decrease in the objective and halved.
pub fn newton_maximize_joint<F>(
    mut eval: F,
    init: &[f64],
    cfg: &NewtonConfig,
) -> Result<NewtonResult, NumericsError>
where
    F: FnMut(&[f64]) -> Option<Evaluation>,
{
    let mut theta = init.to_vec();
    let mut cur = eval(&theta).ok_or(NumericsError::NonFinite)?;
    if !cur.loglik.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    for iter in 0..cfg.max_iterations {
        let g = sup_norm(&cur.gradient);
        if g <= cfg.tolerance {
            return Ok(NewtonResult {
                theta,
                loglik: cur.loglik,
                gradient: cur.gradient,
                information: cur.information,
                iterations: iter,
            });
        }
        let step = solve_linear(&cur.information, &cur.gradient).map_err(|e| match e {
            NumericsError::SingularMatrix { .. } => NumericsError::SingularInformation,
            other => other,
        })?;
        let decrement: f64 = cur.gradient.iter().zip(&step).map(|(g, s)| g * s).sum();
        let local = decrement >= 0.0 && decrement <= cfg.decrement_tolerance;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.step_halvings {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + scale * s).collect();
            if let Some(ev) = eval(&trial) {
                if ev.loglik.is_finite() && (ev.loglik >= cur.loglik || local) {
                    accepted = Some((trial, ev));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((t, ev)) => {
                theta = t;
                cur = ev;
            }
            None => {
                return Err(NumericsError::NoConvergence { iterations: iter + 1, gradient: g });
            }
        }
    }
    let g = sup_norm(&cur.gradient);
    if g <= cfg.tolerance {
        return Ok(NewtonResult {
            theta,
            loglik: cur.loglik,
            gradient: cur.gradient,
            information: cur.information,
            iterations: cfg.max_iterations,
        });
    }
    Err(NumericsError::NoConvergence { iterations: cfg.max_iterations, gradient: g })
}

/// Damped Newton maximizer from separate log-likelihood, score and
/// information callbacks.
pub fn newton_maximize<L, S, I>(
    loglik: L,
    score: S,
    information: I,
    init: &[f64],
    cfg: &NewtonConfig,
) -> Result<Vec<f64>, NumericsError>
where
    L: Fn(&[f64]) -> f64,
    S: Fn(&[f64]) -> Vec<f64>,
    I: Fn(&[f64]) -> Matrix,
{
    newton_maximize_joint(
        |theta| {
            let ll = loglik(theta);
            if !ll.is_finite() {
                return None;
            }
            Some(Evaluation { loglik: ll, gradient: score(theta), information: information(theta) })
        },
        init,
        cfg,
    )
    .map(|r| r.theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_basic_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        // erf series oracle: Φ(x) = 1/2 + 1/√π Σ (−1)^n (x/√2)^{2n+1} / (n! (2n+1))
        let series = |x: f64| {
            let y = x / std::f64::consts::SQRT_2;
            let mut term = y;
            let mut sum = y;
            for n in 1..80 {
                term *= -y * y / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            0.5 + sum / std::f64::consts::PI.sqrt()
        };
        for &x in &[1.959964, -1.3, 0.25, 2.7, -3.1] {
            assert!((normal_cdf(x) - series(x)).abs() < 1e-13, "x = {x}");
        }
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-7);
        assert!(normal_cdf(-40.0) >= 0.0 && normal_cdf(40.0) <= 1.0);
    }

    #[test]
    fn pdf_values() {
        assert!((normal_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        assert!((normal_pdf(1.0) - 0.241_970_724_5).abs() < 1e-10);
        assert_eq!(normal_pdf(1.7), normal_pdf(-1.7));
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-10, 0.001, 0.02, 0.3, 0.5, 0.8, 0.975, 0.999_999] {
            let x = normal_quantile(p);
            assert!((normal_cdf(x) - p).abs() < 1e-14 + 1e-12 * p, "p = {p}");
        }
    }

    #[test]
    fn solve_examples() {
        let x = solve_linear(&Matrix::identity(2), &[3.0, 4.0]).unwrap();
        assert_eq!(x, vec![3.0, 4.0]);
        let d = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]);
        assert_eq!(solve_linear(&d, &[2.0, 8.0]).unwrap(), vec![1.0, 2.0]);
        let s = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(solve_linear(&s, &[1.0, 2.0]), Err(NumericsError::SingularMatrix { .. })));
    }

    #[test]
    fn eig_examples() {
        assert_eq!(eig2x2(&Matrix::identity(2)).unwrap(), (1.0, 1.0));
        assert_eq!(eig2x2(&Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 2.0]])).unwrap(), (3.0, 2.0));
        let (a, b) = eig2x2(&Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((a - 3.0).abs() < 1e-14 && (b - 1.0).abs() < 1e-14);
        let rot = Matrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        assert!(matches!(eig2x2(&rot), Err(NumericsError::ComplexSpectrum { .. })));
    }

    #[test]
    fn newton_quadratic_one_step() {
        let cfg = NewtonConfig::default();
        let theta = newton_maximize(
            |t| -(t[0] - 2.0).powi(2),
            |t| vec![-2.0 * (t[0] - 2.0)],
            |_| Matrix::from_rows(&[&[2.0]]),
            &[0.0],
            &cfg,
        )
        .unwrap();
        assert_eq!(theta, vec![2.0]);
    }

    #[test]
    fn newton_reports_no_convergence() {
        let cfg = NewtonConfig { tolerance: 1e-12, max_iterations: 1, step_halvings: 2, decrement_tolerance: 0.0 };
        // Concave but with a far optimum and a tiny curvature estimate that overshoots.
        let r = newton_maximize(
            |t| -(t[0] - 100.0).powi(4),
            |t| vec![-4.0 * (t[0] - 100.0).powi(3)],
            |t| Matrix::from_rows(&[&[12.0 * (t[0] - 100.0).powi(2)]]),
            &[0.0],
            &cfg,
        );
        assert!(matches!(r, Err(NumericsError::NoConvergence { .. })));
    }
}
