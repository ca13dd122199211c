use ivmsm::estimators::{
    estimate, repeated_measures_iv_estimate, theoretical_bias, wald_estimate, EstimatorError, EstimatorKind,
};
use ivmsm::inference::DgpSpec;
use ivmsm::markov_analysis::{
    default_gamma, iv_exact_second_moment, iv_stab_exact_second_moment, markov_back_transition, mc_back_transition,
    mc_iv_stab_second_moments, mc_sra_stab_second_moment, sra_stab_second_moment, sra_unstab_second_moment,
};
use ivmsm::panel::{LongitudinalPanel, MsmmSpec, Outcome};
use ivmsm::simulate::{LinearDgpParams, MarkovDgpParams};
use ivmsm::weights::unit_weights;

/// Sum of `f(path) · P(path)` over every binary `(A_0, L_1, A_1, …, L_T, A_T)` path
/// of the chain `A_{t−1} → L_t → A_t` with a uniform `A_0`.
fn enumerate_chain(p_la: f64, p_al: f64, periods: usize, f: impl Fn(u32, &[u32], &[u32]) -> f64) -> f64 {
    let mut total = 0.0;
    for code in 0..(1u32 << (2 * periods + 1)) {
        let bit = |k: usize| (code >> k) & 1;
        let a0 = bit(0);
        let l: Vec<u32> = (0..periods).map(|t| bit(1 + 2 * t)).collect();
        let a: Vec<u32> = (0..periods).map(|t| bit(2 + 2 * t)).collect();
        let mut prob = 0.5;
        let mut prev = a0;
        for t in 0..periods {
            prob *= if l[t] == prev { p_al } else { 1.0 - p_al };
            prob *= if a[t] == l[t] { p_la } else { 1.0 - p_la };
            prev = a[t];
        }
        total += prob * f(a0, &l, &a);
    }
    total
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

#[test]
fn unstabilized_sra_moment_matches_enumeration() {
    for &(p_la, p_al) in &[(0.3, 0.6), (0.7, 0.7), (0.55, 0.2)] {
        for periods in 1..=5 {
            let e = enumerate_chain(p_la, p_al, periods, |_, l, a| {
                l.iter().zip(a).map(|(l, a)| if l == a { p_la } else { 1.0 - p_la }).map(|f| f.powi(-2)).product()
            });
            assert!(close(e, sra_unstab_second_moment(p_la, periods).unwrap(), 1e-12));
        }
    }
}

#[test]
fn stabilized_sra_moment_matches_enumeration() {
    for &(p_la, p_al) in &[(0.3, 0.6), (0.7, 0.7), (0.8, 0.35)] {
        let r = p_la * p_al + (1.0 - p_la) * (1.0 - p_al);
        for periods in 1..=5 {
            let e = enumerate_chain(p_la, p_al, periods, |a0, l, a| {
                let mut prev = a0;
                let mut v = 1.0;
                for t in 0..l.len() {
                    let cond = if a[t] == l[t] { p_la } else { 1.0 - p_la };
                    let marg = if a[t] == prev { r } else { 1.0 - r };
                    v *= (marg / cond).powi(2);
                    prev = a[t];
                }
                v
            });
            assert!(close(e, sra_stab_second_moment(p_la, p_al, periods).unwrap(), 1e-12), "T={periods}");
        }
    }
}

#[test]
fn stabilized_iv_recurrence_matches_enumeration() {
    for &(p_la, p_al, d0, d1) in &[(0.7, 0.6, 0.2, 0.4), (0.4, 0.8, 0.3, 0.3), (0.9, 0.55, 0.5, 0.15)] {
        let g = default_gamma(p_la, d0, d1).unwrap();
        for periods in 1..=5 {
            let e = enumerate_chain(p_la, p_al, periods, |a0, l, a| {
                let d = [d0, d1];
                let mut prev = a0 as usize;
                let mut v = 1.0;
                for t in 0..l.len() {
                    v *= g[prev].powi(2) / d[l[t] as usize].powi(2);
                    prev = a[t] as usize;
                }
                v
            });
            let exact = iv_stab_exact_second_moment(p_la, p_al, [d0, d1], g, periods).unwrap();
            assert!(close(e, exact, 1e-12), "T={periods}: {e} vs {exact}");
        }
    }
}

#[test]
fn stabilized_iv_monte_carlo_matches_recurrence() {
    let (p_la, p_al, d) = (0.7, 0.6, [0.3, 0.45]);
    let g = default_gamma(p_la, d[0], d[1]).unwrap();
    let mc = mc_iv_stab_second_moments(p_la, p_al, d, g, 5, 100_000, 17);
    for (t, est) in mc.iter().enumerate() {
        let exact = iv_stab_exact_second_moment(p_la, p_al, d, g, t + 1).unwrap();
        assert!(est.z(exact).abs() < 3.0, "T={}: z = {}", t + 1, est.z(exact));
    }
}

#[test]
fn unstabilized_iv_recurrence_matches_enumeration() {
    for &(p, d0, d1) in &[(0.7, 0.2, 0.3), (0.3, 0.4, 0.25), (0.5, 0.6, 0.1)] {
        for periods in 1..=10usize {
            let mut e = 0.0;
            for code in 0..(1u32 << periods) {
                let mut prob = 0.5;
                let mut v = 1.0;
                for t in 0..periods {
                    let l = (code >> t) & 1;
                    if t > 0 {
                        prob *= if l == (code >> (t - 1)) & 1 { p } else { 1.0 - p };
                    }
                    let d = if l == 1 { d1 } else { d0 };
                    v /= d * d;
                }
                e += prob * v;
            }
            assert!(close(e, iv_exact_second_moment(p, d0, d1, periods).unwrap(), 1e-12));
        }
    }
}

#[test]
fn stabilized_sra_monte_carlo_matches_closed_form() {
    let est = mc_sra_stab_second_moment(0.7, 0.6, 4, 100_000, 5);
    let exact = sra_stab_second_moment(0.7, 0.6, 4).unwrap();
    assert!(est.z(exact).abs() < 3.0);
}

#[test]
fn back_transition_approximation_is_close() {
    let params = MarkovDgpParams::default();
    let approx = markov_back_transition(&params);
    let mc = mc_back_transition(&params, 100_000, 3).unwrap();
    assert!((approx - mc).abs() < 0.05, "{approx} vs {mc}");
}

fn single_period(z: &[f64], a: &[f64], y: &[f64]) -> LongitudinalPanel {
    let n = z.len();
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
fn wald_hand_examples() {
    let p = single_period(&[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], &[3.0, 3.0, 1.0, 1.0]);
    assert_eq!(wald_estimate(&p).unwrap(), 2.0);
    let z = [1.0, 0.0, 1.0, 1.0, 0.0];
    let y: Vec<f64> = z.iter().map(|v| 5.0 * v).collect();
    assert_eq!(wald_estimate(&single_period(&z, &z, &y)).unwrap(), 5.0);
    let p = single_period(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[3.0, 1.0, 1.0, 1.0]);
    assert!(matches!(wald_estimate(&p), Err(EstimatorError::ZeroDenominator)));
}

fn two_period_repeated(a: Vec<f64>, y: Vec<f64>) -> LongitudinalPanel {
    let n = a.len() / 2;
    LongitudinalPanel {
        n,
        periods: 2,
        k: 1,
        ku: 0,
        subject_ids: (1..=n as u64).collect(),
        z: (0..2 * n).map(|k| (k % 2) as f64).collect(),
        l: vec![0.0; 2 * n],
        a,
        u: None,
        outcome: Outcome::PerPeriod(y),
        binary: true,
    }
}

#[test]
fn unit_weight_stacked_estimator_is_pooled_least_squares() {
    let a = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let y = vec![2.0, 1.5, 0.3, 1.1, 2.2, 3.9, -0.1, 0.4, 1.7, 2.0];
    let panel = two_period_repeated(a.clone(), y.clone());
    let beta = repeated_measures_iv_estimate(&panel, &unit_weights(&panel), &MsmmSpec::linear_cumulative()).unwrap();
    // Pooled OLS of y on (1, cumulative a) over the stacked rows.
    let mut x = Vec::new();
    for i in 0..panel.n {
        x.push(a[2 * i]);
        x.push(a[2 * i] + a[2 * i + 1]);
    }
    let m = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let intercept = (sy - slope * sx) / m;
    assert!((beta[0] - intercept).abs() < 1e-12 && (beta[1] - slope).abs() < 1e-12);
}

#[test]
fn untreated_stacked_panel_is_singular() {
    let panel = two_period_repeated(vec![0.0; 8], vec![1.0, 2.0, 0.5, 0.1, 3.0, 2.0, 1.0, 1.0]);
    let r = repeated_measures_iv_estimate(&panel, &unit_weights(&panel), &MsmmSpec::linear_cumulative());
    assert!(matches!(r, Err(EstimatorError::SingularDesign { .. })));
}

#[test]
fn simulated_bias_matches_the_bias_formula() {
    let params = LinearDgpParams::default();
    let dgp = DgpSpec::Linear(params.clone());
    for kind in [EstimatorKind::Associational, EstimatorKind::Sra] {
        let formula = theoretical_bias(kind, &params, 400_000, 1).unwrap();
        let sim = dgp.simulate(400_000, 2).unwrap();
        let beta = estimate(&sim.panel, &dgp.estimator_config(kind)).unwrap().beta;
        let bias = beta[1] - params.beta1;
        assert!((bias - formula[1]).abs() < 0.02, "{kind}: simulated {bias}, formula {}", formula[1]);
    }
}

#[test]
fn markov_iv_estimate_is_near_truth() {
    let dgp = DgpSpec::Markov(MarkovDgpParams::default());
    let sim = dgp.simulate(200_000, 8).unwrap();
    let est = estimate(&sim.panel, &dgp.estimator_config(EstimatorKind::Iv)).unwrap();
    assert!((est.beta[0] - sim.truth.beta[0]).abs() < 0.15, "{:?}", est.beta);
}
