use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ivmsm::diagnostics::{check_ict, check_point_exposure_converse, linear_treatment_table, random_ict_model};
use ivmsm::estimators::{
    estimate, estimate_weighted, wald_estimate, wald_weighted_form, EstimatorConfig, EstimatorError, EstimatorKind,
};
use ivmsm::inference::{sandwich_variance, DgpSpec};
use ivmsm::numerics::eig2x2;
use ivmsm::panel::{read_panel_csv, write_panel_csv, LongitudinalPanel, Outcome};
use ivmsm::simulate::LinearDgpParams;
use ivmsm::weights::{iv_weights, sra_weights};

fn binary_panel(periods: usize, a: Vec<f64>, z: Vec<f64>, y: Vec<f64>) -> LongitudinalPanel {
    let n = y.len();
    LongitudinalPanel {
        n,
        periods,
        k: 1,
        ku: 0,
        subject_ids: (1..=n as u64).collect(),
        l: vec![0.5; n * periods],
        a,
        z,
        u: None,
        outcome: Outcome::Terminal(y),
        binary: true,
    }
}

fn panel_strategy() -> impl Strategy<Value = LongitudinalPanel> {
    (1usize..4, 2usize..12).prop_flat_map(|(periods, n)| {
        (
            prop::collection::vec(prop::bool::ANY, n * periods),
            prop::collection::vec(prop::bool::ANY, n * periods),
            prop::collection::vec(-5.0f64..5.0, n),
        )
            .prop_map(move |(a, z, y)| {
                let f = |v: Vec<bool>| v.into_iter().map(|b| f64::from(u8::from(b))).collect();
                binary_panel(periods, f(a), f(z), y)
            })
    })
}

fn linear_params() -> impl Strategy<Value = LinearDgpParams> {
    (-1.0f64..1.0, -1.0f64..1.0, 0.1f64..0.6, -0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5).prop_map(
        |(lambda0, lambda1, alpha0, alpha1, nu0, nu1, nu2)| LinearDgpParams {
            lambda0,
            lambda1,
            alpha0,
            alpha1,
            nu0,
            nu1,
            nu2,
            ..LinearDgpParams::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cumulative_weights_are_products_of_factors(panel in panel_strategy(), p in 0.05f64..0.95) {
        let w = sra_weights(&panel, |i, t| if (i + t) % 2 == 0 { p } else { 1.0 - p }).unwrap();
        for i in 0..panel.n {
            let mut prod = 1.0;
            for t in 0..panel.periods {
                prod *= w.factor(i, t);
                prop_assert!((w.wbar_t(i, t) - prod).abs() <= 1e-12 * prod.abs());
                prop_assert!((w.wbar_t(i, t) * w.inverse_wbar_t(i, t) - 1.0).abs() < 1e-12);
            }
            prop_assert!((w.log_abs_wbar(i) - prod.abs().ln()).abs() < 1e-12 * prod.abs().ln().abs().max(1.0));
        }
    }

    #[test]
    fn iv_weight_signs_follow_the_instrument(panel in panel_strategy(), fz in 0.1f64..0.9, d in 0.05f64..0.9) {
        let w = iv_weights(&panel, |_, _| fz, |_, _, a| if a == 1.0 { d } else { -d }).unwrap();
        for i in 0..panel.n {
            let mut negative = false;
            for t in 0..panel.periods {
                let f = w.factor(i, t);
                prop_assert!((f.abs() - fz * d).abs() < 1e-15);
                let expected_negative = (panel.instrument(i, t) == 1.0) != (panel.treatment(i, t) == 1.0);
                prop_assert_eq!(f < 0.0, expected_negative);
                negative ^= expected_negative;
            }
            prop_assert_eq!(w.wbar(i) < 0.0, negative);
        }
    }

    #[test]
    fn wald_forms_agree(
        z in prop::collection::vec(prop::bool::ANY, 4..30),
        a_bits in prop::collection::vec(prop::bool::ANY, 30),
        y in prop::collection::vec(-3.0f64..3.0, 30),
    ) {
        let n = z.len();
        let f = |v: &[bool]| v.iter().map(|b| f64::from(u8::from(*b))).collect::<Vec<f64>>();
        let panel = binary_panel(1, f(&a_bits[..n]), f(&z), y[..n].to_vec());
        let (n1, s1, s0) = (0..n).fold((0usize, 0usize, 0usize), |(n1, s1, s0), i| {
            let a = usize::from(a_bits[i]);
            if z[i] { (n1 + 1, s1 + a, s0) } else { (n1, s1, s0 + a) }
        });
        let n0 = n - n1;
        prop_assume!(n1 > 0 && n0 > 0);
        match wald_estimate(&panel) {
            Err(EstimatorError::ZeroDenominator) => prop_assert_eq!(s1 * n0, s0 * n1),
            Ok(r) => {
                prop_assert!(s1 * n0 != s0 * n1);
                let w = wald_weighted_form(&panel).unwrap();
                prop_assert!((r - w).abs() <= 1e-12 * r.abs().max(1.0));
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn panel_csv_round_trip_is_exact(panel in panel_strategy()) {
        let mut buf = Vec::new();
        write_panel_csv(&panel, &mut buf).unwrap();
        let back = read_panel_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, panel);
    }

    #[test]
    fn linear_process_satisfies_ict(params in linear_params()) {
        let grid = [-2.0, -0.5, 0.0, 1.0, 2.5];
        let report = check_ict(&linear_treatment_table(&params, &grid, &grid)).unwrap();
        prop_assert!(report.pass, "{report}");
    }

    #[test]
    fn random_ict_models_pass_the_converse(seed in any::<u64>(), l in 1usize..4, u in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, _) = random_ict_model(&mut rng, l, u);
        let report = check_point_exposure_converse(&model).unwrap();
        prop_assert!(report.pass, "{report}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn outcome_scaling_scales_every_estimate(seed in 0u64..1000, c in prop::sample::select(vec![-3.0, 0.5, 2.0, 7.0])) {
        let dgp = DgpSpec::Linear(LinearDgpParams::default());
        let sim = dgp.simulate(800, seed).unwrap();
        let mut scaled = sim.panel.clone();
        if let Outcome::Terminal(y) = &mut scaled.outcome {
            y.iter_mut().for_each(|v| *v *= c);
        }
        for kind in [EstimatorKind::Associational, EstimatorKind::Sra, EstimatorKind::Iv] {
            let cfg = dgp.estimator_config(kind);
            let b = estimate(&sim.panel, &cfg).unwrap().beta;
            let bc = estimate(&scaled, &cfg).unwrap().beta;
            for (x, y) in b.iter().zip(&bc) {
                prop_assert!((c * x - y).abs() <= 1e-9 * (c * x).abs().max(1.0), "{kind}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn frequency_weights_match_duplicated_subjects(seed in 0u64..1000, counts_seed in any::<u64>()) {
        let dgp = DgpSpec::Linear(LinearDgpParams::default());
        let panel = dgp.simulate(300, seed).unwrap().panel;
        let mut rng = ChaCha8Rng::seed_from_u64(counts_seed);
        let counts: Vec<f64> = (0..panel.n).map(|_| f64::from(rand::Rng::gen_range(&mut rng, 0u8..4))).collect();
        prop_assume!(counts.iter().sum::<f64>() > 50.0);
        let rows: Vec<usize> = (0..panel.n).flat_map(|i| std::iter::repeat(i).take(counts[i] as usize)).collect();
        let dup = panel.select(&rows);
        for kind in [EstimatorKind::Sra, EstimatorKind::Iv] {
            let cfg = dgp.estimator_config(kind);
            let weighted = estimate_weighted(&panel, &cfg, Some(&counts), None, false).unwrap().beta;
            let direct = estimate(&dup, &cfg).unwrap().beta;
            for (x, y) in weighted.iter().zip(&direct) {
                prop_assert!((x - y).abs() < 1e-7 * x.abs().max(1.0), "{kind}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn sandwich_is_symmetric_positive_semidefinite(seed in 0u64..1000) {
        let dgp = DgpSpec::Linear(LinearDgpParams::default());
        let panel = dgp.simulate(600, seed).unwrap().panel;
        for kind in [EstimatorKind::Associational, EstimatorKind::Sra, EstimatorKind::SraStabilized, EstimatorKind::Iv] {
            let cfg = EstimatorConfig::for_linear(kind, &LinearDgpParams::default());
            let est = estimate(&panel, &cfg).unwrap();
            let v = sandwich_variance(&panel, &cfg, &est).unwrap();
            prop_assert_eq!(v.asymmetry(), 0.0);
            let (l1, l2) = eig2x2(&v).unwrap();
            prop_assert!(l1.min(l2) >= -1e-10 * l1.abs().max(l2.abs()), "{kind}: eigenvalues {l1}, {l2}");
        }
    }
}
