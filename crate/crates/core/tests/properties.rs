use fesd_core::catalog::{load_catalog, CATALOG_IDS};
use fesd_core::expr::{Category, Expr, ResidualBundle};
use fesd_core::model::{heaviside_oracle, SignMatrix, StepValue, VectorField};
use fesd_core::parser::{parse, state_control_resolver};
use fesd_core::reformulate::{build_theta_exprs, lift, n_beta_dense, stewart_indicators, theta_from_sign_matrix};
use fesd_core::simulate::{fit_order, integrate, SimOptions, Variant};
use fesd_core::tableau::{tableau, Family};
use proptest::prelude::*;

const N_VARS: usize = 4;

/// Smooth random expressions over four variables, safe to differentiate on [-1, 1]^4.
fn smooth_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![(0..N_VARS).prop_map(Expr::var), (-2.0..2.0f64).prop_map(Expr::constant)];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a + b),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a - b),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a * b),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a / (2.0 + &b * &b)),
            inner.clone().prop_map(|a| a.sin()),
            inner.clone().prop_map(|a| a.cos()),
            inner.clone().prop_map(|a| (0.5 * a).sin().exp()),
            inner.clone().prop_map(|a| (1.0 + &a * &a).sqrt()),
            inner.prop_map(|a| a.powi(3)),
        ]
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, N_VARS)
}

fn region_models() -> Vec<fesd_core::model::NonsmoothModel> {
    CATALOG_IDS
        .iter()
        .map(|id| load_catalog(id).unwrap().model)
        .filter(|m| matches!(m.field, VectorField::Regions { .. }))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jacobian_matches_central_differences(
        exprs in prop::collection::vec(smooth_expr(), 1..5),
        x in point(),
    ) {
        let n = exprs.len();
        // last variable is a parameter so both Jacobian blocks are exercised
        let bundle = ResidualBundle::new(exprs, vec![Category::Algebraic; n], N_VARS - 1, 1).unwrap();
        let (vars, params) = x.split_at(N_VARS - 1);
        let jv = bundle.jacobian(vars, params).unwrap();
        let jp = bundle.jacobian_params(vars, params).unwrap();
        for k in 0..N_VARS {
            let step = 1e-6;
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += step;
            dn[k] -= step;
            let fu = bundle.eval(&up[..N_VARS - 1], &up[N_VARS - 1..]).unwrap();
            let fd = bundle.eval(&dn[..N_VARS - 1], &dn[N_VARS - 1..]).unwrap();
            for i in 0..n {
                let fdv = (fu[i] - fd[i]) / (2.0 * step);
                let ad = if k < N_VARS - 1 { jv[(i, k)] } else { jp[(i, 0)] };
                prop_assert!((ad - fdv).abs() <= 1e-6 * ad.abs().max(1.0), "row {} col {}: {} vs {}", i, k, ad, fdv);
            }
        }
    }

    #[test]
    fn printed_expressions_parse_back(e in smooth_expr(), x in point()) {
        let names = |i: usize| format!("x{}", i);
        let text = e.display_with(&names).to_string();
        let back = parse(&text, &state_control_resolver(N_VARS, 0)).unwrap();
        let (a, b) = (e.eval(&x).unwrap(), back.eval(&x).unwrap());
        prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0), "{} -> {} vs {}", text, a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn region_multipliers_form_a_simplex(alpha in prop::collection::vec(0.0..=1.0f64, 3)) {
        for m in region_models() {
            let theta = build_theta_exprs(&m).unwrap();
            let a = &alpha[..m.n_psi()];
            let vals: Vec<f64> = theta.iter().map(|t| t.eval(a).unwrap()).collect();
            let total: f64 = vals.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-14, "{}: sum {}", m.name, total);
            prop_assert!(vals.iter().all(|&v| v >= -1e-14), "{}: {:?}", m.name, vals);
        }
    }

    #[test]
    fn lifting_preserves_region_multipliers(
        alpha in prop::collection::vec(0.0..=1.0f64, 5),
        n_psi in 3usize..=5,
        n_d in 2usize..=3,
    ) {
        let s = SignMatrix::dense(n_psi);
        let regions: Vec<Vec<usize>> = (0..s.n_rows()).map(|i| vec![i]).collect();
        let a = &alpha[..n_psi];
        let plain: Vec<f64> = theta_from_sign_matrix(&s, &regions).iter().map(|t| t.eval(a).unwrap()).collect();
        let lifted = lift(&s, &regions, n_d).unwrap().eval_theta(a).unwrap();
        for (p, l) in plain.iter().zip(&lifted) {
            prop_assert!((p - l).abs() <= 1e-14);
        }
    }

    #[test]
    fn stewart_indicators_cancel_signed_switching(x in point()) {
        for m in region_models() {
            let s = m.sign_matrix().unwrap();
            let g = stewart_indicators(s, &m.switching);
            let xs = &x[..m.n_x];
            let psi: Vec<f64> = m.switching.iter().map(|p| p.eval(xs).unwrap()).collect();
            for (row, gi) in s.rows().iter().zip(&g) {
                let s_psi: f64 = row.iter().zip(&psi).map(|(&sj, p)| sj as f64 * p).sum();
                prop_assert!((gi.eval(xs).unwrap() + s_psi).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn heaviside_split_reconstructs_switching_values(psi in prop::collection::vec(-5.0..5.0f64, 1..8)) {
        let sel = heaviside_oracle(&psi).unwrap();
        for j in 0..psi.len() {
            prop_assert_eq!(sel.lambda_p[j] - sel.lambda_n[j], psi[j]);
            prop_assert!(sel.lambda_p[j] * sel.lambda_n[j] == 0.0);
            let expect = if psi[j] > 0.0 { StepValue::Value(1.0) } else if psi[j] < 0.0 { StepValue::Value(0.0) } else { StepValue::Free };
            prop_assert_eq!(sel.alpha[j], expect);
        }
    }
}

#[test]
fn lifted_variable_count_for_dense_sign_matrices() {
    for n_psi in 3..=5 {
        for n_d in 2..=3 {
            let s = SignMatrix::dense(n_psi);
            let regions: Vec<Vec<usize>> = (0..s.n_rows()).map(|i| vec![i]).collect();
            let expect = (1usize << n_psi) - (1usize << n_d);
            assert_eq!(lift(&s, &regions, n_d).unwrap().n_beta, expect);
            assert_eq!(n_beta_dense(n_psi, n_d), expect);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// `x' in 2 - sign(x)` from a negative start crosses zero at `-x0 / 3`.
    #[test]
    fn crossing_time_and_horizon_per_step(
        x0 in -2.5..-0.1f64,
        stages in 1usize..=3,
        n_fe in 2usize..=4,
        n_sim in 1usize..=3,
    ) {
        let e = load_catalog("tutorial-a").unwrap();
        let dcs = Variant::Step(None).build(&e.model).unwrap();
        let horizon = 1.0;
        let opts = SimOptions::new(tableau(Family::RadauIIA, stages).unwrap(), n_fe, n_sim, horizon);
        let tr = integrate(&dcs, &opts, &[x0], &[]).unwrap();
        prop_assert!(tr.all_exact());
        let h = tr.step_sizes();
        for k in 0..n_sim {
            let sum: f64 = h[k * n_fe..(k + 1) * n_fe].iter().sum();
            prop_assert!((sum - horizon / n_sim as f64).abs() <= 1e-12);
            prop_assert!(h[k * n_fe..(k + 1) * n_fe].iter().all(|&v| v > 0.0));
        }
        let ts = -x0 / 3.0;
        let end = if ts < horizon { horizon - ts } else { x0 + 3.0 * horizon };
        prop_assert!((tr.terminal()[0] - end).abs() <= 1e-9, "terminal {} vs {}", tr.terminal()[0], end);
        if ts < horizon - 1e-6 {
            prop_assert_eq!(tr.switches.len(), 1);
            prop_assert!((tr.switches[0].t - ts).abs() <= 1e-9);
        }
    }

    #[test]
    fn switch_free_elements_are_equal(x0 in 0.1..3.0f64, n_fe in 2usize..=6, stages in 1usize..=3) {
        let e = load_catalog("tutorial-a").unwrap();
        let dcs = Variant::Step(None).build(&e.model).unwrap();
        let opts = SimOptions::new(tableau(Family::GaussLegendre, stages).unwrap(), n_fe, 1, 1.0);
        let tr = integrate(&dcs, &opts, &[x0], &[]).unwrap();
        let h = tr.step_sizes();
        prop_assert!(h.iter().all(|v| (v - h[0]).abs() <= 1e-10), "{:?}", h);
        prop_assert!((tr.terminal()[0] - (x0 + 1.0)).abs() <= 1e-12);
    }

    #[test]
    fn slope_fit_is_exact_on_power_laws(order in 0.5..8.0f64, c in 1e-3..1e3f64) {
        let pts: Vec<(f64, f64)> = (0..6).map(|k| {
            let h = 0.5f64.powi(k);
            (h, (c * h.powf(order)).max(1e-300))
        }).collect();
        let usable: Vec<_> = pts.iter().filter(|p| p.1 >= 1e-11 && p.1 <= 1e-2).collect();
        match fit_order(&pts) {
            Ok((slope, _, n)) => {
                prop_assert_eq!(n, usable.len());
                prop_assert!((slope - order).abs() <= 1e-9);
            }
            Err(_) => prop_assert!(usable.len() < 2),
        }
    }
}
