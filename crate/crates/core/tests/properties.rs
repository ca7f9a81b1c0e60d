use balanced_sde::model::{make_test_equation_2d, validate_bilinear, BilinearSDE, NoiseDraw, Problem, ScalarLinearSDE};
use balanced_sde::montecarlo::{weak_estimate, worker_pool, Observable};
use balanced_sde::rng::NoiseStream;
use balanced_sde::schemes::{
    step_euler_weak, step_general_balanced, step_heuristic_balanced, step_implicit_scalar, BalancedWeights, Scheme,
    WeightMatrix,
};
use balanced_sde::stability::{
    admissible_intervals, branch_multipliers, choose_a, expected_log_growth, expected_log_multiplier, lyapunov_bound_ell,
    lyapunov_bound_exact_2d, sup_expected_log_growth, StabilityReport,
};
use balanced_sde::weights::{heuristic_h, m_from_h, objective};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn vec_close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * a.amax().max(b.amax()).max(1.0)
}

fn matrix(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, d * d).prop_map(move |v| DMatrix::from_row_slice(d, d, &v))
}

prop_compose! {
    fn sde()(d in 1usize..=3, m in 1usize..=3)
        (drift in matrix(d), sigmas in prop::collection::vec(matrix(d), m),
         x0 in prop::collection::vec(-2.0..2.0f64, d)) -> BilinearSDE {
        BilinearSDE::new(drift, sigmas, DVector::from_vec(x0)).unwrap()
    }
}

prop_compose! {
    fn sde_state_noise()(s in sde())
        (y in prop::collection::vec(-3.0..3.0f64, s.d), pattern in 0usize..(1 << s.m), s in Just(s))
        -> (BilinearSDE, DVector<f64>, NoiseDraw) {
        let m = s.m;
        (s, DVector::from_vec(y), NoiseDraw::from_pattern(pattern, m))
    }
}

fn dt_strategy() -> impl Strategy<Value = f64> {
    (0u32..=6).prop_map(|k| 0.5f64.powi(k as i32))
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// `v` normalized, unless it is too close to zero.
fn unit(v: &[f64]) -> Option<DVector<f64>> {
    let x = DVector::from_row_slice(v);
    let n = x.norm();
    (n > 1e-3).then(|| x / n)
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn test_equation_is_valid_and_rotation_antisymmetric(s1 in -10.0..10.0f64, s2 in -10.0..10.0f64, eps in -5.0..5.0f64,
                                                        x in -5.0..5.0f64, y in -5.0..5.0f64) {
        let e = make_test_equation_2d(s1, s2, eps, [x, y]);
        prop_assert!(validate_bilinear(&e).is_ok());
        let s = &e.sigmas[1];
        prop_assert_eq!(s + s.transpose(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn every_scheme_is_linear_in_the_state((s, y, xi) in sde_state_noise(), dt in dt_strategy(), c in -5.0..5.0f64) {
        let p = Problem::Bilinear(s.clone());
        let schemes = [
            Scheme::Euler,
            Scheme::Schurz,
            Scheme::Heuristic { alpha: None },
            Scheme::General(WeightMatrix(DMatrix::from_element(s.d, s.d, 0.3))),
        ];
        for scheme in schemes {
            let Ok(st) = scheme.prepare(&p, dt) else { continue };
            let a = st.step(&(&y * c), &xi).unwrap();
            let b = st.step(&y, &xi).unwrap() * c;
            prop_assert!(vec_close(&a, &b, 1e-13), "{scheme:?}: {a} vs {b}");
        }
    }

    #[test]
    fn zero_weights_reduce_to_euler((s, y, xi) in sde_state_noise(), dt in dt_strategy()) {
        let euler = step_euler_weak(&s, &y, dt, &xi).unwrap();
        let general = step_general_balanced(&s, &y, dt, &xi, &WeightMatrix::zeros(s.d)).unwrap();
        let heuristic = step_heuristic_balanced(&s, &y, dt, &xi, &vec![0.0; s.m]).unwrap();
        prop_assert!(vec_close(&euler, &general, 1e-14));
        // with zero drift the heuristic left-hand side is the identity
        if s.drift.iter().all(|v| *v == 0.0) {
            prop_assert!(vec_close(&euler, &heuristic, 1e-14));
        }
        let p = Problem::Bilinear(s.clone());
        let zeros = Scheme::Balanced(BalancedWeights::zeros(s.d, s.m)).prepare(&p, dt).unwrap();
        prop_assert!(vec_close(&euler, &zeros.step(&y, &xi).unwrap(), 1e-14));
    }

    #[test]
    fn general_with_m_from_h_matches_the_implicit_heuristic_solve(
        (s, y, xi) in sde_state_noise(), dt in dt_strategy(), alpha in 0.0..1.0f64
    ) {
        let alphas = vec![alpha; s.m];
        let h = heuristic_h(&s, &alphas).unwrap();
        let Ok(m) = m_from_h(&h, dt) else { return Ok(()) };
        let Ok(implicit) = step_heuristic_balanced(&s, &y, dt, &xi, &alphas) else { return Ok(()) };
        let explicit = step_general_balanced(&s, &y, dt, &xi, &m).unwrap();
        // conditioning of I − dt H limits the attainable agreement
        let cond = (DMatrix::identity(s.d, s.d) - h.matrix() * dt).try_inverse().map(|inv| inv.amax()).unwrap_or(f64::INFINITY);
        prop_assume!(cond < 1e3);
        prop_assert!(vec_close(&implicit, &explicit, 1e-11));
    }

    #[test]
    fn m_from_h_round_trip(h in (1usize..=4).prop_flat_map(matrix), dt in dt_strategy()) {
        let d = h.nrows();
        let Ok(m) = m_from_h(&WeightMatrix(h.clone()), dt) else { return Ok(()) };
        let id = DMatrix::<f64>::identity(d, d);
        let prod = (&id - &h * dt) * (&id + m.matrix() * dt);
        let scale = m.matrix().amax().max(1.0) * dt;
        prop_assert!((prod - id).amax() <= 1e-12 * scale.max(1.0) * 10.0);
    }

    #[test]
    fn implicit_denominator_is_at_least_three_quarters(lambda in -50.0..50.0f64, dt in 1e-6..4.0f64, plus in any::<bool>()) {
        let xi = if plus { 1.0 } else { -1.0 };
        prop_assert!(1.0 + lambda * lambda * dt - lambda * dt.sqrt() * xi >= 0.75 - 1e-12);
        let s = ScalarLinearSDE::new(0.0, lambda, 1.0);
        let y = step_implicit_scalar(&s, 1.0, dt, xi).unwrap();
        prop_assert!(y > 0.0 && y <= 4.0 / 3.0 + 1e-12);
    }

    #[test]
    fn chosen_weight_is_admissible_and_sign_preserving(mu in -5.0..2.0f64, lambda in 0.1..6.0f64, k in -6i32..=1) {
        prop_assume!(2.0 * mu - lambda * lambda < 0.0);
        let dt = 2f64.powi(k);
        let a = choose_a(mu, lambda, dt, 0.26, None, 1.0).unwrap();
        prop_assert!(admissible_intervals(mu, lambda, dt).unwrap().contains(a));
        let [p, q] = branch_multipliers(mu, lambda, dt, a);
        prop_assert!(p > 0.0 && q > 0.0);
        prop_assert!(expected_log_multiplier(mu, lambda, dt, a).unwrap() < 0.0);
    }

    #[test]
    fn expected_log_multiplier_is_the_two_point_average(mu in -5.0..2.0f64, lambda in 0.0..6.0f64, dt in 1e-3..2.0f64, a in -50.0..0.0f64) {
        let den = 1.0 - a * dt;
        let up = 1.0 + (mu * dt + lambda * dt.sqrt()) / den;
        let down = 1.0 + (mu * dt - lambda * dt.sqrt()) / den;
        prop_assume!(up > 0.0 && down > 0.0);
        let direct = 0.5 * (up.abs().ln() + down.abs().ln());
        prop_assert!(rel_close(expected_log_multiplier(mu, lambda, dt, a).unwrap(), direct, 1e-12));
    }

    #[test]
    fn growth_is_even_in_the_direction(s in sde(), dt in dt_strategy(), v in prop::collection::vec(-1.0..1.0f64, 3), m_entries in prop::collection::vec(-2.0..2.0f64, 9)) {
        let Some(x) = unit(&v[..s.d]) else { return Ok(()) };
        let m = WeightMatrix(DMatrix::from_row_slice(s.d, s.d, &m_entries[..s.d * s.d]));
        let (Ok(a), Ok(b)) = (expected_log_growth(&s, dt, &m, &x), expected_log_growth(&s, dt, &m, &(-&x))) else { return Ok(()) };
        prop_assert_eq!(a, b);
    }

    #[test]
    fn supremum_dominates_every_direction(dt in dt_strategy(), theta in 0.0..std::f64::consts::TAU, m_entries in prop::collection::vec(-2.0..2.0f64, 4)) {
        let s = make_test_equation_2d(7.0, 4.0, 1.0, [1.0, 2.0]);
        let m = WeightMatrix(DMatrix::from_row_slice(2, 2, &m_entries));
        let x = DVector::from_row_slice(&[theta.cos(), theta.sin()]);
        let Ok(g) = expected_log_growth(&s, dt, &m, &x) else { return Ok(()) };
        let (sup, _) = sup_expected_log_growth(&s, dt, &m).unwrap();
        prop_assert!(sup >= g - 1e-12);
    }

    #[test]
    fn sphere_bound_matches_the_closed_form(s2 in 0.2..5.0f64, ratio in 1.01..2.99f64, eps in -3.0..3.0f64) {
        let s1 = s2 * ratio;
        let e = make_test_equation_2d(s1, s2, eps, [1.0, 0.0]);
        let (ell, _) = lyapunov_bound_ell(&e).unwrap();
        prop_assert!((ell - lyapunov_bound_exact_2d(s1, s2, eps).unwrap()).abs() <= 1e-8);
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn objective_ignores_the_sign_of_each_diffusion(dt in dt_strategy(), m_entries in prop::collection::vec(-2.0..2.0f64, 4), flip in 0usize..2) {
        let s = make_test_equation_2d(7.0, 4.0, 1.0, [1.0, 2.0]);
        let mut flipped = s.clone();
        flipped.sigmas[flip] = -&flipped.sigmas[flip];
        let m = WeightMatrix(DMatrix::from_row_slice(2, 2, &m_entries));
        let (Ok(a), Ok(b)) = (objective(&s, dt, &m), objective(&flipped, dt, &m)) else { return Ok(()) };
        // same terms, summed in a different pattern order
        prop_assert!(rel_close(a, b, 1e-12), "{a} vs {b}");
    }

    #[test]
    fn report_objective_ignores_reflection_and_sigma_order(dt in dt_strategy(), m_entries in prop::collection::vec(-2.0..2.0f64, 4)) {
        let s = make_test_equation_2d(7.0, 4.0, 1.0, [1.0, 2.0]);
        let m = WeightMatrix(DMatrix::from_row_slice(2, 2, &m_entries));
        let Ok(base) = StabilityReport::bilinear(&s, dt, &m) else { return Ok(()) };
        let mut swapped = s.clone();
        swapped.sigmas.swap(0, 1);
        let other = StabilityReport::bilinear(&swapped, dt, &m).unwrap();
        prop_assert!(rel_close(base.objective, other.objective, 1e-12));
        // reflecting x₁ ↦ −x₁ conjugates every matrix by R = diag(−1, 1)
        let r = DMatrix::from_diagonal(&DVector::from_row_slice(&[-1.0, 1.0]));
        let conj = |a: &DMatrix<f64>| &r * a * &r;
        let reflected = BilinearSDE::new(conj(&s.drift), s.sigmas.iter().map(conj).collect(), &r * &s.x0).unwrap();
        let refl = StabilityReport::bilinear(&reflected, dt, &WeightMatrix(conj(m.matrix()))).unwrap();
        prop_assert!(rel_close(base.objective, refl.objective, 1e-12));
    }
}

#[test]
fn stabilized_scheme_keeps_the_sign_of_the_initial_state() {
    for (mu, lambda) in [(0.0, 4.0), (-2.0, 1.0), (0.5, 2.0), (1.0, 4.0)] {
        for dt in [0.5, 1.0 / 16.0, 1.0 / 64.0] {
            for x0 in [1.0, -3.0] {
                let p = Problem::Scalar(ScalarLinearSDE::new(mu, lambda, x0));
                let st = Scheme::stabilized_default().prepare(&p, dt).unwrap();
                let x = DVector::from_element(1, x0);
                for path in 0..10_000u64 {
                    let mut stream = NoiseStream::new(7, path);
                    let mut y = x.clone();
                    for _ in 0..32 {
                        y = st.step(&y, &stream.next_draw(1)).unwrap();
                    }
                    assert!(y[0] * x0 > 0.0, "mu={mu} lambda={lambda} dt={dt} path={path}: {}", y[0]);
                }
            }
        }
    }
}

#[test]
fn estimates_do_not_depend_on_the_worker_count() {
    let e = make_test_equation_2d(7.0, 4.0, 1.0, [1.0, 2.0]);
    let p = Problem::Bilinear(e);
    let st = Scheme::Heuristic { alpha: None }.prepare(&p, 1.0 / 16.0).unwrap();
    let run = |w| {
        worker_pool(Some(w))
            .unwrap()
            .install(|| weak_estimate(&st, &[1.0, 2.0], &Observable::Log1pNorm2, 1.0, 1.0 / 16.0, 20_001, 3).unwrap())
    };
    let one = run(1);
    for w in [2, 3, 8] {
        let other = run(w);
        assert_eq!(one.mean.to_bits(), other.mean.to_bits());
        assert_eq!(one.stderr.to_bits(), other.stderr.to_bits());
    }
}

#[test]
fn stderr_halves_when_samples_quadruple() {
    let p = Problem::Scalar(ScalarLinearSDE::new(0.0, 1.0, 1.0));
    let st = Scheme::stabilized_default().prepare(&p, 1.0 / 16.0).unwrap();
    let f = Observable::SinScaled { c: 0.2 };
    let small = weak_estimate(&st, &[1.0], &f, 1.0, 1.0 / 16.0, 50_000, 11).unwrap();
    let large = weak_estimate(&st, &[1.0], &f, 1.0, 1.0 / 16.0, 200_000, 11).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
}
