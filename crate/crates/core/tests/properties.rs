use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use reflexive_core::envelope::{composite_estimate, envelope_objective, residual_covariances, CompositeWeights};
use reflexive_core::linalg;
use reflexive_core::moments::standardized_cross_cov;
use reflexive_core::*;

fn vec_strategy(k: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, k).prop_map(DVector::from_vec)
}

fn pd_strategy(k: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, k * k).prop_map(move |v| {
        let a = DMatrix::from_vec(k, k, v);
        &a * a.transpose() + DMatrix::identity(k, k) * 0.2
    })
}

fn orthogonal_strategy(k: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, k * k).prop_map(move |v| {
        let a = DMatrix::from_vec(k, k, v) + DMatrix::identity(k, k) * 2.0;
        a.qr().q()
    })
}

prop_compose! {
    fn marginal_params()(p in 1usize..=4, r in 1usize..=4)
        (bx in vec_strategy(p, -2.0, 2.0), by in vec_strategy(r, -2.0, 2.0),
         sx in pd_strategy(p), sy in pd_strategy(r), cor in -0.95..0.95f64) -> PathParams {
        PathParams::marginal(bx, by, sx, sy, cor).unwrap()
    }
}

prop_compose! {
    fn nondegenerate_params()(p in 1usize..=4, r in 1usize..=4)
        (bx in vec_strategy(p, 0.2, 2.0), by in vec_strategy(r, 0.2, 2.0),
         sx in pd_strategy(p), sy in pd_strategy(r), cor in -0.95..0.95f64) -> PathParams {
        PathParams::marginal(bx, by, sx, sy, cor).unwrap()
    }
}

prop_compose! {
    fn dataset()(p in 1usize..=4, r in 1usize..=4, n in 12usize..40)
        (z in prop::collection::vec(-3.0..3.0f64, n * (p + r)),
         mix in prop::collection::vec(-1.0..1.0f64, (p + r) * (p + r)),
         p in Just(p), r in Just(r), n in Just(n)) -> Dataset {
        let k = p + r;
        let mix = DMatrix::from_vec(k, k, mix) + DMatrix::identity(k, k);
        Dataset::new(DMatrix::from_vec(n, k, z) * mix, p, r).unwrap()
    }
}

fn pop_moments(params: &PathParams) -> SampleMoments {
    let c = joint_covariance(params).unwrap();
    SampleMoments::from_population(c.sigma_x(), c.sigma_y(), c.sigma_yx(), 500)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn joint_covariance_is_psd_with_rank_one_cross_block(params in marginal_params()) {
        let cov = joint_covariance(&params).unwrap();
        let full = &cov.full;
        prop_assert!((full - full.transpose()).amax() < 1e-14);
        let (values, _) = linalg::sym_eigen_desc(full);
        prop_assert!(values.min() >= -1e-10 * values.max());
        let sv = cov.sigma_yx().singular_values();
        if params.cov_xi_eta.abs() > 1e-6 && params.beta_x_xi.amax() > 0.0 && params.beta_y_eta.amax() > 0.0 {
            let mut s: Vec<f64> = sv.iter().copied().collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assert!(s.len() < 2 || s[1] <= 1e-10 * s[0]);
        }
    }

    #[test]
    fn bias_factor_bounds(params in marginal_params()) {
        let b = bias_factor(&params).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        let cor = params.cor_xi_eta().abs();
        let pop = population_cor_regression(&joint_covariance(&params).unwrap()).unwrap();
        prop_assert!((pop - b * cor).abs() < 1e-10);
        prop_assert!(pop <= cor + 1e-12);
    }

    #[test]
    fn conversion_preserves_observables(params in nondegenerate_params()) {
        let reg = convert_constraints(&params, ConstraintMode::Regression).unwrap();
        let (vx, vy) = population_reg_variances(&reg).unwrap();
        prop_assert!((vx - 1.0).abs() < 1e-10 && (vy - 1.0).abs() < 1e-10);
        let cor = params.cor_xi_eta();
        prop_assert!((reg.cor_xi_eta() - cor).abs() <= 4.0 * f64::EPSILON * cor.abs());
        let back = convert_constraints(&reg, ConstraintMode::Marginal).unwrap();
        prop_assert!((back.cor_xi_eta() - cor).abs() <= 4.0 * f64::EPSILON * cor.abs());
        let s0 = joint_covariance(&params).unwrap().observed();
        let s1 = joint_covariance(&reg).unwrap().observed();
        prop_assert!((&s1 - &s0).amax() <= 1e-12 * s0.amax());
        // The bias factor becomes the regression-scale correlation.
        let b = bias_factor(&params).unwrap();
        let pop = population_cor_regression(&joint_covariance(&reg).unwrap()).unwrap();
        prop_assert!((pop - b * params.cor_xi_eta().abs()).abs() < 1e-10);
        // H/(H - 1) recovers the construct variances under regression constraints.
        let (hx, hy) = signal_strengths(&reg).unwrap();
        prop_assert!((sigma2_from_h(hx).unwrap() - reg.var_xi).abs() <= 1e-9 * reg.var_xi);
        prop_assert!((sigma2_from_h(hy).unwrap() - reg.var_eta).abs() <= 1e-9 * reg.var_eta);
    }

    #[test]
    fn canonical_correlations_bounded(data in dataset()) {
        let m = compute_moments(&data).unwrap();
        if let Ok(c) = standardized_cross_cov(&m) {
            prop_assert!(c.singular_values().iter().all(|&s| (0.0..=1.0 + 1e-8).contains(&s)));
            let fit = fit_rank1(&m).unwrap();
            prop_assert_eq!(estimate_cor_regression(&m).unwrap(), fit.d1.clamp(0.0, 1.0));
            if fit.d1 > 0.0 {
                prop_assert!((fit.a_dir.norm() - 1.0).abs() < 1e-10 && (fit.b_dir.norm() - 1.0).abs() < 1e-10);
                let first = fit.b_dir.iter().find(|v| v.abs() > 1e-12).unwrap();
                prop_assert!(*first > 0.0);
                let mut sv: Vec<f64> = fit.beta_yx.singular_values().iter().copied().collect();
                sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
                prop_assert!(sv.len() < 2 || sv[1] <= 1e-10 * sv[0]);
            }
        }
    }

    #[test]
    fn moments_invariant_to_row_order(data in dataset(), seed in any::<u64>()) {
        let n = data.n();
        let mut order: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let rows = DMatrix::from_fn(n, data.p() + data.r(), |i, j| data.rows()[(order[i], j)]);
        let a = compute_moments(&data).unwrap();
        let b = compute_moments(&Dataset::new(rows, data.p(), data.r()).unwrap()).unwrap();
        prop_assert!((a.joint() - b.joint()).amax() <= 1e-12 * a.joint().amax().max(1.0));
    }

    #[test]
    fn affine_equivariance(data in dataset(), shift in -10.0..10.0f64, scale in 0.2..5.0f64) {
        let p = data.p();
        let m = DMatrix::from_fn(p, p, |i, j| if i == j { scale } else if j == i + 1 { 0.5 } else { 0.0 });
        let mut rows = data.rows().clone();
        let x = data.x() * m.transpose();
        rows.view_mut((0, 0), (data.n(), p)).copy_from(&x);
        rows.add_scalar_mut(shift);
        let a = compute_moments(&data).unwrap();
        let b = compute_moments(&Dataset::new(rows, p, data.r()).unwrap()).unwrap();
        if let (Ok(ca), Ok(cb)) = (standardized_cross_cov(&a), standardized_cross_cov(&b)) {
            let mut sa: Vec<f64> = ca.singular_values().iter().copied().collect();
            let mut sb: Vec<f64> = cb.singular_values().iter().copied().collect();
            sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
            sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (x, y) in sa.iter().zip(&sb) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn composite_bases_are_orthonormal_and_rotation_invariant(
        params in nondegenerate_params(),
        ux in 0usize..=4, uy in 0usize..=4,
        ox in orthogonal_strategy(4), oy in orthogonal_strategy(4),
    ) {
        let m = pop_moments(&params);
        let (ux, uy) = (ux.min(m.p()), uy.min(m.r()));
        for method in [WeightMethod::Simpls, WeightMethod::EnvelopeMle] {
            let w = reflexive_core::envelope::composite_weights(&m, ux, uy, method, &EnvelopeOptions::default()).unwrap();
            prop_assert!(linalg::orthogonality_defect(&w.phi) < 1e-10);
            prop_assert!(linalg::orthogonality_defect(&w.gamma) < 1e-10);
            let base = composite_estimate(&m, &w).unwrap();
            let rotated = CompositeWeights {
                phi: &w.phi * ox.view((0, 0), (ux, ux)).clone_owned().qr().q(),
                gamma: &w.gamma * oy.view((0, 0), (uy, uy)).clone_owned().qr().q(),
                ..w.clone()
            };
            let est = composite_estimate(&m, &rotated).unwrap();
            prop_assert!((est - base).abs() < 1e-10, "{:?}: {} vs {}", method, est, base);
        }
    }

    #[test]
    fn full_dimension_serr_equals_rrr(data in dataset()) {
        let m = compute_moments(&data).unwrap();
        if let Ok(rrr) = estimate_cor_regression(&m) {
            for method in [WeightMethod::Simpls, WeightMethod::EnvelopeMle] {
                if let Ok(fit) = reflexive_core::envelope::serr_from_moments(&m, m.p(), m.r(), method, &EnvelopeOptions::default()) {
                    prop_assert_eq!(fit.estimate, rrr);
                }
            }
        }
    }

    #[test]
    fn mle_never_worse_than_simpls_start(data in dataset(), ux in 1usize..=3) {
        let m = compute_moments(&data).unwrap();
        let ux = ux.min(m.p());
        if let (Ok((rx, _)), Ok(sx_inv)) = (residual_covariances(&m), linalg::inv_pd(&m.s_x, "s_x")) {
            let start = simpls_weights(&m, ux, 1.min(m.r())).unwrap();
            let mle = envelope_weights_mle(&m, ux, 1.min(m.r()), &EnvelopeOptions::default()).unwrap();
            let f0 = envelope_objective(&start.phi, &rx, &sx_inv).unwrap();
            let f1 = envelope_objective(&mle.phi, &rx, &sx_inv).unwrap();
            prop_assert!(f1 <= f0 + 1e-10 * f0.abs().max(1.0));
            let hist = &mle.trace_x.as_ref().unwrap().history;
            prop_assert!(hist.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0)));
        }
    }
}

#[test]
fn bias_factor_tends_to_one_for_large_loadings() {
    let l = DVector::from_element(3, 100.0);
    let params = PathParams::marginal(l.clone(), l, DMatrix::identity(3, 3), DMatrix::identity(3, 3), 0.4).unwrap();
    assert!(bias_factor(&params).unwrap() >= 0.999);
    assert!((sigma2_from_h(1e6).unwrap() - 1.0).abs() < 1e-5);
    assert_eq!(sigma2_from_h(2.0).unwrap(), 2.0);
    assert!(matches!(sigma2_from_h(1.0), Err(Error::HOutOfDomain(_))));
}
