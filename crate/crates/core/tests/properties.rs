use latent_extremes::diagnostics::{expected_order_quantiles, mixture_quantile, quantile_bounds};
use latent_extremes::gev::GevParams;
use latent_extremes::gp::Kriger;
use latent_extremes::map::sorted_quantile;
use latent_extremes::mcem::draw_schedule;
use latent_extremes::model::{DataLayerParams, MeanStructure, SourceParams};
use latent_extremes::spatial::{covariance_matrix, CovarianceSpec, Location, SourceTag};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sites_strategy(max: usize) -> impl Strategy<Value = Vec<Location>> {
    prop::collection::vec((-80.0..80.0f64, -80.0..80.0f64, 0.0..600.0f64), 2..max).prop_map(|v| {
        v.into_iter()
            .map(|(e, n, h)| Location::planar(e, n, h, SourceTag::Field))
            .collect()
    })
}

fn spec_strategy() -> impl Strategy<Value = CovarianceSpec> {
    (0.5..20.0f64, 0.0..1.0f64, 5.0..80.0f64, 0.2..1.9f64).prop_map(|(s2, tau, phi, delta)| CovarianceSpec::new(s2, tau, phi, delta).unwrap())
}

fn field_theta1(xi: f64) -> DataLayerParams {
    DataLayerParams {
        field: Some(SourceParams {
            psi0: 2.0,
            psi1: 0.0005,
            xi,
        }),
        simulator: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gev_quantile_is_increasing_and_inverts_cdf(mu in -20.0..60.0f64, psi in 0.1..15.0f64, xi in -0.45..0.45f64, p in 0.001..0.998f64) {
        let g = GevParams::new(mu, psi, xi).unwrap();
        let a = g.quantile(p).unwrap();
        let b = g.quantile(p + 0.001).unwrap();
        prop_assert!(b > a);
        prop_assert!((g.cdf(a) - p).abs() < 1e-12);
        prop_assert!(g.in_support(a));
    }

    #[test]
    fn covariance_matrix_is_symmetric_positive_definite(sites in sites_strategy(12), spec in spec_strategy()) {
        let m = covariance_matrix(&spec, &sites).unwrap();
        prop_assert!((&m - m.transpose()).amax() == 0.0);
        let jittered = &m + nalgebra::DMatrix::identity(m.nrows(), m.nrows()) * 1e-9 * spec.sigma2();
        prop_assert!(jittered.cholesky().is_some());
    }

    #[test]
    fn kriging_variance_bounded_and_shrinks_with_more_sites(sites in sites_strategy(10), spec in spec_strategy(), e in -80.0..80.0f64, n in -80.0..80.0f64) {
        let mean = MeanStructure::new(vec![SourceTag::Field], vec![40.0, 0.03, -0.3, -0.25]).unwrap();
        let target = Location::planar(e, n, 100.0, SourceTag::Field);
        let all = Kriger::new(&mean, &spec, &sites).unwrap().weights(&target).unwrap();
        let fewer = Kriger::new(&mean, &spec, &sites[..sites.len() - 1]).unwrap().weights(&target).unwrap();
        prop_assert!(all.cond_var >= 0.0);
        prop_assert!(all.cond_var <= spec.total_variance() * (1.0 + 1e-12));
        prop_assert!(all.cond_var <= fewer.cond_var + 1e-8 * spec.total_variance());
    }

    #[test]
    fn draw_schedule_matches_ceiling_and_grows(d in 1usize..60, per in 1usize..20, k in 1usize..30) {
        let n = draw_schedule(d, per, 10, k);
        let exact = (per * d) as f64 * 1.1f64.powi(k as i32 - 1);
        prop_assert!((n as f64 - exact.ceil()).abs() <= 1.0);
        prop_assert!(n as f64 >= exact - 1e-9);
        prop_assert!(draw_schedule(d, per, 10, k + 1) >= n);
    }

    #[test]
    fn sorted_quantile_is_monotone_and_bounded(mut v in prop::collection::vec(-100.0..100.0f64, 1..50), p in 0.0..1.0f64, q in 0.0..1.0f64) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = sorted_quantile(&v, lo);
        let b = sorted_quantile(&v, hi);
        prop_assert!(a <= b);
        prop_assert!(v[0] <= a && b <= v[v.len() - 1]);
    }

    #[test]
    fn mixture_quantile_is_monotone(mus in prop::collection::vec(20.0..50.0f64, 1..6), p in 0.02..0.9f64) {
        let gevs: Vec<GevParams> = mus.iter().map(|m| GevParams::new(*m, 6.0, 0.1).unwrap()).collect();
        let a = mixture_quantile(&gevs, p).unwrap();
        let b = mixture_quantile(&gevs, p + 0.05).unwrap();
        prop_assert!(b > a);
        let cdf = gevs.iter().map(|g| g.cdf(a)).sum::<f64>() / gevs.len() as f64;
        prop_assert!((cdf - p).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn quantile_bounds_nest_and_bracket(seed in 0u64..1000, xi in -0.2..0.3f64, n in 5usize..40) {
        let loc = Location::planar(0.0, 0.0, 200.0, SourceTag::Field);
        let theta1 = field_theta1(xi);
        let mu_draws = [35.0, 37.0, 39.0];
        let expected = expected_order_quantiles(&loc, n, &mu_draws, &theta1).unwrap();
        prop_assert!(expected.windows(2).all(|w| w[0] <= w[1]));
        let (l95, u95) = quantile_bounds(&loc, n, &mu_draws, &theta1, 1000, 0.05, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (l50, u50) = quantile_bounds(&loc, n, &mu_draws, &theta1, 1000, 0.5, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for k in 0..n {
            prop_assert!(l95[k] <= l50[k] && l50[k] <= u50[k] && u50[k] <= u95[k]);
        }
        prop_assert!(l95.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(u95.windows(2).all(|w| w[0] <= w[1]));
    }
}
