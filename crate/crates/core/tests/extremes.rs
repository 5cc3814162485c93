//! Marginal and dependence pipeline on simulated rainfall-like data.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use warpcov::extremes::dependence::estimate_pairwise_rho;
use warpcov::extremes::gpd::gpd_excess_from_survival;
use warpcov::extremes::normal::norm_cdf;
use warpcov::extremes::{censoring_point, fit_marginal, MarginalOptions, StationData};
use warpcov::fit::fit_anisotropic;
use warpcov::gplik::{CovarianceParams, SampleMoments};
use warpcov::reml::OuterOptions;
use warpcov::synthetic::{exponential_margins, simulate_warped_gp, station_layout};
use warpcov::tiling::Point2;

fn scale_at(x: &Point2) -> f64 {
    2.0 + 1.5 * (2.0 * x[0]).sin() + x[1]
}

#[test]
fn spatial_threshold_surface_is_recovered() {
    let stations = station_layout(25, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let t = 2000;
    let values = DMatrix::from_fn(t, stations.len(), |_, s| -scale_at(&stations[s]) * rng.random_range(f64::EPSILON..1.0f64).ln());
    let data = StationData::new(values, stations.clone(), None).unwrap();
    let model = fit_marginal(&data, &MarginalOptions::spatial(0.03, 8, None)).unwrap();

    let truth: Vec<f64> = stations.iter().map(|x| scale_at(x) * (1.0f64 / 0.03).ln()).collect();
    let fitted: Vec<f64> = stations.iter().map(|x| model.threshold.value(x, None).unwrap()).collect();
    let rmse = (truth.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt();
    let range = truth.iter().cloned().fold(f64::MIN, f64::max) - truth.iter().cloned().fold(f64::MAX, f64::min);
    assert!(rmse < 0.1 * range, "rmse {rmse} range {range}");
    assert!((model.exceedance_rate - 0.03).abs() <= 0.01, "{}", model.exceedance_rate);
}

#[test]
fn transformed_exceedances_follow_the_truncated_normal() {
    let stations = station_layout(4, 2);
    let p = CovarianceParams::new(1.0, 0.05, 1.5).unwrap();
    let z = simulate_warped_gp(&stations, |x| [2.0 * x[0], 2.0 * x[1]], &p, 3000, 3).unwrap();
    let fitted = fit_marginal(&StationData::new(exponential_margins(&z, 5.0), stations.clone(), None).unwrap(), &MarginalOptions::default()).unwrap();

    // new data drawn from the fitted marginal
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = 10_000;
    let margins: Vec<_> = stations.iter().map(|x| fitted.at(x, None).unwrap()).collect();
    let values = DMatrix::from_fn(t, stations.len(), |_, s| {
        let m = &margins[s];
        if rng.random_range(0.0..1.0) < m.zeta {
            m.threshold + gpd_excess_from_survival(rng.random_range(f64::EPSILON..1.0), m.psi, m.xi)
        } else {
            m.threshold * rng.random_range(0.0..1.0)
        }
    });
    let (gz, exceed) = fitted.to_gaussian(&StationData::new(values, stations.clone(), None).unwrap()).unwrap();
    let c = censoring_point(fitted.zeta);
    let mut above: Vec<f64> = gz.iter().zip(exceed.iter()).filter(|(_, e)| **e).map(|(z, _)| *z).collect();
    above.sort_by(f64::total_cmp);
    let n = above.len() as f64;
    let tail = 1.0 - norm_cdf(c);
    let d = above
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let f = (norm_cdf(*z) - norm_cdf(c)) / tail;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / n.sqrt();
    assert!(d < critical, "KS statistic {d} vs {critical} over {n} exceedances");
}

#[test]
fn slightly_indefinite_correlation_still_fits() {
    let stations = station_layout(10, 6);
    let p = CovarianceParams::new(1.0, 0.05, 1.5).unwrap();
    let z = simulate_warped_gp(&stations, |x| [2.0 * x[0], 2.0 * x[1]], &p, 1500, 7).unwrap();
    let fitted = fit_marginal(&StationData::new(exponential_margins(&z, 3.0), stations.clone(), None).unwrap(), &MarginalOptions::default()).unwrap();
    let (gz, exceed) = fitted.to_gaussian(&StationData::new(exponential_margins(&z, 3.0), stations.clone(), None).unwrap()).unwrap();
    let corr = estimate_pairwise_rho(&gz, &exceed).unwrap();
    let n = stations.len();
    for i in 0..n {
        assert_eq!(corr.rho[(i, i)], 1.0);
        for j in 0..n {
            assert_eq!(corr.rho[(i, j)], corr.rho[(j, i)]);
            assert!(i == j || corr.rho[(i, j)].abs() < 1.0);
        }
    }

    // push one correlation far enough to break positive definiteness
    let mut v = corr.rho.clone();
    v[(0, 1)] = 0.99;
    v[(1, 0)] = 0.99;
    v[(0, 2)] = -0.9;
    v[(2, 0)] = -0.9;
    let min_eig = v.clone().symmetric_eigen().eigenvalues.min();
    assert!(min_eig < 0.0, "{min_eig}");
    let m = SampleMoments::from_covariance(v, 1500).unwrap();
    let fit = fit_anisotropic(&stations, &m, &OuterOptions::default()).unwrap();
    assert!(fit.loglik.is_finite());
}
