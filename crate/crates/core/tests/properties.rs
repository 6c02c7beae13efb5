use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mgqda::linalg::{frobenius_norm, pseudo_det, pseudo_inverse, sym_eigen};
use mgqda::simgen::{self, CovarianceFamily, SimulationSpec};
use mgqda::solver::objective;
use mgqda::{build_model, compute_group_stats, data_io, fit, lambda_max, persist, CovMode, Dataset, PenaltySpec, SymMatrix};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn random_psd(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> SymMatrix<f64> {
    let f = gaussian(rng, dim, rank);
    SymMatrix::from_lower(f.dot(&f.t())).unwrap()
}

fn random_data(rng: &mut ChaCha8Rng, g_count: usize, p: usize, n_per: usize) -> Dataset<f64> {
    let mut x = gaussian(rng, g_count * n_per, p);
    let groups: Vec<usize> = (0..g_count * n_per).map(|i| i % g_count).collect();
    for (mut row, &g) in x.outer_iter_mut().zip(&groups) {
        row[g % p] += 2.0;
        row *= 1.0 + 0.3 * g as f64;
    }
    let labels = (0..g_count).map(|g| format!("g{g}")).collect();
    Dataset::new(x, groups, labels, None).unwrap()
}

fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    frobenius_norm((a - b).view()) / (1.0 + frobenius_norm(b.view()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eigen_reconstructs_symmetric_input(dim in 1usize..15, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = SymMatrix::from_lower(gaussian(&mut rng, dim, dim)).unwrap();
        let eig = sym_eigen(&a).unwrap();
        let err = frobenius_norm((&eig.reconstruct() - &a.view()).view());
        prop_assert!(err <= 1e-10 * (1.0 + frobenius_norm(a.view())));
    }

    #[test]
    fn pseudo_inverse_is_moore_penrose(dim in 1usize..12, rank_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = ((dim as f64 * rank_frac) as usize).max(1);
        let a = random_psd(&mut rng, dim, rank);
        let a = a.view().to_owned();
        let p = pseudo_inverse(&SymMatrix::from_lower(a.clone()).unwrap(), 1e-12).unwrap().into_inner();
        prop_assert!(rel(&a.dot(&p).dot(&a), &a) <= 1e-8);
        prop_assert!(rel(&p.dot(&a).dot(&p), &p) <= 1e-8);
        let ap = a.dot(&p);
        prop_assert!(rel(&ap.t().to_owned(), &ap) <= 1e-8);
        let pa = p.dot(&a);
        prop_assert!(rel(&pa.t().to_owned(), &pa) <= 1e-8);
    }

    #[test]
    fn pdet_of_invertible_matrix_is_determinant(dim in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_psd(&mut rng, dim, dim + 2);
        let det = nalgebra::DMatrix::from_fn(dim, dim, |i, j| a.get(i, j)).determinant();
        let pdet = pseudo_det(&a, 1e-12).unwrap().exp();
        prop_assert!((pdet - det).abs() <= 1e-8 * det.abs());
    }

    #[test]
    fn group_stats_ignore_observation_order(seed in any::<u64>(), g_count in 2usize..5, p in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, g_count, p, 6);
        let mut order: Vec<usize> = (0..data.n()).collect();
        order.reverse();
        order.rotate_left(seed as usize % data.n());
        let a = compute_group_stats(&data, CovMode::Sample).unwrap();
        let b = compute_group_stats(&data.subset(&order), CovMode::Sample).unwrap();
        prop_assert!(rel(&a.gamma, &b.gamma) <= 1e-12);
        for g in 0..g_count {
            prop_assert!(rel(&a.covariances[g].view().to_owned(), &b.covariances[g].view().to_owned()) <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fit_beats_zero_and_unpenalized_solution(seed in any::<u64>(), g_count in 2usize..5, p in 2usize..12, frac in 0.05f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = compute_group_stats(&random_data(&mut rng, g_count, p, 3 * p), CovMode::Ml).unwrap();
        let pen = PenaltySpec::new(frac * lambda_max(&stats), 0.5).with_tol(1e-9);
        let (omega, _) = fit(&stats, &pen, None).unwrap();
        let (free, _) = fit(&stats, &pen.with_lambda(0.0), None).unwrap();
        let at_fit = objective(&omega, &stats, &pen).unwrap();
        let slack = 1e-9 * (1.0 + at_fit.abs());
        prop_assert!(at_fit <= objective(&mgqda::Coefficients::zeros(p, g_count), &stats, &pen).unwrap() + slack);
        prop_assert!(at_fit <= objective(&free, &stats, &pen).unwrap() + slack);
    }

    #[test]
    fn permuting_features_permutes_coefficient_rows(seed in any::<u64>(), g_count in 2usize..4, p in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, g_count, p, 20);
        let perm: Vec<usize> = (0..p).map(|j| (j * 7 + seed as usize) % p).collect();
        prop_assume!({ let mut s = perm.clone(); s.sort(); s.dedup(); s.len() == p });
        let permuted = data.select_features(&perm).unwrap();
        let stats = compute_group_stats(&data, CovMode::Ml).unwrap();
        let pen = PenaltySpec::new(0.3 * lambda_max(&stats), 0.5).with_tol(1e-10);
        let (a, _) = fit(&stats, &pen, None).unwrap();
        let (b, _) = fit(&compute_group_stats(&permuted, CovMode::Ml).unwrap(), &pen, None).unwrap();
        for (k, &j) in perm.iter().enumerate() {
            for (x, y) in a.row(j).iter().zip(b.row(k).iter()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn saved_model_predicts_identically(seed in any::<u64>(), g_count in 2usize..5, p in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, g_count, p, 15);
        let stats = compute_group_stats(&data, CovMode::Ml).unwrap();
        let pen = PenaltySpec::new(0.2 * lambda_max(&stats), 0.5);
        let (omega, _) = fit(&stats, &pen, None).unwrap();
        let model = build_model(&omega, &stats, &pen).unwrap();
        let back = persist::from_json::<f64>(&persist::to_json(&model).unwrap()).unwrap();
        let grid = gaussian(&mut rng, 200, p) * 3.0;
        prop_assert_eq!(model.score_batch(grid.view()).unwrap(), back.score_batch(grid.view()).unwrap());
    }

    #[test]
    fn csv_round_trip_is_exact(values in proptest::collection::vec(-1e300f64..1e300, 6), tiny in -1e-300f64..1e-300) {
        let mut x = Array2::from_shape_vec((3, 2), values).unwrap();
        x[[0, 0]] = tiny;
        let data = Dataset::from_raw_labels(x.clone(), &["a", "b", "a"], None).unwrap();
        let mut buf = Vec::new();
        data_io::write_labeled(&mut buf, &data, "y").unwrap();
        let back: Dataset<f64> = data_io::read_labeled(buf.as_slice(), "y", None).unwrap();
        prop_assert_eq!(back.x(), x.view());
    }

    #[test]
    fn generated_covariances_are_psd(seed in any::<u64>(), p in 8usize..40, rho in 0.0f64..0.95, kind in 0usize..4) {
        let b = (p / 2).max(2);
        let family = match kind {
            0 => CovarianceFamily::BlockEquicorrelation { b, rho },
            1 => CovarianceFamily::BlockAutocorrelation { b, rho },
            2 => CovarianceFamily::spiked_sqrt(p, b, 4.0, 1.0),
            _ => CovarianceFamily::BlockModel { b },
        };
        let mut rng = simgen::stream_rng(seed, 0, 0, 0);
        let cov = simgen::make_covariance(&family, p, &mut rng).unwrap();
        let eig = sym_eigen(&cov).unwrap();
        prop_assert!(eig.min_value() >= -1e-8 * eig.max_value());
    }

    #[test]
    fn test_sets_are_balanced(n_test in 0usize..5000, g_count in 2usize..9) {
        let alloc = simgen::test_allocation(n_test, g_count);
        prop_assert_eq!(alloc.iter().sum::<usize>(), n_test);
        prop_assert!(alloc.iter().max().unwrap() - alloc.iter().min().unwrap() <= 1);
    }
}

#[test]
fn replication_is_fixed_by_seed_and_index() {
    for model_id in 1..=8 {
        let mut spec = SimulationSpec::new(model_id, 60, 99, 2);
        spec.n_g = 10;
        spec.n_test = 25;
        let a = simgen::sample(&spec, 1).unwrap();
        let b = simgen::sample(&spec, 1).unwrap();
        let c = simgen::sample(&spec, 0).unwrap();
        assert_eq!(a.train.x(), b.train.x(), "model {model_id}");
        assert_eq!(a.test.x(), b.test.x());
        assert_ne!(a.train.x(), c.train.x());
        let ms = simgen::model_spec(model_id, 60).unwrap();
        let covs = ms.covariances(99, 1).unwrap();
        for (g, cov) in covs.iter().enumerate() {
            for j in 0..60 {
                let structured = (0..ms.g_count).any(|h| ms.means[[h, j]] != ms.means[[g, j]])
                    || (0..60).any(|k| cov.get(j, k) != if j == k { 1.0 } else { 0.0 });
                if structured {
                    assert!(a.support.contains(&j), "model {model_id}, group {g}, feature {j}");
                }
            }
        }
    }
}
