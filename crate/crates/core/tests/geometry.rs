use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::RngCore;
use rankheads::geometry::*;
use rankheads::Error;

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn same_seed_and_stream_reproduce_draws() {
    let mut a = SeededRng::new(7, 3);
    let mut b = SeededRng::new(7, 3);
    let mut c = SeededRng::new(7, 4);
    let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
    let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
    let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
    assert_eq!(xa, xb);
    assert_ne!(xa, xc);
    let g1 = sample_gaussian(5, &mut SeededRng::new(1, 0)).unwrap();
    let g2 = sample_gaussian(5, &mut SeededRng::new(1, 0)).unwrap();
    assert_eq!(g1.as_slice(), g2.as_slice());
}

#[test]
fn zero_dimension_is_rejected() {
    let mut rng = SeededRng::new(0, 0);
    assert!(matches!(sample_sphere(0, &mut rng), Err(Error::InvalidDimension(_))));
    assert!(matches!(sample_gaussian(0, &mut rng), Err(Error::InvalidDimension(_))));
}

#[test]
fn one_dimensional_sphere_is_two_points() {
    let mut rng = SeededRng::new(11, 0);
    let draws: Vec<f64> = (0..10_000).map(|_| sample_sphere(1, &mut rng).unwrap()[0]).collect();
    assert!(draws.iter().all(|&x| x == 1.0 || x == -1.0));
    let plus: Vec<f64> = draws.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
    let (m, se) = mean_and_se(&plus);
    assert!((m - 0.5).abs() <= 3.0 * se, "frequency {m}");
}

#[test]
fn sphere_coordinates_are_centered() {
    let d = 8;
    let n = 100_000;
    let mut rng = SeededRng::new(5, 0);
    let mut sums = vec![0.0; d];
    for _ in 0..n {
        let u = sample_sphere(d, &mut rng).unwrap();
        for i in 0..d {
            sums[i] += u[i];
        }
    }
    let tol = 3.0 / ((d * n) as f64).sqrt();
    for s in sums {
        assert!((s / n as f64).abs() <= tol);
    }
}

#[test]
fn rotated_sphere_samples_keep_their_moments() {
    let d = 6;
    let n = 50_000;
    let q = sample_orthogonal(d, &mut SeededRng::new(2, 9)).unwrap();
    let mut rng = SeededRng::new(2, 0);
    let stat: Vec<f64> = (0..n)
        .map(|_| {
            let u = sample_sphere(d, &mut rng).unwrap();
            let v = &q * u.as_vector();
            v[0] * v[0]
        })
        .collect();
    let (m, se) = mean_and_se(&stat);
    assert!((m - 1.0 / d as f64).abs() <= 3.0 * se);
}

#[test]
fn orthonormal_sequence_is_orthonormal() {
    let mut rng = SeededRng::new(3, 0);
    let x = sample_orthonormal_sequence(4, 4, &mut rng).unwrap();
    assert_abs_diff_eq!(x.transpose() * &x, DMatrix::identity(4, 4), epsilon = 1e-10);
    assert!(matches!(sample_orthonormal_sequence(3, 4, &mut rng), Err(Error::InvalidConfig(_))));
}

#[test]
fn orthonormal_sequence_has_haar_marginals() {
    let mut rng = SeededRng::new(4, 0);
    let stat: Vec<f64> = (0..100_000)
        .map(|_| {
            let x = sample_orthonormal_sequence(16, 2, &mut rng).unwrap();
            x[(0, 0)] * x[(0, 0)]
        })
        .collect();
    let (m, se) = mean_and_se(&stat);
    assert!((m - 1.0 / 16.0).abs() <= 3.0 * se, "mean {m} se {se}");
}

#[test]
fn rotated_orthonormal_sequences_keep_their_marginals() {
    let q = sample_orthogonal(16, &mut SeededRng::new(8, 1)).unwrap();
    let mut rng = SeededRng::new(8, 0);
    let stat: Vec<f64> = (0..50_000)
        .map(|_| {
            let x = &q * sample_orthonormal_sequence(16, 2, &mut rng).unwrap();
            x[(0, 1)] * x[(0, 1)]
        })
        .collect();
    let (m, se) = mean_and_se(&stat);
    assert!((m - 1.0 / 16.0).abs() <= 3.0 * se);
}

#[test]
fn planar_orthonormal_pair_is_a_quarter_turn() {
    let mut rng = SeededRng::new(6, 0);
    for _ in 0..100 {
        let x = sample_orthonormal_sequence(2, 2, &mut rng).unwrap();
        let (a, b) = (x[(0, 0)], x[(1, 0)]);
        let turned = [-b, a];
        let same = (x[(0, 1)] - turned[0]).abs() < 1e-12 && (x[(1, 1)] - turned[1]).abs() < 1e-12;
        let flipped = (x[(0, 1)] + turned[0]).abs() < 1e-12 && (x[(1, 1)] + turned[1]).abs() < 1e-12;
        assert!(same || flipped);
    }
}

#[test]
fn gaussian_moments() {
    let mut rng = SeededRng::new(9, 0);
    let sq: Vec<f64> = (0..100_000).map(|_| sample_gaussian(8, &mut rng).unwrap().norm_squared()).collect();
    let (m, se) = mean_and_se(&sq);
    assert!((m - 8.0).abs() <= 3.0 * se);

    let xs: Vec<f64> = (0..100_000).map(|_| sample_gaussian(1, &mut rng).unwrap()[0]).collect();
    let centered: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let (v, se) = mean_and_se(&centered);
    assert!((v - 1.0).abs() <= 3.0 * se);
}

#[test]
fn point_configuration_checks_column_norms() {
    let x = DMatrix::from_column_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
    let pc = PointConfiguration::new(x, nalgebra::DVector::from_vec(vec![1.0, 0.0])).unwrap();
    assert_eq!(pc.scale, 2.0);
    assert_eq!((pc.d(), pc.n()), (2, 2));
    let bad = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    assert!(PointConfiguration::new(bad, nalgebra::DVector::from_vec(vec![1.0, 0.0])).is_err());
}

#[test]
fn remove_column_drops_exactly_one() {
    let x = DMatrix::from_fn(3, 4, |i, j| (10 * i + j) as f64);
    let r = remove_column(&x, 1);
    assert_eq!(r.ncols(), 3);
    assert_eq!(r.column(0), x.column(0));
    assert_eq!(r.column(1), x.column(2));
    assert_eq!(r.column(2), x.column(3));
}

proptest! {
    #[test]
    fn sphere_samples_have_unit_norm(d in 1usize..64, seed in any::<u64>()) {
        let u = sample_sphere(d, &mut SeededRng::new(seed, 0)).unwrap();
        prop_assert!((u.norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn haar_matrices_are_orthogonal(d in 1usize..24, seed in any::<u64>()) {
        let q = sample_orthogonal(d, &mut SeededRng::new(seed, 1)).unwrap();
        let err = (q.transpose() * &q - DMatrix::identity(d, d)).amax();
        prop_assert!(err <= 1e-10);
    }

    #[test]
    fn orthonormal_columns_for_any_n(d in 1usize..20, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = 1 + ((d - 1) as f64 * frac) as usize;
        let x = sample_orthonormal_sequence(d, n, &mut SeededRng::new(seed, 2)).unwrap();
        let err = (x.transpose() * &x - DMatrix::identity(n, n)).amax();
        prop_assert!(err <= 1e-10);
    }

    #[test]
    fn unit_vector_normalization(v in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
        let dv = nalgebra::DVector::from_vec(v);
        prop_assume!(dv.norm() > 1e-6);
        let u = UnitVector::normalize(dv).unwrap();
        prop_assert!((u.norm() - 1.0).abs() <= 1e-12);
    }
}
