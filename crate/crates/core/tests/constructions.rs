use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rankheads::attention::{attend, attention_weights, two_layer_forward, AttentionKind};
use rankheads::constructions::*;
use rankheads::geometry::{sample_orthonormal_sequence, sample_sphere, sample_sphere_columns, SeededRng};
use rankheads::montecarlo::majority_accuracy;
use rankheads::targets::{biased_argmax_index, farthest_indices, nearest_index, nearest_neighbor, BiasVector};

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn unit_list(d: usize, h: usize, rng: &mut SeededRng) -> Vec<DVector<f64>> {
    (0..h).map(|_| sample_sphere(d, rng).unwrap().into_vector()).collect()
}

fn tokens(x: &DMatrix<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(x.nrows(), 3);
    z.columns_mut(0, 2).copy_from(x);
    z.set_column(2, y);
    z
}

#[test]
fn full_rank_nearest_hardmax_is_exact() {
    let mut rng = SeededRng::new(0, 0);
    let head = full_rank_nearest(16, 1.0).unwrap();
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let x = sample_sphere_columns(16, 8, &mut rng).unwrap();
        let y = sample_sphere(16, &mut rng).unwrap().into_vector();
        let out = attend(&head, &x, &col(&y), AttentionKind::HARDMAX).unwrap();
        if out.column(0) != nearest_neighbor(&x, &y).unwrap() {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn full_rank_nearest_softmax_error_falls_with_temperature() {
    let mut rng = SeededRng::new(1, 0);
    let samples: Vec<_> = (0..2000)
        .map(|_| (sample_sphere_columns(16, 4, &mut rng).unwrap(), sample_sphere(16, &mut rng).unwrap().into_vector()))
        .collect();
    let mse = |t: f64| {
        let head = full_rank_nearest(16, t).unwrap();
        samples
            .iter()
            .map(|(x, y)| {
                (attend(&head, x, &col(y), AttentionKind::SOFTMAX).unwrap().column(0) - nearest_neighbor(x, y).unwrap())
                    .norm_squared()
            })
            .sum::<f64>()
            / samples.len() as f64
    };
    let errs: Vec<f64> = [1.0, 10.0, 1e2, 1e3].into_iter().map(mse).collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "{errs:?}");
    }
}

#[test]
fn single_point_context_is_returned_at_any_temperature() {
    let mut rng = SeededRng::new(2, 0);
    for t in [1e-3, 1.0, 1e3] {
        let head = full_rank_nearest(5, t).unwrap();
        let x = sample_sphere_columns(5, 1, &mut rng).unwrap();
        let y = sample_sphere(5, &mut rng).unwrap().into_vector();
        assert_eq!(attend(&head, &x, &col(&y), AttentionKind::SOFTMAX).unwrap(), x);
    }
}

#[test]
fn full_rank_farthest_selects_farthest_point() {
    let mut rng = SeededRng::new(3, 0);
    let head = full_rank_farthest(16, 1e3).unwrap();
    let (mut hits, mut total) = (0, 0);
    for _ in 0..10_000 {
        let x = sample_sphere_columns(16, 8, &mut rng).unwrap();
        let want = farthest_indices(&x).unwrap();
        for (i, w) in want.iter().enumerate() {
            let wts = attention_weights(&head, &x, &x.column(i).into_owned(), AttentionKind::SOFTMAX).unwrap();
            hits += usize::from(wts.imax() == w.index);
            total += 1;
        }
    }
    assert!(hits as f64 >= 0.99 * total as f64, "{hits}/{total}");
}

#[test]
fn farthest_head_on_two_points_and_small_temperature() {
    let mut rng = SeededRng::new(4, 0);
    let x = sample_sphere_columns(4, 2, &mut rng).unwrap();
    let head = full_rank_farthest(4, 2.0).unwrap();
    let out = attend(&head, &x, &x, AttentionKind::SOFTMAX).unwrap();
    for i in 0..2 {
        let w = attention_weights(&head, &x, &x.column(i).into_owned(), AttentionKind::SOFTMAX).unwrap();
        assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.column(i).into_owned(), &x * w, epsilon = 1e-12);
    }
    let x = sample_sphere_columns(4, 5, &mut rng).unwrap();
    let cold = full_rank_farthest(4, 1e-9).unwrap();
    let out = attend(&cold, &x, &x, AttentionKind::SOFTMAX).unwrap();
    for i in 0..5 {
        assert_abs_diff_eq!(out.column(i).into_owned(), x.column_mean(), epsilon = 1e-8);
    }
}

#[test]
fn zero_bias_matches_full_rank_nearest() {
    let mut rng = SeededRng::new(5, 0);
    let biased = biased_full_rank(6, BiasVector::zeros(4)).unwrap();
    let plain = full_rank_nearest(6, 1.0).unwrap();
    for _ in 0..200 {
        let x = sample_sphere_columns(6, 4, &mut rng).unwrap();
        let y = sample_sphere(6, &mut rng).unwrap().into_vector();
        let a = biased.forward(&x, &y, AttentionKind::SOFTMAX).unwrap();
        let b = attend(&plain, &x, &col(&y), AttentionKind::SOFTMAX).unwrap();
        assert_abs_diff_eq!(a, b.column(0).into_owned(), epsilon = 1e-12);
    }
}

#[test]
fn dominant_bias_always_selects_the_other_point() {
    let mut rng = SeededRng::new(6, 0);
    let b = BiasVector::new(DVector::from_vec(vec![-10.0, 0.0])).unwrap();
    let head = biased_full_rank(4, b.clone()).unwrap();
    for _ in 0..1000 {
        let x = sample_sphere_columns(4, 2, &mut rng).unwrap();
        let y = sample_sphere(4, &mut rng).unwrap().into_vector();
        assert_eq!(biased_argmax_index(&x, &y, &b).unwrap().index, 1);
        assert_eq!(head.forward(&x, &y, AttentionKind::HARDMAX).unwrap(), x.column(1).into_owned());
    }
}

#[test]
fn concatenated_form_has_identical_scores() {
    let mut rng = SeededRng::new(7, 0);
    for _ in 0..100 {
        let b = BiasVector::new(DVector::from_fn(5, |_, _| rng.normal())).unwrap();
        let head = biased_full_rank(3, b.clone()).unwrap();
        let cat = head.concatenated().unwrap();
        let x = sample_sphere_columns(3, 5, &mut rng).unwrap();
        let y = sample_sphere(3, &mut rng).unwrap().into_vector();
        let direct = head.scores(&x, &y).unwrap();
        let via = cat.scores(&augment_targets(&x, &b), &augment_source(&y));
        assert_abs_diff_eq!(direct, via, epsilon = 1e-12);
        let out = attend(&cat, &augment_targets(&x, &b), &col(&augment_source(&y)), AttentionKind::SOFTMAX).unwrap();
        let want = head.forward(&x, &y, AttentionKind::SOFTMAX).unwrap();
        assert_abs_diff_eq!(out.rows(0, 3).column(0).into_owned(), want, epsilon = 1e-12);
        assert_eq!(out[(3, 0)], 0.0);
    }
}

#[test]
fn squared_distance_bias_matches_argmin_target() {
    let mut rng = SeededRng::new(8, 0);
    for _ in 0..500 {
        let b = BiasVector::new(DVector::from_fn(4, |_, _| rng.normal())).unwrap();
        let head = biased_full_rank_sq_distance(5, &b).unwrap();
        let x = sample_sphere_columns(5, 4, &mut rng).unwrap();
        let y = sample_sphere(5, &mut rng).unwrap().into_vector();
        let want = rankheads::targets::biased_nearest_neighbor(&x, &y, &b).unwrap();
        assert_eq!(head.forward(&x, &y, AttentionKind::HARDMAX).unwrap(), want);
    }
}

#[test]
fn majority_rejects_bad_directions() {
    let q = vec![DVector::from_vec(vec![1.0, 1.0, 0.0])];
    assert!(majority_two_layer(3, 1, &q, 1e3, 1e3).is_err());
    let q = vec![DVector::from_vec(vec![1.0, 0.0, 0.0])];
    assert!(majority_two_layer(3, 2, &q, 1e3, 1e3).is_err());
    assert!(majority_two_layer(3, 1, &q, 0.0, 1e3).is_err());
}

#[test]
fn single_voter_transformer_copies_its_vote() {
    let mut rng = SeededRng::new(9, 0);
    let d = 8;
    let beta = 1e3;
    for hardmax in [true, false] {
        let mut agree = 0;
        for _ in 0..500 {
            let q = unit_list(d, 1, &mut rng);
            let mut p = MajorityParams::new(1e3, beta);
            p.hardmax = hardmax;
            let t = majority_two_layer_with(d, 1, &q, p).unwrap();
            let x = sample_orthonormal_sequence(d, 2, &mut rng).unwrap();
            let y = sample_sphere(d, &mut rng).unwrap().into_vector();
            let out = two_layer_forward(&t, &tokens(&x, &y)).unwrap();
            let want = x.column(head_vote(&q[0], &x, &y)).into_owned() + &y / beta;
            if hardmax {
                assert_abs_diff_eq!(out, want, epsilon = 1e-12);
            }
            agree += usize::from((out - want).norm() < 1e-3);
        }
        assert!(agree >= 490, "hardmax={hardmax}: {agree}/500");
    }
}

fn parity(alpha: f64, hardmax: bool, trials: usize) -> usize {
    let mut rng = SeededRng::new(10, 0);
    let (d, h) = (16, 101);
    let qs = unit_list(d, h, &mut rng);
    let mut p = MajorityParams::new(alpha, 1e3);
    p.hardmax = hardmax;
    let t = majority_two_layer_with(d, h, &qs, p).unwrap();
    let voters = RandomHeadMajority::from_q_list(qs).unwrap();
    let mut agree = 0;
    for _ in 0..trials {
        let x = sample_orthonormal_sequence(d, 2, &mut rng).unwrap();
        let y = sample_sphere(d, &mut rng).unwrap().into_vector();
        let out = two_layer_forward(&t, &tokens(&x, &y)).unwrap() - &y / 1e3;
        let picked = nearest_index(&x, &out).unwrap().index;
        agree += usize::from(picked == voters.predict(&x, &y, &mut rng));
    }
    agree
}

#[test]
fn hardmax_transformer_reproduces_explicit_mode() {
    assert_eq!(parity(1e3, true, 2000), 2000);
}

#[test]
fn softmax_transformer_approaches_explicit_mode() {
    let coarse = parity(1e3, false, 2000);
    let fine = parity(1e5, false, 2000);
    assert!(fine >= coarse, "{fine} < {coarse}");
    assert!(fine as f64 >= 0.999 * 2000.0, "{fine}/2000");
}

#[test]
fn mode_of_votes_breaks_ties_randomly() {
    let mut rng = SeededRng::new(11, 0);
    assert_eq!(mode_of_votes(&[1, 1, 0], 2, &mut rng), 1);
    let picks: Vec<usize> = (0..200).map(|_| mode_of_votes(&[0, 1], 2, &mut rng)).collect();
    assert!(picks.contains(&0) && picks.contains(&1));
}

#[test]
fn one_random_voter_is_that_voter() {
    let mut rng = SeededRng::new(12, 0);
    let m = random_head_majority(6, 1, &mut rng).unwrap();
    for _ in 0..100 {
        let x = sample_sphere_columns(6, 3, &mut rng).unwrap();
        let y = sample_sphere(6, &mut rng).unwrap().into_vector();
        assert_eq!(m.predict(&x, &y, &mut rng), head_vote(&m.qs[0], &x, &y));
    }
    assert!(random_head_majority(6, 0, &mut rng).is_err());
}

#[test]
fn rank_one_heads_vote_by_hardmax() {
    let mut rng = SeededRng::new(13, 0);
    let m = random_head_majority(5, 7, &mut rng).unwrap();
    let heads = m.heads().unwrap();
    for _ in 0..100 {
        let x = sample_sphere_columns(5, 3, &mut rng).unwrap();
        let y = sample_sphere(5, &mut rng).unwrap().into_vector();
        for (head, v) in heads.iter().zip(m.votes(&x, &y)) {
            let w = attention_weights(head, &x, &y, AttentionKind::HARDMAX).unwrap();
            assert_eq!(w[v], 1.0);
        }
    }
}

#[test]
fn majority_error_falls_with_more_voters() {
    let errs: Vec<_> = [16, 256, 4096].iter().map(|&h| majority_accuracy(32, h, 10_000, 14).unwrap()).collect();
    for w in errs.windows(2) {
        let gap = w[0].mean - w[1].mean;
        let sigma = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        assert!(gap > 3.0 * sigma, "{errs:?}");
    }
}

#[test]
fn square_unit_error_is_within_budget() {
    for (d, eps) in [(4, 0.1), (8, 0.2), (2, 0.45)] {
        let unit = SquareUnit::new(square_unit_knots(d, eps));
        let worst = (0..=40_000)
            .map(|i| -2.0 + 4.0 * i as f64 / 40_000.0)
            .map(|t| (unit.eval(t) - t * t / 2.0).abs())
            .fold(0.0, f64::max);
        assert!(worst <= eps / d as f64, "d={d} eps={eps}: {worst}");
    }
}

#[test]
fn mode_network_shape_and_weights() {
    let mlp = mode_mlp_construction(4, 5, 0.2).unwrap();
    assert_eq!(mlp.layers.len(), 4);
    assert_eq!(mlp.widths()[0], 4 * 7);
    assert_eq!(*mlp.widths().last().unwrap(), 4);
    assert!(mlp.max_abs_weight() <= 2.0);
    assert!(mode_mlp_construction(4, 5, 0.5).is_err());
    assert!(mode_mlp_construction(4, 5, 0.0).is_err());
}

#[test]
fn unanimous_votes_return_candidate_exactly() {
    let mut rng = SeededRng::new(15, 0);
    let mlp = mode_mlp_construction(6, 4, 0.25).unwrap();
    let pair = sample_orthonormal_sequence(6, 2, &mut rng).unwrap();
    let (xm, xp) = (pair.column(0).into_owned(), pair.column(1).into_owned());
    let out = mlp.evaluate(&vec![xp.clone(); 4], &xm, &xp).unwrap();
    assert!(out.precondition_ok);
    assert_abs_diff_eq!(out.output, xp, epsilon = 1e-12);
}

#[test]
fn narrow_majority_is_resolved() {
    let mut rng = SeededRng::new(16, 0);
    let mlp = mode_mlp_construction(8, 11, 0.25).unwrap();
    for _ in 0..20 {
        let pair = sample_orthonormal_sequence(8, 2, &mut rng).unwrap();
        // tilt the pair so that the inner product sits at the edge of the allowed range
        let xm = pair.column(0).into_owned();
        let xp = (pair.column(1) * (1.0 - 0.0081f64).sqrt() + &xm * 0.09).normalize();
        assert!(xp.dot(&xm) <= 0.1);
        let mut votes = vec![xp.clone(); 6];
        votes.extend(vec![xm.clone(); 5]);
        let out = mlp.evaluate(&votes, &xm, &xp).unwrap();
        assert_abs_diff_eq!(out.output, xp.clone(), epsilon = 1e-10);
        votes.swap(0, 10);
        votes[0] = xm.clone();
        votes[10] = xm.clone();
        let out = mlp.evaluate(&votes, &xm, &xp).unwrap();
        assert_abs_diff_eq!(out.output, xm.clone(), epsilon = 1e-10);
    }
}

#[test]
fn precondition_violation_is_flagged_not_rejected() {
    let mlp = mode_mlp_construction(2, 1, 0.3).unwrap();
    let x = DVector::from_vec(vec![1.0, 0.0]);
    let out = mlp.evaluate(std::slice::from_ref(&x), &x, &x).unwrap();
    assert!(!out.precondition_ok);
    assert!(mlp.evaluate(&[], &x, &x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mode_network_output_is_a_candidate(seed in any::<u64>(), plus in 0usize..8) {
        let mut rng = SeededRng::new(seed, 0);
        let h = 7;
        let mlp = mode_mlp_construction(5, h, 0.3).unwrap();
        let pair = sample_orthonormal_sequence(5, 2, &mut rng).unwrap();
        let (xm, xp) = (pair.column(0).into_owned(), pair.column(1).into_owned());
        let votes: Vec<_> = (0..h).map(|i| if i < plus { xp.clone() } else { xm.clone() }).collect();
        let out = mlp.evaluate(&votes, &xm, &xp).unwrap().output;
        let want = if 2 * plus > h { &xp } else { &xm };
        prop_assert!((out - want).amax() <= 1e-12);
    }

    #[test]
    fn hardmax_nearest_is_exact_for_any_context_size(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = SeededRng::new(seed, 0);
        let head = full_rank_nearest(12, 1.0).unwrap();
        let x = sample_sphere_columns(12, n, &mut rng).unwrap();
        let y = sample_sphere(12, &mut rng).unwrap().into_vector();
        let out = attend(&head, &x, &col(&y), AttentionKind::HARDMAX).unwrap();
        prop_assert_eq!(out.column(0).into_owned(), nearest_neighbor(&x, &y).unwrap());
    }
}

#[test]
fn transformer_error_falls_with_heads() {
    use rankheads::montecarlo::{estimate_mse, DistKind, DistributionSpec};
    let d = 16;
    let dist = DistributionSpec::new(DistKind::OrthogonalDn, d, 2).unwrap();
    let errs: Vec<_> = [10, 100, 1000]
        .iter()
        .map(|&h| {
            let qs = unit_list(d, h, &mut SeededRng::new(17, h as u64));
            let t = majority_two_layer(d, h, &qs, 1e3, 1e3).unwrap();
            estimate_mse(
                |pc| Ok(col(&two_layer_forward(&t, &tokens(&pc.x, &pc.y))?)),
                |pc| Ok(col(&nearest_neighbor(&pc.x, &pc.y)?)),
                &dist,
                3000,
                17,
            )
            .unwrap()
        })
        .collect();
    for w in errs.windows(2) {
        let sigma = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        assert!(w[0].mean - w[1].mean > 3.0 * sigma, "{errs:?}");
    }
}
