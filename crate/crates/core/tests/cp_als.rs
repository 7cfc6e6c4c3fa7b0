use m2e::cp_als::{als_update, cp_als_fit, cp_relative_error, AlsOptions};
use m2e::tensor::{cp_reconstruct, khatri_rao, matricize};
use m2e::{CpFactors, Matrix, Tensor3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_factors(dims: (usize, usize, usize), r: usize, seed: u64) -> CpFactors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CpFactors::new(
        Matrix::random_normal(dims.0, r, &mut rng),
        Matrix::random_normal(dims.1, r, &mut rng),
        Matrix::random_normal(dims.2, r, &mut rng),
    )
    .unwrap()
}

fn noisy_tensor(dims: (usize, usize, usize), seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Matrix::random_normal(dims.0 * dims.1, dims.2, &mut rng);
    Tensor3::new(dims, m.into_vec()).unwrap()
}

#[test]
fn rank_two_recovered() {
    let t = cp_reconstruct(&random_factors((6, 5, 4), 2, 11));
    let fit = cp_als_fit(&t, &AlsOptions::with_rank(2)).unwrap();
    assert!(fit.trace.len() <= 500);
    assert!(fit.final_error() < 1e-4, "error {}", fit.final_error());
}

#[test]
fn trace_is_non_increasing_on_unstructured_data() {
    for seed in 0..5 {
        let t = noisy_tensor((5, 6, 7), seed);
        let fit = cp_als_fit(
            &t,
            &AlsOptions {
                rank: 3,
                max_iters: 200,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        for w in fit.trace.windows(2) {
            // squared errors are what ALS minimizes; compare on that scale
            assert!(w[1] * w[1] <= w[0] * w[0] + 1e-10, "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn updates_satisfy_normal_equations() {
    let t = noisy_tensor((4, 5, 6), 3);
    let f = random_factors((4, 5, 6), 3, 4);
    let ridge = 1e-10;
    let [a, b, c] = f.factors().clone();
    for (mode, khat) in [
        (1, khatri_rao(&c, &b).unwrap()),
        (2, khatri_rao(&c, &a).unwrap()),
        (3, khatri_rao(&b, &a).unwrap()),
    ] {
        let x = als_update(&t, &f, mode, ridge).unwrap();
        let lhs = matricize(&t, mode).unwrap().matmul(&khat).unwrap();
        let mut g = khat.gram();
        for i in 0..g.rows() {
            g[(i, i)] += ridge;
        }
        let rhs = x.matmul(&g).unwrap();
        let scale = lhs.frobenius_norm().max(1.0);
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9 * scale, "mode {mode}");
    }
}

#[test]
fn bad_options_rejected() {
    let t = noisy_tensor((2, 2, 2), 0);
    assert!(cp_als_fit(&t, &AlsOptions::with_rank(0)).is_err());
    let mut bad = t.clone();
    bad.set(0, 0, 0, f64::NAN).unwrap();
    assert!(cp_als_fit(&bad, &AlsOptions::with_rank(1)).is_err());
}

#[test]
fn zero_tensor_flagged() {
    let fit = cp_als_fit(&Tensor3::zeros((3, 3, 2)).unwrap(), &AlsOptions::with_rank(2)).unwrap();
    assert!(fit.zero_input);
    assert_eq!(fit.final_error(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn column_permutation_leaves_error_unchanged(seed in 0u64..1000, rot in 1usize..3) {
        let t = noisy_tensor((3, 4, 5), seed);
        let f = random_factors((3, 4, 5), 3, seed + 1);
        let perm: Vec<usize> = (0..3).map(|j| (j + rot) % 3).collect();
        let [a, b, c] = f.factors();
        let g = CpFactors::new(
            a.permute_columns(&perm).unwrap(),
            b.permute_columns(&perm).unwrap(),
            c.permute_columns(&perm).unwrap(),
        ).unwrap();
        let e1 = cp_relative_error(&t, &f).unwrap();
        let e2 = cp_relative_error(&t, &g).unwrap();
        prop_assert!((e1 - e2).abs() <= 1e-12 * e1.max(1.0));
    }

    #[test]
    fn doubling_own_factors_gives_unit_error(seed in 0u64..1000) {
        let f = random_factors((3, 3, 2), 1, seed);
        let t = cp_reconstruct(&f);
        let [a, b, c] = f.factors();
        let doubled = CpFactors::new(a.scale(2.0), b.clone(), c.clone()).unwrap();
        prop_assert!((cp_relative_error(&t, &doubled).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(cp_relative_error(&t, &f).unwrap() < 1e-12);
    }
}
