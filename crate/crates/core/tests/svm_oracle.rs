use dsv_core::data::gen_blobs2d;
use dsv_core::svm::{check_classical_kkt, solve_hard_margin, BiasMode, SvmOptions, SvmSolution};
use proptest::prelude::*;

fn blobs(seed: u64, sep: f64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = gen_blobs2d(2, n, sep, seed).unwrap();
    (d.rows(), d.signed_labels().unwrap())
}

fn opts(mode: BiasMode) -> SvmOptions {
    SvmOptions {
        mode,
        ..SvmOptions::default()
    }
}

fn assert_close(a: &SvmSolution, b: &SvmSolution, tol: f64) {
    for (x, y) in a.w_tilde().iter().zip(b.w_tilde()) {
        assert!((x - y).abs() < tol, "{:?} vs {:?}", a.w_tilde(), b.w_tilde());
    }
}

#[test]
fn separated_blobs_are_feasible() {
    let (rows, y) = blobs(0, 6.0, 30);
    let s = solve_hard_margin(&rows, &y, &SvmOptions::default()).unwrap();
    assert!(!s.support.is_empty());
    assert!(check_classical_kkt(&s, &rows, &y).max_residual() < 1e-6);
}

#[test]
fn self_consistency_both_modes() {
    for seed in 0..10 {
        let (rows, y) = blobs(seed, 4.0, 25);
        for mode in [BiasMode::Explicit, BiasMode::Folded] {
            let s = solve_hard_margin(&rows, &y, &opts(mode)).unwrap();
            let r = check_classical_kkt(&s, &rows, &y);
            assert!(r.max_residual() < 1e-6, "seed {seed} {mode:?}: {r:?}");
            for &k in &s.support {
                assert!((y[k] * s.decision(&rows[k]) - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn duplicated_points_keep_the_hyperplane() {
    let (rows, y) = blobs(2, 4.0, 20);
    let base = solve_hard_margin(&rows, &y, &SvmOptions::default()).unwrap();
    let rows2: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
    let y2: Vec<f64> = y.iter().chain(&y).cloned().collect();
    let dup = solve_hard_margin(&rows2, &y2, &SvmOptions::default()).unwrap();
    assert_close(&base, &dup, 1e-6);
    let n = rows.len();
    for k in 0..n {
        assert!((dup.alpha[k] + dup.alpha[k + n] - base.alpha[k]).abs() < 1e-6);
    }
}

#[test]
fn permutation_and_non_support_removal() {
    let (rows, y) = blobs(5, 4.0, 25);
    let base = solve_hard_margin(&rows, &y, &SvmOptions::default()).unwrap();
    let perm: Vec<usize> = (0..rows.len()).rev().collect();
    let pr: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
    assert_close(&base, &solve_hard_margin(&pr, &py, &SvmOptions::default()).unwrap(), 1e-6);

    let drop = (0..rows.len()).find(|k| !base.support.contains(k)).unwrap();
    let kr: Vec<Vec<f64>> = (0..rows.len()).filter(|&k| k != drop).map(|k| rows[k].clone()).collect();
    let ky: Vec<f64> = (0..rows.len()).filter(|&k| k != drop).map(|k| y[k]).collect();
    assert_close(&base, &solve_hard_margin(&kr, &ky, &SvmOptions::default()).unwrap(), 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn random_separable_sets(seed in 0u64..10_000, n in 2usize..15) {
        let (rows, y) = blobs(seed, 5.0, n);
        if let Ok(s) = solve_hard_margin(&rows, &y, &SvmOptions::default()) {
            let r = check_classical_kkt(&s, &rows, &y);
            prop_assert!(r.max_residual() < 1e-6, "{:?}", r);
            prop_assert!(s.alpha.iter().all(|&a| a >= 0.0));
            let eq: f64 = s.alpha.iter().zip(&y).map(|(a, b)| a * b).sum();
            prop_assert!(eq.abs() < 1e-9);
        }
    }
}
