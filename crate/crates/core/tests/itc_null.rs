use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strategem_core::exec::Execution;
use strategem_core::itc::permutation_test;

#[test]
fn permutation_p_values_are_uniform_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ps: Vec<f64> = (0..200)
        .map(|rep| {
            let x: Vec<f64> = (0..30).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..30).map(|_| rng.random()).collect();
            let (r, p) = permutation_test(&x, &y, 999, rep, Execution::Parallel).unwrap();
            assert!(r.abs() < 0.6, "r = {r}");
            p
        })
        .collect();
    ps.sort_by(f64::total_cmp);
    let n = ps.len() as f64;
    let d = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| (p - i as f64 / n).abs().max(((i + 1) as f64 / n - p).abs()))
        .fold(0.0, f64::max);
    // asymptotic Kolmogorov-Smirnov critical value at alpha = 0.01
    let critical = 1.628 / n.sqrt();
    assert!(d < critical, "KS statistic {d} >= {critical}");
}

#[test]
fn exact_linear_relation_is_significant() {
    let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
    let (r, p) = permutation_test(&x, &y, 999, 1, Execution::Sequential).unwrap();
    assert!((r + 1.0).abs() < 1e-12);
    assert!((p - 0.001).abs() < 1e-12);
}
