use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strategem_core::exec::Execution;
use strategem_core::metrics::position_accuracies;
use strategem_core::model::OptionPosition;
use strategem_core::pipeline::simulate;
use strategem_core::pmm::{estimate_question, OmPolicy, StrategyMix};
use strategem_core::randomization::{build_balanced_plan, BalancedDesignConfig};
use strategem_core::respondents::{SyntheticAgentSpec, SyntheticCohort};
use strategem_core::synthbench::synthetic_dataset;

fn estimates(cohort: &SyntheticCohort, n: usize, trials: u32, seed: u64) -> Vec<StrategyMix> {
    let ds = synthetic_dataset(n, 4).unwrap();
    let cfg = BalancedDesignConfig {
        trials_per_position: trials,
        master_seed: seed,
    };
    let plan = build_balanced_plan(&ds, &cfg, Execution::Parallel).unwrap();
    let obs = simulate(&plan, &ds, cohort, Execution::Parallel).unwrap();
    let a = OptionPosition::from_label("A").unwrap();
    position_accuracies(&obs, 4)
        .unwrap()
        .iter()
        .map(|acc| estimate_question(acc, OmPolicy::OriginalPosition, a).unwrap().mix())
        .collect()
}

#[test]
fn homogeneous_ensemble_recovers_the_mix() {
    let a = OptionPosition::from_label("A").unwrap();
    let cohort = SyntheticCohort::uniform(SyntheticAgentSpec::new(0.4, 0.1, 0.5, a));
    let mixes = estimates(&cohort, 100, 200, 5);
    let n = mixes.len() as f64;
    let mean = [
        mixes.iter().map(|m| m.p_m).sum::<f64>() / n,
        mixes.iter().map(|m| m.p_r).sum::<f64>() / n,
        mixes.iter().map(|m| m.p_g).sum::<f64>() / n,
    ];
    for (got, want) in mean.iter().zip([0.4, 0.1, 0.5]) {
        assert!((got - want).abs() <= 0.02, "{mean:?}");
    }
}

#[test]
fn heterogeneous_questions_are_recovered_individually() {
    let a = OptionPosition::from_label("A").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut cohort = SyntheticCohort::uniform(SyntheticAgentSpec::new(0.0, 0.0, 1.0, a));
    let mut truth = Vec::new();
    for i in 0..40 {
        let (x, y): (f64, f64) = (rng.random(), rng.random());
        let (lo, hi) = if x < y { (x, y) } else { (y, x) };
        let mix = StrategyMix::new(lo, hi - lo, 1.0 - hi);
        cohort = cohort.with_question(format!("q{i:04}"), SyntheticAgentSpec::new(mix.p_m, mix.p_r, mix.p_g, a));
        truth.push(mix);
    }
    let got = estimates(&cohort, 40, 5_000, 6);
    let worst = got
        .iter()
        .zip(&truth)
        .map(|(g, t)| g.max_abs_diff(*t))
        .fold(0.0, f64::max);
    // five thousand trials per position put each component within a few hundredths
    assert!(worst < 0.05, "worst component error {worst}");
}
