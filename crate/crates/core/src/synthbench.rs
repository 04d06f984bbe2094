//! Packaged end-to-end scenarios on synthetic respondents with known answers.
//!
//! Each profile runs with fixed seeds and reports measured values against
//! their bounds, so a failure names the quantity that missed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fields::{project_divergence_free, ProjectionOptions, SimplexGrid, SQRT3_2};
use crate::itc::{entropy_accuracy_points, ideal_entropy, strategy_metric_correlations, EntropyReading, StrategyMetrics};
use crate::metrics::{delta_mu, position_accuracies, sweep_curves, Observation};
use crate::model::{Dataset, OptionPosition, Protocol, Question};
use crate::pipeline::{
    analyze, build_plan, plan_bytes, read_log, run_plan, simulate, AnalyzeOptions, DesignSnapshot, RunManifest,
    RunOptions,
};
use crate::pmm::{
    estimate_question, estimate_strategy, expected_accuracies, validate_question, OmPolicy, StrategyMix,
};
use crate::randomization::{build_balanced_plan, build_sweep_plan, BalancedDesignConfig, SweepConfig};
use crate::respondents::{AgentProfile, StrategyTriple, SyntheticAgentSpec, SyntheticCohort};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Estimator,
    Identifiability,
    Frontier,
    Calibration,
    SweepConvergence,
    Misfit,
    Correlation,
    Projection,
    Determinism,
}

impl Profile {
    pub const ALL: [Profile; 9] = [
        Profile::Estimator,
        Profile::Identifiability,
        Profile::Frontier,
        Profile::Calibration,
        Profile::SweepConvergence,
        Profile::Misfit,
        Profile::Correlation,
        Profile::Projection,
        Profile::Determinism,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Estimator => "estimator",
            Profile::Identifiability => "identifiability",
            Profile::Frontier => "frontier",
            Profile::Calibration => "calibration",
            Profile::SweepConvergence => "sweep-convergence",
            Profile::Misfit => "misfit",
            Profile::Correlation => "correlation",
            Profile::Projection => "projection",
            Profile::Determinism => "determinism",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown synthbench profile `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
}

impl Relation {
    fn holds(self, measured: f64, bound: f64) -> bool {
        match self {
            Relation::AtMost => measured <= bound,
            Relation::AtLeast => measured >= bound,
            Relation::Below => measured < bound,
            Relation::Above => measured > bound,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Below => "<",
            Relation::Above => ">",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub relation: Relation,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, relation: Relation, bound: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            relation,
            bound,
            // NaN fails every relation
            passed: relation.holds(measured, bound),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.6e} {} {:e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.relation.symbol(),
            self.bound
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub profile: Profile,
    pub passed: bool,
    pub elapsed_ms: u128,
    pub checks: Vec<Check>,
}

impl BenchReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run_profile(profile: Profile, exec: Execution) -> Result<BenchReport> {
    let start = Instant::now();
    let checks = match profile {
        Profile::Estimator => estimator()?,
        Profile::Identifiability => identifiability(exec)?,
        Profile::Frontier => frontier()?,
        Profile::Calibration => calibration(exec)?,
        Profile::SweepConvergence => sweep_convergence(exec)?,
        Profile::Misfit => misfit(exec)?,
        Profile::Correlation => correlation(exec)?,
        Profile::Projection => projection(exec)?,
        Profile::Determinism => determinism(exec)?,
    };
    Ok(BenchReport {
        profile,
        passed: checks.iter().all(|c| c.passed),
        elapsed_ms: start.elapsed().as_millis(),
        checks,
    })
}

/// `n` placeholder questions with `k` options each.
pub fn synthetic_dataset(n: usize, k: usize) -> Result<Dataset> {
    Dataset::new(
        (0..n)
            .map(|i| Question {
                id: format!("q{i:04}"),
                stem: format!("Synthetic question {i}"),
                correct_content: format!("answer {i}"),
                distractor_contents: (1..k).map(|d| format!("distractor {i}.{d}")).collect(),
                original_correct_position: OptionPosition::at(0),
            })
            .collect(),
    )
}

/// Uniform draw from the probability simplex.
fn uniform_mix<R: Rng + ?Sized>(rng: &mut R) -> StrategyMix {
    let (a, b): (f64, f64) = (rng.random(), rng.random());
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    StrategyMix::new(lo, hi - lo, 1.0 - hi)
}

fn agent(mix: StrategyMix) -> SyntheticAgentSpec {
    SyntheticAgentSpec::new(mix.p_m, mix.p_r, mix.p_g, OptionPosition::at(0))
}

fn balanced_obs(
    dataset: &Dataset,
    cohort: &SyntheticCohort,
    trials_per_position: u32,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Observation>> {
    let config = BalancedDesignConfig {
        trials_per_position,
        master_seed: seed,
    };
    let plan = build_balanced_plan(dataset, &config, exec)?;
    simulate(&plan, dataset, cohort, exec)
}

fn estimator() -> Result<Vec<Check>> {
    let d = estimate_strategy(0.8, 0.45, 4)?;
    let rounded = StrategyMix::new(0.47, 0.26, 0.27);
    let exact = StrategyMix::new(0.35 / 0.75, 0.2 / 0.75, 0.2 / 0.75);
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let steps = 20;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let mix = StrategyMix::new(
                i as f64 / steps as f64,
                j as f64 / steps as f64,
                (steps - i - j) as f64 / steps as f64,
            );
            let (a, b) = expected_accuracies(mix, 4);
            let back = estimate_strategy(a, b, 4)?;
            worst = worst.max(back.raw.max_abs_diff(mix));
            violations += back.violation.any() as usize;
        }
    }
    Ok(vec![
        Check::new("worked example vs exact (0.4667, 0.2667, 0.2667)", d.mix.max_abs_diff(exact), Relation::AtMost, 1e-3),
        Check::new("worked example vs rounded (0.47, 0.26, 0.27)", d.mix.max_abs_diff(rounded), Relation::AtMost, 1e-2),
        Check::new("round trip over 231-point grid, max abs error", worst, Relation::AtMost, 1e-12),
        Check::new("round trip violations", violations as f64, Relation::AtMost, 0.0),
    ])
}

fn identifiability(exec: Execution) -> Result<Vec<Check>> {
    let truth = StrategyMix::new(0.47, 0.26, 0.27);
    let ds = synthetic_dataset(1, 4)?;
    let cohort = SyntheticCohort::uniform(agent(truth));
    let obs = balanced_obs(&ds, &cohort, 10_000, 0x1de7, exec)?;
    let acc = &position_accuracies(&obs, 4)?[0];
    let est = estimate_question(acc, OmPolicy::OriginalPosition, OptionPosition::at(0))?;
    let (a_om, a_other) = expected_accuracies(truth, 4);
    let d = &est.decomposition;
    Ok(vec![
        Check::new("max abs strategy error", d.mix.max_abs_diff(truth), Relation::AtMost, 0.02),
        Check::new(format!("|A_om - {a_om:.4}|"), (d.a_om - a_om).abs(), Relation::AtMost, 0.01),
        Check::new(format!("|A_other - {a_other:.4}|"), (d.a_other - a_other).abs(), Relation::AtMost, 0.01),
    ])
}

fn frontier() -> Result<Vec<Check>> {
    Ok(vec![
        Check::new("|H_ideal(0.25) - 2|", (ideal_entropy(0.25, 4)? - 2.0).abs(), Relation::AtMost, 1e-9),
        Check::new("|H_ideal(1)|", ideal_entropy(1.0, 4)?.abs(), Relation::AtMost, 1e-9),
        Check::new("|H_ideal(0) - log2 3|", (ideal_entropy(0.0, 4)? - 3f64.log2()).abs(), Relation::AtMost, 1e-9),
    ])
}

fn calibration(exec: Execution) -> Result<Vec<Check>> {
    let ds = synthetic_dataset(1, 4)?;
    let mut checks = Vec::new();
    for c in [0.25, 0.4, 0.6, 0.8, 1.0] {
        // pure reasoning with success rate c is the ideal model: correct
        // content w.p. c, each distractor w.p. (1 - c)/3
        let mut spec = agent(StrategyMix::new(0.0, 1.0, 0.0));
        spec.reasoning_success = c;
        let cohort = SyntheticCohort::uniform(spec);
        let obs = balanced_obs(&ds, &cohort, 10_000, 0xca1 + (c * 100.0) as u64, exec)?;
        let pt = &entropy_accuracy_points(&obs, 4, EntropyReading::ContentAligned)?[0];
        let h_c = ideal_entropy(c, 4)?;
        checks.push(Check::new(format!("c={c}: |H - H_ideal(c)|"), (pt.entropy_bits - h_c).abs(), Relation::AtMost, 0.01));
        checks.push(Check::new(format!("c={c}: |calibration gap|"), pt.calibration_gap.abs(), Relation::AtMost, 0.01));
    }
    Ok(checks)
}

/// Exclusive-protocol accuracy of a pure memorizer (k = 4, paper-faithful)
/// whose memorized slot is `o_m`.
pub fn memorizer_exclusive_accuracy(theta: f64, anchor_is_memorized: bool) -> f64 {
    if anchor_is_memorized {
        (1.0 - theta) + theta / 4.0
    } else {
        // fixed branch never hits o_m; the randomized branch lands on o_m
        // one time in three
        (1.0 - theta) / 4.0 + theta * (1.0 / 3.0 + (2.0 / 3.0) / 4.0)
    }
}

fn sweep_convergence(exec: Execution) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    // a mixed cohort: every question has its own mixture and memorized slot
    let ds = synthetic_dataset(20, 4)?;
    let mut rng = substream(0x5eed, "sweep-cohort");
    let mut cohort = SyntheticCohort::uniform(agent(StrategyMix::new(0.3, 0.4, 0.3)));
    for q in ds.questions() {
        let mut a = agent(uniform_mix(&mut rng));
        a.o_m = OptionPosition::at(rng.random_range(0..4));
        cohort = cohort.with_question(q.id.clone(), a);
    }
    let mut config = SweepConfig::new(0x5eed);
    config.trials_per_cell = 200;
    let plan = build_sweep_plan(&ds, &config, exec)?;
    let obs = simulate(&plan, &ds, &cohort, exec)?;
    let curves = sweep_curves(&obs, &config.theta_grid);
    let at_one: Vec<(f64, f64)> = curves
        .iter()
        .filter(|c| c.protocol == Protocol::Inclusive)
        .filter_map(|c| c.at(1.0).and_then(|p| p.mean.zip(p.se)))
        .collect();
    let mut worst: f64 = 0.0;
    for (i, a) in at_one.iter().enumerate() {
        for b in &at_one[i + 1..] {
            worst = worst.max((a.0 - b.0).abs() / (a.1.powi(2) + b.1.powi(2)).sqrt());
        }
    }
    checks.push(Check::new("inclusive anchors at theta=1: anchor curves compared", at_one.len() as f64, Relation::AtLeast, 4.0));
    checks.push(Check::new("inclusive anchors at theta=1: max pairwise |diff|/SE", worst, Relation::AtMost, 3.0));
    let mut delta0: f64 = 0.0;
    for inc in curves.iter().filter(|c| c.protocol == Protocol::Inclusive) {
        let exc = curves
            .iter()
            .find(|c| c.protocol == Protocol::Exclusive && c.anchor == inc.anchor)
            .ok_or_else(|| Error::invalid("missing exclusive curve"))?;
        let d = delta_mu(inc, exc)?;
        delta0 = delta0.max(d[0].delta.map_or(f64::NAN, f64::abs));
    }
    checks.push(Check::new("max |delta_mu(0)|", delta0, Relation::AtMost, 0.0));

    // pure paper-faithful memorizer on slot A under the exclusive protocol
    let ds = synthetic_dataset(10, 4)?;
    let cohort = SyntheticCohort::uniform(agent(StrategyMix::new(1.0, 0.0, 0.0)));
    let mut config = SweepConfig::new(0x3e3);
    config.protocols = vec![Protocol::Exclusive];
    config.trials_per_cell = 200;
    let plan = build_sweep_plan(&ds, &config, exec)?;
    let obs = simulate(&plan, &ds, &cohort, exec)?;
    let curves = sweep_curves(&obs, &config.theta_grid);
    let mut worst_memorized: f64 = 0.0;
    let mut worst_other: f64 = 0.0;
    for c in &curves {
        let memorized = c.anchor == OptionPosition::at(0);
        for p in &c.points {
            let expect = memorizer_exclusive_accuracy(p.theta, memorized);
            let sigma = (expect * (1.0 - expect) / p.n as f64).sqrt();
            let dev = (p.mean.unwrap_or(f64::NAN) - expect).abs();
            // a zero-variance cell must match exactly
            let z = if sigma == 0.0 {
                if dev == 0.0 { 0.0 } else { f64::INFINITY }
            } else {
                dev / sigma
            };
            let w = if memorized { &mut worst_memorized } else { &mut worst_other };
            *w = w.max(z);
        }
    }
    checks.push(Check::new("exclusive memorizer, anchor=o_m vs (1-t)+t/4: max |z|", worst_memorized, Relation::AtMost, 3.0));
    checks.push(Check::new("exclusive memorizer, other anchors vs closed form: max |z|", worst_other, Relation::AtMost, 3.0));
    // where the memorized-anchor curve meets the others, from the same data
    let crossing = exclusive_crossing(&curves);
    let closed_form = 0.75;
    checks.push(Check::new(
        "exclusive memorizer crossing vs closed-form theta=0.75, |diff|",
        (crossing - closed_form).abs(),
        Relation::AtMost,
        0.05,
    ));
    Ok(checks)
}

/// Theta where the memorized-anchor curve first drops to the mean of the
/// other anchors, by linear interpolation between grid points.
fn exclusive_crossing(curves: &[crate::metrics::SweepCurve]) -> f64 {
    let Some(mem) = curves.iter().find(|c| c.anchor == OptionPosition::at(0)) else {
        return f64::NAN;
    };
    let others: Vec<_> = curves.iter().filter(|c| c.anchor != OptionPosition::at(0)).collect();
    let gap: Vec<(f64, f64)> = mem
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let rest = others.iter().filter_map(|c| c.points[i].mean).sum::<f64>() / others.len() as f64;
            (p.theta, p.mean.unwrap_or(f64::NAN) - rest)
        })
        .collect();
    gap.windows(2)
        .find(|w| w[0].1 > 0.0 && w[1].1 <= 0.0)
        .map(|w| w[0].0 + (w[1].0 - w[0].0) * w[0].1 / (w[0].1 - w[1].1))
        .unwrap_or(f64::NAN)
}

/// Per-question (delta_alpha, alpha_observed) and the count with raw p_m > 1.
fn cohort_deltas(ds: &Dataset, cohort: &SyntheticCohort, seed: u64, exec: Execution) -> Result<(Vec<(f64, f64)>, usize)> {
    let obs = balanced_obs(ds, cohort, 1000, seed, exec)?;
    let mut out = Vec::new();
    let mut flagged = 0;
    for acc in position_accuracies(&obs, 4)? {
        let est = estimate_question(&acc, OmPolicy::OriginalPosition, OptionPosition::at(0))?;
        flagged += (est.decomposition.raw.p_m > 1.0 + crate::pmm::VIOLATION_TOLERANCE) as usize;
        let v = validate_question(&est, &acc)?;
        out.push((v.delta_alpha, v.alpha_observed));
    }
    Ok((out, flagged))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn misfit(exec: Execution) -> Result<Vec<Check>> {
    let n = 100;
    let ds = synthetic_dataset(n, 4)?;
    let mut rng = substream(0x3157, "misfit-cohort");
    let mut strict = SyntheticCohort::uniform(agent(StrategyMix::new(1.0, 0.0, 0.0)).strict());
    let mut faithful = SyntheticCohort::uniform(agent(StrategyMix::new(1.0, 0.0, 0.0)));
    for q in ds.questions() {
        // memorization-heavy: strict raw p_m = p_m / (1 - 1/k) > 1
        let p_m = rng.random_range(0.85..=1.0);
        let split: f64 = rng.random();
        let mix = StrategyMix::new(p_m, (1.0 - p_m) * split, (1.0 - p_m) * (1.0 - split));
        strict = strict.with_question(q.id.clone(), agent(mix).strict());
        faithful = faithful.with_question(q.id.clone(), agent(mix));
    }
    let (strict_d, flagged) = cohort_deltas(&ds, &strict, 0x3157, exec)?;
    let (faithful_d, _) = cohort_deltas(&ds, &faithful, 0x3157, exec)?;
    let strict_median = median(strict_d.iter().map(|d| d.0).collect());
    // in-simplex estimates reproduce their own accuracies exactly, so this
    // median is zero unless most questions were clamped
    let faithful_median = median(faithful_d.iter().map(|d| d.0).collect());
    let alpha_median = median(strict_d.iter().map(|d| d.1).collect());
    Ok(vec![
        Check::new("strict memorizer: share of questions with raw p_m > 1", flagged as f64 / n as f64, Relation::AtLeast, 0.99),
        Check::new("median delta_alpha strict / paper-faithful", strict_median / faithful_median, Relation::Above, 5.0),
        Check::new("median delta_alpha, strict cohort", strict_median, Relation::Above, 0.0),
        Check::new("median delta_alpha, paper-faithful cohort", faithful_median, Relation::AtLeast, 0.0),
        Check::new("median alpha_observed, strict cohort (low-accuracy regime)", alpha_median, Relation::Below, 0.5),
    ])
}

fn correlation(exec: Execution) -> Result<Vec<Check>> {
    let n = 200;
    let ds = synthetic_dataset(n, 4)?;
    let mut rng = substream(0xc0, "correlation-cohort");
    let mut cohort = SyntheticCohort::uniform(agent(StrategyMix::new(0.3, 0.4, 0.3)));
    for q in ds.questions() {
        cohort = cohort.with_question(q.id.clone(), agent(uniform_mix(&mut rng)));
    }
    let obs = balanced_obs(&ds, &cohort, 250, 0xc0, exec)?;
    let ent = entropy_accuracy_points(&obs, 4, EntropyReading::ContentAligned)?;
    let mut rows = Vec::new();
    for (acc, e) in position_accuracies(&obs, 4)?.iter().zip(&ent) {
        let est = estimate_question(acc, OmPolicy::OriginalPosition, OptionPosition::at(0))?;
        rows.push(StrategyMetrics {
            accuracy: e.accuracy,
            entropy_bits: e.entropy_bits,
            mix: est.mix(),
        });
    }
    let rep = strategy_metric_correlations(&rows, 10_000, 0xc0, exec)?;
    let cell = |m, s| {
        let (r, p) = rep.cell(m, s);
        (r.unwrap_or(f64::NAN), p.unwrap_or(f64::NAN))
    };
    let (r_ar, p_ar) = cell(0, 1);
    let (r_ag, p_ag) = cell(0, 2);
    let (r_er, p_er) = cell(1, 1);
    Ok(vec![
        Check::new("r(accuracy, P_R)", r_ar, Relation::Above, 0.5),
        Check::new("p(accuracy, P_R)", p_ar, Relation::Below, 0.01),
        Check::new("r(accuracy, P_G)", r_ag, Relation::Below, -0.3),
        Check::new("p(accuracy, P_G)", p_ag, Relation::Below, 0.01),
        Check::new("r(entropy, P_R)", r_er, Relation::Below, -0.3),
        Check::new("p(entropy, P_R)", p_er, Relation::Below, 0.01),
    ])
}

/// Lattice components of a Cartesian field sampled at the grid nodes.
fn sample_field(grid: &SimplexGrid, f: impl Fn(f64, f64) -> (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    grid.nodes()
        .map(|(i, j)| {
            let (x, y) = grid.point(i, j).to_cartesian();
            let (vx, vy) = f(x, y);
            let dv = vy / SQRT3_2;
            (vx - 0.5 * dv, dv)
        })
        .unzip()
}

/// RMS Cartesian length of the difference between two lattice fields.
fn rms_diff(a: (&[f64], &[f64]), b: (&[f64], &[f64])) -> f64 {
    let n = a.0.len();
    let sum: f64 = (0..n)
        .map(|i| {
            let (du, dv) = (a.0[i] - b.0[i], a.1[i] - b.1[i]);
            (du + 0.5 * dv).powi(2) + (SQRT3_2 * dv).powi(2)
        })
        .sum();
    (sum / n as f64).sqrt()
}

fn projection(exec: Execution) -> Result<Vec<Check>> {
    let (cx, cy) = (0.5, SQRT3_2 / 3.0);
    let grid = SimplexGrid::new(0.02)?;
    let opts = ProjectionOptions::default();
    let rotation = |x: f64, y: f64| (-(y - cy), x - cx);
    let source = |x: f64, y: f64| (x - cx, y - cy);
    let (ru, rv) = sample_field(&grid, rotation);
    let (su, sv) = sample_field(&grid, source);
    let (mu, mv) = sample_field(&grid, |x, y| {
        let (a, b) = rotation(x, y);
        let (c, d) = source(x, y);
        (a + 0.7 * c, b + 0.7 * d)
    });
    let zeros = vec![0.0; grid.len()];
    let rot = project_divergence_free(&grid, &ru, &rv, &opts, exec)?;
    let src = project_divergence_free(&grid, &su, &sv, &opts, exec)?;
    let mix = project_divergence_free(&grid, &mu, &mv, &opts, exec)?;
    Ok(vec![
        Check::new("rotation passthrough RMS", rms_diff((&rot.du, &rot.dv), (&ru, &rv)), Relation::AtMost, 1e-6),
        Check::new("source annihilation RMS", rms_diff((&src.du, &src.dv), (&zeros, &zeros)), Relation::AtMost, 1e-6),
        Check::new("mixed field solenoidal recovery RMS (h=0.02)", rms_diff((&mix.du, &mix.dv), (&ru, &rv)), Relation::AtMost, 1e-4),
    ])
}

struct ScratchDir(PathBuf);

impl ScratchDir {
    fn new(label: &str) -> Result<Self> {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos());
        let p = std::env::temp_dir().join(format!("strategem-{label}-{}-{nanos}", std::process::id()));
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(ScratchDir(p))
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn file_differs(a: &Path, b: &Path) -> Result<bool> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    Ok(read(a)? != read(b)?)
}

/// Plan, run (whole and interrupted at several points) and analyze the same
/// experiment repeatedly; every repetition must be byte-identical.
pub fn determinism_checks(dir: &Path, exec: Execution) -> Result<Vec<Check>> {
    let ds = synthetic_dataset(8, 4)?;
    let mut sweep = SweepConfig::new(0xd37);
    sweep.trials_per_cell = 10;
    let design = DesignSnapshot {
        balanced: Some(BalancedDesignConfig {
            trials_per_position: 20,
            master_seed: 0xd37,
        }),
        sweep: Some(sweep),
    };
    let plan_a = plan_bytes(&build_plan(&ds, &design, exec)?)?;
    let plan_b = plan_bytes(&build_plan(&ds, &design, Execution::Sequential)?)?;
    let plan = build_plan(&ds, &design, exec)?;
    let manifest = RunManifest::new(&ds, design, 0xd37, OmPolicy::OriginalPosition, &plan)?;
    let hash = manifest.hash();

    let drifting = AgentProfile {
        spec: agent(StrategyMix::new(0.5, 0.2, 0.3)),
        drift_to: Some(StrategyTriple {
            p_m: 0.1,
            p_r: 0.5,
            p_g: 0.4,
        }),
    };
    let mut cohort = SyntheticCohort::uniform(drifting.clone());
    for (i, q) in ds.questions().iter().enumerate() {
        let mut p = drifting.clone();
        p.spec.p_m = 0.5 - 0.05 * i as f64;
        p.spec.p_g = 0.3 + 0.05 * i as f64;
        cohort = cohort.with_question(q.id.clone(), p);
    }

    let full = dir.join("full.jsonl");
    run_plan(&plan, &ds, &cohort, &full, &hash, &RunOptions { exec, stop_after: None })?;

    let mut resume_mismatches = 0;
    let cuts = [0, 1, 997, plan.len() / 2, plan.len() - 1];
    for (n, &cut) in cuts.iter().enumerate() {
        let log = dir.join(format!("resume{n}.jsonl"));
        run_plan(&plan, &ds, &cohort, &log, &hash, &RunOptions { exec, stop_after: Some(cut) })?;
        if n % 2 == 1 {
            // simulate a crash mid-write
            let mut bytes = fs::read(&log).map_err(|e| Error::io(&log, e))?;
            bytes.extend_from_slice(b"{\"trial_id\":\"torn");
            fs::write(&log, bytes).map_err(|e| Error::io(&log, e))?;
        }
        let seq = RunOptions {
            exec: Execution::Sequential,
            stop_after: None,
        };
        run_plan(&plan, &ds, &cohort, &log, &hash, &seq)?;
        resume_mismatches += file_differs(&full, &log)? as usize;
    }

    let records = read_log(&full)?;
    let opts = AnalyzeOptions {
        permutations: 999,
        exec,
        ..Default::default()
    };
    let first = analyze(&manifest, &ds, &plan, &records, &opts)?;
    let second = analyze(&manifest, &ds, &plan, &records, &opts)?;
    let mut shuffled = records.clone();
    shuffled.shuffle(&mut substream(0xd37, "shuffle"));
    let third = analyze(&manifest, &ds, &plan, &shuffled, &AnalyzeOptions { exec: Execution::Sequential, ..opts })?;
    let bundle_mismatches = (first != second) as usize + (first != third) as usize;

    Ok(vec![
        Check::new("plan rebuilds differing from the first", (plan_a != plan_b) as usize as f64, Relation::AtMost, 0.0),
        Check::new(
            format!("resumed logs differing from an uninterrupted run (of {})", cuts.len()),
            resume_mismatches as f64,
            Relation::AtMost,
            0.0,
        ),
        Check::new("report bundles differing (repeat, shuffled logs)", bundle_mismatches as f64, Relation::AtMost, 0.0),
        Check::new("report files produced", first.files.len() as f64, Relation::AtLeast, 14.0),
    ])
}

fn determinism(exec: Execution) -> Result<Vec<Check>> {
    let dir = ScratchDir::new("synthbench")?;
    determinism_checks(&dir.0, exec)
}
