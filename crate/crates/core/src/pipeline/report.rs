use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::{RunManifest, TrialLogRecord, TrialStatus};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fields::{
    ensemble_average_flow, finite_difference_flow, interpolate_flow, interpolate_scalar,
    trajectories, FlowField, ProjectionOptions, ScalarField, ScalarKind, SimplexPoint,
};
use crate::itc::{
    entropy_accuracy_points, frontier_grid, strategy_metric_correlations, EntropyAccuracyPoint,
    EntropyReading, StrategyMetrics, DEFAULT_PERMUTATIONS,
};
use crate::metrics::{
    canonical_sort, delta_mu, difficulty_map, position_accuracies, position_accuracy, sweep_curves,
    wrong_answer_distribution, Observation, PositionAccuracy,
};
use crate::model::{Dataset, OptionPosition, Protocol, TrialSpec};
use crate::pmm::{
    estimate_question, theta_resolved_estimates, validate_question, OmPolicy, StrategyEstimate,
    ThetaEstimate, ValidationRecord, DEFAULT_MIN_CELL_COUNT,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOptions {
    pub h: f64,
    /// Average flow vectors over questions at each theta before interpolating.
    pub ensemble_prepass: bool,
    pub projection: ProjectionOptions,
}

impl Default for FieldOptions {
    fn default() -> Self {
        FieldOptions {
            h: 0.05,
            ensemble_prepass: false,
            projection: ProjectionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    pub allow_partial: bool,
    /// Overrides the manifest's policy.
    pub om_policy: Option<OmPolicy>,
    pub permutations: usize,
    /// Defaults to the manifest's master seed.
    pub correlation_seed: Option<u64>,
    pub entropy_reading: EntropyReading,
    pub min_cell_count: u64,
    pub fields: FieldOptions,
    pub exec: Execution,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            allow_partial: false,
            om_policy: None,
            permutations: DEFAULT_PERMUTATIONS,
            correlation_seed: None,
            entropy_reading: EntropyReading::default(),
            min_cell_count: DEFAULT_MIN_CELL_COUNT,
            fields: FieldOptions::default(),
            exec: Execution::default(),
        }
    }
}

/// Report files by name. Every file names the manifest hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Bundle {
    pub fn summary(&self) -> Result<Value> {
        let bytes = self
            .files
            .get("summary.json")
            .ok_or_else(|| Error::invalid("bundle has no summary"))?;
        serde_json::from_slice(bytes).map_err(|e| Error::json("summary.json", e))
    }
}

pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in &bundle.files {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn num(x: f64) -> String {
    // Display is the shortest representation that parses back exactly
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn csv_file(hash: &str, header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = format!("# manifest={hash}\n").into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    out.extend(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?);
    Ok(out)
}

fn json_file<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::json("report", e))?;
    v.push(b'\n');
    Ok(v)
}

fn labels(k: usize, prefix: &str) -> Vec<String> {
    OptionPosition::all(k).map(|p| format!("{prefix}{}", p.label())).collect()
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Checked, de-duplicated, canonically ordered view of the logs.
struct Prepared<'a> {
    hash: String,
    k: usize,
    manifest: &'a RunManifest,
    dataset: &'a Dataset,
    obs: Vec<Observation>,
    planned: usize,
    logged: usize,
    status: BTreeMap<TrialStatus, usize>,
}

fn prepare<'a>(
    manifest: &'a RunManifest,
    dataset: &'a Dataset,
    plan: &[TrialSpec],
    records: &[TrialLogRecord],
    allow_partial: bool,
) -> Result<Prepared<'a>> {
    manifest.check_dataset(dataset)?;
    manifest.check_plan(plan)?;
    let hash = manifest.hash();
    let by_id: HashMap<&str, &TrialSpec> = plan.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let mut seen: HashMap<&str, &TrialLogRecord> = HashMap::with_capacity(records.len());
    for rec in records {
        if rec.manifest_hash != hash {
            return Err(Error::ManifestMismatch {
                expected: hash,
                found: rec.manifest_hash.clone(),
            });
        }
        rec.validate()?;
        let id = rec.spec.trial_id.as_str();
        match by_id.get(id) {
            Some(spec) if **spec == rec.spec => {}
            Some(_) => {
                return Err(Error::PlanMismatch(format!("logged trial `{id}` differs from its plan entry")))
            }
            None => return Err(Error::PlanMismatch(format!("logged trial `{id}` is not in the plan"))),
        }
        if let Some(prev) = seen.insert(id, rec) {
            if prev != rec {
                return Err(Error::PlanMismatch(format!("trial `{id}` is logged twice with different outcomes")));
            }
        }
    }
    let missing = plan.len() - seen.len();
    if missing > 0 && !allow_partial {
        return Err(Error::PartialLog {
            missing,
            total: plan.len(),
        });
    }
    let mut status = BTreeMap::new();
    let mut obs = Vec::new();
    for rec in seen.values() {
        *status.entry(rec.status).or_insert(0) += 1;
        if let Some(outcome) = rec.outcome() {
            obs.push(Observation::new(&rec.spec, &outcome));
        }
    }
    canonical_sort(&mut obs);
    Ok(Prepared {
        hash,
        k: manifest.k,
        manifest,
        dataset,
        obs,
        planned: plan.len(),
        logged: seen.len(),
        status,
    })
}

/// Questions whose static trials cover every position equally often.
fn balanced_static(obs: &[Observation], k: usize) -> (Vec<Observation>, Vec<String>) {
    let mut placed: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for o in obs {
        placed.entry(&o.question_id).or_insert_with(|| vec![0; k])[o.correct_position.index()] += 1;
    }
    let unbalanced: BTreeSet<&str> = placed
        .iter()
        .filter(|(_, c)| c.iter().any(|&n| n != c[0]))
        .map(|(q, _)| *q)
        .collect();
    let kept = obs
        .iter()
        .filter(|o| !unbalanced.contains(o.question_id.as_str()))
        .cloned()
        .collect();
    (kept, unbalanced.into_iter().map(str::to_string).collect())
}

struct Balanced {
    accuracies: Vec<PositionAccuracy>,
    estimates: Vec<(StrategyEstimate, ValidationRecord)>,
    entropy: Vec<EntropyAccuracyPoint>,
    unbalanced: Vec<String>,
    undefined: usize,
    accuracy: Option<f64>,
}

fn balanced_analysis(p: &Prepared, policy: OmPolicy, reading: EntropyReading) -> Result<Balanced> {
    let static_obs: Vec<Observation> = p
        .obs
        .iter()
        .filter(|o| o.protocol == Protocol::Static)
        .cloned()
        .collect();
    let accuracies = position_accuracies(&static_obs, p.k)?;
    let mut estimates = Vec::new();
    let mut undefined = 0;
    for acc in &accuracies {
        let original = p
            .dataset
            .get(&acc.question_id)
            .ok_or_else(|| Error::UnknownQuestion(acc.question_id.clone()))?
            .original_correct_position;
        match estimate_question(acc, policy, original) {
            Ok(est) => {
                let v = validate_question(&est, acc)?;
                estimates.push((est, v));
            }
            Err(Error::Undefined(_)) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    let (kept, unbalanced) = balanced_static(&static_obs, p.k);
    let entropy = entropy_accuracy_points(&kept, p.k, reading)?;
    let accuracy = (!static_obs.is_empty()).then(|| {
        static_obs.iter().filter(|o| o.is_correct()).count() as f64 / static_obs.len() as f64
    });
    Ok(Balanced {
        accuracies,
        estimates,
        entropy,
        unbalanced,
        undefined,
        accuracy,
    })
}

/// o_m per question: from the balanced estimate when there is one, else the
/// policy applied to whatever sweep data exists.
fn memorized_positions(p: &Prepared, bal: &Balanced, policy: OmPolicy) -> BTreeMap<String, OptionPosition> {
    let mut out: BTreeMap<String, OptionPosition> = bal
        .estimates
        .iter()
        .map(|(e, _)| (e.question_id.clone(), e.o_m))
        .collect();
    for q in p.dataset.questions() {
        if out.contains_key(&q.id) {
            continue;
        }
        let mut o_m = q.original_correct_position;
        if policy == OmPolicy::ArgmaxAccuracy {
            // fully randomized inclusive trials visit every position
            let top = p
                .obs
                .iter()
                .filter(|o| o.question_id == q.id && o.protocol == Protocol::Inclusive)
                .map(|o| o.theta)
                .fold(f64::NEG_INFINITY, f64::max);
            let cell: Vec<&Observation> = p
                .obs
                .iter()
                .filter(|o| o.question_id == q.id && o.protocol == Protocol::Inclusive && o.theta == top)
                .collect();
            if let Ok(acc) = position_accuracy(&cell, p.k) {
                if let Ok(pos) = crate::pmm::select_memorized_position(&acc, policy, o_m) {
                    o_m = pos;
                }
            }
        }
        out.insert(q.id.clone(), o_m);
    }
    out
}

fn theta_resolved(
    p: &Prepared,
    memorized: &BTreeMap<String, OptionPosition>,
    min_count: u64,
) -> Result<Vec<(Protocol, OptionPosition, crate::pmm::ThetaResolved)>> {
    let Some(sweep) = &p.manifest.design.sweep else {
        return Ok(Vec::new());
    };
    let anchors: Vec<OptionPosition> = if sweep.anchor_positions.is_empty() {
        OptionPosition::all(p.k).collect()
    } else {
        sweep.anchor_positions.clone()
    };
    let mut out = Vec::new();
    for &protocol in &sweep.protocols {
        for &anchor in &anchors {
            let r = theta_resolved_estimates(
                &p.obs,
                protocol,
                anchor,
                &sweep.theta_grid,
                memorized,
                p.k,
                min_count,
            )?;
            out.push((protocol, anchor, r));
        }
    }
    Ok(out)
}

fn node_columns(f: &ScalarField, idx: usize, i: usize, j: usize) -> Vec<String> {
    let pt = f.grid.point(i, j);
    let (x, y) = pt.to_cartesian();
    vec![num(pt.p_m), num(pt.p_r), num(pt.p_g), num(x), num(y), num(f.values[idx])]
}

fn flow_rows(f: &FlowField) -> Vec<Vec<String>> {
    f.grid
        .nodes()
        .enumerate()
        .map(|(idx, (i, j))| {
            let pt = f.grid.point(i, j);
            let (x, y) = pt.to_cartesian();
            let t = f.tangent(idx);
            let (vx, vy) = f.cartesian(idx);
            vec![
                num(pt.p_m),
                num(pt.p_r),
                num(pt.p_g),
                num(x),
                num(y),
                num(t[0]),
                num(t[1]),
                num(t[2]),
                num(vx),
                num(vy),
                opt(f.divergence_residual[idx]),
            ]
        })
        .collect()
}

fn field_files(
    p: &Prepared,
    resolved: &[(Protocol, OptionPosition, crate::pmm::ThetaResolved)],
    bal: &Balanced,
    opts: &FieldOptions,
    exec: Execution,
    files: &mut BTreeMap<String, Vec<u8>>,
) -> Result<Value> {
    let mut notes = Vec::new();

    let mut traj_rows = Vec::new();
    for (protocol, anchor, r) in resolved {
        let ests: Vec<ThetaEstimate> = r.estimates.clone();
        let trajs = match trajectories(&ests) {
            Ok(t) => t,
            Err(e) => {
                notes.push(json!({"protocol": protocol, "anchor": anchor, "skipped": e.to_string()}));
                continue;
            }
        };
        for t in &trajs {
            for (theta, pt) in &t.points {
                traj_rows.push(vec![
                    t.question_id.clone(),
                    protocol.to_string(),
                    anchor.to_string(),
                    num(*theta),
                    num(pt.p_m),
                    num(pt.p_r),
                    num(pt.p_g),
                ]);
            }
        }
        let mut samples = finite_difference_flow(&trajs)?;
        if opts.ensemble_prepass {
            samples = ensemble_average_flow(&samples);
        }
        match interpolate_flow(&samples, opts.h, &opts.projection, exec) {
            Ok(field) => {
                files.insert(
                    format!("flow_{protocol}_{anchor}.csv"),
                    csv_file(
                        &p.hash,
                        &header(&[
                            "p_m", "p_r", "p_g", "x", "y", "dp_m", "dp_r", "dp_g", "vx", "vy",
                            "divergence_residual",
                        ]),
                        &flow_rows(&field),
                    )?,
                );
                notes.push(json!({
                    "protocol": protocol,
                    "anchor": anchor,
                    "samples": samples.len(),
                    "solver": field.stats,
                    "max_interior_residual": field.max_interior_residual(),
                }));
            }
            Err(e @ (Error::Degenerate(_) | Error::Invalid(_))) => {
                notes.push(json!({"protocol": protocol, "anchor": anchor, "skipped": e.to_string()}));
            }
            Err(e) => return Err(e),
        }
    }
    if !resolved.is_empty() {
        files.insert(
            "trajectories.csv".into(),
            csv_file(
                &p.hash,
                &header(&["question_id", "protocol", "anchor", "theta", "p_m", "p_r", "p_g"]),
                &traj_rows,
            )?,
        );
    }

    let mut scalar_notes = Vec::new();
    let entropy_by_q: HashMap<&str, &EntropyAccuracyPoint> =
        bal.entropy.iter().map(|e| (e.question_id.as_str(), e)).collect();
    let mut acc_samples = Vec::new();
    let mut ent_samples = Vec::new();
    for (est, _) in &bal.estimates {
        if let Some(e) = entropy_by_q.get(est.question_id.as_str()) {
            let pt = SimplexPoint::from(est.mix());
            acc_samples.push((pt, e.accuracy));
            ent_samples.push((pt, e.entropy_bits));
        }
    }
    for (kind, samples, name) in [
        (ScalarKind::Accuracy, &acc_samples, "accuracy_field.csv"),
        (ScalarKind::Entropy { k: p.k }, &ent_samples, "entropy_field.csv"),
    ] {
        if samples.is_empty() {
            continue;
        }
        let f = interpolate_scalar(samples, kind, opts.h, exec)?;
        let rows: Vec<Vec<String>> = f
            .grid
            .nodes()
            .enumerate()
            .map(|(idx, (i, j))| node_columns(&f, idx, i, j))
            .collect();
        files.insert(
            name.into(),
            csv_file(&p.hash, &header(&["p_m", "p_r", "p_g", "x", "y", "value"]), &rows)?,
        );
        scalar_notes.push(json!({"field": kind.name(), "samples": samples.len()}));
    }

    Ok(json!({
        "method": "inverse-distance weighting (power 2) followed by a discrete Helmholtz projection",
        "h": opts.h,
        "ensemble_prepass": opts.ensemble_prepass,
        "flows": notes,
        "scalars": scalar_notes,
    }))
}

/// Field files only (trajectories, flows, scalar fields).
pub fn compute_fields(
    manifest: &RunManifest,
    dataset: &Dataset,
    plan: &[TrialSpec],
    records: &[TrialLogRecord],
    opts: &AnalyzeOptions,
) -> Result<Bundle> {
    let p = prepare(manifest, dataset, plan, records, opts.allow_partial)?;
    let policy = opts.om_policy.unwrap_or(manifest.om_policy);
    let bal = balanced_analysis(&p, policy, opts.entropy_reading)?;
    let memorized = memorized_positions(&p, &bal, policy);
    let resolved = theta_resolved(&p, &memorized, opts.min_cell_count)?;
    let mut files = BTreeMap::new();
    let notes = field_files(&p, &resolved, &bal, &opts.fields, opts.exec, &mut files)?;
    files.insert(
        "fields.json".into(),
        json_file(&json!({"manifest_hash": p.hash, "fields": notes}))?,
    );
    Ok(Bundle { files })
}

/// Build the full report bundle. Output depends only on the set of log
/// records, not their order.
pub fn analyze(
    manifest: &RunManifest,
    dataset: &Dataset,
    plan: &[TrialSpec],
    records: &[TrialLogRecord],
    opts: &AnalyzeOptions,
) -> Result<Bundle> {
    let p = prepare(manifest, dataset, plan, records, opts.allow_partial)?;
    let k = p.k;
    let hash = p.hash.clone();
    let policy = opts.om_policy.unwrap_or(manifest.om_policy);
    let mut files = BTreeMap::new();

    // positions.csv over every (question, protocol, theta)
    let all_acc = position_accuracies(&p.obs, k)?;
    let mut h = header(&["question_id", "protocol", "theta"]);
    h.extend(labels(k, "alpha_"));
    h.extend(labels(k, "n_"));
    let rows: Vec<Vec<String>> = all_acc
        .iter()
        .map(|a| {
            let mut r = vec![a.question_id.clone(), a.protocol.to_string(), num(a.theta)];
            r.extend(a.alpha.iter().map(|x| opt(*x)));
            r.extend(a.counts.iter().map(|n| n.to_string()));
            r
        })
        .collect();
    files.insert("positions.csv".into(), csv_file(&hash, &h, &rows)?);

    let bal = balanced_analysis(&p, policy, opts.entropy_reading)?;

    let rows: Vec<Vec<String>> = bal
        .accuracies
        .iter()
        .filter_map(|a| difficulty_map(a).ok())
        .map(|d| vec![d.question_id, num(d.mu), num(d.sigma2), d.region.as_str().into()])
        .collect();
    files.insert(
        "difficulty.csv".into(),
        csv_file(&hash, &header(&["question_id", "mu", "sigma2", "region"]), &rows)?,
    );

    let static_obs: Vec<Observation> = p
        .obs
        .iter()
        .filter(|o| o.protocol == Protocol::Static)
        .cloned()
        .collect();
    let wm = wrong_answer_distribution(&static_obs, k);
    let mut h = header(&["correct_position", "total", "alpha"]);
    h.extend(labels(k, "pi_"));
    let rows: Vec<Vec<String>> = wm
        .rows
        .iter()
        .flatten()
        .map(|r| {
            let mut row = vec![r.correct_position.to_string(), r.total.to_string(), num(r.alpha)];
            row.extend(OptionPosition::all(k).map(|o| opt(r.wrong(o))));
            row
        })
        .collect();
    files.insert("wrong_matrix.csv".into(), csv_file(&hash, &h, &rows)?);

    let grid = manifest
        .design
        .sweep
        .as_ref()
        .map(|s| s.theta_grid.clone())
        .unwrap_or_default();
    let curves = sweep_curves(&p.obs, &grid);
    let rows: Vec<Vec<String>> = curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(move |pt| {
                vec![
                    c.protocol.to_string(),
                    c.anchor.to_string(),
                    num(pt.theta),
                    pt.n.to_string(),
                    opt(pt.mean),
                    opt(pt.var),
                    opt(pt.se),
                    opt(pt.question_var),
                ]
            })
        })
        .collect();
    files.insert(
        "sweeps.csv".into(),
        csv_file(
            &hash,
            &header(&["protocol", "anchor", "theta", "n", "mean", "var", "se", "question_var"]),
            &rows,
        )?,
    );

    let mut rows = Vec::new();
    for inc in curves.iter().filter(|c| c.protocol == Protocol::Inclusive) {
        if let Some(exc) = curves
            .iter()
            .find(|c| c.protocol == Protocol::Exclusive && c.anchor == inc.anchor)
        {
            for d in delta_mu(inc, exc)? {
                rows.push(vec![inc.anchor.to_string(), num(d.theta), opt(d.delta)]);
            }
        }
    }
    files.insert(
        "delta_mu.csv".into(),
        csv_file(&hash, &header(&["anchor", "theta", "delta"]), &rows)?,
    );

    let rows: Vec<Vec<String>> = bal
        .estimates
        .iter()
        .map(|(e, v)| {
            let d = &e.decomposition;
            vec![
                e.question_id.clone(),
                e.o_m.to_string(),
                e.policy.as_str().into(),
                num(d.a_om),
                num(d.a_other),
                num(d.raw.p_m),
                num(d.raw.p_r),
                num(d.raw.p_g),
                num(d.mix.p_m),
                num(d.mix.p_r),
                num(d.mix.p_g),
                d.violation.p_m_out_of_range.to_string(),
                d.violation.p_r_negative.to_string(),
                d.violation.p_g_negative.to_string(),
                d.clamped.to_string(),
                num(v.alpha_observed),
                num(v.alpha_expected),
                num(v.delta_alpha),
            ]
        })
        .collect();
    files.insert(
        "strategy.csv".into(),
        csv_file(
            &hash,
            &header(&[
                "question_id", "o_m", "policy", "a_om", "a_other", "p_m_raw", "p_r_raw", "p_g_raw",
                "p_m", "p_r", "p_g", "p_m_out_of_range", "p_r_negative", "p_g_negative", "clamped",
                "alpha_observed", "alpha_expected", "delta_alpha",
            ]),
            &rows,
        )?,
    );

    let memorized = memorized_positions(&p, &bal, policy);
    let resolved = theta_resolved(&p, &memorized, opts.min_cell_count)?;
    let rows: Vec<Vec<String>> = resolved
        .iter()
        .flat_map(|(protocol, anchor, r)| {
            r.curve.points.iter().map(move |pt| {
                vec![
                    protocol.to_string(),
                    anchor.to_string(),
                    num(pt.theta),
                    pt.n_questions.to_string(),
                    num(pt.mu_m),
                    num(pt.mu_r),
                    num(pt.mu_g),
                    num(pt.sd_m),
                    num(pt.sd_r),
                    num(pt.sd_g),
                    num(pt.violation_rate),
                    pt.low_confidence.to_string(),
                ]
            })
        })
        .collect();
    files.insert(
        "ensemble.csv".into(),
        csv_file(
            &hash,
            &header(&[
                "protocol", "anchor", "theta", "n_questions", "mu_m", "mu_r", "mu_g", "sd_m",
                "sd_r", "sd_g", "violation_rate", "low_confidence",
            ]),
            &rows,
        )?,
    );

    let mut h = header(&["question_id", "accuracy", "entropy_bits", "ideal_bits", "gap", "n_correct"]);
    h.extend((1..k).map(|i| format!("n_distractor_{i}")));
    let rows: Vec<Vec<String>> = bal
        .entropy
        .iter()
        .map(|e| {
            let mut r = vec![
                e.question_id.clone(),
                num(e.accuracy),
                num(e.entropy_bits),
                num(e.ideal_entropy_bits),
                num(e.calibration_gap),
            ];
            r.extend(e.selection_counts.iter().map(|n| n.to_string()));
            r
        })
        .collect();
    files.insert("entropy.csv".into(), csv_file(&hash, &h, &rows)?);

    let entropy_by_q: HashMap<&str, &EntropyAccuracyPoint> =
        bal.entropy.iter().map(|e| (e.question_id.as_str(), e)).collect();
    let metric_rows: Vec<StrategyMetrics> = bal
        .estimates
        .iter()
        .filter_map(|(est, _)| {
            entropy_by_q.get(est.question_id.as_str()).map(|e| StrategyMetrics {
                accuracy: e.accuracy,
                entropy_bits: e.entropy_bits,
                mix: est.mix(),
            })
        })
        .collect();
    let seed = opts.correlation_seed.unwrap_or(manifest.master_seed);
    let correlations = match strategy_metric_correlations(&metric_rows, opts.permutations, seed, opts.exec) {
        Ok(rep) => json!({"manifest_hash": hash, "entropy_reading": opts.entropy_reading, "report": rep}),
        Err(e) => json!({"manifest_hash": hash, "n": metric_rows.len(), "error": e.to_string()}),
    };
    files.insert("correlations.json".into(), json_file(&correlations)?);

    let rows: Vec<Vec<String>> = frontier_grid(k, 200)?
        .into_iter()
        .map(|(a, hbits)| vec![k.to_string(), num(a), num(hbits)])
        .collect();
    files.insert(
        "frontier.csv".into(),
        csv_file(&hash, &header(&["k", "accuracy", "ideal_bits"]), &rows)?,
    );

    let field_notes = field_files(&p, &resolved, &bal, &opts.fields, opts.exec, &mut files)?;

    let count = |s: TrialStatus| p.status.get(&s).copied().unwrap_or(0);
    let scored = count(TrialStatus::Scored);
    let parse_failures = count(TrialStatus::ParseFailure);
    let n_est = bal.estimates.len();
    let mean = |f: &dyn Fn(&(StrategyEstimate, ValidationRecord)) -> f64| {
        (n_est > 0).then(|| bal.estimates.iter().map(f).sum::<f64>() / n_est as f64)
    };
    let mut deltas: Vec<f64> = bal.estimates.iter().map(|(_, v)| v.delta_alpha).collect();
    deltas.sort_by(f64::total_cmp);
    let median_delta = (!deltas.is_empty()).then(|| {
        let m = deltas.len() / 2;
        if deltas.len() % 2 == 1 {
            deltas[m]
        } else {
            0.5 * (deltas[m - 1] + deltas[m])
        }
    });
    let overall = (!p.obs.is_empty())
        .then(|| p.obs.iter().filter(|o| o.is_correct()).count() as f64 / p.obs.len() as f64);
    let rates: Vec<f64> = resolved
        .iter()
        .flat_map(|(_, _, r)| r.curve.points.iter().map(|p| p.violation_rate))
        .collect();
    let ensemble_violation = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
    let summary = json!({
        "manifest_hash": hash,
        "manifest_version": manifest.manifest_version,
        "k": k,
        "om_policy": policy.as_str(),
        "entropy_reading": opts.entropy_reading,
        "trials": {
            "planned": p.planned,
            "logged": p.logged,
            "missing": p.planned - p.logged,
            "partial": p.planned != p.logged,
            "scored": scored,
            "parse_failures": parse_failures,
            "transport_failures": count(TrialStatus::TransportFailure),
            "parse_failure_rate": if p.logged > 0 { parse_failures as f64 / p.logged as f64 } else { 0.0 },
        },
        "overall_accuracy": overall,
        "balanced": {
            "questions": bal.accuracies.len(),
            "estimated": n_est,
            "undefined": bal.undefined,
            "unbalanced_questions": bal.unbalanced,
            "accuracy": bal.accuracy,
            "mean_p_m": mean(&|(e, _)| e.mix().p_m),
            "mean_p_r": mean(&|(e, _)| e.mix().p_r),
            "mean_p_g": mean(&|(e, _)| e.mix().p_g),
            "violation_rate": mean(&|(e, _)| e.decomposition.clamped as u8 as f64),
            "median_delta_alpha": median_delta,
            "mean_calibration_gap": (!bal.entropy.is_empty()).then(|| {
                bal.entropy.iter().map(|e| e.calibration_gap).sum::<f64>() / bal.entropy.len() as f64
            }),
        },
        "sweep": {
            "curves": curves.len(),
            "gaps": curves.iter().map(|c| c.gaps().len()).sum::<usize>(),
            "ensemble_violation_rate": ensemble_violation,
        },
        "fields": field_notes,
    });
    files.insert("summary.json".into(), json_file(&summary)?);
    Ok(Bundle { files })
}
