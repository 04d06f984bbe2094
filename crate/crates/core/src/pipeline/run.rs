use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::Serialize;

use super::{TrialLogRecord, TrialStatus};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::jsonl;
use crate::metrics::Observation;
use crate::model::{Dataset, TrialOutcome, TrialSpec};
use crate::respondents::{RespondError, Respondent};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub exec: Execution,
    /// Stop after this many new trials, leaving the rest for a later resume.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub total: usize,
    pub previously_logged: usize,
    pub executed: usize,
    pub remaining: usize,
    pub scored: usize,
    pub parse_failures: usize,
    pub transport_failures: usize,
    pub respondent: serde_json::Value,
}

impl RunReport {
    pub fn complete(&self) -> bool {
        self.remaining == 0
    }
}

fn execute(
    spec: &TrialSpec,
    dataset: &Dataset,
    respondent: &dyn Respondent,
    manifest_hash: &str,
) -> Result<TrialLogRecord> {
    let question = dataset
        .get(&spec.question_id)
        .ok_or_else(|| Error::UnknownQuestion(spec.question_id.clone()))?;
    let mut rec = TrialLogRecord {
        spec: spec.clone(),
        status: TrialStatus::Scored,
        selected_position: None,
        selected_role: None,
        raw_response: None,
        latency_ms: None,
        error: None,
        manifest_hash: manifest_hash.to_string(),
    };
    match respondent.respond(question, spec) {
        Ok(resp) => {
            let outcome = TrialOutcome::from_selection(
                spec,
                resp.selected_position,
                resp.raw_response,
                resp.latency_ms,
            );
            rec.selected_position = Some(outcome.selected_position);
            rec.selected_role = Some(outcome.selected_role);
            rec.raw_response = outcome.raw_response;
            rec.latency_ms = outcome.latency_ms;
        }
        Err(e) => {
            rec.status = match e {
                RespondError::Parse { .. } => TrialStatus::ParseFailure,
                _ => TrialStatus::TransportFailure,
            };
            rec.raw_response = e.raw_response().map(str::to_string);
            rec.error = Some(e.to_string());
        }
    }
    Ok(rec)
}

/// Execute every planned trial not yet in the log, appending records in plan
/// order.
///
/// Trials run concurrently up to the respondent's `max_in_flight`; finished
/// records wait in a reorder buffer so the file is always a plan-order prefix
/// of the outstanding trials. An interrupted run therefore resumes into a log
/// byte-identical to an uninterrupted one.
pub fn run_plan(
    plan: &[TrialSpec],
    dataset: &Dataset,
    respondent: &dyn Respondent,
    log_path: &Path,
    manifest_hash: &str,
    opts: &RunOptions,
) -> Result<RunReport> {
    let existing: Vec<TrialLogRecord> = jsonl::read_records_repairing(log_path)?;
    let planned: HashSet<&str> = plan.iter().map(|t| t.trial_id.as_str()).collect();
    let mut counts: HashMap<TrialStatus, usize> = HashMap::new();
    let mut done: HashSet<&str> = HashSet::with_capacity(existing.len());
    for rec in &existing {
        if rec.manifest_hash != manifest_hash {
            return Err(Error::ManifestMismatch {
                expected: manifest_hash.to_string(),
                found: rec.manifest_hash.clone(),
            });
        }
        if !planned.contains(rec.spec.trial_id.as_str()) {
            return Err(Error::PlanMismatch(format!(
                "logged trial `{}` is not in the plan",
                rec.spec.trial_id
            )));
        }
        if !done.insert(&rec.spec.trial_id) {
            return Err(Error::PlanMismatch(format!(
                "trial `{}` is logged twice",
                rec.spec.trial_id
            )));
        }
        *counts.entry(rec.status).or_default() += 1;
    }

    let mut pending: Vec<&TrialSpec> = plan
        .iter()
        .filter(|t| !done.contains(t.trial_id.as_str()))
        .collect();
    let outstanding = pending.len();
    if let Some(limit) = opts.stop_after {
        pending.truncate(limit);
    }

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log_path)
        .map_err(|e| Error::io(log_path, e))?;
    let mut writer = BufWriter::new(file);

    let workers = if !opts.exec.is_parallel() {
        1
    } else {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        match respondent.max_in_flight() {
            usize::MAX => cores,
            m => m,
        }
    }
    .min(pending.len())
    .max(1);

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<TrialLogRecord>)>();
    let write_result: Result<()> = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(spec) = pending.get(i) else { break };
                let rec = execute(spec, dataset, respondent, manifest_hash);
                let failed = rec.is_err();
                if tx.send((i, rec)).is_err() || failed {
                    // stop handing out work; the writer reports the error
                    next.store(usize::MAX / 2, Ordering::Relaxed);
                    break;
                }
            });
        }
        drop(tx);

        let mut buffer: BTreeMap<usize, TrialLogRecord> = BTreeMap::new();
        let mut expected = 0;
        for (i, rec) in rx {
            buffer.insert(i, rec?);
            while let Some(rec) = buffer.remove(&expected) {
                writer
                    .write_all(jsonl::to_line(&rec)?.as_bytes())
                    .map_err(|e| Error::io(log_path, e))?;
                *counts.entry(rec.status).or_default() += 1;
                expected += 1;
            }
        }
        writer.flush().map_err(|e| Error::io(log_path, e))
    });
    write_result?;

    let executed = pending.len();
    Ok(RunReport {
        total: plan.len(),
        previously_logged: existing.len(),
        executed,
        remaining: outstanding - executed,
        scored: counts.get(&TrialStatus::Scored).copied().unwrap_or(0),
        parse_failures: counts.get(&TrialStatus::ParseFailure).copied().unwrap_or(0),
        transport_failures: counts.get(&TrialStatus::TransportFailure).copied().unwrap_or(0),
        respondent: respondent.describe(),
    })
}

/// Run a plan in memory and return observations for the scored trials.
pub fn simulate(
    plan: &[TrialSpec],
    dataset: &Dataset,
    respondent: &dyn Respondent,
    exec: Execution,
) -> Result<Vec<Observation>> {
    let recs = exec::map(exec, plan, |spec| execute(spec, dataset, respondent, ""));
    let mut out = Vec::with_capacity(plan.len());
    for (spec, rec) in plan.iter().zip(recs) {
        if let Some(outcome) = rec?.outcome() {
            out.push(Observation::new(spec, &outcome));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OptionPosition, Question};
    use crate::pipeline::{build_plan, DesignSnapshot};
    use crate::randomization::BalancedDesignConfig;
    use crate::respondents::{Response, SyntheticAgentSpec, SyntheticCohort};

    fn dataset() -> Dataset {
        Dataset::new(
            (0..5)
                .map(|i| Question {
                    id: format!("q{i}"),
                    stem: "s".into(),
                    correct_content: "c".into(),
                    distractor_contents: vec!["x".into(), "y".into(), "z".into()],
                    original_correct_position: OptionPosition::at(0),
                })
                .collect(),
        )
        .unwrap()
    }

    fn plan(ds: &Dataset) -> Vec<TrialSpec> {
        let design = DesignSnapshot {
            balanced: Some(BalancedDesignConfig {
                trials_per_position: 20,
                master_seed: 5,
            }),
            sweep: None,
        };
        build_plan(ds, &design, Execution::Sequential).unwrap()
    }

    fn cohort() -> SyntheticCohort {
        SyntheticCohort::uniform(SyntheticAgentSpec::new(0.3, 0.4, 0.3, OptionPosition::at(0)))
    }

    #[test]
    fn synthetic_run_scores_everything() {
        let ds = dataset();
        let plan = plan(&ds);
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.jsonl");
        let rep = run_plan(&plan, &ds, &cohort(), &log, "m", &RunOptions::default()).unwrap();
        assert_eq!((rep.total, rep.scored, rep.executed), (400, 400, 400));
        assert!(rep.complete());
        let again = run_plan(&plan, &ds, &cohort(), &log, "m", &RunOptions::default()).unwrap();
        assert_eq!((again.executed, again.previously_logged), (0, 400));
        assert!(matches!(
            run_plan(&plan, &ds, &cohort(), &log, "other", &RunOptions::default()),
            Err(Error::ManifestMismatch { .. })
        ));
    }

    #[test]
    fn resumed_log_matches_uninterrupted() {
        let ds = dataset();
        let plan = plan(&ds);
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.jsonl");
        run_plan(&plan, &ds, &cohort(), &full, "m", &RunOptions::default()).unwrap();

        let part = dir.path().join("part.jsonl");
        let stop = RunOptions {
            stop_after: Some(200),
            exec: Execution::Parallel,
        };
        let r = run_plan(&plan, &ds, &cohort(), &part, "m", &stop).unwrap();
        assert_eq!((r.executed, r.remaining), (200, 200));
        // a torn final write is discarded on resume
        let mut f = OpenOptions::new().append(true).open(&part).unwrap();
        f.write_all(b"{\"trial_id\":\"tor").unwrap();
        drop(f);
        let seq = RunOptions {
            exec: Execution::Sequential,
            ..Default::default()
        };
        let r = run_plan(&plan, &ds, &cohort(), &part, "m", &seq).unwrap();
        assert_eq!((r.executed, r.remaining), (200, 0));
        assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&part).unwrap());
    }

    struct Flaky;
    impl Respondent for Flaky {
        fn respond(&self, _: &Question, t: &TrialSpec) -> Result<Response, RespondError> {
            match t.replicate % 3 {
                0 => Err(RespondError::Transport("reset".into())),
                1 => Err(RespondError::Parse {
                    failure: crate::respondents::ParseFailure::NoLetter,
                    raw: "dunno".into(),
                }),
                _ => Ok(Response {
                    selected_position: OptionPosition::at(1),
                    raw_response: Some("B".into()),
                    latency_ms: Some(3),
                }),
            }
        }
        fn max_in_flight(&self) -> usize {
            4
        }
        fn describe(&self) -> serde_json::Value {
            serde_json::json!("flaky")
        }
    }

    #[test]
    fn failures_become_records() {
        let ds = dataset();
        let plan = plan(&ds);
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.jsonl");
        let rep = run_plan(&plan, &ds, &Flaky, &log, "m", &RunOptions::default()).unwrap();
        assert_eq!(rep.scored + rep.parse_failures + rep.transport_failures, 400);
        assert!(rep.parse_failures > 0 && rep.transport_failures > 0);
        let recs = super::super::read_log(&log).unwrap();
        for r in &recs {
            r.validate().unwrap();
        }
        let parse = recs.iter().find(|r| r.status == TrialStatus::ParseFailure).unwrap();
        assert_eq!(parse.raw_response.as_deref(), Some("dunno"));
    }
}
