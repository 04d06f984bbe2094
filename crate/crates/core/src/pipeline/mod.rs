//! Files and orchestration: datasets, manifests, plans, trial logs, runs and
//! report bundles.

mod report;
mod run;
mod validate;

pub use report::{analyze, compute_fields, write_bundle, AnalyzeOptions, Bundle, FieldOptions};
pub use run::{run_plan, simulate, RunOptions, RunReport};
pub use validate::{validate_artifact, ArtifactKind};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::jsonl;
use crate::model::{ContentRole, Dataset, OptionPosition, Question, TrialOutcome, TrialSpec};
use crate::pmm::OmPolicy;
use crate::randomization::{build_balanced_plan, build_sweep_plan, BalancedDesignConfig, SweepConfig};
use crate::rng::content_hash;

pub const MANIFEST_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let questions: Vec<Question> = serde_json::from_str(text).map_err(|e| Error::Dataset {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    Dataset::new(questions)
}

/// Hash of the dataset's canonical serialisation, independent of formatting.
pub fn dataset_fingerprint(dataset: &Dataset) -> String {
    let bytes = serde_json::to_vec(dataset.questions()).expect("questions serialise");
    content_hash(&bytes)
}

/// Which trial families a plan contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSnapshot {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced: Option<BalancedDesignConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl DesignSnapshot {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.balanced.is_none() && self.sweep.is_none() {
            return Err(Error::invalid("design selects neither balanced nor sweep trials"));
        }
        if let Some(b) = &self.balanced {
            b.validate()?;
        }
        if let Some(s) = &self.sweep {
            s.validate(k)?;
        }
        Ok(())
    }
}

/// Balanced trials first, then the sweep.
pub fn build_plan(dataset: &Dataset, design: &DesignSnapshot, exec: Execution) -> Result<Vec<TrialSpec>> {
    design.validate(dataset.k())?;
    let mut plan = Vec::new();
    if let Some(b) = &design.balanced {
        plan.extend(build_balanced_plan(dataset, b, exec)?);
    }
    if let Some(s) = &design.sweep {
        plan.extend(build_sweep_plan(dataset, s, exec)?);
    }
    Ok(plan)
}

pub fn plan_bytes(plan: &[TrialSpec]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in plan {
        out.extend_from_slice(jsonl::to_line(t)?.as_bytes());
    }
    Ok(out)
}

pub fn write_plan(path: &Path, plan: &[TrialSpec]) -> Result<String> {
    let bytes = plan_bytes(plan)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

/// Read and check a plan: every spec valid, ids unique.
pub fn read_plan(path: &Path) -> Result<Vec<TrialSpec>> {
    let plan: Vec<TrialSpec> = jsonl::read_records(path)?;
    let mut seen = std::collections::HashSet::with_capacity(plan.len());
    for t in &plan {
        t.validate()?;
        if !seen.insert(t.trial_id.as_str()) {
            return Err(Error::invalid(format!("duplicate trial id `{}` in plan", t.trial_id)));
        }
    }
    Ok(plan)
}

/// Immutable description of one experiment. Everything except `created_at`
/// enters the hash that every downstream artifact carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub dataset_fingerprint: String,
    pub k: usize,
    pub master_seed: u64,
    pub design: DesignSnapshot,
    pub om_policy: OmPolicy,
    pub plan_fingerprint: String,
    pub plan_trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

impl RunManifest {
    pub fn new(
        dataset: &Dataset,
        design: DesignSnapshot,
        master_seed: u64,
        om_policy: OmPolicy,
        plan: &[TrialSpec],
    ) -> Result<Self> {
        Ok(RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            dataset_fingerprint: dataset_fingerprint(dataset),
            k: dataset.k(),
            master_seed,
            design,
            om_policy,
            plan_fingerprint: content_hash(&plan_bytes(plan)?),
            plan_trials: plan.len(),
            created_at: None,
        })
    }

    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.created_at = None;
        content_hash(&serde_json::to_vec(&m).expect("manifest serialises"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::invalid(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.manifest_version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let found = dataset_fingerprint(dataset);
        if found != self.dataset_fingerprint {
            return Err(Error::ManifestMismatch {
                expected: format!("dataset {}", self.dataset_fingerprint),
                found: format!("dataset {found}"),
            });
        }
        Ok(())
    }

    pub fn check_plan(&self, plan: &[TrialSpec]) -> Result<()> {
        let found = content_hash(&plan_bytes(plan)?);
        if found != self.plan_fingerprint {
            return Err(Error::PlanMismatch(format!(
                "plan fingerprint {found} does not match manifest {}",
                self.plan_fingerprint
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Scored,
    ParseFailure,
    TransportFailure,
}

/// One line of a trial log: the planned trial, what happened, and the
/// manifest it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLogRecord {
    #[serde(flatten)]
    pub spec: TrialSpec,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_position: Option<OptionPosition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_role: Option<ContentRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub manifest_hash: String,
}

impl TrialLogRecord {
    /// Scored records must name a position whose role matches the placement;
    /// failures must carry an error.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        match self.status {
            TrialStatus::Scored => {
                let pos = self.selected_position.ok_or_else(|| {
                    Error::invalid(format!("scored trial `{}` has no selection", self.spec.trial_id))
                })?;
                pos.check(self.spec.arrangement.k())?;
                let role = self.spec.arrangement.role_of(pos);
                if self.selected_role != Some(role) {
                    return Err(Error::invalid(format!(
                        "trial `{}` records role {:?} but position {pos} holds {role}",
                        self.spec.trial_id, self.selected_role
                    )));
                }
            }
            _ => {
                if self.error.is_none() {
                    return Err(Error::invalid(format!(
                        "failed trial `{}` carries no error",
                        self.spec.trial_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn outcome(&self) -> Option<TrialOutcome> {
        let selected_position = self.selected_position?;
        Some(TrialOutcome {
            trial_id: self.spec.trial_id.clone(),
            selected_position,
            selected_role: self.selected_role?,
            raw_response: self.raw_response.clone(),
            latency_ms: self.latency_ms,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<TrialLogRecord>> {
    jsonl::read_records(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset_json(n: usize) -> String {
        let qs: Vec<String> = (0..n)
            .map(|i| {
                format!(
                    r#"{{"id":"q{i}","question":"stem {i}","correct":"c{i}","distractors":["a{i}","b{i}","d{i}"]}}"#
                )
            })
            .collect();
        format!("[{}]", qs.join(",\n"))
    }

    #[test]
    fn dataset_loading_errors() {
        assert_eq!(parse_dataset(&dataset_json(3)).unwrap().k(), 4);
        let err = parse_dataset("[]").unwrap_err().to_string();
        assert!(err.contains("empty dataset"), "{err}");
        let mixed = r#"[{"id":"a","question":"s","correct":"c","distractors":["x","y","z"]},
                        {"id":"b","question":"s","correct":"c","distractors":["x","y"]}]"#;
        let err = parse_dataset(mixed).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
        let err = parse_dataset("[{\"id\": 3}]").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn fingerprint_ignores_formatting() {
        let a = parse_dataset(&dataset_json(2)).unwrap();
        let b = parse_dataset(&dataset_json(2).replace(",\n", ",    ")).unwrap();
        assert_eq!(dataset_fingerprint(&a), dataset_fingerprint(&b));
    }

    #[test]
    fn manifest_hash_ignores_timestamp() {
        let ds = parse_dataset(&dataset_json(2)).unwrap();
        let design = DesignSnapshot {
            balanced: Some(BalancedDesignConfig {
                trials_per_position: 2,
                master_seed: 1,
            }),
            sweep: None,
        };
        let plan = build_plan(&ds, &design, Execution::Sequential).unwrap();
        let m = RunManifest::new(&ds, design, 1, OmPolicy::default(), &plan).unwrap();
        let mut stamped = m.clone();
        stamped.created_at = Some("unix:1".into());
        assert_eq!(m.hash(), stamped.hash());
        m.check_plan(&plan).unwrap();
        assert!(m.check_plan(&plan[1..]).is_err());
    }

    #[test]
    fn log_record_round_trip_and_checks() {
        let ds = parse_dataset(&dataset_json(1)).unwrap();
        let design = DesignSnapshot {
            balanced: Some(BalancedDesignConfig {
                trials_per_position: 1,
                master_seed: 3,
            }),
            sweep: None,
        };
        let spec = build_plan(&ds, &design, Execution::Sequential).unwrap().remove(0);
        let pos = spec.arrangement.correct_position;
        let rec = TrialLogRecord {
            spec: spec.clone(),
            status: TrialStatus::Scored,
            selected_position: Some(pos),
            selected_role: Some(ContentRole::Correct),
            raw_response: None,
            latency_ms: None,
            error: None,
            manifest_hash: "h".into(),
        };
        rec.validate().unwrap();
        let line = jsonl::to_line(&rec).unwrap();
        let back: TrialLogRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);

        let wrong = TrialLogRecord {
            selected_role: Some(ContentRole::Distractor(1)),
            ..rec.clone()
        };
        assert!(wrong.validate().is_err());
        let failed = TrialLogRecord {
            status: TrialStatus::TransportFailure,
            selected_position: None,
            selected_role: None,
            ..rec
        };
        assert!(failed.validate().is_err());
    }
}
