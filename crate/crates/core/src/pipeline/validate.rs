use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{parse_dataset, read_log, read_plan, RunManifest, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::respondents::{CachedResponse, SyntheticCohort};

/// What a file turned out to be, with a size for the report line.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArtifactKind {
    Dataset { questions: usize, k: usize },
    Manifest { hash: String },
    Plan { trials: usize },
    Log { records: usize, manifest_hash: Option<String> },
    Cache { entries: usize },
    Cohort { overrides: usize },
    ReportCsv { rows: usize, manifest_hash: String },
    ReportJson { manifest_hash: String },
    RunReport { executed: u64, remaining: u64 },
}

/// Identify an artifact by extension and shape and check it against its
/// schema.
pub fn validate_artifact(path: &Path) -> Result<ArtifactKind> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    match ext {
        "csv" => validate_csv(path),
        "jsonl" => validate_jsonl(path),
        "json" => validate_json(path),
        _ => Err(Error::invalid(format!(
            "{}: unrecognised artifact extension",
            path.display()
        ))),
    }
}

fn validate_csv(path: &Path) -> Result<ArtifactKind> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first
        .strip_prefix("# manifest=")
        .filter(|h| !h.is_empty())
        .ok_or_else(|| Error::invalid(format!("{}: missing `# manifest=` line", path.display())))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut rows = 0;
    for rec in r.records() {
        rec?;
        rows += 1;
    }
    Ok(ArtifactKind::ReportCsv {
        rows,
        manifest_hash: hash.to_string(),
    })
}

fn validate_jsonl(path: &Path) -> Result<ArtifactKind> {
    let first: Option<Value> = jsonl::read_records::<Value>(path)?.into_iter().next();
    let has = |key: &str| first.as_ref().is_some_and(|v| v.get(key).is_some());
    if has("manifest_hash") {
        let recs = read_log(path)?;
        for r in &recs {
            r.validate()?;
        }
        let hash = recs.first().map(|r| r.manifest_hash.clone());
        if let Some(h) = &hash {
            if let Some(other) = recs.iter().find(|r| &r.manifest_hash != h) {
                return Err(Error::ManifestMismatch {
                    expected: h.clone(),
                    found: other.manifest_hash.clone(),
                });
            }
        }
        Ok(ArtifactKind::Log {
            records: recs.len(),
            manifest_hash: hash,
        })
    } else if has("arrangement") {
        Ok(ArtifactKind::Plan {
            trials: read_plan(path)?.len(),
        })
    } else if has("raw_response") || first.is_none() {
        let entries: Vec<CachedResponse> = jsonl::read_records(path)?;
        Ok(ArtifactKind::Cache {
            entries: entries.len(),
        })
    } else {
        Err(Error::invalid(format!("{}: unrecognised JSONL artifact", path.display())))
    }
}

fn validate_json(path: &Path) -> Result<ArtifactKind> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(text.trim_start_matches('\u{feff}')).map_err(|e| Error::Dataset {
        location: format!("{} line {}, column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    let de = |e| Error::json(path.display().to_string(), e);
    match &value {
        Value::Array(_) => {
            let ds = parse_dataset(&text)?;
            Ok(ArtifactKind::Dataset {
                questions: ds.len(),
                k: ds.k(),
            })
        }
        Value::Object(m) if m.contains_key("manifest_hash") => {
            let hash = m["manifest_hash"]
                .as_str()
                .filter(|h| !h.is_empty())
                .ok_or_else(|| Error::invalid(format!("{}: empty manifest_hash", path.display())))?;
            Ok(ArtifactKind::ReportJson {
                manifest_hash: hash.to_string(),
            })
        }
        Value::Object(m) if m.contains_key("manifest_version") => {
            let man: RunManifest = serde_json::from_value(value).map_err(de)?;
            if man.manifest_version != MANIFEST_VERSION {
                return Err(Error::invalid(format!(
                    "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                    man.manifest_version
                )));
            }
            man.design.validate(man.k)?;
            Ok(ArtifactKind::Manifest { hash: man.hash() })
        }
        Value::Object(m) if m.contains_key("default") => {
            let cohort: SyntheticCohort = serde_json::from_value(value).map_err(de)?;
            // k is unknown here: take it from guess weights if any, else the
            // largest k a label can name; a run re-checks against its own k
            let k = std::iter::once(&cohort.default)
                .chain(cohort.questions.values())
                .find_map(|p| p.spec.guess_weights.as_ref().map(Vec::len))
                .unwrap_or(26);
            cohort.validate(k)?;
            Ok(ArtifactKind::Cohort {
                overrides: cohort.questions.len(),
            })
        }
        Value::Object(m) if m.contains_key("executed") && m.contains_key("respondent") => {
            let count = |key: &str| {
                m.get(key)
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::invalid(format!("{}: `{key}` is not a count", path.display())))
            };
            Ok(ArtifactKind::RunReport {
                executed: count("executed")?,
                remaining: count("remaining")?,
            })
        }
        _ => Err(Error::invalid(format!("{}: unrecognised JSON artifact", path.display()))),
    }
}
