//! Dataset export: accepted samples become line-delimited records ordered
//! by content-hash id, so identical sets always export to identical bytes
//! regardless of which colony finished first. A chat-pair form is offered
//! for fine-tuning toolchains, and imports round-trip exactly.

use crate::domain::{CandidateSample, Origin};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// JSON Schema describing one export record, shipped with the crate.
pub const EXPORT_SCHEMA_JSON: &str = include_str!("../assets/export.schema.json");

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: bad export record: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

/// One exported instruction–solution pair with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRecord {
    pub id: String,
    pub instruction: String,
    pub input: Option<String>,
    pub solution: String,
    pub origin: Origin,
    pub generation: u32,
    pub parents: Vec<String>,
}

impl ExportRecord {
    pub fn from_sample(sample: &CandidateSample) -> ExportRecord {
        ExportRecord {
            id: sample.instruction.id.clone(),
            instruction: sample.instruction.text.clone(),
            input: sample.instruction.input_context.clone(),
            solution: sample.solution.source.clone(),
            origin: sample.instruction.origin,
            generation: sample.instruction.generation_index,
            parents: sample.instruction.parent_ids.clone(),
        }
    }

    /// What a fine-tuning consumer would show the model as the user turn.
    pub fn user_content(&self) -> String {
        match &self.input {
            Some(input) => format!("{}\nInput: {}", self.instruction, input),
            None => self.instruction.clone(),
        }
    }
}

/// Converts samples to records in canonical order (ascending id).
pub fn to_records(samples: &[CandidateSample]) -> Vec<ExportRecord> {
    let mut records: Vec<ExportRecord> = samples.iter().map(ExportRecord::from_sample).collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    records
}

fn records_to_jsonl(records: &[ExportRecord]) -> String {
    let mut body = String::new();
    for record in records {
        body.push_str(&serde_json::to_string(record).expect("record serializes"));
        body.push('\n');
    }
    body
}

/// Writes records as one JSON object per line. Returns the line count.
pub fn write_jsonl(records: &[ExportRecord], path: &Path) -> Result<usize, ExportError> {
    crate::persist::write_atomic(path, records_to_jsonl(records).as_bytes()).map_err(|e| {
        ExportError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        }
    })?;
    Ok(records.len())
}

/// Writes records in chat-pair form: one `{"messages": [user, assistant]}`
/// object per line.
pub fn write_chat_jsonl(records: &[ExportRecord], path: &Path) -> Result<usize, ExportError> {
    let mut body = String::new();
    for record in records {
        let value = serde_json::json!({
            "messages": [
                {"role": "user", "content": record.user_content()},
                {"role": "assistant", "content": record.solution},
            ]
        });
        body.push_str(&value.to_string());
        body.push('\n');
    }
    crate::persist::write_atomic(path, body.as_bytes()).map_err(|e| ExportError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    Ok(records.len())
}

/// Structural validation of one parsed export line against the shipped
/// schema's rules: exact field set, hex-hash ids, non-empty instruction,
/// string-or-null input, known origin kind, and string parent ids.
pub fn is_schema_valid(value: &serde_json::Value) -> bool {
    let obj = match value.as_object() {
        Some(o) => o,
        None => return false,
    };
    let keys: std::collections::BTreeSet<&str> = obj.keys().map(|k| k.as_str()).collect();
    let expected: std::collections::BTreeSet<&str> = [
        "id",
        "instruction",
        "input",
        "solution",
        "origin",
        "generation",
        "parents",
    ]
    .into_iter()
    .collect();
    if keys != expected {
        return false;
    }
    let id_ok = obj["id"]
        .as_str()
        .map(|s| s.len() == 64 && s.chars().all(|c| c.is_ascii_hexdigit()))
        .unwrap_or(false);
    let instruction_ok = obj["instruction"]
        .as_str()
        .map(|s| !s.is_empty())
        .unwrap_or(false);
    let input_ok = obj["input"].is_null() || obj["input"].is_string();
    let solution_ok = obj["solution"].is_string();
    let origin_ok = obj["origin"]
        .as_object()
        .map(|o| {
            matches!(
                o.get("kind").and_then(|k| k.as_str()),
                Some("seed") | Some("mutation") | Some("crossover")
            )
        })
        .unwrap_or(false);
    let generation_ok = obj["generation"].as_u64().is_some();
    let parents_ok = obj["parents"]
        .as_array()
        .map(|a| a.iter().all(|p| p.is_string()))
        .unwrap_or(false);
    id_ok && instruction_ok && input_ok && solution_ok && origin_ok && generation_ok && parents_ok
}

/// Reads an export back. Strict field checking: unknown or missing fields
/// fail with the offending line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<ExportRecord>, ExportError> {
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| ExportError::Io {
        path: display.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (line_no, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ExportRecord =
            serde_json::from_str(line).map_err(|e| ExportError::Parse {
                path: display.clone(),
                line: line_no + 1,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{
        make_seed_instruction, CodeSolution, Instruction, JudgeVerdict, MutationTask,
        StageTimestamps, SyntaxStatus,
    };

    fn sample_with(instruction: Instruction, solution: &str) -> CandidateSample {
        CandidateSample {
            instruction,
            solution: CodeSolution {
                language_tag: "python".to_string(),
                source: solution.to_string(),
                raw_response: format!("```python\n{solution}\n```"),
                syntax_ok: SyntaxStatus::Pass,
            },
            judge_verdict: JudgeVerdict::Accepted,
            judge_transcript: String::new(),
            stage_timestamps: StageTimestamps::default(),
        }
    }

    fn corpus() -> Vec<CandidateSample> {
        let seed = make_seed_instruction("base question about queues", None, 0).unwrap();
        let mut mutated = make_seed_instruction(
            "mutated question with a constraint about queues",
            Some("q = [1, 2]"),
            0,
        )
        .unwrap();
        mutated.origin = Origin::Mutation(MutationTask::Constraint);
        mutated.parent_ids = vec![seed.id.clone()];
        mutated.generation_index = 1;
        let mut crossed =
            make_seed_instruction("crossover offspring question about stacks", None, 0).unwrap();
        crossed.origin = Origin::Crossover;
        crossed.parent_ids = vec![seed.id.clone(), mutated.id.clone()];
        crossed.generation_index = 2;
        vec![
            sample_with(mutated, "def constrained(q):\n    return q\n"),
            sample_with(crossed, "def offspring(s):\n    return s\n"),
        ]
    }

    #[test]
    fn records_are_ordered_by_id_regardless_of_input_order() {
        let mut samples = corpus();
        let forward = to_records(&samples);
        samples.reverse();
        let backward = to_records(&samples);
        assert_eq!(forward, backward);
        let mut ids: Vec<String> = forward.iter().map(|r| r.id.clone()).collect();
        let sorted = {
            let mut s = ids.clone();
            s.sort();
            s
        };
        assert_eq!(ids, sorted);
        ids.dedup();
        assert_eq!(ids.len(), forward.len());
    }

    #[test]
    fn empty_set_exports_to_an_empty_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let written = write_jsonl(&[], &path).unwrap();
        assert_eq!(written, 0);
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.is_empty());
        assert_eq!(read_jsonl(&path).unwrap(), Vec::new());
    }

    #[test]
    fn exports_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        let records = to_records(&corpus());
        write_jsonl(&records, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
        // And identical sets give identical bytes.
        let path2 = dir.path().join("set2.jsonl");
        write_jsonl(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn unknown_fields_fail_import_with_a_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tampered.jsonl");
        let records = to_records(&corpus());
        write_jsonl(&records, &path).unwrap();
        let mut raw = std::fs::read_to_string(&path).unwrap();
        raw.push_str("{\"id\": \"zz\", \"surprise\": true}\n");
        std::fs::write(&path, raw).unwrap();
        match read_jsonl(&path) {
            Err(ExportError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn chat_form_pairs_user_and_assistant_turns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chat.jsonl");
        let records = to_records(&corpus());
        write_chat_jsonl(&records, &path).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = raw.lines().collect();
        assert_eq!(lines.len(), records.len());
        for (line, record) in lines.iter().zip(&records) {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            let messages = value["messages"].as_array().unwrap();
            assert_eq!(messages.len(), 2);
            assert_eq!(messages[0]["role"], "user");
            assert_eq!(messages[1]["role"], "assistant");
            assert_eq!(messages[1]["content"], record.solution);
            if let Some(input) = &record.input {
                let content = messages[0]["content"].as_str().unwrap();
                assert!(content.contains(&record.instruction));
                assert!(content.contains(input.as_str()));
            }
        }
    }

    #[test]
    fn shipped_schema_matches_the_record_shape() {
        let schema: serde_json::Value = serde_json::from_str(EXPORT_SCHEMA_JSON).unwrap();
        let record = &to_records(&corpus())[0];
        let value = serde_json::to_value(record).unwrap();
        let record_fields: std::collections::BTreeSet<String> =
            value.as_object().unwrap().keys().cloned().collect();
        let schema_fields: std::collections::BTreeSet<String> = schema["properties"]
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(record_fields, schema_fields, "schema drifted from struct");
        let required: std::collections::BTreeSet<String> = schema["required"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        assert_eq!(required, schema_fields, "every field is required");
        assert_eq!(schema["additionalProperties"], serde_json::json!(false));
    }

    #[test]
    fn structural_validator_accepts_real_records_and_rejects_junk() {
        for record in to_records(&corpus()) {
            let value = serde_json::to_value(&record).unwrap();
            assert!(is_schema_valid(&value));
        }
        assert!(!is_schema_valid(&serde_json::json!({"id": "short"})));
        assert!(!is_schema_valid(&serde_json::json!("not an object")));
    }
}
