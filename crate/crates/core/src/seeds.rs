//! Seed loading: the initial population comes from a line-delimited file of
//! question records. Ids are content-addressed, so reloading the same file
//! always yields the same instructions, and duplicate questions collapse to
//! one seed with a reported count.

use crate::domain::{make_seed_instruction, Instruction};
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error("failed to read seed file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: bad seed record: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("seed file {path} contains no seeds")]
    Empty { path: String },
}

/// The loaded seed set plus what was dropped on the way.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedLoad {
    pub seeds: Vec<Instruction>,
    /// Lines whose (question, input) duplicated an earlier line.
    pub duplicates_dropped: usize,
}

/// Parses a seed file: one JSON object per line with a `question` (or
/// `instruction`/`text`) field and an optional `input` field. Blank lines
/// are skipped; anything else malformed fails with its line number.
pub fn load_seeds(path: &Path) -> Result<SeedLoad, SeedError> {
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| SeedError::Io {
        path: display.clone(),
        source,
    })?;
    let mut seeds: Vec<Instruction> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut duplicates_dropped = 0usize;
    for (line_no, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| SeedError::Parse {
            path: display.clone(),
            line: line_no + 1,
            reason,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let question = value
            .get("question")
            .or_else(|| value.get("instruction"))
            .or_else(|| value.get("text"))
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                parse_err("no question/instruction/text string field".to_string())
            })?;
        let input = match value.get("input") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s.as_str()),
            Some(other) => {
                return Err(parse_err(format!(
                    "input must be a string or null, got {other}"
                )))
            }
        };
        let seed = make_seed_instruction(question, input, line_no)
            .map_err(|e| parse_err(e.to_string()))?;
        if seen.insert(seed.id.clone()) {
            seeds.push(seed);
        } else {
            duplicates_dropped += 1;
        }
    }
    if seeds.is_empty() {
        return Err(SeedError::Empty { path: display });
    }
    Ok(SeedLoad {
        seeds,
        duplicates_dropped,
    })
}
