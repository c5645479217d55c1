//! Instructions, code solutions, and candidate samples — the records that
//! flow through every stage of the pipeline.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

/// Sentinel used when an instruction needs no example input.
pub const NO_INPUT: &str = "<noinput>";

/// The five fixed rewriting tasks an instruction mutation can apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationTask {
    Constraint,
    Deepening,
    ErroneousCode,
    Reasoning,
    TaskComplexity,
}

impl MutationTask {
    /// Every task, in canonical order. Uniform draws index into this.
    pub const ALL: [MutationTask; 5] = [
        MutationTask::Constraint,
        MutationTask::Deepening,
        MutationTask::ErroneousCode,
        MutationTask::Reasoning,
        MutationTask::TaskComplexity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MutationTask::Constraint => "constraint",
            MutationTask::Deepening => "deepening",
            MutationTask::ErroneousCode => "erroneous_code",
            MutationTask::Reasoning => "reasoning",
            MutationTask::TaskComplexity => "task_complexity",
        }
    }
}

impl fmt::Display for MutationTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MutationTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MutationTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown mutation task: {s:?}"))
    }
}

/// How an instruction came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "task", rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Mutation(MutationTask),
    Crossover,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Seed => f.write_str("seed"),
            Origin::Mutation(task) => write!(f, "mutation:{task}"),
            Origin::Crossover => f.write_str("crossover"),
        }
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seed" => Ok(Origin::Seed),
            "crossover" => Ok(Origin::Crossover),
            other => match other.strip_prefix("mutation:") {
                Some(task) => Ok(Origin::Mutation(task.parse()?)),
                None => Err(format!("unknown origin: {s:?}")),
            },
        }
    }
}

/// One coding question, possibly with example input, plus full lineage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    /// Content hash over (text, input_context); identical content collides
    /// on purpose so duplicates are detectable across colonies.
    pub id: String,
    pub text: String,
    /// Example input for the task, if any. `"<noinput>"` is normalized to
    /// `None` at construction time; prompt renderers re-insert the sentinel
    /// where the output grammar requires it.
    pub input_context: Option<String>,
    pub origin: Origin,
    /// Ids of the instructions this one was derived from. Empty for seeds,
    /// exactly one for mutations, one per few-shot example for crossovers.
    pub parent_ids: Vec<String>,
    /// 0 for seeds; the generation that synthesized it otherwise.
    pub generation_index: u32,
    pub colony_index: u32,
}

impl Instruction {
    /// Instruction text with its input context appended, as shown to models
    /// that need the complete task statement.
    pub fn combined_text(&self) -> String {
        match self.input_context.as_deref() {
            Some(input) => format!("{}\nInput: {}", self.text, input),
            None => self.text.clone(),
        }
    }
}

/// Stable content-addressed id for an instruction.
///
/// The encoding separates text from input with an unambiguous tag so that
/// ("a", Some("b")) and ("a\nb", None) cannot collide.
pub fn content_id(text: &str, input_context: Option<&str>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    match input_context {
        Some(input) => {
            hasher.update([1u8]);
            hasher.update(input.as_bytes());
        }
        None => hasher.update([0u8]),
    }
    to_hex(&hasher.finalize())
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Normalizes an optional input field: trims, drops empties and the
/// `"<noinput>"` sentinel.
pub fn normalize_input(input: Option<&str>) -> Option<String> {
    let trimmed = input?.trim();
    if trimmed.is_empty() || trimmed == NO_INPUT {
        None
    } else {
        Some(trimmed.to_string())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum InstructionError {
    #[error("instruction text is empty after trimming")]
    EmptyText,
}

/// Builds a generation-0 seed instruction. `index` is the seed's position in
/// its source file, used only for diagnostics; the id is content-addressed so
/// identical seed content always maps to the same id.
pub fn make_seed_instruction(
    text: &str,
    input_context: Option<&str>,
    index: usize,
) -> Result<Instruction, InstructionError> {
    let _ = index;
    let text = text.trim();
    if text.is_empty() {
        return Err(InstructionError::EmptyText);
    }
    let input_context = normalize_input(input_context);
    Ok(Instruction {
        id: content_id(text, input_context.as_deref()),
        text: text.to_string(),
        input_context,
        origin: Origin::Seed,
        parent_ids: Vec::new(),
        generation_index: 0,
        colony_index: 0,
    })
}

/// Whether a generated code solution has been checked against the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntaxStatus {
    Unchecked,
    Pass,
    Fail,
}

/// A generated solution for one instruction. The code is data: it is parsed,
/// never executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSolution {
    pub language_tag: String,
    /// Code extracted from the model response (first matching fenced block,
    /// falling back to the whole response).
    pub source: String,
    pub raw_response: String,
    pub syntax_ok: SyntaxStatus,
}

/// The judge's ruling on a candidate sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeVerdict {
    Pending,
    Accepted,
    Rejected,
}

/// Wall-clock milliseconds (unix epoch) at which each stage finished.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimestamps {
    pub generated_ms: Option<u64>,
    pub coded_ms: Option<u64>,
    pub validated_ms: Option<u64>,
    pub judged_ms: Option<u64>,
}

/// An instruction paired with its generated solution and filter verdicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSample {
    pub instruction: Instruction,
    pub solution: CodeSolution,
    pub judge_verdict: JudgeVerdict,
    pub judge_transcript: String,
    pub stage_timestamps: StageTimestamps,
}

impl CandidateSample {
    /// True when the sample may sit in a population pool: syntax passed and
    /// the judge accepted it.
    pub fn is_pool_eligible(&self) -> bool {
        self.solution.syntax_ok == SyntaxStatus::Pass && self.judge_verdict == JudgeVerdict::Accepted
    }
}
