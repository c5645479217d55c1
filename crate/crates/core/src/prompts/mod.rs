//! Prompt rendering for every model role, plus the parsers for their
//! response grammars (see [`parse`]).
//!
//! Templates are plain-text files with `{name}` placeholders. Substitution is
//! a single pass over the template: values are inserted verbatim and never
//! rescanned, so instruction text containing literal `{placeholder}` braces
//! survives unchanged. Brace groups that don't name a bound placeholder (such
//! as the literal `\\boxed{Yes or No}` in the judge template) pass through
//! untouched.

pub mod parse;

use crate::domain::{GenerationConfig, Instruction, MutationTask, NO_INPUT};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// One template: its text and the placeholder names it requires.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    text: String,
    placeholders: Vec<String>,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>, placeholders: &[&str]) -> Self {
        PromptTemplate {
            text: text.into(),
            placeholders: placeholders.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Substitutes every declared placeholder. All declared names must be
    /// bound; bindings for undeclared names are rejected as caller bugs.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let map: HashMap<&str, &str> = bindings.iter().copied().collect();
        for name in &self.placeholders {
            if !map.contains_key(name.as_str()) {
                return Err(PromptError::UnboundPlaceholder { name: name.clone() });
            }
        }
        for (name, _) in bindings {
            if !self.placeholders.iter().any(|p| p == name) {
                return Err(PromptError::UnknownBinding {
                    name: (*name).to_string(),
                });
            }
        }
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after_open = &rest[open + 1..];
            match after_open.find(['{', '}']) {
                // A '}' closes the group; check whether it names a binding.
                Some(close) if after_open.as_bytes()[close] == b'}' => {
                    let name = &after_open[..close];
                    match map.get(name) {
                        Some(value) => out.push_str(value),
                        None => {
                            out.push('{');
                            out.push_str(name);
                            out.push('}');
                        }
                    }
                    rest = &after_open[close + 1..];
                }
                // Nested '{' or no closing brace: emit the '{' literally.
                _ => {
                    out.push('{');
                    rest = after_open;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// A judge few-shot exemplar: a solved question plus the written ruling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeExemplar {
    pub instruction: String,
    pub code: String,
    pub reason: String,
    /// "Yes" or "No".
    pub score: String,
}

/// All templates and fixtures needed to render any role's prompt.
#[derive(Debug, Clone)]
pub struct PromptSet {
    mutation: PromptTemplate,
    method_texts: [String; 5],
    crossover: PromptTemplate,
    coder: PromptTemplate,
    judge: PromptTemplate,
    judge_few_shot: PromptTemplate,
    judge_exemplars: Vec<JudgeExemplar>,
    decontam: PromptTemplate,
}

const MUTATION_PLACEHOLDERS: &[&str] = &["method", "instruction"];
const CROSSOVER_PLACEHOLDERS: &[&str] = &["task_count", "few_shot_block"];
const CODER_PLACEHOLDERS: &[&str] = &["language", "instruction"];
const JUDGE_PLACEHOLDERS: &[&str] = &["language", "few_shot_block", "instruction", "code"];
const JUDGE_FEW_SHOT_PLACEHOLDERS: &[&str] = &["instruction", "code", "reason", "score"];
const DECONTAM_PLACEHOLDERS: &[&str] = &["instruction 1", "instruction 2"];

impl PromptSet {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        PromptSet {
            mutation: PromptTemplate::new(
                include_str!("../../templates/mutation.txt"),
                MUTATION_PLACEHOLDERS,
            ),
            method_texts: [
                include_str!("../../templates/method_constraint.txt").to_string(),
                include_str!("../../templates/method_deepening.txt").to_string(),
                include_str!("../../templates/method_erroneous_code.txt").to_string(),
                include_str!("../../templates/method_reasoning.txt").to_string(),
                include_str!("../../templates/method_task_complexity.txt").to_string(),
            ],
            crossover: PromptTemplate::new(
                include_str!("../../templates/crossover.txt"),
                CROSSOVER_PLACEHOLDERS,
            ),
            coder: PromptTemplate::new(
                include_str!("../../templates/coder.txt"),
                CODER_PLACEHOLDERS,
            ),
            judge: PromptTemplate::new(
                include_str!("../../templates/judge.txt"),
                JUDGE_PLACEHOLDERS,
            ),
            judge_few_shot: PromptTemplate::new(
                include_str!("../../templates/judge_few_shot.txt"),
                JUDGE_FEW_SHOT_PLACEHOLDERS,
            ),
            judge_exemplars: serde_json::from_str(include_str!(
                "../../templates/judge_few_shots.json"
            ))
            .expect("bundled judge exemplars are valid JSON"),
            decontam: PromptTemplate::new(
                include_str!("../../templates/decontam.txt"),
                DECONTAM_PLACEHOLDERS,
            ),
        }
    }

    /// Loads templates from a directory using the same file names as the
    /// bundled set; any missing file falls back to the builtin text.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = PromptSet::builtin();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            if path.exists() {
                std::fs::read_to_string(&path)
                    .map(Some)
                    .map_err(|e| PromptError::TemplateIo {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })
            } else {
                Ok(None)
            }
        };
        if let Some(text) = read("mutation.txt")? {
            set.mutation = PromptTemplate::new(text, MUTATION_PLACEHOLDERS);
        }
        for (i, task) in MutationTask::ALL.iter().enumerate() {
            if let Some(text) = read(&format!("method_{}.txt", task.as_str()))? {
                set.method_texts[i] = text;
            }
        }
        if let Some(text) = read("crossover.txt")? {
            set.crossover = PromptTemplate::new(text, CROSSOVER_PLACEHOLDERS);
        }
        if let Some(text) = read("coder.txt")? {
            set.coder = PromptTemplate::new(text, CODER_PLACEHOLDERS);
        }
        if let Some(text) = read("judge.txt")? {
            set.judge = PromptTemplate::new(text, JUDGE_PLACEHOLDERS);
        }
        if let Some(text) = read("judge_few_shot.txt")? {
            set.judge_few_shot = PromptTemplate::new(text, JUDGE_FEW_SHOT_PLACEHOLDERS);
        }
        if let Some(text) = read("judge_few_shots.json")? {
            set.judge_exemplars =
                serde_json::from_str(&text).map_err(|e| PromptError::TemplateIo {
                    path: dir.join("judge_few_shots.json").display().to_string(),
                    message: e.to_string(),
                })?;
        }
        if let Some(text) = read("decontam.txt")? {
            set.decontam = PromptTemplate::new(text, DECONTAM_PLACEHOLDERS);
        }
        Ok(set)
    }

    pub fn method_text(&self, task: MutationTask) -> &str {
        let idx = MutationTask::ALL
            .iter()
            .position(|t| *t == task)
            .expect("task is in ALL");
        self.method_texts[idx].trim_end()
    }

    pub fn judge_exemplars(&self) -> &[JudgeExemplar] {
        &self.judge_exemplars
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("placeholder {{{name}}} has no binding")]
    UnboundPlaceholder { name: String },
    #[error("binding {name:?} does not match any declared placeholder")]
    UnknownBinding { name: String },
    #[error("crossover needs exactly {expected} shots, got {got}")]
    WrongShotCount { expected: usize, got: usize },
    #[error("crossover shots contain duplicate instruction ids")]
    DuplicateShots,
    #[error("decontamination prompt requires two non-empty problems")]
    EmptyProblem,
    #[error("failed to load template {path}: {message}")]
    TemplateIo { path: String, message: String },
}

/// Marker the mutation template ends with; the text after it in a response
/// is the evolved instruction.
pub const NEW_INSTRUCTION_MARKER: &str = "New Instruction:";
/// Marker echoed by some mutation responses ahead of the original text.
pub const ORIGINAL_INSTRUCTION_MARKER: &str = "Original Instruction:";

/// Tag name for a language, as written into prompts ("python" → "Python").
fn language_display(tag: &str) -> String {
    let mut chars = tag.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Replaces the closing code tag so embedded code cannot terminate the
/// prompt's own `<llm-code>` block.
pub fn escape_llm_code(code: &str) -> String {
    code.replace("</llm-code>", "<\\/llm-code>")
}

/// Inverse of [`escape_llm_code`].
pub fn unescape_llm_code(code: &str) -> String {
    code.replace("<\\/llm-code>", "</llm-code>")
}

/// Renders the instruction-evolution prompt for one seed and task.
pub fn render_mutation_prompt(
    set: &PromptSet,
    seed: &Instruction,
    task: MutationTask,
) -> Result<String, PromptError> {
    set.mutation.render(&[
        ("method", set.method_text(task)),
        ("instruction", &seed.combined_text()),
    ])
}

/// Renders the few-shot multi-instruction prompt. The prompt ends with the
/// next item index and an "Instruction:" cue so the model continues the list.
pub fn render_crossover_prompt(
    set: &PromptSet,
    shots: &[Instruction],
    config: &GenerationConfig,
) -> Result<String, PromptError> {
    let expected = config.crossover_shots as usize;
    if shots.len() != expected {
        return Err(PromptError::WrongShotCount {
            expected,
            got: shots.len(),
        });
    }
    for (i, shot) in shots.iter().enumerate() {
        if shots[..i].iter().any(|other| other.id == shot.id) {
            return Err(PromptError::DuplicateShots);
        }
    }
    let mut block = String::new();
    for (i, shot) in shots.iter().enumerate() {
        let n = i + 1;
        let input = shot.input_context.as_deref().unwrap_or(NO_INPUT);
        write!(
            block,
            "###\n\n{n}. Instruction: {}\n\n{n}. Input: {input}\n\n",
            shot.text
        )
        .expect("writing to String cannot fail");
    }
    write!(block, "###\n\n{}. Instruction:", shots.len() + 1)
        .expect("writing to String cannot fail");
    set.crossover.render(&[
        ("task_count", &config.crossover_max_outputs.to_string()),
        ("few_shot_block", &block),
    ])
}

/// Renders the solution-writing prompt for one instruction.
pub fn render_coder_prompt(
    set: &PromptSet,
    instruction: &Instruction,
    config: &GenerationConfig,
) -> Result<String, PromptError> {
    set.coder.render(&[
        ("language", &language_display(&config.target_code_language)),
        ("instruction", &instruction.combined_text()),
    ])
}

/// Renders the fitness prompt: criteria, few-shot rulings, then the candidate
/// as the final unanswered block.
pub fn render_judge_prompt(
    set: &PromptSet,
    instruction: &Instruction,
    code: &str,
    config: &GenerationConfig,
) -> Result<String, PromptError> {
    let mut block = String::new();
    for exemplar in &set.judge_exemplars {
        let rendered = set.judge_few_shot.render(&[
            ("instruction", exemplar.instruction.as_str()),
            ("code", &escape_llm_code(&exemplar.code)),
            ("reason", exemplar.reason.as_str()),
            ("score", exemplar.score.as_str()),
        ])?;
        block.push_str(rendered.trim_end());
        block.push_str("\n\n");
    }
    set.judge.render(&[
        ("language", &config.target_code_language.to_lowercase()),
        ("few_shot_block", &block),
        ("instruction", &instruction.combined_text()),
        ("code", &escape_llm_code(code)),
    ])
}

/// Renders the same-problem adjudication prompt in the given order.
pub fn render_decontam_prompt(
    set: &PromptSet,
    first: &str,
    second: &str,
) -> Result<String, PromptError> {
    if first.trim().is_empty() || second.trim().is_empty() {
        return Err(PromptError::EmptyProblem);
    }
    set.decontam
        .render(&[("instruction 1", first), ("instruction 2", second)])
}
