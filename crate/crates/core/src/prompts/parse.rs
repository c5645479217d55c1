//! Parsers for each model role's response grammar. All of them are total:
//! malformed text degrades into empty results or explicit parse-failure
//! values, never panics.

use super::{NEW_INSTRUCTION_MARKER, ORIGINAL_INSTRUCTION_MARKER};
use crate::domain::{normalize_input, MutationTask};
use regex::Regex;
use std::sync::OnceLock;

/// Instructions recovered from one multi-instruction response.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedInstructionList {
    /// (instruction text, optional input context) in response order.
    pub items: Vec<(String, Option<String>)>,
    /// Items dropped by grammar rules: empty text, truncated tail, overflow
    /// past the cap.
    pub discarded_count: u64,
}

fn item_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*(\d+)\.\s*(Instruction|Input):[ \t]*").unwrap())
}

/// Strips list separators ("###" lines) and whitespace from a segment.
fn clean_segment(segment: &str) -> String {
    segment
        .lines()
        .filter(|line| line.trim() != "###")
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

/// Extracts numbered "Instruction:" / "Input:" pairs from a response.
///
/// The prompt ends with a numbered "Instruction:" cue, so a response may
/// begin with the body of that cued item before the first explicit marker;
/// leading text followed by an "Input:" marker is treated that way. Set
/// `truncated` when the backend stopped at the token limit: the final item is
/// then dropped as probably cut off mid-sentence.
pub fn parse_instruction_list(
    text: &str,
    max_items: usize,
    truncated: bool,
) -> ParsedInstructionList {
    let mut items: Vec<(String, Option<String>)> = Vec::new();
    let mut discarded = 0u64;

    let markers: Vec<(usize, usize, bool)> = item_marker_re()
        .captures_iter(text)
        .map(|cap| {
            let whole = cap.get(0).unwrap();
            let is_instruction = &cap[2] == "Instruction";
            (whole.start(), whole.end(), is_instruction)
        })
        .collect();

    let mut open: Option<(String, Option<String>)> = None;
    let mut push_item = |item: (String, Option<String>), discarded: &mut u64| {
        if item.0.is_empty() {
            *discarded += 1;
        } else {
            items.push(item);
        }
    };

    // Text before the first marker is the continuation of the cued item when
    // the first marker is its "Input:"; otherwise it is preamble prose.
    let lead_end = markers.first().map_or(text.len(), |m| m.0);
    let lead = clean_segment(&text[..lead_end]);
    if !lead.is_empty() && matches!(markers.first(), Some((_, _, false))) {
        open = Some((lead, None));
    }

    for (i, &(_, content_start, is_instruction)) in markers.iter().enumerate() {
        let content_end = markers.get(i + 1).map_or(text.len(), |m| m.0);
        let content = clean_segment(&text[content_start..content_end]);
        if is_instruction {
            if let Some(item) = open.take() {
                push_item(item, &mut discarded);
            }
            open = Some((content, None));
        } else if let Some(item) = open.as_mut() {
            if item.1.is_none() {
                item.1 = normalize_input(Some(&content));
            }
        }
        // An "Input:" with no open item is stray text, not an item: ignored.
    }
    if let Some(item) = open.take() {
        push_item(item, &mut discarded);
    }

    if truncated && !items.is_empty() {
        items.pop();
        discarded += 1;
    }
    if items.len() > max_items {
        discarded += (items.len() - max_items) as u64;
        items.truncate(max_items);
    }
    ParsedInstructionList {
        items,
        discarded_count: discarded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("mutation response contained no instruction text")]
pub struct EmptyResult;

/// Recovers the evolved instruction from a mutation response.
///
/// Takes the text after the last "New Instruction:" marker (models echo the
/// prompt's trailing cue), falling back to the whole response. Tasks whose
/// method text asks the model to restate the original keep any echoed
/// "Original Instruction:" section; the others have it stripped.
pub fn parse_single_instruction(text: &str, task: MutationTask) -> Result<String, EmptyResult> {
    let tail = match text.rfind(NEW_INSTRUCTION_MARKER) {
        Some(pos) => &text[pos + NEW_INSTRUCTION_MARKER.len()..],
        None => text,
    };
    let keeps_original = matches!(
        task,
        MutationTask::ErroneousCode | MutationTask::Reasoning | MutationTask::TaskComplexity
    );
    let tail = if keeps_original {
        tail
    } else {
        match tail.find(ORIGINAL_INSTRUCTION_MARKER) {
            Some(pos) => &tail[..pos],
            None => tail,
        }
    };
    let tail = tail.trim();
    if tail.is_empty() {
        Err(EmptyResult)
    } else {
        Ok(tail.to_string())
    }
}

/// Everything a code response can carry: the first fenced block tagged with
/// the wanted language, else the first untagged fenced block, else the whole
/// response (syntax validation downstream is the real gate).
pub fn extract_code_block(text: &str, language_tag: &str) -> String {
    let mut tagged: Option<String> = None;
    let mut untagged: Option<String> = None;
    let mut fence_lang: Option<String> = None;
    let mut body: Vec<&str> = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            match fence_lang.take() {
                Some(lang) => {
                    // Closing fence: file the finished block.
                    let block = body.join("\n");
                    body.clear();
                    if lang.eq_ignore_ascii_case(language_tag) {
                        tagged.get_or_insert(block);
                    } else if lang.is_empty() {
                        untagged.get_or_insert(block);
                    }
                }
                None => fence_lang = Some(rest.trim().to_string()),
            }
        } else if fence_lang.is_some() {
            body.push(line);
        }
    }
    tagged
        .or(untagged)
        .unwrap_or_else(|| text.trim().to_string())
}

/// The judge's ruling as parsed from its transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeDecision {
    Accepted,
    Rejected,
    /// No readable boxed Yes/No anywhere; callers reject but count this
    /// separately.
    ParseFailure,
}

fn boxed_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\+boxed\{([^{}]*)\}").unwrap())
}

/// Finds the last boxed token in a judge transcript and maps Yes/No onto a
/// decision, regardless of surrounding tags or "Decision:"/"Score:" labels.
pub fn parse_judge_decision(text: &str) -> JudgeDecision {
    let last = boxed_re().captures_iter(text).last();
    match last {
        Some(cap) => {
            let token = cap[1].trim();
            if token.eq_ignore_ascii_case("yes") {
                JudgeDecision::Accepted
            } else if token.eq_ignore_ascii_case("no") {
                JudgeDecision::Rejected
            } else {
                JudgeDecision::ParseFailure
            }
        }
        None => JudgeDecision::ParseFailure,
    }
}

/// Parses the same-problem response: exactly "True" or "False" after trimming
/// (case-insensitive). `None` means parse-failure, which callers treat as
/// "same" — removal is the safe direction.
pub fn parse_decontam_decision(text: &str) -> Option<bool> {
    let token = text.trim();
    if token.eq_ignore_ascii_case("true") {
        Some(true)
    } else if token.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WELL_FORMED: &str = "\
###
1. Instruction: Write a function to merge two sorted lists into one sorted list.
1. Input: a = [1, 3], b = [2, 4]
###
2. Instruction: Is the following string a valid JSON document? Explain in code.
2. Input: <noinput>
###
3. Instruction: Optimize this loop to run in O(n) time.
3. Input: nums = [5, 1, 4]
";

    #[test]
    fn parses_well_formed_list() {
        let parsed = parse_instruction_list(WELL_FORMED, 20, false);
        assert_eq!(parsed.items.len(), 3);
        assert_eq!(parsed.discarded_count, 0);
        assert_eq!(
            parsed.items[0].0,
            "Write a function to merge two sorted lists into one sorted list."
        );
        assert_eq!(parsed.items[0].1.as_deref(), Some("a = [1, 3], b = [2, 4]"));
        assert_eq!(parsed.items[1].1, None, "<noinput> becomes None");
    }

    #[test]
    fn empty_input_yields_nothing() {
        let parsed = parse_instruction_list("", 20, false);
        assert_eq!(parsed.items.len(), 0);
        assert_eq!(parsed.discarded_count, 0);
    }

    #[test]
    fn truncated_tail_is_dropped_and_counted() {
        let truncated_text = &WELL_FORMED[..WELL_FORMED.len() - 30];
        let parsed = parse_instruction_list(truncated_text, 20, true);
        assert_eq!(parsed.items.len(), 2);
        assert_eq!(parsed.discarded_count, 1);
    }

    #[test]
    fn cap_discards_overflow() {
        let parsed = parse_instruction_list(WELL_FORMED, 2, false);
        assert_eq!(parsed.items.len(), 2);
        assert_eq!(parsed.discarded_count, 1);
    }

    #[test]
    fn continuation_before_first_marker_is_the_cued_item() {
        let text = "\
Reverse the words of a sentence without using split().
4. Input: s = \"hello world\"
###
5. Instruction: Count the vowels in a string.
5. Input: <noinput>
";
        let parsed = parse_instruction_list(text, 20, false);
        assert_eq!(parsed.items.len(), 2);
        assert_eq!(
            parsed.items[0].0,
            "Reverse the words of a sentence without using split()."
        );
        assert_eq!(parsed.items[0].1.as_deref(), Some("s = \"hello world\""));
    }

    #[test]
    fn preamble_before_instruction_marker_is_ignored() {
        let text = "Sure, here are some tasks:\n1. Instruction: Sort an array.\n1. Input: <noinput>\n";
        let parsed = parse_instruction_list(text, 20, false);
        assert_eq!(parsed.items.len(), 1);
        assert_eq!(parsed.items[0].0, "Sort an array.");
    }

    #[test]
    fn empty_instruction_text_is_discarded() {
        let text = "1. Instruction:\n1. Input: x = 2\n###\n2. Instruction: Real one here.\n";
        let parsed = parse_instruction_list(text, 20, false);
        assert_eq!(parsed.items.len(), 1);
        assert_eq!(parsed.discarded_count, 1);
    }

    #[test]
    fn single_instruction_takes_text_after_last_marker() {
        let text = "New Instruction:\nSort a list of integers using a stable algorithm.";
        assert_eq!(
            parse_single_instruction(text, MutationTask::Constraint).unwrap(),
            "Sort a list of integers using a stable algorithm."
        );
    }

    #[test]
    fn single_instruction_strips_echo_for_constraint() {
        let text = "New Instruction:\nSort a list in O(n log n) without built-ins.\n\nOriginal Instruction:\nSort a list.";
        assert_eq!(
            parse_single_instruction(text, MutationTask::Constraint).unwrap(),
            "Sort a list in O(n log n) without built-ins."
        );
    }

    #[test]
    fn single_instruction_keeps_echo_for_reasoning_tasks() {
        let text = "New Instruction:\nExplain each step, then sort.\n\nOriginal Instruction:\nSort a list.";
        let kept = parse_single_instruction(text, MutationTask::Reasoning).unwrap();
        assert!(kept.contains("Original Instruction:"));
        assert!(kept.contains("Sort a list."));
    }

    #[test]
    fn whole_response_used_when_marker_missing() {
        let text = "  Sort a list of integers descending.  ";
        assert_eq!(
            parse_single_instruction(text, MutationTask::Deepening).unwrap(),
            "Sort a list of integers descending."
        );
    }

    #[test]
    fn whitespace_mutation_response_is_empty_result() {
        assert_eq!(
            parse_single_instruction("New Instruction:\n   \n", MutationTask::Constraint),
            Err(EmptyResult)
        );
    }

    #[test]
    fn code_extraction_prefers_tagged_block() {
        let text = "Intro\n```\nprint('untagged')\n```\nthen\n```python\nx = 1\n```\n";
        assert_eq!(extract_code_block(text, "python"), "x = 1");
    }

    #[test]
    fn code_extraction_falls_back_to_untagged_then_whole() {
        let text = "```\ny = 2\n```\n";
        assert_eq!(extract_code_block(text, "python"), "y = 2");
        assert_eq!(
            extract_code_block("no fences at all", "python"),
            "no fences at all"
        );
        // A block tagged with a different language is not a fallback.
        let other = "```javascript\nlet x = 1;\n```";
        assert_eq!(extract_code_block(other, "python"), other.trim());
    }

    #[test]
    fn first_tagged_block_wins_among_competitors() {
        let text = "```python\nfirst = True\n```\n```python\nsecond = True\n```\n";
        assert_eq!(extract_code_block(text, "python"), "first = True");
    }

    #[test]
    fn judge_decision_reads_last_boxed_token() {
        assert_eq!(
            parse_judge_decision("Reasoning...\nDecision: \\boxed{Yes}"),
            JudgeDecision::Accepted
        );
        assert_eq!(
            parse_judge_decision("Decision: \\\\boxed{No}"),
            JudgeDecision::Rejected
        );
        assert_eq!(
            parse_judge_decision("Score: \\boxed{Yes}. Later: \\boxed{No}"),
            JudgeDecision::Rejected
        );
        assert_eq!(
            parse_judge_decision("I think it is fine."),
            JudgeDecision::ParseFailure
        );
        assert_eq!(
            parse_judge_decision("Decision: \\boxed{Maybe}"),
            JudgeDecision::ParseFailure
        );
    }

    #[test]
    fn decontam_decision_is_strict() {
        assert_eq!(parse_decontam_decision("True"), Some(true));
        assert_eq!(parse_decontam_decision(" false \n"), Some(false));
        assert_eq!(parse_decontam_decision("They are the same"), None);
        assert_eq!(parse_decontam_decision("True."), None);
    }

    #[test]
    fn parsing_is_idempotent() {
        let parsed_once = parse_instruction_list(WELL_FORMED, 20, false);
        let parsed_twice = parse_instruction_list(WELL_FORMED, 20, false);
        assert_eq!(parsed_once, parsed_twice);
    }
}
