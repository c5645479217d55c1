//! Benchmark decontamination: every synthesized instruction is matched
//! against a benchmark-question index by exact cosine top-1, and
//! sufficiently similar pairs are adjudicated by a model in both
//! presentation orders. A pair judged "same problem" in either order — or
//! one whose adjudication failed — is removed (fail closed).

use crate::domain::{AdjudicationRecord, DecontamVerdict, Instruction, PairOrder};
use crate::gateway::{cosine, CompletionRequest, Gateway, GatewayError, Role};
use crate::prompts::parse::parse_decontam_decision;
use crate::prompts::{render_decontam_prompt, PromptSet};
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// How many texts to embed per gateway call.
const EMBED_BATCH: usize = 64;

/// One benchmark question to guard against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuestion {
    pub id: String,
    pub text: String,
}

/// Decontamination tuning. The adjudication model sees only two short
/// problems, so its token budget is small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecontamSettings {
    /// Cosine similarity at which a top-1 match is sent for adjudication.
    /// 0.0 adjudicates every candidate's top-1 match.
    pub screening_threshold: f64,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
}

impl Default for DecontamSettings {
    fn default() -> Self {
        DecontamSettings {
            screening_threshold: 0.7,
            temperature: 1.0,
            top_p: 0.95,
            max_new_tokens: 64,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecontamError {
    #[error("benchmark set is empty")]
    EmptyBenchmarkSet,
    #[error("duplicate benchmark id {id:?}")]
    DuplicateBenchmarkId { id: String },
    #[error("benchmark question {id:?} has empty text")]
    EmptyBenchmarkText { id: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("failed to read benchmark file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: unparseable benchmark record: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone)]
struct IndexEntry {
    id: String,
    text: String,
    vector: Vec<f32>,
}

/// Immutable embedding index over benchmark questions.
#[derive(Debug, Clone)]
pub struct BenchmarkIndex {
    entries: Vec<IndexEntry>,
    model_tag: String,
}

impl BenchmarkIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn question_text(&self, id: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.text.as_str())
    }
}

/// Embeds every benchmark question once and fixes the index.
pub async fn build_index(
    questions: &[BenchmarkQuestion],
    gateway: &Gateway,
) -> Result<BenchmarkIndex, DecontamError> {
    if questions.is_empty() {
        return Err(DecontamError::EmptyBenchmarkSet);
    }
    let mut seen: HashSet<&str> = HashSet::new();
    for q in questions {
        if !seen.insert(q.id.as_str()) {
            return Err(DecontamError::DuplicateBenchmarkId { id: q.id.clone() });
        }
        if q.text.trim().is_empty() {
            return Err(DecontamError::EmptyBenchmarkText { id: q.id.clone() });
        }
    }
    let mut entries = Vec::with_capacity(questions.len());
    let mut model_tag = String::new();
    for chunk in questions.chunks(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|q| q.text.clone()).collect();
        let vectors = gateway.embed(&texts).await?;
        for (question, vector) in chunk.iter().zip(vectors) {
            model_tag = vector.model_tag;
            entries.push(IndexEntry {
                id: question.id.clone(),
                text: question.text.clone(),
                vector: vector.values,
            });
        }
    }
    Ok(BenchmarkIndex { entries, model_tag })
}

/// Exhaustive cosine top-1 scan; ties break to the lowest benchmark id.
pub fn top1_against(index: &BenchmarkIndex, candidate_vector: &[f32]) -> (String, f64) {
    debug_assert!(!index.entries.is_empty());
    let mut best: Option<(&IndexEntry, f64)> = None;
    for entry in &index.entries {
        let sim = cosine(&entry.vector, candidate_vector);
        let beats = match &best {
            None => true,
            Some((held, held_sim)) => sim > *held_sim || (sim == *held_sim && entry.id < held.id),
        };
        if beats {
            best = Some((entry, sim));
        }
    }
    let (entry, sim) = best.expect("non-empty index");
    (entry.id.clone(), sim)
}

/// Embeds the candidate and returns its best benchmark match.
pub async fn top1(
    index: &BenchmarkIndex,
    candidate_text: &str,
    gateway: &Gateway,
) -> Result<(String, f64), DecontamError> {
    if index.is_empty() {
        return Err(DecontamError::EmptyBenchmarkSet);
    }
    let vectors = gateway.embed(&[candidate_text.to_string()]).await?;
    Ok(top1_against(index, &vectors[0].values))
}

/// Outcome of adjudicating one candidate/benchmark pair in both orders.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAdjudication {
    pub adjudications: Vec<AdjudicationRecord>,
    pub decision_forward: Option<bool>,
    pub decision_reverse: Option<bool>,
    pub removed: bool,
}

fn conservative_removal(reason: String) -> PairAdjudication {
    PairAdjudication {
        adjudications: vec![AdjudicationRecord {
            order: PairOrder::Forward,
            response: reason,
            decision: None,
        }],
        decision_forward: None,
        decision_reverse: None,
        removed: true,
    }
}

async fn ask_same_problem(
    first: &str,
    second: &str,
    gateway: &Gateway,
    prompts: &PromptSet,
    settings: &DecontamSettings,
) -> Result<(String, Option<bool>), GatewayError> {
    let prompt = match render_decontam_prompt(prompts, first, second) {
        Ok(prompt) => prompt,
        Err(err) => {
            return Err(GatewayError::InvalidRequest {
                reason: err.to_string(),
            })
        }
    };
    let response = gateway
        .complete(CompletionRequest {
            role: Role::Decontaminator,
            prompt,
            temperature: settings.temperature,
            top_p: settings.top_p,
            max_new_tokens: settings.max_new_tokens,
            stop_sequences: Vec::new(),
        })
        .await?;
    let decision = parse_decontam_decision(&response.text);
    Ok((response.text, decision))
}

/// Asks the adjudication model whether the two texts pose the same problem,
/// in both presentation orders. An unparseable answer counts as "same"
/// (fail closed); an unreachable endpoint collapses to a single
/// conservative-removal record.
pub async fn adjudicate_pair(
    candidate_text: &str,
    benchmark_text: &str,
    gateway: &Gateway,
    prompts: &PromptSet,
    settings: &DecontamSettings,
) -> PairAdjudication {
    let forward = ask_same_problem(candidate_text, benchmark_text, gateway, prompts, settings);
    let reverse = ask_same_problem(benchmark_text, candidate_text, gateway, prompts, settings);
    let (forward, reverse) = tokio::join!(forward, reverse);
    match (forward, reverse) {
        (Ok((f_resp, f_dec)), Ok((r_resp, r_dec))) => PairAdjudication {
            adjudications: vec![
                AdjudicationRecord {
                    order: PairOrder::Forward,
                    response: f_resp,
                    decision: f_dec,
                },
                AdjudicationRecord {
                    order: PairOrder::Reverse,
                    response: r_resp,
                    decision: r_dec,
                },
            ],
            decision_forward: f_dec,
            decision_reverse: r_dec,
            // Either order saying "same" removes; a parse failure in an
            // order is treated as "same" for that order.
            removed: f_dec.unwrap_or(true) || r_dec.unwrap_or(true),
        },
        (Err(err), _) | (_, Err(err)) => conservative_removal(format!(
            "adjudication transport failure; removed conservatively: {err}"
        )),
    }
}

/// Full decontamination result.
#[derive(Debug, Clone)]
pub struct DecontamReport {
    /// Input instructions judged clean, in input order.
    pub retained: Vec<Instruction>,
    /// One verdict per input instruction, in input order.
    pub verdicts: Vec<DecontamVerdict>,
    pub screened: u64,
    pub removed: u64,
}

/// Screens every instruction against the index and adjudicates pairs at or
/// above the screening threshold. Candidates compare by their combined
/// text (instruction plus input context), matching what a consumer of the
/// dataset would see.
pub async fn decontaminate(
    instructions: &[Instruction],
    index: &BenchmarkIndex,
    gateway: &Gateway,
    prompts: &PromptSet,
    settings: &DecontamSettings,
) -> Result<DecontamReport, DecontamError> {
    if index.is_empty() {
        return Err(DecontamError::EmptyBenchmarkSet);
    }
    // Embed all candidates up front, in index order.
    let texts: Vec<String> = instructions.iter().map(|i| i.combined_text()).collect();
    let mut candidate_vectors: Vec<Vec<f32>> = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_BATCH) {
        for vector in gateway.embed(chunk).await? {
            candidate_vectors.push(vector.values);
        }
    }

    // Top-1 scan and screening decision per candidate, no model calls yet.
    let matches: Vec<(String, f64, bool)> = candidate_vectors
        .iter()
        .map(|vector| {
            let (id, sim) = top1_against(index, vector);
            let screened = sim >= settings.screening_threshold;
            (id, sim, screened)
        })
        .collect();

    // Adjudicate all screened pairs concurrently (gateway bounds in-flight).
    let adjudications = join_all(matches.iter().zip(instructions).map(
        |((match_id, _sim, screened), instruction)| async move {
            if !*screened {
                return None;
            }
            let benchmark_text = index
                .question_text(match_id)
                .expect("top-1 id comes from the index");
            Some(
                adjudicate_pair(
                    &instruction.combined_text(),
                    benchmark_text,
                    gateway,
                    prompts,
                    settings,
                )
                .await,
            )
        },
    ))
    .await;

    let mut report = DecontamReport {
        retained: Vec::new(),
        verdicts: Vec::with_capacity(instructions.len()),
        screened: 0,
        removed: 0,
    };
    for ((instruction, (match_id, similarity, screened)), adjudication) in
        instructions.iter().zip(matches).zip(adjudications)
    {
        let verdict = match adjudication {
            Some(pair) => {
                report.screened += 1;
                DecontamVerdict {
                    candidate_id: instruction.id.clone(),
                    best_match_id: match_id,
                    similarity,
                    screened,
                    adjudications: pair.adjudications,
                    decision_forward: pair.decision_forward,
                    decision_reverse: pair.decision_reverse,
                    removed: pair.removed,
                }
            }
            None => DecontamVerdict {
                candidate_id: instruction.id.clone(),
                best_match_id: match_id,
                similarity,
                screened,
                adjudications: Vec::new(),
                decision_forward: None,
                decision_reverse: None,
                removed: false,
            },
        };
        if verdict.removed {
            report.removed += 1;
        } else {
            report.retained.push(instruction.clone());
        }
        report.verdicts.push(verdict);
    }
    Ok(report)
}

/// Loads benchmark questions from a file. `.jsonl`/`.json` files hold one
/// JSON object per line with `id`/`task_id` and `text`/`prompt`/`question`
/// fields; any other extension is read as plain text, one question per
/// non-empty line, with ids derived from the file name.
pub fn load_benchmark_questions(path: &Path) -> Result<Vec<BenchmarkQuestion>, DecontamError> {
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| DecontamError::Io {
        path: display.clone(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "benchmark".to_string());
    let json_lines = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    );
    let mut questions = Vec::new();
    for (line_no, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if json_lines {
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| DecontamError::Parse {
                    path: display.clone(),
                    line: line_no + 1,
                    reason: e.to_string(),
                })?;
            let id = value
                .get("id")
                .or_else(|| value.get("task_id"))
                .and_then(|v| v.as_str())
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("{stem}-{}", line_no + 1));
            let text = value
                .get("text")
                .or_else(|| value.get("prompt"))
                .or_else(|| value.get("question"))
                .and_then(|v| v.as_str())
                .ok_or_else(|| DecontamError::Parse {
                    path: display.clone(),
                    line: line_no + 1,
                    reason: "no text/prompt/question field".to_string(),
                })?;
            questions.push(BenchmarkQuestion {
                id,
                text: text.to_string(),
            });
        } else {
            questions.push(BenchmarkQuestion {
                id: format!("{stem}-{}", line_no + 1),
                text: line.to_string(),
            });
        }
    }
    if questions.is_empty() {
        return Err(DecontamError::EmptyBenchmarkSet);
    }
    Ok(questions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_seed_instruction;
    use crate::gateway::{GatewayConfig, MockBackend, MockSettings, RetryPolicy};
    use std::sync::Arc;

    fn mock_gateway(settings: MockSettings) -> Arc<Gateway> {
        Gateway::new(
            Arc::new(MockBackend::new(settings)),
            GatewayConfig {
                max_in_flight: 8,
                retry: RetryPolicy {
                    retry_limit: 1,
                    initial_backoff_ms: 1,
                    backoff_multiplier: 1.0,
                },
            },
        )
    }

    fn questions(texts: &[&str]) -> Vec<BenchmarkQuestion> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| BenchmarkQuestion {
                id: format!("bench/{i}"),
                text: t.to_string(),
            })
            .collect()
    }

    #[tokio::test]
    async fn index_counts_are_additive_and_self_similarity_is_one() {
        let gateway = mock_gateway(MockSettings::default());
        let first = questions(&["alpha beta gamma", "delta epsilon zeta"]);
        let mut both = first.clone();
        both.extend(questions(&["eta theta iota"]).into_iter().map(|mut q| {
            q.id = format!("other/{}", q.id);
            q
        }));
        let index = build_index(&both, &gateway).await.unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(index.model_tag(), "mock-embed-v1");
        for entry in &index.entries {
            assert!((cosine(&entry.vector, &entry.vector) - 1.0).abs() < 1e-6);
        }
    }

    #[tokio::test]
    async fn duplicate_or_empty_benchmarks_are_rejected() {
        let gateway = mock_gateway(MockSettings::default());
        let mut qs = questions(&["alpha beta", "gamma delta"]);
        qs[1].id = qs[0].id.clone();
        assert!(matches!(
            build_index(&qs, &gateway).await,
            Err(DecontamError::DuplicateBenchmarkId { .. })
        ));
        assert!(matches!(
            build_index(&[], &gateway).await,
            Err(DecontamError::EmptyBenchmarkSet)
        ));
        let qs = questions(&["alpha beta", "   "]);
        assert!(matches!(
            build_index(&qs, &gateway).await,
            Err(DecontamError::EmptyBenchmarkText { .. })
        ));
    }

    #[tokio::test]
    async fn identical_candidate_hits_its_benchmark_at_similarity_one() {
        let gateway = mock_gateway(MockSettings::default());
        let qs = questions(&[
            "reverse a linked list in place",
            "find the median of two sorted arrays",
            "serialize a binary tree to a string",
        ]);
        let index = build_index(&qs, &gateway).await.unwrap();
        let (id, sim) = top1(&index, "find the median of two sorted arrays", &gateway)
            .await
            .unwrap();
        assert_eq!(id, "bench/1");
        assert!((sim - 1.0).abs() < 1e-6, "similarity was {sim}");
    }

    #[tokio::test]
    async fn exact_ties_break_to_the_lowest_benchmark_id() {
        let gateway = mock_gateway(MockSettings::default());
        let qs = vec![
            BenchmarkQuestion {
                id: "z-suite/9".to_string(),
                text: "identical benchmark problem".to_string(),
            },
            BenchmarkQuestion {
                id: "a-suite/1".to_string(),
                text: "identical benchmark problem".to_string(),
            },
        ];
        let index = build_index(&qs, &gateway).await.unwrap();
        let (id, sim) = top1(&index, "identical benchmark problem", &gateway)
            .await
            .unwrap();
        assert_eq!(id, "a-suite/1");
        assert!((sim - 1.0).abs() < 1e-6);
    }

    #[tokio::test]
    async fn disjoint_vocabulary_still_returns_a_match() {
        let gateway = mock_gateway(MockSettings::default());
        let qs = questions(&["alpha beta gamma delta"]);
        let index = build_index(&qs, &gateway).await.unwrap();
        let (id, sim) = top1(&index, "omicron sigma tau upsilon", &gateway)
            .await
            .unwrap();
        assert_eq!(id, "bench/0");
        assert!(sim < 0.9, "unrelated texts scored {sim}");
    }

    #[tokio::test]
    async fn top1_matches_an_independent_scan_on_many_candidates() {
        let gateway = mock_gateway(MockSettings::default());
        let qs: Vec<BenchmarkQuestion> = (0..40)
            .map(|i| BenchmarkQuestion {
                id: format!("b/{i:02}"),
                text: format!("benchmark problem about topic {i} with flavor {}", i * 7 % 13),
            })
            .collect();
        let index = build_index(&qs, &gateway).await.unwrap();
        for i in 0..100 {
            let text = format!("candidate problem about topic {} with flavor {}", i % 40, i % 13);
            let vectors = gateway.embed(&[text.clone()]).await.unwrap();
            let vector = &vectors[0].values;
            let fast = top1_against(&index, vector);
            // Independent fold with explicit (similarity, reversed-id) ordering.
            let slow = index
                .entries
                .iter()
                .map(|e| (e.id.clone(), cosine(&e.vector, vector)))
                .fold(None::<(String, f64)>, |best, (id, sim)| match best {
                    None => Some((id, sim)),
                    Some((bid, bsim)) => {
                        if sim > bsim || (sim == bsim && id < bid) {
                            Some((id, sim))
                        } else {
                            Some((bid, bsim))
                        }
                    }
                })
                .unwrap();
            assert_eq!(fast.0, slow.0, "candidate {i}");
        }
    }

    #[tokio::test]
    async fn adjudication_is_bidirectional_and_ors_the_decisions() {
        let gateway = mock_gateway(MockSettings::default());
        let prompts = PromptSet::builtin();
        let settings = DecontamSettings::default();
        // Same problem in both orders: removed.
        let same = adjudicate_pair(
            "Sort the list ascending.",
            "sort the list, ascending",
            &gateway,
            &prompts,
            &settings,
        )
        .await;
        assert_eq!(same.adjudications.len(), 2);
        assert_eq!(same.decision_forward, Some(true));
        assert_eq!(same.decision_reverse, Some(true));
        assert!(same.removed);
        // Different problems: retained.
        let diff = adjudicate_pair(
            "Sort the list ascending.",
            "Walk a binary tree in order.",
            &gateway,
            &prompts,
            &settings,
        )
        .await;
        assert_eq!(diff.adjudications.len(), 2);
        assert_eq!(diff.decision_forward, Some(false));
        assert_eq!(diff.decision_reverse, Some(false));
        assert!(!diff.removed);
        assert_eq!(diff.adjudications[0].order, PairOrder::Forward);
        assert_eq!(diff.adjudications[1].order, PairOrder::Reverse);
    }

    /// Backend that answers "True" only when the first problem contains a
    /// marker word — so forward and reverse orders disagree.
    struct OneSidedBackend;

    #[async_trait::async_trait]
    impl crate::gateway::Backend for OneSidedBackend {
        async fn complete(
            &self,
            request: &CompletionRequest,
        ) -> Result<crate::gateway::CompletionResponse, crate::gateway::BackendError> {
            let first = request
                .prompt
                .split("First problem:")
                .nth(1)
                .and_then(|rest| rest.split("Second problem:").next())
                .unwrap_or("");
            let text = if first.contains("synthetized-marker") {
                "True"
            } else {
                "False"
            };
            Ok(crate::gateway::CompletionResponse {
                text: text.to_string(),
                finish_reason: crate::gateway::FinishReason::Stop,
                usage: None,
                latency: std::time::Duration::ZERO,
            })
        }
        async fn embed(
            &self,
            _texts: &[String],
        ) -> Result<Vec<crate::gateway::EmbeddingVector>, crate::gateway::BackendError> {
            unreachable!()
        }
        fn describe(&self) -> crate::gateway::BackendInfo {
            crate::gateway::BackendInfo {
                mode: "test".to_string(),
                completion_models: Default::default(),
                embedding_model: "none".to_string(),
                base_url: None,
            }
        }
    }

    #[tokio::test]
    async fn a_single_true_in_either_order_removes() {
        let gateway = Gateway::new(Arc::new(OneSidedBackend), GatewayConfig::default());
        let prompts = PromptSet::builtin();
        let settings = DecontamSettings::default();
        let pair = adjudicate_pair(
            "candidate with synthetized-marker inside",
            "benchmark question text",
            &gateway,
            &prompts,
            &settings,
        )
        .await;
        assert_eq!(pair.decision_forward, Some(true));
        assert_eq!(pair.decision_reverse, Some(false));
        assert!(pair.removed);
    }

    /// Backend that mumbles: responses never parse as True/False.
    struct VagueBackend;

    #[async_trait::async_trait]
    impl crate::gateway::Backend for VagueBackend {
        async fn complete(
            &self,
            _request: &CompletionRequest,
        ) -> Result<crate::gateway::CompletionResponse, crate::gateway::BackendError> {
            Ok(crate::gateway::CompletionResponse {
                text: "They feel kind of similar, honestly.".to_string(),
                finish_reason: crate::gateway::FinishReason::Stop,
                usage: None,
                latency: std::time::Duration::ZERO,
            })
        }
        async fn embed(
            &self,
            _texts: &[String],
        ) -> Result<Vec<crate::gateway::EmbeddingVector>, crate::gateway::BackendError> {
            unreachable!()
        }
        fn describe(&self) -> crate::gateway::BackendInfo {
            crate::gateway::BackendInfo {
                mode: "test".to_string(),
                completion_models: Default::default(),
                embedding_model: "none".to_string(),
                base_url: None,
            }
        }
    }

    #[tokio::test]
    async fn unparseable_adjudication_fails_closed() {
        let gateway = Gateway::new(Arc::new(VagueBackend), GatewayConfig::default());
        let prompts = PromptSet::builtin();
        let pair = adjudicate_pair(
            "candidate text here",
            "benchmark text here",
            &gateway,
            &prompts,
            &DecontamSettings::default(),
        )
        .await;
        assert_eq!(pair.decision_forward, None);
        assert_eq!(pair.decision_reverse, None);
        assert!(pair.removed, "no parseable decision must remove");
        assert_eq!(pair.adjudications.len(), 2);
    }

    #[tokio::test]
    async fn transport_failure_collapses_to_one_conservative_record() {
        let gateway = mock_gateway(MockSettings {
            p_transport_fail: 1.0,
            ..MockSettings::default()
        });
        let prompts = PromptSet::builtin();
        let pair = adjudicate_pair(
            "candidate text here",
            "benchmark text here",
            &gateway,
            &prompts,
            &DecontamSettings::default(),
        )
        .await;
        assert!(pair.removed);
        assert_eq!(pair.adjudications.len(), 1);
        assert!(pair.adjudications[0].response.contains("transport"));
        assert_eq!(pair.adjudications[0].decision, None);
    }

    fn planted_corpus() -> (Vec<BenchmarkQuestion>, Vec<Instruction>, HashSet<String>) {
        // Benchmarks and clean candidates use disjoint vocabularies so no
        // clean candidate can accidentally reach the screening threshold.
        let benchmarks: Vec<BenchmarkQuestion> = (0..20)
            .map(|i| BenchmarkQuestion {
                id: format!("suite/{i:02}"),
                text: format!("benchmark exercise alpha{i} beta{i} gamma{i} delta{i}"),
            })
            .collect();
        let mut candidates: Vec<Instruction> = (0..475)
            .map(|i| {
                make_seed_instruction(
                    &format!("candidate puzzle omicron{i} sigma{} tau{}", i % 31, i % 17),
                    None,
                    i,
                )
                .unwrap()
            })
            .collect();
        let mut planted_ids = HashSet::new();
        for i in 0..25 {
            let source = &benchmarks[i % benchmarks.len()];
            // Case/punctuation/word-order paraphrase: same normalized word
            // multiset, so the embedding matches exactly and the
            // adjudicator says "same". The rotation varies so the five
            // benchmarks planted twice yield textually distinct plants.
            let words: Vec<&str> = source.text.split_whitespace().collect();
            let rot = 1 + i / benchmarks.len();
            let rotated: Vec<&str> = words[rot..].iter().chain(&words[..rot]).copied().collect();
            let paraphrase = format!("{}!!", rotated.join(" ").to_uppercase());
            let ins = make_seed_instruction(&paraphrase, None, 1000 + i).unwrap();
            planted_ids.insert(ins.id.clone());
            candidates.push(ins);
        }
        (benchmarks, candidates, planted_ids)
    }

    #[tokio::test]
    async fn planted_paraphrases_are_removed_exactly() {
        let gateway = mock_gateway(MockSettings::default());
        let prompts = PromptSet::builtin();
        let settings = DecontamSettings::default();
        let (benchmarks, candidates, planted_ids) = planted_corpus();
        let index = build_index(&benchmarks, &gateway).await.unwrap();
        let report = decontaminate(&candidates, &index, &gateway, &prompts, &settings)
            .await
            .unwrap();
        assert_eq!(report.removed, 25);
        assert_eq!(report.retained.len(), 475);
        assert_eq!(report.verdicts.len(), 500);
        let removed_ids: HashSet<String> = report
            .verdicts
            .iter()
            .filter(|v| v.removed)
            .map(|v| v.candidate_id.clone())
            .collect();
        assert_eq!(removed_ids, planted_ids, "exactly the planted set removed");
        // Output partition: retained ∪ removed = input, disjoint.
        let retained_ids: HashSet<String> =
            report.retained.iter().map(|i| i.id.clone()).collect();
        assert!(retained_ids.is_disjoint(&removed_ids));
        assert_eq!(retained_ids.len() + removed_ids.len(), 500);
        // Bidirectionality + removal soundness on every screened verdict.
        for verdict in &report.verdicts {
            if verdict.screened {
                assert!(
                    verdict.adjudications.len() == 2
                        || (verdict.adjudications.len() == 1 && verdict.removed),
                    "screened pair must carry 2 records or 1 conservative removal"
                );
                let forward = verdict.decision_forward.unwrap_or(true);
                let reverse = verdict.decision_reverse.unwrap_or(true);
                assert_eq!(verdict.removed, forward || reverse);
            } else {
                assert!(verdict.adjudications.is_empty());
                assert!(!verdict.removed);
            }
        }
    }

    #[tokio::test]
    async fn degenerate_thresholds_behave() {
        let gateway = mock_gateway(MockSettings::default());
        let prompts = PromptSet::builtin();
        let (benchmarks, candidates, _) = planted_corpus();
        let index = build_index(&benchmarks, &gateway).await.unwrap();
        // Above-maximal threshold: nothing screened, nothing removed.
        let shut = DecontamSettings {
            screening_threshold: 1.01,
            ..DecontamSettings::default()
        };
        let report = decontaminate(&candidates, &index, &gateway, &prompts, &shut)
            .await
            .unwrap();
        assert_eq!(report.screened, 0);
        assert_eq!(report.removed, 0);
        assert_eq!(report.retained.len(), 500);
        // Zero threshold: everything adjudicated, same removal set.
        let open = DecontamSettings {
            screening_threshold: 0.0,
            ..DecontamSettings::default()
        };
        let report = decontaminate(&candidates, &index, &gateway, &prompts, &open)
            .await
            .unwrap();
        assert_eq!(report.screened, 500);
        assert_eq!(report.removed, 25);
    }

    #[tokio::test]
    async fn empty_index_is_rejected_before_any_calls() {
        let gateway = mock_gateway(MockSettings::default());
        let prompts = PromptSet::builtin();
        let index = BenchmarkIndex {
            entries: Vec::new(),
            model_tag: "mock-embed-v1".to_string(),
        };
        let candidates = vec![make_seed_instruction("some candidate text", None, 0).unwrap()];
        assert!(matches!(
            decontaminate(
                &candidates,
                &index,
                &gateway,
                &prompts,
                &DecontamSettings::default()
            )
            .await,
            Err(DecontamError::EmptyBenchmarkSet)
        ));
    }

    #[test]
    fn benchmark_files_load_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let jsonl = dir.path().join("suite.jsonl");
        std::fs::write(
            &jsonl,
            r#"{"task_id": "HE/0", "prompt": "def add(a, b): ..."}
{"id": "MB/1", "text": "Write a function to add two numbers."}
{"question": "What does this code print?"}
"#,
        )
        .unwrap();
        let qs = load_benchmark_questions(&jsonl).unwrap();
        assert_eq!(qs.len(), 3);
        assert_eq!(qs[0].id, "HE/0");
        assert_eq!(qs[1].text, "Write a function to add two numbers.");
        assert_eq!(qs[2].id, "suite-3", "fallback id from file stem + line");

        let plain = dir.path().join("extra.txt");
        std::fs::write(&plain, "first question\n\nsecond question\n").unwrap();
        let qs = load_benchmark_questions(&plain).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].id, "extra-1");
        assert_eq!(qs[1].id, "extra-3", "line numbers are physical");

        let bad = dir.path().join("broken.jsonl");
        std::fs::write(&bad, "{not json}\n").unwrap();
        assert!(matches!(
            load_benchmark_questions(&bad),
            Err(DecontamError::Parse { line: 1, .. })
        ));
    }
}
