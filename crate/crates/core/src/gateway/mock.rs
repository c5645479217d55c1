//! Deterministic offline backend. Every response is a pure function of
//! (settings.seed, role, prompt), so identical runs produce identical
//! transcripts regardless of call interleaving.

use super::{
    Backend, BackendError, BackendInfo, CompletionRequest, CompletionResponse, EmbeddingVector,
    FinishReason, Role, Usage,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::time::Duration;

/// Behavior knobs for the mock backend. Probabilities are evaluated from a
/// seeded hash of the prompt, so they hold in aggregate while staying
/// reproducible per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    pub seed: u64,
    /// Instructions emitted per multi-instruction (crossover) response.
    pub crossover_items: u32,
    /// Probability a generated solution parses cleanly.
    pub p_valid: f64,
    /// Probability the judge says Yes.
    pub p_accept: f64,
    /// Probability a mutation response is blank (models do misfire).
    pub p_empty: f64,
    /// Probability any completion fails in transport.
    pub p_transport_fail: f64,
    pub embed_dim: usize,
    /// Simulated per-call latency; 0 runs at full speed.
    pub latency_ms: u64,
}

impl Default for MockSettings {
    fn default() -> Self {
        MockSettings {
            seed: 42,
            crossover_items: 10,
            p_valid: 1.0,
            p_accept: 1.0,
            p_empty: 0.0,
            p_transport_fail: 0.0,
            embed_dim: 64,
            latency_ms: 0,
        }
    }
}

/// Offline stand-in for every model role plus embeddings.
#[derive(Debug, Clone)]
pub struct MockBackend {
    settings: MockSettings,
}

impl MockBackend {
    pub fn new(settings: MockSettings) -> Self {
        MockBackend { settings }
    }

    pub fn settings(&self) -> &MockSettings {
        &self.settings
    }

    fn digest(&self, purpose: &str, payload: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.settings.seed.to_le_bytes());
        hasher.update(purpose.as_bytes());
        hasher.update([0u8]);
        hasher.update(payload.as_bytes());
        hasher.finalize().into()
    }

    /// Uniform draw in [0,1) keyed on (seed, purpose, payload).
    fn draw(&self, purpose: &str, payload: &str) -> f64 {
        let d = self.digest(purpose, payload);
        let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        (x >> 11) as f64 / (1u64 << 53) as f64
    }

    fn synth_instruction(&self, salt: &str, prompt: &str) -> String {
        const VERBS: [&str; 8] = [
            "Implement", "Design", "Write", "Refactor", "Construct", "Devise", "Optimize",
            "Compose",
        ];
        const SUBJECTS: [&str; 8] = [
            "a function", "a class", "an iterator", "a parser", "a scheduler", "a cache",
            "a queue", "a validator",
        ];
        const ACTIONS: [&str; 8] = [
            "merges", "partitions", "normalizes", "deduplicates", "reverses", "indexes",
            "compresses", "balances",
        ];
        const STRUCTURES: [&str; 8] = [
            "nested dictionaries",
            "sorted intervals",
            "binary trees",
            "token streams",
            "sparse matrices",
            "linked lists",
            "event logs",
            "grid paths",
        ];
        const QUALIFIERS: [&str; 8] = [
            "in a single pass",
            "without recursion",
            "using constant extra space",
            "while preserving order",
            "with overflow checks",
            "under concurrent access",
            "handling unicode input",
            "with streaming input",
        ];
        let d = self.digest(salt, prompt);
        fn pick(bank: &[&'static str; 8], byte: u8) -> &'static str {
            bank[(byte % 8) as usize]
        }
        let tag: String = d[8..14].iter().map(|b| format!("{b:02x}")).collect();
        format!(
            "{} {} that {} {} {} (case {}).",
            pick(&VERBS, d[0]),
            pick(&SUBJECTS, d[1]),
            pick(&ACTIONS, d[2]),
            pick(&STRUCTURES, d[3]),
            pick(&QUALIFIERS, d[4]),
            tag
        )
    }

    fn instructor_response(&self, prompt: &str) -> String {
        if prompt.trim_end().ends_with("New Instruction:") {
            if self.draw("empty", prompt) < self.settings.p_empty {
                return "   ".to_string();
            }
            return format!("New Instruction:\n{}", self.synth_instruction("mutate", prompt));
        }
        // Multi-instruction response: continue the prompt's trailing
        // "{n}. Instruction:" cue, then emit the remaining items in full.
        let next_index = prompt
            .trim_end()
            .rsplit_once("\n")
            .map(|(_, tail)| tail)
            .and_then(|tail| tail.trim().strip_suffix(". Instruction:"))
            .and_then(|n| n.trim().parse::<usize>().ok())
            .unwrap_or(1);
        let mut out = String::new();
        for i in 0..self.settings.crossover_items as usize {
            let n = next_index + i;
            let salt = format!("crossover-{i}");
            let text = self.synth_instruction(&salt, prompt);
            let input = if self.digest(&salt, prompt)[15] % 3 == 0 {
                let d = self.digest("input", &format!("{salt}:{prompt}"));
                format!("values = [{}, {}, {}]", d[0], d[1], d[2])
            } else {
                "<noinput>".to_string()
            };
            if i == 0 {
                out.push_str(&format!("{text}\n{n}. Input: {input}\n"));
            } else {
                out.push_str(&format!("###\n{n}. Instruction: {text}\n{n}. Input: {input}\n"));
            }
        }
        out
    }

    fn coder_response(&self, prompt: &str) -> String {
        let d = self.digest("code", prompt);
        let tag: String = d[..4].iter().map(|b| format!("{b:02x}")).collect();
        if self.draw("valid", prompt) < self.settings.p_valid {
            format!(
                "Here is the solution.\n\n```python\ndef solve_{tag}(data):\n    total = 0\n    for item in data:\n        total += item * {}\n    return total % {}\n```\n",
                d[4] % 9 + 1,
                d[5] % 97 + 2
            )
        } else {
            format!("```python\ndef broken_{tag}(data:\n    return (\n```\n")
        }
    }

    fn judge_response(&self, prompt: &str) -> String {
        if self.draw("accept", prompt) < self.settings.p_accept {
            "<judge>\nThe solution is concise and addresses the task directly.\nDecision: \\boxed{Yes}\n</judge>".to_string()
        } else {
            "<judge>\nThe code does not follow the question's requirements.\nDecision: \\boxed{No}\n</judge>".to_string()
        }
    }

    fn decontaminator_response(&self, prompt: &str) -> String {
        let first = extract_between(prompt, "First problem:", "Second problem:");
        let second = extract_between(prompt, "Second problem:", "Disregard");
        let same = match (first, second) {
            (Some(a), Some(b)) => normalize_problem(a) == normalize_problem(b),
            _ => false,
        };
        if same { "True".to_string() } else { "False".to_string() }
    }
}

fn extract_between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    let to = rest.find(end)?;
    Some(&rest[..to])
}

/// Case/punctuation/word-order-insensitive fingerprint of a problem text.
fn normalize_problem(text: &str) -> Vec<String> {
    let mut words: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect();
    words.sort();
    words
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[async_trait::async_trait]
impl Backend for MockBackend {
    async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, BackendError> {
        if self.settings.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.settings.latency_ms)).await;
        }
        if self.draw("transport", &request.prompt) < self.settings.p_transport_fail {
            return Err(BackendError::Transport("mock transport failure".to_string()));
        }
        let text = match request.role {
            Role::Instructor => self.instructor_response(&request.prompt),
            Role::Coder => self.coder_response(&request.prompt),
            Role::Judge => self.judge_response(&request.prompt),
            Role::Decontaminator => self.decontaminator_response(&request.prompt),
        };
        // Respect the token budget the way a real server would: cut the tail
        // and report a length stop.
        let limit = request.max_new_tokens as usize;
        let words: Vec<&str> = text.split_whitespace().collect();
        let (text, finish_reason) = if words.len() > limit {
            (words[..limit].join(" "), FinishReason::Length)
        } else {
            (text, FinishReason::Stop)
        };
        Ok(CompletionResponse {
            usage: Some(Usage {
                prompt_tokens: word_count(&request.prompt),
                completion_tokens: word_count(&text),
            }),
            text,
            finish_reason,
            latency: Duration::from_millis(self.settings.latency_ms),
        })
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if self.settings.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.settings.latency_ms)).await;
        }
        let dim = self.settings.embed_dim.max(1);
        Ok(texts
            .iter()
            .map(|text| {
                let mut acc = vec![0.0f64; dim];
                let words: Vec<String> = text
                    .to_lowercase()
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty())
                    .map(|w| w.to_string())
                    .collect();
                if words.is_empty() {
                    acc[0] = 1.0;
                } else {
                    for word in &words {
                        let mut rng = ChaCha8Rng::from_seed(self.digest("embed-word", word));
                        for slot in acc.iter_mut() {
                            *slot += chacha_unit(&mut rng) * 2.0 - 1.0;
                        }
                    }
                }
                let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
                let values = if norm == 0.0 {
                    let mut basis = vec![0.0f32; dim];
                    basis[0] = 1.0;
                    basis
                } else {
                    acc.iter().map(|x| (x / norm) as f32).collect()
                };
                EmbeddingVector {
                    values,
                    model_tag: "mock-embed-v1".to_string(),
                }
            })
            .collect())
    }

    fn describe(&self) -> BackendInfo {
        let completion_models = Role::ALL
            .iter()
            .map(|role| (role.as_str().to_string(), "mock-instruct-v1".to_string()))
            .collect::<HashMap<_, _>>();
        BackendInfo {
            mode: "mock".to_string(),
            completion_models,
            embedding_model: "mock-embed-v1".to_string(),
            base_url: None,
        }
    }
}

fn chacha_unit(rng: &mut ChaCha8Rng) -> f64 {
    let mut bytes = [0u8; 8];
    rand_chacha::rand_core::RngCore::fill_bytes(rng, &mut bytes);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}
