//! The quality gates between a raw instruction and the population pool:
//! solution generation, grammar validation of the generated code, and a
//! model-adjudicated fitness decision.
//!
//! The gates form a linear chain with no retries — an instruction whose
//! solution fails a gate is discarded, so acceptance statistics reflect the
//! models rather than retry luck. Generated code is treated strictly as
//! data: validation parses it and never executes any of it.

use crate::domain::{
    CandidateSample, CodeSolution, GenerationConfig, Instruction, JudgeVerdict, StageTimestamps,
    SyntaxStatus,
};
use crate::gateway::{CompletionRequest, Gateway, GatewayError, Role};
use crate::prompts::parse::{extract_code_block, parse_judge_decision, JudgeDecision};
use crate::prompts::{render_coder_prompt, render_judge_prompt, PromptError, PromptSet};
use std::collections::HashMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

/// Outcome of grammar validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxReport {
    pub ok: bool,
    /// First parse error with its location; `None` exactly when `ok`.
    pub diagnostic: Option<String>,
}

impl SyntaxReport {
    fn pass() -> Self {
        SyntaxReport {
            ok: true,
            diagnostic: None,
        }
    }

    fn fail(diagnostic: String) -> Self {
        SyntaxReport {
            ok: false,
            diagnostic: Some(diagnostic),
        }
    }
}

/// Errors from the gate chain.
#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no syntax validator registered for language {language_tag:?}")]
    UnsupportedLanguage { language_tag: String },
}

/// Grammar validation for one language. Implementations must treat the
/// source purely as data: no process spawns, no evaluation.
pub trait SyntaxValidator: Send + Sync {
    fn language_tag(&self) -> &str;
    fn check(&self, source: &str) -> SyntaxReport;
}

/// Validates Python sources by parsing them as a full module, in process.
pub struct PythonValidator;

impl SyntaxValidator for PythonValidator {
    fn language_tag(&self) -> &str {
        "python"
    }

    fn check(&self, source: &str) -> SyntaxReport {
        match rustpython_parser::parse(source, rustpython_parser::Mode::Module, "<candidate>") {
            Ok(_) => SyntaxReport::pass(),
            Err(err) => {
                let offset = (u32::from(err.offset) as usize).min(source.len());
                let line = source[..offset].matches('\n').count() + 1;
                let column = offset - source[..offset].rfind('\n').map_or(0, |p| p + 1) + 1;
                SyntaxReport::fail(format!("{} (line {line}, column {column})", err.error))
            }
        }
    }
}

/// Validators by language tag.
pub struct ValidatorRegistry {
    validators: HashMap<String, Arc<dyn SyntaxValidator>>,
}

impl ValidatorRegistry {
    pub fn empty() -> Self {
        ValidatorRegistry {
            validators: HashMap::new(),
        }
    }

    /// Registry with the built-in validators (currently: python).
    pub fn with_defaults() -> Self {
        let mut registry = ValidatorRegistry::empty();
        registry.register(Arc::new(PythonValidator));
        registry
    }

    pub fn register(&mut self, validator: Arc<dyn SyntaxValidator>) {
        self.validators
            .insert(validator.language_tag().to_string(), validator);
    }

    pub fn get(&self, language_tag: &str) -> Option<&Arc<dyn SyntaxValidator>> {
        self.validators.get(language_tag)
    }
}

impl Default for ValidatorRegistry {
    fn default() -> Self {
        ValidatorRegistry::with_defaults()
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Asks the coder model for a solution to `instruction` and extracts the
/// code block. The returned solution is not yet validated
/// (`syntax_ok = unchecked`).
pub async fn generate_solution(
    instruction: &Instruction,
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &GenerationConfig,
) -> Result<CodeSolution, FilterError> {
    let prompt = render_coder_prompt(prompts, instruction, config)?;
    let response = gateway
        .complete(CompletionRequest {
            role: Role::Coder,
            prompt,
            temperature: config.coder_temperature,
            top_p: config.top_p,
            max_new_tokens: config.max_new_tokens,
            stop_sequences: Vec::new(),
        })
        .await?;
    let source = extract_code_block(&response.text, &config.target_code_language);
    Ok(CodeSolution {
        language_tag: config.target_code_language.clone(),
        source,
        raw_response: response.text,
        syntax_ok: SyntaxStatus::Unchecked,
    })
}

/// Runs the registered grammar validator for the solution's language and
/// records the result on the solution. A whitespace-only source never
/// validates — a grammar accepts programs, and there is no program here.
pub fn validate_syntax(
    solution: &mut CodeSolution,
    registry: &ValidatorRegistry,
) -> Result<SyntaxReport, FilterError> {
    let validator =
        registry
            .get(&solution.language_tag)
            .ok_or_else(|| FilterError::UnsupportedLanguage {
                language_tag: solution.language_tag.clone(),
            })?;
    let report = if solution.source.trim().is_empty() {
        SyntaxReport::fail("empty source (line 1, column 1)".to_string())
    } else {
        validator.check(&solution.source)
    };
    solution.syntax_ok = if report.ok {
        SyntaxStatus::Pass
    } else {
        SyntaxStatus::Fail
    };
    Ok(report)
}

/// What the judge gate concluded; drives which funnel counter to bump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeOutcome {
    Accepted,
    Rejected,
    /// Judge answered but the decision could not be parsed; treated as a
    /// rejection, counted separately.
    ParseFailure,
    /// The judge endpoint could not be reached for this sample.
    TransportFailure,
}

/// Asks the judge model whether the sample's solution meets the bar, and
/// records verdict + transcript on the sample. The sample must have passed
/// syntax validation. Gate failures never drop the sample silently: parse
/// failures and transport failures are explicit, separately counted
/// rejections.
pub async fn judge_sample(
    mut sample: CandidateSample,
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &GenerationConfig,
) -> (CandidateSample, JudgeOutcome) {
    debug_assert_eq!(sample.solution.syntax_ok, SyntaxStatus::Pass);
    let prompt = match render_judge_prompt(prompts, &sample.instruction, &sample.solution.source, config)
    {
        Ok(prompt) => prompt,
        Err(err) => {
            sample.judge_verdict = JudgeVerdict::Rejected;
            sample.judge_transcript = format!("judge prompt rendering failed: {err}");
            sample.stage_timestamps.judged_ms = Some(now_ms());
            return (sample, JudgeOutcome::ParseFailure);
        }
    };
    let result = gateway
        .complete(CompletionRequest {
            role: Role::Judge,
            prompt,
            temperature: config.judge_temperature,
            top_p: config.top_p,
            max_new_tokens: config.max_new_tokens,
            stop_sequences: Vec::new(),
        })
        .await;
    let outcome = match result {
        Ok(response) => {
            let decision = parse_judge_decision(&response.text);
            sample.judge_transcript = response.text;
            match decision {
                JudgeDecision::Accepted => {
                    sample.judge_verdict = JudgeVerdict::Accepted;
                    JudgeOutcome::Accepted
                }
                JudgeDecision::Rejected => {
                    sample.judge_verdict = JudgeVerdict::Rejected;
                    JudgeOutcome::Rejected
                }
                JudgeDecision::ParseFailure => {
                    sample.judge_verdict = JudgeVerdict::Rejected;
                    JudgeOutcome::ParseFailure
                }
            }
        }
        Err(err) => {
            sample.judge_verdict = JudgeVerdict::Rejected;
            sample.judge_transcript = format!("judge transport failure: {err}");
            JudgeOutcome::TransportFailure
        }
    };
    sample.stage_timestamps.judged_ms = Some(now_ms());
    (sample, outcome)
}

/// Convenience for building a pending sample once a solution exists.
pub fn pending_sample(instruction: Instruction, solution: CodeSolution) -> CandidateSample {
    CandidateSample {
        instruction,
        solution,
        judge_verdict: JudgeVerdict::Pending,
        judge_transcript: String::new(),
        stage_timestamps: StageTimestamps {
            coded_ms: Some(now_ms()),
            ..StageTimestamps::default()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_seed_instruction;
    use crate::gateway::{
        Backend, BackendError, BackendInfo, CompletionResponse, EmbeddingVector, FinishReason,
        GatewayConfig, MockBackend, MockSettings,
    };
    use std::time::Duration;

    fn mock_gateway(settings: MockSettings) -> Arc<Gateway> {
        Gateway::new(
            Arc::new(MockBackend::new(settings)),
            GatewayConfig {
                max_in_flight: 8,
                retry: crate::gateway::RetryPolicy {
                    retry_limit: 3,
                    initial_backoff_ms: 1,
                    backoff_multiplier: 1.0,
                },
            },
        )
    }

    fn instruction(text: &str) -> Instruction {
        make_seed_instruction(text, None, 0).unwrap()
    }

    #[test]
    fn minimal_valid_program_passes() {
        let report = PythonValidator.check("def f():\n    return 1");
        assert!(report.ok);
        assert!(report.diagnostic.is_none());
    }

    #[test]
    fn malformed_header_fails_with_line_one_diagnostic() {
        let report = PythonValidator.check("def f(:\n    return 1");
        assert!(!report.ok);
        let diag = report.diagnostic.unwrap();
        assert!(diag.contains("line 1"), "diagnostic was: {diag}");
    }

    #[test]
    fn error_on_later_line_is_located_there() {
        let report = PythonValidator.check("x = 1\ny = 2\ndef f(:\n    pass\n");
        assert!(!report.ok);
        let diag = report.diagnostic.unwrap();
        assert!(diag.contains("line 3"), "diagnostic was: {diag}");
    }

    #[test]
    fn whitespace_only_source_never_validates() {
        let mut solution = CodeSolution {
            language_tag: "python".to_string(),
            source: "   \n".to_string(),
            raw_response: "   \n".to_string(),
            syntax_ok: SyntaxStatus::Unchecked,
        };
        let report = validate_syntax(&mut solution, &ValidatorRegistry::with_defaults()).unwrap();
        assert!(!report.ok);
        assert_eq!(solution.syntax_ok, SyntaxStatus::Fail);
    }

    #[test]
    fn unsupported_language_is_an_error_not_a_verdict() {
        let mut solution = CodeSolution {
            language_tag: "fortran".to_string(),
            source: "print *, 'hi'".to_string(),
            raw_response: String::new(),
            syntax_ok: SyntaxStatus::Unchecked,
        };
        let err = validate_syntax(&mut solution, &ValidatorRegistry::with_defaults()).unwrap_err();
        assert!(matches!(err, FilterError::UnsupportedLanguage { .. }));
        assert_eq!(solution.syntax_ok, SyntaxStatus::Unchecked);
    }

    #[test]
    fn validation_never_executes_the_code() {
        // If validation evaluated the source, this program would create the
        // probe file. Valid syntax, observable side effect.
        let probe = std::env::temp_dir().join(format!(
            "syntax-probe-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        let _ = std::fs::remove_file(&probe);
        let source = format!(
            "import pathlib\npathlib.Path({:?}).write_text('executed')\n",
            probe.display()
        );
        let report = PythonValidator.check(&source);
        assert!(report.ok, "the probe program is syntactically valid");
        assert!(
            !probe.exists(),
            "validator must never execute the code it checks"
        );
    }

    #[tokio::test]
    async fn generated_solution_has_extractable_block_and_passes_syntax() {
        let gateway = mock_gateway(MockSettings::default());
        let config = GenerationConfig::default();
        let prompts = PromptSet::builtin();
        let ins = instruction("Sum a list of integers.");
        let mut solution = generate_solution(&ins, &gateway, &prompts, &config)
            .await
            .unwrap();
        assert_eq!(solution.syntax_ok, SyntaxStatus::Unchecked);
        assert!(solution.raw_response.contains("```python"));
        assert!(solution.source.contains("def solve_"));
        let report = validate_syntax(&mut solution, &ValidatorRegistry::with_defaults()).unwrap();
        assert!(report.ok);
        assert_eq!(solution.syntax_ok, SyntaxStatus::Pass);
    }

    #[tokio::test]
    async fn invalid_generated_code_fails_the_gate() {
        let gateway = mock_gateway(MockSettings {
            p_valid: 0.0,
            ..MockSettings::default()
        });
        let config = GenerationConfig::default();
        let prompts = PromptSet::builtin();
        let ins = instruction("Sum a list of integers.");
        let mut solution = generate_solution(&ins, &gateway, &prompts, &config)
            .await
            .unwrap();
        let report = validate_syntax(&mut solution, &ValidatorRegistry::with_defaults()).unwrap();
        assert!(!report.ok);
        assert_eq!(solution.syntax_ok, SyntaxStatus::Fail);
    }

    fn passed_sample(text: &str) -> CandidateSample {
        let mut sample = pending_sample(
            instruction(text),
            CodeSolution {
                language_tag: "python".to_string(),
                source: "def f():\n    return 1".to_string(),
                raw_response: "```python\ndef f():\n    return 1\n```".to_string(),
                syntax_ok: SyntaxStatus::Unchecked,
            },
        );
        validate_syntax(&mut sample.solution, &ValidatorRegistry::with_defaults()).unwrap();
        sample
    }

    #[tokio::test]
    async fn judge_accepts_and_rejects_per_model_decision() {
        let config = GenerationConfig::default();
        let prompts = PromptSet::builtin();

        let accepting = mock_gateway(MockSettings::default());
        let (sample, outcome) =
            judge_sample(passed_sample("Reverse a string."), &accepting, &prompts, &config).await;
        assert_eq!(outcome, JudgeOutcome::Accepted);
        assert_eq!(sample.judge_verdict, JudgeVerdict::Accepted);
        assert!(sample.judge_transcript.contains("\\boxed{Yes}"));
        assert!(sample.is_pool_eligible());
        assert!(sample.stage_timestamps.judged_ms.is_some());

        let rejecting = mock_gateway(MockSettings {
            p_accept: 0.0,
            ..MockSettings::default()
        });
        let (sample, outcome) =
            judge_sample(passed_sample("Reverse a string."), &rejecting, &prompts, &config).await;
        assert_eq!(outcome, JudgeOutcome::Rejected);
        assert_eq!(sample.judge_verdict, JudgeVerdict::Rejected);
        assert!(sample.judge_transcript.contains("\\boxed{No}"));
        assert!(!sample.is_pool_eligible());
    }

    /// Backend whose judge output carries no parseable decision.
    struct MumblingBackend;

    #[async_trait::async_trait]
    impl Backend for MumblingBackend {
        async fn complete(
            &self,
            _request: &CompletionRequest,
        ) -> Result<CompletionResponse, BackendError> {
            Ok(CompletionResponse {
                text: "The code seems mostly reasonable, I suppose.".to_string(),
                finish_reason: FinishReason::Stop,
                usage: None,
                latency: Duration::ZERO,
            })
        }
        async fn embed(&self, _texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
            unreachable!()
        }
        fn describe(&self) -> BackendInfo {
            BackendInfo {
                mode: "test".to_string(),
                completion_models: HashMap::new(),
                embedding_model: "none".to_string(),
                base_url: None,
            }
        }
    }

    #[tokio::test]
    async fn unparseable_judge_output_is_a_counted_rejection() {
        let gateway = Gateway::new(Arc::new(MumblingBackend), GatewayConfig::default());
        let config = GenerationConfig::default();
        let prompts = PromptSet::builtin();
        let (sample, outcome) =
            judge_sample(passed_sample("Reverse a string."), &gateway, &prompts, &config).await;
        assert_eq!(outcome, JudgeOutcome::ParseFailure);
        assert_eq!(sample.judge_verdict, JudgeVerdict::Rejected);
        assert!(!sample.is_pool_eligible());
    }

    #[tokio::test]
    async fn judge_transport_failure_rejects_with_reason() {
        let gateway = mock_gateway(MockSettings {
            p_transport_fail: 1.0,
            ..MockSettings::default()
        });
        let config = GenerationConfig::default();
        let prompts = PromptSet::builtin();
        let (sample, outcome) =
            judge_sample(passed_sample("Reverse a string."), &gateway, &prompts, &config).await;
        assert_eq!(outcome, JudgeOutcome::TransportFailure);
        assert_eq!(sample.judge_verdict, JudgeVerdict::Rejected);
        assert!(sample.judge_transcript.contains("transport failure"));
    }

    #[tokio::test]
    async fn judge_acceptance_rate_tracks_probability() {
        let gateway = mock_gateway(MockSettings {
            p_accept: 0.7,
            ..MockSettings::default()
        });
        let config = GenerationConfig::default();
        let prompts = PromptSet::builtin();
        let mut accepted = 0u32;
        let total = 1_000u32;
        for i in 0..total {
            let (_, outcome) = judge_sample(
                passed_sample(&format!("Compute variant {i} of a checksum.")),
                &gateway,
                &prompts,
                &config,
            )
            .await;
            if outcome == JudgeOutcome::Accepted {
                accepted += 1;
            }
        }
        let rate = f64::from(accepted) / f64::from(total);
        assert!((rate - 0.7).abs() < 0.04, "acceptance rate was {rate}");
    }
}
