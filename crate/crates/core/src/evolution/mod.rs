//! The evolutionary control flow: operation sampling, batch selection,
//! mutation and crossover application, question filtering, colony stepping,
//! and per-generation aggregation.
//!
//! A colony repeatedly runs one *step*: draw an operation (mutation with
//! probability `mutation_probability`, else crossover), select a batch from
//! seeds ∪ accepted pool, ask the instructor model for new instructions,
//! filter them, then push survivors through the solution/validation/judging
//! gates. Accepted samples join the pool until it reaches `max_population`.
//! All randomness comes from the colony's own seeded stream, and every draw
//! happens before any network call, so identical configurations replay to
//! identical pools.

use crate::domain::{
    content_id, normalize_input, CandidateSample, ColonyState, EventRecord, GenerationArtifact,
    GenerationConfig, Instruction, MutationTask, OpKind, OperationDraw, Origin, SelectionBatch,
};
use crate::filters::{
    generate_solution, judge_sample, now_ms, pending_sample, validate_syntax, FilterError,
    JudgeOutcome, ValidatorRegistry,
};
use crate::gateway::{CompletionRequest, FinishReason, Gateway, GatewayError, Role};
use crate::prompts::parse::{parse_instruction_list, parse_single_instruction};
use crate::prompts::{render_crossover_prompt, render_mutation_prompt, PromptError, PromptSet};
use futures::future::join_all;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::sync::OnceLock;

/// Consecutive steps in which every instructor call failed before the colony
/// declares the endpoint down. Retries inside the gateway mean this
/// represents `3 × (retry_limit + 1)` failed attempts per call slot.
const OUTAGE_STEP_THRESHOLD: u32 = 3;

/// Errors that stop a colony. Per-call trouble is absorbed into counters;
/// only systemic conditions surface here.
#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("nothing to select from: seeds and pool are both empty")]
    EmptyPool,
    #[error("gateway shut down mid-run")]
    Shutdown,
    #[error("endpoint outage: {failed_steps} consecutive steps lost every instructor call")]
    Outage { failed_steps: u32 },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no syntax validator registered for configured language {language_tag:?}")]
    UnsupportedLanguage { language_tag: String },
}

/// A parsed instructor output that has not yet been filtered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCandidate {
    pub text: String,
    pub input_context: Option<String>,
    pub origin: Origin,
    pub parent_ids: Vec<String>,
}

/// Chooses mutation (with a uniformly drawn task) or crossover.
pub fn draw_operation(
    rng: &mut ChaCha8Rng,
    rng_tick: &mut u64,
    config: &GenerationConfig,
) -> OperationDraw {
    *rng_tick += 1;
    let is_mutation = rng.random::<f64>() < config.mutation_probability;
    let task = if is_mutation {
        Some(MutationTask::ALL[rng.random_range(0..MutationTask::ALL.len())])
    } else {
        None
    };
    OperationDraw {
        kind: if is_mutation {
            OpKind::Mutation
        } else {
            OpKind::Crossover
        },
        task,
        rng_tick: *rng_tick,
    }
}

/// Samples a batch for the drawn operation: uniform, without replacement
/// inside the batch, from seeds ∪ accepted pool. Successive batches draw
/// from the full set again (with replacement across batches). Batch size is
/// the operation's configured size, clamped to what is selectable.
pub fn select_batch(
    state: &mut ColonyState,
    draw: &OperationDraw,
    config: &GenerationConfig,
) -> Result<SelectionBatch, EvolutionError> {
    let seed_len = state.seeds.len();
    let total = seed_len + state.pool.len();
    if total == 0 {
        return Err(EvolutionError::EmptyPool);
    }
    let target = match draw.kind {
        OpKind::Mutation => config.mutation_batch,
        OpKind::Crossover => config.crossover_batch,
    } as usize;
    let amount = target.min(total);
    state.rng_tick += 1;
    let picks = rand::seq::index::sample(&mut state.rng, total, amount);
    let members: Vec<Instruction> = picks
        .iter()
        .map(|i| {
            if i < seed_len {
                state.seeds[i].clone()
            } else {
                state.pool[i - seed_len].instruction.clone()
            }
        })
        .collect();
    Ok(SelectionBatch {
        kind: draw.kind,
        members,
        drawn_from_pool_size: total,
    })
}

/// Fresh uniform task draw for each member of a mutation batch, taken from
/// the colony stream before any network call so replays stay exact.
pub fn draw_member_tasks(
    rng: &mut ChaCha8Rng,
    rng_tick: &mut u64,
    count: usize,
) -> Vec<MutationTask> {
    *rng_tick += count as u64;
    (0..count)
        .map(|_| MutationTask::ALL[rng.random_range(0..MutationTask::ALL.len())])
        .collect()
}

/// What one instructor phase produced, with its bookkeeping.
#[derive(Debug, Default)]
pub struct InstructorYield {
    pub raws: Vec<RawCandidate>,
    pub calls: u64,
    pub transport_failures: u64,
    pub parse_discarded: u64,
}

/// One instructor completion per batch member, each with its own freshly
/// drawn task. A member's failure never aborts its siblings.
pub async fn apply_mutation(
    batch: &SelectionBatch,
    tasks: &[MutationTask],
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &GenerationConfig,
) -> Result<InstructorYield, EvolutionError> {
    debug_assert_eq!(batch.kind, OpKind::Mutation);
    debug_assert_eq!(batch.members.len(), tasks.len());
    let mut calls = Vec::with_capacity(batch.members.len());
    for (member, task) in batch.members.iter().zip(tasks) {
        let prompt = render_mutation_prompt(prompts, member, *task)?;
        calls.push(async move {
            let result = gateway
                .complete(CompletionRequest {
                    role: Role::Instructor,
                    prompt,
                    temperature: config.instructor_temperature,
                    top_p: config.top_p,
                    max_new_tokens: config.max_new_tokens,
                    stop_sequences: Vec::new(),
                })
                .await;
            (member, *task, result)
        });
    }
    let mut tally = InstructorYield::default();
    for (member, task, result) in join_all(calls).await {
        tally.calls += 1;
        match result {
            Ok(response) => match parse_single_instruction(&response.text, task) {
                Ok(text) => tally.raws.push(RawCandidate {
                    text,
                    input_context: None,
                    origin: Origin::Mutation(task),
                    parent_ids: vec![member.id.clone()],
                }),
                Err(_) => tally.parse_discarded += 1,
            },
            Err(GatewayError::ShutdownInProgress) => return Err(EvolutionError::Shutdown),
            Err(_) => tally.transport_failures += 1,
        }
    }
    Ok(tally)
}

/// Splits a crossover batch into few-shot groups of exactly
/// `shots` distinct members. A short final group is topped up by re-drawing
/// from the rest of the batch.
pub fn partition_crossover_chunks(
    members: &[Instruction],
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Instruction>> {
    debug_assert!(members.len() >= shots && shots > 0);
    let mut chunks: Vec<Vec<Instruction>> = members.chunks(shots).map(|c| c.to_vec()).collect();
    let last_len = chunks.last().map_or(0, |c| c.len());
    if last_len < shots {
        let missing = shots - last_len;
        let last_ids: HashSet<&str> = chunks
            .last()
            .map(|c| c.iter().map(|m| m.id.as_str()).collect())
            .unwrap_or_default();
        let candidates: Vec<&Instruction> = members
            .iter()
            .filter(|m| !last_ids.contains(m.id.as_str()))
            .collect();
        let picks = rand::seq::index::sample(rng, candidates.len(), missing);
        let extras: Vec<Instruction> = picks.iter().map(|i| candidates[i].clone()).collect();
        chunks.last_mut().expect("non-empty chunks").extend(extras);
    }
    chunks
}

/// One instructor completion per few-shot group; every group member is
/// recorded as a parent of every instruction the group produced. A group's
/// failure never aborts its siblings.
pub async fn apply_crossover(
    batch: &SelectionBatch,
    rng: &mut ChaCha8Rng,
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &GenerationConfig,
) -> Result<InstructorYield, EvolutionError> {
    debug_assert_eq!(batch.kind, OpKind::Crossover);
    let shots = config.crossover_shots as usize;
    let chunks = partition_crossover_chunks(&batch.members, shots, rng);
    let mut calls = Vec::with_capacity(chunks.len());
    for chunk in &chunks {
        let prompt = render_crossover_prompt(prompts, chunk, config)?;
        calls.push(async move {
            let result = gateway
                .complete(CompletionRequest {
                    role: Role::Instructor,
                    prompt,
                    temperature: config.instructor_temperature,
                    top_p: config.top_p,
                    max_new_tokens: config.max_new_tokens,
                    stop_sequences: Vec::new(),
                })
                .await;
            (chunk, result)
        });
    }
    let mut tally = InstructorYield::default();
    for (chunk, result) in join_all(calls).await {
        tally.calls += 1;
        match result {
            Ok(response) => {
                let parsed = parse_instruction_list(
                    &response.text,
                    config.crossover_max_outputs as usize,
                    response.finish_reason == FinishReason::Length,
                );
                tally.parse_discarded += parsed.discarded_count;
                let parent_ids: Vec<String> = chunk.iter().map(|m| m.id.clone()).collect();
                for (text, input) in parsed.items {
                    tally.raws.push(RawCandidate {
                        text,
                        input_context: normalize_input(input.as_deref()),
                        origin: Origin::Crossover,
                        parent_ids: parent_ids.clone(),
                    });
                }
            }
            Err(GatewayError::ShutdownInProgress) => return Err(EvolutionError::Shutdown),
            Err(_) => tally.transport_failures += 1,
        }
    }
    Ok(tally)
}

/// Filter drops, by reason.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FilterTally {
    pub empty: u64,
    pub length: u64,
    pub duplicate: u64,
}

fn leading_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\d+\.\s*)?(?:New\s)?Instruction:\s*").expect("static regex"))
}

/// Strips leading enumeration artifacts like `3. Instruction:` or
/// `New Instruction:` that occasionally leak through response parsing.
fn strip_marker_artifacts(text: &str) -> String {
    let mut out = text.trim();
    for _ in 0..3 {
        match leading_marker_re().find(out) {
            Some(m) if m.start() == 0 => out = out[m.end()..].trim_start(),
            _ => break,
        }
    }
    out.trim().to_string()
}

/// Turns raw instructor output into pool-ready [`Instruction`]s: strip
/// marker artifacts, drop empties, enforce length bounds, and reject exact
/// duplicates of anything in seeds, pool, or earlier in this batch. Bounds
/// and duplicates are judged on the final (stripped) text, so every survivor
/// is admissible exactly as it will be stored.
pub fn filter_questions(
    raws: Vec<RawCandidate>,
    state: &ColonyState,
    config: &GenerationConfig,
) -> (Vec<Instruction>, FilterTally) {
    let mut tally = FilterTally::default();
    let mut survivors: Vec<Instruction> = Vec::new();
    let known = state.known_ids();
    let mut batch_ids: HashSet<String> = HashSet::new();
    for raw in raws {
        let text = strip_marker_artifacts(&raw.text);
        if text.is_empty() {
            tally.empty += 1;
            continue;
        }
        let chars = text.chars().count();
        if chars < config.min_instruction_chars || chars > config.max_instruction_chars {
            tally.length += 1;
            continue;
        }
        let input_context = normalize_input(raw.input_context.as_deref());
        let id = content_id(&text, input_context.as_deref());
        if known.contains(id.as_str()) || batch_ids.contains(&id) {
            tally.duplicate += 1;
            continue;
        }
        batch_ids.insert(id.clone());
        survivors.push(Instruction {
            id,
            text,
            input_context,
            origin: raw.origin,
            parent_ids: raw.parent_ids,
            generation_index: state.generation_index,
            colony_index: state.colony_index,
        });
    }
    (survivors, tally)
}

/// What one colony step did, for logging and loop control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepReport {
    pub drew: OpKind,
    pub instructor_calls: u64,
    pub instructor_transport_failures: u64,
    pub raw_count: usize,
    pub entered_gate: usize,
    pub accepted_now: usize,
    pub pool_size: usize,
    pub skipped_crossover: bool,
}

enum GateResult {
    SyntaxFail,
    Judged(Box<CandidateSample>, JudgeOutcome),
    Transport,
    Fatal(EvolutionError),
}

/// Runs one full evolutionary step and folds every outcome into the
/// colony's counters. The step always completes its whole batch, even when
/// the pool crosses `max_population` mid-step; aggregation trims overshoot.
pub async fn colony_step(
    state: &mut ColonyState,
    gateway: &Gateway,
    prompts: &PromptSet,
    registry: &ValidatorRegistry,
    config: &GenerationConfig,
) -> Result<StepReport, EvolutionError> {
    let draw = draw_operation(&mut state.rng, &mut state.rng_tick, config);
    state.events.push(EventRecord::OperationDraw {
        tick: draw.rng_tick,
        kind: draw.kind,
        task: draw.task,
    });
    match draw.kind {
        OpKind::Mutation => state.counters.draws_mutation += 1,
        OpKind::Crossover => state.counters.draws_crossover += 1,
    }

    let batch = select_batch(state, &draw, config)?;
    state.events.push(EventRecord::SelectionBatch {
        tick: state.rng_tick,
        kind: batch.kind,
        member_ids: batch.members.iter().map(|m| m.id.clone()).collect(),
        drawn_from_pool_size: batch.drawn_from_pool_size,
    });

    let instructor_yield = match draw.kind {
        OpKind::Mutation => {
            let tasks = draw_member_tasks(&mut state.rng, &mut state.rng_tick, batch.members.len());
            for task in &tasks {
                state.counters.mutation_tasks.bump(*task);
            }
            apply_mutation(&batch, &tasks, gateway, prompts, config).await?
        }
        OpKind::Crossover => {
            let shots = config.crossover_shots as usize;
            if batch.members.len() < shots {
                // Not enough distinct material for even one few-shot group.
                state.counters.crossover_skipped += 1;
                state.counters.steps += 1;
                return Ok(StepReport {
                    drew: draw.kind,
                    instructor_calls: 0,
                    instructor_transport_failures: 0,
                    raw_count: 0,
                    entered_gate: 0,
                    accepted_now: 0,
                    pool_size: state.pool.len(),
                    skipped_crossover: true,
                });
            }
            state.rng_tick += 1;
            apply_crossover(&batch, &mut state.rng, gateway, prompts, config).await?
        }
    };
    state.counters.instructor_calls += instructor_yield.calls;
    state.counters.instructor_transport_failures += instructor_yield.transport_failures;
    state.counters.parse_discarded += instructor_yield.parse_discarded;
    state.counters.raw_candidates += instructor_yield.raws.len() as u64;
    let raw_count = instructor_yield.raws.len();

    let (fresh, tally) = filter_questions(instructor_yield.raws, state, config);
    state.counters.filtered_empty += tally.empty;
    state.counters.filtered_length += tally.length;
    state.counters.filtered_duplicate += tally.duplicate;
    let entered_gate = fresh.len();

    let gates = fresh.into_iter().map(|instruction| async move {
        let started = now_ms();
        let solution = match generate_solution(&instruction, gateway, prompts, config).await {
            Ok(solution) => solution,
            Err(FilterError::Gateway(GatewayError::ShutdownInProgress)) => {
                return GateResult::Fatal(EvolutionError::Shutdown)
            }
            Err(FilterError::Gateway(_)) => return GateResult::Transport,
            Err(FilterError::Prompt(err)) => return GateResult::Fatal(err.into()),
            Err(FilterError::UnsupportedLanguage { language_tag }) => {
                return GateResult::Fatal(EvolutionError::UnsupportedLanguage { language_tag })
            }
        };
        let mut sample = pending_sample(instruction, solution);
        sample.stage_timestamps.generated_ms = Some(started);
        let report = match validate_syntax(&mut sample.solution, registry) {
            Ok(report) => report,
            Err(FilterError::UnsupportedLanguage { language_tag }) => {
                return GateResult::Fatal(EvolutionError::UnsupportedLanguage { language_tag })
            }
            Err(_) => unreachable!("validate_syntax only fails on unsupported language"),
        };
        sample.stage_timestamps.validated_ms = Some(now_ms());
        if !report.ok {
            return GateResult::SyntaxFail;
        }
        let (sample, outcome) = judge_sample(sample, gateway, prompts, config).await;
        GateResult::Judged(Box::new(sample), outcome)
    });

    let mut accepted_now = 0usize;
    let mut fatal: Option<EvolutionError> = None;
    for result in join_all(gates).await {
        match result {
            GateResult::Fatal(err) => fatal = Some(err),
            GateResult::Transport => {
                state.counters.candidates_in += 1;
                state.counters.transport_fail += 1;
            }
            GateResult::SyntaxFail => {
                state.counters.candidates_in += 1;
                state.counters.syntax_fail += 1;
            }
            GateResult::Judged(sample, outcome) => {
                state.counters.candidates_in += 1;
                match outcome {
                    JudgeOutcome::Accepted => {
                        state.counters.accepted += 1;
                        accepted_now += 1;
                        state.pool.push(*sample);
                    }
                    JudgeOutcome::Rejected => state.counters.judge_reject += 1,
                    JudgeOutcome::ParseFailure => state.counters.judge_parse_fail += 1,
                    JudgeOutcome::TransportFailure => state.counters.transport_fail += 1,
                }
            }
        }
    }
    if let Some(err) = fatal {
        return Err(err);
    }
    state.counters.steps += 1;
    debug_assert!(state.counters.conservation_holds());
    Ok(StepReport {
        drew: draw.kind,
        instructor_calls: instructor_yield.calls,
        instructor_transport_failures: instructor_yield.transport_failures,
        raw_count,
        entered_gate,
        accepted_now,
        pool_size: state.pool.len(),
        skipped_crossover: false,
    })
}

/// Step-by-step control from the caller (checkpointing, clean interruption).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDirective {
    Continue,
    Halt,
}

/// Why a colony stopped stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColonyEndReason {
    /// Pool reached `max_population`.
    TargetReached,
    /// The attempt budget ran out with the pool still short.
    BudgetExhausted,
    /// The observer asked for a halt (e.g. operator interruption).
    Interrupted,
}

/// Steps a colony until its pool reaches `max_population`, the attempt
/// budget runs out, or the observer halts it. The observer is called after
/// every completed step with the current state, which is the checkpoint
/// boundary.
pub async fn run_colony<F>(
    state: &mut ColonyState,
    gateway: &Gateway,
    prompts: &PromptSet,
    registry: &ValidatorRegistry,
    config: &GenerationConfig,
    mut on_step: F,
) -> Result<ColonyEndReason, EvolutionError>
where
    F: FnMut(&ColonyState) -> StepDirective,
{
    if state.seeds.is_empty() && state.pool.is_empty() {
        return Err(EvolutionError::EmptyPool);
    }
    if registry.get(&config.target_code_language).is_none() {
        return Err(EvolutionError::UnsupportedLanguage {
            language_tag: config.target_code_language.clone(),
        });
    }
    let budget = config.effective_attempt_budget();
    let target = config.max_population as usize;
    let mut consecutive_dead_steps = 0u32;
    while state.pool.len() < target {
        // The budget bounds raw candidate attempts; the step bound breaks
        // zero-yield livelock (e.g. a backend that only emits whitespace).
        if state.counters.raw_candidates >= budget || state.counters.steps >= budget {
            return Ok(ColonyEndReason::BudgetExhausted);
        }
        let report = colony_step(state, gateway, prompts, registry, config).await?;
        if report.instructor_calls > 0 {
            if report.instructor_transport_failures == report.instructor_calls {
                consecutive_dead_steps += 1;
                if consecutive_dead_steps >= OUTAGE_STEP_THRESHOLD {
                    return Err(EvolutionError::Outage {
                        failed_steps: consecutive_dead_steps,
                    });
                }
            } else {
                consecutive_dead_steps = 0;
            }
        }
        if on_step(state) == StepDirective::Halt {
            return Ok(ColonyEndReason::Interrupted);
        }
    }
    Ok(ColonyEndReason::TargetReached)
}

fn aggregate_trim_seed(master_seed: u64, generation_index: u32) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"aggregate-trim");
    hasher.update(master_seed.to_le_bytes());
    hasher.update(generation_index.to_le_bytes());
    hasher.finalize().into()
}

/// Merges colony pools for one generation: duplicates collapse to their
/// first appearance (colonies visited in index order), and anything past
/// `n_colonies × max_population` is trimmed uniformly at random with a
/// seed-derived stream, preserving the order of the survivors.
pub fn aggregate_generation(
    colonies: &[ColonyState],
    generation_index: u32,
    config: &GenerationConfig,
) -> GenerationArtifact {
    let mut ordered: Vec<&ColonyState> = colonies.iter().collect();
    ordered.sort_by_key(|c| c.colony_index);
    let mut seen: HashSet<&str> = HashSet::new();
    let mut merged: Vec<&CandidateSample> = Vec::new();
    for colony in ordered {
        for sample in &colony.pool {
            if seen.insert(sample.instruction.id.as_str()) {
                merged.push(sample);
            }
        }
    }
    let cap = config.n_colonies as usize * config.max_population as usize;
    let merged_pool: Vec<CandidateSample> = if merged.len() > cap {
        let mut rng = ChaCha8Rng::from_seed(aggregate_trim_seed(config.rng_seed, generation_index));
        let mut keep: Vec<usize> = rand::seq::index::sample(&mut rng, merged.len(), cap)
            .iter()
            .collect();
        keep.sort_unstable();
        keep.into_iter().map(|i| merged[i].clone()).collect()
    } else {
        merged.into_iter().cloned().collect()
    };
    GenerationArtifact {
        generation_index,
        merged_pool,
        config_snapshot: config.clone(),
    }
}
