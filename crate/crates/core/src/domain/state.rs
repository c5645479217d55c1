//! Colony runtime state, per-stage counters, audit events, and generation
//! artifacts.

use super::config::GenerationConfig;
use super::instruction::{CandidateSample, Instruction, MutationTask};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::sync::Arc;

/// Which evolutionary operation a step runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Mutation,
    Crossover,
}

/// One operation draw, with the rng tick at which it happened so audits can
/// line draws up against the rng stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationDraw {
    pub kind: OpKind,
    /// Present exactly when `kind` is mutation.
    pub task: Option<MutationTask>,
    pub rng_tick: u64,
}

/// The instructions a step selected to evolve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionBatch {
    pub kind: OpKind,
    pub members: Vec<Instruction>,
    pub drawn_from_pool_size: usize,
}

/// Append-only audit trail entries, persisted with every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventRecord {
    OperationDraw {
        tick: u64,
        kind: OpKind,
        task: Option<MutationTask>,
    },
    SelectionBatch {
        tick: u64,
        kind: OpKind,
        member_ids: Vec<String>,
        drawn_from_pool_size: usize,
    },
}

/// Per-task mutation tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub constraint: u64,
    pub deepening: u64,
    pub erroneous_code: u64,
    pub reasoning: u64,
    pub task_complexity: u64,
}

impl TaskCounts {
    pub fn bump(&mut self, task: MutationTask) {
        *self.slot(task) += 1;
    }

    pub fn get(&self, task: MutationTask) -> u64 {
        match task {
            MutationTask::Constraint => self.constraint,
            MutationTask::Deepening => self.deepening,
            MutationTask::ErroneousCode => self.erroneous_code,
            MutationTask::Reasoning => self.reasoning,
            MutationTask::TaskComplexity => self.task_complexity,
        }
    }

    pub fn total(&self) -> u64 {
        MutationTask::ALL.iter().map(|t| self.get(*t)).sum()
    }

    fn slot(&mut self, task: MutationTask) -> &mut u64 {
        match task {
            MutationTask::Constraint => &mut self.constraint,
            MutationTask::Deepening => &mut self.deepening,
            MutationTask::ErroneousCode => &mut self.erroneous_code,
            MutationTask::Reasoning => &mut self.reasoning,
            MutationTask::TaskComplexity => &mut self.task_complexity,
        }
    }
}

/// Counters for every stage of a colony's funnel.
///
/// `candidates_in` counts instructions that entered the solution/validation/
/// judging gate chain; the five outcome counters partition it exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    /// Completed colony steps.
    pub steps: u64,
    /// Steps that drew crossover but lacked enough distinct instructions for
    /// even one few-shot group, so no call was made.
    pub crossover_skipped: u64,
    pub draws_mutation: u64,
    pub draws_crossover: u64,
    pub mutation_tasks: TaskCounts,
    /// Instructor completions requested / failed in transport (these happen
    /// before candidates exist, so they sit outside the gate conservation).
    pub instructor_calls: u64,
    pub instructor_transport_failures: u64,
    /// Raw instruction texts produced by parsing instructor output; this is
    /// the attempt basis for the per-colony budget guard.
    pub raw_candidates: u64,
    /// Parser-level drops: grammar violations, truncated tails, whitespace
    /// mutation outputs, over-cap items.
    pub parse_discarded: u64,
    /// Question-filter drops.
    pub filtered_empty: u64,
    pub filtered_length: u64,
    pub filtered_duplicate: u64,
    /// Instructions that entered the gate chain.
    pub candidates_in: u64,
    pub syntax_fail: u64,
    pub judge_reject: u64,
    pub judge_parse_fail: u64,
    /// Coder or judge call lost to transport after retries.
    pub transport_fail: u64,
    pub accepted: u64,
}

impl StageCounters {
    /// The gate-chain conservation identity: everything that entered came
    /// out through exactly one of the five outcomes.
    pub fn conservation_holds(&self) -> bool {
        self.candidates_in
            == self.syntax_fail
                + self.judge_reject
                + self.judge_parse_fail
                + self.transport_fail
                + self.accepted
    }

    /// Element-wise sum, for aggregating colony counters into run totals.
    pub fn merge(&mut self, other: &StageCounters) {
        self.steps += other.steps;
        self.crossover_skipped += other.crossover_skipped;
        self.draws_mutation += other.draws_mutation;
        self.draws_crossover += other.draws_crossover;
        for task in MutationTask::ALL {
            *self.mutation_tasks.slot(task) += other.mutation_tasks.get(task);
        }
        self.instructor_calls += other.instructor_calls;
        self.instructor_transport_failures += other.instructor_transport_failures;
        self.raw_candidates += other.raw_candidates;
        self.parse_discarded += other.parse_discarded;
        self.filtered_empty += other.filtered_empty;
        self.filtered_length += other.filtered_length;
        self.filtered_duplicate += other.filtered_duplicate;
        self.candidates_in += other.candidates_in;
        self.syntax_fail += other.syntax_fail;
        self.judge_reject += other.judge_reject;
        self.judge_parse_fail += other.judge_parse_fail;
        self.transport_fail += other.transport_fail;
        self.accepted += other.accepted;
    }
}

/// One colony's evolving population plus everything needed to reproduce and
/// resume it. Mutated by exactly one worker at a time.
#[derive(Debug, Clone)]
pub struct ColonyState {
    pub colony_index: u32,
    pub generation_index: u32,
    /// Accepted samples, in acceptance order.
    pub pool: Vec<CandidateSample>,
    /// Seed material for this generation: generation-0 seeds, or the prior
    /// generation's merged instructions. Selectable but never re-emitted.
    pub seeds: Arc<Vec<Instruction>>,
    pub rng: ChaCha8Rng,
    /// Monotone draw counter, bumped once per operation draw.
    pub rng_tick: u64,
    pub counters: StageCounters,
    pub events: Vec<EventRecord>,
}

impl ColonyState {
    /// Fresh state for one colony of one generation, with its own rng stream
    /// derived from the master seed.
    pub fn new(
        colony_index: u32,
        generation_index: u32,
        seeds: Arc<Vec<Instruction>>,
        master_seed: u64,
    ) -> Self {
        let rng = ChaCha8Rng::from_seed(colony_stream_seed(
            master_seed,
            generation_index,
            colony_index,
        ));
        ColonyState {
            colony_index,
            generation_index,
            pool: Vec::new(),
            seeds,
            rng,
            rng_tick: 0,
            counters: StageCounters::default(),
            events: Vec::new(),
        }
    }

    /// Seeds plus accepted pool instructions, in stable order.
    pub fn selectable(&self) -> Vec<&Instruction> {
        self.seeds
            .iter()
            .chain(self.pool.iter().map(|s| &s.instruction))
            .collect()
    }

    /// Every id already present (seeds and pool), for duplicate rejection.
    pub fn known_ids(&self) -> HashSet<&str> {
        self.seeds
            .iter()
            .map(|i| i.id.as_str())
            .chain(self.pool.iter().map(|s| s.instruction.id.as_str()))
            .collect()
    }
}

/// Distinct, reproducible rng seed for each (master seed, generation, colony)
/// triple so colonies never share a stream.
pub fn colony_stream_seed(master_seed: u64, generation_index: u32, colony_index: u32) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"colony-stream");
    hasher.update(master_seed.to_le_bytes());
    hasher.update(generation_index.to_le_bytes());
    hasher.update(colony_index.to_le_bytes());
    hasher.finalize().into()
}

/// The merged output of all colonies for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationArtifact {
    pub generation_index: u32,
    /// Union of colony pools: deduplicated, trimmed to N × P_max.
    pub merged_pool: Vec<CandidateSample>,
    pub config_snapshot: GenerationConfig,
}

/// Presentation order of a decontamination adjudication pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrder {
    /// Candidate first, benchmark question second.
    Forward,
    /// Benchmark question first, candidate second.
    Reverse,
}

/// One ordered same-problem query sent to the decontamination model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationRecord {
    pub order: PairOrder,
    pub response: String,
    /// Parsed True/False; `None` when the response failed to parse (which
    /// callers treat as "same problem" — fail closed).
    pub decision: Option<bool>,
}

/// Final decontamination ruling for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecontamVerdict {
    pub candidate_id: String,
    pub best_match_id: String,
    pub similarity: f64,
    /// True when similarity reached the screening threshold and the pair was
    /// sent for adjudication.
    pub screened: bool,
    /// Both ordered adjudications for screened pairs; empty otherwise. A
    /// transport failure leaves a single record explaining the conservative
    /// removal.
    pub adjudications: Vec<AdjudicationRecord>,
    pub decision_forward: Option<bool>,
    pub decision_reverse: Option<bool>,
    pub removed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::instruction::make_seed_instruction;

    fn seeds(texts: &[&str]) -> Arc<Vec<Instruction>> {
        Arc::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| make_seed_instruction(t, None, i).unwrap())
                .collect(),
        )
    }

    #[test]
    fn conservation_identity() {
        let mut c = StageCounters::default();
        assert!(c.conservation_holds());
        c.candidates_in = 10;
        c.syntax_fail = 2;
        c.judge_reject = 3;
        c.judge_parse_fail = 1;
        c.transport_fail = 0;
        c.accepted = 4;
        assert!(c.conservation_holds());
        c.accepted = 5;
        assert!(!c.conservation_holds());
    }

    #[test]
    fn counter_merge_is_elementwise() {
        let mut a = StageCounters::default();
        a.candidates_in = 3;
        a.accepted = 3;
        a.mutation_tasks.bump(MutationTask::Reasoning);
        let mut b = StageCounters::default();
        b.candidates_in = 2;
        b.syntax_fail = 2;
        b.mutation_tasks.bump(MutationTask::Reasoning);
        b.mutation_tasks.bump(MutationTask::Constraint);
        a.merge(&b);
        assert_eq!(a.candidates_in, 5);
        assert_eq!(a.accepted, 3);
        assert_eq!(a.syntax_fail, 2);
        assert_eq!(a.mutation_tasks.get(MutationTask::Reasoning), 2);
        assert_eq!(a.mutation_tasks.total(), 3);
        assert!(a.conservation_holds());
    }

    #[test]
    fn colony_streams_differ_per_colony_and_generation() {
        let a = colony_stream_seed(42, 1, 0);
        let b = colony_stream_seed(42, 1, 1);
        let c = colony_stream_seed(42, 2, 0);
        let d = colony_stream_seed(43, 1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, colony_stream_seed(42, 1, 0));
    }

    #[test]
    fn selectable_is_seeds_then_pool() {
        let state = ColonyState::new(0, 1, seeds(&["first problem", "second problem"]), 7);
        let sel = state.selectable();
        assert_eq!(sel.len(), 2);
        assert_eq!(sel[0].text, "first problem");
        assert!(state.known_ids().contains(sel[1].id.as_str()));
    }

    #[test]
    fn task_counts_cover_all_tasks() {
        let mut counts = TaskCounts::default();
        for task in MutationTask::ALL {
            counts.bump(task);
            counts.bump(task);
        }
        assert_eq!(counts.total(), 10);
        for task in MutationTask::ALL {
            assert_eq!(counts.get(task), 2);
        }
    }
}
