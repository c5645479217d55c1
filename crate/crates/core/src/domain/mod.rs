//! Core entities: instructions, samples, configuration, colony state.

mod config;
mod instruction;
mod state;

pub use config::{validate_config, ConfigError, GenerationConfig};
pub use instruction::{
    content_id, make_seed_instruction, normalize_input, CandidateSample, CodeSolution,
    Instruction, InstructionError, JudgeVerdict, MutationTask, Origin, StageTimestamps,
    SyntaxStatus, NO_INPUT,
};
pub use state::{
    colony_stream_seed, AdjudicationRecord, ColonyState, DecontamVerdict, EventRecord,
    GenerationArtifact, OpKind, OperationDraw, PairOrder, SelectionBatch, StageCounters,
    TaskCounts,
};
