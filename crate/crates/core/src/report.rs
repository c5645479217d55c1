//! Run metrics: turns a run manifest into a per-stage funnel, operation
//! mix, per-task mutation counts, and token usage, in both human-readable
//! text and machine-readable JSON.

use crate::domain::{MutationTask, StageCounters};
use crate::gateway::AccountingSnapshot;
use crate::persist::{RunManifest, RunStatus};
use serde::{Deserialize, Serialize};

/// Counts at each stage a candidate must survive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    /// Raw instruction texts parsed out of instructor responses.
    pub generated: u64,
    /// Survivors of the question filters (what entered the gate chain).
    pub filtered: u64,
    pub syntax_passed: u64,
    pub judge_accepted: u64,
    /// Retained after benchmark decontamination, when that stage ran.
    pub post_decontamination: Option<u64>,
    // Drop detail, by cause.
    pub parse_discarded: u64,
    pub filtered_empty: u64,
    pub filtered_length: u64,
    pub filtered_duplicate: u64,
    pub syntax_fail: u64,
    pub judge_reject: u64,
    pub judge_parse_fail: u64,
    pub transport_fail: u64,
    pub decontamination_removed: Option<u64>,
}

/// Step/draw bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationSummary {
    pub steps: u64,
    pub draws_mutation: u64,
    pub draws_crossover: u64,
    /// draws_mutation / (draws_mutation + draws_crossover); 0 when no draws.
    pub mutation_fraction: f64,
    pub crossover_skipped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub draws: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructorSummary {
    pub calls: u64,
    pub transport_failures: u64,
}

/// The whole report; serializes directly as the machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub status: RunStatus,
    pub generations: usize,
    pub colonies_per_generation: usize,
    pub seed_count: u64,
    pub funnel: Funnel,
    pub operations: OperationSummary,
    pub mutation_tasks: Vec<TaskSummary>,
    pub instructor: InstructorSummary,
    /// candidates_in == syntax_fail + judge_reject + judge_parse_fail +
    /// transport_fail + accepted, over the summed counters.
    pub conservation_ok: bool,
    pub token_usage: Option<AccountingSnapshot>,
}

/// Builds the report for a manifest. Counters are the manifest totals,
/// which the pipeline sums over every colony of every generation.
pub fn build_report(manifest: &RunManifest) -> RunReport {
    let totals: &StageCounters = &manifest.totals;
    let draws = totals.draws_mutation + totals.draws_crossover;
    let mutation_fraction = if draws == 0 {
        0.0
    } else {
        totals.draws_mutation as f64 / draws as f64
    };
    RunReport {
        run_id: manifest.run_id.clone(),
        status: manifest.status,
        generations: manifest.generations.len(),
        colonies_per_generation: manifest
            .generations
            .iter()
            .map(|g| g.colonies.len())
            .max()
            .unwrap_or(0),
        seed_count: manifest.seed_count,
        funnel: Funnel {
            generated: totals.raw_candidates,
            filtered: totals.candidates_in,
            syntax_passed: totals.candidates_in.saturating_sub(totals.syntax_fail),
            judge_accepted: totals.accepted,
            post_decontamination: manifest.decontam.as_ref().map(|d| d.retained),
            parse_discarded: totals.parse_discarded,
            filtered_empty: totals.filtered_empty,
            filtered_length: totals.filtered_length,
            filtered_duplicate: totals.filtered_duplicate,
            syntax_fail: totals.syntax_fail,
            judge_reject: totals.judge_reject,
            judge_parse_fail: totals.judge_parse_fail,
            transport_fail: totals.transport_fail,
            decontamination_removed: manifest.decontam.as_ref().map(|d| d.removed),
        },
        operations: OperationSummary {
            steps: totals.steps,
            draws_mutation: totals.draws_mutation,
            draws_crossover: totals.draws_crossover,
            mutation_fraction,
            crossover_skipped: totals.crossover_skipped,
        },
        mutation_tasks: MutationTask::ALL
            .iter()
            .map(|task| TaskSummary {
                task: task.as_str().to_string(),
                draws: totals.mutation_tasks.get(*task),
            })
            .collect(),
        instructor: InstructorSummary {
            calls: totals.instructor_calls,
            transport_failures: totals.instructor_transport_failures,
        },
        conservation_ok: totals.conservation_holds(),
        token_usage: manifest.token_usage.clone(),
    }
}

/// Machine-readable form.
pub fn render_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Human-readable form.
pub fn render_text(report: &RunReport) -> String {
    let mut out = String::new();
    let f = &report.funnel;
    let o = &report.operations;
    out.push_str(&format!(
        "run {}  status: {}\n",
        report.run_id,
        match report.status {
            RunStatus::InProgress => "in progress",
            RunStatus::Interrupted => "interrupted",
            RunStatus::Complete => "complete",
            RunStatus::PartialBudget => "complete (budget-limited)",
            RunStatus::Failed => "failed",
        }
    ));
    out.push_str(&format!(
        "generations: {}  colonies: {}  seeds: {}\n",
        report.generations, report.colonies_per_generation, report.seed_count
    ));
    out.push_str("funnel:\n");
    out.push_str(&format!(
        "  generated            {:>8}   (parser discarded {})\n",
        f.generated, f.parse_discarded
    ));
    out.push_str(&format!(
        "  question filters     {:>8}   (empty {}, length {}, duplicate {})\n",
        f.filtered, f.filtered_empty, f.filtered_length, f.filtered_duplicate
    ));
    out.push_str(&format!(
        "  syntax passed        {:>8}   (failed {})\n",
        f.syntax_passed, f.syntax_fail
    ));
    out.push_str(&format!(
        "  judge accepted       {:>8}   (rejected {}, unparseable {}, transport lost {})\n",
        f.judge_accepted, f.judge_reject, f.judge_parse_fail, f.transport_fail
    ));
    if let (Some(retained), Some(removed)) = (f.post_decontamination, f.decontamination_removed)
    {
        out.push_str(&format!(
            "  decontaminated       {:>8}   (removed {})\n",
            retained, removed
        ));
    }
    out.push_str(&format!(
        "operations: {} steps ({} mutation, {} crossover; mutation fraction {:.4}; crossover skipped {})\n",
        o.steps, o.draws_mutation, o.draws_crossover, o.mutation_fraction, o.crossover_skipped
    ));
    out.push_str("mutation tasks:");
    for task in &report.mutation_tasks {
        out.push_str(&format!(" {} {}", task.task, task.draws));
    }
    out.push('\n');
    out.push_str(&format!(
        "instructor calls: {} (transport failures {})\n",
        report.instructor.calls, report.instructor.transport_failures
    ));
    if let Some(tokens) = &report.token_usage {
        let prompt = tokens.instructor.prompt_tokens
            + tokens.coder.prompt_tokens
            + tokens.judge.prompt_tokens
            + tokens.decontaminator.prompt_tokens;
        let completion = tokens.instructor.completion_tokens
            + tokens.coder.completion_tokens
            + tokens.judge.completion_tokens
            + tokens.decontaminator.completion_tokens;
        out.push_str(&format!(
            "tokens: {prompt} prompt, {completion} completion\n"
        ));
    }
    out.push_str(&format!(
        "counter conservation: {}\n",
        if report.conservation_ok { "ok" } else { "VIOLATED" }
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::gateway::BackendInfo;
    use crate::persist::{ColonyEntry, DecontamEntry, FileRef, GenerationEntry};

    fn manifest_with(totals: StageCounters) -> RunManifest {
        let mut manifest = RunManifest::new(
            "run-42",
            PipelineConfig::default(),
            "aa".to_string(),
            12,
            BackendInfo {
                mode: "mock".to_string(),
                completion_models: Default::default(),
                embedding_model: "mock-embed-v1".to_string(),
                base_url: None,
            },
            0,
        );
        manifest.status = RunStatus::Complete;
        manifest.totals = totals;
        manifest.generations.push(GenerationEntry {
            generation_index: 0,
            colonies: (0..4)
                .map(|i| ColonyEntry {
                    colony_index: i,
                    checkpoint: FileRef {
                        path: format!("gen_000/colony_{i:03}.ckpt"),
                        sha256: "00".to_string(),
                    },
                    end_reason: None,
                })
                .collect(),
            artifact: None,
        });
        manifest
    }

    fn busy_counters() -> StageCounters {
        let mut c = StageCounters::default();
        c.steps = 50;
        c.draws_mutation = 30;
        c.draws_crossover = 20;
        c.mutation_tasks.bump(MutationTask::Constraint);
        c.mutation_tasks.bump(MutationTask::Constraint);
        c.mutation_tasks.bump(MutationTask::Reasoning);
        c.instructor_calls = 90;
        c.instructor_transport_failures = 2;
        c.raw_candidates = 1000;
        c.parse_discarded = 40;
        c.filtered_empty = 10;
        c.filtered_length = 20;
        c.filtered_duplicate = 70;
        c.candidates_in = 900;
        c.syntax_fail = 100;
        c.judge_reject = 150;
        c.judge_parse_fail = 30;
        c.transport_fail = 20;
        c.accepted = 600;
        c
    }

    #[test]
    fn funnel_numbers_come_straight_from_the_counters() {
        let mut manifest = manifest_with(busy_counters());
        manifest.decontam = Some(DecontamEntry {
            verdicts: FileRef {
                path: "decontam_verdicts.jsonl".to_string(),
                sha256: "00".to_string(),
            },
            screened: 30,
            removed: 25,
            retained: 575,
        });
        let report = build_report(&manifest);
        assert_eq!(report.funnel.generated, 1000);
        assert_eq!(report.funnel.filtered, 900);
        assert_eq!(report.funnel.syntax_passed, 800);
        assert_eq!(report.funnel.judge_accepted, 600);
        assert_eq!(report.funnel.post_decontamination, Some(575));
        assert_eq!(report.funnel.decontamination_removed, Some(25));
        assert_eq!(report.operations.mutation_fraction, 0.6);
        assert!(report.conservation_ok);
        assert_eq!(report.colonies_per_generation, 4);
        let constraint = report
            .mutation_tasks
            .iter()
            .find(|t| t.task == "constraint")
            .unwrap();
        assert_eq!(constraint.draws, 2);
    }

    #[test]
    fn full_rejection_run_shows_zero_accepted_and_nonzero_attempts() {
        let mut counters = busy_counters();
        counters.accepted = 0;
        counters.judge_reject = 750;
        let report = build_report(&manifest_with(counters));
        assert_eq!(report.funnel.judge_accepted, 0);
        assert!(report.funnel.generated > 0);
        assert!(report.conservation_ok);
        let text = render_text(&report);
        assert!(text.contains("judge accepted              0"), "text:\n{text}");
    }

    #[test]
    fn broken_conservation_is_called_out() {
        let mut counters = busy_counters();
        counters.accepted += 1; // now the identity cannot hold
        let report = build_report(&manifest_with(counters));
        assert!(!report.conservation_ok);
        assert!(render_text(&report).contains("VIOLATED"));
    }

    #[test]
    fn both_renderings_carry_the_same_numbers() {
        let manifest = manifest_with(busy_counters());
        let report = build_report(&manifest);
        let json = render_json(&report);
        let parsed: RunReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
        let text = render_text(&report);
        for needle in ["run run-42", "1000", "900", "600", "mutation fraction 0.6000"] {
            assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
        }
    }

    #[test]
    fn token_usage_appears_when_the_manifest_carries_it() {
        let mut manifest = manifest_with(busy_counters());
        let mut usage = AccountingSnapshot::default();
        usage.instructor.prompt_tokens = 1000;
        usage.instructor.completion_tokens = 500;
        usage.judge.prompt_tokens = 200;
        manifest.token_usage = Some(usage);
        let report = build_report(&manifest);
        let text = render_text(&report);
        assert!(text.contains("tokens: 1200 prompt, 500 completion"), "{text}");
    }
}
