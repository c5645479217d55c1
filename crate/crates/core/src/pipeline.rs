//! End-to-end orchestration: seeds in, generations of concurrent colonies,
//! per-generation aggregation, optional benchmark decontamination, and a
//! canonical export — with every colony checkpointed after each step so an
//! interrupted run resumes to the exact output an uninterrupted run would
//! have produced.

use crate::config::{BackendMode, PipelineConfig};
use crate::decontam::{build_index, decontaminate, load_benchmark_questions, DecontamError};
use crate::domain::{CandidateSample, ColonyState, Instruction};
use crate::evolution::{
    aggregate_generation, run_colony, ColonyEndReason, EvolutionError, StepDirective,
};
use crate::export::{to_records, write_chat_jsonl, write_jsonl, ExportError, EXPORT_SCHEMA_JSON};
use crate::filters::ValidatorRegistry;
use crate::gateway::{BackendError, Gateway, HttpBackend, MockBackend};
use crate::persist::{
    digest_file, ColonyEntry, DecontamEntry, GenerationEntry, PersistError, RunManifest, RunStatus,
    RunStore,
};
use crate::prompts::PromptSet;
use crate::seeds::{load_seeds, SeedError};
use futures::future::join_all;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Seed(#[from] SeedError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Decontam(#[from] DecontamError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("run {run_id} is marked {status:?} and cannot be resumed")]
    UnresumableStatus { run_id: String, status: RunStatus },
}

/// Caller-facing knobs that are not part of the reproducible config.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub seed_path: PathBuf,
    /// Halt the whole run after this many colony steps (summed across
    /// colonies); `None` runs to completion. Used to exercise interruption.
    pub abort_after_steps: Option<u64>,
}

/// What a run (or resume) produced.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub run_id: String,
    pub status: RunStatus,
    pub manifest: RunManifest,
    /// Records in the final export (present when the run completed).
    pub exported_records: Option<usize>,
    /// Colonies that stopped on budget rather than reaching the target,
    /// summed over all generations.
    pub budget_exhausted_colonies: u32,
    /// True when a resume found the run already finished and did nothing.
    pub already_complete: bool,
}

impl PipelineOutcome {
    pub fn interrupted(&self) -> bool {
        self.status == RunStatus::Interrupted
    }
}

/// Builds the gateway described by the config.
pub fn build_gateway(config: &PipelineConfig) -> Result<Arc<Gateway>, BackendError> {
    Ok(match config.backend.mode {
        BackendMode::Mock => Gateway::new(
            Arc::new(MockBackend::new(config.backend.mock.clone())),
            config.gateway.clone(),
        ),
        BackendMode::Http => Gateway::new(
            Arc::new(HttpBackend::new(config.backend.http.clone())?),
            config.gateway.clone(),
        ),
    })
}

/// Shared progress state for one run attempt.
struct StepBudget {
    taken: AtomicU64,
    limit: Option<u64>,
}

impl StepBudget {
    fn new(limit: Option<u64>) -> Self {
        StepBudget {
            taken: AtomicU64::new(0),
            limit,
        }
    }

    /// Counts one step; true when the run should halt.
    fn step_and_check(&self) -> bool {
        let taken = self.taken.fetch_add(1, Ordering::SeqCst) + 1;
        match self.limit {
            Some(limit) => taken >= limit,
            None => false,
        }
    }

    fn exceeded(&self) -> bool {
        match self.limit {
            Some(limit) => self.taken.load(Ordering::SeqCst) >= limit,
            None => false,
        }
    }
}

/// Starts a fresh run from a seed file.
pub async fn run_pipeline(
    config: &PipelineConfig,
    options: &RunOptions,
    gateway: &Gateway,
    prompts: &PromptSet,
) -> Result<PipelineOutcome, PipelineError> {
    config.validate()?;
    let store = RunStore::create(&options.out_dir, &options.run_id)?;

    // Copy the seed file into the run directory so resuming is
    // self-contained, then load from the copy.
    let seed_copy = store.run_dir().join("seeds.jsonl");
    let seed_bytes =
        std::fs::read(&options.seed_path).map_err(|source| PersistError::Io {
            path: options.seed_path.display().to_string(),
            source,
        })?;
    crate::persist::write_atomic(&seed_copy, &seed_bytes)?;
    let seed_load = load_seeds(&seed_copy)?;

    let manifest = RunManifest::new(
        &options.run_id,
        config.redacted(),
        digest_file(&seed_copy)?,
        seed_load.seeds.len() as u64,
        gateway.backend_info(),
        now_ms(),
    );
    store.save_manifest(&manifest)?;
    advance_run(
        config,
        &store,
        manifest,
        Arc::new(seed_load.seeds),
        gateway,
        prompts,
        options.abort_after_steps,
    )
    .await
}

/// Picks up an interrupted run from its checkpoints. Completed runs are a
/// successful no-op. Secrets are not stored in the manifest, so callers
/// should re-apply environment overrides to the config used for the
/// gateway; the stored config governs everything else.
pub async fn resume_pipeline(
    out_dir: &Path,
    run_id: &str,
    gateway: &Gateway,
    prompts: &PromptSet,
    abort_after_steps: Option<u64>,
) -> Result<PipelineOutcome, PipelineError> {
    let (store, manifest) = RunStore::open(out_dir, run_id)?;
    match manifest.status {
        RunStatus::Complete | RunStatus::PartialBudget => {
            let budget_exhausted = count_budget_exhausted(&manifest);
            return Ok(PipelineOutcome {
                run_id: run_id.to_string(),
                status: manifest.status,
                exported_records: None,
                budget_exhausted_colonies: budget_exhausted,
                manifest,
                already_complete: true,
            });
        }
        RunStatus::Failed => {
            return Err(PipelineError::UnresumableStatus {
                run_id: run_id.to_string(),
                status: manifest.status,
            })
        }
        RunStatus::InProgress | RunStatus::Interrupted => {}
    }
    let config = manifest.config.clone();
    let seed_copy = store.run_dir().join("seeds.jsonl");
    let seed_digest = digest_file(&seed_copy)?;
    if seed_digest != manifest.seed_digest {
        return Err(PipelineError::Persist(PersistError::Corrupt {
            path: seed_copy.display().to_string(),
            reason: "seed file no longer matches the manifest digest".to_string(),
        }));
    }
    let seed_load = load_seeds(&seed_copy)?;
    advance_run(
        &config,
        &store,
        manifest,
        Arc::new(seed_load.seeds),
        gateway,
        prompts,
        abort_after_steps,
    )
    .await
}

/// Runs the pipeline forward from whatever the store already holds:
/// finished generations are skipped, partially finished ones continue from
/// their checkpoints, and the export runs once every generation is done.
async fn advance_run(
    config: &PipelineConfig,
    store: &RunStore,
    mut manifest: RunManifest,
    gen0_seeds: Arc<Vec<Instruction>>,
    gateway: &Gateway,
    prompts: &PromptSet,
    abort_after_steps: Option<u64>,
) -> Result<PipelineOutcome, PipelineError> {
    let gen_config = &config.generation;
    let registry = ValidatorRegistry::with_defaults();
    let budget = StepBudget::new(abort_after_steps);
    let n_generations = gen_config.n_generations;
    let n_colonies = gen_config.n_colonies;

    manifest.status = RunStatus::InProgress;
    store.save_manifest(&manifest)?;

    let mut seeds = gen0_seeds;
    for generation in 0..n_generations {
        if generation > 0 {
            // Seed material is the previous generation's artifact.
            let artifact = store.load_artifact(generation - 1)?;
            seeds = Arc::new(
                artifact
                    .merged_pool
                    .iter()
                    .map(|sample| sample.instruction.clone())
                    .collect::<Vec<Instruction>>(),
            );
        }
        if store.has_artifact(generation) {
            continue; // finished earlier (possibly in a previous process)
        }

        // Restore or create each colony of this generation.
        let mut states: Vec<ColonyState> = Vec::with_capacity(n_colonies as usize);
        for colony in 0..n_colonies {
            let state = if store.has_checkpoint(generation, colony) {
                store.load_colony(generation, colony, seeds.clone())?
            } else {
                ColonyState::new(colony, generation, seeds.clone(), gen_config.rng_seed)
            };
            states.push(state);
        }

        // Drive all colonies concurrently. Each colony checkpoints itself
        // after every step; a persistence failure halts the run.
        let persist_failure: Mutex<Option<PersistError>> = Mutex::new(None);
        let registry = &registry;
        let results = join_all(states.iter_mut().map(|state| {
            let budget = &budget;
            let persist_failure = &persist_failure;
            async move {
                let end = run_colony(state, gateway, prompts, registry, gen_config, |snapshot| {
                    if let Err(err) = store.save_colony(snapshot) {
                        *persist_failure.lock().expect("persist flag") = Some(err);
                        return StepDirective::Halt;
                    }
                    if budget.step_and_check() {
                        return StepDirective::Halt;
                    }
                    StepDirective::Continue
                })
                .await;
                match end {
                    Ok(reason) => {
                        // Colonies that never stepped (already at target)
                        // still need their final state on disk.
                        if let Err(err) = store.save_colony(state) {
                            *persist_failure.lock().expect("persist flag") = Some(err);
                            return Err(EvolutionError::Shutdown);
                        }
                        Ok(reason)
                    }
                    Err(err) => Err(err),
                }
            }
        }))
        .await;
        if let Some(err) = persist_failure.into_inner().expect("persist flag") {
            manifest.status = RunStatus::Failed;
            let _ = store.save_manifest(&manifest);
            return Err(err.into());
        }
        let mut end_reasons: Vec<ColonyEndReason> = Vec::with_capacity(results.len());
        for result in results {
            match result {
                Ok(reason) => end_reasons.push(reason),
                Err(err) => {
                    manifest.status = RunStatus::Failed;
                    let _ = store.save_manifest(&manifest);
                    return Err(err.into());
                }
            }
        }

        // Record this generation's colonies in the manifest.
        let mut colony_entries = Vec::with_capacity(states.len());
        for (state, end) in states.iter().zip(&end_reasons) {
            let saved = store.save_colony(state)?;
            colony_entries.push(ColonyEntry {
                colony_index: state.colony_index,
                checkpoint: saved.as_ref(),
                end_reason: Some(*end),
            });
        }
        set_generation_entry(
            &mut manifest,
            GenerationEntry {
                generation_index: generation,
                colonies: colony_entries,
                artifact: None,
            },
        );

        if end_reasons.contains(&ColonyEndReason::Interrupted) || budget.exceeded() {
            manifest.status = RunStatus::Interrupted;
            manifest.totals = sum_counters(store, &manifest)?;
            manifest.token_usage = Some(gateway.accounting());
            store.save_manifest(&manifest)?;
            let budget_exhausted = count_budget_exhausted(&manifest);
            return Ok(PipelineOutcome {
                run_id: manifest.run_id.clone(),
                status: RunStatus::Interrupted,
                exported_records: None,
                budget_exhausted_colonies: budget_exhausted,
                manifest,
                already_complete: false,
            });
        }

        // All colonies settled: merge, trim, persist the artifact.
        let artifact = aggregate_generation(&states, generation, gen_config);
        let saved = store.save_artifact(&artifact)?;
        if let Some(entry) = manifest
            .generations
            .iter_mut()
            .find(|e| e.generation_index == generation)
        {
            entry.artifact = Some(saved.as_ref());
        }
        manifest.totals = sum_counters(store, &manifest)?;
        manifest.token_usage = Some(gateway.accounting());
        store.save_manifest(&manifest)?;
    }

    // Union of every generation's artifact, in generation order.
    let mut final_samples: Vec<CandidateSample> = Vec::new();
    for generation in 0..n_generations {
        final_samples.extend(store.load_artifact(generation)?.merged_pool);
    }

    // Optional decontamination over the union.
    if !config.decontam.benchmarks.is_empty() {
        let mut questions = Vec::new();
        for path in &config.decontam.benchmarks {
            questions.extend(load_benchmark_questions(Path::new(path))?);
        }
        let index = build_index(&questions, gateway).await?;
        let instructions: Vec<Instruction> = final_samples
            .iter()
            .map(|s| s.instruction.clone())
            .collect();
        let report =
            decontaminate(&instructions, &index, gateway, prompts, &config.decontam.settings)
                .await?;
        let saved = store.save_verdicts(&report.verdicts)?;
        manifest.decontam = Some(DecontamEntry {
            verdicts: saved.as_ref(),
            screened: report.screened,
            removed: report.removed,
            retained: (final_samples.len() as u64) - report.removed,
        });
        // Keep samples whose positional verdict retained them.
        final_samples = final_samples
            .into_iter()
            .zip(&report.verdicts)
            .filter(|(_, verdict)| !verdict.removed)
            .map(|(sample, _)| sample)
            .collect();
    }

    // Canonical export: records ordered by id, plus the chat form and the
    // schema the records satisfy.
    let records = to_records(&final_samples);
    let export_path = store.run_dir().join("export.jsonl");
    let written = write_jsonl(&records, &export_path)?;
    write_chat_jsonl(&records, &store.run_dir().join("export_chat.jsonl"))?;
    crate::persist::write_atomic(
        &store.run_dir().join("export.schema.json"),
        EXPORT_SCHEMA_JSON.as_bytes(),
    )?;
    manifest.export = Some(store.file_ref("export.jsonl")?);

    manifest.totals = sum_counters(store, &manifest)?;
    manifest.token_usage = Some(gateway.accounting());
    manifest.finished_ms = Some(now_ms());
    let budget_exhausted = count_budget_exhausted(&manifest);
    manifest.status = if budget_exhausted > 0 {
        RunStatus::PartialBudget
    } else {
        RunStatus::Complete
    };
    store.save_manifest(&manifest)?;

    Ok(PipelineOutcome {
        run_id: manifest.run_id.clone(),
        status: manifest.status,
        exported_records: Some(written),
        budget_exhausted_colonies: budget_exhausted,
        manifest,
        already_complete: false,
    })
}

/// Replaces or appends the entry for one generation, keeping order.
fn set_generation_entry(manifest: &mut RunManifest, entry: GenerationEntry) {
    match manifest
        .generations
        .iter_mut()
        .find(|e| e.generation_index == entry.generation_index)
    {
        Some(existing) => *existing = entry,
        None => {
            manifest.generations.push(entry);
            manifest
                .generations
                .sort_by_key(|e| e.generation_index);
        }
    }
}

/// Sums stage counters over every colony checkpoint the manifest lists.
fn sum_counters(
    store: &RunStore,
    manifest: &RunManifest,
) -> Result<crate::domain::StageCounters, PersistError> {
    let mut totals = crate::domain::StageCounters::default();
    for generation in &manifest.generations {
        for colony in &generation.colonies {
            let counters =
                store.load_checkpoint_counters(generation.generation_index, colony.colony_index)?;
            totals.merge(&counters);
        }
    }
    Ok(totals)
}

fn count_budget_exhausted(manifest: &RunManifest) -> u32 {
    manifest
        .generations
        .iter()
        .flat_map(|g| &g.colonies)
        .filter(|c| c.end_reason == Some(ColonyEndReason::BudgetExhausted))
        .count() as u32
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, MockSettings, RetryPolicy};
    use std::io::Write as _;

    fn small_config() -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.generation.n_colonies = 2;
        config.generation.max_population = 12;
        config.generation.n_generations = 2;
        config.generation.mutation_batch = 8;
        config.generation.crossover_batch = 6;
        config.generation.rng_seed = 42;
        config.gateway = GatewayConfig {
            max_in_flight: 8,
            retry: RetryPolicy {
                retry_limit: 1,
                initial_backoff_ms: 1,
                backoff_multiplier: 1.0,
            },
        };
        config
    }

    fn seed_file(dir: &Path) -> PathBuf {
        let path = dir.join("seeds.jsonl");
        let mut file = std::fs::File::create(&path).unwrap();
        for i in 0..6 {
            writeln!(
                file,
                r#"{{"question": "seed task {i}: compute the {i}-th statistic of a list"}}"#
            )
            .unwrap();
        }
        path
    }

    fn mock_gateway(config: &PipelineConfig) -> Arc<Gateway> {
        Gateway::new(
            Arc::new(MockBackend::new(MockSettings::default())),
            config.gateway.clone(),
        )
    }

    #[tokio::test]
    async fn full_run_produces_trimmed_union_and_verifiable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let seed_path = seed_file(dir.path());
        let gateway = mock_gateway(&config);
        let prompts = PromptSet::builtin();
        let options = RunOptions {
            run_id: "trial".to_string(),
            out_dir: dir.path().join("out"),
            seed_path,
            abort_after_steps: None,
        };
        let outcome = run_pipeline(&config, &options, &gateway, &prompts)
            .await
            .unwrap();
        assert_eq!(outcome.status, RunStatus::Complete);
        // Union = per-generation trim target × generations.
        let per_gen = (config.generation.n_colonies * config.generation.max_population) as usize;
        assert_eq!(outcome.exported_records, Some(per_gen * 2));
        let (store, manifest) = RunStore::open(&options.out_dir, "trial").unwrap();
        assert_eq!(manifest.generations.len(), 2);
        store.verify_manifest(&manifest).unwrap();
        assert!(manifest.token_usage.is_some());
        assert!(manifest.totals.conservation_holds());
        let export = crate::export::read_jsonl(&store.run_dir().join("export.jsonl")).unwrap();
        assert_eq!(export.len(), per_gen * 2);
    }

    #[tokio::test]
    async fn reruns_with_identical_inputs_export_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let seed_path = seed_file(dir.path());
        let prompts = PromptSet::builtin();
        let mut exports = Vec::new();
        for run in ["a", "b"] {
            let gateway = mock_gateway(&config);
            let options = RunOptions {
                run_id: run.to_string(),
                out_dir: dir.path().join("out"),
                seed_path: seed_path.clone(),
                abort_after_steps: None,
            };
            run_pipeline(&config, &options, &gateway, &prompts)
                .await
                .unwrap();
            exports.push(
                std::fs::read(dir.path().join("out").join(run).join("export.jsonl")).unwrap(),
            );
        }
        assert_eq!(exports[0], exports[1]);
    }

    #[tokio::test]
    async fn interrupted_run_resumes_to_the_uninterrupted_output() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let seed_path = seed_file(dir.path());
        let prompts = PromptSet::builtin();

        // Uninterrupted reference run.
        let gateway = mock_gateway(&config);
        let reference = RunOptions {
            run_id: "reference".to_string(),
            out_dir: dir.path().join("out"),
            seed_path: seed_path.clone(),
            abort_after_steps: None,
        };
        run_pipeline(&config, &reference, &gateway, &prompts)
            .await
            .unwrap();
        let reference_bytes =
            std::fs::read(dir.path().join("out/reference/export.jsonl")).unwrap();

        // Interrupted run: halt after 3 steps, then resume repeatedly.
        let gateway = mock_gateway(&config);
        let interrupted = RunOptions {
            run_id: "stopped".to_string(),
            out_dir: dir.path().join("out"),
            seed_path,
            abort_after_steps: Some(3),
        };
        let outcome = run_pipeline(&config, &interrupted, &gateway, &prompts)
            .await
            .unwrap();
        assert_eq!(outcome.status, RunStatus::Interrupted);
        let mut rounds = 0;
        loop {
            let gateway = mock_gateway(&config);
            let outcome = resume_pipeline(
                &dir.path().join("out"),
                "stopped",
                &gateway,
                &prompts,
                None,
            )
            .await
            .unwrap();
            rounds += 1;
            if outcome.status == RunStatus::Complete {
                break;
            }
            assert!(rounds < 50, "resume never completed");
        }
        let resumed_bytes = std::fs::read(dir.path().join("out/stopped/export.jsonl")).unwrap();
        assert_eq!(resumed_bytes, reference_bytes);

        // Resuming a finished run is a successful no-op.
        let gateway = mock_gateway(&config);
        let outcome = resume_pipeline(
            &dir.path().join("out"),
            "stopped",
            &gateway,
            &prompts,
            None,
        )
        .await
        .unwrap();
        assert!(outcome.already_complete);
        assert_eq!(outcome.status, RunStatus::Complete);
    }

    #[tokio::test]
    async fn decontamination_stage_removes_planted_benchmark_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config();
        config.generation.n_generations = 1;
        let prompts = PromptSet::builtin();

        // First pass: run without decontamination to discover some final
        // instruction texts.
        let seed_path = seed_file(dir.path());
        let gateway = mock_gateway(&config);
        let probe = RunOptions {
            run_id: "probe".to_string(),
            out_dir: dir.path().join("out"),
            seed_path: seed_path.clone(),
            abort_after_steps: None,
        };
        run_pipeline(&config, &probe, &gateway, &prompts)
            .await
            .unwrap();
        let export =
            crate::export::read_jsonl(&dir.path().join("out/probe/export.jsonl")).unwrap();
        assert!(export.len() >= 3);

        // Plant two of those instructions (with their input context, which
        // is what the candidate side compares) as benchmark questions.
        let bench_path = dir.path().join("bench.jsonl");
        let mut file = std::fs::File::create(&bench_path).unwrap();
        for (i, record) in export.iter().take(2).enumerate() {
            writeln!(
                file,
                "{}",
                serde_json::json!({"id": format!("bench/{i}"), "text": record.user_content()})
            )
            .unwrap();
        }
        drop(file);

        // Second pass with the same config and seeds: deterministic, so the
        // planted texts are synthesized again and must now be removed.
        config.decontam.benchmarks = vec![bench_path.display().to_string()];
        config.decontam.settings.screening_threshold = 0.9;
        let gateway = mock_gateway(&config);
        let guarded = RunOptions {
            run_id: "guarded".to_string(),
            out_dir: dir.path().join("out"),
            seed_path,
            abort_after_steps: None,
        };
        let outcome = run_pipeline(&config, &guarded, &gateway, &prompts)
            .await
            .unwrap();
        let entry = outcome.manifest.decontam.as_ref().expect("stage ran");
        assert_eq!(entry.removed, 2, "exactly the planted pair is removed");
        assert_eq!(
            outcome.exported_records,
            Some(export.len() - 2),
            "export shrinks by the removed pair"
        );
        let verdicts_raw =
            std::fs::read_to_string(dir.path().join("out/guarded/decontam_verdicts.jsonl"))
                .unwrap();
        assert_eq!(verdicts_raw.lines().count(), export.len());
    }

    #[tokio::test]
    async fn invalid_config_fails_before_touching_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config();
        config.generation.mutation_probability = 7.0;
        let gateway = mock_gateway(&config);
        let prompts = PromptSet::builtin();
        let options = RunOptions {
            run_id: "bad".to_string(),
            out_dir: dir.path().join("out"),
            seed_path: seed_file(dir.path()),
            abort_after_steps: None,
        };
        assert!(matches!(
            run_pipeline(&config, &options, &gateway, &prompts).await,
            Err(PipelineError::Config(_))
        ));
        assert!(!dir.path().join("out").join("bad").exists());
    }
}
