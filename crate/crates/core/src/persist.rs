//! On-disk run state: digest-guarded colony checkpoints, per-generation
//! artifacts, append-only event logs, and the run manifest. Every file is
//! written atomically (temp file + rename) so a crash never leaves a
//! loadable half-written state, and every load re-verifies a sha-256
//! trailer before trusting the contents.

use crate::config::PipelineConfig;
use crate::domain::{
    CandidateSample, ColonyState, DecontamVerdict, EventRecord, GenerationArtifact,
    GenerationConfig, Instruction, StageCounters,
};
use crate::evolution::ColonyEndReason;
use crate::gateway::BackendInfo;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::sync::Mutex;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is corrupt: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("{path} was written by format version {found}, this build reads {expected}")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path} does not exist")]
    Missing { path: String },
    #[error("could not serialize {what}: {source}")]
    Serialize {
        what: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Hex sha-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Hex sha-256 of a file's contents.
pub fn digest_file(path: &Path) -> Result<String, PersistError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

/// A file the manifest points at, pinned by content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// One colony's place in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColonyEntry {
    pub colony_index: u32,
    pub checkpoint: FileRef,
    /// Set once the colony stopped stepping this generation.
    pub end_reason: Option<ColonyEndReason>,
}

/// One generation's place in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationEntry {
    pub generation_index: u32,
    pub colonies: Vec<ColonyEntry>,
    /// Merged, trimmed output of the generation, once aggregated.
    pub artifact: Option<FileRef>,
}

/// Decontamination stage summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecontamEntry {
    pub verdicts: FileRef,
    pub screened: u64,
    pub removed: u64,
    pub retained: u64,
}

/// Where a run currently stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    InProgress,
    Interrupted,
    Complete,
    /// Finished, but at least one colony exhausted its attempt budget short
    /// of the population target.
    PartialBudget,
    Failed,
}

/// The run's single source of truth: configuration snapshot, inputs,
/// produced files with digests, and aggregate counters. Secrets are
/// redacted before the config lands here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub run_id: String,
    pub status: RunStatus,
    pub config: PipelineConfig,
    /// sha-256 of the seed file bytes.
    pub seed_digest: String,
    pub seed_count: u64,
    pub backend: BackendInfo,
    pub started_ms: u64,
    pub finished_ms: Option<u64>,
    pub generations: Vec<GenerationEntry>,
    /// Counters summed over every colony of every generation.
    pub totals: StageCounters,
    /// Gateway call/token accounting at the last manifest write.
    pub token_usage: Option<crate::gateway::AccountingSnapshot>,
    pub decontam: Option<DecontamEntry>,
    pub export: Option<FileRef>,
}

impl RunManifest {
    pub fn new(
        run_id: &str,
        config: PipelineConfig,
        seed_digest: String,
        seed_count: u64,
        backend: BackendInfo,
        started_ms: u64,
    ) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            run_id: run_id.to_string(),
            status: RunStatus::InProgress,
            config,
            seed_digest,
            seed_count,
            backend,
            started_ms,
            finished_ms: None,
            generations: Vec::new(),
            totals: StageCounters::default(),
            token_usage: None,
            decontam: None,
            export: None,
        }
    }

    /// All files the manifest claims to have produced.
    pub fn listed_files(&self) -> Vec<&FileRef> {
        let mut files = Vec::new();
        for generation in &self.generations {
            for colony in &generation.colonies {
                files.push(&colony.checkpoint);
            }
            if let Some(artifact) = &generation.artifact {
                files.push(artifact);
            }
        }
        if let Some(decontam) = &self.decontam {
            files.push(&decontam.verdicts);
        }
        if let Some(export) = &self.export {
            files.push(export);
        }
        files
    }
}

/// First line of a checkpoint file; the record lines follow it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    run_id: String,
    colony_index: u32,
    generation_index: u32,
    rng: ChaCha8Rng,
    rng_tick: u64,
    counters: StageCounters,
    pool_len: usize,
    event_len: usize,
}

/// First line of an artifact file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArtifactHeader {
    version: u32,
    run_id: String,
    generation_index: u32,
    record_count: usize,
    config_snapshot: GenerationConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DigestTrailer {
    sha256: String,
}

/// Serializes one value per line, appends a digest trailer over everything
/// above it, and atomically replaces `path`. Returns the digest of the
/// complete file (trailer included), suitable for manifest pinning.
fn write_digested_lines(path: &Path, lines: &[String]) -> Result<String, PersistError> {
    let mut body = String::new();
    for line in lines {
        debug_assert!(!line.contains('\n'), "records must be single lines");
        body.push_str(line);
        body.push('\n');
    }
    let trailer = serde_json::to_string(&DigestTrailer {
        sha256: sha256_hex(body.as_bytes()),
    })
    .expect("trailer serializes");
    body.push_str(&trailer);
    body.push('\n');
    write_atomic(path, body.as_bytes())?;
    Ok(sha256_hex(body.as_bytes()))
}

/// Atomically writes bytes via a uniquely named temp file in the target
/// directory followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(parent)
        .map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.flush().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PersistError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// Reads a digest-trailed file back into its record lines, verifying the
/// trailer first. Returns the lines above the trailer.
fn read_digested_lines(path: &Path) -> Result<Vec<String>, PersistError> {
    if !path.exists() {
        return Err(PersistError::Missing {
            path: path.display().to_string(),
        });
    }
    let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
    let display = path.display().to_string();
    let corrupt = |reason: &str| PersistError::Corrupt {
        path: display.clone(),
        reason: reason.to_string(),
    };
    let trimmed = raw.strip_suffix('\n').ok_or_else(|| {
        corrupt("file does not end with a newline (truncated write?)")
    })?;
    let (body_end, trailer_line) = match trimmed.rfind('\n') {
        Some(idx) => (idx + 1, &trimmed[idx + 1..]),
        None => (0, trimmed),
    };
    let trailer: DigestTrailer = serde_json::from_str(trailer_line)
        .map_err(|e| corrupt(&format!("unreadable digest trailer: {e}")))?;
    let body = &raw[..body_end];
    let actual = sha256_hex(body.as_bytes());
    if actual != trailer.sha256 {
        return Err(corrupt(&format!(
            "digest mismatch: trailer says {}, contents hash to {}",
            trailer.sha256, actual
        )));
    }
    Ok(body.lines().map(|l| l.to_string()).collect())
}

/// Handle to one run's directory tree.
///
/// Layout under `<out_dir>/<run_id>/`:
/// `manifest.json`, and per generation `gen_<g>/colony_<c>.ckpt`,
/// `gen_<g>/colony_<c>.events.jsonl`, `gen_<g>/artifact.jsonl`; plus
/// `decontam_verdicts.jsonl` and the export files at the top level.
pub struct RunStore {
    run_dir: PathBuf,
    run_id: String,
    /// Event-log lines already on disk, per (generation, colony); lazily
    /// initialized from the file so appends stay O(new events).
    event_counts: Mutex<HashMap<(u32, u32), usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SavedFile {
    /// Relative to the run directory.
    pub rel_path: String,
    pub sha256: String,
}

impl SavedFile {
    pub fn as_ref(&self) -> FileRef {
        FileRef {
            path: self.rel_path.clone(),
            sha256: self.sha256.clone(),
        }
    }
}

impl RunStore {
    /// Creates (or reuses) the run directory.
    pub fn create(out_dir: &Path, run_id: &str) -> Result<RunStore, PersistError> {
        let run_dir = out_dir.join(run_id);
        std::fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
        Ok(RunStore {
            run_dir,
            run_id: run_id.to_string(),
            event_counts: Mutex::new(HashMap::new()),
        })
    }

    /// Opens an existing run directory; the manifest must exist.
    pub fn open(out_dir: &Path, run_id: &str) -> Result<(RunStore, RunManifest), PersistError> {
        let store = RunStore::create(out_dir, run_id)?;
        let manifest = store.load_manifest()?;
        Ok((store, manifest))
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }

    fn checkpoint_rel(&self, generation_index: u32, colony_index: u32) -> String {
        format!("gen_{generation_index:03}/colony_{colony_index:03}.ckpt")
    }

    fn events_rel(&self, generation_index: u32, colony_index: u32) -> String {
        format!("gen_{generation_index:03}/colony_{colony_index:03}.events.jsonl")
    }

    fn artifact_rel(&self, generation_index: u32) -> String {
        format!("gen_{generation_index:03}/artifact.jsonl")
    }

    pub fn checkpoint_path(&self, generation_index: u32, colony_index: u32) -> PathBuf {
        self.run_dir
            .join(self.checkpoint_rel(generation_index, colony_index))
    }

    pub fn artifact_path(&self, generation_index: u32) -> PathBuf {
        self.run_dir.join(self.artifact_rel(generation_index))
    }

    pub fn has_checkpoint(&self, generation_index: u32, colony_index: u32) -> bool {
        self.checkpoint_path(generation_index, colony_index).exists()
    }

    pub fn has_artifact(&self, generation_index: u32) -> bool {
        self.artifact_path(generation_index).exists()
    }

    /// Atomically writes the manifest.
    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<(), PersistError> {
        let json =
            serde_json::to_string_pretty(manifest).map_err(|source| PersistError::Serialize {
                what: "run manifest".to_string(),
                source,
            })?;
        write_atomic(&self.manifest_path(), json.as_bytes())
    }

    pub fn load_manifest(&self) -> Result<RunManifest, PersistError> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(PersistError::Missing {
                path: path.display().to_string(),
            });
        }
        let raw = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: RunManifest =
            serde_json::from_str(&raw).map_err(|e| PersistError::Corrupt {
                path: path.display().to_string(),
                reason: format!("unreadable manifest: {e}"),
            })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(PersistError::VersionMismatch {
                path: path.display().to_string(),
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(manifest)
    }

    /// Checks that every file the manifest lists exists with a matching
    /// content digest.
    pub fn verify_manifest(&self, manifest: &RunManifest) -> Result<(), PersistError> {
        for file in manifest.listed_files() {
            let path = self.run_dir.join(&file.path);
            let actual = digest_file(&path)?;
            if actual != file.sha256 {
                return Err(PersistError::Corrupt {
                    path: path.display().to_string(),
                    reason: format!(
                        "manifest digest {} does not match contents {}",
                        file.sha256, actual
                    ),
                });
            }
        }
        Ok(())
    }

    /// Writes one colony's full state: header, pool records, event records,
    /// digest trailer. Replaces any previous checkpoint for the same colony
    /// and generation atomically, then appends any new events to the
    /// append-only audit log.
    pub fn save_colony(&self, state: &ColonyState) -> Result<SavedFile, PersistError> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            run_id: self.run_id.clone(),
            colony_index: state.colony_index,
            generation_index: state.generation_index,
            rng: state.rng.clone(),
            rng_tick: state.rng_tick,
            counters: state.counters.clone(),
            pool_len: state.pool.len(),
            event_len: state.events.len(),
        };
        let mut lines = Vec::with_capacity(1 + state.pool.len() + state.events.len());
        let ser_err = |what: &str| {
            let what = what.to_string();
            move |source: serde_json::Error| PersistError::Serialize { what, source }
        };
        lines.push(serde_json::to_string(&header).map_err(ser_err("checkpoint header"))?);
        for sample in &state.pool {
            lines.push(serde_json::to_string(sample).map_err(ser_err("pool record"))?);
        }
        for event in &state.events {
            lines.push(serde_json::to_string(event).map_err(ser_err("event record"))?);
        }
        let rel = self.checkpoint_rel(state.generation_index, state.colony_index);
        let path = self.run_dir.join(&rel);
        let sha256 = write_digested_lines(&path, &lines)?;
        self.append_events(state)?;
        Ok(SavedFile {
            rel_path: rel,
            sha256,
        })
    }

    /// Appends events not yet in the audit log for this colony/generation.
    fn append_events(&self, state: &ColonyState) -> Result<(), PersistError> {
        let key = (state.generation_index, state.colony_index);
        let rel = self.events_rel(state.generation_index, state.colony_index);
        let path = self.run_dir.join(&rel);
        let mut counts = self.event_counts.lock().expect("event count lock");
        let already = match counts.get(&key) {
            Some(count) => *count,
            None if path.exists() => {
                let raw = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                raw.lines().count()
            }
            None => 0,
        };
        if state.events.len() > already {
            let mut chunk = String::new();
            for event in &state.events[already..] {
                chunk.push_str(&serde_json::to_string(event).map_err(|source| {
                    PersistError::Serialize {
                        what: "event record".to_string(),
                        source,
                    }
                })?);
                chunk.push('\n');
            }
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            file.write_all(chunk.as_bytes()).map_err(io_err(&path))?;
        }
        counts.insert(key, state.events.len().max(already));
        Ok(())
    }

    /// Loads one colony's checkpoint and rebuilds its in-memory state.
    /// `seeds` must be the same seed material the colony was created with
    /// (generation-0 seeds or the prior generation's artifact instructions).
    pub fn load_colony(
        &self,
        generation_index: u32,
        colony_index: u32,
        seeds: Arc<Vec<Instruction>>,
    ) -> Result<ColonyState, PersistError> {
        let path = self.checkpoint_path(generation_index, colony_index);
        let display = path.display().to_string();
        let lines = read_digested_lines(&path)?;
        let corrupt = |reason: String| PersistError::Corrupt {
            path: display.clone(),
            reason,
        };
        let header_line = lines
            .first()
            .ok_or_else(|| corrupt("no header line".to_string()))?;
        let header: CheckpointHeader = serde_json::from_str(header_line)
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(PersistError::VersionMismatch {
                path: display,
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if header.generation_index != generation_index || header.colony_index != colony_index {
            return Err(corrupt(format!(
                "header names generation {} colony {}, expected generation {} colony {}",
                header.generation_index, header.colony_index, generation_index, colony_index
            )));
        }
        let expected_lines = 1 + header.pool_len + header.event_len;
        if lines.len() != expected_lines {
            return Err(corrupt(format!(
                "expected {expected_lines} record lines, found {}",
                lines.len()
            )));
        }
        let mut pool = Vec::with_capacity(header.pool_len);
        for line in &lines[1..1 + header.pool_len] {
            let sample: CandidateSample = serde_json::from_str(line)
                .map_err(|e| corrupt(format!("unreadable pool record: {e}")))?;
            pool.push(sample);
        }
        let mut events = Vec::with_capacity(header.event_len);
        for line in &lines[1 + header.pool_len..] {
            let event: EventRecord = serde_json::from_str(line)
                .map_err(|e| corrupt(format!("unreadable event record: {e}")))?;
            events.push(event);
        }
        Ok(ColonyState {
            colony_index,
            generation_index,
            pool,
            seeds,
            rng: header.rng,
            rng_tick: header.rng_tick,
            counters: header.counters,
            events,
        })
    }

    /// Reads just the counters of a checkpoint (digest still verified),
    /// for manifest totals and conservation audits without deserializing
    /// the whole pool.
    pub fn load_checkpoint_counters(
        &self,
        generation_index: u32,
        colony_index: u32,
    ) -> Result<StageCounters, PersistError> {
        let path = self.checkpoint_path(generation_index, colony_index);
        let display = path.display().to_string();
        let lines = read_digested_lines(&path)?;
        let header_line = lines.first().ok_or_else(|| PersistError::Corrupt {
            path: display.clone(),
            reason: "no header line".to_string(),
        })?;
        let header: CheckpointHeader =
            serde_json::from_str(header_line).map_err(|e| PersistError::Corrupt {
                path: display.clone(),
                reason: format!("unreadable header: {e}"),
            })?;
        if header.version != CHECKPOINT_VERSION {
            return Err(PersistError::VersionMismatch {
                path: display,
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(header.counters)
    }

    /// Writes a generation's merged artifact with the same digest-trailer
    /// discipline as checkpoints.
    pub fn save_artifact(&self, artifact: &GenerationArtifact) -> Result<SavedFile, PersistError> {
        let header = ArtifactHeader {
            version: CHECKPOINT_VERSION,
            run_id: self.run_id.clone(),
            generation_index: artifact.generation_index,
            record_count: artifact.merged_pool.len(),
            config_snapshot: artifact.config_snapshot.clone(),
        };
        let mut lines = Vec::with_capacity(1 + artifact.merged_pool.len());
        lines.push(
            serde_json::to_string(&header).map_err(|source| PersistError::Serialize {
                what: "artifact header".to_string(),
                source,
            })?,
        );
        for sample in &artifact.merged_pool {
            lines.push(
                serde_json::to_string(sample).map_err(|source| PersistError::Serialize {
                    what: "artifact record".to_string(),
                    source,
                })?,
            );
        }
        let rel = self.artifact_rel(artifact.generation_index);
        let path = self.run_dir.join(&rel);
        let sha256 = write_digested_lines(&path, &lines)?;
        Ok(SavedFile {
            rel_path: rel,
            sha256,
        })
    }

    pub fn load_artifact(
        &self,
        generation_index: u32,
    ) -> Result<GenerationArtifact, PersistError> {
        let path = self.artifact_path(generation_index);
        let display = path.display().to_string();
        let lines = read_digested_lines(&path)?;
        let corrupt = |reason: String| PersistError::Corrupt {
            path: display.clone(),
            reason,
        };
        let header_line = lines
            .first()
            .ok_or_else(|| corrupt("no header line".to_string()))?;
        let header: ArtifactHeader = serde_json::from_str(header_line)
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(PersistError::VersionMismatch {
                path: display,
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if lines.len() != 1 + header.record_count {
            return Err(corrupt(format!(
                "expected {} record lines, found {}",
                1 + header.record_count,
                lines.len() - 1
            )));
        }
        let mut merged_pool = Vec::with_capacity(header.record_count);
        for line in &lines[1..] {
            let sample: CandidateSample = serde_json::from_str(line)
                .map_err(|e| corrupt(format!("unreadable artifact record: {e}")))?;
            merged_pool.push(sample);
        }
        Ok(GenerationArtifact {
            generation_index: header.generation_index,
            merged_pool,
            config_snapshot: header.config_snapshot,
        })
    }

    /// Writes the decontamination verdict log (plain line-delimited records,
    /// atomically replaced).
    pub fn save_verdicts(&self, verdicts: &[DecontamVerdict]) -> Result<SavedFile, PersistError> {
        let rel = "decontam_verdicts.jsonl".to_string();
        let path = self.run_dir.join(&rel);
        let mut body = String::new();
        for verdict in verdicts {
            body.push_str(&serde_json::to_string(verdict).map_err(|source| {
                PersistError::Serialize {
                    what: "decontamination verdict".to_string(),
                    source,
                }
            })?);
            body.push('\n');
        }
        write_atomic(&path, body.as_bytes())?;
        Ok(SavedFile {
            rel_path: rel,
            sha256: sha256_hex(body.as_bytes()),
        })
    }

    /// Reads the decontamination verdict log back, in file order.
    pub fn load_verdicts(&self) -> Result<Vec<DecontamVerdict>, PersistError> {
        let path = self.run_dir.join("decontam_verdicts.jsonl");
        if !path.exists() {
            return Err(PersistError::Missing {
                path: path.display().to_string(),
            });
        }
        let raw = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut verdicts = Vec::new();
        for (line_no, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let verdict: DecontamVerdict =
                serde_json::from_str(line).map_err(|e| PersistError::Corrupt {
                    path: path.display().to_string(),
                    reason: format!("bad verdict record on line {}: {e}", line_no + 1),
                })?;
            verdicts.push(verdict);
        }
        Ok(verdicts)
    }

    /// Records an arbitrary produced file (e.g. an export) in manifest form.
    pub fn file_ref(&self, rel_path: &str) -> Result<FileRef, PersistError> {
        let path = self.run_dir.join(rel_path);
        Ok(FileRef {
            path: rel_path.to_string(),
            sha256: digest_file(&path)?,
        })
    }
}
