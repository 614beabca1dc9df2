use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{BackendKind, RoundConfig};
use super::hook::{trainer_hook_invoke, HookError, HookKind};
use crate::analysis::{
    self, categorize_test, histogram, EvalSummary, ProblemStats, RoundSummary, TestCategory,
};
use crate::fraction::Fraction;
use crate::generators::{
    render_prompt, Generator, GeneratorError, GeneratorRequest, MissingPlaceholder, OfflineBackend,
    RemoteBackend, Role,
};
use crate::jsonl::{self, write_atomic};
use crate::matrix::{build_matrix, MatrixError, MatrixOptions};
use crate::model::{
    validate_corpus, AdversarialTest, CandidateProgram, CorpusError, Payload, Problem, Validity,
};
use crate::preference::{
    emit_kto_dataset, kto_records, label_columns, KtoRecord, Label, PreferenceError, TestLabel,
};
use crate::sandbox::Sandbox;
use crate::seed::derive_seed;
use crate::selection::{emit_sft_dataset, select_candidates, SftRecord};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("run directory was created with config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("generation failed for problem `{problem_id}`: {source}")]
    Generator {
        problem_id: String,
        #[source]
        source: GeneratorError,
    },
    #[error("sandbox failed in {failed} of {total} cells (limit {limit}); round left resumable")]
    SandboxStorm {
        failed: usize,
        total: usize,
        limit: f64,
    },
    #[error("round {round} trainer hook failed: {source}")]
    Hook {
        round: u32,
        #[source]
        source: HookError,
    },
    #[error("round {0} must complete before round {1}")]
    PreviousRoundMissing(u32, u32),
    #[error(transparent)]
    Prompt(#[from] MissingPlaceholder),
    #[error(transparent)]
    Dataset(#[from] PreferenceError),
    #[error(transparent)]
    Jsonl(#[from] jsonl::JsonlError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("state serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn create_dir(path: &Path) -> Result<(), RunError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelIds {
    pub solver_model: String,
    pub adversary_model: String,
}

/// Written once when a run directory is created.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub train_problems: Vec<String>,
    pub eval_problems: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemStatus {
    Completed,
    NoCandidates,
    SandboxFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorizedTest {
    pub test_id: String,
    pub category: TestCategory,
}

/// Everything one training problem contributed to a round. Its presence in
/// `state/problems/` marks the problem as done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub problem_id: String,
    pub status: ProblemStatus,
    pub candidates: Vec<CandidateProgram>,
    pub tests: Vec<AdversarialTest>,
    pub matrix_file: Option<String>,
    pub gt_pass_rates: Vec<Fraction>,
    pub sft: Vec<SftRecord>,
    pub labels: Vec<TestLabel>,
    pub kto: Vec<KtoRecord>,
    pub categories: Vec<CategorizedTest>,
    pub cells_executed: usize,
    pub cells_failed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResult {
    pub problem_id: String,
    pub samples: u64,
    pub correct: u64,
    pub cells_executed: usize,
    pub cells_failed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub problem_id: String,
    pub status: ProblemStatus,
    pub candidates: usize,
    pub adversarial_generated: usize,
    pub adversarial_valid: usize,
    pub adversarial_pruned: usize,
    pub sft_records: usize,
    pub desirable: usize,
    pub undesirable: usize,
    pub discarded: usize,
    pub matrix_file: Option<String>,
    pub state_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: u32,
    pub config_hash: String,
    pub models: ModelIds,
    pub sft_dataset: String,
    pub kto_dataset: String,
    pub problems: Vec<ProblemSummary>,
    pub eval: Vec<EvalResult>,
    pub metrics: RoundSummary,
}

pub fn round_dir_name(round: u32) -> String {
    format!("round{round}")
}

pub fn sft_file_name(round: u32) -> String {
    format!("sft_round{round}.jsonl")
}

pub fn kto_file_name(round: u32) -> String {
    format!("kto_round{round}.jsonl")
}

const STATE_FILE: &str = "state/round_state.json";
const NEXT_MODELS_FILE: &str = "next_models.json";

/// Picks `floor(eval_split * n)` problems for evaluation with a seeded
/// shuffle; both lists come back sorted.
pub fn split_corpus(ids: &[String], eval_split: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["eval-split"]));
    shuffled.shuffle(&mut rng);
    let n_eval = (eval_split * ids.len() as f64).floor() as usize;
    let mut eval: Vec<String> = shuffled[..n_eval].to_vec();
    let mut train: Vec<String> = shuffled[n_eval..].to_vec();
    eval.sort();
    train.sort();
    (train, eval)
}

pub fn make_backend(cfg: &RoundConfig) -> Box<dyn Generator> {
    match cfg.backend.kind {
        BackendKind::Offline => Box::new(OfflineBackend::new(cfg.backend.offline)),
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.backend.endpoint.clone())),
    }
}

enum Work<'a> {
    Train(&'a Problem),
    Eval(&'a Problem),
}

enum Outcome {
    Train(Box<ProblemResult>, Option<crate::matrix::ExecutionMatrix>),
    Eval(EvalResult),
}

/// Drives rounds over one run directory.
pub struct Orchestrator {
    cfg: RoundConfig,
    problems: BTreeMap<String, Problem>,
    manifest: RunManifest,
    run_dir: PathBuf,
    backend: Box<dyn Generator>,
    sandbox: Sandbox,
}

impl Orchestrator {
    pub fn new(cfg: RoundConfig, corpus: Vec<Problem>, run_dir: &Path) -> Result<Self, RunError> {
        let backend = make_backend(&cfg);
        Self::with_backend(cfg, corpus, run_dir, backend)
    }

    /// Opens or creates `run_dir`. An existing directory must have been
    /// created with the same config hash.
    pub fn with_backend(
        cfg: RoundConfig,
        corpus: Vec<Problem>,
        run_dir: &Path,
        backend: Box<dyn Generator>,
    ) -> Result<Self, RunError> {
        cfg.validate().map_err(RunError::Config)?;
        validate_corpus(&corpus)?;
        if cfg.backend.kind == BackendKind::Offline {
            for p in &corpus {
                let ok = p
                    .offline
                    .as_ref()
                    .is_some_and(|o| o.grammar.is_some() && !o.programs.is_empty());
                if !ok {
                    return Err(RunError::Config(format!(
                        "offline backend needs a grammar and a program pool for problem `{}`",
                        p.id
                    )));
                }
            }
        }
        let hash = cfg.config_hash();
        create_dir(run_dir)?;
        let manifest_path = run_dir.join("run.json");
        let manifest = if manifest_path.exists() {
            let m: RunManifest = read_json(&manifest_path)?;
            if m.config_hash != hash {
                return Err(RunError::ConfigMismatch {
                    expected: hash,
                    found: m.config_hash,
                });
            }
            m
        } else {
            let ids: Vec<String> = corpus.iter().map(|p| p.id.clone()).collect();
            let (train, eval) = split_corpus(&ids, cfg.eval_split, cfg.seed);
            let m = RunManifest {
                config_hash: hash,
                train_problems: train,
                eval_problems: eval,
            };
            let cfg_path = run_dir.join("config.toml");
            write_atomic(&cfg_path, cfg.to_toml().as_bytes()).map_err(io_err(&cfg_path))?;
            write_json(&manifest_path, &m)?;
            m
        };
        let problems: BTreeMap<String, Problem> =
            corpus.into_iter().map(|p| (p.id.clone(), p)).collect();
        for id in manifest
            .train_problems
            .iter()
            .chain(&manifest.eval_problems)
        {
            if !problems.contains_key(id) {
                return Err(RunError::Config(format!(
                    "run directory expects problem `{id}`, absent from corpus"
                )));
            }
        }
        let sandbox = Sandbox::new(cfg.sandbox.clone());
        Ok(Orchestrator {
            cfg,
            problems,
            manifest,
            run_dir: run_dir.to_path_buf(),
            backend,
            sandbox,
        })
    }

    pub fn config(&self) -> &RoundConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn round_dir(&self, round: u32) -> PathBuf {
        self.run_dir.join(round_dir_name(round))
    }

    fn initial_models(&self) -> ModelIds {
        ModelIds {
            solver_model: self.cfg.solver_model().into(),
            adversary_model: self.cfg.adversary_model().into(),
        }
    }

    /// Model ids in effect for `round`: the configured ones for round 1,
    /// otherwise what the previous round's hooks reported.
    pub fn models_for_round(&self, round: u32) -> Result<ModelIds, RunError> {
        if round <= 1 {
            return Ok(self.initial_models());
        }
        let path = self.round_dir(round - 1).join(NEXT_MODELS_FILE);
        if !path.exists() {
            return Err(RunError::PreviousRoundMissing(round - 1, round));
        }
        read_json(&path)
    }

    pub fn load_round_state(&self, round: u32) -> Result<Option<RoundState>, RunError> {
        let path = self.round_dir(round).join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let state: RoundState = read_json(&path)?;
        if state.config_hash != self.manifest.config_hash {
            return Err(RunError::ConfigMismatch {
                expected: self.manifest.config_hash.clone(),
                found: state.config_hash,
            });
        }
        Ok(Some(state))
    }

    /// Runs every round and the trainer hooks in between, resuming from
    /// whatever the run directory already holds.
    pub fn run_evolution(&self) -> Result<Vec<RoundState>, RunError> {
        let mut states = Vec::new();
        let mut models = self.initial_models();
        for r in 1..=self.cfg.rounds {
            let state = self.run_round(r, &models)?;
            models = self.advance_models(r, &state.models)?;
            states.push(state);
        }
        Ok(states)
    }

    /// Applies the SFT then the KTO hook after `round` and records the
    /// resulting model ids. When both roles share one backbone, the KTO
    /// update starts from the SFT output and both roles adopt its result.
    pub fn advance_models(&self, round: u32, current: &ModelIds) -> Result<ModelIds, RunError> {
        let dir = self.round_dir(round);
        let path = dir.join(NEXT_MODELS_FILE);
        if path.exists() {
            return read_json(&path);
        }
        let next = match &self.cfg.trainer_hook {
            None => current.clone(),
            Some(template) => {
                let hook = |kind, file: String, model: &str| {
                    let dataset = dir.join(file);
                    let dataset = dataset.canonicalize().unwrap_or(dataset);
                    trainer_hook_invoke(template, kind, &dataset, model, round)
                        .map_err(|source| RunError::Hook { round, source })
                };
                let shared = current.solver_model == current.adversary_model;
                let solver = hook(HookKind::Sft, sft_file_name(round), &current.solver_model)?;
                let kto_from = if shared {
                    solver.clone()
                } else {
                    current.adversary_model.clone()
                };
                let adversary = hook(HookKind::Kto, kto_file_name(round), &kto_from)?;
                ModelIds {
                    solver_model: if shared { adversary.clone() } else { solver },
                    adversary_model: adversary,
                }
            }
        };
        write_json(&path, &next)?;
        Ok(next)
    }

    /// Runs one round. A finished round is loaded instead of recomputed; an
    /// interrupted one resumes from its per-problem markers.
    pub fn run_round(&self, round: u32, models: &ModelIds) -> Result<RoundState, RunError> {
        if let Some(state) = self.load_round_state(round)? {
            return Ok(state);
        }
        for q in 1..round {
            if self.load_round_state(q)?.is_none() {
                return Err(RunError::PreviousRoundMissing(q, round));
            }
        }
        let final_dir = self.round_dir(round);
        let partial = self
            .run_dir
            .join(format!("{}.partial", round_dir_name(round)));
        for sub in ["matrices", "state/problems", "state/eval", "report"] {
            create_dir(&partial.join(sub))?;
        }
        let round_seed = derive_seed(self.cfg.seed, &["round", &round.to_string()]);

        let mut train: BTreeMap<String, ProblemResult> = BTreeMap::new();
        let mut eval: BTreeMap<String, EvalResult> = BTreeMap::new();
        let mut pending = Vec::new();
        for id in &self.manifest.train_problems {
            let marker = partial.join(format!("state/problems/{id}.json"));
            if marker.exists() {
                train.insert(id.clone(), read_json(&marker)?);
            } else {
                pending.push(Work::Train(&self.problems[id]));
            }
        }
        for id in &self.manifest.eval_problems {
            let marker = partial.join(format!("state/eval/{id}.json"));
            if marker.exists() {
                eval.insert(id.clone(), read_json(&marker)?);
            } else {
                pending.push(Work::Eval(&self.problems[id]));
            }
        }
        if !pending.is_empty() {
            tracing::info!(round, pending = pending.len(), "processing problems");
        }

        let (failures, unmarked) = self.process(
            &pending, round, round_seed, models, &partial, &mut train, &mut eval,
        )?;
        if let Some(e) = failures {
            return Err(e);
        }

        let (failed, total) = train
            .values()
            .map(|p| (p.cells_failed, p.cells_executed))
            .chain(eval.values().map(|e| (e.cells_failed, e.cells_executed)))
            .fold((0, 0), |(f, t), (a, b)| (f + a, t + b));
        if total > 0 && failed as f64 > self.cfg.max_sandbox_failure_fraction * total as f64 {
            return Err(RunError::SandboxStorm {
                failed,
                total,
                limit: self.cfg.max_sandbox_failure_fraction,
            });
        }
        for id in &unmarked {
            tracing::warn!(round, problem = %id, "problem skipped after sandbox failures");
        }

        let sft: Vec<SftRecord> = train.values().flat_map(|p| p.sft.iter().cloned()).collect();
        let kto: Vec<KtoRecord> = train.values().flat_map(|p| p.kto.iter().cloned()).collect();
        emit_sft_dataset(&sft, &partial.join(sft_file_name(round)))?;
        let summary = emit_kto_dataset(&kto, &partial.join(kto_file_name(round)))?;
        tracing::info!(
            round,
            sft = sft.len(),
            desirable = summary.desirable,
            undesirable = summary.undesirable,
            ratio = ?summary.ratio,
            "datasets written"
        );

        let metrics = self.summarize(round, models, &train, &eval);
        let state = RoundState {
            round,
            config_hash: self.manifest.config_hash.clone(),
            models: models.clone(),
            sft_dataset: sft_file_name(round),
            kto_dataset: kto_file_name(round),
            problems: train.values().map(problem_summary).collect(),
            eval: eval.into_values().collect(),
            metrics,
        };
        let mut rows = Vec::new();
        for q in 1..round {
            rows.push(self.load_round_state(q)?.expect("checked above").metrics);
        }
        rows.push(state.metrics.clone());
        let report_dir = partial.join("report");
        analysis::round_report(&rows, &report_dir).map_err(io_err(&report_dir))?;
        write_json(&partial.join(STATE_FILE), &state)?;
        fs::rename(&partial, &final_dir).map_err(io_err(&final_dir))?;
        if let Ok(dir) = fs::File::open(&self.run_dir) {
            let _ = dir.sync_all();
        }
        Ok(state)
    }

    /// Runs pending problems on worker threads. Results funnel back to this
    /// thread, which alone writes state files. Returns the first fatal error
    /// and the ids of problems left without a marker.
    #[allow(clippy::too_many_arguments)]
    fn process(
        &self,
        pending: &[Work<'_>],
        round: u32,
        round_seed: u64,
        models: &ModelIds,
        partial: &Path,
        train: &mut BTreeMap<String, ProblemResult>,
        eval: &mut BTreeMap<String, EvalResult>,
    ) -> Result<(Option<RunError>, Vec<String>), RunError> {
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = self.cfg.problem_parallelism.min(pending.len()).max(1);
        let mut fatal = None;
        let mut unmarked = Vec::new();
        std::thread::scope(|scope| -> Result<(), RunError> {
            let (tx, rx) = mpsc::channel::<Result<Outcome, RunError>>();
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, abort) = (&next, &abort);
                scope.spawn(move || loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(work) = pending.get(k) else { break };
                    let out = match work {
                        Work::Train(p) => self.train_problem(p, round, round_seed, models),
                        Work::Eval(p) => {
                            self.eval_problem(p, round_seed, models).map(Outcome::Eval)
                        }
                    };
                    if out.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    if tx.send(out).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for out in rx {
                match out {
                    Ok(Outcome::Train(result, matrix)) => {
                        let id = result.problem_id.clone();
                        if let (Some(m), Some(rel)) = (matrix, &result.matrix_file) {
                            let path = partial.join(rel);
                            let mut bytes =
                                serde_json::to_vec_pretty(&m).expect("matrix serializes");
                            bytes.push(b'\n');
                            write_atomic(&path, &bytes).map_err(io_err(&path))?;
                        }
                        if result.status == ProblemStatus::SandboxFailed {
                            unmarked.push(id.clone());
                        } else {
                            write_json(
                                &partial.join(format!("state/problems/{id}.json")),
                                &result,
                            )?;
                        }
                        train.insert(id, *result);
                    }
                    Ok(Outcome::Eval(result)) => {
                        let id = result.problem_id.clone();
                        if result.error.is_none() {
                            write_json(&partial.join(format!("state/eval/{id}.json")), &result)?;
                        } else {
                            unmarked.push(id.clone());
                        }
                        eval.insert(id, result);
                    }
                    Err(e) => {
                        fatal.get_or_insert(e);
                    }
                }
            }
            Ok(())
        })?;
        Ok((fatal, unmarked))
    }

    fn generate(
        &self,
        problem: &Problem,
        role: Role,
        n: usize,
        temperature: f64,
        seed: u64,
        model: &str,
    ) -> Result<Vec<Option<crate::generators::GeneratorResponse>>, RunError> {
        let req = GeneratorRequest {
            role,
            problem,
            n_samples: n,
            temperature,
            seed: Some(seed),
            model_id: model.to_string(),
        };
        self.backend
            .generate(&req)
            .map_err(|source| RunError::Generator {
                problem_id: problem.id.clone(),
                source,
            })
    }

    fn candidates(
        &self,
        problem: &Problem,
        round: u32,
        n: usize,
        temperature: f64,
        seed: u64,
        model: &str,
    ) -> Result<Vec<CandidateProgram>, RunError> {
        let slots = self.generate(problem, Role::Solver, n, temperature, seed, model)?;
        Ok(slots
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.map(|r| CandidateProgram {
                    problem_id: problem.id.clone(),
                    source: String::from_utf8_lossy(&r.extracted).into_owned(),
                    sample_index: i as u32,
                    round,
                    generator_id: self.backend.id().to_string(),
                    token_length: r.token_length,
                })
            })
            .collect())
    }

    fn matrix_options(&self) -> MatrixOptions {
        self.cfg.execution
    }

    fn train_problem(
        &self,
        problem: &Problem,
        round: u32,
        round_seed: u64,
        models: &ModelIds,
    ) -> Result<Outcome, RunError> {
        let cfg = &self.cfg;
        let solver_seed = derive_seed(round_seed, &["solver"]);
        let adversary_seed = derive_seed(round_seed, &["adversary"]);
        // Solver sampling finishes before any adversarial test runs against it.
        let candidates = self.candidates(
            problem,
            round,
            cfg.k1,
            cfg.temperature,
            solver_seed,
            &models.solver_model,
        )?;
        let slots = self.generate(
            problem,
            Role::Adversary,
            cfg.k2,
            cfg.temperature,
            adversary_seed,
            &models.adversary_model,
        )?;
        let tests: Vec<AdversarialTest> = slots
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.map(|r| AdversarialTest {
                    problem_id: problem.id.clone(),
                    input: Payload(r.extracted),
                    sample_index: i as u32,
                    round,
                    generator_id: self.backend.id().to_string(),
                    token_length: r.token_length,
                    validity: Validity::Unchecked,
                    raw_response: r.raw_text,
                })
            })
            .collect();

        let mut result = ProblemResult {
            problem_id: problem.id.clone(),
            status: ProblemStatus::NoCandidates,
            candidates,
            tests,
            matrix_file: None,
            gt_pass_rates: vec![],
            sft: vec![],
            labels: vec![],
            kto: vec![],
            categories: vec![],
            cells_executed: 0,
            cells_failed: 0,
            error: None,
        };
        if result.candidates.is_empty() {
            tracing::warn!(problem = %problem.id, "no usable solver samples");
            return Ok(Outcome::Train(Box::new(result), None));
        }

        let limits = problem.effective_limits(&cfg.limits);
        let build = match build_matrix(
            problem,
            &result.candidates,
            result.tests.clone(),
            &limits,
            &self.sandbox,
            &self.matrix_options(),
        ) {
            Ok(b) => b,
            Err(MatrixError::Sandbox {
                failed_cells,
                total_cells,
                ..
            }) if total_cells > 0 => {
                let err = format!("sandbox failed in {failed_cells} of {total_cells} cells");
                tracing::warn!(problem = %problem.id, "{err}");
                result.status = ProblemStatus::SandboxFailed;
                result.cells_executed = total_cells;
                result.cells_failed = failed_cells;
                result.error = Some(err);
                return Ok(Outcome::Train(Box::new(result), None));
            }
            Err(e) => return Err(RunError::Config(e.to_string())),
        };
        let m = build.matrix;
        result.tests = build.tests;
        result.cells_executed = m.rows() * (m.gt_columns.len() + m.adv_columns.len());

        let solver_prompt = render_prompt(Role::Solver, problem)?;
        let adversary_prompt = render_prompt(Role::Adversary, problem)?;
        result.gt_pass_rates = (0..m.rows()).map(|i| m.gt_pass_rate(i)).collect();
        result.sft = select_candidates(
            &m,
            &result.candidates,
            &cfg.selection,
            &solver_prompt,
            round,
        )
        .map_err(|e| RunError::Config(e.to_string()))?;

        let columns = label_columns(&m.adv_submatrix(), &m.adv_columns);
        let mut labels = Vec::new();
        for t in &result.tests {
            let id = t.id();
            match t.validity {
                Validity::Valid => labels.extend(columns.iter().find(|l| l.test_id == id).cloned()),
                Validity::AllFail => labels.push(TestLabel {
                    test_id: id,
                    fails: m.rows(),
                    passes: 0,
                    label: Label::Discarded,
                }),
                _ => {}
            }
        }
        result.kto = kto_records(&labels, &result.tests, &adversary_prompt)?;
        result.labels = labels;

        let stats = ProblemStats::from_problem(problem);
        result.categories = result
            .tests
            .iter()
            .filter(|t| t.validity == Validity::Valid)
            .map(|t| CategorizedTest {
                test_id: t.id(),
                category: categorize_test(t.input.as_bytes(), &stats, &cfg.categorize),
            })
            .collect();
        result.matrix_file = Some(format!("matrices/{}.json", problem.id));
        result.status = ProblemStatus::Completed;
        Ok(Outcome::Train(Box::new(result), Some(m)))
    }

    fn eval_problem(
        &self,
        problem: &Problem,
        round_seed: u64,
        models: &ModelIds,
    ) -> Result<EvalResult, RunError> {
        let cfg = &self.cfg;
        let seed = derive_seed(round_seed, &["eval"]);
        let candidates = self.candidates(
            problem,
            0,
            cfg.eval_samples,
            cfg.eval_temperature,
            seed,
            &models.solver_model,
        )?;
        let mut result = EvalResult {
            problem_id: problem.id.clone(),
            samples: candidates.len() as u64,
            correct: 0,
            cells_executed: 0,
            cells_failed: 0,
            error: None,
        };
        if candidates.is_empty() {
            return Ok(result);
        }
        let limits = problem.effective_limits(&cfg.limits);
        match build_matrix(
            problem,
            &candidates,
            vec![],
            &limits,
            &self.sandbox,
            &self.matrix_options(),
        ) {
            Ok(b) => {
                let m = b.matrix;
                result.cells_executed = m.rows() * m.gt_columns.len();
                result.correct = (0..m.rows())
                    .filter(|&i| m.gt_pass_rate(i) == Fraction::ONE)
                    .count() as u64;
            }
            Err(MatrixError::Sandbox {
                failed_cells,
                total_cells,
                ..
            }) => {
                result.cells_executed = total_cells;
                result.cells_failed = failed_cells;
                result.error = Some(format!(
                    "sandbox failed in {failed_cells} of {total_cells} cells"
                ));
            }
            Err(e) => return Err(RunError::Config(e.to_string())),
        }
        Ok(result)
    }

    fn summarize(
        &self,
        round: u32,
        models: &ModelIds,
        train: &BTreeMap<String, ProblemResult>,
        eval: &BTreeMap<String, EvalResult>,
    ) -> RoundSummary {
        let rates: Vec<Fraction> = train
            .values()
            .flat_map(|p| p.gt_pass_rates.iter().copied())
            .collect();
        let count = |l: Label| {
            train
                .values()
                .flat_map(|p| &p.labels)
                .filter(|t| t.label == l)
                .count()
        };
        let eval_counts: Vec<(u64, u64)> = eval
            .values()
            .filter(|e| e.error.is_none() && e.samples > 0)
            .map(|e| (e.samples, e.correct))
            .collect();
        RoundSummary {
            round,
            problems: train.len(),
            candidates: train.values().map(|p| p.candidates.len()).sum(),
            mean_gt_pass_rate: if rates.is_empty() {
                Fraction::ZERO
            } else {
                rates.iter().copied().sum::<Fraction>() * Fraction::new(1, rates.len() as i64)
            },
            adversarial_valid: train.values().map(|p| p.categories.len()).sum(),
            adversarial_pruned: train
                .values()
                .filter(|p| p.status == ProblemStatus::Completed)
                .flat_map(|p| &p.tests)
                .filter(|t| t.validity != Validity::Valid)
                .count(),
            desirable: count(Label::Desirable),
            undesirable: count(Label::Undesirable),
            discarded: count(Label::Discarded),
            sft_records: train.values().map(|p| p.sft.len()).sum(),
            categories: histogram(
                train
                    .values()
                    .flat_map(|p| p.categories.iter().map(|c| &c.category.kind)),
            ),
            eval: (!self.manifest.eval_problems.is_empty()).then(|| EvalSummary {
                problems: eval_counts.len(),
                samples_per_problem: self.cfg.eval_samples as u64,
                pass_at_k: analysis::mean_pass_at_k(&eval_counts, &self.cfg.pass_at_k),
            }),
            solver_model: models.solver_model.clone(),
            adversary_model: models.adversary_model.clone(),
        }
    }
}

fn problem_summary(p: &ProblemResult) -> ProblemSummary {
    let count = |l: Label| p.labels.iter().filter(|t| t.label == l).count();
    ProblemSummary {
        problem_id: p.problem_id.clone(),
        status: p.status,
        candidates: p.candidates.len(),
        adversarial_generated: p.tests.len(),
        adversarial_valid: p.categories.len(),
        adversarial_pruned: p
            .tests
            .iter()
            .filter(|t| t.validity != Validity::Valid)
            .count(),
        sft_records: p.sft.len(),
        desirable: count(Label::Desirable),
        undesirable: count(Label::Undesirable),
        discarded: count(Label::Discarded),
        matrix_file: p.matrix_file.clone(),
        state_file: format!("state/problems/{}.json", p.problem_id),
    }
}
