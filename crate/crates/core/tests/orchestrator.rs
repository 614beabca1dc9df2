use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crucible_core::generators::{
    Generator, GeneratorError, GeneratorRequest, GeneratorResponse, OfflineBackend, PoolProgram,
    Variant,
};
use crucible_core::jsonl;
use crucible_core::model::{load_corpus, Problem};
use crucible_core::orchestrator::{HookError, Orchestrator, ProblemResult, RoundConfig, RunError};
use crucible_core::preference::KtoRecord;

fn corpus(ids: &[&str]) -> Vec<Problem> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus.json");
    load_corpus(&path)
        .unwrap()
        .into_iter()
        .filter(|p| ids.contains(&p.id.as_str()))
        .collect()
}

fn small_config() -> RoundConfig {
    let mut cfg = RoundConfig {
        seed: 5,
        k1: 4,
        k2: 4,
        eval_split: 0.0,
        rounds: 2,
        ..Default::default()
    };
    cfg.execution.reuse_identical_executions = true;
    cfg
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Offline backend that records the model id of every request.
struct Recording(Arc<Mutex<Vec<String>>>, OfflineBackend);

impl Generator for Recording {
    fn id(&self) -> &str {
        "recording"
    }

    fn generate(
        &self,
        req: &GeneratorRequest<'_>,
    ) -> Result<Vec<Option<GeneratorResponse>>, GeneratorError> {
        self.0.lock().unwrap().push(req.model_id.clone());
        self.1.generate(req)
    }
}

#[test]
fn rerun_is_idempotent_and_datasets_are_marker_unions() {
    let dir = tempfile::tempdir().unwrap();
    let orch = Orchestrator::new(
        small_config(),
        corpus(&["sum-two", "max-list", "gcd-pair"]),
        dir.path(),
    )
    .unwrap();
    let models = orch.models_for_round(1).unwrap();
    let first = orch.run_round(1, &models).unwrap();
    let before = tree(dir.path());
    let second = orch.run_round(1, &models).unwrap();
    assert_eq!(first, second);
    assert_eq!(before, tree(dir.path()));

    let round = orch.round_dir(1);
    let mut union: Vec<KtoRecord> = Vec::new();
    for id in &orch.manifest().train_problems {
        let marker: ProblemResult = serde_json::from_slice(
            &fs::read(round.join(format!("state/problems/{id}.json"))).unwrap(),
        )
        .unwrap();
        union.extend(marker.kto);
    }
    let mut dataset: Vec<KtoRecord> = jsonl::read(&round.join("kto_round1.jsonl")).unwrap();
    let key = |r: &KtoRecord| (r.problem_id.clone(), r.test_id.clone());
    union.sort_by_key(key);
    dataset.sort_by_key(key);
    assert_eq!(union, dataset);
    assert!(!dataset.is_empty());
}

#[test]
fn interrupted_round_resumes_to_the_same_bytes() {
    let ids = ["sum-two", "max-list", "count-vowels"];
    let reference = tempfile::tempdir().unwrap();
    let orch = Orchestrator::new(small_config(), corpus(&ids), reference.path()).unwrap();
    orch.run_round(1, &orch.models_for_round(1).unwrap())
        .unwrap();

    let crashed = tempfile::tempdir().unwrap();
    let orch = Orchestrator::new(small_config(), corpus(&ids), crashed.path()).unwrap();
    orch.run_round(1, &orch.models_for_round(1).unwrap())
        .unwrap();
    // Roll back to the state after two of three problems finished.
    let partial = crashed.path().join("round1.partial");
    fs::rename(crashed.path().join("round1"), &partial).unwrap();
    for f in [
        "state/round_state.json",
        "sft_round1.jsonl",
        "kto_round1.jsonl",
        "report/report_round1.json",
    ] {
        fs::remove_file(partial.join(f)).unwrap();
    }
    fs::remove_file(partial.join("state/problems/max-list.json")).unwrap();
    fs::remove_file(partial.join("matrices/max-list.json")).unwrap();

    let orch = Orchestrator::new(small_config(), corpus(&ids), crashed.path()).unwrap();
    orch.run_round(1, &orch.models_for_round(1).unwrap())
        .unwrap();
    assert!(!partial.exists());
    assert_eq!(tree(reference.path()), tree(crashed.path()));
}

#[test]
fn changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    Orchestrator::new(small_config(), corpus(&["sum-two"]), dir.path()).unwrap();
    let other = RoundConfig {
        k1: 8,
        ..small_config()
    };
    assert!(matches!(
        Orchestrator::new(other, corpus(&["sum-two"]), dir.path()),
        Err(RunError::ConfigMismatch { .. })
    ));
}

#[test]
fn identity_hook_keeps_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RoundConfig {
        trainer_hook: Some("echo {model_id}".into()),
        ..small_config()
    };
    let orch = Orchestrator::new(cfg, corpus(&["sum-two"]), dir.path()).unwrap();
    let states = orch.run_evolution().unwrap();
    assert_eq!(states[1].models.solver_model, "base");
    assert_eq!(states[1].models.adversary_model, "base");
}

#[test]
fn new_model_ids_reach_the_next_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RoundConfig {
        trainer_hook: Some("echo {model_id}-{kind}{round}".into()),
        ..small_config()
    };
    let orch = Orchestrator::new(cfg, corpus(&["sum-two"]), dir.path()).unwrap();
    let states = orch.run_evolution().unwrap();
    // Shared backbone: KTO continues from the SFT output and both roles adopt it.
    assert_eq!(states[1].models.solver_model, "base-sft1-kto1");
    assert_eq!(states[1].models.adversary_model, "base-sft1-kto1");
    let next: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("round2/next_models.json")).unwrap())
            .unwrap();
    assert_eq!(next["solver_model"], "base-sft1-kto1-sft2-kto2");
}

#[test]
fn recorded_requests_use_hook_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RoundConfig {
        trainer_hook: Some("echo {model_id}-{kind}{round}".into()),
        ..small_config()
    };
    let seen = Arc::new(Mutex::new(Vec::new()));
    let backend = Recording(seen.clone(), OfflineBackend::default());
    let orch = Orchestrator::with_backend(cfg, corpus(&["sum-two"]), dir.path(), Box::new(backend))
        .unwrap();
    orch.run_evolution().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(
        seen.len(),
        4,
        "solver and adversary requests for each of two rounds"
    );
    assert_eq!(&seen[..2], ["base", "base"]);
    assert_eq!(&seen[2..], ["base-sft1-kto1", "base-sft1-kto1"]);
}

#[test]
fn failing_hook_leaves_finished_round_intact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RoundConfig {
        trainer_hook: Some("echo nope >&2; exit 3".into()),
        ..small_config()
    };
    let orch = Orchestrator::new(cfg, corpus(&["sum-two"]), dir.path()).unwrap();
    match orch.run_evolution() {
        Err(RunError::Hook {
            round: 1,
            source: HookError::Failed { stderr, .. },
        }) => assert_eq!(stderr, "nope"),
        other => panic!("{other:?}"),
    }
    assert!(orch.load_round_state(1).unwrap().is_some());
    assert!(!dir.path().join("round1/next_models.json").exists());
    assert!(!dir.path().join("round2").exists());
}

#[test]
fn all_pruned_problem_adds_no_preferences() {
    let mut problems = corpus(&["sum-two"]);
    problems[0].offline.as_mut().unwrap().programs = vec![PoolProgram {
        variant: Variant::Crash,
        source: "raise SystemExit(1)\n".into(),
    }];
    let dir = tempfile::tempdir().unwrap();
    let orch = Orchestrator::new(small_config(), problems, dir.path()).unwrap();
    let state = orch
        .run_round(1, &orch.models_for_round(1).unwrap())
        .unwrap();
    let p = &state.problems[0];
    assert_eq!(
        (p.adversarial_valid, p.adversarial_pruned),
        (0, p.adversarial_generated)
    );
    assert!(p.adversarial_generated > 0);
    assert_eq!((p.desirable, p.undesirable, p.sft_records), (0, 0, 0));
    assert_eq!(
        fs::read(dir.path().join("round1/kto_round1.jsonl")).unwrap(),
        b""
    );
}

#[test]
fn missing_interpreter_is_a_sandbox_storm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.sandbox.interpreter = "/nonexistent/python3".into();
    let orch = Orchestrator::new(cfg, corpus(&["sum-two", "max-list"]), dir.path()).unwrap();
    match orch.run_round(1, &orch.models_for_round(1).unwrap()) {
        Err(RunError::SandboxStorm { failed, total, .. }) => assert!(failed > 0 && failed == total),
        other => panic!("{other:?}"),
    }
    assert!(!dir.path().join("round1").exists());
}
