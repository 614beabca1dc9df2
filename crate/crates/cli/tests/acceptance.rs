//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so every line is printed on success as well as failure.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use crucible_core::analysis::{pass_at_k, pass_at_k_exact};
use crucible_core::fraction::Fraction;
use crucible_core::kto::{batch_loss, grad_wrt_logp, ObjectiveConfig, PreferenceSample};
use crucible_core::matrix::{build_matrix, ExecutionMatrix, MatrixOptions};
use crucible_core::model::{
    load_corpus, AdversarialTest, CandidateProgram, Payload, ResourceLimits, Validity,
};
use crucible_core::orchestrator::{Orchestrator, RoundConfig};
use crucible_core::preference::{label_tests, Label};
use crucible_core::sandbox::{adv_verdict, Sandbox, VerdictKind};
use crucible_core::selection::{select_candidates, SelectionConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn cli_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn labeling_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let (k1, k2) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let m: Vec<Vec<bool>> = (0..k1)
            .map(|_| (0..k2).map(|_| rng.random()).collect())
            .collect();
        let labels = label_tests(&m);
        check(labels.len() == k2, || {
            format!("case {case}: {} labels for {k2} columns", labels.len())
        })?;
        for (j, l) in labels.iter().enumerate() {
            let mut e = 0;
            for row in &m {
                if !row[j] {
                    e += 1;
                }
            }
            let s = k1 - e;
            let y = e >= 1 && s >= 1;
            let expected = if y {
                Label::Desirable
            } else if e == 0 {
                Label::Undesirable
            } else {
                Label::Discarded
            };
            check((l.fails, l.passes, l.label) == (e, s, expected), || {
                format!(
                    "case {case} column {j}: got {:?}, oracle ({e}, {s}, {expected:?})",
                    l
                )
            })?;
        }
    }
    let t = started.elapsed();
    check(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("1000 matrices, 0 mismatches, {t:.2?}"))
}

/// Exact rational as (numerator, denominator) with a positive denominator.
type Q = (i128, i128);

fn q(f: Fraction) -> Q {
    (f.numer() as i128, f.denom() as i128)
}

fn q_ge(a: Q, b: Q) -> bool {
    a.0 * b.1 >= b.0 * a.1
}

fn q_cmp(a: Q, b: Q) -> std::cmp::Ordering {
    (a.0 * b.1).cmp(&(b.0 * a.1))
}

fn selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_err = 0f64;
    let mut selected_total = 0;
    for case in 0..1000 {
        let k1: usize = rng.random_range(1..=8);
        let n_gt: usize = rng.random_range(1..=6);
        let n_adv: usize = rng.random_range(0..=6);
        let gt: Vec<Vec<bool>> = (0..k1)
            .map(|_| (0..n_gt).map(|_| rng.random_bool(0.8)).collect())
            .collect();
        let adv: Vec<Vec<bool>> = (0..k1)
            .map(|_| (0..n_adv).map(|_| rng.random_bool(0.6)).collect())
            .collect();
        let cfg = if case % 2 == 0 {
            SelectionConfig::default()
        } else {
            SelectionConfig {
                tau_gt: Fraction::new(rng.random_range(0..=10), 10),
                tau_adv: Fraction::new(rng.random_range(0..=10), 10),
                alpha: Fraction::new(rng.random_range(0..=10), 10),
                rho: Fraction::new(rng.random_range(1..=8), 8),
            }
        };
        let lengths: Vec<u64> = (0..k1).map(|_| rng.random_range(1..=3)).collect();
        let m = ExecutionMatrix {
            problem_id: "p".into(),
            candidates: (0..k1).map(|i| format!("c{i:02}")).collect(),
            gt_columns: (0..n_gt).map(|j| format!("gt{j:02}")).collect(),
            adv_columns: (0..n_adv).map(|j| format!("adv{j:02}")).collect(),
            cells: (0..k1)
                .map(|i| gt[i].iter().chain(&adv[i]).copied().collect())
                .collect(),
            verdicts: vec![],
            pruned_tests: vec![],
        };
        let mut candidates: Vec<CandidateProgram> = (0..k1)
            .map(|i| CandidateProgram {
                problem_id: "p".into(),
                source: format!("print({i})"),
                sample_index: i as u32,
                round: 1,
                generator_id: "t".into(),
                token_length: lengths[i],
            })
            .collect();
        candidates.shuffle(&mut rng);
        let got =
            select_candidates(&m, &candidates, &cfg, "prompt", 1).map_err(|e| e.to_string())?;

        // Brute force with integer cross-multiplication.
        let alpha = q(cfg.alpha);
        let mut rows: Vec<(Q, usize)> = Vec::new();
        for i in 0..k1 {
            let r_gt: Q = (gt[i].iter().filter(|&&b| b).count() as i128, n_gt as i128);
            let r_adv: Q = if n_adv == 0 {
                (1, 1)
            } else {
                (adv[i].iter().filter(|&&b| b).count() as i128, n_adv as i128)
            };
            if !(q_ge(r_gt, q(cfg.tau_gt)) && q_ge(r_adv, q(cfg.tau_adv))) {
                continue;
            }
            let den = alpha.1 * r_gt.1 * r_adv.1;
            let num = alpha.0 * r_gt.0 * r_adv.1 + (alpha.1 - alpha.0) * r_adv.0 * r_gt.1;
            rows.push(((num, den), i));
        }
        rows.sort_by(|a, b| {
            q_cmp(b.0, a.0)
                .then(lengths[a.1].cmp(&lengths[b.1]))
                .then(a.1.cmp(&b.1))
        });
        let budget = {
            let (n, d) = q(cfg.rho);
            ((n * k1 as i128 + d - 1) / d) as usize
        };
        rows.truncate(budget);

        let got_idx: Vec<usize> = got.iter().map(|r| r.sample_index as usize).collect();
        let want_idx: Vec<usize> = rows.iter().map(|r| r.1).collect();
        check(got_idx == want_idx, || {
            format!("case {case}: selected {got_idx:?}, oracle {want_idx:?}")
        })?;
        for (rec, ((num, den), _)) in got.iter().zip(&rows) {
            check(
                q(rec.score_exact).0 * den == num * q(rec.score_exact).1,
                || {
                    format!(
                        "case {case}: exact score {} vs {num}/{den}",
                        rec.score_exact
                    )
                },
            )?;
            let err = (rec.score - *num as f64 / *den as f64).abs();
            max_err = max_err.max(err);
            check(err <= 1e-12, || {
                format!("case {case}: float score off by {err:e}")
            })?;
        }
        selected_total += got.len();
    }
    Ok(format!(
        "1000 cases, {selected_total} selections, 0 mismatches, max float error {max_err:.1e}"
    ))
}

fn kto_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lambdas = [0.0, 0.001, 0.1];
    let mut worst = 0f64;
    let h = 1e-6;
    for b in 0..100 {
        let cfg = ObjectiveConfig {
            lambda_len: lambdas[b % 3],
            ..Default::default()
        };
        let n = rng.random_range(2..=16);
        let samples: Vec<PreferenceSample> = (0..n)
            .map(|i| {
                let logp_ref = rng.random_range(-200.0..-1.0);
                PreferenceSample {
                    logp_policy: logp_ref + rng.random_range(-20.0..20.0),
                    logp_ref,
                    length: rng.random_range(0..=300),
                    desirable: match i {
                        0 => true,
                        1 => false,
                        _ => rng.random(),
                    },
                }
            })
            .collect();
        let analytic = grad_wrt_logp(&samples, &cfg).map_err(|e| e.to_string())?;
        for i in 0..n {
            let mut up = samples.clone();
            up[i].logp_policy += h;
            let mut down = samples.clone();
            down[i].logp_policy -= h;
            let fd =
                (batch_loss(&up, &cfg).unwrap().0 - batch_loss(&down, &cfg).unwrap().0) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs());
            worst = worst.max(rel);
            check(rel <= 1e-4, || {
                format!(
                    "batch {b} sample {i}: analytic {} vs fd {fd} (rel {rel:e})",
                    analytic[i]
                )
            })?;
            let sign_ok = if samples[i].desirable {
                analytic[i] < 0.0
            } else {
                analytic[i] > 0.0
            };
            check(sign_ok, || {
                format!("batch {b} sample {i}: wrong gradient sign")
            })?;
        }
    }
    Ok(format!(
        "100 batches, lambda in {{0, 0.001, 0.1}}, max relative error {worst:.1e}"
    ))
}

fn pass_at_k_oracle() -> Outcome {
    let mut cases = 0;
    let mut max_err = 0f64;
    for n in 1..=12u64 {
        for c in 0..=n {
            for k in 1..=n {
                let (mut hits, mut total) = (0i64, 0i64);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as u64 != k {
                        continue;
                    }
                    total += 1;
                    // Samples 0..c are the correct ones.
                    if mask & ((1u32 << c) - 1) != 0 {
                        hits += 1;
                    }
                }
                let exact = pass_at_k_exact(n, c, k).map_err(|e| e.to_string())?;
                check(exact == Fraction::new(hits, total), || {
                    format!("n={n} c={c} k={k}: {exact} vs {hits}/{total}")
                })?;
                let err = (pass_at_k(n, c, k).unwrap() - hits as f64 / total as f64).abs();
                max_err = max_err.max(err);
                check(err <= 1e-12, || {
                    format!("n={n} c={c} k={k}: float error {err:e}")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} (n, c, k) triples, exact rational match, max float error {max_err:.1e}"
    ))
}

fn sandbox_kill_guarantee() -> Outcome {
    let sandbox = Sandbox::default();
    let wall = Duration::from_millis(1000);
    let limits = ResourceLimits {
        wall_time: wall,
        cpu_time: Duration::from_secs(1),
        ..Default::default()
    };
    let programs = [
        ("infinite loop", "while True:\n    pass\n"),
        (
            "blocking read",
            "import os\nr, w = os.pipe()\nos.read(r, 1)\n",
        ),
    ];
    let mut slowest = Duration::ZERO;
    for (name, src) in programs {
        for rep in 0..20 {
            let started = Instant::now();
            let raw = sandbox
                .execute(src, b"", &limits)
                .map_err(|e| format!("{name} rep {rep}: {e}"))?;
            let t = started.elapsed();
            slowest = slowest.max(t);
            check(t <= wall + Duration::from_secs(2), || {
                format!("{name} rep {rep}: returned after {t:?}")
            })?;
            let v = adv_verdict(&raw);
            check(v.kind == VerdictKind::Timeout, || {
                format!("{name} rep {rep}: verdict {v:?}")
            })?;
        }
    }
    let bomb_limits = ResourceLimits {
        memory: 256 << 20,
        ..Default::default()
    };
    for rep in 0..3 {
        let raw = sandbox
            .execute("x = [0] * 10**9\n", b"", &bomb_limits)
            .map_err(|e| format!("allocation bomb rep {rep}: {e}"))?;
        let kind = adv_verdict(&raw).kind;
        check(
            matches!(
                kind,
                VerdictKind::MemoryExceeded | VerdictKind::RuntimeError
            ),
            || format!("allocation bomb rep {rep}: verdict {kind:?}"),
        )?;
    }
    Ok(format!(
        "40 timeouts, slowest {slowest:.2?} (limit {:?}); allocation bomb contained 3/3",
        wall + Duration::from_secs(2)
    ))
}

#[derive(serde::Deserialize)]
struct MatrixCase {
    problem_id: String,
    adversarial_inputs: Vec<String>,
    expected: ExpectedMatrix,
}

#[derive(serde::Deserialize)]
struct ExpectedMatrix {
    gt_cells: Vec<Vec<u8>>,
    adv_columns: Vec<String>,
    adv_cells: Vec<Vec<u8>>,
    pruned: Vec<serde_json::Value>,
}

fn matrix_semantics() -> Outcome {
    let corpus = load_corpus(&core_fixture("corpus.json")).map_err(|e| e.to_string())?;
    let text =
        std::fs::read_to_string(core_fixture("matrix_cases.json")).map_err(|e| e.to_string())?;
    let cases: Vec<MatrixCase> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    check(cases.len() == 10, || {
        format!("{} fixture problems", cases.len())
    })?;
    let sandbox = Sandbox::default();
    let mut cells = 0;
    for case in &cases {
        let p = corpus
            .iter()
            .find(|p| p.id == case.problem_id)
            .ok_or("unknown fixture problem")?;
        let candidates: Vec<CandidateProgram> = p
            .offline
            .as_ref()
            .unwrap()
            .programs
            .iter()
            .enumerate()
            .map(|(i, prog)| CandidateProgram {
                problem_id: p.id.clone(),
                source: prog.source.clone(),
                sample_index: i as u32,
                round: 1,
                generator_id: "fixture".into(),
                token_length: 1,
            })
            .collect();
        let tests: Vec<AdversarialTest> = case
            .adversarial_inputs
            .iter()
            .enumerate()
            .map(|(j, input)| AdversarialTest {
                problem_id: p.id.clone(),
                input: Payload::from(input.as_str()),
                sample_index: j as u32,
                round: 1,
                generator_id: "fixture".into(),
                token_length: 1,
                validity: Validity::Unchecked,
                raw_response: String::new(),
            })
            .collect();
        let limits = p.effective_limits(&ResourceLimits::default());
        let opts = MatrixOptions {
            reuse_identical_executions: false,
            ..Default::default()
        };
        let m = build_matrix(p, &candidates, tests, &limits, &sandbox, &opts)
            .map_err(|e| e.to_string())?
            .matrix;
        let as_bits = |rows: Vec<Vec<bool>>| -> Vec<Vec<u8>> {
            rows.into_iter()
                .map(|r| r.into_iter().map(u8::from).collect())
                .collect()
        };
        let gt = as_bits((0..m.rows()).map(|i| m.gt_row(i).to_vec()).collect());
        let adv = as_bits(m.adv_submatrix());
        let e = &case.expected;
        check(gt == e.gt_cells, || {
            format!("{}: GT cells {gt:?}, expected {:?}", p.id, e.gt_cells)
        })?;
        check(m.adv_columns == e.adv_columns, || {
            format!(
                "{}: adv columns {:?}, expected {:?}",
                p.id, m.adv_columns, e.adv_columns
            )
        })?;
        check(adv == e.adv_cells, || {
            format!("{}: adv cells {adv:?}, expected {:?}", p.id, e.adv_cells)
        })?;
        let pruned = serde_json::to_value(&m.pruned_tests).unwrap();
        check(pruned.as_array().unwrap() == &e.pruned, || {
            format!("{}: pruned {pruned}, expected {:?}", p.id, e.pruned)
        })?;
        cells += m.rows() * (m.gt_columns.len() + case.adversarial_inputs.len());
    }
    Ok(format!(
        "10 problems, {cells} cells match the frozen matrices"
    ))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn end_to_end_determinism() -> Outcome {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    let mut times = Vec::new();
    for name in ["a", "b"] {
        let dir = scratch.path().join(name);
        let started = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_crucible"))
            .args(["run-evolution", "--backend", "offline", "--seed", "7"])
            .arg("--config")
            .arg(cli_fixture("e2e.toml"))
            .arg("--corpus")
            .arg(core_fixture("corpus.json"))
            .arg("--run-dir")
            .arg(&dir)
            .env("CRUCIBLE_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        let t = started.elapsed();
        check(out.status.success(), || {
            format!(
                "run {name} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            )
        })?;
        check(t < Duration::from_secs(120), || {
            format!("run {name} took {t:?}")
        })?;
        times.push(t);
        let files = tree(&dir);
        let prefix = scratch.path().to_str().unwrap().as_bytes();
        for (path, bytes) in &files {
            check(!bytes.windows(prefix.len()).any(|w| w == prefix), || {
                format!("{} embeds the run path", path.display())
            })?;
        }
        trees.push(files);
    }
    let (a, b) = (&trees[0], &trees[1]);
    check(a.keys().eq(b.keys()), || {
        "runs produced different file sets".into()
    })?;
    for (path, bytes) in a {
        check(&b[path] == bytes, || {
            format!("{} differs between runs", path.display())
        })?;
    }
    for r in 1..=2 {
        for f in [
            format!("round{r}/sft_round{r}.jsonl"),
            format!("round{r}/kto_round{r}.jsonl"),
            format!("round{r}/report/report_round{r}.json"),
        ] {
            let bytes = a.get(Path::new(&f)).ok_or_else(|| format!("{f} missing"))?;
            check(!bytes.is_empty(), || format!("{f} is empty"))?;
        }
    }
    Ok(format!(
        "R=2, {} files byte-identical across runs, {:.1?} and {:.1?}",
        a.len(),
        times[0],
        times[1]
    ))
}

fn config_fidelity() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_crucible"))
        .arg("--print-config")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || "--print-config failed".into())?;
    let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    let frozen =
        std::fs::read_to_string(cli_fixture("default_config.toml")).map_err(|e| e.to_string())?;
    check(text == frozen, || {
        "printed defaults differ from the frozen fixture".into()
    })?;
    let cfg = RoundConfig::from_toml_str(&text).map_err(|e| e.to_string())?;
    let s = cfg.selection;
    let expected = [
        ("tau_gt", s.tau_gt == Fraction::new(4, 5)),
        ("tau_adv", s.tau_adv == Fraction::new(3, 10)),
        ("rho", s.rho == Fraction::new(1, 8)),
        ("alpha", s.alpha == Fraction::new(3, 5)),
        ("lambda", cfg.objective.lambda_len == 0.001),
        (
            "w_des == w_undes",
            cfg.objective.w_des == cfg.objective.w_undes,
        ),
        ("k1", cfg.k1 == 16),
        ("k2", cfg.k2 == 16),
        ("temperature", cfg.temperature == 1.0),
        ("rounds", cfg.rounds == 5),
    ];
    for (name, ok) in expected {
        check(ok, || format!("{name} default is wrong"))?;
    }
    Ok(
        "tau_gt=0.8 tau_adv=0.3 rho=0.125 alpha=0.6 lambda=0.001 w_des=w_undes k1=k2=16 T=1.0 R=5"
            .into(),
    )
}

/// Pools three seeds with k1 = 4 so that a lower bug rate visibly changes how
/// many problems end up with no bug-revealing candidate. With k1 = 16 every
/// problem keeps at least one buggy sample at rates of 0.5 and above.
fn saturation_probe() -> Outcome {
    let corpus = load_corpus(&core_fixture("corpus.json")).map_err(|e| e.to_string())?;
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut fractions = Vec::new();
    for rate in [0.75, 0.5, 0.25] {
        let (mut undesirable, mut labeled) = (0, 0);
        for seed in [11, 12, 13] {
            let mut cfg = RoundConfig {
                seed,
                k1: 4,
                eval_split: 0.0,
                rounds: 1,
                ..Default::default()
            };
            cfg.execution.reuse_identical_executions = true;
            cfg.backend.offline.bug_rate = rate;
            let dir = scratch.path().join(format!("rate{rate}-seed{seed}"));
            let orch = Orchestrator::new(cfg, corpus.clone(), &dir).map_err(|e| e.to_string())?;
            let state = orch
                .run_round(1, &orch.models_for_round(1).unwrap())
                .map_err(|e| e.to_string())?;
            let m = &state.metrics;
            undesirable += m.undesirable;
            labeled += m.desirable + m.undesirable + m.discarded;
        }
        fractions.push((rate, undesirable as f64 / labeled as f64));
    }
    let shown: Vec<String> = fractions
        .iter()
        .map(|(r, f)| format!("bug_rate {r}: {f:.3}"))
        .collect();
    check(fractions.windows(2).all(|w| w[1].1 > w[0].1), || {
        format!("not monotone: {}", shown.join(", "))
    })?;
    Ok(format!(
        "undesirable fraction rises as bugs drop ({})",
        shown.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("labeling oracle", labeling_oracle),
        ("selection oracle", selection_oracle),
        ("kto gradient check", kto_gradient_check),
        ("pass@k oracle", pass_at_k_oracle),
        ("sandbox kill guarantee", sandbox_kill_guarantee),
        ("matrix semantics", matrix_semantics),
        ("end-to-end determinism", end_to_end_determinism),
        ("config fidelity", config_fidelity),
        ("saturation probe", saturation_probe),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS  {name:<24} {detail} [{:.1?}]", started.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {why} [{:.1?}]", started.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
