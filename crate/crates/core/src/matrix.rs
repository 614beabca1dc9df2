//! The candidate × test execution table and test-validity pruning.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fraction::Fraction;
use crate::model::{AdversarialTest, CandidateProgram, Problem, ResourceLimits, Validity};
use crate::sandbox::{adv_verdict, gt_verdict, Job, RawExecution, Sandbox, SandboxError, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub test_id: String,
    pub reason: Validity,
}

/// Boolean outcomes for one problem: rows are candidates ordered by sample
/// index, columns are the ground-truth tests followed by the surviving
/// adversarial tests ordered by sample index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionMatrix {
    pub problem_id: String,
    pub candidates: Vec<String>,
    pub gt_columns: Vec<String>,
    pub adv_columns: Vec<String>,
    pub cells: Vec<Vec<bool>>,
    pub verdicts: Vec<Vec<Verdict>>,
    pub pruned_tests: Vec<PruneRecord>,
}

impl ExecutionMatrix {
    pub fn rows(&self) -> usize {
        self.candidates.len()
    }

    pub fn gt_row(&self, i: usize) -> &[bool] {
        &self.cells[i][..self.gt_columns.len()]
    }

    pub fn adv_row(&self, i: usize) -> &[bool] {
        &self.cells[i][self.gt_columns.len()..]
    }

    /// The adversarial block, rows × surviving adversarial tests.
    pub fn adv_submatrix(&self) -> Vec<Vec<bool>> {
        (0..self.rows()).map(|i| self.adv_row(i).to_vec()).collect()
    }

    pub fn gt_pass_rate(&self, i: usize) -> Fraction {
        let row = self.gt_row(i);
        Fraction::ratio_of(row.iter().filter(|&&c| c).count(), row.len())
            .expect("at least one ground-truth column")
    }

    /// Mean over surviving adversarial columns; 1 when none survive.
    pub fn adv_success_rate(&self, i: usize) -> Fraction {
        let row = self.adv_row(i);
        Fraction::ratio_of(row.iter().filter(|&&c| c).count(), row.len()).unwrap_or(Fraction::ONE)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("matrix serializes");
        fs::write(path, text + "\n")
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MatrixError {
    #[error("problem `{0}` has no candidate programs")]
    NoCandidates(String),
    #[error("sandbox failed on problem `{problem_id}` in {failed_cells} of {total_cells} cells, first at {candidate} × {test}: {source}")]
    Sandbox {
        problem_id: String,
        candidate: String,
        test: String,
        failed_cells: usize,
        total_cells: usize,
        #[source]
        source: SandboxError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixOptions {
    /// Concurrent executions; 0 uses the available hardware parallelism.
    pub parallelism: usize,
    /// Execute each distinct (source, stdin) pair once and share the result
    /// across identical cells. Sound only for deterministic programs.
    pub reuse_identical_executions: bool,
    /// Extra attempts for a cell whose execution hit a harness failure.
    pub sandbox_retries: u32,
}

impl MatrixOptions {
    pub fn effective_parallelism(&self) -> usize {
        match self.parallelism {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            parallelism: 0,
            reuse_identical_executions: false,
            sandbox_retries: 1,
        }
    }
}

/// Output of [`build_matrix`]: the final table plus every input test with its
/// validity resolved.
#[derive(Debug, Clone)]
pub struct MatrixBuild {
    pub matrix: ExecutionMatrix,
    pub tests: Vec<AdversarialTest>,
}

impl MatrixBuild {
    pub fn valid_tests(&self) -> Vec<&AdversarialTest> {
        self.tests
            .iter()
            .filter(|t| t.validity == Validity::Valid)
            .collect()
    }
}

/// Discards tests over the input-size cap or rejected by the problem's
/// validator. Without a validator, in-cap tests are accepted.
pub fn prune_invalid_tests(
    problem: &Problem,
    adv_tests: Vec<AdversarialTest>,
    limits: &ResourceLimits,
    sandbox: &Sandbox,
    parallelism: usize,
) -> (Vec<AdversarialTest>, Vec<AdversarialTest>) {
    let mut valid = Vec::new();
    let mut pruned = Vec::new();
    let mut pending = Vec::new();
    for mut t in adv_tests {
        if t.input.len() as u64 > limits.max_test_input_bytes {
            t.validity = Validity::OverLimit;
            pruned.push(t);
        } else if problem.input_validator.is_some() {
            pending.push(t);
        } else {
            t.validity = Validity::Valid;
            valid.push(t);
        }
    }
    if let Some(validator) = &problem.input_validator {
        let jobs: Vec<Job> = pending
            .iter()
            .map(|t| Job {
                source: validator,
                stdin: t.input.as_bytes(),
                limits: *limits,
            })
            .collect();
        let results = sandbox.run_batch(&jobs, parallelism);
        for (mut t, r) in pending.into_iter().zip(results) {
            match r {
                Ok(raw) if adv_verdict(&raw).passed() => {
                    t.validity = Validity::Valid;
                    valid.push(t);
                }
                Ok(_) => {
                    t.validity = Validity::InvalidSpec;
                    pruned.push(t);
                }
                Err(e) => {
                    tracing::warn!(problem = %problem.id, test = %t.id(), error = %e, "validator failed; pruning test");
                    t.validity = Validity::Unchecked;
                    pruned.push(t);
                }
            }
        }
    }
    valid.sort_by_key(|t| t.sample_index);
    pruned.sort_by_key(|t| t.sample_index);
    (valid, pruned)
}

/// Indices of adversarial columns with at least one passing row.
pub fn surviving_columns(adv_cells: &[Vec<bool>], n_cols: usize) -> Vec<usize> {
    (0..n_cols)
        .filter(|&j| adv_cells.iter().any(|row| row[j]))
        .collect()
}

/// Executes every candidate on every ground-truth and valid adversarial
/// test, then removes adversarial columns that no candidate passes.
pub fn build_matrix(
    problem: &Problem,
    candidates: &[CandidateProgram],
    adv_tests: Vec<AdversarialTest>,
    limits: &ResourceLimits,
    sandbox: &Sandbox,
    opts: &MatrixOptions,
) -> Result<MatrixBuild, MatrixError> {
    if candidates.is_empty() {
        return Err(MatrixError::NoCandidates(problem.id.clone()));
    }
    let mut candidates: Vec<&CandidateProgram> = candidates.iter().collect();
    candidates.sort_by_key(|c| c.sample_index);

    let (valid, mut pruned) = prune_invalid_tests(
        problem,
        adv_tests,
        limits,
        sandbox,
        opts.effective_parallelism(),
    );
    let n_gt = problem.gt_tests.len();
    let stdins: Vec<&[u8]> = problem
        .gt_tests
        .iter()
        .map(|t| t.input.as_bytes())
        .chain(valid.iter().map(|t| t.input.as_bytes()))
        .collect();
    let n_cols = stdins.len();

    let raws = execute_grid(&candidates, &stdins, limits, sandbox, opts).map_err(|f| {
        MatrixError::Sandbox {
            problem_id: problem.id.clone(),
            candidate: candidates[f.row].id(),
            test: if f.col < n_gt {
                Problem::gt_test_id(f.col)
            } else {
                valid[f.col - n_gt].id()
            },
            failed_cells: f.failed_cells,
            total_cells: candidates.len() * n_cols,
            source: f.source,
        }
    })?;

    let verdicts: Vec<Vec<Verdict>> = raws
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, raw)| match j < n_gt {
                    true => gt_verdict(raw, problem.gt_tests[j].expected_output.as_bytes()),
                    false => adv_verdict(raw),
                })
                .collect()
        })
        .collect();
    let cells: Vec<Vec<bool>> = verdicts
        .iter()
        .map(|row| row.iter().map(Verdict::passed).collect())
        .collect();

    let adv_cells: Vec<Vec<bool>> = cells.iter().map(|r| r[n_gt..].to_vec()).collect();
    let keep = surviving_columns(&adv_cells, valid.len());
    let keep_cols: Vec<usize> = (0..n_gt).chain(keep.iter().map(|j| j + n_gt)).collect();

    let mut tests = Vec::with_capacity(valid.len() + pruned.len());
    for (j, mut t) in valid.into_iter().enumerate() {
        if !keep.contains(&j) {
            t.validity = Validity::AllFail;
        }
        tests.push(t);
    }
    let adv_columns: Vec<String> = tests
        .iter()
        .filter(|t| t.validity == Validity::Valid)
        .map(|t| t.id())
        .collect();
    tests.append(&mut pruned);
    tests.sort_by_key(|t| t.sample_index);
    let pruned_tests = tests
        .iter()
        .filter(|t| t.validity != Validity::Valid)
        .map(|t| PruneRecord {
            test_id: t.id(),
            reason: t.validity,
        })
        .collect();

    let select = |row: &Vec<_>| keep_cols.iter().map(|&j| row[j]).collect::<Vec<_>>();
    let select_v = |row: &Vec<Verdict>| {
        keep_cols
            .iter()
            .map(|&j| row[j].clone())
            .collect::<Vec<_>>()
    };
    debug_assert!(keep_cols.len() <= n_cols);

    Ok(MatrixBuild {
        matrix: ExecutionMatrix {
            problem_id: problem.id.clone(),
            candidates: candidates.iter().map(|c| c.id()).collect(),
            gt_columns: (0..n_gt).map(Problem::gt_test_id).collect(),
            adv_columns,
            cells: cells.iter().map(select).collect(),
            verdicts: verdicts.iter().map(select_v).collect(),
            pruned_tests,
        },
        tests,
    })
}

struct CellFailure {
    row: usize,
    col: usize,
    failed_cells: usize,
    source: SandboxError,
}

fn execute_grid(
    candidates: &[&CandidateProgram],
    stdins: &[&[u8]],
    limits: &ResourceLimits,
    sandbox: &Sandbox,
    opts: &MatrixOptions,
) -> Result<Vec<Vec<RawExecution>>, CellFailure> {
    let n_cols = stdins.len();
    // Map each cell to a job slot; identical cells share a slot when reuse is on.
    let mut jobs: Vec<Job> = Vec::new();
    let mut owner: Vec<(usize, usize)> = Vec::new();
    let mut slot_of = vec![vec![0usize; n_cols]; candidates.len()];
    let mut seen: HashMap<(&str, &[u8]), usize> = HashMap::new();
    for (i, c) in candidates.iter().enumerate() {
        for (j, stdin) in stdins.iter().enumerate() {
            let key = (c.source.as_str(), *stdin);
            let slot = match opts
                .reuse_identical_executions
                .then(|| seen.get(&key).copied())
                .flatten()
            {
                Some(s) => s,
                None => {
                    jobs.push(Job {
                        source: &c.source,
                        stdin,
                        limits: *limits,
                    });
                    owner.push((i, j));
                    seen.insert(key, jobs.len() - 1);
                    jobs.len() - 1
                }
            };
            slot_of[i][j] = slot;
        }
    }

    let parallelism = opts.effective_parallelism();
    let mut results = sandbox.run_batch(&jobs, parallelism);
    for _ in 0..opts.sandbox_retries {
        let failed: Vec<usize> = (0..results.len())
            .filter(|&k| results[k].is_err())
            .collect();
        if failed.is_empty() {
            break;
        }
        let retry_jobs: Vec<Job> = failed.iter().map(|&k| jobs[k]).collect();
        for (k, r) in failed
            .into_iter()
            .zip(sandbox.run_batch(&retry_jobs, parallelism))
        {
            results[k] = r;
        }
    }
    if results.iter().any(Result::is_err) {
        let failed_slots: Vec<bool> = results.iter().map(Result::is_err).collect();
        let failed_cells = slot_of
            .iter()
            .flatten()
            .filter(|&&s| failed_slots[s])
            .count();
        let k = failed_slots
            .iter()
            .position(|&f| f)
            .expect("a failure exists");
        let (row, col) = owner[k];
        let source = results.swap_remove(k).expect_err("slot failed");
        return Err(CellFailure {
            row,
            col,
            failed_cells,
            source,
        });
    }
    let raws: Vec<RawExecution> = results
        .into_iter()
        .map(|r| r.expect("checked above"))
        .collect();
    Ok(slot_of
        .iter()
        .map(|row| row.iter().map(|&s| raws[s].clone()).collect())
        .collect())
}
