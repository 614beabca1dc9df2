//! Hard filtering, combined scoring and top-fraction selection of solver
//! samples for supervised fine-tuning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fraction::Fraction;
use crate::jsonl;
use crate::matrix::ExecutionMatrix;
use crate::model::CandidateProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Minimum ground-truth pass rate.
    pub tau_gt: Fraction,
    /// Minimum adversarial execution success rate.
    pub tau_adv: Fraction,
    /// Weight of the ground-truth rate in the combined score.
    pub alpha: Fraction,
    /// Upper bound on the selected fraction of samples per problem.
    pub rho: Fraction,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            tau_gt: Fraction::new(4, 5),
            tau_adv: Fraction::new(3, 10),
            alpha: Fraction::new(3, 5),
            rho: Fraction::new(1, 8),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("tau_gt", self.tau_gt),
            ("tau_adv", self.tau_adv),
            ("alpha", self.alpha),
        ] {
            if !v.is_unit_interval() {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.rho > Fraction::ZERO && self.rho <= Fraction::ONE) {
            return Err(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        Ok(())
    }

    /// Maximum number of samples kept out of `k1`: the ceiling of `rho * k1`.
    pub fn budget(&self, k1: usize) -> usize {
        (self.rho * Fraction::from_integer(k1 as i64))
            .ceil_int()
            .max(0) as usize
    }
}

/// `alpha * r_gt + (1 - alpha) * r_adv`, exactly.
pub fn combined_score(r_gt: Fraction, r_adv: Fraction, alpha: Fraction) -> Fraction {
    alpha * r_gt + (Fraction::ONE - alpha) * r_adv
}

/// Per-candidate statistics the selection rule looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateStats {
    pub r_gt: Fraction,
    pub r_adv: Fraction,
    pub token_length: u64,
    pub sample_index: u32,
}

/// Indices into `stats` of the selected candidates, best first.
///
/// Candidates below either threshold are dropped; survivors are ordered by
/// combined score (descending), then shorter completion, then lower sample
/// index, and truncated to the budget for `k1` samples.
pub fn rank_candidates(stats: &[CandidateStats], k1: usize, cfg: &SelectionConfig) -> Vec<usize> {
    let mut survivors: Vec<(Fraction, usize)> = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.r_gt >= cfg.tau_gt && s.r_adv >= cfg.tau_adv)
        .map(|(i, s)| (combined_score(s.r_gt, s.r_adv, cfg.alpha), i))
        .collect();
    survivors.sort_by(|(sa, a), (sb, b)| {
        sb.cmp(sa)
            .then(stats[*a].token_length.cmp(&stats[*b].token_length))
            .then(stats[*a].sample_index.cmp(&stats[*b].sample_index))
    });
    survivors.truncate(cfg.budget(k1));
    survivors.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
    pub problem_id: String,
    pub score: f64,
    pub score_exact: Fraction,
    pub round: u32,
    pub sample_index: u32,
}

#[derive(Debug, thiserror::Error)]
#[error("matrix rows do not match the candidate list for problem `{0}`")]
pub struct RowMismatch(pub String);

/// Applies [`rank_candidates`] to a finalized matrix.
pub fn select_candidates(
    m: &ExecutionMatrix,
    candidates: &[CandidateProgram],
    cfg: &SelectionConfig,
    prompt: &str,
    round: u32,
) -> Result<Vec<SftRecord>, RowMismatch> {
    let rows: Vec<&CandidateProgram> = m
        .candidates
        .iter()
        .map(|id| candidates.iter().find(|c| &c.id() == id))
        .collect::<Option<_>>()
        .ok_or_else(|| RowMismatch(m.problem_id.clone()))?;
    let stats: Vec<CandidateStats> = rows
        .iter()
        .enumerate()
        .map(|(i, c)| CandidateStats {
            r_gt: m.gt_pass_rate(i),
            r_adv: m.adv_success_rate(i),
            token_length: c.token_length,
            sample_index: c.sample_index,
        })
        .collect();
    Ok(rank_candidates(&stats, m.rows(), cfg)
        .into_iter()
        .map(|i| {
            let score = combined_score(stats[i].r_gt, stats[i].r_adv, cfg.alpha);
            SftRecord {
                prompt: prompt.to_string(),
                completion: rows[i].source.clone(),
                problem_id: m.problem_id.clone(),
                score: score.to_f64(),
                score_exact: score,
                round,
                sample_index: rows[i].sample_index,
            }
        })
        .collect())
}

/// Writes records grouped by problem id, best score first within a problem.
pub fn emit_sft_dataset(records: &[SftRecord], path: &Path) -> Result<(), jsonl::JsonlError> {
    let mut sorted: Vec<&SftRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.problem_id
            .cmp(&b.problem_id)
            .then(b.score_exact.cmp(&a.score_exact))
    });
    jsonl::write(path, sorted)
}
