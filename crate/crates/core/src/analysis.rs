//! pass@k estimation, rule-based categorization of adversarial tests, and
//! per-round trend reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fraction::Fraction;
use crate::jsonl::write_atomic;
use crate::model::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKind {
    Boundary,
    FormatSensitive,
    Combinatorial,
    Stress,
    Other,
}

impl CategoryKind {
    /// Report order.
    pub const ALL: [CategoryKind; 5] = [
        CategoryKind::Boundary,
        CategoryKind::FormatSensitive,
        CategoryKind::Combinatorial,
        CategoryKind::Stress,
        CategoryKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CategoryKind::Boundary => "boundary",
            CategoryKind::FormatSensitive => "format_sensitive",
            CategoryKind::Combinatorial => "combinatorial",
            CategoryKind::Stress => "stress",
            CategoryKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCategory {
    pub kind: CategoryKind,
    pub triggers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategorizeConfig {
    /// A numeric token this close to a declared bound counts as boundary.
    pub bound_distance: i64,
    /// Input length at least this multiple of the median GT input length is stress.
    pub stress_factor: u64,
    /// Shortest run of consecutive spaces counted as a format anomaly.
    pub min_space_run: usize,
}

impl Default for CategorizeConfig {
    fn default() -> Self {
        CategorizeConfig {
            bound_distance: 1,
            stress_factor: 10,
            min_space_run: 2,
        }
    }
}

impl CategorizeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.bound_distance < 0 || self.stress_factor == 0 || self.min_space_run < 2 {
            return Err(
                "categorize: bound_distance >= 0, stress_factor >= 1, min_space_run >= 2".into(),
            );
        }
        Ok(())
    }
}

/// Per-problem statistics the categorization rules consult.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemStats {
    pub median_gt_input_len: usize,
    /// Declared inclusive value ranges, if the problem has a grammar.
    pub bounds: Vec<(i64, i64)>,
}

impl ProblemStats {
    /// Lower median of the GT input lengths; bounds from the offline grammar.
    pub fn from_problem(p: &Problem) -> Self {
        let mut lens: Vec<usize> = p.gt_tests.iter().map(|t| t.input.len()).collect();
        lens.sort_unstable();
        let median = if lens.is_empty() {
            0
        } else {
            lens[(lens.len() - 1) / 2]
        };
        let bounds = p
            .offline
            .as_ref()
            .and_then(|o| o.grammar.as_ref())
            .map(|g| g.bounds())
            .unwrap_or_default();
        ProblemStats {
            median_gt_input_len: median,
            bounds,
        }
    }
}

fn boundary_triggers(
    input: &[u8],
    stats: &ProblemStats,
    cfg: &CategorizeConfig,
    out: &mut Vec<&'static str>,
) {
    let text = String::from_utf8_lossy(input);
    let tokens: Vec<&str> = text.split_ascii_whitespace().collect();
    match tokens.len() {
        0 => out.push("empty"),
        1 => out.push("single_token"),
        _ => {}
    }
    let d = cfg.bound_distance as i128;
    let near = tokens
        .iter()
        .filter_map(|t| t.parse::<i128>().ok())
        .any(|v| {
            stats
                .bounds
                .iter()
                .any(|&(lo, hi)| (v - lo as i128).abs() <= d || (v - hi as i128).abs() <= d)
        });
    if near {
        out.push("near_bound");
    }
}

fn format_triggers(input: &[u8], cfg: &CategorizeConfig, out: &mut Vec<&'static str>) {
    let body = input.strip_suffix(b"\n").unwrap_or(input);
    if !input.is_empty() {
        let mut lines = body.split(|&b| b == b'\n');
        let blank = |l: &[u8]| l.iter().all(|b| b.is_ascii_whitespace());
        if lines.next().is_some_and(blank) {
            out.push("leading_blank_line");
        }
        if body.split(|&b| b == b'\n').count() > 1
            && body.rsplit(|&b| b == b'\n').next().is_some_and(blank)
        {
            out.push("trailing_blank_line");
        }
    }
    let mut run = 0usize;
    let mut longest = 0usize;
    for &b in input {
        run = if b == b' ' { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    if longest >= cfg.min_space_run {
        out.push("space_run");
    }
    if input.contains(&b'\t') {
        out.push("tab");
    }
}

/// Assigns one category. Several rule families firing together make the
/// test combinatorial; a single family names the category; none gives Other.
pub fn categorize_test(input: &[u8], stats: &ProblemStats, cfg: &CategorizeConfig) -> TestCategory {
    let mut boundary = Vec::new();
    boundary_triggers(input, stats, cfg, &mut boundary);
    let mut format = Vec::new();
    format_triggers(input, cfg, &mut format);
    let median = stats.median_gt_input_len.max(1) as u64;
    let stress = (input.len() as u64) >= cfg.stress_factor.saturating_mul(median);

    let families = [
        (!boundary.is_empty(), CategoryKind::Boundary),
        (!format.is_empty(), CategoryKind::FormatSensitive),
        (stress, CategoryKind::Stress),
    ];
    let fired: Vec<CategoryKind> = families
        .iter()
        .filter(|(f, _)| *f)
        .map(|(_, k)| *k)
        .collect();
    let kind = match fired.as_slice() {
        [] => CategoryKind::Other,
        [one] => *one,
        _ => CategoryKind::Combinatorial,
    };
    let mut triggers: Vec<String> = boundary
        .into_iter()
        .chain(format)
        .map(String::from)
        .collect();
    if stress {
        triggers.push("stress".into());
    }
    TestCategory { kind, triggers }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub kind: CategoryKind,
    pub count: u64,
    pub proportion: Fraction,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("no tests to summarize")]
    EmptyInput,
    #[error("pass@k undefined for n={n}, c={c}, k={k}")]
    Domain { n: u64, c: u64, k: u64 },
    #[error("pass@k for n={n} does not fit exact 64-bit arithmetic")]
    Overflow { n: u64 },
}

/// Counts per category in report order; proportions are zero when empty.
pub fn histogram<'a>(kinds: impl IntoIterator<Item = &'a CategoryKind>) -> Vec<CategoryShare> {
    let mut counts = [0u64; 5];
    for k in kinds {
        counts[CategoryKind::ALL
            .iter()
            .position(|c| c == k)
            .expect("known kind")] += 1;
    }
    let total: u64 = counts.iter().sum();
    CategoryKind::ALL
        .iter()
        .zip(counts)
        .map(|(&kind, count)| CategoryShare {
            kind,
            count,
            proportion: Fraction::ratio_of(count as usize, total as usize)
                .unwrap_or(Fraction::ZERO),
        })
        .collect()
}

pub fn category_distribution(
    categories: &[TestCategory],
) -> Result<Vec<CategoryShare>, AnalysisError> {
    if categories.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    Ok(histogram(categories.iter().map(|c| &c.kind)))
}

fn check_domain(n: u64, c: u64, k: u64) -> Result<(), AnalysisError> {
    if c > n || k == 0 || k > n {
        return Err(AnalysisError::Domain { n, c, k });
    }
    Ok(())
}

/// Unbiased estimate of pass@k from `n` samples of which `c` are correct:
/// `1 - C(n-c, k) / C(n, k)`, evaluated as a running product.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, AnalysisError> {
    check_domain(n, c, k)?;
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// [`pass_at_k`] as an exact rational.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<Fraction, AnalysisError> {
    check_domain(n, c, k)?;
    if n - c < k {
        return Ok(Fraction::ONE);
    }
    let overflow = AnalysisError::Overflow { n };
    let miss = binomial(n - c, k).ok_or(overflow.clone())?;
    let all = binomial(n, k).ok_or(overflow.clone())?;
    let g = gcd(miss, all);
    let (num, den) = ((all - miss) / g, all / g);
    let num = i64::try_from(num).map_err(|_| overflow.clone())?;
    let den = i64::try_from(den).map_err(|_| overflow)?;
    Ok(Fraction::new(num, den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub problems: usize,
    pub samples_per_problem: u64,
    pub pass_at_k: Vec<PassAtK>,
}

/// Mean pass@k over problems, given `(n, c)` per problem. Values of `k`
/// larger than a problem's `n` are skipped.
pub fn mean_pass_at_k(per_problem: &[(u64, u64)], ks: &[u64]) -> Vec<PassAtK> {
    ks.iter()
        .filter_map(|&k| {
            let vals: Vec<f64> = per_problem
                .iter()
                .filter_map(|&(n, c)| pass_at_k(n, c, k).ok())
                .collect();
            (!vals.is_empty()).then(|| PassAtK {
                k,
                value: vals.iter().sum::<f64>() / vals.len() as f64,
            })
        })
        .collect()
}

/// One row of the round trend table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub problems: usize,
    pub candidates: usize,
    pub mean_gt_pass_rate: Fraction,
    pub adversarial_valid: usize,
    pub adversarial_pruned: usize,
    pub desirable: usize,
    pub undesirable: usize,
    pub discarded: usize,
    pub sft_records: usize,
    pub categories: Vec<CategoryShare>,
    pub eval: Option<EvalSummary>,
    pub solver_model: String,
    pub adversary_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub rounds: Vec<RoundSummary>,
}

pub fn render_report_text(report: &RoundReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5} {:>8} {:>10} {:>8} {:>6} {:>6} {:>6} {:>5}  pass@k",
        "round", "problems", "gt_pass", "adv", "des", "undes", "disc", "sft"
    );
    for r in &report.rounds {
        let pass = r
            .eval
            .as_ref()
            .map(|e| {
                e.pass_at_k
                    .iter()
                    .map(|p| format!("@{}={:.4}", p.k, p.value))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>5} {:>8} {:>10.4} {:>8} {:>6} {:>6} {:>6} {:>5}  {}",
            r.round,
            r.problems,
            r.mean_gt_pass_rate.to_f64(),
            r.adversarial_valid,
            r.desirable,
            r.undesirable,
            r.discarded,
            r.sft_records,
            pass
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "categories:");
    for r in &report.rounds {
        let cells: Vec<String> = r
            .categories
            .iter()
            .map(|c| {
                format!(
                    "{}={}({:.3})",
                    c.kind.as_str(),
                    c.count,
                    c.proportion.to_f64()
                )
            })
            .collect();
        let _ = writeln!(s, "  round {}: {}", r.round, cells.join(" "));
    }
    s
}

/// Writes `report_round{r}.json` and `report_round{r}.txt` into `dir` and
/// returns both paths.
pub fn round_report(
    rows: &[RoundSummary],
    dir: &Path,
) -> Result<(PathBuf, PathBuf), std::io::Error> {
    let last = rows.last().ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "no rounds to report")
    })?;
    std::fs::create_dir_all(dir)?;
    let report = RoundReport {
        rounds: rows.to_vec(),
    };
    let json_path = dir.join(format!("report_round{}.json", last.round));
    let txt_path = dir.join(format!("report_round{}.txt", last.round));
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write_atomic(&json_path, &json)?;
    write_atomic(&txt_path, render_report_text(&report).as_bytes())?;
    Ok((json_path, txt_path))
}
