use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crucible_core::analysis::{
    self, categorize_test, category_distribution, ProblemStats, RoundSummary,
};
use crucible_core::fraction::Fraction;
use crucible_core::generators::{render_prompt, Role};
use crucible_core::jsonl;
use crucible_core::kto::{diagnostics, samples_from_records};
use crucible_core::matrix::{build_matrix, ExecutionMatrix};
use crucible_core::model::{
    load_corpus, validate_corpus, AdversarialTest, CandidateProgram, Problem,
};
use crucible_core::orchestrator::{
    BackendKind, ConfigError, Orchestrator, RoundConfig, RoundState,
};
use crucible_core::preference::{emit_kto_dataset, kto_records, label_columns, KtoRecord};
use crucible_core::sandbox::Sandbox;
use crucible_core::selection::{emit_sft_dataset, select_candidates};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "crucible",
    version,
    about = "Execution-supervised solver/adversary self-play harness"
)]
struct Cli {
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (default: runs/<first 12 hex digits of the config hash>).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
    /// Log filter, e.g. `info` or `crucible_core=debug`.
    #[arg(long, global = true, default_value = "info", env = "CRUCIBLE_LOG")]
    log: String,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and check a corpus file or directory.
    ValidateCorpus { corpus: PathBuf },
    /// Run (or resume) a single round.
    RunRound {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        round: u32,
    },
    /// Run (or resume) every round with trainer hooks in between.
    RunEvolution {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        rounds: Option<u32>,
    },
    /// Execute candidates against a problem's tests and write the matrix.
    ExecuteMatrix {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        problem: String,
        /// JSONL of candidate programs.
        #[arg(long)]
        candidates: PathBuf,
        /// JSONL of adversarial tests.
        #[arg(long)]
        tests: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the tests with resolved validity.
        #[arg(long)]
        tests_out: Option<PathBuf>,
    },
    /// Select SFT records from a matrix.
    Select {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        round: u32,
        #[arg(long, value_parser = unit_fraction)]
        tau_gt: Option<Fraction>,
        #[arg(long, value_parser = unit_fraction)]
        tau_adv: Option<Fraction>,
        #[arg(long, value_parser = unit_fraction)]
        alpha: Option<Fraction>,
        #[arg(long, value_parser = positive_unit_fraction)]
        rho: Option<Fraction>,
    },
    /// Label adversarial tests from a matrix and write the KTO dataset.
    Prefs {
        #[arg(long)]
        matrix: PathBuf,
        /// JSONL of adversarial tests (with raw responses).
        #[arg(long)]
        tests: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the KTO objective on a dataset with log-probabilities.
    KtoCheck {
        #[arg(long)]
        dataset: PathBuf,
        /// Fill missing log-probabilities with seeded synthetic values.
        #[arg(long)]
        synthetic_seed: Option<u64>,
        #[arg(long, value_parser = non_negative)]
        lambda_len: Option<f64>,
        #[arg(long, value_parser = positive)]
        beta: Option<f64>,
        #[arg(long, value_parser = positive)]
        w_des: Option<f64>,
        #[arg(long, value_parser = positive)]
        w_undes: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        z_ref: Option<f64>,
    },
    /// Categorize adversarial tests.
    Categorize {
        #[arg(long)]
        corpus: PathBuf,
        /// JSONL of adversarial tests.
        #[arg(long)]
        tests: PathBuf,
    },
    /// Print the trend report for the finished rounds of a run.
    Report {
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Solver bug rate for the offline backend.
    #[arg(long, value_parser = unit_f64)]
    bug_rate: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Offline,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

fn unit_fraction(s: &str) -> Result<Fraction, String> {
    let f: Fraction = s.parse().map_err(|e| format!("{e}"))?;
    if !f.is_unit_interval() {
        return Err(format!("{s} is outside [0, 1]"));
    }
    Ok(f)
}

fn positive_unit_fraction(s: &str) -> Result<Fraction, String> {
    let f = unit_fraction(s)?;
    if f == Fraction::ZERO {
        return Err("must be greater than 0".into());
    }
    Ok(f)
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !v.is_finite() {
        return Err("must be finite".into());
    }
    Ok(v)
}

fn unit_f64(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{s} is outside [0, 1]"));
    }
    Ok(v)
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v < 0.0 {
        return Err("must be >= 0".into());
    }
    Ok(v)
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v <= 0.0 {
        return Err("must be > 0".into());
    }
    Ok(v)
}

/// Failures that are the caller's fault and map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(cli: &Cli) -> anyhow::Result<RoundConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RoundConfig::load(path).map_err(|e| match e {
            ConfigError::Io { .. } => anyhow::Error::new(e),
            other => UsageError(format!("{}: {other}", path.display())).into(),
        })?,
        None => RoundConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(Command::RunRound { run, .. } | Command::RunEvolution { run, .. }) = &cli.command {
        if let Some(b) = run.backend {
            cfg.backend.kind = match b {
                BackendArg::Offline => BackendKind::Offline,
                BackendArg::Remote => BackendKind::Remote,
            };
        }
        if let Some(rate) = run.bug_rate {
            cfg.backend.offline.bug_rate = rate;
        }
    }
    if let Some(Command::RunEvolution {
        rounds: Some(r), ..
    }) = &cli.command
    {
        cfg.rounds = *r;
    }
    cfg.validate()
        .map_err(|e| UsageError(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn run_dir(cli: &Cli, cfg: &RoundConfig) -> PathBuf {
    cli.run_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&cfg.config_hash()[..12]))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("output serializes")
    );
}

fn load_problem(corpus: &Path, id: &str) -> anyhow::Result<Problem> {
    let problems = load_corpus(corpus)?;
    problems
        .into_iter()
        .find(|p| p.id == id)
        .with_context(|| format!("problem `{id}` not in {}", corpus.display()))
}

fn load_matrix(path: &Path) -> anyhow::Result<ExecutionMatrix> {
    ExecutionMatrix::load(path).with_context(|| format!("reading matrix {}", path.display()))
}

fn state_summary(states: &[RoundState]) -> Vec<&RoundSummary> {
    states.iter().map(|s| &s.metrics).collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(UsageError("a subcommand is required (see --help)".into()).into());
    };
    match command {
        Command::ValidateCorpus { corpus } => {
            let problems = load_corpus(corpus)?;
            validate_corpus(&problems)?;
            #[derive(Serialize)]
            struct Summary {
                problems: usize,
                gt_tests: usize,
                with_validator: usize,
                with_offline_spec: usize,
            }
            print_json(&Summary {
                problems: problems.len(),
                gt_tests: problems.iter().map(|p| p.gt_tests.len()).sum(),
                with_validator: problems
                    .iter()
                    .filter(|p| p.input_validator.is_some())
                    .count(),
                with_offline_spec: problems.iter().filter(|p| p.offline.is_some()).count(),
            });
        }
        Command::RunRound { run, round } => {
            let dir = run_dir(&cli, &cfg);
            let orch = Orchestrator::new(cfg, load_corpus(&run.corpus)?, &dir)?;
            let models = orch.models_for_round(*round)?;
            let state = orch.run_round(*round, &models)?;
            eprintln!("round {round} complete in {}", dir.display());
            print_json(&state.metrics);
        }
        Command::RunEvolution { run, .. } => {
            let dir = run_dir(&cli, &cfg);
            let orch = Orchestrator::new(cfg, load_corpus(&run.corpus)?, &dir)?;
            let states = orch.run_evolution()?;
            eprintln!("{} rounds complete in {}", states.len(), dir.display());
            print_json(&state_summary(&states));
        }
        Command::ExecuteMatrix {
            corpus,
            problem,
            candidates,
            tests,
            out,
            tests_out,
        } => {
            let problem = load_problem(corpus, problem)?;
            let candidates: Vec<CandidateProgram> = jsonl::read(candidates)?;
            let tests: Vec<AdversarialTest> = match tests {
                Some(p) => jsonl::read(p)?,
                None => vec![],
            };
            let limits = problem.effective_limits(&cfg.limits);
            let sandbox = Sandbox::new(cfg.sandbox.clone());
            let build = build_matrix(
                &problem,
                &candidates,
                tests,
                &limits,
                &sandbox,
                &cfg.execution,
            )?;
            build
                .matrix
                .save(out)
                .with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = tests_out {
                jsonl::write(p, &build.tests)?;
            }
            print_json(&build.matrix.pruned_tests);
        }
        Command::Select {
            matrix,
            candidates,
            corpus,
            out,
            round,
            tau_gt,
            tau_adv,
            alpha,
            rho,
        } => {
            let mut sel = cfg.selection;
            sel.tau_gt = tau_gt.unwrap_or(sel.tau_gt);
            sel.tau_adv = tau_adv.unwrap_or(sel.tau_adv);
            sel.alpha = alpha.unwrap_or(sel.alpha);
            sel.rho = rho.unwrap_or(sel.rho);
            let m = load_matrix(matrix)?;
            let problem = load_problem(corpus, &m.problem_id)?;
            let candidates: Vec<CandidateProgram> = jsonl::read(candidates)?;
            let prompt = render_prompt(Role::Solver, &problem)?;
            let records = select_candidates(&m, &candidates, &sel, &prompt, *round)?;
            emit_sft_dataset(&records, out)?;
            let picked: Vec<_> = records
                .iter()
                .map(|r| (r.sample_index, r.score_exact))
                .collect();
            print_json(&picked);
        }
        Command::Prefs {
            matrix,
            tests,
            corpus,
            out,
        } => {
            let m = load_matrix(matrix)?;
            let problem = load_problem(corpus, &m.problem_id)?;
            let tests: Vec<AdversarialTest> = jsonl::read(tests)?;
            let labels = label_columns(&m.adv_submatrix(), &m.adv_columns);
            let prompt = render_prompt(Role::Adversary, &problem)?;
            let records = kto_records(&labels, &tests, &prompt)?;
            let summary = emit_kto_dataset(&records, out)?;
            print_json(&summary);
        }
        Command::KtoCheck {
            dataset,
            synthetic_seed,
            lambda_len,
            beta,
            w_des,
            w_undes,
            z_ref,
        } => {
            let mut obj = cfg.objective;
            obj.lambda_len = lambda_len.unwrap_or(obj.lambda_len);
            obj.beta = beta.unwrap_or(obj.beta);
            obj.w_des = w_des.unwrap_or(obj.w_des);
            obj.w_undes = w_undes.unwrap_or(obj.w_undes);
            obj.z_ref = z_ref.unwrap_or(obj.z_ref);
            let records: Vec<KtoRecord> = jsonl::read(dataset)?;
            let samples = samples_from_records(&records, *synthetic_seed)?;
            print_json(&diagnostics(&samples, &obj)?);
        }
        Command::Categorize { corpus, tests } => {
            let problems = load_corpus(corpus)?;
            let tests: Vec<AdversarialTest> = jsonl::read(tests)?;
            #[derive(Serialize)]
            struct Row {
                problem_id: String,
                test_id: String,
                category: analysis::TestCategory,
            }
            let mut rows = Vec::new();
            for t in &tests {
                let p = problems
                    .iter()
                    .find(|p| p.id == t.problem_id)
                    .with_context(|| {
                        format!(
                            "test {} refers to unknown problem `{}`",
                            t.id(),
                            t.problem_id
                        )
                    })?;
                let category = categorize_test(
                    t.input.as_bytes(),
                    &ProblemStats::from_problem(p),
                    &cfg.categorize,
                );
                rows.push(Row {
                    problem_id: t.problem_id.clone(),
                    test_id: t.id(),
                    category,
                });
            }
            let distribution = category_distribution(
                &rows.iter().map(|r| r.category.clone()).collect::<Vec<_>>(),
            )?;
            #[derive(Serialize)]
            struct Out {
                tests: Vec<Row>,
                distribution: Vec<analysis::CategoryShare>,
            }
            print_json(&Out {
                tests: rows,
                distribution,
            });
        }
        Command::Report { format } => {
            let Some(dir) = &cli.run_dir else {
                return Err(UsageError("report needs --run-dir".into()).into());
            };
            let mut rows = Vec::new();
            for r in 1.. {
                let path = dir.join(format!("round{r}/state/round_state.json"));
                if !path.exists() {
                    break;
                }
                let text =
                    std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                let state: RoundState =
                    serde_json::from_str(&text).with_context(|| path.display().to_string())?;
                rows.push(state.metrics);
            }
            if rows.is_empty() {
                bail!("no finished rounds in {}", dir.display());
            }
            let report = analysis::RoundReport { rounds: rows };
            match format {
                ReportFormat::Text => print!("{}", analysis::render_report_text(&report)),
                ReportFormat::Json => print_json(&report),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}
