//! Multi-round driver: sampling, execution, selection, preference labeling,
//! dataset emission and trainer hooks over a persistent run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.json  config.toml
//! round{r}/
//!     matrices/{problem}.json
//!     sft_round{r}.jsonl  kto_round{r}.jsonl
//!     state/round_state.json  state/problems/{problem}.json  state/eval/{problem}.json
//!     report/report_round{r}.json  report/report_round{r}.txt
//!     next_models.json
//! ```
//!
//! A round is assembled in `round{r}.partial/` and renamed into place once
//! complete.

mod config;
mod hook;
mod run;

pub use config::{BackendConfig, BackendKind, ConfigError, RoundConfig};
pub use hook::{render_hook_command, shell_quote, trainer_hook_invoke, HookError, HookKind};
pub use run::{
    kto_file_name, make_backend, round_dir_name, sft_file_name, split_corpus, CategorizedTest,
    EvalResult, ModelIds, Orchestrator, ProblemResult, ProblemStatus, ProblemSummary, RoundState,
    RunError, RunManifest,
};
