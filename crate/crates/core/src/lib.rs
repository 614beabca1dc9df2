//! Execution-driven data pipeline for code generation models: sandboxed
//! execution, candidate selection, preference labeling and round orchestration.

pub mod analysis;
pub mod fraction;
pub mod generators;
pub mod jsonl;
pub mod kto;
pub mod matrix;
pub mod model;
pub mod orchestrator;
pub mod preference;
pub mod sandbox;
pub mod seed;
pub mod selection;

pub use fraction::Fraction;
pub use generators::{Generator, GeneratorRequest, GeneratorResponse, Role};
pub use matrix::{ExecutionMatrix, MatrixOptions};
pub use model::{AdversarialTest, CandidateProgram, GroundTruthTest, Payload, Problem, ResourceLimits, Validity};
pub use orchestrator::{Orchestrator, RoundConfig};
pub use preference::{KtoRecord, Label};
pub use sandbox::{Sandbox, SandboxConfig, Verdict, VerdictKind};
pub use selection::{SelectionConfig, SftRecord};
