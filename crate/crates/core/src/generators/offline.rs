//! Seeded procedural backend.
//!
//! The solver side draws programs from a per-problem pool of a correct
//! solution and bug-injected variants; the adversary side draws random
//! inputs from the problem's grammar with no adversarial search. Output is a
//! pure function of `(seed, problem, sample index)`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::InputGrammar;
use super::{
    format_adversary_response, Generator, GeneratorError, GeneratorRequest, GeneratorResponse, Role,
};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Correct,
    OffByOne,
    MissingEdgeCase,
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolProgram {
    pub variant: Variant,
    pub source: String,
}

/// Per-problem material for the offline backend, stored in the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grammar: Option<InputGrammar>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub programs: Vec<PoolProgram>,
}

impl OfflineSpec {
    pub fn validate(&self) -> Result<(), String> {
        if let Some(g) = &self.grammar {
            g.validate()?;
        }
        if self.programs.iter().any(|p| p.source.trim().is_empty()) {
            return Err("offline pool programs must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    /// Probability that a solver sample is drawn from the buggy variants.
    pub bug_rate: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig { bug_rate: 0.5 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OfflineBackend {
    config: OfflineConfig,
}

impl OfflineBackend {
    pub fn new(config: OfflineConfig) -> Self {
        OfflineBackend { config }
    }

    fn solver_sample(&self, pool: &[PoolProgram], rng: &mut ChaCha8Rng) -> GeneratorResponse {
        let (good, bad): (Vec<&PoolProgram>, Vec<&PoolProgram>) =
            pool.iter().partition(|p| p.variant == Variant::Correct);
        let buggy = rng.random::<f64>() < self.config.bug_rate;
        let from = match (buggy, good.is_empty(), bad.is_empty()) {
            (true, _, false) | (false, true, _) => &bad,
            _ => &good,
        };
        let program = from.choose(rng).expect("pool is non-empty");
        let raw = format!(
            "Read the input, compute the answer and print it.\n\n```python\n{}\n```\n",
            program.source.trim_end_matches('\n')
        );
        GeneratorResponse::from_raw(Role::Solver, raw, None, "stop")
            .expect("pool programs are non-empty")
    }

    fn adversary_sample(&self, grammar: &InputGrammar, rng: &mut ChaCha8Rng) -> GeneratorResponse {
        let input = grammar.sample(rng);
        let raw = format_adversary_response(
            "Sampled at random from the declared input format.",
            &input,
            "Random input; no failure-directed search.",
        );
        GeneratorResponse::from_raw(Role::Adversary, raw, None, "stop")
            .expect("formatted response extracts")
    }
}

impl Generator for OfflineBackend {
    fn id(&self) -> &str {
        "offline"
    }

    fn generate(
        &self,
        req: &GeneratorRequest<'_>,
    ) -> Result<Vec<Option<GeneratorResponse>>, GeneratorError> {
        let seed = req.seed.ok_or(GeneratorError::MissingSeed)?;
        let problem = req.problem;
        let spec = problem.offline.as_ref();
        let rng_for = |i: usize| {
            ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[&problem.id, req.role.as_str(), &i.to_string()],
            ))
        };
        match req.role {
            Role::Solver => {
                let pool = spec
                    .map(|s| s.programs.as_slice())
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| GeneratorError::MissingPool(problem.id.clone()))?;
                Ok((0..req.n_samples)
                    .map(|i| Some(self.solver_sample(pool, &mut rng_for(i))))
                    .collect())
            }
            Role::Adversary => {
                let grammar = spec
                    .and_then(|s| s.grammar.as_ref())
                    .ok_or_else(|| GeneratorError::MissingGrammar(problem.id.clone()))?;
                Ok((0..req.n_samples)
                    .map(|i| Some(self.adversary_sample(grammar, &mut rng_for(i))))
                    .collect())
            }
        }
    }
}
