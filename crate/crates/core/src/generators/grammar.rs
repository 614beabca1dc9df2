//! A small line-oriented input grammar attached to corpus problems.
//!
//! ```json
//! {"lines": [
//!   {"items": [{"type": "int", "min": 1, "max": 100, "bind": "n"}]},
//!   {"items": [{"type": "int_list", "count": "n", "min": -1000000000, "max": 1000000000}]}
//! ]}
//! ```
//!
//! Items on a line are separated by one space and lines by `\n`. A line
//! with `repeat` is emitted that many times.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Count {
    Fixed(u64),
    Var(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Item {
    Int {
        min: i64,
        max: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bind: Option<String>,
    },
    IntList {
        count: Count,
        min: i64,
        max: i64,
    },
    Word {
        alphabet: String,
        min_len: usize,
        max_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<Count>,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputGrammar {
    pub lines: Vec<LineSpec>,
}

/// Probability of snapping a sampled integer to its lower or upper bound.
const BOUND_SNAP: f64 = 0.1;

impl InputGrammar {
    pub fn validate(&self) -> Result<(), String> {
        let mut bound: Vec<&str> = Vec::new();
        let check_count = |c: &Count, bound: &[&str]| match c {
            Count::Var(v) if !bound.contains(&v.as_str()) => {
                Err(format!("count refers to unbound variable `{v}`"))
            }
            _ => Ok(()),
        };
        for line in &self.lines {
            if let Some(r) = &line.repeat {
                check_count(r, &bound)?;
            }
            for item in &line.items {
                match item {
                    Item::Int { min, max, bind } => {
                        if min > max {
                            return Err(format!("int range [{min}, {max}] is empty"));
                        }
                        if let Some(b) = bind {
                            bound.push(b);
                        }
                    }
                    Item::IntList { count, min, max } => {
                        check_count(count, &bound)?;
                        if min > max {
                            return Err(format!("int range [{min}, {max}] is empty"));
                        }
                    }
                    Item::Word {
                        alphabet,
                        min_len,
                        max_len,
                    } => {
                        if alphabet.is_empty() || min_len > max_len {
                            return Err(
                                "word needs a non-empty alphabet and min_len <= max_len".into()
                            );
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Every declared integer range, in declaration order.
    pub fn bounds(&self) -> Vec<(i64, i64)> {
        self.lines
            .iter()
            .flat_map(|l| &l.items)
            .filter_map(|item| match item {
                Item::Int { min, max, .. } | Item::IntList { min, max, .. } => Some((*min, *max)),
                Item::Word { .. } => None,
            })
            .collect()
    }

    /// Draws one input. Integers are uniform on their range except that
    /// they snap to either bound with a small fixed probability.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> String {
        let mut env: HashMap<&str, i64> = HashMap::new();
        let mut out_lines = Vec::new();
        for line in &self.lines {
            let times = line.repeat.as_ref().map_or(1, |c| resolve(c, &env));
            for _ in 0..times {
                let mut parts = Vec::new();
                for item in &line.items {
                    match item {
                        Item::Int { min, max, bind } => {
                            let v = sample_int(rng, *min, *max);
                            if let Some(b) = bind {
                                env.insert(b, v);
                            }
                            parts.push(v.to_string());
                        }
                        Item::IntList { count, min, max } => {
                            let n = resolve(count, &env);
                            let vals: Vec<String> = (0..n)
                                .map(|_| sample_int(rng, *min, *max).to_string())
                                .collect();
                            if !vals.is_empty() {
                                parts.push(vals.join(" "));
                            }
                        }
                        Item::Word {
                            alphabet,
                            min_len,
                            max_len,
                        } => {
                            let chars: Vec<char> = alphabet.chars().collect();
                            let len = rng.random_range(*min_len..=*max_len);
                            parts.push(
                                (0..len)
                                    .map(|_| chars[rng.random_range(0..chars.len())])
                                    .collect(),
                            );
                        }
                    }
                }
                out_lines.push(parts.join(" "));
            }
        }
        out_lines.join("\n")
    }
}

fn resolve(c: &Count, env: &HashMap<&str, i64>) -> u64 {
    match c {
        Count::Fixed(n) => *n,
        Count::Var(v) => env.get(v.as_str()).copied().unwrap_or(0).max(0) as u64,
    }
}

fn sample_int<R: Rng>(rng: &mut R, min: i64, max: i64) -> i64 {
    let u: f64 = rng.random();
    if u < BOUND_SNAP {
        min
    } else if u < 2.0 * BOUND_SNAP {
        max
    } else {
        rng.random_range(min..=max)
    }
}
