//! Length-penalized KTO objective over scalar log-probabilities.
//!
//! For a sample `x` with policy/reference log-probabilities and token length
//! `l`, the penalized log-ratio is `d = (logp_policy - logp_ref) - lambda * l`.
//! Per-sample losses use the logistic value functions
//!
//! ```text
//! L_des(x)   = 1 - sigmoid(beta * (d - z_ref))
//! L_undes(x) = 1 - sigmoid(beta * (z_ref - d))
//! ```
//!
//! and the batch loss is `w_des * mean(L_des) + w_undes * mean(L_undes)`,
//! omitting a class term when the class is empty.

use serde::{Deserialize, Serialize};

use crate::preference::KtoRecord;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub logp_policy: f64,
    pub logp_ref: f64,
    pub length: u64,
    pub desirable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda_len: f64,
    pub w_des: f64,
    pub w_undes: f64,
    pub beta: f64,
    pub z_ref: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_len: 0.001,
            w_des: 1.0,
            w_undes: 1.0,
            beta: 0.1,
            z_ref: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_len >= 0.0 && self.lambda_len.is_finite()) {
            return Err("lambda_len must be finite and >= 0".into());
        }
        if !(self.w_des > 0.0 && self.w_undes > 0.0 && self.beta > 0.0) {
            return Err("w_des, w_undes and beta must be > 0".into());
        }
        if !self.z_ref.is_finite()
            || !self.w_des.is_finite()
            || !self.w_undes.is_finite()
            || !self.beta.is_finite()
        {
            return Err("objective parameters must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KtoError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("record `{0}` has no log-probabilities and no synthetic seed was given")]
    MissingLogp(String),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_ratio(s: &PreferenceSample) -> f64 {
    s.logp_policy - s.logp_ref
}

pub fn penalized_ratio(s: &PreferenceSample, cfg: &ObjectiveConfig) -> f64 {
    log_ratio(s) - cfg.lambda_len * s.length as f64
}

fn class_counts(samples: &[PreferenceSample]) -> (usize, usize) {
    let des = samples.iter().filter(|s| s.desirable).count();
    (des, samples.len() - des)
}

fn inner_loss(s: &PreferenceSample, cfg: &ObjectiveConfig) -> f64 {
    let v = cfg.beta * (penalized_ratio(s, cfg) - cfg.z_ref);
    if s.desirable {
        sigmoid(-v)
    } else {
        sigmoid(v)
    }
}

/// Total loss and each sample's unweighted inner loss.
pub fn batch_loss(
    samples: &[PreferenceSample],
    cfg: &ObjectiveConfig,
) -> Result<(f64, Vec<f64>), KtoError> {
    if samples.is_empty() {
        return Err(KtoError::EmptyBatch);
    }
    let (n_des, n_undes) = class_counts(samples);
    let per_sample: Vec<f64> = samples.iter().map(|s| inner_loss(s, cfg)).collect();
    let class_mean = |want: bool, n: usize| {
        let sum: f64 = samples
            .iter()
            .zip(&per_sample)
            .filter(|(s, _)| s.desirable == want)
            .map(|(_, l)| l)
            .sum();
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    let total = cfg.w_des * class_mean(true, n_des) + cfg.w_undes * class_mean(false, n_undes);
    Ok((total, per_sample))
}

/// Analytic derivative of [`batch_loss`] with respect to each sample's
/// `logp_policy`.
pub fn grad_wrt_logp(
    samples: &[PreferenceSample],
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>, KtoError> {
    if samples.is_empty() {
        return Err(KtoError::EmptyBatch);
    }
    let (n_des, n_undes) = class_counts(samples);
    Ok(samples
        .iter()
        .map(|s| {
            let v = cfg.beta * (penalized_ratio(s, cfg) - cfg.z_ref);
            let dsig = sigmoid(v) * (1.0 - sigmoid(v));
            if s.desirable {
                -cfg.w_des * cfg.beta * dsig / n_des as f64
            } else {
                cfg.w_undes * cfg.beta * dsig / n_undes as f64
            }
        })
        .collect())
}

/// Central finite-difference gradient of [`batch_loss`], for diagnostics.
pub fn numeric_grad(
    samples: &[PreferenceSample],
    cfg: &ObjectiveConfig,
    step: f64,
) -> Result<Vec<f64>, KtoError> {
    let mut work = samples.to_vec();
    (0..samples.len())
        .map(|i| {
            let base = work[i].logp_policy;
            work[i].logp_policy = base + step;
            let up = batch_loss(&work, cfg)?.0;
            work[i].logp_policy = base - step;
            let down = batch_loss(&work, cfg)?.0;
            work[i].logp_policy = base;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Converts dataset records into samples. Records without log-probabilities
/// get deterministic synthetic ones when `synthetic_seed` is set.
pub fn samples_from_records(
    records: &[KtoRecord],
    synthetic_seed: Option<u64>,
) -> Result<Vec<PreferenceSample>, KtoError> {
    records
        .iter()
        .map(|r| {
            let (policy, reference) = match (r.logp_policy, r.logp_ref, synthetic_seed) {
                (Some(p), Some(q), _) => (p, q),
                (_, _, Some(seed)) => synthetic_logps(seed, r),
                _ => {
                    return Err(KtoError::MissingLogp(format!(
                        "{}/{}",
                        r.problem_id, r.test_id
                    )))
                }
            };
            Ok(PreferenceSample {
                logp_policy: policy,
                logp_ref: reference,
                length: r.token_length,
                desirable: r.label,
            })
        })
        .collect()
}

fn synthetic_logps(seed: u64, r: &KtoRecord) -> (f64, f64) {
    let h = derive_seed(seed, &[&r.problem_id, &r.test_id, &r.round.to_string()]);
    let u1 = (h >> 11) as f64 / (1u64 << 53) as f64;
    let u2 = ((h.rotate_left(29)) >> 11) as f64 / (1u64 << 53) as f64;
    let reference = -(r.token_length.max(1) as f64) * (0.5 + u1);
    (reference + (2.0 * u2 - 1.0), reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KtoDiagnostics {
    pub n_desirable: usize,
    pub n_undesirable: usize,
    pub loss: f64,
    pub mean_inner_desirable: Option<f64>,
    pub mean_inner_undesirable: Option<f64>,
    pub grad_l2_norm: f64,
    pub max_grad_rel_error: f64,
}

pub fn diagnostics(
    samples: &[PreferenceSample],
    cfg: &ObjectiveConfig,
) -> Result<KtoDiagnostics, KtoError> {
    let (loss, per) = batch_loss(samples, cfg)?;
    let grad = grad_wrt_logp(samples, cfg)?;
    let fd = numeric_grad(samples, cfg, 1e-6)?;
    let (n_des, n_undes) = class_counts(samples);
    let mean = |want: bool, n: usize| {
        (n > 0).then(|| {
            samples
                .iter()
                .zip(&per)
                .filter(|(s, _)| s.desirable == want)
                .map(|(_, l)| l)
                .sum::<f64>()
                / n as f64
        })
    };
    let max_rel = grad
        .iter()
        .zip(&fd)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-300))
        .fold(0.0, f64::max);
    Ok(KtoDiagnostics {
        n_desirable: n_des,
        n_undesirable: n_undes,
        loss,
        mean_inner_desirable: mean(true, n_des),
        mean_inner_undesirable: mean(false, n_undes),
        grad_l2_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        max_grad_rel_error: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(p: f64, r: f64, length: u64, desirable: bool) -> PreferenceSample {
        PreferenceSample {
            logp_policy: p,
            logp_ref: r,
            length,
            desirable,
        }
    }

    #[test]
    fn log_ratio_examples() {
        assert_eq!(log_ratio(&sample(-10.0, -10.0, 0, true)), 0.0);
        assert_eq!(log_ratio(&sample(-8.0, -10.0, 0, true)), 2.0);
        assert_eq!(log_ratio(&sample(-10.0, -8.0, 0, true)), -2.0);
    }

    #[test]
    fn penalized_ratio_examples() {
        let cfg = ObjectiveConfig::default();
        assert!((penalized_ratio(&sample(-8.0, -10.0, 1000, true), &cfg) - 1.0).abs() < 1e-12);
        let no_penalty = ObjectiveConfig {
            lambda_len: 0.0,
            ..cfg
        };
        assert_eq!(
            penalized_ratio(&sample(-8.0, -10.0, 1000, true), &no_penalty),
            2.0
        );
        assert_eq!(penalized_ratio(&sample(-8.0, -10.0, 0, true), &cfg), 2.0);
    }

    #[test]
    fn loss_examples() {
        let cfg = ObjectiveConfig::default();
        let (total, per) = batch_loss(&[sample(-5.0, -5.0, 0, true)], &cfg).unwrap();
        assert_eq!(per, vec![0.5]);
        assert_eq!(total, 0.5);
        let (total, _) = batch_loss(
            &[sample(-5.0, -5.0, 0, true), sample(-5.0, -5.0, 0, false)],
            &cfg,
        )
        .unwrap();
        assert_eq!(total, 1.0);
        assert_eq!(batch_loss(&[], &cfg), Err(KtoError::EmptyBatch));
    }

    #[test]
    fn saturated_desirable_loss() {
        // Desirable sample with a log-ratio of 10 at beta = 0.1: loss is 1 - sigmoid(1).
        let cfg = ObjectiveConfig {
            lambda_len: 0.0,
            ..Default::default()
        };
        let (total, _) = batch_loss(&[sample(0.0, -10.0, 0, true)], &cfg).unwrap();
        assert!((total - 0.2689414213699951).abs() < 1e-9);
    }

    #[test]
    fn gradient_at_zero() {
        let cfg = ObjectiveConfig::default();
        let g = grad_wrt_logp(
            &[sample(0.0, 0.0, 0, true), sample(0.0, 0.0, 0, false)],
            &cfg,
        )
        .unwrap();
        assert!((g[0] + 0.1 * 0.25).abs() < 1e-15);
        assert!((g[1] - 0.1 * 0.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn monotone_in_policy_logp(p in -30.0f64..30.0, r in -30.0f64..30.0, len in 0u64..500, bump in 0.5f64..5.0) {
            let cfg = ObjectiveConfig::default();
            let base_des = batch_loss(&[sample(p, r, len, true)], &cfg).unwrap().0;
            let up_des = batch_loss(&[sample(p + bump, r, len, true)], &cfg).unwrap().0;
            prop_assert!(up_des < base_des);
            let base_und = batch_loss(&[sample(p, r, len, false)], &cfg).unwrap().0;
            let up_und = batch_loss(&[sample(p + bump, r, len, false)], &cfg).unwrap().0;
            prop_assert!(up_und > base_und);
        }

        #[test]
        fn longer_desirable_samples_cost_more(p in -30.0f64..30.0, len in 0u64..2000, extra in 50u64..500) {
            let cfg = ObjectiveConfig::default();
            let short = batch_loss(&[sample(p, 0.0, len, true)], &cfg).unwrap().0;
            let long = batch_loss(&[sample(p, 0.0, len + extra, true)], &cfg).unwrap().0;
            prop_assert!(long > short);
        }

        #[test]
        fn losses_are_bounded(
            batch in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, 0u64..1000, any::<bool>()), 1..12)
        ) {
            let cfg = ObjectiveConfig { w_des: 1.3, w_undes: 0.7, ..Default::default() };
            let samples: Vec<_> = batch.into_iter().map(|(p, r, l, d)| sample(p, r, l, d)).collect();
            let (total, per) = batch_loss(&samples, &cfg).unwrap();
            prop_assert!(per.iter().all(|&l| l > 0.0 && l < 1.0));
            prop_assert!(total > 0.0 && total < cfg.w_des + cfg.w_undes);
        }
    }

    #[test]
    fn synthetic_logps_are_deterministic() {
        let rec = KtoRecord {
            prompt: String::new(),
            completion: String::new(),
            label: true,
            token_length: 40,
            problem_id: "p".into(),
            round: 1,
            test_id: "adv00".into(),
            logp_policy: None,
            logp_ref: None,
        };
        let a = samples_from_records(std::slice::from_ref(&rec), Some(9)).unwrap();
        let b = samples_from_records(std::slice::from_ref(&rec), Some(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            samples_from_records(&[rec], None),
            Err(KtoError::MissingLogp(_))
        ));
    }
}
