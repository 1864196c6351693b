//! Preference objectives over a tabular policy.
//!
//! * ORPO: `kl_weight · KL(π_θ ‖ π_0) − β · log₂(π_θ(chosen | x) / π_θ(rejected | x))`,
//!   with both sequence probabilities taken under the current policy.
//! * GRPO: mean over the group of `min(ρ_i·A_i, clip(ρ_i, 1−ε, 1+ε)·A_i)` with
//!   `ρ_i = π_θ(y_i | x) / π_old(y_i | x)` and group-normalised advantages.
//!   This is an objective to maximise.

use std::f64::consts::LN_2;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Var};
use crate::policy::{BoundPolicy, PolicyError, PolicyParams, PolicySnapshot, SnapshotId, Token};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("distributions have different support sizes: {0} vs {1}")]
    SupportMismatch(usize, usize),
    #[error("q has no mass at index {0} where p > 0")]
    NotAbsolutelyContinuous(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("reward {0} is not finite")]
    NonFiniteReward(f64),
    #[error("candidate group is empty")]
    EmptyGroup,
    #[error("{candidates} candidates but {advantages} advantages")]
    LengthMismatch { candidates: usize, advantages: usize },
    #[error("group was sampled from snapshot {sampled:?}, objective given {given:?}")]
    SnapshotMismatch { sampled: SnapshotId, given: SnapshotId },
    #[error("clip bounds reversed: lo {lo} > hi {hi}")]
    ClipBounds { lo: f64, hi: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrpoConfig {
    beta: f64,
    kl_weight: f64,
}

impl OrpoConfig {
    /// `beta` has no default; it must be finite and positive.
    pub fn new(beta: f64) -> Result<Self, ObjectiveError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(ObjectiveError::Config(format!("beta must be finite and > 0, got {beta}")));
        }
        Ok(Self { beta, kl_weight: 1.0 })
    }

    pub fn with_kl_weight(mut self, kl_weight: f64) -> Result<Self, ObjectiveError> {
        if !(kl_weight.is_finite() && kl_weight >= 0.0) {
            return Err(ObjectiveError::Config(format!("kl_weight must be >= 0, got {kl_weight}")));
        }
        self.kl_weight = kl_weight;
        Ok(self)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn kl_weight(&self) -> f64 {
        self.kl_weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub epsilon: f64,
    pub sigma_tolerance: f64,
    pub group_size: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            sigma_tolerance: 1e-9,
            group_size: 8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ObjectiveError::Config(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        if !(self.sigma_tolerance > 0.0) {
            return Err(ObjectiveError::Config("sigma_tolerance must be > 0".into()));
        }
        if self.group_size < 2 {
            return Err(ObjectiveError::Config(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        Ok(())
    }
}

/// Prompt with a preferred and a dispreferred completion, as token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPair {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

/// Completions sampled for one prompt, with their normalised advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGroup {
    pub prompt: Vec<Token>,
    pub candidates: Vec<Vec<Token>>,
    pub advantages: Vec<f64>,
    /// Snapshot the candidates were sampled from.
    pub sampled_from: SnapshotId,
}

/// `Σ p_i ln(p_i / q_i)` with `0 · ln(0 / q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, ObjectiveError> {
    if p.len() != q.len() {
        return Err(ObjectiveError::SupportMismatch(p.len(), q.len()));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(ObjectiveError::NotAbsolutelyContinuous(i));
            }
            total += pi * (pi / qi).ln();
        }
    }
    // Rounding can leave a tiny negative value when p ≈ q.
    Ok(total.max(0.0))
}

fn check_same_shape(current: &BoundPolicy<'_>, reference: &PolicyParams) -> Result<(), ObjectiveError> {
    let (a, b) = (current.shape(), reference.shape());
    if a.vocab_size() != b.vocab_size() || a.context_order() != b.context_order() {
        return Err(PolicyError::ShapeMismatch(a, b).into());
    }
    Ok(())
}

/// Mean over every context row of `KL(current row ‖ reference row)`.
pub fn policy_kl<'t>(
    current: &BoundPolicy<'t>,
    reference: &PolicyParams,
) -> Result<Var<'t>, ObjectiveError> {
    check_same_shape(current, reference)?;
    let tape = current.logits().tape();
    let log_p = current.log_probs();
    let log_q = tape.constant(reference.log_token_distributions());
    let per_entry = log_p.exp().mul(log_p.sub(log_q)?)?;
    let contexts = current.shape().num_contexts() as f64;
    Ok(per_entry.sum().scale(1.0 / contexts))
}

/// Non-differentiable [`policy_kl`].
pub fn policy_kl_value(current: &PolicyParams, reference: &PolicyParams) -> Result<f64, ObjectiveError> {
    let (p, q) = (current.token_distributions(), reference.token_distributions());
    if p.shape() != q.shape() {
        return Err(PolicyError::ShapeMismatch(current.shape(), reference.shape()).into());
    }
    let mut total = 0.0;
    for (pr, qr) in p.rows().zip(q.rows()) {
        total += kl_divergence(pr, qr)?;
    }
    Ok(total / current.num_contexts() as f64)
}

/// ORPO loss for one preference pair. Minimise it.
pub fn orpo_loss<'t>(
    current: &BoundPolicy<'t>,
    reference: &PolicyParams,
    pair: &TokenPair,
    cfg: &OrpoConfig,
) -> Result<Var<'t>, ObjectiveError> {
    let kl = policy_kl(current, reference)?;
    let chosen = current.sequence_log_prob(&pair.prompt, &pair.chosen)?;
    let rejected = current.sequence_log_prob(&pair.prompt, &pair.rejected)?;
    let log2_ratio = chosen.sub(rejected)?.scale(1.0 / LN_2);
    Ok(kl.scale(cfg.kl_weight).sub(log2_ratio.scale(cfg.beta))?)
}

/// `(r_i − μ) / σ` with the population σ. Groups with `σ < sigma_tolerance`
/// get all-zero advantages.
pub fn normalize_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>, ObjectiveError> {
    let g = rewards.len();
    if g < 2 {
        return Err(ObjectiveError::GroupTooSmall(g));
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(ObjectiveError::NonFiniteReward(bad));
    }
    let n = g as f64;
    let rough = rewards.iter().sum::<f64>() / n;
    // second pass removes most of the rounding left in the first mean
    let mean = rough + rewards.iter().map(|r| r - rough).sum::<f64>() / n;
    let sigma = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sigma < cfg.sigma_tolerance {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / sigma).collect())
}

/// `max(lo, min(v, hi))`.
pub fn clip(v: f64, lo: f64, hi: f64) -> Result<f64, ObjectiveError> {
    if lo > hi {
        return Err(ObjectiveError::ClipBounds { lo, hi });
    }
    Ok(v.min(hi).max(lo))
}

/// One clipped surrogate term `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn surrogate_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.min(1.0 + epsilon).max(1.0 - epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Mean of [`surrogate_term`] over paired ratios and advantages.
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], epsilon: f64) -> f64 {
    let terms: Vec<f64> = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| surrogate_term(r, a, epsilon))
        .collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// Mean of `ρ_i · A_i`.
pub fn unclipped_surrogate(ratios: &[f64], advantages: &[f64]) -> f64 {
    let terms: Vec<f64> = ratios.iter().zip(advantages).map(|(r, a)| r * a).collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// Probability ratios `π_θ(y_i | x) / π_old(y_i | x)`, computed in log space.
pub fn importance_ratios(
    current: &PolicyParams,
    old: &PolicyParams,
    prompt: &[Token],
    candidates: &[Vec<Token>],
) -> Result<Vec<f64>, ObjectiveError> {
    candidates
        .iter()
        .map(|c| Ok((current.log_prob(prompt, c)? - old.log_prob(prompt, c)?).exp()))
        .collect()
}

/// Differentiable clipped GRPO objective for one group. Maximise it.
pub fn grpo_objective<'t>(
    current: &BoundPolicy<'t>,
    old: &PolicySnapshot,
    group: &TokenGroup,
    cfg: &GrpoConfig,
) -> Result<Var<'t>, ObjectiveError> {
    if group.candidates.is_empty() {
        return Err(ObjectiveError::EmptyGroup);
    }
    if group.candidates.len() != group.advantages.len() {
        return Err(ObjectiveError::LengthMismatch {
            candidates: group.candidates.len(),
            advantages: group.advantages.len(),
        });
    }
    if group.sampled_from != old.id() {
        return Err(ObjectiveError::SnapshotMismatch {
            sampled: group.sampled_from,
            given: old.id(),
        });
    }
    check_same_shape(current, old)?;
    let tape = current.logits().tape();
    let (lo, hi) = (1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    let mut terms = Vec::with_capacity(group.candidates.len());
    for (cand, &adv) in group.candidates.iter().zip(&group.advantages) {
        let log_new = current.sequence_log_prob(&group.prompt, cand)?;
        let log_old = old.log_prob(&group.prompt, cand)?;
        let ratio = log_new.add_scalar(-log_old).exp();
        let unclipped = ratio.scale(adv);
        let clipped = ratio.clip(lo, hi)?.scale(adv);
        terms.push(unclipped.minimum(clipped)?);
    }
    Ok(tape.stack(&terms)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        let ln2 = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((ln2 - LN_2).abs() < 1e-12);
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((v - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((v - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(kl_divergence(&[1.0], &[0.5, 0.5]), Err(ObjectiveError::SupportMismatch(1, 2))));
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(ObjectiveError::NotAbsolutelyContinuous(1))
        ));
        // zero mass in p where q is zero is fine
        assert_eq!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    fn two_token(logits: [f64; 2]) -> PolicyParams {
        PolicyParams::from_logits(2, 0, Tensor::matrix(1, 2, logits.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn policy_kl_single_context() {
        let current = two_token([0.0, 0.0]);
        let reference = two_token([0.25f64.ln(), 0.75f64.ln()]);
        let tape = Tape::new();
        let kl = policy_kl(&current.bind(&tape), &reference).unwrap().item().unwrap();
        assert!((kl - 0.1438).abs() < 1e-4);
        assert!((kl - policy_kl_value(&current, &reference).unwrap()).abs() < 1e-15);
        let same = policy_kl(&current.bind(&tape), &current).unwrap().item().unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn policy_kl_shape_mismatch() {
        let a = PolicyParams::new(3, 1).unwrap();
        let b = PolicyParams::new(3, 2).unwrap();
        let tape = Tape::new();
        assert!(policy_kl(&a.bind(&tape), &b).is_err());
    }

    #[test]
    fn orpo_examples() {
        let cfg = OrpoConfig::new(0.7).unwrap();
        let p = PolicyParams::random(4, 1, 1.0, 1).unwrap();
        let reference = PolicyParams::random(4, 1, 1.0, 2).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let same = TokenPair { prompt: vec![0], chosen: vec![2, 3], rejected: vec![2, 3] };
        let loss = orpo_loss(&bound, &reference, &same, &cfg).unwrap().item().unwrap();
        let kl = policy_kl_value(&p, &reference).unwrap();
        assert!((loss - kl).abs() < 1e-12);
        let loss_self = orpo_loss(&bound, &p, &same, &cfg).unwrap().item().unwrap();
        assert_eq!(loss_self, 0.0);

        // chosen twice as likely as rejected, no KL: loss is -β
        let q = two_token([2f64.ln(), 0.0]);
        let tape = Tape::new();
        let pair = TokenPair { prompt: vec![], chosen: vec![0], rejected: vec![1] };
        let loss = orpo_loss(&q.bind(&tape), &q, &pair, &cfg).unwrap().item().unwrap();
        assert!((loss + 0.7).abs() < 1e-12);
    }

    #[test]
    fn orpo_config_validation() {
        assert!(OrpoConfig::new(0.0).is_err());
        assert!(OrpoConfig::new(f64::INFINITY).is_err());
        assert!(OrpoConfig::new(1.0).unwrap().with_kl_weight(-1.0).is_err());
        assert_eq!(OrpoConfig::new(1.0).unwrap().kl_weight(), 1.0);
    }

    #[test]
    fn advantage_examples() {
        let cfg = GrpoConfig::default();
        assert_eq!(normalize_advantages(&[0.0, 1.0], &cfg).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(normalize_advantages(&[0.3, 0.3, 0.3], &cfg).unwrap(), vec![0.0; 3]);
        let a = normalize_advantages(&[1.0, 2.0, 3.0], &cfg).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] + expected).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] - expected).abs() < 1e-12);
        assert!((a[2] - 1.2247).abs() < 1e-4);
        assert!(matches!(normalize_advantages(&[1.0], &cfg), Err(ObjectiveError::GroupTooSmall(1))));
        assert!(normalize_advantages(&[1.0, f64::NAN], &cfg).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(1.5, 0.8, 1.2).unwrap(), 1.2);
        assert_eq!(clip(1.0, 0.8, 1.2).unwrap(), 1.0);
        assert_eq!(clip(0.5, 0.8, 1.2).unwrap(), 0.8);
        assert!(clip(1.0, 1.2, 0.8).is_err());
    }

    #[test]
    fn surrogate_hand_cases() {
        assert_eq!(surrogate_term(1.5, 1.0, 0.2), 1.2);
        assert_eq!(surrogate_term(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn grpo_at_old_policy_is_mean_advantage() {
        let cfg = GrpoConfig::default();
        let p = PolicyParams::random(5, 1, 1.0, 4).unwrap();
        let old = p.snapshot();
        let candidates = old.sample_completions(&[0], 6, 4, 7).unwrap();
        let rewards: Vec<f64> = candidates.iter().map(|c| c.len() as f64).collect();
        let advantages = normalize_advantages(&rewards, &cfg).unwrap();
        let group = TokenGroup { prompt: vec![0], candidates, advantages, sampled_from: old.id() };
        let tape = Tape::new();
        let obj = grpo_objective(&p.bind(&tape), &old, &group, &cfg).unwrap().item().unwrap();
        assert!(obj.abs() < 1e-12);
    }

    #[test]
    fn grpo_rejects_foreign_snapshot_and_bad_groups() {
        let cfg = GrpoConfig::default();
        let p = PolicyParams::new(3, 1).unwrap();
        let old = p.snapshot();
        let other = p.snapshot();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let group = TokenGroup { prompt: vec![0], candidates: vec![vec![1]], advantages: vec![0.0], sampled_from: other.id() };
        assert!(matches!(grpo_objective(&bound, &old, &group, &cfg), Err(ObjectiveError::SnapshotMismatch { .. })));
        let empty = TokenGroup { prompt: vec![0], candidates: vec![], advantages: vec![], sampled_from: old.id() };
        assert!(matches!(grpo_objective(&bound, &old, &empty, &cfg), Err(ObjectiveError::EmptyGroup)));
        let uneven = TokenGroup { prompt: vec![0], candidates: vec![vec![1]], advantages: vec![], sampled_from: old.id() };
        assert!(matches!(grpo_objective(&bound, &old, &uneven, &cfg), Err(ObjectiveError::LengthMismatch { .. })));
    }

    #[test]
    fn grpo_config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        assert!(GrpoConfig { epsilon: 1.0, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { group_size: 1, ..Default::default() }.validate().is_err());
    }
}
