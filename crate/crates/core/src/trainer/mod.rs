//! Training loops for the two preference objectives.
//!
//! Both loops take `epochs · ⌈N / batch_size⌉` optimizer steps, apply the
//! warmup + decay learning-rate multiplier, and record one [`StepRecord`]
//! per step.

mod optim;
mod trace;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape};
use crate::objectives::{
    grpo_objective, normalize_advantages, orpo_loss, GrpoConfig, ObjectiveError, OrpoConfig,
    TokenGroup, TokenPair,
};
use crate::policy::{PolicyError, PolicyParams, SnapshotId, Token};

pub use optim::{lr_schedule, warmup_steps, AdamW, AdamWState, SchedulerKind};
pub use trace::{moving_average, StepRecord, TrainTrace};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("shape mismatch: params {params:?}, grads {grads:?}, state {state:?}")]
    ShapeMismatch {
        params: Vec<usize>,
        grads: Vec<usize>,
        state: Vec<usize>,
    },
    #[error("non-finite gradient, step rejected")]
    NonFiniteGradient,
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("invalid hyperparameters: {0}")]
    HyperParams(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub scheduler: SchedulerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl HyperParams {
    /// lr 5e-6, weight decay 0.1, warmup 0.1, cosine, 3 epochs.
    pub fn grpo() -> Self {
        Self {
            learning_rate: 5e-6,
            weight_decay: 0.1,
            warmup_ratio: 0.1,
            scheduler: SchedulerKind::Cosine,
            epochs: 3,
            batch_size: 8,
            seed: 0,
        }
    }

    /// lr 4e-5, weight decay 0.1, warmup 0.1, linear, 3 epochs.
    pub fn orpo() -> Self {
        Self {
            learning_rate: 4e-5,
            scheduler: SchedulerKind::Linear,
            ..Self::grpo()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::HyperParams(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must be in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        (self.epochs * dataset_len.div_ceil(self.batch_size)) as u64
    }
}

/// Mixes a run seed with loop indices into an independent stream seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Optimizer {
    adamw: AdamW,
    state: AdamWState,
    hp: HyperParams,
    total: u64,
}

impl Optimizer {
    fn new(policy: &PolicyParams, hp: &HyperParams, total: u64) -> Self {
        Self {
            adamw: AdamW::default(),
            state: AdamWState::new(policy.logits().shape()),
            hp: *hp,
            total,
        }
    }

    /// Applies one step and returns the lr multiplier and whether the update
    /// was rejected.
    fn apply(
        &mut self,
        policy: &mut PolicyParams,
        grads: &crate::autodiff::Tensor,
        step: u64,
    ) -> Result<(f64, bool), TrainError> {
        let mult = lr_schedule(step, self.total, self.hp.warmup_ratio, self.hp.scheduler)?;
        let lr = self.hp.learning_rate * mult;
        match self
            .adamw
            .step(policy.logits_mut(), grads, &mut self.state, lr, self.hp.weight_decay)
        {
            Ok(()) => Ok((mult, false)),
            Err(TrainError::NonFiniteGradient) => {
                log::warn!("step {step}: non-finite gradient, update rejected");
                Ok((mult, true))
            }
            Err(e) => Err(e),
        }
    }
}

/// Minimises the mean ORPO loss per batch.
pub fn train_orpo(
    pairs: &[TokenPair],
    mut policy: PolicyParams,
    reference: &PolicyParams,
    hp: &HyperParams,
    cfg: &OrpoConfig,
) -> Result<(PolicyParams, TrainTrace), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    hp.validate()?;
    let total = hp.total_steps(pairs.len());
    let mut opt = Optimizer::new(&policy, hp, total);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = TrainTrace::default();
    let mut step = 0u64;

    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hp.batch_size) {
            let tape = Tape::new();
            let bound = policy.bind(&tape);
            let losses = batch
                .iter()
                .map(|&i| orpo_loss(&bound, reference, &pairs[i], cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let loss = tape.stack(&losses)?.mean();
            let grads = tape.backward(loss)?.wrt(bound.logits());
            let value = loss.item().expect("mean is scalar");
            drop(tape);

            let (mult, rejected) = opt.apply(&mut policy, &grads, step)?;
            trace.push(StepRecord {
                step,
                value,
                lr_multiplier: mult,
                mean_reward: None,
                degenerate_groups: 0,
                rejected,
            });
            step += 1;
        }
    }
    Ok((policy, trace))
}

/// What the GRPO loop did with one candidate group.
#[derive(Debug, Clone)]
pub struct GroupEvent<'a> {
    pub step: u64,
    pub prompt: &'a [Token],
    /// Snapshot the candidates were sampled from.
    pub sampled_from: SnapshotId,
    /// Snapshot the importance ratios were computed against.
    pub scored_against: SnapshotId,
    pub rewards: &'a [f64],
    pub advantages: &'a [f64],
}

/// Instrumentation hook for [`train_grpo_observed`].
pub trait GrpoObserver {
    fn on_group(&mut self, event: &GroupEvent<'_>);
}

impl<F: FnMut(&GroupEvent<'_>)> GrpoObserver for F {
    fn on_group(&mut self, event: &GroupEvent<'_>) {
        self(event)
    }
}

/// Maximises the clipped GRPO objective. See [`train_grpo_observed`].
pub fn train_grpo<R>(
    prompts: &[Vec<Token>],
    policy: PolicyParams,
    reward_fn: &R,
    hp: &HyperParams,
    cfg: &GrpoConfig,
    max_len: usize,
) -> Result<(PolicyParams, TrainTrace), TrainError>
where
    R: Fn(&[Token], &[Token]) -> f64 + Sync,
{
    train_grpo_observed(prompts, policy, reward_fn, hp, cfg, max_len, &mut |_: &GroupEvent<'_>| {})
}

/// GRPO loop. Per batch: freeze `π_old`, sample `group_size` completions per
/// prompt from it, score them with `reward_fn` (in parallel), normalise the
/// advantages, and take one ascent step on the mean objective.
///
/// Non-finite rewards are treated as 0. Groups whose rewards are all equal
/// get zero advantages and are counted in [`StepRecord::degenerate_groups`].
pub fn train_grpo_observed<R>(
    prompts: &[Vec<Token>],
    mut policy: PolicyParams,
    reward_fn: &R,
    hp: &HyperParams,
    cfg: &GrpoConfig,
    max_len: usize,
    observer: &mut dyn GrpoObserver,
) -> Result<(PolicyParams, TrainTrace), TrainError>
where
    R: Fn(&[Token], &[Token]) -> f64 + Sync,
{
    if prompts.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    hp.validate()?;
    cfg.validate()?;
    let total = hp.total_steps(prompts.len());
    let mut opt = Optimizer::new(&policy, hp, total);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut trace = TrainTrace::default();
    let mut step = 0u64;

    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hp.batch_size) {
            let old = policy.snapshot();
            let mut groups = Vec::with_capacity(batch.len());
            let mut reward_sum = 0.0;
            let mut reward_count = 0usize;
            let mut degenerate = 0usize;
            for (j, &i) in batch.iter().enumerate() {
                let prompt = &prompts[i];
                let seed = derive_seed(hp.seed, step, j as u64);
                let candidates = old.sample_completions(prompt, cfg.group_size, max_len, seed)?;
                let rewards: Vec<f64> = candidates
                    .par_iter()
                    .map(|c| {
                        let r = reward_fn(prompt, c);
                        if r.is_finite() {
                            r
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let advantages = normalize_advantages(&rewards, cfg)?;
                if advantages.iter().all(|&a| a == 0.0) {
                    degenerate += 1;
                }
                reward_sum += rewards.iter().sum::<f64>();
                reward_count += rewards.len();
                observer.on_group(&GroupEvent {
                    step,
                    prompt,
                    sampled_from: old.id(),
                    scored_against: old.id(),
                    rewards: &rewards,
                    advantages: &advantages,
                });
                groups.push(TokenGroup {
                    prompt: prompt.clone(),
                    candidates,
                    advantages,
                    sampled_from: old.id(),
                });
            }

            let tape = Tape::new();
            let bound = policy.bind(&tape);
            let objectives = groups
                .iter()
                .map(|g| grpo_objective(&bound, &old, g, cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let objective = tape.stack(&objectives)?.mean();
            let grads = tape.backward(objective.neg())?.wrt(bound.logits());
            let value = objective.item().expect("mean is scalar");
            drop(tape);

            let (mult, rejected) = opt.apply(&mut policy, &grads, step)?;
            trace.push(StepRecord {
                step,
                value,
                lr_multiplier: mult,
                mean_reward: Some(reward_sum / reward_count as f64),
                degenerate_groups: degenerate,
                rejected,
            });
            step += 1;
        }
    }
    Ok((policy, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize) -> Vec<TokenPair> {
        (0..n)
            .map(|i| TokenPair {
                prompt: vec![(i % 3) as Token + 2],
                chosen: vec![2, 3, 1],
                rejected: vec![4, 1],
            })
            .collect()
    }

    #[test]
    fn orpo_trace_length_and_determinism() {
        let policy = PolicyParams::random(6, 1, 0.1, 1).unwrap();
        let reference = policy.clone();
        let hp = HyperParams { batch_size: 4, learning_rate: 0.05, ..HyperParams::orpo() };
        let cfg = OrpoConfig::new(1.0).unwrap();
        let data = pairs(10);
        let (p1, t1) = train_orpo(&data, policy.clone(), &reference, &hp, &cfg).unwrap();
        assert_eq!(t1.len() as u64, 3 * 3);
        let steps: Vec<u64> = t1.records().iter().map(|r| r.step).collect();
        assert_eq!(steps, (0..9).collect::<Vec<_>>());
        let (p2, t2) = train_orpo(&data, policy, &reference, &hp, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn empty_inputs_rejected() {
        let policy = PolicyParams::new(4, 1).unwrap();
        let cfg = OrpoConfig::new(1.0).unwrap();
        assert!(matches!(
            train_orpo(&[], policy.clone(), &policy, &HyperParams::orpo(), &cfg),
            Err(TrainError::EmptyDataset)
        ));
        let r = |_: &[Token], _: &[Token]| 0.0;
        assert!(matches!(
            train_grpo(&[], policy, &r, &HyperParams::grpo(), &GrpoConfig::default(), 3),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn degenerate_groups_give_zero_gradient() {
        let policy = PolicyParams::random(5, 1, 0.5, 3).unwrap();
        let constant = |_: &[Token], _: &[Token]| 0.5;
        let hp = HyperParams { learning_rate: 0.1, weight_decay: 0.0, batch_size: 2, epochs: 1, ..HyperParams::grpo() };
        let prompts = vec![vec![0], vec![2], vec![3]];
        let (trained, trace) =
            train_grpo(&prompts, policy.clone(), &constant, &hp, &GrpoConfig::default(), 4).unwrap();
        assert_eq!(trained, policy);
        assert_eq!(trace.len(), 2);
        assert_eq!(trace.records()[0].degenerate_groups, 2);
        assert_eq!(trace.records()[1].degenerate_groups, 1);
        assert!(trace.records().iter().all(|r| r.value == 0.0 && r.mean_reward == Some(0.5)));
    }

    #[test]
    fn hyperparameter_defaults() {
        let g = HyperParams::grpo();
        assert_eq!((g.learning_rate, g.weight_decay, g.warmup_ratio, g.epochs), (5e-6, 0.1, 0.1, 3));
        assert_eq!(g.scheduler, SchedulerKind::Cosine);
        let o = HyperParams::orpo();
        assert_eq!((o.learning_rate, o.weight_decay, o.warmup_ratio, o.epochs), (4e-5, 0.1, 0.1, 3));
        assert_eq!(o.scheduler, SchedulerKind::Linear);
        assert!(HyperParams { warmup_ratio: 1.0, ..g }.validate().is_err());
        assert!(HyperParams { learning_rate: 0.0, ..g }.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 3, 4), derive_seed(7, 3, 4));
    }
}
