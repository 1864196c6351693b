//! Synthetic tasks with a known optimum, for exercising the training loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::objectives::TokenPair;
use crate::policy::{PolicyError, PolicyParams, Token};

/// First token id that is neither the begin nor the end token.
pub const FIRST_CONTENT_TOKEN: Token = 2;

/// `n` one-token prompts cycling through the content tokens of `vocab`.
pub fn target_token_prompts(n: usize, vocab: usize) -> Vec<Vec<Token>> {
    let content = vocab.saturating_sub(FIRST_CONTENT_TOKEN as usize).max(1);
    (0..n)
        .map(|i| vec![FIRST_CONTENT_TOKEN + (i % content) as Token])
        .collect()
}

/// Reward 1 when the completion starts with `target`, else 0.
pub fn target_token_reward(target: Token) -> impl Fn(&[Token], &[Token]) -> f64 + Sync + Copy {
    move |_prompt, completion| f64::from(completion.first() == Some(&target))
}

/// `n` pairs over `vocab` tokens. The chosen completion continues the prompt
/// with its successor token; the rejected one with a random other token.
pub fn synthetic_pairs(n: usize, vocab: usize, seed: u64) -> Vec<TokenPair> {
    assert!(vocab >= 4, "need at least two content tokens");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = (vocab - FIRST_CONTENT_TOKEN as usize) as Token;
    let end = 1;
    (0..n)
        .map(|_| {
            let p = rng.gen_range(0..content);
            let good = (p + 1) % content;
            let mut bad = rng.gen_range(0..content - 1);
            if bad >= good {
                bad += 1;
            }
            TokenPair {
                prompt: vec![FIRST_CONTENT_TOKEN + p],
                chosen: vec![FIRST_CONTENT_TOKEN + good, end],
                rejected: vec![FIRST_CONTENT_TOKEN + bad, end],
            }
        })
        .collect()
}

/// Mean of `log π(chosen) − log π(rejected)` over `pairs`.
pub fn preference_margin(policy: &PolicyParams, pairs: &[TokenPair]) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for p in pairs {
        total += policy.log_prob(&p.prompt, &p.chosen)? - policy.log_prob(&p.prompt, &p.rejected)?;
    }
    Ok(total / pairs.len() as f64)
}
