//! Tabular autoregressive softmax policy.
//!
//! The next-token distribution depends on the last `context_order` tokens of
//! the history (prompt followed by the completion so far), left-padded with
//! the begin token. Each context owns one row of logits, so sequence
//! log-probabilities and the KL between two policies are exact.

use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{log_softmax_row, softmax_row, AutodiffError, Tape, Tensor, Var};

pub type Token = u32;

/// Largest number of context rows a policy may allocate.
pub const MAX_CONTEXTS: usize = 1 << 20;

const CHECKPOINT_MAGIC: &[u8; 8] = b"QSFPOL01";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("{vocab}^{order} contexts exceed the table limit")]
    TableTooLarge { vocab: usize, order: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocabulary { token: Token, vocab: usize },
    #[error("logits shape {got:?}, expected {expected:?}")]
    LogitsShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("policy shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(PolicyShape, PolicyShape),
    #[error("invalid sampling request: {0}")]
    Sampling(&'static str),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable dimensions of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyShape {
    vocab_size: usize,
    context_order: usize,
    num_contexts: usize,
    begin: Token,
    end: Token,
}

impl PolicyShape {
    pub fn new(vocab_size: usize, context_order: usize) -> Result<Self, PolicyError> {
        if vocab_size < 2 {
            return Err(PolicyError::VocabTooSmall(vocab_size));
        }
        let too_large = PolicyError::TableTooLarge {
            vocab: vocab_size,
            order: context_order,
        };
        let order = u32::try_from(context_order).map_err(|_| PolicyError::TableTooLarge {
            vocab: vocab_size,
            order: context_order,
        })?;
        let num_contexts = vocab_size.checked_pow(order).ok_or(too_large)?;
        if num_contexts > MAX_CONTEXTS {
            return Err(PolicyError::TableTooLarge {
                vocab: vocab_size,
                order: context_order,
            });
        }
        Ok(Self {
            vocab_size,
            context_order,
            num_contexts,
            begin: 0,
            end: 1,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn begin(&self) -> Token {
        self.begin
    }

    pub fn end(&self) -> Token {
        self.end
    }

    pub fn check_token(&self, token: Token) -> Result<(), PolicyError> {
        if (token as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(PolicyError::OutOfVocabulary {
                token,
                vocab: self.vocab_size,
            })
        }
    }

    /// Row index for the context formed by the last `context_order` tokens of
    /// `history`, left-padded with `begin`.
    pub fn context_index(&self, history: &[Token]) -> usize {
        let k = self.context_order;
        let pad = k.saturating_sub(history.len());
        let tail = &history[history.len().saturating_sub(k)..];
        std::iter::repeat(self.begin)
            .take(pad)
            .chain(tail.iter().copied())
            .fold(0usize, |acc, t| acc * self.vocab_size + t as usize)
    }

    fn table_shape(&self) -> Vec<usize> {
        vec![self.num_contexts, self.vocab_size]
    }

    /// Context rows visited while scoring `completion` after `prompt`,
    /// paired with the token emitted from each.
    fn steps<'a>(
        &'a self,
        prompt: &'a [Token],
        completion: &'a [Token],
    ) -> Result<impl Iterator<Item = (usize, usize)> + 'a, PolicyError> {
        for &t in prompt.iter().chain(completion) {
            self.check_token(t)?;
        }
        let mut history: Vec<Token> = prompt.to_vec();
        Ok(completion.iter().map(move |&t| {
            let ctx = self.context_index(&history);
            history.push(t);
            (ctx, t as usize)
        }))
    }
}

/// Trainable logits table `[vocab_size^context_order, vocab_size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    logits: Tensor,
}

impl PolicyParams {
    /// A uniform policy with begin token 0 and end token 1.
    pub fn new(vocab_size: usize, context_order: usize) -> Result<Self, PolicyError> {
        let shape = PolicyShape::new(vocab_size, context_order)?;
        let logits = Tensor::zeros(&shape.table_shape());
        Ok(Self { shape, logits })
    }

    pub fn from_logits(
        vocab_size: usize,
        context_order: usize,
        logits: Tensor,
    ) -> Result<Self, PolicyError> {
        let mut p = Self::new(vocab_size, context_order)?;
        p.set_logits(logits)?;
        Ok(p)
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(
        vocab_size: usize,
        context_order: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        let mut p = Self::new(vocab_size, context_order)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in p.logits.data_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn with_special_tokens(mut self, begin: Token, end: Token) -> Result<Self, PolicyError> {
        self.shape.check_token(begin)?;
        self.shape.check_token(end)?;
        self.shape.begin = begin;
        self.shape.end = end;
        Ok(self)
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size
    }

    pub fn context_order(&self) -> usize {
        self.shape.context_order
    }

    pub fn num_contexts(&self) -> usize {
        self.shape.num_contexts
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    pub fn set_logits(&mut self, logits: Tensor) -> Result<(), PolicyError> {
        let expected = self.shape.table_shape();
        if logits.shape() != expected.as_slice() {
            return Err(PolicyError::LogitsShape {
                got: logits.shape().to_vec(),
                expected,
            });
        }
        self.logits = logits;
        Ok(())
    }

    pub fn set_logit(&mut self, context: usize, token: Token, value: f64) -> Result<(), PolicyError> {
        self.shape.check_token(token)?;
        if context >= self.shape.num_contexts {
            return Err(AutodiffError::IndexOutOfRange {
                index: context,
                shape: self.logits.shape().to_vec(),
            }
            .into());
        }
        let v = self.shape.vocab_size;
        self.logits.data_mut()[context * v + token as usize] = value;
        Ok(())
    }

    fn row(&self, context: usize) -> &[f64] {
        let v = self.shape.vocab_size;
        &self.logits.data()[context * v..(context + 1) * v]
    }

    /// Next-token distribution at one context row.
    pub fn distribution(&self, context: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.vocab_size];
        softmax_row(self.row(context), &mut out);
        out
    }

    /// Softmax of every logits row, `[num_contexts, vocab_size]`.
    pub fn token_distributions(&self) -> Tensor {
        let mut out = Tensor::zeros(self.logits.shape());
        let v = self.shape.vocab_size;
        for (src, dst) in self.logits.data().chunks(v).zip(out.data_mut().chunks_mut(v)) {
            softmax_row(src, dst);
        }
        out
    }

    /// Natural-log probabilities of every row.
    pub fn log_token_distributions(&self) -> Tensor {
        let mut out = Tensor::zeros(self.logits.shape());
        let v = self.shape.vocab_size;
        for (src, dst) in self.logits.data().chunks(v).zip(out.data_mut().chunks_mut(v)) {
            log_softmax_row(src, dst);
        }
        out
    }

    /// `Σ_t ln π(completion_t | context_t)`.
    pub fn log_prob(&self, prompt: &[Token], completion: &[Token]) -> Result<f64, PolicyError> {
        let v = self.shape.vocab_size;
        let mut row = vec![0.0; v];
        let mut total = 0.0;
        for (ctx, tok) in self.shape.steps(prompt, completion)? {
            log_softmax_row(self.row(ctx), &mut row);
            total += row[tok];
        }
        Ok(total)
    }

    /// Records the logits on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundPolicy<'t> {
        let logits = tape.var(self.logits.clone());
        BoundPolicy {
            shape: self.shape,
            logits,
            log_probs: logits.log_softmax(),
        }
    }

    /// Samples `group_size` completions at temperature 1. Each stops after
    /// emitting the end token or at `max_len` tokens.
    pub fn sample_completions(
        &self,
        prompt: &[Token],
        group_size: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Vec<Vec<Token>>, PolicyError> {
        if group_size == 0 {
            return Err(PolicyError::Sampling("group size must be at least 1"));
        }
        if max_len == 0 {
            return Err(PolicyError::Sampling("max_len must be at least 1"));
        }
        for &t in prompt {
            self.shape.check_token(t)?;
        }
        let dists: Vec<WeightedIndex<f64>> = self
            .token_distributions()
            .rows()
            .map(|r| WeightedIndex::new(r).expect("softmax rows are positive"))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let mut history = prompt.to_vec();
            let mut seq = Vec::new();
            while seq.len() < max_len {
                let ctx = self.shape.context_index(&history);
                let tok = dists[ctx].sample(&mut rng) as Token;
                seq.push(tok);
                history.push(tok);
                if tok == self.shape.end {
                    break;
                }
            }
            out.push(seq);
        }
        Ok(out)
    }

    /// Argmax decoding (lowest token id wins ties).
    pub fn greedy_completion(&self, prompt: &[Token], max_len: usize) -> Result<Vec<Token>, PolicyError> {
        for &t in prompt {
            self.shape.check_token(t)?;
        }
        let mut history = prompt.to_vec();
        let mut seq = Vec::new();
        while seq.len() < max_len {
            let row = self.row(self.shape.context_index(&history));
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let tok = best as Token;
            seq.push(tok);
            history.push(tok);
            if tok == self.shape.end {
                break;
            }
        }
        Ok(seq)
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            id: SnapshotId(NEXT_SNAPSHOT.fetch_add(1, Ordering::Relaxed)),
            params: Arc::new(self.clone()),
        }
    }

    /// Checkpoint layout, all little-endian: the 8-byte magic `QSFPOL01`, then
    /// `u32` vocab_size, context_order, begin, end, then the logits as `f64`
    /// in row-major order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), PolicyError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for field in [
            self.shape.vocab_size as u32,
            self.shape.context_order as u32,
            self.shape.begin,
            self.shape.end,
        ] {
            w.write_all(&field.to_le_bytes())?;
        }
        for v in self.logits.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, PolicyError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |msg: &str| PolicyError::Checkpoint(msg.to_string());
        if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing header"));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let params = Self::new(field(0) as usize, field(1) as usize)?;
        let params = params.with_special_tokens(field(2), field(3))?;
        let body = &bytes[24..];
        if body.len() != params.logits.len() * 8 {
            return Err(bad("logits length does not match header"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let logits = Tensor::new(params.logits.shape().to_vec(), data)?;
        Ok(Self { logits, ..params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

/// A policy whose logits are a leaf on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundPolicy<'t> {
    shape: PolicyShape,
    logits: Var<'t>,
    log_probs: Var<'t>,
}

impl<'t> BoundPolicy<'t> {
    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    /// The logits leaf; pass it to `Gradients::wrt`.
    pub fn logits(&self) -> Var<'t> {
        self.logits
    }

    /// Row-wise log-softmax of the logits.
    pub fn log_probs(&self) -> Var<'t> {
        self.log_probs
    }

    /// Differentiable `Σ_t ln π(completion_t | context_t)`.
    pub fn sequence_log_prob(
        &self,
        prompt: &[Token],
        completion: &[Token],
    ) -> Result<Var<'t>, PolicyError> {
        let tape = self.logits.tape();
        let mut terms = Vec::with_capacity(completion.len());
        for (ctx, tok) in self.shape.steps(prompt, completion)? {
            terms.push(self.log_probs.row(ctx)?.at(tok)?);
        }
        Ok(tape.stack(&terms)?.sum())
    }
}

static NEXT_SNAPSHOT: AtomicU64 = AtomicU64::new(1);

/// Identifies one call to [`PolicyParams::snapshot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SnapshotId(pub u64);

/// Frozen copy of a policy, shareable across threads.
///
/// Equality compares parameters only, so two snapshots of the same policy are
/// equal even though their ids differ.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    id: SnapshotId,
    params: Arc<PolicyParams>,
}

impl PolicySnapshot {
    pub fn id(&self) -> SnapshotId {
        self.id
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

impl Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.params
    }
}

impl PartialEq for PolicySnapshot {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}
