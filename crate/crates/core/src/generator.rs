//! LSTM token-policy generator.
//!
//! The policy reads its own previous token and emits a distribution
//! `softmax(c + V·h_t)` over the action vocabulary. Every sequence begins
//! from a reserved start input that is not itself an action token.
//!
//! Parameters are split into task-local heads (input embedding, `c`, `V`)
//! and a shared core (the LSTM weights), which is what the lifelong basis
//! factorizes.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discriminator::{self, DiscriminatorParams};
use crate::error::{input_err, Error, Result};
use crate::params::{clip_norm, ParamSet};
use crate::tensor::{
    axpy, lstm_cell_backward, lstm_cell_inplace, lstm_cell_unchecked, softmax_unchecked,
    LstmCache, LstmWeights, Matrix, Tape,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Sampled,
    Expert,
}

/// A run of action tokens with optional per-step annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    log_probs: Option<Vec<f64>>,
    rewards: Option<Vec<f64>>,
    source: Source,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, source: Source) -> Result<Self> {
        if tokens.is_empty() {
            return input_err("token sequence must hold at least one token");
        }
        Ok(Self {
            tokens,
            log_probs: None,
            rewards: None,
            source,
        })
    }

    pub fn with_log_probs(mut self, log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.len() != self.tokens.len() {
            return input_err("one log-probability per token is required");
        }
        if log_probs.iter().any(|&lp| lp > 0.0 || lp.is_nan()) {
            return input_err("log-probabilities must be <= 0");
        }
        self.log_probs = Some(log_probs);
        Ok(self)
    }

    pub fn with_rewards(mut self, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != self.tokens.len() {
            return input_err("one reward per token is required");
        }
        self.rewards = Some(rewards);
        Ok(self)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn log_probs(&self) -> Option<&[f64]> {
        self.log_probs.as_deref()
    }

    pub fn rewards(&self) -> Option<&[f64]> {
        self.rewards.as_deref()
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Contiguous sub-sequence `[start, start + len)` with annotations sliced alongside.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.tokens.len() {
            return input_err(format!(
                "window [{start}, {}) outside sequence of length {}",
                start + len,
                self.tokens.len()
            ));
        }
        Ok(Self {
            tokens: self.tokens[start..start + len].to_vec(),
            log_probs: self.log_probs.as_ref().map(|v| v[start..start + len].to_vec()),
            rewards: self.rewards.as_ref().map(|v| v[start..start + len].to_vec()),
            source: self.source,
        })
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t >= vocab) {
            Some(t) => input_err(format!("token {t} outside vocabulary of {vocab}")),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl GeneratorConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            embed_dim: 8,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Row 0 embeds the start input; row `a + 1` embeds action token `a`.
    pub embedding: Matrix,
    /// Output bias `c`.
    pub head_bias: Vec<f64>,
    /// Output weights `V`, `vocab × hidden`.
    pub head_weights: Matrix,
    /// Shared core.
    pub lstm: LstmWeights,
}

impl ParamSet for GeneratorParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.embedding.data());
        f(&self.head_bias);
        f(self.head_weights.data());
        f(self.lstm.w_x.data());
        f(self.lstm.w_h.data());
        f(&self.lstm.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.embedding.data_mut());
        f(&mut self.head_bias);
        f(self.head_weights.data_mut());
        f(self.lstm.w_x.data_mut());
        f(self.lstm.w_h.data_mut());
        f(&mut self.lstm.b);
    }
}

impl GeneratorParams {
    pub fn zeros(cfg: &GeneratorConfig) -> Result<Self> {
        if cfg.vocab == 0 || cfg.embed_dim == 0 || cfg.hidden == 0 {
            return input_err("generator dimensions must be positive");
        }
        Ok(Self {
            embedding: Matrix::zeros(cfg.vocab + 1, cfg.embed_dim),
            head_bias: vec![0.0; cfg.vocab],
            head_weights: Matrix::zeros(cfg.vocab, cfg.hidden),
            lstm: LstmWeights::zeros(cfg.embed_dim, cfg.hidden),
        })
    }

    pub fn random<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        p.randomize_heads(rng);
        p.randomize_core(rng);
        Ok(p)
    }

    /// Fresh random embedding and output head; the core is untouched.
    pub fn randomize_heads<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let emb = Normal::new(0.0, 1.0).unwrap();
        self.embedding
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = emb.sample(rng));
        let head = Normal::new(0.0, 1.0 / (self.hidden() as f64).sqrt()).unwrap();
        self.head_weights
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = head.sample(rng));
        self.head_bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn randomize_core<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = (self.lstm.input() + self.hidden()) as f64;
        let dist = Normal::new(0.0, 1.0 / fan_in.sqrt()).unwrap();
        self.lstm
            .w_x
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = dist.sample(rng));
        self.lstm
            .w_h
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = dist.sample(rng));
        self.lstm.b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn vocab(&self) -> usize {
        self.head_bias.len()
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn config(&self) -> GeneratorConfig {
        GeneratorConfig {
            vocab: self.vocab(),
            embed_dim: self.embed_dim(),
            hidden: self.hidden(),
        }
    }

    /// Length of the shared-core slice.
    pub fn core_len(&self) -> usize {
        self.lstm.num_params()
    }

    /// The shared-core slice; it is the tail of [`ParamSet::flatten`].
    pub fn core(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.core_len());
        out.extend_from_slice(self.lstm.w_x.data());
        out.extend_from_slice(self.lstm.w_h.data());
        out.extend_from_slice(&self.lstm.b);
        out
    }

    pub fn set_core(&mut self, core: &[f64]) -> Result<()> {
        if core.len() != self.core_len() {
            return input_err(format!(
                "core vector has {} entries, generator core has {}",
                core.len(),
                self.core_len()
            ));
        }
        let a = self.lstm.w_x.data().len();
        let b = a + self.lstm.w_h.data().len();
        self.lstm.w_x.data_mut().copy_from_slice(&core[..a]);
        self.lstm.w_h.data_mut().copy_from_slice(&core[a..b]);
        self.lstm.b.copy_from_slice(&core[b..]);
        Ok(())
    }

    /// Offset of the core slice inside the flat parameter vector.
    pub fn core_offset(&self) -> usize {
        self.num_params() - self.core_len()
    }

    fn input_row(&self, prev: Option<usize>) -> Result<usize> {
        match prev {
            None => Ok(0),
            Some(t) if t < self.vocab() => Ok(t + 1),
            Some(t) => input_err(format!("token {t} outside vocabulary of {}", self.vocab())),
        }
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.head_bias.clone();
        self.head_weights.matvec_acc(h, &mut z);
        z
    }
}

/// Hidden and cell state of the policy LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Advance the recurrence by one input and return the next-token distribution.
/// `prev = None` feeds the start input.
pub fn step(
    params: &GeneratorParams,
    state: &RecurrentState,
    prev: Option<usize>,
) -> Result<(Vec<f64>, RecurrentState)> {
    let row = params.input_row(prev)?;
    if state.h.len() != params.hidden() || state.c.len() != params.hidden() {
        return Err(Error::Shape("recurrent state does not match hidden size".into()));
    }
    let (h, c, _) = lstm_cell_unchecked(
        params.embedding.row(row),
        &state.h,
        &state.c,
        &params.lstm,
    );
    let dist = softmax_unchecked(&params.logits(&h));
    Ok((dist, RecurrentState { h, c }))
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the running sum; fall back to the last supported token
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Allocation-light sampler state used for rollouts.
struct Sampler<'a> {
    params: &'a GeneratorParams,
    h: Vec<f64>,
    c: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Sampler<'a> {
    fn new(params: &'a GeneratorParams) -> Self {
        let hs = params.hidden();
        Self {
            params,
            h: vec![0.0; hs],
            c: vec![0.0; hs],
            scratch: Vec::with_capacity(4 * hs),
        }
    }

    fn from_state(params: &'a GeneratorParams, h: &[f64], c: &[f64]) -> Self {
        Self {
            params,
            h: h.to_vec(),
            c: c.to_vec(),
            scratch: Vec::with_capacity(4 * h.len()),
        }
    }

    /// Feed an input row; returns the next-token distribution.
    fn feed(&mut self, row: usize) -> Vec<f64> {
        lstm_cell_inplace(
            self.params.embedding.row(row),
            &mut self.h,
            &mut self.c,
            &self.params.lstm,
            &mut self.scratch,
        );
        softmax_unchecked(&self.params.logits(&self.h))
    }
}

pub fn sample_sequence<R: Rng + ?Sized>(
    params: &GeneratorParams,
    length: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    if length == 0 {
        return input_err("cannot sample a sequence of length 0");
    }
    let mut s = Sampler::new(params);
    let mut tokens = Vec::with_capacity(length);
    let mut log_probs = Vec::with_capacity(length);
    let mut row = 0;
    for _ in 0..length {
        let p = s.feed(row);
        let y = sample_index(&p, rng);
        tokens.push(y);
        log_probs.push(p[y].ln().min(0.0));
        row = y + 1;
    }
    TokenSequence::new(tokens, Source::Sampled)?.with_log_probs(log_probs)
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_tokens(params: &GeneratorParams, length: usize) -> Vec<usize> {
    let mut s = Sampler::new(params);
    let mut out = Vec::with_capacity(length);
    let mut row = 0;
    for _ in 0..length {
        let p = s.feed(row);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate().skip(1) {
            if v > p[best] {
                best = i;
            }
        }
        out.push(best);
        row = best + 1;
    }
    out
}

/// Sample completions of `prefix` up to `horizon` from `(h, c)`, the state
/// reached after feeding the prefix's last token, and score each with `disc`.
fn rollout_scores<R: Rng + ?Sized>(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    h: &[f64],
    c: &[f64],
    prefix: &[usize],
    horizon: usize,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(n_rollouts);
    let mut tokens = Vec::with_capacity(horizon);
    for _ in 0..n_rollouts {
        let mut s = Sampler::from_state(gen, h, c);
        tokens.clear();
        tokens.extend_from_slice(prefix);
        let mut p = softmax_unchecked(&gen.logits(h));
        while tokens.len() < horizon {
            let y = sample_index(&p, rng);
            tokens.push(y);
            if tokens.len() < horizon {
                p = s.feed(y + 1);
            }
        }
        scores.push(discriminator::forward(disc, &tokens)?);
    }
    Ok(scores)
}

fn validate_prefix(gen: &GeneratorParams, tokens: &[usize]) -> Result<()> {
    if let Some(t) = tokens.iter().find(|&&t| t >= gen.vocab()) {
        return input_err(format!("token {t} outside vocabulary of {}", gen.vocab()));
    }
    Ok(())
}

/// Per-rollout discriminator scores behind [`mc_q_estimate`]. A complete
/// sequence yields the single exact score.
#[allow(clippy::too_many_arguments)]
pub fn mc_q_samples<R: Rng + ?Sized>(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    prefix: &[usize],
    action: usize,
    horizon: usize,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if prefix.len() + 1 > horizon {
        return input_err(format!(
            "prefix of length {} plus one action exceeds horizon {horizon}",
            prefix.len()
        ));
    }
    if n_rollouts == 0 {
        return input_err("n_rollouts must be at least 1");
    }
    let mut full = prefix.to_vec();
    full.push(action);
    validate_prefix(gen, &full)?;
    if full.len() == horizon {
        return Ok(vec![discriminator::forward(disc, &full)?]);
    }
    let mut s = Sampler::new(gen);
    let mut row = 0;
    for &t in &full {
        s.feed(row);
        row = t + 1;
    }
    s.feed(row);
    rollout_scores(gen, disc, &s.h, &s.c, &full, horizon, n_rollouts, rng)
}

/// Monte-Carlo action value of taking `action` after `prefix`: the exact
/// discriminator score when that completes the sequence, otherwise the mean
/// score over `n_rollouts` policy completions.
#[allow(clippy::too_many_arguments)]
pub fn mc_q_estimate<R: Rng + ?Sized>(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    prefix: &[usize],
    action: usize,
    horizon: usize,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<f64> {
    let s = mc_q_samples(gen, disc, prefix, action, horizon, n_rollouts, rng)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// One step of the unrolled policy, kept for backpropagation through time.
#[derive(Clone, Debug)]
pub struct StepRecord {
    input_row: usize,
    lstm: LstmCache,
    h: Vec<f64>,
    probs: Vec<f64>,
}

impl StepRecord {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Teacher-forced forward pass over `tokens`, recording each step.
pub fn forward_tape(params: &GeneratorParams, tokens: &[usize]) -> Result<Tape<StepRecord>> {
    validate_prefix(params, tokens)?;
    let hs = params.hidden();
    let mut tape = Tape::new();
    let mut h = vec![0.0; hs];
    let mut c = vec![0.0; hs];
    let mut row = 0;
    for &y in tokens {
        let (h2, c2, cache) = lstm_cell_unchecked(params.embedding.row(row), &h, &c, &params.lstm);
        let probs = softmax_unchecked(&params.logits(&h2));
        tape.push(StepRecord {
            input_row: row,
            lstm: cache,
            h: h2.clone(),
            probs,
        });
        h = h2;
        c = c2;
        row = y + 1;
    }
    Ok(tape)
}

/// Gradient of `Σ_t w_t log G(y_t | y_<t)` by reverse replay of `tape`.
fn weighted_backward(
    params: &GeneratorParams,
    tokens: &[usize],
    tape: &Tape<StepRecord>,
    weights: &[f64],
    grad: &mut GeneratorParams,
) {
    let hs = params.hidden();
    let mut dh_next = vec![0.0; hs];
    let mut dc_next = vec![0.0; hs];
    tape.backward(|t, rec| {
        let w = weights[t];
        let mut dh = std::mem::take(&mut dh_next);
        if w != 0.0 {
            let mut dlogits: Vec<f64> = rec.probs.iter().map(|p| -w * p).collect();
            dlogits[tokens[t]] += w;
            axpy(1.0, &dlogits, &mut grad.head_bias);
            grad.head_weights.add_outer(1.0, &dlogits, &rec.h);
            params.head_weights.tmatvec_acc(&dlogits, &mut dh);
        }
        let (dx, dh_prev, dc_prev) =
            lstm_cell_backward(&params.lstm, &rec.lstm, &dh, &dc_next, &mut grad.lstm);
        axpy(1.0, &dx, grad.embedding.row_mut(rec.input_row));
        dh_next = dh_prev;
        dc_next = dc_prev;
    });
}

/// `Σ_t w_t log G(y_t | y_<t)` and its gradient.
pub fn weighted_log_likelihood(
    params: &GeneratorParams,
    tokens: &[usize],
    weights: &[f64],
) -> Result<(f64, GeneratorParams)> {
    if weights.len() != tokens.len() {
        return input_err("one weight per token is required");
    }
    let tape = forward_tape(params, tokens)?;
    let value = tape
        .iter()
        .zip(tokens)
        .zip(weights)
        .map(|((rec, &y), &w)| w * rec.probs[y].ln())
        .sum();
    let mut grad = params.zeros_like();
    weighted_backward(params, tokens, &tape, weights, &mut grad);
    Ok((value, grad))
}

pub fn log_likelihood(params: &GeneratorParams, tokens: &[usize]) -> Result<f64> {
    let tape = forward_tape(params, tokens)?;
    Ok(tape.iter().zip(tokens).map(|(r, &y)| r.probs[y].ln()).sum())
}

/// Mean negative log-likelihood per token.
pub fn nll(params: &GeneratorParams, data: &[TokenSequence]) -> Result<f64> {
    if data.is_empty() {
        return input_err("nll of an empty dataset");
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in data {
        total -= log_likelihood(params, s.tokens())?;
        count += s.len();
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyGradientOptions {
    pub n_rollouts: usize,
    /// Constant subtracted from every action value; off by default.
    pub baseline: Option<f64>,
}

impl Default for PolicyGradientOptions {
    fn default() -> Self {
        Self {
            n_rollouts: 16,
            baseline: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyGradient {
    /// Batch-mean ascent direction.
    pub grad: GeneratorParams,
    /// Mean action value over all (sequence, step) pairs.
    pub mean_q: f64,
    /// Mean discriminator score of the complete sampled sequences.
    pub mean_terminal: f64,
    /// Mean `log D` of the complete sampled sequences.
    pub mean_log_terminal: f64,
}

/// Action values `Q̂_t` for every step of `tokens`, reusing the teacher-forced states.
fn action_values<R: Rng + ?Sized>(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    tokens: &[usize],
    tape: &Tape<StepRecord>,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let horizon = tokens.len();
    let mut q = Vec::with_capacity(horizon);
    for t in 0..horizon {
        if t + 1 == horizon {
            q.push(discriminator::forward(disc, tokens)?);
        } else {
            // state after feeding y_t is the one recorded for step t + 1
            let next = tape.get(t + 1).expect("tape covers every step");
            let scores = rollout_scores(
                gen,
                disc,
                &next.h,
                &next.lstm.c,
                &tokens[..=t],
                horizon,
                n_rollouts,
                rng,
            )?;
            q.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
    }
    Ok(q)
}

/// Score-function policy gradient `mean_b Σ_t ∇log G(y_t|y_<t) · Q̂_t`, with
/// `Q̂` from Monte-Carlo rollouts scored by the discriminator.
///
/// Each sequence gets its own sub-generator seeded in batch order and the
/// contributions are summed in batch order, so the result does not depend on
/// the rayon pool size.
pub fn policy_gradient<R: RngCore + ?Sized>(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    batch: &[TokenSequence],
    opts: &PolicyGradientOptions,
    rng: &mut R,
) -> Result<PolicyGradient> {
    if batch.is_empty() {
        return input_err("policy gradient needs a nonempty batch");
    }
    if opts.n_rollouts == 0 {
        return input_err("n_rollouts must be at least 1");
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
    let parts: Vec<Result<(GeneratorParams, f64, f64)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(seq, &seed)| {
            let mut sub = ChaCha8Rng::seed_from_u64(seed);
            let tokens = seq.tokens();
            let tape = forward_tape(gen, tokens)?;
            let q = action_values(gen, disc, tokens, &tape, opts.n_rollouts, &mut sub)?;
            let weights: Vec<f64> = match opts.baseline {
                Some(b) => q.iter().map(|v| v - b).collect(),
                None => q.clone(),
            };
            let mut grad = gen.zeros_like();
            weighted_backward(gen, tokens, &tape, &weights, &mut grad);
            let q_sum: f64 = q.iter().sum();
            Ok((grad, q_sum, *q.last().unwrap()))
        })
        .collect();
    let n = batch.len() as f64;
    let mut total = gen.zeros_like();
    let mut q_total = 0.0;
    let mut steps = 0usize;
    let mut terminal = 0.0;
    let mut log_terminal = 0.0;
    for (part, seq) in parts.into_iter().zip(batch) {
        let (g, q_sum, d) = part?;
        total.axpy(1.0 / n, &g);
        q_total += q_sum;
        steps += seq.len();
        terminal += d;
        log_terminal += d.max(discriminator::PROB_CLAMP).ln();
    }
    Ok(PolicyGradient {
        grad: total,
        mean_q: q_total / steps as f64,
        mean_terminal: terminal / n,
        mean_log_terminal: log_terminal / n,
    })
}

/// Pure ascent step `θ + lr · gradient`.
pub fn adversarial_update(
    gen: &GeneratorParams,
    gradient: &GeneratorParams,
    lr: f64,
) -> Result<GeneratorParams> {
    if !(lr > 0.0) || !lr.is_finite() {
        return input_err(format!("learning rate must be positive, got {lr}"));
    }
    if !gradient.all_finite() {
        return Err(Error::Numeric("refusing update with a non-finite gradient".into()));
    }
    if gradient.num_params() != gen.num_params() {
        return Err(Error::Shape("gradient does not match generator shape".into()));
    }
    let mut next = gen.clone();
    next.axpy(lr, gradient);
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// L2 clip applied to each minibatch gradient.
    pub clip: Option<f64>,
}

/// Gradient of the mean per-sequence log-likelihood over `data`.
pub fn mle_gradient(params: &GeneratorParams, data: &[TokenSequence]) -> Result<GeneratorParams> {
    if data.is_empty() {
        return input_err("maximum likelihood needs data");
    }
    let parts: Vec<Result<GeneratorParams>> = data
        .par_iter()
        .map(|s| {
            let w = vec![1.0; s.len()];
            weighted_log_likelihood(params, s.tokens(), &w).map(|(_, g)| g)
        })
        .collect();
    let mut grad = params.zeros_like();
    let n = data.len() as f64;
    for g in parts {
        grad.axpy(1.0 / n, &g?);
    }
    Ok(grad)
}

/// Minibatch gradient ascent on the data log-likelihood.
pub fn mle_pretrain<R: Rng + ?Sized>(
    gen: &GeneratorParams,
    data: &[TokenSequence],
    schedule: &MleSchedule,
    rng: &mut R,
) -> Result<GeneratorParams> {
    if data.is_empty() {
        return input_err("maximum likelihood pretraining needs data");
    }
    if schedule.batch_size == 0 {
        return input_err("batch_size must be at least 1");
    }
    for s in data {
        s.check_vocab(gen.vocab())?;
    }
    let mut params = gen.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..schedule.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut g = mle_gradient(&params, &batch)?;
            if let Some(c) = schedule.clip {
                clip_norm(&mut g, c);
            }
            if !g.all_finite() {
                return Err(Error::Numeric("non-finite likelihood gradient".into()));
            }
            params.axpy(schedule.lr, &g);
        }
    }
    Ok(params)
}
