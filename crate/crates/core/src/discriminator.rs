//! Convolutional sequence discriminator.
//!
//! Tokens are embedded into a `T × k` matrix, every kernel in the bank is
//! convolved over time, passed through ReLU and max-pooled, and the pooled
//! features feed a single logistic unit giving the probability that the
//! sequence came from expert data.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};
use crate::generator::{self, GeneratorParams, TokenSequence};
use crate::params::ParamSet;
use crate::tensor::{axpy, conv1d_backward, conv1d_unchecked, relu, sigmoid, Matrix};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub windows: Vec<usize>,
    pub kernels_per_window: usize,
}

impl DiscriminatorConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            embed_dim: 8,
            windows: vec![2, 3, 4],
            kernels_per_window: 8,
        }
    }
}

/// Kernels sharing one window width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub width: usize,
    pub kernels: Vec<Matrix>,
    pub biases: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub embedding: Matrix,
    pub banks: Vec<KernelBank>,
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
}

impl ParamSet for DiscriminatorParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.embedding.data());
        for bank in &self.banks {
            for k in &bank.kernels {
                f(k.data());
            }
            f(&bank.biases);
        }
        f(&self.head_weights);
        f(std::slice::from_ref(&self.head_bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.embedding.data_mut());
        for bank in &mut self.banks {
            for k in &mut bank.kernels {
                f(k.data_mut());
            }
            f(&mut bank.biases);
        }
        f(&mut self.head_weights);
        f(std::slice::from_mut(&mut self.head_bias));
    }
}

impl DiscriminatorParams {
    pub fn zeros(cfg: &DiscriminatorConfig) -> Result<Self> {
        if cfg.vocab == 0 || cfg.embed_dim == 0 || cfg.windows.is_empty() {
            return input_err("discriminator needs a vocabulary, an embedding and windows");
        }
        if cfg.windows.contains(&0) {
            return input_err("discriminator window width must be positive");
        }
        let banks = cfg
            .windows
            .iter()
            .map(|&w| KernelBank {
                width: w,
                kernels: vec![Matrix::zeros(w, cfg.embed_dim); cfg.kernels_per_window],
                biases: vec![0.0; cfg.kernels_per_window],
            })
            .collect();
        Ok(Self {
            embedding: Matrix::zeros(cfg.vocab, cfg.embed_dim),
            banks,
            head_weights: vec![0.0; cfg.windows.len() * cfg.kernels_per_window],
            head_bias: 0.0,
        })
    }

    pub fn random<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let emb = Normal::new(0.0, 1.0).unwrap();
        p.embedding
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = emb.sample(rng));
        for bank in &mut p.banks {
            let scale = 1.0 / ((bank.width * cfg.embed_dim) as f64).sqrt();
            let dist = Normal::new(0.0, scale).unwrap();
            for k in &mut bank.kernels {
                k.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
            }
            bank.biases.iter_mut().for_each(|v| *v = 0.1);
        }
        let scale = 1.0 / (p.head_weights.len() as f64).sqrt();
        let dist = Normal::new(0.0, scale).unwrap();
        p.head_weights
            .iter_mut()
            .for_each(|v| *v = dist.sample(rng));
        Ok(p)
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn max_window(&self) -> usize {
        self.banks.iter().map(|b| b.width).max().unwrap_or(0)
    }

    /// Number of pooled features, independent of sequence length.
    pub fn num_features(&self) -> usize {
        self.banks.iter().map(|b| b.kernels.len()).sum()
    }
}

/// Stack token embeddings row by row into a `T × k` matrix.
pub fn embed_sequence(params: &DiscriminatorParams, tokens: &[usize]) -> Result<Matrix> {
    let k = params.embed_dim();
    let mut m = Matrix::zeros(tokens.len(), k);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok >= params.vocab() {
            return input_err(format!(
                "token {tok} at position {t} outside vocabulary of {}",
                params.vocab()
            ));
        }
        m.row_mut(t).copy_from_slice(params.embedding.row(tok));
    }
    Ok(m)
}

/// Forward values needed by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    embedded: Matrix,
    /// `(argmax position, pooled value)` per kernel, bank-major order.
    pooled: Vec<(usize, f64)>,
    pub logit: f64,
    pub prob: f64,
}

fn check_len(params: &DiscriminatorParams, len: usize) -> Result<()> {
    if len < params.max_window() {
        return shape_err(format!(
            "sequence of length {len} is shorter than the widest window {}",
            params.max_window()
        ));
    }
    Ok(())
}

pub fn forward_cached(params: &DiscriminatorParams, tokens: &[usize]) -> Result<ForwardCache> {
    check_len(params, tokens.len())?;
    let embedded = embed_sequence(params, tokens)?;
    let mut pooled = Vec::with_capacity(params.num_features());
    for bank in &params.banks {
        for (kernel, &b) in bank.kernels.iter().zip(&bank.biases) {
            let fmap = conv1d_unchecked(&embedded, kernel, b);
            let mut best = 0;
            for (i, &v) in fmap.iter().enumerate().skip(1) {
                if v > fmap[best] {
                    best = i;
                }
            }
            pooled.push((best, relu(fmap[best])));
        }
    }
    let logit = params.head_bias
        + pooled
            .iter()
            .zip(&params.head_weights)
            .map(|((_, v), w)| v * w)
            .sum::<f64>();
    // keep the output strictly inside (0, 1) even when the logistic saturates
    let prob = sigmoid(logit).clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        embedded,
        pooled,
        logit,
        prob,
    })
}

/// Probability that `tokens` is an expert sequence.
pub fn forward(params: &DiscriminatorParams, tokens: &[usize]) -> Result<f64> {
    Ok(forward_cached(params, tokens)?.prob)
}

/// Accumulate `dlogit · ∂logit/∂params` into `grad`.
pub fn backward(
    params: &DiscriminatorParams,
    cache: &ForwardCache,
    dlogit: f64,
    grad: &mut DiscriminatorParams,
) {
    grad.head_bias += dlogit;
    let mut dm = Matrix::zeros(cache.embedded.rows(), cache.embedded.cols());
    let mut idx = 0;
    for (b_idx, bank) in params.banks.iter().enumerate() {
        for (k_idx, kernel) in bank.kernels.iter().enumerate() {
            let (pos, val) = cache.pooled[idx];
            grad.head_weights[idx] += dlogit * val;
            if val > 0.0 {
                let g = dlogit * params.head_weights[idx];
                let mut dout = vec![0.0; cache.embedded.rows() - bank.width + 1];
                dout[pos] = g;
                let (dmi, dk, db) = conv1d_backward(&cache.embedded, kernel, &dout);
                axpy(1.0, dmi.data(), dm.data_mut());
                let gb = &mut grad.banks[b_idx];
                axpy(1.0, dk.data(), gb.kernels[k_idx].data_mut());
                gb.biases[k_idx] += db;
            }
            idx += 1;
        }
    }
    for (t, &tok) in cache.tokens.iter().enumerate() {
        axpy(1.0, dm.row(t), grad.embedding.row_mut(tok));
    }
}

/// Balanced set of expert (positive) and generated (negative) sequences.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    positives: Vec<TokenSequence>,
    negatives: Vec<TokenSequence>,
}

impl LabeledBatch {
    pub fn new(positives: Vec<TokenSequence>, negatives: Vec<TokenSequence>) -> Result<Self> {
        if positives.is_empty() || positives.len() != negatives.len() {
            return input_err(format!(
                "unbalanced batch: {} positives, {} negatives",
                positives.len(),
                negatives.len()
            ));
        }
        let len = positives[0].len();
        if positives.iter().chain(&negatives).any(|s| s.len() != len) {
            return input_err("all sequences in a batch must share one length");
        }
        Ok(Self {
            positives,
            negatives,
        })
    }

    pub fn positives(&self) -> &[TokenSequence] {
        &self.positives
    }

    pub fn negatives(&self) -> &[TokenSequence] {
        &self.negatives
    }

    pub fn pairs(&self) -> usize {
        self.positives.len()
    }
}

#[derive(Clone, Debug)]
pub struct MinimaxOutput {
    /// Mean over pairs of `μ log(1 - D(neg)) + λ log D(pos)`.
    pub loss: f64,
    /// Ascent direction for the discriminator.
    pub grad: DiscriminatorParams,
    /// How many outputs hit the probability clamp.
    pub clamped: usize,
}

fn clamp_prob(p: f64, clamped: &mut usize) -> (f64, bool) {
    if p < PROB_CLAMP {
        *clamped += 1;
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        *clamped += 1;
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

pub fn minimax_loss(
    params: &DiscriminatorParams,
    batch: &LabeledBatch,
    mu: f64,
    lambda: f64,
) -> Result<MinimaxOutput> {
    if !(mu > 0.0 && lambda > 0.0) {
        return input_err(format!("minimax weights must be positive (mu={mu}, lambda={lambda})"));
    }
    let n = batch.pairs() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let mut clamped = 0;
    for seq in batch.positives() {
        let cache = forward_cached(params, seq.tokens())?;
        let (p, hit) = clamp_prob(cache.prob, &mut clamped);
        loss += lambda * p.ln();
        if !hit {
            // d log σ(z) / dz = 1 - σ(z)
            backward(params, &cache, lambda * (1.0 - p) / n, &mut grad);
        }
    }
    for seq in batch.negatives() {
        let cache = forward_cached(params, seq.tokens())?;
        let (p, hit) = clamp_prob(cache.prob, &mut clamped);
        loss += mu * (1.0 - p).ln();
        if !hit {
            // d log(1 - σ(z)) / dz = -σ(z)
            backward(params, &cache, -mu * p / n, &mut grad);
        }
    }
    Ok(MinimaxOutput {
        loss: loss / n,
        grad,
        clamped,
    })
}

/// Fraction of sequences classified correctly at threshold 0.5.
pub fn accuracy(
    params: &DiscriminatorParams,
    positives: &[TokenSequence],
    negatives: &[TokenSequence],
) -> Result<f64> {
    let total = positives.len() + negatives.len();
    if total == 0 {
        return input_err("accuracy of an empty set");
    }
    let mut correct = 0usize;
    for s in positives {
        if forward(params, s.tokens())? > 0.5 {
            correct += 1;
        }
    }
    for s in negatives {
        if forward(params, s.tokens())? <= 0.5 {
            correct += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Debug)]
pub struct TrainStepReport {
    pub loss: f64,
    pub clamped: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Draw `batch_size` experts and as many fresh generator samples, then take
/// one ascent step on the minimax objective.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    params: &DiscriminatorParams,
    gen: &GeneratorParams,
    experts: &[TokenSequence],
    batch_size: usize,
    lr: f64,
    mu: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<(DiscriminatorParams, TrainStepReport)> {
    if batch_size == 0 {
        return input_err("batch_size must be at least 1");
    }
    if experts.len() < batch_size {
        return input_err(format!(
            "need at least {batch_size} expert sequences, have {}",
            experts.len()
        ));
    }
    let len = experts[0].len();
    let positives: Vec<TokenSequence> = rand::seq::index::sample(rng, experts.len(), batch_size)
        .into_iter()
        .map(|i| experts[i].clone())
        .collect();
    let negatives = (0..batch_size)
        .map(|_| generator::sample_sequence(gen, len, rng))
        .collect::<Result<Vec<_>>>()?;
    let batch = LabeledBatch::new(positives, negatives)?;
    let out = minimax_loss(params, &batch, mu, lambda)?;
    if !out.grad.all_finite() {
        return Err(Error::Numeric("discriminator gradient is not finite".into()));
    }
    let mut next = params.clone();
    next.axpy(lr, &out.grad);
    Ok((
        next,
        TrainStepReport {
            loss: out.loss,
            clamped: out.clamped,
            positives: batch.positives().len(),
            negatives: batch.negatives().len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Source;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(tokens: &[usize]) -> TokenSequence {
        TokenSequence::new(tokens.to_vec(), Source::Expert).unwrap()
    }

    fn small_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab: 3,
            embed_dim: 2,
            windows: vec![2, 3],
            kernels_per_window: 2,
        }
    }

    #[test]
    fn embedding_is_direct_lookup() {
        let mut p = DiscriminatorParams::zeros(&DiscriminatorConfig {
            vocab: 2,
            embed_dim: 2,
            windows: vec![1],
            kernels_per_window: 1,
        })
        .unwrap();
        p.embedding = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = embed_sequence(&p, &[0, 1]).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(embed_sequence(&p, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn zero_weights_give_one_half() {
        let p = DiscriminatorParams::zeros(&DiscriminatorConfig::new(5)).unwrap();
        for tokens in [[0usize; 20], [4; 20], [1; 20]] {
            assert_eq!(forward(&p, &tokens).unwrap(), 0.5);
        }
    }

    #[test]
    fn short_sequence_is_shape_error() {
        let p = DiscriminatorParams::zeros(&DiscriminatorConfig::new(5)).unwrap();
        assert!(matches!(forward(&p, &[0, 1, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn pooled_feature_count_is_length_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DiscriminatorParams::random(&DiscriminatorConfig::new(5), &mut rng).unwrap();
        for len in [4, 9, 20, 33] {
            let tokens: Vec<usize> = (0..len).map(|i| i % 5).collect();
            let c = forward_cached(&p, &tokens).unwrap();
            assert_eq!(c.pooled.len(), 24);
        }
    }

    #[test]
    fn minimax_closed_form_at_one_half() {
        let p = DiscriminatorParams::zeros(&small_cfg()).unwrap();
        let batch = LabeledBatch::new(vec![seq(&[0, 1, 2])], vec![seq(&[2, 1, 0])]).unwrap();
        let out = minimax_loss(&p, &batch, 1.0, 1.0).unwrap();
        assert!((out.loss - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((out.loss + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn minimax_approaches_zero_for_perfect_discriminator() {
        // A large head bias pushes every output towards 1; a token feature
        // separates the classes.
        let mut p = DiscriminatorParams::zeros(&DiscriminatorConfig {
            vocab: 2,
            embed_dim: 1,
            windows: vec![1],
            kernels_per_window: 1,
        })
        .unwrap();
        p.embedding = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        p.banks[0].kernels[0] = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let batch = LabeledBatch::new(vec![seq(&[0, 0])], vec![seq(&[1, 1])]).unwrap();
        let mut last = f64::NEG_INFINITY;
        for scale in [2.0, 5.0, 10.0] {
            p.head_weights[0] = 2.0 * scale;
            p.head_bias = -scale;
            let out = minimax_loss(&p, &batch, 1.0, 1.0).unwrap();
            assert!(out.loss > last);
            assert!(out.loss < 0.0);
            last = out.loss;
        }
        assert!(last > -1e-4);
    }

    #[test]
    fn minimax_rejects_nonpositive_weights() {
        let p = DiscriminatorParams::zeros(&small_cfg()).unwrap();
        let batch = LabeledBatch::new(vec![seq(&[0, 1, 2])], vec![seq(&[2, 1, 0])]).unwrap();
        assert!(minimax_loss(&p, &batch, 0.0, 1.0).is_err());
    }

    #[test]
    fn unbalanced_batch_rejected() {
        assert!(LabeledBatch::new(vec![seq(&[0, 1])], vec![]).is_err());
        assert!(LabeledBatch::new(vec![seq(&[0, 1])], vec![seq(&[0, 1, 1])]).is_err());
    }

    #[test]
    fn minimax_gradient_matches_finite_differences() {
        for s in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
            let p = DiscriminatorParams::random(&small_cfg(), &mut rng).unwrap();
            let mk = |rng: &mut ChaCha8Rng| {
                seq(&(0..5).map(|_| rng.random_range(0..3)).collect::<Vec<_>>())
            };
            let batch = LabeledBatch::new(
                vec![mk(&mut rng), mk(&mut rng)],
                vec![mk(&mut rng), mk(&mut rng)],
            )
            .unwrap();
            let out = minimax_loss(&p, &batch, 1.0, 1.0).unwrap();
            let theta = p.flatten();
            let err = grad_check(
                |t| minimax_loss(&p.with_flat(t), &batch, 1.0, 1.0).unwrap().loss,
                &theta,
                &out.grad.flatten(),
            )
            .unwrap();
            assert!(err < 1e-4, "seed {s}: {err}");
        }
    }

    #[test]
    fn train_step_with_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DiscriminatorConfig::new(5);
        let d = DiscriminatorParams::random(&cfg, &mut rng).unwrap();
        let g = GeneratorParams::random(&crate::generator::GeneratorConfig::new(5), &mut rng)
            .unwrap();
        let experts: Vec<_> = (0..30)
            .map(|_| generator::sample_sequence(&g, 20, &mut rng).unwrap())
            .collect();
        let (next, report) = train_step(&d, &g, &experts, 25, 0.0, 1.0, 1.0, &mut rng).unwrap();
        assert_eq!(next, d);
        assert_eq!(report.positives, 25);
        assert_eq!(report.negatives, 25);
        assert!(train_step(&d, &g, &experts[..10], 25, 0.1, 1.0, 1.0, &mut rng).is_err());
    }
}
