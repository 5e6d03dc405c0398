//! Finite-difference verification of every hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::discriminator::{self, DiscriminatorConfig, DiscriminatorParams, LabeledBatch};
use crate::error::Result;
use crate::generator::{self, GeneratorConfig, GeneratorParams, Source, TokenSequence};
use crate::params::ParamSet;
use crate::tensor::{self, grad_check, LstmWeights, Matrix};

pub const TOLERANCE: f64 = 1e-4;

/// Deliberate corruption of one analytic gradient, to exercise the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Scale the generator log-likelihood gradient by 1.01.
    GeneratorBackward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub seeds: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, normal_vec(rng, r * c)).expect("shape")
}

fn check_affine(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (3, 4);
    let x = normal_vec(rng, n);
    let w = normal_matrix(rng, m, n);
    let b = normal_vec(rng, m);
    let u = normal_vec(rng, m);
    let g = tensor::affine_backward(&x, &w, &u);
    let mut theta = x.clone();
    theta.extend_from_slice(w.data());
    theta.extend_from_slice(&b);
    let mut analytic = g.dx.clone();
    analytic.extend_from_slice(g.dw.data());
    analytic.extend_from_slice(&g.db);
    grad_check(
        |t| {
            let w = Matrix::from_vec(m, n, t[n..n + m * n].to_vec()).unwrap();
            let y = tensor::affine(&t[..n], &w, &t[n + m * n..]).unwrap();
            tensor::dot(&y, &u)
        },
        &theta,
        &analytic,
    )
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let z = normal_vec(rng, 5);
    let u = normal_vec(rng, 5);
    let p = tensor::softmax(&z)?;
    let analytic = tensor::softmax_backward(&p, &u);
    grad_check(|t| tensor::dot(&tensor::softmax(t).unwrap(), &u), &z, &analytic)
}

fn check_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let z = normal_vec(rng, 6);
    let analytic: Vec<f64> = z
        .iter()
        .map(|&v| {
            let s = tensor::sigmoid(v);
            s * (1.0 - s)
        })
        .collect();
    grad_check(|t| t.iter().map(|&v| tensor::sigmoid(v)).sum(), &z, &analytic)
}

fn check_lstm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (e, h) = (3, 4);
    let mut w = LstmWeights::zeros(e, h);
    w.w_x = normal_matrix(rng, 4 * h, e);
    w.w_h = normal_matrix(rng, 4 * h, h);
    w.b = normal_vec(rng, 4 * h);
    let x = normal_vec(rng, e);
    let hp = normal_vec(rng, h);
    let cp = normal_vec(rng, h);
    let uh = normal_vec(rng, h);
    let uc = normal_vec(rng, h);
    let (_, _, cache) = tensor::lstm_cell(&x, &hp, &cp, &w)?;
    let mut gw = LstmWeights::zeros(e, h);
    let (dx, dh, dc) = tensor::lstm_cell_backward(&w, &cache, &uh, &uc, &mut gw);
    let nw = w.w_x.data().len() + w.w_h.data().len() + w.b.len();
    let mut theta = [x.clone(), hp.clone(), cp.clone()].concat();
    theta.extend_from_slice(w.w_x.data());
    theta.extend_from_slice(w.w_h.data());
    theta.extend_from_slice(&w.b);
    let mut analytic = [dx, dh, dc].concat();
    analytic.extend_from_slice(gw.w_x.data());
    analytic.extend_from_slice(gw.w_h.data());
    analytic.extend_from_slice(&gw.b);
    debug_assert_eq!(theta.len(), e + 2 * h + nw);
    grad_check(
        |t| {
            let (x, rest) = t.split_at(e);
            let (hp, rest) = rest.split_at(h);
            let (cp, rest) = rest.split_at(h);
            let (wx, rest) = rest.split_at(4 * h * e);
            let (wh, b) = rest.split_at(4 * h * h);
            let w = LstmWeights {
                w_x: Matrix::from_vec(4 * h, e, wx.to_vec()).unwrap(),
                w_h: Matrix::from_vec(4 * h, h, wh.to_vec()).unwrap(),
                b: b.to_vec(),
            };
            let (hn, cn, _) = tensor::lstm_cell(x, hp, cp, &w).unwrap();
            tensor::dot(&hn, &uh) + tensor::dot(&cn, &uc)
        },
        &theta,
        &analytic,
    )
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (len, k, width) = (7, 3, 3);
    let m = normal_matrix(rng, len, k);
    let kernel = normal_matrix(rng, width, k);
    let b: f64 = StandardNormal.sample(rng);
    let u = normal_vec(rng, len - width + 1);
    let (dm, dk, db) = tensor::conv1d_backward(&m, &kernel, &u);
    let mut theta = m.data().to_vec();
    theta.extend_from_slice(kernel.data());
    theta.push(b);
    let mut analytic = dm.data().to_vec();
    analytic.extend_from_slice(dk.data());
    analytic.push(db);
    grad_check(
        |t| {
            let m = Matrix::from_vec(len, k, t[..len * k].to_vec()).unwrap();
            let kernel = Matrix::from_vec(width, k, t[len * k..len * k + width * k].to_vec()).unwrap();
            tensor::dot(&tensor::conv1d(&m, &kernel, t[t.len() - 1]).unwrap(), &u)
        },
        &theta,
        &analytic,
    )
}

fn check_relu_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let v: Vec<f64> = normal_vec(rng, 6).iter().map(|x| x + 0.5).collect();
    let (peak, arg) = tensor::max_over_time(&v)?;
    let mut analytic = vec![0.0; v.len()];
    analytic[arg] = if peak > 0.0 { 1.0 } else { 0.0 };
    grad_check(|t| tensor::relu(tensor::max_over_time(t).unwrap().0), &v, &analytic)
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn check_generator(rng: &mut ChaCha8Rng, fault: Fault) -> Result<f64> {
    let cfg = GeneratorConfig {
        vocab: 4,
        embed_dim: 3,
        hidden: 5,
    };
    let g = GeneratorParams::random(&cfg, rng)?;
    let tokens = random_tokens(rng, 4, 6);
    let weights: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
    let (_, mut grad) = generator::weighted_log_likelihood(&g, &tokens, &weights)?;
    if fault == Fault::GeneratorBackward {
        grad.scale(1.01);
    }
    grad_check(
        |t| {
            generator::weighted_log_likelihood(&g.with_flat(t), &tokens, &weights)
                .unwrap()
                .0
        },
        &g.flatten(),
        &grad.flatten(),
    )
}

fn check_discriminator(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = DiscriminatorConfig {
        vocab: 4,
        embed_dim: 3,
        windows: vec![2, 3, 4],
        kernels_per_window: 2,
    };
    let d = DiscriminatorParams::random(&cfg, rng)?;
    let mk = |rng: &mut ChaCha8Rng, source| {
        TokenSequence::new(random_tokens(rng, 4, 6), source).unwrap()
    };
    let pos = vec![mk(rng, Source::Expert), mk(rng, Source::Expert)];
    let neg = vec![mk(rng, Source::Sampled), mk(rng, Source::Sampled)];
    let batch = LabeledBatch::new(pos, neg)?;
    let out = discriminator::minimax_loss(&d, &batch, 1.0, 1.0)?;
    grad_check(
        |t| {
            discriminator::minimax_loss(&d.with_flat(t), &batch, 1.0, 1.0)
                .unwrap()
                .loss
        },
        &d.flatten(),
        &out.grad.flatten(),
    )
}

/// Run every component over `seeds` seeds and report the worst relative
/// error of each.
pub fn run_suite(seeds: usize, fault: Fault) -> Result<Vec<ComponentReport>> {
    type Check = fn(&mut ChaCha8Rng, Fault) -> Result<f64>;
    let checks: [(&'static str, Check); 8] = [
        ("affine", |r, _| check_affine(r)),
        ("softmax", |r, _| check_softmax(r)),
        ("sigmoid", |r, _| check_sigmoid(r)),
        ("lstm_cell", |r, _| check_lstm(r)),
        ("conv1d", |r, _| check_conv(r)),
        ("relu_max_pool", |r, _| check_relu_pool(r)),
        ("generator_log_likelihood", check_generator),
        ("discriminator_minimax_loss", |r, _| check_discriminator(r)),
    ];
    let mut out = Vec::with_capacity(checks.len());
    for (i, (name, check)) in checks.iter().enumerate() {
        let mut worst = 0.0_f64;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * i as u64 + s as u64);
            worst = worst.max(check(&mut rng, fault)?);
        }
        out.push(ComponentReport {
            name,
            max_rel_error: worst,
            seeds,
        });
    }
    Ok(out)
}
