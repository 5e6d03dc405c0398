//! The alternating adversarial training loop over a stream of tasks, with
//! shared-memory updates between tasks and greedy-policy evaluation.

use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{self, DiscriminatorConfig, DiscriminatorParams};
use crate::env::{self, PlantSpec};
use crate::error::{input_err, Error, Result};
use crate::generator::{
    self, GeneratorConfig, GeneratorParams, MleSchedule, PolicyGradientOptions, TokenSequence,
};
use crate::memory::{self, LifelongConfig, SharedMemory, TaskCode, TaskStats};
use crate::params::{clip_norm, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub g_steps: usize,
    pub d_steps: usize,
    pub n_rollouts: usize,
    /// Length of the token windows the adversarial game is played on.
    pub seq_len: usize,
    pub eval_horizon: usize,
    pub eval_episodes: usize,
    pub iterations: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub disc_pretrain_steps: usize,
    /// Ceiling on expert trajectories per task.
    pub expert_episodes: usize,
    pub train_windows: usize,
    pub heldout_windows: usize,
    pub clip_norm: f64,
    pub probe_iterations: usize,
    pub stats_samples: usize,
    /// Weight on `log(1 − D)` of generated sequences in the discriminator objective.
    pub minimax_mu: f64,
    /// Weight on `log D` of expert sequences.
    pub minimax_lambda: f64,
    pub gen_embed_dim: usize,
    pub gen_hidden: usize,
    pub disc_embed_dim: usize,
    pub disc_kernels: usize,
    pub seed: u64,
    pub lifelong: LifelongConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 25,
            gen_lr: 0.1,
            disc_lr: 0.1,
            g_steps: 1,
            d_steps: 1,
            n_rollouts: 16,
            seq_len: 20,
            eval_horizon: 150,
            eval_episodes: 10,
            iterations: 200,
            pretrain_epochs: 1,
            pretrain_lr: 0.01,
            disc_pretrain_steps: 300,
            expert_episodes: 80,
            train_windows: 400,
            heldout_windows: 200,
            clip_norm: 5.0,
            probe_iterations: 5,
            stats_samples: 100,
            minimax_mu: 1.0,
            minimax_lambda: 1.0,
            gen_embed_dim: 8,
            gen_hidden: 32,
            disc_embed_dim: 8,
            disc_kernels: 8,
            seed: 0,
            lifelong: LifelongConfig::default(),
        }
    }
}

impl TrainerConfig {
    /// Check every field; the error names the first offending one.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("`{field}` {why}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", &format!("must lie in [0, 1], got {}", self.gamma));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("g_steps", self.g_steps),
            ("d_steps", self.d_steps),
            ("n_rollouts", self.n_rollouts),
            ("seq_len", self.seq_len),
            ("eval_horizon", self.eval_horizon),
            ("eval_episodes", self.eval_episodes),
            ("expert_episodes", self.expert_episodes),
            ("train_windows", self.train_windows),
            ("heldout_windows", self.heldout_windows),
            ("stats_samples", self.stats_samples),
            ("gen_embed_dim", self.gen_embed_dim),
            ("gen_hidden", self.gen_hidden),
            ("disc_embed_dim", self.disc_embed_dim),
            ("disc_kernels", self.disc_kernels),
        ] {
            if v == 0 {
                return bad(name, "must be at least 1");
            }
        }
        for (name, v) in [
            ("gen_lr", self.gen_lr),
            ("disc_lr", self.disc_lr),
            ("pretrain_lr", self.pretrain_lr),
            ("clip_norm", self.clip_norm),
            ("minimax_mu", self.minimax_mu),
            ("minimax_lambda", self.minimax_lambda),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, &format!("must be positive, got {v}"));
            }
        }
        if self.expert_episodes < 2 {
            return bad("expert_episodes", "must be at least 2 (one is held out)");
        }
        if self.seq_len > self.eval_horizon {
            return bad("seq_len", "must not exceed eval_horizon");
        }
        if self.seq_len < 4 {
            return bad("seq_len", "must be at least the widest discriminator window (4)");
        }
        self.lifelong
            .validate()
            .map_err(|e| Error::Config(format!("`lifelong`: {e}")))
    }

    fn gen_config(&self, vocab: usize) -> GeneratorConfig {
        GeneratorConfig {
            vocab,
            embed_dim: self.gen_embed_dim,
            hidden: self.gen_hidden,
        }
    }

    fn disc_config(&self, vocab: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab,
            embed_dim: self.disc_embed_dim,
            windows: vec![2, 3, 4],
            kernels_per_window: self.disc_kernels,
        }
    }

    /// Length of the shared core, which depends only on the generator sizes.
    pub fn core_len(&self) -> usize {
        let h = self.gen_hidden;
        4 * h * (self.gen_embed_dim + h + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Adversarial,
    Eval,
    Aborted,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Adversarial => "adversarial",
            Phase::Eval => "eval",
            Phase::Aborted => "aborted",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub task_id: usize,
    pub phase: Phase,
    /// `−mean log D` over the sampled batch.
    pub gen_loss: f64,
    /// Negated discriminator objective on its last batch.
    pub disc_loss: f64,
    /// Held-out discriminator accuracy.
    pub disc_acc: f64,
    pub avg_return: f64,
    pub error_rate: f64,
}

pub const METRICS_HEADER: &str = "iter,task_id,phase,gen_loss,disc_loss,disc_acc,avg_return,error_rate";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    /// Discriminator batches drawn during the run.
    pub d_batches: usize,
    /// Batches whose positive and negative counts differed.
    pub balance_violations: usize,
    /// Lifelong objective after each half-sweep, one list per absorbed task.
    pub objective_traces: Vec<Vec<f64>>,
    pub aborted_tasks: Vec<usize>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "{METRICS_HEADER}");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
                r.iter,
                r.task_id,
                r.phase,
                r.gen_loss,
                r.disc_loss,
                r.disc_acc,
                r.avg_return,
                r.error_rate
            );
        }
        out
    }

    pub fn task_records(&self, task_id: usize) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(move |r| r.task_id == task_id)
    }

    fn audit(&mut self, positives: usize, negatives: usize) {
        self.d_batches += 1;
        if positives != negatives {
            self.balance_violations += 1;
        }
    }
}

/// `Σ γ^i r_i`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    for r in rewards.iter().rev() {
        acc = r + gamma * acc;
    }
    acc
}

/// Regret against the expert normalized by the expert's return magnitude,
/// clamped to `[0, 1]`: matching the expert gives 0, twice its cost gives 1.
pub fn error_rate(policy_return: f64, expert_return: f64) -> f64 {
    if expert_return == 0.0 {
        if policy_return == 0.0 {
            return 0.0;
        }
        log::warn!("expert return is 0 but policy return is {policy_return}; error rate set to 1");
        return 1.0;
    }
    ((expert_return - policy_return) / expert_return.abs()).clamp(0.0, 1.0)
}

/// Mean undiscounted and discounted return of the greedy token sequence,
/// replayed open loop from initial states drawn with `rng`.
pub fn evaluate<R: Rng + ?Sized>(
    gen: &GeneratorParams,
    spec: &PlantSpec,
    episodes: usize,
    horizon: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return input_err("evaluation needs at least one episode");
    }
    if gen.vocab() != spec.vocab() {
        return input_err(format!(
            "generator vocabulary {} does not match plant vocabulary {}",
            gen.vocab(),
            spec.vocab()
        ));
    }
    let tokens = generator::greedy_tokens(gen, horizon);
    let (mut total, mut disc) = (0.0, 0.0);
    for _ in 0..episodes {
        let x0 = spec.sample_initial_state(rng);
        let traj = env::rollout_tokens(spec, &x0, &tokens)?;
        total += traj.total_reward();
        disc += discounted_return(&traj.rewards, gamma);
    }
    Ok((total / episodes as f64, disc / episodes as f64))
}

/// Mean return of uniformly random tokens; initial state then tokens are
/// drawn per episode from `rng`.
pub fn baseline_uniform<R: Rng + ?Sized>(
    spec: &PlantSpec,
    episodes: usize,
    horizon: usize,
    _gamma: f64,
    rng: &mut R,
) -> Result<f64> {
    if episodes == 0 {
        return input_err("evaluation needs at least one episode");
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let x0 = spec.sample_initial_state(rng);
        let tokens: Vec<usize> = (0..horizon).map(|_| rng.random_range(0..spec.vocab())).collect();
        total += env::rollout_tokens(spec, &x0, &tokens)?.total_reward();
    }
    Ok(total / episodes as f64)
}

/// Mean closed-loop expert return from initial states drawn with `rng`.
pub fn expert_return<R: Rng + ?Sized>(
    spec: &PlantSpec,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    let ctrl = env::expert_controller(spec)?;
    let mut total = 0.0;
    for _ in 0..episodes {
        let x0 = spec.sample_initial_state(rng);
        let traj = env::rollout_policy(spec, &x0, horizon, |_, x| ctrl.token(spec, x))?;
        total += traj.total_reward();
    }
    Ok(total / episodes as f64)
}

/// How a task's generator core is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Random core.
    Random,
    /// Core from the shared basis via a probe run; falls back to random on
    /// an empty basis.
    Transfer,
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub task_id: usize,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub stats: TaskStats,
    /// Code found by `transfer_init`, if the task was transfer-initialized.
    pub transfer_code: Option<TaskCode>,
    pub expert_return: f64,
    pub final_return: f64,
    /// Held-out discriminator accuracy right after pretraining.
    pub pretrain_acc: f64,
}

/// Token windows cut uniformly at random from expert episodes.
fn sample_windows<R: Rng + ?Sized>(
    episodes: &[TokenSequence],
    n: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    (0..n)
        .map(|_| {
            let ep = &episodes[rng.random_range(0..episodes.len())];
            let start = rng.random_range(0..=ep.len() - len);
            ep.window(start, len)
        })
        .collect()
}

struct TaskData {
    train: Vec<TokenSequence>,
    heldout: Vec<TokenSequence>,
}

fn expert_data<R: Rng + ?Sized>(cfg: &TrainerConfig, spec: &PlantSpec, rng: &mut R) -> Result<TaskData> {
    let ctrl = env::expert_controller(spec)?;
    let episodes: Vec<TokenSequence> = (0..cfg.expert_episodes)
        .map(|_| env::expert_rollout(spec, &ctrl, cfg.eval_horizon, rng))
        .collect::<Result<_>>()?;
    let n_held = (cfg.expert_episodes / 5).max(1);
    let (train_eps, held_eps) = episodes.split_at(cfg.expert_episodes - n_held);
    Ok(TaskData {
        train: sample_windows(train_eps, cfg.train_windows, cfg.seq_len, rng)?,
        heldout: sample_windows(held_eps, cfg.heldout_windows, cfg.seq_len, rng)?,
    })
}

fn heldout_accuracy<R: Rng + ?Sized>(
    cfg: &TrainerConfig,
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    data: &TaskData,
    rng: &mut R,
) -> Result<f64> {
    let negatives: Vec<TokenSequence> = (0..data.heldout.len())
        .map(|_| generator::sample_sequence(gen, cfg.seq_len, rng))
        .collect::<Result<_>>()?;
    discriminator::accuracy(disc, &data.heldout, &negatives)
}

fn d_step<R: Rng + ?Sized>(
    cfg: &TrainerConfig,
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    data: &TaskData,
    metrics: &mut RunMetrics,
    rng: &mut R,
) -> Result<(DiscriminatorParams, f64)> {
    let batch = cfg.batch_size.min(data.train.len());
    let (next, report) = discriminator::train_step(
        disc,
        gen,
        &data.train,
        batch,
        cfg.disc_lr,
        cfg.minimax_mu,
        cfg.minimax_lambda,
        rng,
    )?;
    metrics.audit(report.positives, report.negatives);
    Ok((next, -report.loss))
}

/// One g-step: sample a batch, estimate the policy gradient, clip, ascend.
/// Returns the new generator and `−mean log D` of the sampled batch.
fn g_step<R: RngCore + ?Sized>(
    cfg: &TrainerConfig,
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    rng: &mut R,
) -> Result<(GeneratorParams, f64)> {
    let batch: Vec<TokenSequence> = (0..cfg.batch_size)
        .map(|_| generator::sample_sequence(gen, cfg.seq_len, rng))
        .collect::<Result<_>>()?;
    let opts = PolicyGradientOptions {
        n_rollouts: cfg.n_rollouts,
        baseline: None,
    };
    let mut pg = generator::policy_gradient(gen, disc, &batch, &opts, rng)?;
    clip_norm(&mut pg.grad, cfg.clip_norm);
    let next = generator::adversarial_update(gen, &pg.grad, cfg.gen_lr)?;
    Ok((next, -pg.mean_log_terminal))
}

fn check_finite(gen: &GeneratorParams, disc: &DiscriminatorParams) -> Result<()> {
    if !gen.all_finite() || !disc.all_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(())
}

fn head_seed(seed: u64, vocab: usize) -> u64 {
    seed ^ (vocab as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Train one task from scratch (or from the basis) and return its artifacts.
/// Metric rows are appended to `metrics` as they are produced.
pub fn train_task(
    cfg: &TrainerConfig,
    spec: &PlantSpec,
    task_id: usize,
    task_seed: u64,
    memory: Option<&SharedMemory>,
    init: InitMode,
    metrics: &mut RunMetrics,
) -> Result<TaskOutcome> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    let eval_seed = rng.next_u64();
    let eval = |gen: &GeneratorParams| -> Result<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(eval_seed);
        Ok(evaluate(gen, spec, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma, &mut r)?.0)
    };
    let expert_ret = {
        let mut r = ChaCha8Rng::seed_from_u64(eval_seed);
        expert_return(spec, cfg.eval_episodes, cfg.eval_horizon, &mut r)?
    };
    let data = expert_data(cfg, spec, &mut rng)?;
    let vocab = spec.vocab();

    // heads share one draw per (run seed, vocabulary) so that cores trained on
    // different tasks of a domain face the same initial heads
    let mut gen = GeneratorParams::zeros(&cfg.gen_config(vocab))?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(head_seed(cfg.seed, vocab));
    gen.randomize_heads(&mut head_rng);
    gen.randomize_core(&mut rng);
    let basis = memory.map(|m| &m.basis).filter(|b| !b.is_empty());
    let transfer = init == InitMode::Transfer && basis.is_some();
    if transfer {
        // the probe starts from the basis reconstruction of the mean code
        let mem = memory.expect("basis implies memory");
        let codes = mem.codes();
        let k = mem.basis.k_latent();
        let mut mean = vec![0.0; k];
        for c in &codes {
            for (m, v) in mean.iter_mut().zip(&c.s) {
                *m += v / codes.len() as f64;
            }
        }
        let code = TaskCode {
            task_id,
            s: mean,
            degenerate: false,
        };
        gen.set_core(&memory::reconstruct_policy(&mem.basis, &code)?)?;
    }

    let schedule = MleSchedule {
        epochs: cfg.pretrain_epochs,
        lr: cfg.pretrain_lr,
        batch_size: cfg.batch_size,
        clip: Some(cfg.clip_norm),
    };
    gen = generator::mle_pretrain(&gen, &data.train, &schedule, &mut rng)?;
    let mut disc = DiscriminatorParams::random(&cfg.disc_config(vocab), &mut rng)?;
    let mut disc_loss = f64::NAN;
    for _ in 0..cfg.disc_pretrain_steps {
        let (d, l) = d_step(cfg, &gen, &disc, &data, metrics, &mut rng)?;
        disc = d;
        disc_loss = l;
    }
    check_finite(&gen, &disc)?;

    let mut transfer_code = None;
    if transfer {
        let mem = memory.expect("basis implies memory");
        let mut probe = gen.clone();
        let mut probe_disc = disc.clone();
        for _ in 0..cfg.probe_iterations {
            probe = g_step(cfg, &probe, &probe_disc, &mut rng)?.0;
            probe_disc = d_step(cfg, &probe, &probe_disc, &data, metrics, &mut rng)?.0;
        }
        let stats = memory::estimate_task_stats(
            task_id,
            &probe,
            &probe_disc,
            cfg.seq_len,
            cfg.stats_samples,
            &mut rng,
        )?
        .normalized();
        let init = memory::transfer_init(&mem.basis, &stats, cfg.lifelong.mu_sparse, &cfg.lifelong)?;
        gen.set_core(&init.core)?;
        transfer_code = init.code;
    }

    let pretrain_acc = heldout_accuracy(cfg, &gen, &disc, &data, &mut rng)?;
    let ret = eval(&gen)?;
    let gen_loss = sampled_gen_loss(cfg, &gen, &disc, &mut rng)?;
    metrics.records.push(MetricRecord {
        iter: 0,
        task_id,
        phase: Phase::Pretrain,
        gen_loss,
        disc_loss,
        disc_acc: pretrain_acc,
        avg_return: ret,
        error_rate: error_rate(ret, expert_ret),
    });

    let mut acc = pretrain_acc;
    let mut ret = ret;
    for it in 1..=cfg.iterations {
        let mut gen_loss = f64::NAN;
        for _ in 0..cfg.g_steps {
            let (g, l) = g_step(cfg, &gen, &disc, &mut rng)?;
            gen = g;
            gen_loss = l;
        }
        for _ in 0..cfg.d_steps {
            let (d, l) = d_step(cfg, &gen, &disc, &data, metrics, &mut rng)?;
            disc = d;
            disc_loss = l;
        }
        check_finite(&gen, &disc)?;
        acc = heldout_accuracy(cfg, &gen, &disc, &data, &mut rng)?;
        ret = eval(&gen)?;
        metrics.records.push(MetricRecord {
            iter: it,
            task_id,
            phase: Phase::Adversarial,
            gen_loss,
            disc_loss,
            disc_acc: acc,
            avg_return: ret,
            error_rate: error_rate(ret, expert_ret),
        });
    }

    let stats = memory::estimate_task_stats(
        task_id,
        &gen,
        &disc,
        cfg.seq_len,
        cfg.stats_samples,
        &mut rng,
    )?
    .normalized();
    let gen_loss = sampled_gen_loss(cfg, &gen, &disc, &mut rng)?;
    metrics.records.push(MetricRecord {
        iter: cfg.iterations,
        task_id,
        phase: Phase::Eval,
        gen_loss,
        disc_loss,
        disc_acc: acc,
        avg_return: ret,
        error_rate: error_rate(ret, expert_ret),
    });
    Ok(TaskOutcome {
        task_id,
        generator: gen,
        discriminator: disc,
        stats,
        transfer_code,
        expert_return: expert_ret,
        final_return: ret,
        pretrain_acc,
    })
}

/// `−mean log D` over a fresh batch of sampled sequences.
fn sampled_gen_loss<R: Rng + ?Sized>(
    cfg: &TrainerConfig,
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..cfg.batch_size {
        let s = generator::sample_sequence(gen, cfg.seq_len, rng)?;
        total += discriminator::forward(disc, s.tokens())?
            .max(discriminator::PROB_CLAMP)
            .ln();
    }
    Ok(-total / cfg.batch_size as f64)
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    /// One entry per task; `None` for aborted tasks.
    pub generators: Vec<Option<GeneratorParams>>,
    pub discriminators: Vec<Option<DiscriminatorParams>>,
    pub memory: SharedMemory,
}

fn aborts_task(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. } | Error::Numeric(_) | Error::Solver(_))
}

/// Algorithm loop over a task stream. Every task after the first starts
/// from the shared basis; divergent tasks are recorded and skipped.
pub fn run(config: &TrainerConfig, tasks: &[PlantSpec]) -> Result<RunMetrics> {
    Ok(run_full(config, tasks)?.metrics)
}

pub fn run_full(config: &TrainerConfig, tasks: &[PlantSpec]) -> Result<RunOutput> {
    config.validate()?;
    if tasks.is_empty() {
        return input_err("run needs at least one task");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut memory = SharedMemory::new(config.core_len(), config.lifelong.clone())?;
    let mut metrics = RunMetrics {
        seed: config.seed,
        ..RunMetrics::default()
    };
    let mut generators = Vec::with_capacity(tasks.len());
    let mut discriminators = Vec::with_capacity(tasks.len());
    for (task_id, spec) in tasks.iter().enumerate() {
        let task_seed = rng.next_u64();
        log::info!("task {task_id} ({}): start", spec.kind);
        let outcome = train_task(
            config,
            spec,
            task_id,
            task_seed,
            Some(&memory),
            InitMode::Transfer,
            &mut metrics,
        )
        .and_then(|o| {
            let trace = memory.absorb(o.stats.clone())?;
            Ok((o, trace))
        });
        match outcome {
            Ok((o, trace)) => {
                log::info!(
                    "task {task_id}: final return {:.4} (expert {:.4})",
                    o.final_return,
                    o.expert_return
                );
                metrics.objective_traces.push(trace);
                generators.push(Some(o.generator));
                discriminators.push(Some(o.discriminator));
            }
            Err(e) if aborts_task(&e) => {
                log::warn!("task {task_id} aborted: {e}");
                let iter = metrics
                    .task_records(task_id)
                    .map(|r| r.iter)
                    .max()
                    .unwrap_or(0);
                metrics.records.push(MetricRecord {
                    iter,
                    task_id,
                    phase: Phase::Aborted,
                    gen_loss: f64::NAN,
                    disc_loss: f64::NAN,
                    disc_acc: f64::NAN,
                    avg_return: f64::NAN,
                    error_rate: 1.0,
                });
                metrics.aborted_tasks.push(task_id);
                generators.push(None);
                discriminators.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RunOutput {
        metrics,
        generators,
        discriminators,
        memory,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub init: InitMode,
    /// Mean evaluation return over the first (up to) ten adversarial iterations.
    pub jumpstart_return: f64,
    pub final_return: f64,
}

pub const COMPARISON_HEADER: &str = "seed,init,jumpstart_return,final_return";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let init = match r.init {
            InitMode::Transfer => "transfer",
            InitMode::Random => "random",
        };
        let _ = writeln!(
            out,
            "{},{},{:.8e},{:.8e}",
            r.seed, init, r.jumpstart_return, r.final_return
        );
    }
    out
}

/// Train each target task twice on the same seed, once from the basis and
/// once from a random core, and report early and final returns.
pub fn transfer_experiment(
    config: &TrainerConfig,
    memory: &SharedMemory,
    targets: &[PlantSpec],
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>> {
    config.validate()?;
    if targets.is_empty() || seeds.is_empty() {
        return input_err("transfer experiment needs targets and seeds");
    }
    if memory.basis.is_empty() {
        return input_err("transfer experiment needs a trained basis");
    }
    if memory.basis.d_core() != config.core_len() {
        return input_err(format!(
            "basis has {} rows but the generator core has {}",
            memory.basis.d_core(),
            config.core_len()
        ));
    }
    let mut rows = Vec::with_capacity(2 * seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let spec = &targets[i % targets.len()];
        for init in [InitMode::Transfer, InitMode::Random] {
            let mut metrics = RunMetrics {
                seed,
                ..RunMetrics::default()
            };
            let o = train_task(config, spec, i, seed, Some(memory), init, &mut metrics)?;
            let early: Vec<f64> = metrics
                .records
                .iter()
                .filter(|r| r.phase == Phase::Adversarial)
                .take(10)
                .map(|r| r.avg_return)
                .collect();
            let jumpstart = if early.is_empty() {
                o.final_return
            } else {
                early.iter().sum::<f64>() / early.len() as f64
            };
            rows.push(ComparisonRow {
                seed,
                init,
                jumpstart_return: jumpstart,
                final_return: o.final_return,
            });
        }
    }
    Ok(rows)
}
