use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtgan::checkpoint::Checkpoint;
use mtgan::config::ExperimentConfig;
use mtgan::env;
use mtgan::error::Error;
use mtgan::generator;
use mtgan::gradcheck::{self, Fault};
use mtgan::trainer;

#[derive(Parser, Debug)]
#[command(name = "mtgan", version, about = "Lifelong adversarial imitation of expert controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Increase log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; every artifact is written under it.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a task family and write metrics.csv and checkpoint.bin.
    Train(Common),
    /// Evaluate the greedy policies stored in a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Transfer vs random initialization on the target family.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding a trained shared basis.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Copy the metrics CSV stored in a checkpoint.
    ExportMetrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Maps to the process exit code: usage problems are 2, run failures 1.
enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Input(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Run(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    if !c.config.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", c.config.display())));
    }
    Ok(ExperimentConfig::load(&c.config)?.with_seed(c.seed))
}

fn prepare_out(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_train(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    prepare_out(&c.out)?;
    let tasks = cfg.task_family()?;
    info!("training {} {} tasks, seed {}", tasks.len(), cfg.environments.kind, cfg.trainer.seed);
    let out = trainer::run_full(&cfg.trainer, &tasks)?;
    let csv = out.metrics.to_csv();
    write(&c.out.join("metrics.csv"), &csv)?;
    let ck = Checkpoint {
        config: cfg.trainer.clone(),
        specs: tasks,
        generators: out.generators,
        discriminators: out.discriminators,
        memory: Some(out.memory),
        metrics_csv: csv,
    };
    ck.save(&c.out.join("checkpoint.bin"))?;
    if !out.metrics.aborted_tasks.is_empty() {
        return Err(Failure::Run(format!("aborted tasks: {:?}", out.metrics.aborted_tasks)));
    }
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: &Path) -> CmdResult {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(checkpoint)?;
    prepare_out(&c.out)?;
    let traj_dir = c.out.join("trajectories");
    prepare_out(&traj_dir)?;
    let t = &cfg.trainer;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut csv = String::from("task,avg_return,avg_discounted_return,uniform_return\n");
    let mut failed = false;
    for (id, (spec, gen)) in ck.specs.iter().zip(&ck.generators).enumerate() {
        let Some(gen) = gen else {
            warn!("task {id} has no trained generator");
            failed = true;
            continue;
        };
        let (avg, disc) = trainer::evaluate(gen, spec, t.eval_episodes, t.eval_horizon, t.gamma, &mut rng)?;
        let uniform = trainer::baseline_uniform(spec, t.eval_episodes, t.eval_horizon, t.gamma, &mut rng)?;
        csv.push_str(&format!("{id},{avg:.8e},{disc:.8e},{uniform:.8e}\n"));
        let tokens = generator::greedy_tokens(gen, t.eval_horizon);
        let x0 = spec.sample_initial_state(&mut rng);
        let traj = env::rollout_tokens(spec, &x0, &tokens)?;
        let path = traj_dir.join(format!("task_{id}.csv"));
        let file = fs::File::create(&path)
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
        env::write_trajectory_csv(&mut BufWriter::new(file), spec, &traj)?;
    }
    write(&c.out.join("eval.csv"), &csv)?;
    if failed {
        return Err(Failure::Run("some tasks had no generator to evaluate".into()));
    }
    Ok(())
}

fn cmd_transfer(c: &Common, checkpoint: &Path) -> CmdResult {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(checkpoint)?;
    let memory = match ck.memory {
        Some(m) if !m.basis.is_empty() => m,
        _ => return Err(Failure::Usage(format!("{} holds no trained basis", checkpoint.display()))),
    };
    prepare_out(&c.out)?;
    let targets = cfg.transfer.family().build()?;
    let target_cfg = cfg.transfer.target_trainer(&cfg.trainer);
    if memory.basis.d_core() != target_cfg.core_len() {
        return Err(Failure::Usage(format!(
            "basis dimension {} does not match generator core size {}",
            memory.basis.d_core(),
            target_cfg.core_len()
        )));
    }
    let seeds = cfg.transfer.seeds(cfg.trainer.seed);
    info!("transfer to {} {} tasks over {} seeds", targets.len(), cfg.transfer.kind, seeds.len());
    let rows = trainer::transfer_experiment(&target_cfg, &memory, &targets, &seeds)?;
    write(&c.out.join("comparison.csv"), &trainer::comparison_csv(&rows))
}

fn cmd_gradcheck(seeds: usize, inject_fault: bool) -> CmdResult {
    let fault = if inject_fault { Fault::GeneratorBackward } else { Fault::None };
    let reports = gradcheck::run_suite(seeds, fault)?;
    let mut ok = true;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} max_rel_error={:.3e} seeds={} {verdict}", r.name, r.max_rel_error, r.seeds);
        ok &= r.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Run(format!("relative error above {:e}", gradcheck::TOLERANCE)))
    }
}

fn cmd_export(checkpoint: &Path, out: &Path) -> CmdResult {
    let ck = load_checkpoint(checkpoint)?;
    prepare_out(out)?;
    write(&out.join("metrics.csv"), &ck.metrics_csv)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Transfer { common, checkpoint } => cmd_transfer(common, checkpoint),
        Command::Gradcheck { seeds, inject_fault } => cmd_gradcheck(*seeds, *inject_fault),
        Command::ExportMetrics { checkpoint, out } => cmd_export(checkpoint, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
