use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtgan::checkpoint::Checkpoint;
use mtgan::env::{PlantKind, PlantSpec};
use mtgan::trainer::TrainerConfig;
use tempfile::TempDir;

const TINY: &str = r#"{
  "batch_size": 4, "n_rollouts": 2, "seq_len": 6, "eval_horizon": 20, "eval_episodes": 2,
  "iterations": 4, "pretrain_epochs": 1, "disc_pretrain_steps": 2, "expert_episodes": 6,
  "train_windows": 16, "heldout_windows": 8, "probe_iterations": 1, "stats_samples": 4,
  "gen_embed_dim": 3, "gen_hidden": 4, "disc_embed_dim": 3, "disc_kernels": 2, "seed": 3,
  "environments": {"kind": "SMSM", "n_tasks": 3, "seed": 1},
  "transfer": {"kind": "PAC", "n_tasks": 1, "seed": 2, "paired_seeds": 5, "iterations": 2}
}"#;

fn mtgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtgan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(dir: &Path, cfg: &str, out: &str, extra: &[&str]) -> Output {
    let out = dir.join(out);
    let mut args = vec!["train", "--config", cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mtgan(&args)
}

#[test]
fn missing_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    let o = mtgan(&["train", "--config", "/nonexistent/cfg.json", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bad_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"gamma\": 0.9,\n  oops\n}");
    let o = train(dir.path(), &cfg, "o", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), r#"{"gamma": 1.5}"#);
    let o = train(dir.path(), &cfg, "o", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&mtgan(&[])), 2);
    assert_eq!(code(&mtgan(&["train"])), 2);
    assert_eq!(code(&mtgan(&["frobnicate"])), 2);
}

#[test]
fn train_eval_export_transfer() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = train(dir.path(), &cfg, "a", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("# seed=3\n"));
    assert_eq!(metrics.lines().count(), 2 + 3 * (4 + 2));

    assert_eq!(code(&train(dir.path(), &cfg, "b", &[])), 0);
    assert_eq!(metrics, fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap());

    assert_eq!(code(&train(dir.path(), &cfg, "c", &["--seed", "11"])), 0);
    let reseeded = fs::read_to_string(dir.path().join("c/metrics.csv")).unwrap();
    assert!(reseeded.starts_with("# seed=11\n"));
    assert_ne!(metrics, reseeded);

    let ck = dir.path().join("a/checkpoint.bin");
    let ck = ck.to_str().unwrap();
    let exp = dir.path().join("exported");
    let o = mtgan(&["export-metrics", "--checkpoint", ck, "--out", exp.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metrics, fs::read_to_string(exp.join("metrics.csv")).unwrap());

    let ev = dir.path().join("eval");
    let o = mtgan(&["eval", "--config", &cfg, "--checkpoint", ck, "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(ev.join("eval.csv")).unwrap().lines().count(), 4);
    assert!(ev.join("trajectories/task_2.csv").exists());

    let tr = dir.path().join("transfer");
    let o = mtgan(&["transfer", "--config", &cfg, "--checkpoint", ck, "--out", tr.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tr.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "seed,init,jumpstart_return,final_return");
    assert_eq!(csv.lines().count(), 11);

    // a flipped payload byte is caught by the digest
    let mut bytes = fs::read(ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, bytes).unwrap();
    let o = mtgan(&["transfer", "--config", &cfg, "--checkpoint", bad.to_str().unwrap(), "--out", tr.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("integrity"), "{}", stderr(&o));
}

#[test]
fn transfer_without_basis_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let ck = Checkpoint {
        config: TrainerConfig::default(),
        specs: vec![PlantSpec::nominal(PlantKind::Smsm)],
        generators: vec![None],
        discriminators: vec![None],
        memory: None,
        metrics_csv: String::new(),
    };
    let path = dir.path().join("empty.bin");
    ck.save(&path).unwrap();
    let out = dir.path().join("o");
    let o = mtgan(&["transfer", "--config", &cfg, "--checkpoint", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("basis"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = mtgan(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let o = mtgan(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.ends_with(" ok")));
    assert_eq!(code(&mtgan(&["gradcheck", "--inject-fault"])), 1);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = mtgan::config::ExperimentConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        cfg.task_family().unwrap();
        n += 1;
    }
    assert!(n >= 3);
}
