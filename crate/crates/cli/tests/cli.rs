use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sab_core::checkpoint::Checkpoint;
use sab_core::config::RunConfig;
use sab_core::data::load_dataset;
use sab_core::train::{Trainer, FINAL_CHECKPOINT};
use sab_core::Tensor;
use tempfile::TempDir;

fn sab(args: &[&str]) -> Output {
    sab_env(args, &[])
}

fn sab_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sab"));
    cmd.args(args).env_remove("SAB_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn sab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, count: usize, size: usize) -> PathBuf {
    let out = dir.join("data");
    ok(sab(&[
        "gen-data",
        "--seed",
        "1",
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--out",
        s(&out),
    ]));
    out
}

/// Small, fast configuration for smoke runs.
fn tiny_config(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.steps = steps;
    cfg.train.batch_size = 2;
    cfg.train.held_in = 2;
    cfg.train.eval_every = 2;
    cfg.train.log_every = 1;
    cfg.model.stem_channels = 4;
    cfg.model.channels = vec![4, 6, 8, 10];
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

/// Every file below `dir` as (relative path, bytes), sorted.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    files
}

/// `key=value` fields of every log line that has `key`.
fn field(log: &str, key: &str) -> Vec<String> {
    log.lines()
        .flat_map(|l| l.split_whitespace())
        .filter_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_owned))
        .collect()
}

#[test]
fn gen_data_writes_images_masks_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = gen(tmp.path(), 8, 64);
    let names: Vec<String> = tree(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("images/") && n.ends_with(".ppm")).count(), 8);
    assert_eq!(names.iter().filter(|n| n.starts_with("masks/") && n.ends_with(".pgm")).count(), 8);
    assert_eq!(names.len(), 17, "{names:?}");
    assert_eq!(load_dataset(&out).unwrap().len(), 8);
}

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(tree(&gen(a.path(), 8, 64)), tree(&gen(b.path(), 8, 64)));
}

#[test]
fn gen_data_rejects_size_not_divisible_by_32() {
    let tmp = TempDir::new().unwrap();
    let o = sab(&["gen-data", "--count", "2", "--size", "60", "--out", s(&tmp.path().join("d"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("60"));
}

#[test]
fn train_smoke_writes_checkpoints_and_finite_loss() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 32);
    let cfg = write_config(tmp.path(), &tiny_config(1));
    let out = tmp.path().join("run");
    let log = ok(sab(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]));
    let losses = field(&log, "loss");
    assert!(!losses.is_empty(), "{log}");
    assert!(losses.iter().all(|l| l.parse::<f64>().unwrap().is_finite()), "{log}");
    for f in ["final.ckpt", "best.ckpt", "last.ckpt", "train.log"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(out.join("train.log")).unwrap(), log);
    assert_eq!(Checkpoint::load(&out.join(FINAL_CHECKPOINT)).unwrap().step, 1);
}

#[test]
fn steps_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 32);
    let cfg = write_config(tmp.path(), &tiny_config(5));
    let out = tmp.path().join("run");
    ok(sab(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--steps", "2"]));
    let ck = Checkpoint::load(&out.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!((ck.step, ck.config.train.steps), (2, 2));
}

#[test]
fn resume_continues_step_counter_and_schedule() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 32);
    let cfg = tiny_config(4);

    let fresh_out = tmp.path().join("fresh");
    let fresh = ok(sab(&["train", "--config", s(&write_config(tmp.path(), &cfg)), "--data", s(&data), "--out", s(&fresh_out)]));

    // stop a second run halfway through the same schedule
    let samples = load_dataset(&data).unwrap();
    let mut half = Trainer::new(&cfg).unwrap();
    half.config.train.steps = 2;
    half.run(&samples, &mut std::io::sink(), None).unwrap();
    half.config.train.steps = 4;
    let ck = tmp.path().join("half.ckpt");
    half.checkpoint().save(&ck).unwrap();

    let resumed_out = tmp.path().join("resumed");
    let resumed = ok(sab(&["train", "--resume", s(&ck), "--data", s(&data), "--out", s(&resumed_out), "--steps", "99"]));
    assert_eq!(field(&resumed, "step").first().map(String::as_str), Some("3"));
    let lr = |log: &str| -> Vec<(String, String)> {
        log.lines()
            .filter(|l| l.contains(" lr="))
            .map(|l| (field(l, "step")[0].clone(), field(l, "lr")[0].clone()))
            .collect()
    };
    assert_eq!(lr(&resumed), lr(&fresh)[2..].to_vec());
    assert_eq!(field(&resumed, "loss"), field(&fresh, "loss")[2..].to_vec());
    let final_ck = Checkpoint::load(&resumed_out.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(final_ck.step, 4);
    assert_eq!(final_ck.config.paths.out.as_deref(), Some(resumed_out.as_path()));
}

#[test]
fn seed_env_overrides_config_seed() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 32);
    let cfg = write_config(tmp.path(), &tiny_config(1));
    let out = tmp.path().join("run");
    let log = ok(sab_env(
        &["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)],
        &[("SAB_SEED", "7")],
    ));
    assert_eq!(field(&log, "seed"), ["7"]);
    assert_eq!(Checkpoint::load(&out.join(FINAL_CHECKPOINT)).unwrap().config.seed, 7);

    let bad = sab_env(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)], &[("SAB_SEED", "x")]);
    assert!(!bad.status.success());
}

#[test]
fn training_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 32);
    let cfg = write_config(tmp.path(), &tiny_config(2));
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(sab(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]));
        let ck = Checkpoint::load(&out.join(FINAL_CHECKPOINT)).unwrap();
        (ck.params, ck.optimizer)
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn eval_prints_four_decimals_deterministically() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 32);
    let cfg = write_config(tmp.path(), &tiny_config(1));
    let out = tmp.path().join("run");
    ok(sab(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]));
    let ck = out.join(FINAL_CHECKPOINT);
    for metric in ["miou", "rankcorr"] {
        let a = ok(sab(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--metric", metric]));
        let b = ok(sab(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--metric", metric]));
        assert_eq!(a, b);
        let value = a.trim().strip_prefix(&format!("{metric}=")).expect(&a);
        assert_eq!(value.split('.').nth(1).map(str::len), Some(4), "{a}");
    }
}

#[test]
fn eval_all_background_model_scores_zero() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 32);
    let cfg = tiny_config(1);
    let mut t = Trainer::new(&cfg).unwrap();
    let head = &mut t.model.head;
    head.weight = Tensor::parameter(vec![0.0; head.weight.len()], head.weight.shape()).unwrap();
    head.bias = Some(Tensor::parameter(vec![5.0, -5.0], &[2]).unwrap());
    let ck = tmp.path().join("bg.ckpt");
    t.checkpoint().save(&ck).unwrap();
    assert_eq!(ok(sab(&["eval", "--checkpoint", s(&ck), "--data", s(&data)])).trim(), "miou=0.0000");
}

#[test]
fn ablate_tables_have_one_row_per_rung() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 32);
    let cfg = write_config(tmp.path(), &tiny_config(1));
    for (ladder, rows) in [("modifications", 5), ("scales", 4)] {
        let out = ok(sab(&["ablate", "--data", s(&data), "--ladder", ladder, "--seeds", "1", "--config", s(&cfg)]));
        assert_eq!(out.lines().filter(|l| l.starts_with("rung=")).count(), rows, "{out}");
        let table: Vec<&str> = out.lines().skip_while(|l| !l.starts_with("rung ")).collect();
        assert_eq!(table.len(), rows + 1, "{out}");
    }
}

#[test]
fn ablate_rejects_zero_seeds_and_unknown_ladder() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 2, 32);
    assert!(!sab(&["ablate", "--data", s(&data), "--ladder", "scales", "--seeds", "0"]).status.success());
    assert!(!sab(&["ablate", "--data", s(&data), "--ladder", "depth", "--seeds", "1"]).status.success());
}

#[test]
fn gradcheck_block_scope_reports_required_ops() {
    let out = ok(sab(&["gradcheck", "--scope", "block", "--seeds", "2"]));
    for op in ["linear", "layer_norm", "softmax", "se_block", "sab_forward", "conv2d", "bilinear_upsample2x"] {
        assert!(out.contains(&format!("op=\"{op}")), "{op} missing:\n{out}");
    }
    assert!(out.lines().all(|l| l.ends_with("PASS")), "{out}");
    assert!(!sab(&["gradcheck", "--scope", "everything"]).status.success());
}

#[test]
fn visualize_emits_channels_gate_and_mask() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 2, 32);
    let cfg = tiny_config(1);
    let ck = tmp.path().join("m.ckpt");
    Trainer::new(&cfg).unwrap().checkpoint().save(&ck).unwrap();
    let sample = &load_dataset(&data).unwrap()[0];
    let image = data.join("images/00000.ppm");
    let out = tmp.path().join("vis");
    ok(sab(&[
        "visualize",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&image),
        "--question",
        &sample.question,
        "--answer",
        &sample.answer,
        "--level",
        "1",
        "--out",
        s(&out),
    ]));
    let files = tree(&out);
    assert_eq!(files.len(), cfg.model.channels[1] + 2);
    let gate = String::from_utf8(files.iter().find(|(n, _)| n == "gate.txt").unwrap().1.clone()).unwrap();
    let g: Vec<f64> = gate.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(g.len(), cfg.model.channels[1]);
    assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(files.iter().any(|(n, _)| n == "mask.pgm"));
    assert!(files.iter().any(|(n, _)| n == "channel_000.pgm"));
}

#[test]
fn visualize_rejects_inactive_level() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 2, 32);
    let mut cfg = tiny_config(1);
    cfg.model.scales = vec![32];
    let ck = tmp.path().join("m.ckpt");
    Trainer::new(&cfg).unwrap().checkpoint().save(&ck).unwrap();
    let sample = &load_dataset(&data).unwrap()[0];
    let o = sab(&[
        "visualize",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&data.join("images/00000.ppm")),
        "--question",
        &sample.question,
        "--answer",
        &sample.answer,
        "--level",
        "0",
        "--out",
        s(&tmp.path().join("vis")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("level 0"));
}
