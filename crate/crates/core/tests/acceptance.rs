//! Acceptance criteria, run in order, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the verdict lines are never captured.
//! Exits nonzero if any criterion fails.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use sab_core::ablation::{format_table, run_ladder, Ladder, RungResult};
use sab_core::checkpoint::Checkpoint;
use sab_core::config::RunConfig;
use sab_core::data::{generate_samples, generate_scene, write_dataset, Batch, GroundingSample};
use sab_core::loss::{combined_loss, cross_entropy, one_hot, rmi_loss, LossConfig};
use sab_core::metrics::{iou, mean_iou, rank_correlation};
use sab_core::model::GroundingModel;
use sab_core::nn::attention::gate_vector;
use sab_core::nn::{channel_softmax, sab_forward, Init, Parameters, SabConfig, SabParams};
use sab_core::optim::{poly_lr, AdamW, AdamWConfig, PolySchedule};
use sab_core::seed::rng_for;
use sab_core::tensor::ops;
use sab_core::train::{evaluate, Trainer};
use sab_core::verify::{run_scope, Scope};
use sab_core::Tensor;

/// Scenes for the question-swap probe come from a seed the model never saw.
const PROBE_SEED: u64 = 2;
const PROBE_IMAGES: usize = 64;

/// Reduced ablation protocol: every rung of both ladders, five seeds each,
/// a 300-step schedule at ten times the default base rate, scored on scenes
/// from the probe seed.
const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_SIZE: usize = 64;
const ABLATION_TRAIN: usize = 256;
const ABLATION_EVAL: usize = 64;
const ABLATION_STEPS: u64 = 300;
const ABLATION_LR: f64 = 1e-3;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Check = fn(&mut Shared) -> Outcome;

/// Expensive artifacts reused by several criteria.
#[derive(Default)]
struct Shared {
    trained: Option<GroundingModel>,
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("gradient suite", gradient_suite),
        ("gate fidelity", gate_fidelity),
        ("loss identities", loss_identities),
        ("optimizer and schedule", optimizer_and_schedule),
        ("metric oracles", metric_oracles),
        ("checkpoint and dataset determinism", determinism),
        ("end-to-end learning", end_to_end),
        ("question swap", question_swap),
        ("modifications ladder", modifications_ladder),
        ("scales ladder", scales_ladder),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check(&mut shared);
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradient_suite(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut count = 0;
    for scope in Scope::ALL {
        for c in run_scope(scope, 10).expect("gradient suite") {
            count += 1;
            if c.max_rel_error > worst.0 {
                worst = (c.max_rel_error, c.name.to_string());
            }
            if !c.passed() || c.seeds < 10 {
                failures.push(format!("{scope}/{}={:.2e}", c.name, c.max_rel_error));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 120.0,
        format!(
            "{count} checks x 10 seeds, worst {:.2e} ({}), {secs:.0}s{}",
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!(", failing {failures:?}") }
        ),
    )
}

fn gate_fidelity(_: &mut Shared) -> Outcome {
    let (e, c, k) = (6, 10, 3);
    let cfg = SabConfig::sentence(e, c);
    let init = Init::new(11);
    let mut rng = rng_for(11, "acceptance.gate");
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };

    // zero fc2 weights and a dominant bias on channel k force a one-hot gate
    let mut params = SabParams::new(&init, "sab", &cfg).unwrap();
    let hidden = cfg.hidden_width();
    params.fc2.weight = Tensor::parameter(vec![0.0; c * hidden], &[c, hidden]).unwrap();
    let mut bias = vec![0.0; c];
    bias[k] = 1e4;
    params.fc2.bias = Tensor::parameter(bias, &[c]).unwrap();

    let qa = Tensor::new(normal(2 * 2 * e), &[2, 2 * e]).unwrap();
    let r = Tensor::new(normal(2 * c * 5 * 5), &[2, c, 5, 5]).unwrap();
    let out = sab_forward(&params, &qa, &r, &cfg).unwrap();
    let (mut on, mut off) = (0.0f64, 0.0f64);
    for (i, (&o, &x)) in out.data().iter().zip(r.data()).enumerate() {
        if (i / 25) % c == k {
            on = on.max((o - x).abs());
        } else {
            off = off.max(o.abs());
        }
    }

    // softmax rows of a randomly initialised block
    let random = SabParams::new(&init, "random", &cfg).unwrap();
    let qa = Tensor::new(normal(16 * 2 * e), &[16, 2 * e]).unwrap();
    let r = Tensor::zeros(&[16, c, 1, 1]);
    let gate = gate_vector(&random, &qa, &r, &cfg).unwrap();
    let row_err = gate
        .data()
        .chunks(c)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        on < 1e-9 && off < 1e-9 && row_err < 1e-9,
        format!("channel k max |Δ| {on:.1e}, other channels max |out| {off:.1e}, gate row sum error {row_err:.1e}"),
    )
}

/// `trace(log(M)) / 2d` per class, summed, for `M = εI` by eigendecomposition.
fn rmi_floor_oracle(cfg: &LossConfig, classes: usize) -> f64 {
    let d = cfg.rmi_region_side * cfg.rmi_region_side;
    let m = DMatrix::<f64>::identity(d, d) * cfg.matrix_epsilon;
    let trace_log: f64 = m.symmetric_eigen().eigenvalues.iter().map(|v| v.ln()).sum();
    classes as f64 * trace_log / (2 * d) as f64
}

fn loss_identities(_: &mut Shared) -> Outcome {
    let mut rng = rng_for(5, "acceptance.loss");
    let (b, h, w) = (2, 16, 16);
    let logits: Vec<f64> = (0..b * 2 * h * w).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let logits = Tensor::new(logits, &[b, 2, h, w]).unwrap();
    let mask: Vec<f64> = (0..b * h * w).map(|i| ((i % w) > 4 && (i / w) % h < 11) as u8 as f64).collect();
    let mask = Tensor::new(mask, &[b, h, w]).unwrap();
    let cfg = LossConfig::default();

    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs());
    let ce = cross_entropy(&logits, &mask).unwrap().item().unwrap();
    let rmi = rmi_loss(&channel_softmax(&logits).unwrap(), &one_hot(&mask).unwrap(), &cfg)
        .unwrap()
        .item()
        .unwrap();
    let at = |lambda: f64| {
        combined_loss(&logits, &mask, &LossConfig { lambda, ..cfg.clone() })
            .unwrap()
            .item()
            .unwrap()
    };
    let ce_err = rel(at(1.0), ce);
    let rmi_err = rel(at(0.0), rmi);

    let target = one_hot(&mask).unwrap();
    let floor = rmi_loss(&target, &target, &cfg).unwrap().item().unwrap();
    let oracle = rmi_floor_oracle(&cfg, 2);
    let floor_ok = (floor - oracle).abs() < 1e-6 && (oracle - 1e-3f64.ln()).abs() < 1e-12;

    let uniform = cross_entropy(&Tensor::zeros(&[b, 2, h, w]), &mask).unwrap().item().unwrap();
    let uniform_err = (uniform - 2f64.ln()).abs();
    outcome(
        ce_err < 1e-12 && rmi_err < 1e-12 && floor_ok && uniform_err < 1e-12,
        format!(
            "λ=1 vs CE {ce_err:.1e}, λ=0 vs RMI {rmi_err:.1e}, RMI(target,target) {floor:.9} vs oracle {oracle:.9}, CE(uniform)-ln2 {uniform_err:.1e}"
        ),
    )
}

struct One(Tensor);

impl Parameters for One {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}w"), &self.0);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}w"), &mut self.0);
    }
}

fn optimizer_and_schedule(_: &mut Shared) -> Outcome {
    let cfg = AdamWConfig::default();
    let mut opt = AdamW::new(cfg).unwrap();
    let mut p = One(Tensor::parameter(vec![0.7], &[1]).unwrap());
    // hand recurrence for f(θ) = θ³ over three steps at changing rates
    let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for (t, lr) in [(1, 1e-2), (2, 5e-3), (3, 1e-3)] {
        let g = 3.0 * theta * theta;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        theta = theta - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * cfg.weight_decay * theta;

        let w = &p.0;
        ops::sum(&ops::mul(&ops::mul(w, w).unwrap(), w).unwrap()).unwrap().backward().unwrap();
        opt.step(&mut p, lr).unwrap();
        worst = worst.max((p.0.data()[0] - theta).abs());
    }
    let defaults_ok = cfg.beta1 == 0.9 && cfg.beta2 == 0.999 && cfg.eps == 1e-8 && cfg.weight_decay == 0.05;

    let sched = RunConfig::default().schedule().unwrap();
    let t = sched.total_steps;
    let s_err = [
        (poly_lr(&sched, 0) - 1e-4).abs(),
        poly_lr(&sched, t).abs(),
        (poly_lr(&sched, t / 2) - 1e-4 * 0.5f64.powf(0.9)).abs(),
    ];
    let odd = PolySchedule::new(1e-4, 7, 0.9).unwrap();
    let odd_err = (odd.lr(3) - 1e-4 * (4.0f64 / 7.0).powf(0.9)).abs();
    outcome(
        worst < 1e-12 && defaults_ok && s_err.iter().all(|e| *e < 1e-12) && odd_err < 1e-12 && t == 2000,
        format!(
            "AdamW vs recurrence {worst:.1e} over 3 steps, schedule errors at 0/T/T/2 {:.1e}/{:.1e}/{:.1e}",
            s_err[0], s_err[1], s_err[2]
        ),
    )
}

fn iou_oracle(p: &[f64], g: &[f64]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a > 0.5 && **b > 0.5).count();
    let union = p.iter().zip(g).filter(|(a, b)| **a > 0.5 || **b > 0.5).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Spearman correlation with mid-ranks found by comparing every pair.
fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn metric_oracles(_: &mut Shared) -> Outcome {
    let mut rng = rng_for(17, "acceptance.metrics");
    let (mut iou_err, mut rc_err) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let n = rng.gen_range(1..6);
        let len = rng.gen_range(1..200);
        let density = rng.gen::<f64>();
        let masks = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..len).map(|_| (rng.gen::<f64>() < density) as u8 as f64).collect())
                .collect()
        };
        let (pred, gt) = (masks(&mut rng), masks(&mut rng));
        let oracle = pred.iter().zip(&gt).map(|(p, g)| iou_oracle(p, g)).sum::<f64>() / n as f64;
        iou_err = iou_err.max((mean_iou(&pred, &gt).unwrap() - oracle).abs());
        for (p, g) in pred.iter().zip(&gt) {
            assert_eq!(iou(p, g).unwrap(), iou_oracle(p, g));
        }

        // quantised scores produce ties; keep both sides non-constant
        let len = rng.gen_range(3..150);
        let levels = if case % 2 == 0 { 5 } else { 1000 };
        let mut x: Vec<f64> = (0..len).map(|_| rng.gen_range(0..levels) as f64 / 7.0).collect();
        let mut y: Vec<f64> = (0..len).map(|_| (rng.gen::<f64>() < 0.3) as u8 as f64).collect();
        x[0] = -1.0;
        y[0] = 0.0;
        y[1] = 1.0;
        rc_err = rc_err.max((rank_correlation(&x, &y).unwrap() - spearman_oracle(&x, &y)).abs());
    }
    outcome(
        iou_err < 1e-12 && rc_err < 1e-12,
        format!("100 cases each: mean IoU max error {iou_err:.1e}, rank correlation max error {rc_err:.1e}"),
    )
}

fn determinism(_: &mut Shared) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 3;
    cfg.train.batch_size = 4;
    let samples = generate_samples(1, 8, 64).unwrap();
    let mut trainer = Trainer::new(&cfg).unwrap();
    trainer.run(&samples, &mut std::io::sink(), None).unwrap();
    let bytes = trainer.checkpoint().to_bytes().unwrap();
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    let reencoded = restored.to_bytes().unwrap() == bytes;
    let model = restored.restore_model().unwrap();
    let refs: Vec<&GroundingSample> = samples.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let a = trainer.model.forward(&batch.images, &batch.pairs()).unwrap();
    let b = model.forward(&batch.images, &batch.pairs()).unwrap();
    let same_forward = a.logits.data().iter().zip(b.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits());

    let mut again = Trainer::new(&cfg).unwrap();
    again.run(&samples, &mut std::io::sink(), None).unwrap();
    let same_training = again.checkpoint().to_bytes().unwrap() == bytes;

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let trees: Vec<Vec<(String, Vec<u8>)>> = dirs
        .iter()
        .map(|d| {
            let fresh = generate_samples(1, 8, 64).unwrap();
            write_dataset(d.path(), 1, &fresh).unwrap();
            let mut files = Vec::new();
            collect(d.path(), d.path(), &mut files);
            files.sort();
            files
        })
        .collect();
    let same_data = trees[0] == trees[1] && !trees[0].is_empty();
    outcome(
        reencoded && same_forward && same_training && same_data,
        format!(
            "re-encode {reencoded}, restored forward bit-exact {same_forward}, retrain bit-exact {same_training}, dataset tree byte-identical {same_data} ({} files)",
            trees[0].len()
        ),
    )
}

fn collect(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
}

/// The default run: data seed 1, 512 samples at 64×64, 2000 steps.
fn trained_model(shared: &mut Shared) -> (&GroundingModel, Option<(f64, f64, f64)>) {
    let mut fresh = None;
    if shared.trained.is_none() {
        let cfg = RunConfig::default();
        let samples = generate_samples(cfg.data.seed, cfg.data.count, cfg.data.image_size).unwrap();
        let start = Instant::now();
        let mut trainer = Trainer::new(&cfg).unwrap();
        let mut log = Vec::new();
        trainer.run(&samples, &mut log, None).unwrap();
        let secs = start.elapsed().as_secs_f64();
        for line in String::from_utf8(log).unwrap().lines().filter(|l| l.contains("held_in")) {
            println!("    {line}");
        }
        let train = evaluate(&trainer.model, &samples, cfg.train.batch_size).unwrap().miou;
        let held_in = evaluate(&trainer.model, &samples[..cfg.train.held_in], cfg.train.batch_size)
            .unwrap()
            .miou;
        fresh = Some((train, held_in, secs));
        shared.trained = Some(trainer.model);
    }
    (shared.trained.as_ref().unwrap(), fresh)
}

fn end_to_end(shared: &mut Shared) -> Outcome {
    let (_, stats) = trained_model(shared);
    let (train, held_in, secs) = stats.expect("first use trains");
    outcome(
        train >= 0.85 && held_in >= 0.75,
        format!("final train mIoU {train:.4} (≥ 0.85), held-in slice mIoU {held_in:.4} (≥ 0.75), trained in {secs:.0}s"),
    )
}

fn question_swap(shared: &mut Shared) -> Outcome {
    let (model, _) = trained_model(shared);
    let (mut disagreements, mut good, mut total) = (Vec::new(), 0, 0);
    for i in 0..PROBE_IMAGES {
        let scene = generate_scene(PROBE_SEED, i, 64).unwrap();
        let pair = [scene.sample(0).unwrap(), scene.sample(1).unwrap()];
        let batch = Batch::new(&[&pair[0], &pair[1]]).unwrap();
        let out = model.forward(&batch.images, &batch.pairs()).unwrap();
        let masks: Vec<&[f64]> = out.mask.data().chunks(64 * 64).collect();
        let differ = masks[0].iter().zip(masks[1]).filter(|(a, b)| a != b).count();
        disagreements.push(differ as f64 / (64.0 * 64.0));
        for (m, s) in masks.iter().zip(&pair) {
            total += 1;
            good += usize::from(iou(m, &s.mask.to_f64()).unwrap() > 0.5);
        }
    }
    let mean = disagreements.iter().sum::<f64>() / disagreements.len() as f64;
    let above = disagreements.iter().filter(|&&d| d > 0.05).count();
    let frac = good as f64 / total as f64;
    outcome(
        mean > 0.05 && frac >= 0.8,
        format!(
            "mean pixel disagreement {:.1}% ({above}/{PROBE_IMAGES} images above 5%), IoU > 0.5 on {good}/{total} predictions ({:.1}%)",
            100.0 * mean,
            100.0 * frac
        ),
    )
}

fn ablation(ladder: Ladder) -> Vec<RungResult> {
    let mut base = RunConfig::default();
    base.train.steps = ABLATION_STEPS;
    base.train.eval_every = ABLATION_STEPS;
    base.optim.base_lr = ABLATION_LR;
    let train = generate_samples(1, ABLATION_TRAIN, ABLATION_SIZE).unwrap();
    let eval = generate_samples(PROBE_SEED, ABLATION_EVAL, ABLATION_SIZE).unwrap();
    let results = run_ladder(ladder, &base, &train, &eval, &ABLATION_SEEDS, &mut std::io::sink()).unwrap();
    for line in format_table(&results).lines() {
        println!("    {line}");
    }
    results
}

fn modifications_ladder(_: &mut Shared) -> Outcome {
    let r = ablation(Ladder::Modifications);
    let se = r[0].mean();
    let cross_min = r[1..].iter().map(RungResult::mean).fold(f64::INFINITY, f64::min);
    let (cross, full) = (r[1].mean(), r[4].mean());
    outcome(
        full > cross && cross_min - se >= 0.1,
        format!("full {full:.4} vs cross-attention only {cross:.4}; SE {se:.4}, weakest cross-attention rung {cross_min:.4} (gap ≥ 0.1)"),
    )
}

fn scales_ladder(_: &mut Shared) -> Outcome {
    let r = ablation(Ladder::Scales);
    let (coarse, all) = (r[0].mean(), r[3].mean());
    outcome(all >= coarse, format!("all four scales {all:.4} vs 1/32 only {coarse:.4}"))
}
