use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sab_core::ablation::{format_table, run_ladder, Ladder};
use sab_core::checkpoint::Checkpoint;
use sab_core::config::RunConfig;
use sab_core::data::{generate_dataset, load_dataset, Mask, Rgb8};
use sab_core::train::{evaluate, Trainer};
use sab_core::verify::{run_scope, Scope, TOLERANCE};
use sab_core::Tensor;

#[derive(Parser)]
#[command(name = "sab", version, about = "Answer grounding with sentence attention blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset (PPM images, PGM masks, manifest).
    GenData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train.log plus best, last and final checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Total schedule length; ignored when resuming.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint. Its embedded configuration wins over
        /// every other flag except the data and output paths.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Miou)]
        metric: Metric,
    },
    /// Train every rung of an ablation ladder over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Scored set; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        ladder: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Finite-difference gradient checks; exits nonzero on any failure.
    Gradcheck {
        /// block, loss or model; all three when omitted.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Dump one level's channel maps, its gate vector and the predicted mask.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        answer: String,
        #[arg(long, default_value_t = 0)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Miou,
    Rankcorr,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { seed, count, size, out } => {
            let manifest = generate_dataset(seed, count, size, &out)?;
            println!("samples={} seed={seed} out={}", manifest.records.len(), out.display());
        }
        Command::Train { config, data, out, steps, resume } => train(config, data, out, steps, resume)?,
        Command::Eval { checkpoint, data, metric } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.restore_model()?;
            let samples = load_dataset(&data)?;
            let report = evaluate(&model, &samples, ck.config.train.batch_size)?;
            match metric {
                Metric::Miou => println!("miou={:.4}", report.miou),
                Metric::Rankcorr => println!("rankcorr={:.4}", report.rank_correlation),
            }
        }
        Command::Ablate { data, eval_data, ladder, seeds, config, steps } => {
            let ladder: Ladder = ladder.parse()?;
            let mut base = load_config(config.as_deref())?;
            if let Some(steps) = steps {
                base.train.steps = steps;
                base.validate()?;
            }
            let train = load_dataset(&data)?;
            let eval = match &eval_data {
                Some(p) => load_dataset(p)?,
                None => train.clone(),
            };
            let seeds: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let results = run_ladder(ladder, &base, &train, &eval, &seeds, &mut io::stdout())?;
            print!("{}", format_table(&results));
        }
        Command::Gradcheck { scope, seeds } => {
            let scopes = match scope {
                Some(s) => vec![s.parse::<Scope>()?],
                None => Scope::ALL.to_vec(),
            };
            let mut failed = 0;
            for scope in scopes {
                for check in run_scope(scope, seeds)? {
                    let verdict = if check.passed() { "PASS" } else { "FAIL" };
                    println!(
                        "scope={scope} op={:?} seeds={} max_rel_error={:.3e} {verdict}",
                        check.name, check.seeds, check.max_rel_error
                    );
                    failed += usize::from(!check.passed());
                }
            }
            if failed > 0 {
                eprintln!("{failed} check(s) at or above {TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Visualize { checkpoint, image, question, answer, level, out } => {
            visualize(&checkpoint, &image, &question, &answer, level, &out)?
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            cfg
        }
    })
}

/// Writes every line to both sinks.
struct Tee<A, B>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

fn train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut trainer = match &resume {
        Some(path) => {
            if config.is_some() || steps.is_some() {
                eprintln!("note: resuming, so --config and --steps are ignored in favour of the checkpoint's configuration");
            }
            Trainer::resume(&Checkpoint::load(path)?)?
        }
        None => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(steps) = steps {
                cfg.train.steps = steps;
            }
            cfg.validate()?;
            Trainer::new(&cfg)?
        }
    };
    if let Some(d) = data {
        trainer.config.paths.data = Some(d);
    }
    if let Some(o) = out {
        trainer.config.paths.out = Some(o);
    }
    let data = trainer.config.paths.data.clone().ok_or_else(|| anyhow!("no dataset: pass --data or set paths.data"))?;
    let out = trainer.config.paths.out.clone().ok_or_else(|| anyhow!("no output directory: pass --out or set paths.out"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let samples = load_dataset(&data)?;
    let log_path = out.join("train.log");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = Tee(io::stdout(), log_file);
    writeln!(log, "start_step={} total_steps={} seed={} samples={}", trainer.step, trainer.config.train.steps, trainer.config.seed, samples.len())?;
    let summary = trainer.run(&samples, &mut log, Some(&out))?;
    match summary.last {
        Some(last) => writeln!(log, "done steps={} loss={:.6} best_held_in_miou={:.4}", summary.steps, last.loss, summary.best_held_in_miou)?,
        None => writeln!(log, "done steps={} (nothing left to train)", summary.steps)?,
    }
    Ok(())
}

fn visualize(checkpoint: &Path, image: &Path, question: &str, answer: &str, level: usize, out: &Path) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.restore_model()?;
    let img = Rgb8::read(image)?;
    let multiple = model.input_multiple();
    if img.width % multiple != 0 || img.height % multiple != 0 {
        bail!("image is {}×{}, sides must be multiples of {multiple}", img.width, img.height);
    }
    let x = Tensor::new(img.to_planar(), &[1, 3, img.height, img.width])?;
    let trace = model.forward_trace(&x, &[(question, answer)])?;
    let slot = model
        .levels()
        .iter()
        .position(|&l| l == level)
        .ok_or_else(|| anyhow!("level {level} has no attention block; active levels are {:?}", model.levels()))?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let maps = model.visualize_channels(&x, level)?;
    for (c, map) in maps.iter().enumerate() {
        sab_core::data::pnm::write(&out.join(format!("channel_{c:03}.pgm")), &map.to_raster())?;
    }
    let gate: String = trace.gates[slot].data().iter().map(|g| format!("{g:.9}\n")).collect();
    fs::write(out.join("gate.txt"), gate).with_context(|| format!("writing gate to {}", out.display()))?;
    Mask::from_f64(img.width, img.height, trace.output.mask.data())?.write(&out.join("mask.pgm"))?;
    println!("level={level} channels={} files={} out={}", maps.len(), maps.len() + 2, out.display());
    Ok(())
}
