//! Training loop, evaluation and the checkpoints a run leaves behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Batch, GroundingSample};
use crate::error::{Error, Result};
use crate::loss::combined_loss_terms;
use crate::metrics::{mean_iou, rank_correlation};
use crate::model::{foreground_margin, GroundingModel};
use crate::optim::{AdamW, PolySchedule};
use crate::seed::rng_for;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// mIoU of this step's batch predictions (before the update).
    pub miou: f64,
}

impl StepStats {
    pub fn log_line(&self) -> String {
        format!(
            "step={} lr={:.6e} loss={:.6} miou={:.4}",
            self.step, self.lr, self.loss, self.miou
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    /// Mean per-sample Spearman correlation of the foreground logit margin with the mask.
    pub rank_correlation: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: GroundingModel,
    pub optimizer: AdamW,
    pub schedule: PolySchedule,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model: GroundingModel::new(&config.model, config.seed)?,
            optimizer: AdamW::new(config.optim.adamw())?,
            schedule: config.schedule()?,
            config: config.clone(),
            step: 0,
        })
    }

    /// Continues from a checkpoint with its embedded configuration.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ck.config)?;
        t.model = ck.restore_model()?;
        t.optimizer.state = ck.optimizer.clone();
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.step, &self.model, &self.optimizer.state)
    }

    /// Sample indices of the batch for step `step` (0-based). Each epoch
    /// walks a fresh seeded permutation of the dataset.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let bs = self.config.train.batch_size;
        let mut out = Vec::with_capacity(bs);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..bs as u64 {
            let pos = step * bs as u64 + j;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng_for(self.config.seed, &format!("epoch{epoch}")));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
        }
        out
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let lr = self.schedule.lr(self.step);
        let out = self.model.forward(&batch.images, &batch.pairs())?;
        let terms = combined_loss_terms(&out.logits, &batch.masks, &self.config.loss)?;
        let loss = terms.total.item()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("combined_loss"));
        }
        terms.total.backward()?;
        self.optimizer.step(&mut self.model, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            lr,
            loss,
            miou: batch_miou(out.mask.data(), batch.masks.data(), batch.masks.shape()[0])?,
        })
    }

    /// Trains until `config.train.steps`, logging to `log` and writing
    /// checkpoints into `out_dir` if given.
    pub fn run(&mut self, samples: &[GroundingSample], log: &mut dyn Write, out_dir: Option<&Path>) -> Result<TrainSummary> {
        if samples.is_empty() {
            return Err(Error::contract("train", "no training samples"));
        }
        let tc = self.config.train.clone();
        let held_in = &samples[..tc.held_in.min(samples.len())];
        let mut best = match out_dir.map(|d| d.join(BEST_CHECKPOINT)) {
            Some(p) if p.exists() => {
                let prior = Checkpoint::load(&p)?.restore_model()?;
                evaluate(&prior, held_in, tc.batch_size)?.miou
            }
            _ => f64::NEG_INFINITY,
        };
        let mut last = None;
        while self.step < tc.steps {
            let idx = self.batch_indices(self.step, samples.len());
            let refs: Vec<&GroundingSample> = idx.iter().map(|&i| &samples[i]).collect();
            let stats = self.train_step(&Batch::new(&refs)?)?;
            if stats.step % tc.log_every == 0 || stats.step == tc.steps {
                writeln!(log, "{}", stats.log_line()).map_err(|e| Error::io("<log>", e))?;
            }
            if stats.step % tc.eval_every == 0 || stats.step == tc.steps {
                let score = evaluate(&self.model, held_in, tc.batch_size)?.miou;
                writeln!(log, "step={} held_in_miou={score:.4}", stats.step).map_err(|e| Error::io("<log>", e))?;
                if let Some(dir) = out_dir {
                    let ck = self.checkpoint();
                    ck.save(&dir.join(LAST_CHECKPOINT))?;
                    if score > best {
                        ck.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                }
                best = best.max(score);
            }
            last = Some(stats);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(TrainSummary {
            steps: self.step,
            last,
            best_held_in_miou: best,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<StepStats>,
    pub best_held_in_miou: f64,
    pub out_dir: Option<PathBuf>,
}

fn batch_miou(pred: &[f64], gt: &[f64], b: usize) -> Result<f64> {
    let hw = gt.len() / b;
    let p: Vec<&[f64]> = pred.chunks(hw).collect();
    let g: Vec<&[f64]> = gt.chunks(hw).collect();
    mean_iou(&p, &g)
}

/// Predicted masks and foreground margins for every sample, in order.
pub fn predict(model: &GroundingModel, samples: &[GroundingSample], batch_size: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&GroundingSample> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let o = model.forward(&batch.images, &batch.pairs())?;
        let hw = batch.masks.shape()[1] * batch.masks.shape()[2];
        let margins = foreground_margin(&o.logits)?;
        for (m, margin) in o.mask.data().chunks(hw).zip(margins) {
            out.push((m.to_vec(), margin));
        }
    }
    Ok(out)
}

pub fn evaluate(model: &GroundingModel, samples: &[GroundingSample], batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate", "no samples"));
    }
    let preds = predict(model, samples, batch_size)?;
    let gts: Vec<Vec<f64>> = samples.iter().map(|s| s.mask.to_f64()).collect();
    let masks: Vec<&[f64]> = preds.iter().map(|p| p.0.as_slice()).collect();
    let miou = mean_iou(&masks, &gts)?;
    let mut rc = 0.0;
    for ((_, margin), gt) in preds.iter().zip(&gts) {
        rc += rank_correlation(margin, gt)?;
    }
    Ok(EvalReport {
        miou,
        rank_correlation: rc / samples.len() as f64,
    })
}
