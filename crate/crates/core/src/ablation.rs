//! Cumulative ablation ladders over the attention block and the pyramid scales.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{AttentionSource, Gate, Normalization};
use crate::train::{evaluate, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ladder {
    /// SE baseline, then cross-attention, layer norm, softmax, expansion.
    Modifications,
    /// 1/32 only, then adding 1/16, 1/8 and 1/4.
    Scales,
}

impl std::str::FromStr for Ladder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modifications" => Ok(Ladder::Modifications),
            "scales" => Ok(Ladder::Scales),
            other => Err(Error::Config(format!("unknown ladder {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub name: String,
    pub model: ModelConfig,
}

/// Rungs of `ladder`, each changing one setting of the previous. Fields
/// the ladder does not touch come from `base`.
pub fn ladder_rungs(ladder: Ladder, base: &ModelConfig) -> Vec<Rung> {
    let full = ModelConfig {
        attention: AttentionSource::Cross,
        normalization: Normalization::LayerNorm,
        gate: Gate::Softmax,
        expansion: true,
        ..base.clone()
    };
    match ladder {
        Ladder::Modifications => {
            let mut m = ModelConfig {
                attention: AttentionSource::SelfPooled,
                normalization: Normalization::None,
                gate: Gate::Sigmoid,
                expansion: false,
                ..full
            };
            let mut rungs = vec![Rung {
                name: "self-attention (SE)".into(),
                model: m.clone(),
            }];
            let steps: [(&str, fn(&mut ModelConfig)); 4] = [
                ("cross-attention", |m| m.attention = AttentionSource::Cross),
                ("+ layer norm", |m| m.normalization = Normalization::LayerNorm),
                ("+ softmax", |m| m.gate = Gate::Softmax),
                ("+ expansion", |m| m.expansion = true),
            ];
            for (name, apply) in steps {
                apply(&mut m);
                rungs.push(Rung {
                    name: name.into(),
                    model: m.clone(),
                });
            }
            rungs
        }
        Ladder::Scales => {
            let all = [32, 16, 8, 4];
            (1..=all.len())
                .map(|k| Rung {
                    name: all[..k].iter().map(|s| format!("1/{s}")).collect::<Vec<_>>().join(" + "),
                    model: ModelConfig {
                        scales: all[..k].to_vec(),
                        ..full.clone()
                    },
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RungResult {
    pub name: String,
    /// Evaluation mIoU per seed.
    pub scores: Vec<f64>,
}

impl RungResult {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn stddev(&self) -> f64 {
        let n = self.scores.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Trains every rung for each seed on `train` and scores it on `eval`.
pub fn run_ladder(
    ladder: Ladder,
    base: &RunConfig,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    seeds: &[u64],
    progress: &mut dyn Write,
) -> Result<Vec<RungResult>> {
    if seeds.is_empty() {
        return Err(Error::contract("ablate", "need at least one seed"));
    }
    ladder_rungs(ladder, &base.model)
        .into_iter()
        .map(|rung| {
            let scores = seeds
                .iter()
                .map(|&seed| {
                    let cfg = RunConfig {
                        seed,
                        model: rung.model.clone(),
                        ..base.clone()
                    };
                    let mut trainer = Trainer::new(&cfg)?;
                    trainer.run(train, &mut std::io::sink(), None)?;
                    let score = evaluate(&trainer.model, eval, cfg.train.batch_size)?.miou;
                    writeln!(progress, "rung={:?} seed={seed} miou={score:.4}", rung.name)
                        .map_err(|e| Error::io("<progress>", e))?;
                    Ok(score)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RungResult {
                name: rung.name,
                scores,
            })
        })
        .collect()
}

/// Plain-text table, one row per rung: `name | mean ± stddev | per-seed scores`.
pub fn format_table(results: &[RungResult]) -> String {
    let width = results.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(4);
    let mut out = format!("{:<width$}  {:>17}  scores\n", "rung", "mIoU");
    for r in results {
        let scores: Vec<String> = r.scores.iter().map(|s| format!("{s:.4}")).collect();
        out.push_str(&format!(
            "{:<width$}  {:>8.4} ± {:<6.4}  {}\n",
            r.name,
            r.mean(),
            r.stddev(),
            scores.join(" ")
        ));
    }
    out
}
