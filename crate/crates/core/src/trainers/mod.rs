//! Training stages: supervised next-frame training with data mixing, GRPO
//! alignment against the judges, and an offline DPO baseline.

mod dpo;
mod grpo;
mod optim;
mod sft;

pub use dpo::{build_preference_pairs, dpo_loss, dpo_train, pick_pair, DpoConfig, PreferencePair};
pub use grpo::{
    group_advantages, grpo_loss, grpo_train, rollout_group, GrpoConfig, RolloutGroup, SelectionMetric,
};
pub use optim::{Adam, AdamConfig};
pub use sft::{mix_datasets, sft_loss, sft_step, sft_train, validation_loss, MixedStream, SftConfig};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::{sample_response, PolicyParams, SampleOptions};
use crate::rewards::{Anchors, RewardWeights};
use crate::rng::{self, tag};
use crate::synthworld::oracles::Oracle;
use crate::synthworld::PromptSet;

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Sft {
        step: usize,
        loss: f64,
    },
    SftValidation {
        step: usize,
        loss: f64,
    },
    Train {
        iteration: usize,
        loss: f64,
        mean_reward: f64,
        mean_r_cer: f64,
        mean_r_ssim: f64,
        mean_r_pesq: f64,
        mean_raw_cer: f64,
    },
    Dpo {
        iteration: usize,
        loss: f64,
    },
    Validation {
        iteration: usize,
        #[serde(flatten)]
        summary: ValidationSummary,
    },
}

/// Receives log records as they are produced.
pub type LogSink<'a> = &'a mut dyn FnMut(&LogRecord) -> Result<()>;

/// Mean judge outcomes of one validation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub r_cer: f64,
    pub raw_cer: f64,
    pub raw_ssim: f64,
    pub reward: f64,
}

/// Result of a training stage: the selected parameters and where they came
/// from.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PolicyParams,
    pub best_step: usize,
    pub best_score: f64,
    pub final_params: PolicyParams,
    pub log: Vec<LogRecord>,
}

/// Index of the largest value; ties go to the earliest.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Index of the smallest value; ties go to the earliest.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Score `n_samples` generations per validation prompt. Seeds depend only on
/// `seed` and the prompt position, so successive validations of a run see
/// the same noise.
pub fn validate_policy(
    params: &PolicyParams,
    prompts: &PromptSet,
    oracle: &dyn Oracle,
    anchors: &Anchors,
    weights: &RewardWeights,
    sampling: &SampleOptions,
    n_samples: usize,
    seed: u64,
) -> Result<ValidationSummary> {
    let per_prompt: Vec<Result<[f64; 4]>> = prompts
        .prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut acc = [0.0; 4];
            for j in 0..n_samples {
                let mut r = rng::rng_for(seed, &[tag("validation"), i as u64, j as u64]);
                let sample = sample_response(params, prompt, sampling, &mut r)?;
                match oracle.score(prompt, &sample.response) {
                    Ok(raw) => {
                        let n = anchors.rewards(&raw, weights)?;
                        acc[0] += n.r_cer;
                        acc[1] += raw.cer;
                        acc[2] += raw.ssim;
                        acc[3] += n.r_total;
                    }
                    Err(e) => {
                        warn!("validation sample {i}/{j} scored as worst: {e}");
                        acc[1] += 1.0;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut sum = [0.0; 4];
    for r in per_prompt {
        let acc = r?;
        for (s, a) in sum.iter_mut().zip(acc) {
            *s += a;
        }
    }
    let n = (prompts.len() * n_samples).max(1) as f64;
    Ok(ValidationSummary {
        r_cer: sum[0] / n,
        raw_cer: sum[1] / n,
        raw_ssim: sum[2] / n,
        reward: sum[3] / n,
    })
}
