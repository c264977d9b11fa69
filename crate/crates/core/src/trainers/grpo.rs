use log::{info, warn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_first, argmin_first, validate_policy, LogRecord, LogSink, TrainOutcome};
use crate::error::{Error, Result};
use crate::policy::{accumulate_log_prob_grad, DropFlags, Gradient, PolicyParams, RolloutSampling, SampleOptions, SampledResponse};
use crate::rewards::{Anchors, NormalizedRewards, RewardWeights};
use crate::rng::{self, tag, Rng};
use crate::synthworld::oracles::{Oracle, RawScores};
use crate::synthworld::{Prompt, PromptSet};

/// Validation statistic that picks the returned checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Largest mean normalized CER reward.
    #[default]
    RCer,
    /// Smallest mean raw CER.
    RawCer,
    /// Largest mean aggregate reward, the quantity being optimized.
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub sampling: RolloutSampling,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub validation_interval: usize,
    /// Generations per validation prompt.
    pub validation_samples: usize,
    /// Decoding used for validation.
    pub validation_sampling: SampleOptions,
    pub weights: RewardWeights,
    pub selection: SelectionMetric,
}

impl GrpoConfig {
    pub fn paper() -> Self {
        GrpoConfig {
            group_size: 12,
            prompts_per_batch: 64,
            sampling: RolloutSampling::default(),
            learning_rate: 2e-7,
            max_iterations: 2000,
            validation_interval: 50,
            validation_samples: 1,
            validation_sampling: SampleOptions::sampled(0.7),
            weights: RewardWeights::default(),
            selection: SelectionMetric::RCer,
        }
    }

    pub fn desk() -> Self {
        GrpoConfig {
            group_size: 6,
            prompts_per_batch: 8,
            learning_rate: 1e-3,
            max_iterations: 300,
            ..GrpoConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.prompts_per_batch == 0 || self.validation_interval == 0 {
            return Err(Error::Config(
                "group_size, prompts_per_batch and validation_interval must be positive".into(),
            ));
        }
        if self.validation_samples == 0 {
            return Err(Error::Config("validation_samples must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("grpo learning rate must be positive".into()));
        }
        self.sampling.validate()?;
        self.weights.validate()
    }
}

/// K responses to one prompt with their rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_index: usize,
    pub prompt: Prompt,
    pub responses: Vec<SampledResponse>,
    /// `None` where the judges failed on the response.
    pub raw_scores: Vec<Option<RawScores>>,
    pub normalized: Vec<Option<NormalizedRewards>>,
    pub rewards: Vec<f64>,
    pub group_mean: f64,
    pub advantages: Vec<f64>,
}

/// Group mean and rewards minus that mean.
pub fn group_advantages(rewards: &[f64]) -> (f64, Vec<f64>) {
    if rewards.is_empty() {
        return (0.0, Vec::new());
    }
    // Offsetting by the first reward keeps equal rewards at exactly zero
    // advantage.
    let r0 = rewards[0];
    let mean = r0 + rewards.iter().map(|r| r - r0).sum::<f64>() / rewards.len() as f64;
    (mean, rewards.iter().map(|r| r - mean).collect())
}

impl RolloutGroup {
    /// Assemble a group from scored responses, computing the advantages.
    pub fn from_rewards(
        prompt_index: usize,
        prompt: Prompt,
        responses: Vec<SampledResponse>,
        raw_scores: Vec<Option<RawScores>>,
        normalized: Vec<Option<NormalizedRewards>>,
        rewards: Vec<f64>,
    ) -> Self {
        if rewards.len() == 1 {
            warn!("group of one response: its advantage is identically zero");
        }
        let (group_mean, advantages) = group_advantages(&rewards);
        RolloutGroup {
            prompt_index,
            prompt,
            responses,
            raw_scores,
            normalized,
            rewards,
            group_mean,
            advantages,
        }
    }
}

/// Sample `group_size` responses from `params_old` and score them. A judge
/// failure gives that response reward 0.
pub fn rollout_group(
    params_old: &PolicyParams,
    prompt: &Prompt,
    prompt_index: usize,
    config: &GrpoConfig,
    oracle: &dyn Oracle,
    anchors: &Anchors,
    rng: &mut Rng,
) -> Result<RolloutGroup> {
    let k = config.group_size;
    let mut responses = Vec::with_capacity(k);
    let mut raw_scores = Vec::with_capacity(k);
    let mut normalized = Vec::with_capacity(k);
    let mut rewards = Vec::with_capacity(k);
    for j in 0..k {
        let sample = config.sampling.sample(params_old, prompt, rng)?;
        match oracle.score(prompt, &sample.response) {
            Ok(raw) => {
                let n = anchors.rewards(&raw, &config.weights)?;
                rewards.push(n.r_total);
                raw_scores.push(Some(raw));
                normalized.push(Some(n));
            }
            Err(e) => {
                warn!("prompt {prompt_index} response {j}: {e}; reward set to 0");
                rewards.push(0.0);
                raw_scores.push(None);
                normalized.push(None);
            }
        }
        responses.push(sample);
    }
    Ok(RolloutGroup::from_rewards(
        prompt_index,
        prompt.clone(),
        responses,
        raw_scores,
        normalized,
        rewards,
    ))
}

/// `-(1 / MK) * sum_i sum_k A_ik * log pi(y_ik | x_i)` and its gradient,
/// where M is the number of groups and K the size of each.
pub fn grpo_loss(params: &PolicyParams, groups: &[RolloutGroup]) -> Result<(f64, Gradient)> {
    let total: usize = groups.iter().map(|g| g.responses.len()).sum();
    if total == 0 {
        return Ok((0.0, Gradient::zeros_like(params)));
    }
    let scale = 1.0 / total as f64;
    let parts: Vec<Result<(f64, Gradient)>> = groups
        .par_iter()
        .map(|group| {
            let mut g = Gradient::zeros_like(params);
            let mut objective = 0.0;
            for (sample, &a) in group.responses.iter().zip(&group.advantages) {
                if a == 0.0 {
                    continue;
                }
                let lp = accumulate_log_prob_grad(params, &group.prompt, DropFlags::NONE, &sample.response, -a * scale, &mut g)?;
                objective += a * lp;
            }
            Ok((objective, g))
        })
        .collect();
    let mut objective = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for part in parts {
        let (o, g) = part?;
        objective += o;
        grads.push(g);
    }
    Ok((-objective * scale, Gradient::sum_ordered(grads, params.values.len())))
}

fn batch_means(groups: &[RolloutGroup]) -> [f64; 5] {
    let mut sum = [0.0; 5];
    let mut n = 0.0;
    for g in groups {
        for (r, (norm, raw)) in g.rewards.iter().zip(g.normalized.iter().zip(&g.raw_scores)) {
            n += 1.0;
            sum[0] += r;
            if let Some(norm) = norm {
                sum[1] += norm.r_cer;
                sum[2] += norm.r_ssim;
                sum[3] += norm.r_pesq;
            }
            sum[4] += raw.map_or(1.0, |s| s.cer);
        }
    }
    sum.map(|s| if n > 0.0 { s / n } else { 0.0 })
}

/// Online GRPO: each iteration samples `prompts_per_batch` prompts, rolls out
/// a group per prompt under the current parameters and takes one plain
/// gradient step on the objective. Validation runs at iteration 0 and every
/// `validation_interval` iterations; the best validated iterate is returned.
pub fn grpo_train(
    start: &PolicyParams,
    config: &GrpoConfig,
    prompts: &PromptSet,
    validation: &PromptSet,
    oracle: &dyn Oracle,
    anchors: &Anchors,
    seed: u64,
    sink: LogSink<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if prompts.is_empty() || validation.is_empty() {
        return Err(Error::InvalidInput("grpo needs non-empty training and validation prompts".into()));
    }
    let mut params = start.clone();
    let mut log = Vec::new();
    let mut val_iters = Vec::new();
    let mut val_scores = Vec::new();
    let mut best = params.clone();
    let val_seed = rng::derive_seed(seed, &[tag("grpo-validation")]);

    for iteration in 0..=config.max_iterations {
        if iteration > 0 {
            let mut batch_rng = rng::rng_for(seed, &[tag("grpo-batch"), iteration as u64]);
            let picks: Vec<usize> = (0..config.prompts_per_batch)
                .map(|_| batch_rng.gen_range(0..prompts.len()))
                .collect();
            let groups: Vec<Result<RolloutGroup>> = picks
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let mut r = rng::rng_for(seed, &[tag("grpo-rollout"), iteration as u64, slot as u64]);
                    rollout_group(&params, &prompts.prompts[i], i, config, oracle, anchors, &mut r)
                })
                .collect();
            let groups = groups.into_iter().collect::<Result<Vec<_>>>()?;
            let (loss, grad) = grpo_loss(&params, &groups)?;
            if !loss.is_finite() || !grad.is_finite() {
                let dump = groups
                    .iter()
                    .find(|g| g.rewards.iter().chain(&g.advantages).any(|v| !v.is_finite()))
                    .or(groups.first())
                    .map(|g| serde_json::to_string(g).unwrap_or_default())
                    .unwrap_or_default();
                return Err(Error::NonFinite(format!("grpo loss at iteration {iteration}; group: {dump}")));
            }
            params.apply(&grad, -config.learning_rate);
            let m = batch_means(&groups);
            let rec = LogRecord::Train {
                iteration,
                loss,
                mean_reward: m[0],
                mean_r_cer: m[1],
                mean_r_ssim: m[2],
                mean_r_pesq: m[3],
                mean_raw_cer: m[4],
            };
            sink(&rec)?;
            log.push(rec);
        }
        if iteration % config.validation_interval == 0 || iteration == config.max_iterations {
            let summary = validate_policy(
                &params,
                validation,
                oracle,
                anchors,
                &config.weights,
                &config.validation_sampling,
                config.validation_samples,
                val_seed,
            )?;
            let rec = LogRecord::Validation { iteration, summary };
            sink(&rec)?;
            log.push(rec);
            val_iters.push(iteration);
            let score = match config.selection {
                SelectionMetric::RCer => summary.r_cer,
                SelectionMetric::RawCer => summary.raw_cer,
                SelectionMetric::Reward => summary.reward,
            };
            val_scores.push(score);
            let best_idx = match config.selection {
                SelectionMetric::RCer | SelectionMetric::Reward => argmax_first(&val_scores),
                SelectionMetric::RawCer => argmin_first(&val_scores),
            };
            if best_idx == Some(val_scores.len() - 1) {
                best = params.clone();
            }
            info!(
                "grpo iteration {iteration}: validation R_cer {:.4}, raw CER {:.4}, SSIM {:.4}",
                summary.r_cer, summary.raw_cer, summary.raw_ssim
            );
        }
    }
    let i = match config.selection {
        SelectionMetric::RCer | SelectionMetric::Reward => argmax_first(&val_scores),
        SelectionMetric::RawCer => argmin_first(&val_scores),
    }
    .expect("validated at least once");
    Ok(TrainOutcome {
        best,
        best_step: val_iters[i],
        best_score: val_scores[i],
        final_params: params,
        log,
    })
}
