use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_first, argmin_first, validate_policy, GrpoConfig, LogRecord, LogSink, SelectionMetric, TrainOutcome};
use crate::error::{Error, Result};
use crate::policy::{accumulate_log_prob_grad, log_prob, DropFlags, Gradient, PolicyParams, RolloutSampling};
use crate::rewards::{Anchors, RewardWeights};
use crate::rng::{self, tag};
use crate::synthworld::oracles::Oracle;
use crate::synthworld::{Prompt, PromptSet};
use crate::tokens::AudioFrameSeq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub delta_min: f64,
    /// Samples per prompt when building pairs.
    pub group_size: usize,
    pub sampling: RolloutSampling,
    pub pairs_per_batch: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            delta_min: 0.1,
            group_size: 6,
            sampling: RolloutSampling::default(),
            pairs_per_batch: 8,
            learning_rate: 1e-3,
            max_iterations: 300,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("dpo pairs need group_size >= 2".into()));
        }
        if !(self.beta > 0.0) || !(self.learning_rate > 0.0) || self.pairs_per_batch == 0 {
            return Err(Error::Config("dpo beta, learning rate and batch size must be positive".into()));
        }
        if !(self.delta_min >= 0.0) {
            return Err(Error::Config("dpo delta_min must be nonnegative".into()));
        }
        self.sampling.validate()
    }
}

/// Winner and loser responses for one prompt, with the reference policy's
/// log-likelihoods cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub winner: AudioFrameSeq,
    pub loser: AudioFrameSeq,
    pub winner_reward: f64,
    pub loser_reward: f64,
    pub ref_logp_winner: f64,
    pub ref_logp_loser: f64,
}

impl PreferencePair {
    pub fn gap(&self) -> f64 {
        self.winner_reward - self.loser_reward
    }
}

/// Indices of the best and worst rewards (earliest on ties), or `None` when
/// their gap is below `delta_min`.
pub fn pick_pair(rewards: &[f64], delta_min: f64) -> Option<(usize, usize)> {
    let w = argmax_first(rewards)?;
    let l = argmin_first(rewards)?;
    (w != l && rewards[w] - rewards[l] >= delta_min).then_some((w, l))
}

/// Sample `group_size` responses per prompt from `params` and keep the
/// extreme pair where the reward gap is at least `delta_min`.
pub fn build_preference_pairs(
    params: &PolicyParams,
    prompts: &PromptSet,
    config: &DpoConfig,
    oracle: &dyn Oracle,
    anchors: &Anchors,
    weights: &RewardWeights,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    config.validate()?;
    let per_prompt: Vec<Result<Option<PreferencePair>>> = prompts
        .prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut r = rng::rng_for(seed, &[tag("dpo-pairs"), i as u64]);
            let mut samples = Vec::with_capacity(config.group_size);
            let mut rewards = Vec::with_capacity(config.group_size);
            for _ in 0..config.group_size {
                let s = config.sampling.sample(params, prompt, &mut r)?;
                let reward = match oracle.score(prompt, &s.response) {
                    Ok(raw) => anchors.rewards(&raw, weights)?.r_total,
                    Err(_) => 0.0,
                };
                samples.push(s);
                rewards.push(reward);
            }
            Ok(pick_pair(&rewards, config.delta_min).map(|(w, l)| PreferencePair {
                prompt: prompt.clone(),
                winner: samples[w].response.clone(),
                loser: samples[l].response.clone(),
                winner_reward: rewards[w],
                loser_reward: rewards[l],
                ref_logp_winner: samples[w].logprob_conditional,
                ref_logp_loser: samples[l].logprob_conditional,
            }))
        })
        .collect();
    let mut pairs = Vec::new();
    for p in per_prompt {
        pairs.extend(p?);
    }
    Ok(pairs)
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dpo_loss_cached(params: &PolicyParams, pairs: &[&PreferencePair], beta: f64) -> Result<(f64, Gradient)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("dpo needs at least one preference pair".into()));
    }
    let n = pairs.len() as f64;
    let parts: Vec<Result<(f64, Gradient)>> = pairs
        .par_iter()
        .map(|pair| {
            let lw = log_prob(params, &pair.prompt, &pair.winner)?;
            let ll = log_prob(params, &pair.prompt, &pair.loser)?;
            let margin = beta * ((lw - pair.ref_logp_winner) - (ll - pair.ref_logp_loser));
            // d(-log sigmoid(m))/dm = -sigmoid(-m)
            let c = -sigmoid(-margin) * beta / n;
            let mut g = Gradient::zeros_like(params);
            accumulate_log_prob_grad(params, &pair.prompt, DropFlags::NONE, &pair.winner, c, &mut g)?;
            accumulate_log_prob_grad(params, &pair.prompt, DropFlags::NONE, &pair.loser, -c, &mut g)?;
            Ok((-log_sigmoid(margin), g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.push(g);
    }
    Ok((loss / n, Gradient::sum_ordered(grads, params.values.len())))
}

/// `-mean log sigmoid(beta * margin)` against a frozen reference, and its
/// gradient with respect to `params`.
pub fn dpo_loss(params: &PolicyParams, reference: &PolicyParams, pairs: &[PreferencePair], beta: f64) -> Result<(f64, Gradient)> {
    let refreshed: Vec<PreferencePair> = pairs
        .iter()
        .map(|p| {
            Ok(PreferencePair {
                ref_logp_winner: log_prob(reference, &p.prompt, &p.winner)?,
                ref_logp_loser: log_prob(reference, &p.prompt, &p.loser)?,
                ..p.clone()
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&PreferencePair> = refreshed.iter().collect();
    dpo_loss_cached(params, &refs, beta)
}

/// Plain gradient descent on the DPO loss over shuffled mini-batches of
/// pairs, with the same validation and selection schedule as GRPO.
pub fn dpo_train(
    start: &PolicyParams,
    pairs: &[PreferencePair],
    config: &DpoConfig,
    validation: &PromptSet,
    selection: &GrpoConfig,
    oracle: &dyn Oracle,
    anchors: &Anchors,
    seed: u64,
    sink: LogSink<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no preference pairs survived the reward-gap filter".into()));
    }
    let mut params = start.clone();
    let mut log = Vec::new();
    let mut val_iters = Vec::new();
    let mut val_scores = Vec::new();
    let mut best = params.clone();
    let val_seed = rng::derive_seed(seed, &[tag("grpo-validation")]);
    let mut order: Vec<usize> = Vec::new();
    let mut shuffle_rng = rng::rng_for(seed, &[tag("dpo-shuffle")]);

    for iteration in 0..=config.max_iterations {
        if iteration > 0 {
            let mut batch = Vec::with_capacity(config.pairs_per_batch);
            while batch.len() < config.pairs_per_batch.min(pairs.len()) {
                if order.is_empty() {
                    order = (0..pairs.len()).collect();
                    order.shuffle(&mut shuffle_rng);
                }
                batch.push(&pairs[order.pop().expect("refilled above")]);
            }
            let (loss, grad) = dpo_loss_cached(&params, &batch, config.beta)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!("dpo loss at iteration {iteration}")));
            }
            params.apply(&grad, -config.learning_rate);
            let rec = LogRecord::Dpo { iteration, loss };
            sink(&rec)?;
            log.push(rec);
        }
        if iteration % selection.validation_interval == 0 || iteration == config.max_iterations {
            let summary = validate_policy(
                &params,
                validation,
                oracle,
                anchors,
                &selection.weights,
                &selection.validation_sampling,
                selection.validation_samples,
                val_seed,
            )?;
            let rec = LogRecord::Validation { iteration, summary };
            sink(&rec)?;
            log.push(rec);
            val_iters.push(iteration);
            val_scores.push(match selection.selection {
                SelectionMetric::RCer => summary.r_cer,
                SelectionMetric::RawCer => -summary.raw_cer,
                SelectionMetric::Reward => summary.reward,
            });
            if argmax_first(&val_scores) == Some(val_scores.len() - 1) {
                best = params.clone();
            }
            info!("dpo iteration {iteration}: validation R_cer {:.4}, raw CER {:.4}", summary.r_cer, summary.raw_cer);
        }
    }
    let i = argmax_first(&val_scores).expect("validated at least once");
    Ok(TrainOutcome {
        best,
        best_step: val_iters[i],
        best_score: val_scores[i],
        final_params: params,
        log,
    })
}
