use log::info;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::{argmin_first, LogRecord, LogSink, TrainOutcome};
use crate::error::{Error, Result};
use crate::policy::{accumulate_log_prob_grad, log_prob, DropFlags, Gradient, PolicyParams};
use crate::rng::{self, tag, Rng};
use crate::synthworld::PairedExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub optimizer: AdamConfig,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Multiplier on the natural share of low-resource examples.
    pub upsample_factor: f64,
    pub validate_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            optimizer: AdamConfig::with_lr(3e-3),
            max_steps: 1000,
            batch_size: 16,
            upsample_factor: 5.0,
            validate_every: 100,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("sft batch_size and validate_every must be positive".into()));
        }
        if !(self.upsample_factor >= 1.0) {
            return Err(Error::Config(format!(
                "upsample_factor must be at least 1, got {}",
                self.upsample_factor
            )));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("sft learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn target_frames(batch: &[&PairedExample]) -> usize {
    batch.iter().map(|ex| ex.target_audio.len()).sum()
}

/// Mean over target frames of the per-frame cross-entropy summed over
/// channels, and its gradient. `drops[i]` selects the null conditioning for
/// example `i`.
pub fn sft_loss(params: &PolicyParams, batch: &[&PairedExample], drops: &[DropFlags]) -> Result<(f64, Gradient)> {
    if batch.is_empty() || batch.len() != drops.len() {
        return Err(Error::InvalidInput("sft batch must be non-empty with one drop flag per example".into()));
    }
    let n = target_frames(batch) as f64;
    let parts: Vec<Result<(f64, Gradient)>> = batch
        .par_iter()
        .zip(drops.par_iter())
        .map(|(ex, drop)| {
            let mut g = Gradient::zeros_like(params);
            let lp = accumulate_log_prob_grad(params, &ex.prompt(), *drop, &ex.target_audio, -1.0 / n, &mut g)?;
            Ok((lp, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for part in parts {
        let (lp, g) = part?;
        loss -= lp;
        grads.push(g);
    }
    Ok((loss / n, Gradient::sum_ordered(grads, params.values.len())))
}

/// One stochastic step: each example independently loses both conditioning
/// inputs with probability `p_drop`.
pub fn sft_step(params: &PolicyParams, batch: &[&PairedExample], p_drop: f64, rng: &mut Rng) -> Result<(f64, Gradient)> {
    let drops: Vec<DropFlags> = batch
        .iter()
        .map(|_| {
            if rng.gen::<f64>() < p_drop {
                DropFlags::ALL
            } else {
                DropFlags::NONE
            }
        })
        .collect();
    sft_loss(params, batch, &drops)
}

/// Per-frame cross-entropy on held-out examples with full conditioning.
pub fn validation_loss(params: &PolicyParams, examples: &[PairedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    let lps: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| log_prob(params, &ex.prompt(), &ex.target_audio))
        .collect();
    let mut total = 0.0;
    for lp in lps {
        total -= lp?;
    }
    let frames: usize = examples.iter().map(|ex| ex.target_audio.len()).sum();
    Ok(total / frames as f64)
}

/// Seeded infinite stream over a pretraining pool and a low-resource pool.
/// Each draw picks the low-resource pool with probability
/// `min(1, factor * natural share)`, then an example uniformly.
#[derive(Debug, Clone)]
pub struct MixedStream<'a> {
    pretrain: &'a [PairedExample],
    lowres: &'a [PairedExample],
    lowres_share: f64,
    rng: Rng,
}

impl<'a> MixedStream<'a> {
    /// Uniform draws from a single pool.
    pub fn uniform(pool: &'a [PairedExample], seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidInput("training pool is empty".into()));
        }
        Ok(MixedStream {
            pretrain: pool,
            lowres: &[],
            lowres_share: 0.0,
            rng: rng::rng_for(seed, &[tag("mix")]),
        })
    }

    pub fn lowres_share(&self) -> f64 {
        self.lowres_share
    }

    /// Whether the next draw comes from the low-resource pool, and its index.
    pub fn next_source(&mut self) -> (bool, usize) {
        let low = self.pretrain.is_empty() || self.rng.gen::<f64>() < self.lowres_share;
        let pool = if low { self.lowres } else { self.pretrain };
        (low, self.rng.gen_range(0..pool.len()))
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<&'a PairedExample> {
        (0..n).map(|_| self.next().expect("stream is infinite")).collect()
    }
}

impl<'a> Iterator for MixedStream<'a> {
    type Item = &'a PairedExample;

    fn next(&mut self) -> Option<&'a PairedExample> {
        let (low, i) = self.next_source();
        Some(if low { &self.lowres[i] } else { &self.pretrain[i] })
    }
}

pub fn mix_datasets<'a>(
    pretrain: &'a [PairedExample],
    lowres: &'a [PairedExample],
    upsample_factor: f64,
    seed: u64,
) -> Result<MixedStream<'a>> {
    if pretrain.is_empty() || lowres.is_empty() {
        return Err(Error::InvalidInput("both pools must be non-empty to mix".into()));
    }
    if !(upsample_factor >= 1.0) {
        return Err(Error::InvalidInput(format!("upsample factor {upsample_factor} is below 1")));
    }
    let natural = lowres.len() as f64 / (lowres.len() + pretrain.len()) as f64;
    Ok(MixedStream {
        pretrain,
        lowres,
        lowres_share: (upsample_factor * natural).min(1.0),
        rng: rng::rng_for(seed, &[tag("mix")]),
    })
}

/// Adam on the next-frame loss, validating at step 0, every
/// `validate_every` steps and at the end. Returns the iterate with the
/// lowest validation loss.
pub fn sft_train(
    start: &PolicyParams,
    stream: &mut MixedStream<'_>,
    validation: &[PairedExample],
    config: &SftConfig,
    seed: u64,
    sink: LogSink<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = start.clone();
    let mut opt = Adam::new(config.optimizer, params.values.len());
    let mut drop_rng = rng::rng_for(seed, &[tag("sft-drop")]);
    let mut log = Vec::new();
    let mut val_steps = Vec::new();
    let mut val_losses = Vec::new();
    let mut best = params.clone();

    for step in 0..=config.max_steps {
        if step > 0 {
            let batch = stream.next_batch(config.batch_size);
            let (loss, grad) = sft_step(&params, &batch, params.config.p_drop, &mut drop_rng)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!("sft loss at step {step}")));
            }
            opt.step(&mut params, &grad);
            let rec = LogRecord::Sft { step, loss };
            sink(&rec)?;
            log.push(rec);
        }
        if step % config.validate_every == 0 || step == config.max_steps {
            let loss = validation_loss(&params, validation)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("validation loss at step {step}")));
            }
            let rec = LogRecord::SftValidation { step, loss };
            sink(&rec)?;
            log.push(rec);
            val_steps.push(step);
            val_losses.push(loss);
            if argmin_first(&val_losses) == Some(val_losses.len() - 1) {
                best = params.clone();
            }
            info!("sft step {step}: validation loss {loss:.4}");
        }
    }
    let i = argmin_first(&val_losses).expect("validated at least once");
    Ok(TrainOutcome {
        best,
        best_step: val_steps[i],
        best_score: val_losses[i],
        final_params: params,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::tiny_world;
    use crate::synthworld::make_paired_dataset;

    #[test]
    fn mixing_frequencies() {
        let w = tiny_world();
        let pre = make_paired_dataset(&w, 0, 98, 1).unwrap();
        let low = make_paired_dataset(&w, 1, 2, 1).unwrap();
        let mut s = mix_datasets(&pre, &low, 5.0, 3).unwrap();
        assert!((s.lowres_share() - 0.1).abs() < 1e-12);
        let n = 10_000;
        let hits = (0..n).filter(|_| s.next_source().0).count();
        let share = hits as f64 / n as f64;
        assert!((share - 0.1).abs() < 0.01, "{share}");

        let mut s = mix_datasets(&pre, &low, 1.0, 3).unwrap();
        let hits = (0..n).filter(|_| s.next_source().0).count();
        assert!((hits as f64 / n as f64 - 0.02).abs() < 0.005);

        assert!(mix_datasets(&pre, &[], 5.0, 3).is_err());
        assert!(mix_datasets(&pre, &low, 0.5, 3).is_err());
        let a: Vec<_> = mix_datasets(&pre, &low, 5.0, 9).unwrap().take(50).collect();
        let b: Vec<_> = mix_datasets(&pre, &low, 5.0, 9).unwrap().take(50).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn share_is_capped_at_one() {
        let w = tiny_world();
        let pre = make_paired_dataset(&w, 0, 2, 1).unwrap();
        let low = make_paired_dataset(&w, 1, 8, 1).unwrap();
        let mut s = mix_datasets(&pre, &low, 5.0, 3).unwrap();
        assert_eq!(s.lowres_share(), 1.0);
        assert!((0..100).all(|_| s.next_source().0));
    }
}
