//! The autoregressive encoder-decoder policy: a non-autoregressive text
//! encoder, a causal audio decoder with cross-attention, and one output head
//! per frame channel.

mod checkpoint;
mod decode;
mod model;
pub mod nn;
mod params;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT_VERSION};
pub use decode::{cfg_combine, sample_response, RolloutSampling, SampleOptions, SampledResponse};
pub use model::{backward, forward, score_response, Conditioning, Trace};
pub use params::{init_params, Gradient, Layout, ModelConfig, PolicyParams, TensorInfo};

use crate::error::{Error, Result};
use crate::synthworld::Prompt;
use crate::tokens::{AudioFrameSeq, Frame, CHANNELS};

/// Which conditioning inputs are replaced by null embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropFlags {
    pub text: bool,
    pub context: bool,
}

impl DropFlags {
    pub const NONE: DropFlags = DropFlags {
        text: false,
        context: false,
    };
    pub const ALL: DropFlags = DropFlags {
        text: true,
        context: true,
    };
}

pub fn conditioning<'a>(p: &PolicyParams, prompt: &'a Prompt, drop: DropFlags) -> Conditioning<'a> {
    Conditioning {
        text: (!drop.text).then(|| prompt.text.tokens()),
        context: (!drop.context).then(|| prompt.context.until_eos(p.config.vocab())),
    }
}

/// Logits for the frame after `prefix`, one vector per channel.
pub fn next_frame_logits(p: &PolicyParams, prompt: &Prompt, drop: DropFlags, prefix: &[Frame]) -> Result<[Vec<f64>; CHANNELS]> {
    let trace = forward(p, &conditioning(p, prompt, drop), prefix)?;
    let last = trace.positions() - 1;
    Ok(std::array::from_fn(|ch| trace.logits_at(ch, last).to_vec()))
}

fn check_response(p: &PolicyParams, response: &AudioFrameSeq) -> Result<()> {
    if response.is_empty() {
        return Err(Error::InvalidInput("response has no frames".into()));
    }
    if response.len() > p.config.max_gen_len {
        return Err(Error::LengthExceeded {
            len: response.len(),
            max: p.config.max_gen_len,
        });
    }
    Ok(())
}

/// Teacher-forced log-likelihood of `response`, summed over frames and
/// channels, under the given conditioning.
pub fn log_prob_with(p: &PolicyParams, prompt: &Prompt, drop: DropFlags, response: &AudioFrameSeq) -> Result<f64> {
    check_response(p, response)?;
    let frames = response.frames();
    let trace = forward(p, &conditioning(p, prompt, drop), &frames[..frames.len() - 1])?;
    Ok(score_response(&trace, frames, None).0)
}

pub fn log_prob(p: &PolicyParams, prompt: &Prompt, response: &AudioFrameSeq) -> Result<f64> {
    log_prob_with(p, prompt, DropFlags::NONE, response)
}

/// Adds `scale * grad log_prob` into `grad` and returns the log-likelihood.
pub fn accumulate_log_prob_grad(
    p: &PolicyParams,
    prompt: &Prompt,
    drop: DropFlags,
    response: &AudioFrameSeq,
    scale: f64,
    grad: &mut Gradient,
) -> Result<f64> {
    check_response(p, response)?;
    let frames = response.frames();
    let trace = forward(p, &conditioning(p, prompt, drop), &frames[..frames.len() - 1])?;
    let (lp, dl) = score_response(&trace, frames, Some(scale));
    if scale != 0.0 {
        backward(p, &trace, &dl.expect("requested"), grad);
    }
    Ok(lp)
}

pub fn grad_log_prob(p: &PolicyParams, prompt: &Prompt, response: &AudioFrameSeq) -> Result<Gradient> {
    let mut g = Gradient::zeros_like(p);
    accumulate_log_prob_grad(p, prompt, DropFlags::NONE, response, 1.0, &mut g)?;
    Ok(g)
}

#[cfg(test)]
mod tests;
