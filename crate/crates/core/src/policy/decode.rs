//! Incremental decoding with per-block key/value caches, and sampling with
//! optional classifier-free guidance.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{self, Conditioning};
use super::nn;
use super::params::PolicyParams;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthworld::Prompt;
use crate::tokens::{AudioFrameSeq, Frame, CHANNELS, CONTENT, SPEAKER, SPEAKER_PAD};

struct CrossKv {
    k: Vec<f64>,
    v: Vec<f64>,
    rows: usize,
}

/// Decoder state for one conditioning, advanced one row at a time.
pub(crate) struct DecoderState<'p> {
    p: &'p PolicyParams,
    cross: Vec<CrossKv>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    rows: usize,
    gen_pos: usize,
}

fn attend(q: &[f64], k: &[f64], v: &[f64], rows: usize, d: usize, heads: usize, out: &mut [f64], scores: &mut Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    out.fill(0.0);
    scores.resize(rows, 0.0);
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for j in 0..rows {
            scores[j] = nn::dot(&q[hs.clone()], &k[j * d..][hs.clone()]) * scale;
        }
        nn::softmax_in_place(&mut scores[..rows]);
        for j in 0..rows {
            for (o, &x) in out[hs.clone()].iter_mut().zip(&v[j * d..][hs.clone()]) {
                *o += scores[j] * x;
            }
        }
    }
}

impl<'p> DecoderState<'p> {
    pub(crate) fn new(p: &'p PolicyParams, cond: &Conditioning) -> Result<Self> {
        model::check_conditioning(p, cond)?;
        let d = p.config.width;
        let (mem, mem_rows, _, _) = model::encode(p, cond.text);
        let cross = p
            .layout
            .dec
            .iter()
            .map(|ix| CrossKv {
                k: nn::linear(&mem, mem_rows, d, p.t(ix.cross.wk), None, d),
                v: nn::linear(&mem, mem_rows, d, p.t(ix.cross.wv), None, d),
                rows: mem_rows,
            })
            .collect();
        let n = p.layout.dec.len();
        let mut state = DecoderState {
            p,
            cross,
            self_k: vec![Vec::new(); n],
            self_v: vec![Vec::new(); n],
            rows: 0,
            gen_pos: 0,
        };
        match cond.context {
            Some(ctx) => {
                for (j, f) in ctx.iter().enumerate() {
                    let mut x = p.row(p.layout.ctx_pos, j).to_vec();
                    model::frame_embedding(p, f, &mut x);
                    state.push_row(x);
                }
            }
            None => {
                state.push_row(p.t(p.layout.null_ctx).to_vec());
            }
        }
        Ok(state)
    }

    fn push_row(&mut self, mut x: Vec<f64>) -> Vec<f64> {
        let p = self.p;
        let d = p.config.width;
        let heads = p.config.heads;
        let mut o = vec![0.0; d];
        let mut scores = Vec::new();
        for (bi, ix) in p.layout.dec.iter().enumerate() {
            let (a, _) = nn::layer_norm(&x, 1, d, p.t(ix.ln1.g), p.t(ix.ln1.b));
            let q = nn::linear(&a, 1, d, p.t(ix.self_attn.wq), None, d);
            self.self_k[bi].extend(nn::linear(&a, 1, d, p.t(ix.self_attn.wk), None, d));
            self.self_v[bi].extend(nn::linear(&a, 1, d, p.t(ix.self_attn.wv), None, d));
            attend(&q, &self.self_k[bi], &self.self_v[bi], self.rows + 1, d, heads, &mut o, &mut scores);
            let sa = nn::linear(&o, 1, d, p.t(ix.self_attn.wo), Some(p.t(ix.self_attn.bo)), d);
            nn::add_assign(&mut x, &sa);

            let (b, _) = nn::layer_norm(&x, 1, d, p.t(ix.ln2.g), p.t(ix.ln2.b));
            let q = nn::linear(&b, 1, d, p.t(ix.cross.wq), None, d);
            let kv = &self.cross[bi];
            attend(&q, &kv.k, &kv.v, kv.rows, d, heads, &mut o, &mut scores);
            let ca = nn::linear(&o, 1, d, p.t(ix.cross.wo), Some(p.t(ix.cross.bo)), d);
            nn::add_assign(&mut x, &ca);

            let (c, _) = nn::layer_norm(&x, 1, d, p.t(ix.ln3.g), p.t(ix.ln3.b));
            let f = p.config.ffn_width;
            let pre = nn::linear(&c, 1, d, p.t(ix.ff.w1), Some(p.t(ix.ff.b1)), f);
            let act: Vec<f64> = pre.iter().map(|&z| nn::gelu(z)).collect();
            let ff = nn::linear(&act, 1, f, p.t(ix.ff.w2), Some(p.t(ix.ff.b2)), d);
            nn::add_assign(&mut x, &ff);
        }
        self.rows += 1;
        nn::layer_norm(&x, 1, d, p.t(p.layout.dec_ln.g), p.t(p.layout.dec_ln.b)).0
    }

    /// Feed the next generated-side input (BOS first) and return the logits
    /// for the frame that follows it.
    pub(crate) fn step(&mut self, input: &Frame) -> Result<[Vec<f64>; CHANNELS]> {
        let p = self.p;
        if self.gen_pos >= p.config.max_gen_len {
            return Err(Error::LengthExceeded {
                len: self.gen_pos + 1,
                max: p.config.max_gen_len,
            });
        }
        model::check_frame(p, input)?;
        let mut x = p.row(p.layout.gen_pos, self.gen_pos).to_vec();
        model::frame_embedding(p, input, &mut x);
        self.gen_pos += 1;
        let h = self.push_row(x);
        let d = p.config.width;
        let v = p.config.vocab_size as usize;
        Ok(std::array::from_fn(|ch| {
            nn::linear(&h, 1, d, p.t(p.layout.head_w[ch]), Some(p.t(p.layout.head_b[ch])), v)
        }))
    }
}

/// Decoding settings for [`sample_response`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    pub temperature: f64,
    /// Take the argmax instead of sampling; the zero-temperature limit.
    #[serde(default)]
    pub greedy: bool,
    /// Guidance scale, or `None` for plain conditional decoding.
    #[serde(default)]
    pub cfg_scale: Option<f64>,
}

impl SampleOptions {
    pub fn sampled(temperature: f64) -> Self {
        SampleOptions {
            temperature,
            greedy: false,
            cfg_scale: None,
        }
    }

    pub fn greedy() -> Self {
        SampleOptions {
            temperature: 1.0,
            greedy: true,
            cfg_scale: None,
        }
    }

    pub fn with_cfg(mut self, scale: Option<f64>) -> Self {
        self.cfg_scale = scale;
        self
    }
}

/// Rollout sampling: temperature sampling, with guidance switched on per
/// response with probability `cfg_probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSampling {
    pub temperature: f64,
    pub cfg_probability: f64,
    pub cfg_scale: f64,
}

impl Default for RolloutSampling {
    fn default() -> Self {
        RolloutSampling {
            temperature: 0.7,
            cfg_probability: 0.5,
            cfg_scale: 2.5,
        }
    }
}

impl RolloutSampling {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(0.0..=1.0).contains(&self.cfg_probability) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("invalid rollout sampling settings {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, p: &PolicyParams, prompt: &Prompt, rng: &mut Rng) -> Result<SampledResponse> {
        let guided = rng.gen::<f64>() < self.cfg_probability;
        let opts = SampleOptions::sampled(self.temperature).with_cfg(guided.then_some(self.cfg_scale));
        sample_response(p, prompt, &opts, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub response: AudioFrameSeq,
    /// Log-likelihood under the conditional policy at temperature 1,
    /// whatever the sampling path.
    pub logprob_conditional: f64,
    pub sampled_with_cfg: bool,
    pub cfg_scale: f64,
}

/// `uncond + scale * (cond - uncond)`, elementwise.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| u + scale * (c - u)).collect()
}

fn draw(logits: &[f64], opts: &SampleOptions, rng: &mut Rng) -> usize {
    if opts.greedy {
        return logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
    }
    let mut probs: Vec<f64> = logits.iter().map(|l| l / opts.temperature).collect();
    nn::softmax_in_place(&mut probs);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Autoregressively sample one response, stopping at EOS or at the length
/// cap `2 |text| + 8`. When the content channel emits EOS the speaker channel
/// is pinned to the pad id, matching reference renderings.
pub fn sample_response(p: &PolicyParams, prompt: &Prompt, opts: &SampleOptions, rng: &mut Rng) -> Result<SampledResponse> {
    if !opts.greedy && !(opts.temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "sampling temperature must be positive, got {}",
            opts.temperature
        )));
    }
    let vocab = p.config.vocab();
    let context = prompt.context.until_eos(vocab);
    let cond = Conditioning {
        text: Some(prompt.text.tokens()),
        context: Some(context),
    };
    let mut cond_state = DecoderState::new(p, &cond)?;
    let mut uncond_state = match opts.cfg_scale {
        Some(_) => Some(DecoderState::new(p, &Conditioning::unconditional())?),
        None => None,
    };
    let limit = p.config.gen_limit(prompt.text.len());
    let mut frames: Vec<Frame> = Vec::with_capacity(limit);
    let mut logprob = 0.0;
    let mut input = vocab.bos_frame();
    while frames.len() < limit {
        let cond_logits = cond_state.step(&input)?;
        let guided = match (&mut uncond_state, opts.cfg_scale) {
            (Some(u), Some(scale)) => {
                let ul = u.step(&input)?;
                std::array::from_fn(|ch| cfg_combine(&cond_logits[ch], &ul[ch], scale))
            }
            _ => cond_logits.clone(),
        };
        let mut frame: Frame = [0; CHANNELS];
        frame[CONTENT] = draw(&guided[CONTENT], opts, rng) as u32;
        frame[SPEAKER] = if frame[CONTENT] == vocab.eos() {
            SPEAKER_PAD
        } else {
            draw(&guided[SPEAKER], opts, rng) as u32
        };
        for ch in 0..CHANNELS {
            logprob += nn::log_softmax(&cond_logits[ch])[frame[ch] as usize];
        }
        frames.push(frame);
        if frame[CONTENT] == vocab.eos() {
            break;
        }
        input = frame;
    }
    Ok(SampledResponse {
        response: AudioFrameSeq::new(frames),
        logprob_conditional: logprob,
        sampled_with_cfg: opts.cfg_scale.is_some(),
        cfg_scale: opts.cfg_scale.unwrap_or(1.0),
    })
}
