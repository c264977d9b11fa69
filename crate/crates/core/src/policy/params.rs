//! Model configuration, parameter layout and the flat parameter store.

use std::ops::Range;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tokens::{FrameVocab, CHANNELS, TEXT_VOCAB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ffn_width: usize,
    pub vocab_size: u32,
    pub max_text_len: usize,
    pub max_context_len: usize,
    pub max_gen_len: usize,
    /// Probability of replacing all conditioning with null embeddings
    /// during supervised training.
    pub p_drop: f64,
    pub param_budget: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            heads: 4,
            encoder_blocks: 1,
            decoder_blocks: 2,
            ffn_width: 64,
            vocab_size: 256,
            max_text_len: 16,
            max_context_len: 8,
            max_gen_len: 40,
            p_drop: 0.1,
            param_budget: 1_000_000,
        }
    }
}

impl ModelConfig {
    /// A model small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            width: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ffn_width: 16,
            vocab_size: 16,
            max_text_len: 6,
            max_context_len: 4,
            max_gen_len: 8,
            p_drop: 0.1,
            param_budget: 5_000,
        }
    }

    pub fn vocab(&self) -> FrameVocab {
        FrameVocab { size: self.vocab_size }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Generation cap for a text of `text_len` symbols.
    pub fn gen_limit(&self, text_len: usize) -> usize {
        (2 * text_len + 8).min(self.max_gen_len)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.ffn_width == 0 {
            return fail("width, heads and ffn_width must be positive".into());
        }
        if self.width % self.heads != 0 {
            return fail(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return fail(format!("p_drop {} outside [0, 1)", self.p_drop));
        }
        if self.max_text_len == 0 || self.max_context_len == 0 || self.max_gen_len == 0 {
            return fail("maximum lengths must be positive".into());
        }
        FrameVocab::new(self.vocab_size)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    init: Init,
}

/// Index of a tensor within a [`Layout`].
pub type Tid = usize;

#[derive(Debug, Clone, Copy)]
pub struct LnIdx {
    pub g: Tid,
    pub b: Tid,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: Tid,
    pub wk: Tid,
    pub wv: Tid,
    pub wo: Tid,
    pub bo: Tid,
}

#[derive(Debug, Clone, Copy)]
pub struct FfIdx {
    pub w1: Tid,
    pub b1: Tid,
    pub w2: Tid,
    pub b2: Tid,
}

#[derive(Debug, Clone, Copy)]
pub struct EncBlockIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ff: FfIdx,
}

#[derive(Debug, Clone, Copy)]
pub struct DecBlockIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub ff: FfIdx,
}

/// Named tensors packed into one flat buffer, in a fixed order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub text_emb: Tid,
    pub text_pos: Tid,
    pub null_text: Tid,
    pub frame_emb: [Tid; CHANNELS],
    pub ctx_pos: Tid,
    pub gen_pos: Tid,
    pub null_ctx: Tid,
    pub enc: Vec<EncBlockIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecBlockIdx>,
    pub dec_ln: LnIdx,
    pub head_w: [Tid; CHANNELS],
    pub head_b: [Tid; CHANNELS],
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Tid {
        let len: usize = shape.iter().product();
        self.tensors.push(TensorInfo {
            name,
            shape: shape.to_vec(),
            range: self.total..self.total + len,
            init,
        });
        self.total += len;
        self.tensors.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{prefix}.g"), &[d], Init::Ones),
            b: self.add(format!("{prefix}.b"), &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let s = Init::Normal(1.0 / (d as f64).sqrt());
        AttnIdx {
            wq: self.add(format!("{prefix}.wq"), &[d, d], s),
            wk: self.add(format!("{prefix}.wk"), &[d, d], s),
            wv: self.add(format!("{prefix}.wv"), &[d, d], s),
            wo: self.add(format!("{prefix}.wo"), &[d, d], s),
            bo: self.add(format!("{prefix}.bo"), &[d], Init::Zeros),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize) -> FfIdx {
        FfIdx {
            w1: self.add(format!("{prefix}.w1"), &[d, f], Init::Normal(1.0 / (d as f64).sqrt())),
            b1: self.add(format!("{prefix}.b1"), &[f], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), &[f, d], Init::Normal(1.0 / (f as f64).sqrt())),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        let v = cfg.vocab_size as usize;
        let emb = Init::Normal(1.0 / (d as f64).sqrt());
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let text_emb = b.add("text_emb".into(), &[TEXT_VOCAB, d], emb);
        let text_pos = b.add("text_pos".into(), &[cfg.max_text_len, d], emb);
        let null_text = b.add("null_text".into(), &[1, d], emb);
        let frame_emb = [
            b.add("frame_emb.content".into(), &[v, d], emb),
            b.add("frame_emb.speaker".into(), &[v, d], emb),
        ];
        let ctx_pos = b.add("ctx_pos".into(), &[cfg.max_context_len, d], emb);
        let gen_pos = b.add("gen_pos".into(), &[cfg.max_gen_len, d], emb);
        let null_ctx = b.add("null_ctx".into(), &[1, d], emb);
        let enc = (0..cfg.encoder_blocks)
            .map(|i| EncBlockIdx {
                ln1: b.ln(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d),
                ln2: b.ln(&format!("enc.{i}.ln2"), d),
                ff: b.ff(&format!("enc.{i}.ff"), d, cfg.ffn_width),
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec = (0..cfg.decoder_blocks)
            .map(|i| DecBlockIdx {
                ln1: b.ln(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self_attn"), d),
                ln2: b.ln(&format!("dec.{i}.ln2"), d),
                cross: b.attn(&format!("dec.{i}.cross_attn"), d),
                ln3: b.ln(&format!("dec.{i}.ln3"), d),
                ff: b.ff(&format!("dec.{i}.ff"), d, cfg.ffn_width),
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        // Output heads start at zero so an untrained policy is exactly uniform.
        let head_w = [
            b.add("head.content.w".into(), &[d, v], Init::Zeros),
            b.add("head.speaker.w".into(), &[d, v], Init::Zeros),
        ];
        let head_b = [
            b.add("head.content.b".into(), &[v], Init::Zeros),
            b.add("head.speaker.b".into(), &[v], Init::Zeros),
        ];
        Layout {
            tensors: b.tensors,
            total: b.total,
            text_emb,
            text_pos,
            null_text,
            frame_emb,
            ctx_pos,
            gen_pos,
            null_ctx,
            enc,
            enc_ln,
            dec,
            dec_ln,
            head_w,
            head_b,
        }
    }

    pub fn range(&self, t: Tid) -> Range<usize> {
        self.tensors[t].range.clone()
    }
}

/// All weights of the policy, flat, with the layout that names them.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub values: Vec<f64>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

/// Gradient buffer with the same shape as [`PolicyParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        Gradient(vec![0.0; p.values.len()])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    /// Sum in the given order, so reductions are reproducible.
    pub fn sum_ordered(parts: impl IntoIterator<Item = Gradient>, len: usize) -> Gradient {
        let mut total = Gradient(vec![0.0; len]);
        for p in parts {
            total.add_scaled(&p, 1.0);
        }
        total
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<PolicyParams> {
    config.validate()?;
    let layout = Layout::new(config);
    if layout.total > config.param_budget {
        return Err(Error::Config(format!(
            "model has {} parameters, over the budget of {}",
            layout.total, config.param_budget
        )));
    }
    let mut rng = rng::rng_for(seed, &[rng::tag("init")]);
    let mut values = vec![0.0; layout.total];
    for t in &layout.tensors {
        let slot = &mut values[t.range.clone()];
        match t.init {
            Init::Zeros => {}
            Init::Ones => slot.fill(1.0),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                slot.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
        }
    }
    Ok(PolicyParams {
        config: config.clone(),
        layout: Arc::new(layout),
        values,
    })
}

impl PolicyParams {
    pub fn t(&self, id: Tid) -> &[f64] {
        &self.values[self.layout.range(id)]
    }

    pub fn row(&self, id: Tid, row: usize) -> &[f64] {
        let d = self.config.width;
        &self.t(id)[row * d..(row + 1) * d]
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `values += scale * grad`.
    pub fn apply(&mut self, grad: &Gradient, scale: f64) {
        for (v, g) in self.values.iter_mut().zip(&grad.0) {
            *v += scale * g;
        }
    }

    pub fn distance(&self, other: &PolicyParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Gradient {
    pub fn t_mut(&mut self, layout: &Layout, id: Tid) -> &mut [f64] {
        &mut self.0[layout.range(id)]
    }

    /// Two disjoint tensors at once.
    pub fn pair_mut(&mut self, layout: &Layout, a: Tid, b: Tid) -> (&mut [f64], &mut [f64]) {
        let (ra, rb) = (layout.range(a), layout.range(b));
        assert!(ra.end <= rb.start || rb.end <= ra.start, "tensors overlap");
        if ra.start < rb.start {
            let (lo, hi) = self.0.split_at_mut(rb.start);
            (&mut lo[ra], &mut hi[..rb.end - rb.start])
        } else {
            let (lo, hi) = self.0.split_at_mut(ra.start);
            (&mut hi[..ra.end - ra.start], &mut lo[rb])
        }
    }
}
