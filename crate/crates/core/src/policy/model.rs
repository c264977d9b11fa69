//! Teacher-forced forward and backward passes of the encoder-decoder.
//!
//! Decoder rows are laid out as `[context frames | BOS | prefix frames]`;
//! logits are produced for the BOS row and every prefix row, so row `t`
//! predicts response frame `t`. Context rows carry no loss.

use super::nn::{self, LnCache};
use super::params::{AttnIdx, DecBlockIdx, EncBlockIdx, FfIdx, Gradient, Layout, LnIdx, PolicyParams};
use crate::error::{Error, Result};
use crate::tokens::{Frame, TextToken, CHANNELS};

/// What the decoder is conditioned on. `None` means the input is replaced by
/// its learned null embedding.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub text: Option<&'a [TextToken]>,
    pub context: Option<&'a [Frame]>,
}

impl<'a> Conditioning<'a> {
    pub fn unconditional() -> Self {
        Conditioning {
            text: None,
            context: None,
        }
    }
}

fn ln_fwd(p: &PolicyParams, ix: LnIdx, x: &[f64], rows: usize) -> (Vec<f64>, LnCache) {
    nn::layer_norm(x, rows, p.config.width, p.t(ix.g), p.t(ix.b))
}

fn ln_bwd(p: &PolicyParams, ix: LnIdx, dy: &[f64], cache: &LnCache, rows: usize, grad: &mut Gradient) -> Vec<f64> {
    let (dg, db) = grad.pair_mut(&p.layout, ix.g, ix.b);
    nn::layer_norm_backward(dy, cache, rows, p.config.width, p.t(ix.g), dg, db)
}

pub(crate) struct AttnCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    lq: usize,
    lk: usize,
}

/// Multi-head attention. With `causal`, query `i` sees keys `0..=i`.
fn attn_fwd(p: &PolicyParams, ix: AttnIdx, xq: &[f64], lq: usize, xkv: &[f64], lk: usize, causal: bool) -> (Vec<f64>, AttnCache) {
    let d = p.config.width;
    let heads = p.config.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = nn::linear(xq, lq, d, p.t(ix.wq), None, d);
    let k = nn::linear(xkv, lk, d, p.t(ix.wk), None, d);
    let v = nn::linear(xkv, lk, d, p.t(ix.wv), None, d);
    let mut probs = vec![0.0; heads * lq * lk];
    let mut o = vec![0.0; lq * d];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..lq {
            let visible = if causal { i + 1 } else { lk };
            let row = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let qi = &q[i * d..][hs.clone()];
            for (j, r) in row.iter_mut().enumerate().take(visible) {
                *r = nn::dot(qi, &k[j * d..][hs.clone()]) * scale;
            }
            nn::softmax_in_place(&mut row[..visible]);
            let oi = &mut o[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..visible {
                let pij = row[j];
                for (ov, &vv) in oi.iter_mut().zip(&v[j * d + h * dh..j * d + (h + 1) * dh]) {
                    *ov += pij * vv;
                }
            }
        }
    }
    let out = nn::linear(&o, lq, d, p.t(ix.wo), Some(p.t(ix.bo)), d);
    (
        out,
        AttnCache {
            xq: xq.to_vec(),
            xkv: xkv.to_vec(),
            q,
            k,
            v,
            probs,
            o,
            lq,
            lk,
        },
    )
}

/// Returns gradients with respect to the query input and the key/value input.
fn attn_bwd(p: &PolicyParams, ix: AttnIdx, c: &AttnCache, dout: &[f64], causal: bool, grad: &mut Gradient) -> (Vec<f64>, Vec<f64>) {
    let d = p.config.width;
    let heads = p.config.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (c.lq, c.lk);
    let layout: &Layout = &p.layout;
    let d_o = {
        let (dwo, dbo) = grad.pair_mut(layout, ix.wo, ix.bo);
        nn::linear_backward(&c.o, dout, lq, d, p.t(ix.wo), d, dwo, Some(dbo))
    };
    let mut dq = vec![0.0; lq * d];
    let mut dk = vec![0.0; lk * d];
    let mut dv = vec![0.0; lk * d];
    let mut dp = vec![0.0; lk];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..lq {
            let visible = if causal { i + 1 } else { lk };
            let row = &c.probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let doi = &d_o[i * d..][hs.clone()];
            let mut s = 0.0;
            for j in 0..visible {
                dp[j] = nn::dot(doi, &c.v[j * d..][hs.clone()]);
                s += row[j] * dp[j];
                for (g, &x) in dv[j * d..][hs.clone()].iter_mut().zip(doi) {
                    *g += row[j] * x;
                }
            }
            for j in 0..visible {
                let ds = row[j] * (dp[j] - s) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in hs.clone() {
                    dq[i * d + t] += ds * c.k[j * d + t];
                    dk[j * d + t] += ds * c.q[i * d + t];
                }
            }
        }
    }
    let dxq = nn::linear_backward(&c.xq, &dq, lq, d, p.t(ix.wq), d, grad.t_mut(layout, ix.wq), None);
    let mut dxkv = nn::linear_backward(&c.xkv, &dk, lk, d, p.t(ix.wk), d, grad.t_mut(layout, ix.wk), None);
    let dxv = nn::linear_backward(&c.xkv, &dv, lk, d, p.t(ix.wv), d, grad.t_mut(layout, ix.wv), None);
    nn::add_assign(&mut dxkv, &dxv);
    (dxq, dxkv)
}

pub(crate) struct FfCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    rows: usize,
}

fn ff_fwd(p: &PolicyParams, ix: FfIdx, x: &[f64], rows: usize) -> (Vec<f64>, FfCache) {
    let d = p.config.width;
    let f = p.config.ffn_width;
    let pre = nn::linear(x, rows, d, p.t(ix.w1), Some(p.t(ix.b1)), f);
    let act: Vec<f64> = pre.iter().map(|&z| nn::gelu(z)).collect();
    let out = nn::linear(&act, rows, f, p.t(ix.w2), Some(p.t(ix.b2)), d);
    (
        out,
        FfCache {
            x: x.to_vec(),
            pre,
            act,
            rows,
        },
    )
}

fn ff_bwd(p: &PolicyParams, ix: FfIdx, c: &FfCache, dout: &[f64], grad: &mut Gradient) -> Vec<f64> {
    let d = p.config.width;
    let f = p.config.ffn_width;
    let layout: &Layout = &p.layout;
    let mut dact = {
        let (dw2, db2) = grad.pair_mut(layout, ix.w2, ix.b2);
        nn::linear_backward(&c.act, dout, c.rows, f, p.t(ix.w2), d, dw2, Some(db2))
    };
    for (g, &z) in dact.iter_mut().zip(&c.pre) {
        *g *= nn::gelu_grad(z);
    }
    let (dw1, db1) = grad.pair_mut(layout, ix.w1, ix.b1);
    nn::linear_backward(&c.x, &dact, c.rows, d, p.t(ix.w1), f, dw1, Some(db1))
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub(crate) struct EncCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ff: FfCache,
}

fn enc_block_fwd(p: &PolicyParams, ix: &EncBlockIdx, x: &[f64], rows: usize) -> (Vec<f64>, EncCache) {
    let (a, ln1) = ln_fwd(p, ix.ln1, x, rows);
    let (att, attn) = attn_fwd(p, ix.attn, &a, rows, &a, rows, false);
    let x1 = add(x, &att);
    let (b, ln2) = ln_fwd(p, ix.ln2, &x1, rows);
    let (f, ff) = ff_fwd(p, ix.ff, &b, rows);
    (add(&x1, &f), EncCache { ln1, attn, ln2, ff })
}

fn enc_block_bwd(p: &PolicyParams, ix: &EncBlockIdx, c: &EncCache, dx2: &[f64], rows: usize, grad: &mut Gradient) -> Vec<f64> {
    let db = ff_bwd(p, ix.ff, &c.ff, dx2, grad);
    let dx1 = add(dx2, &ln_bwd(p, ix.ln2, &db, &c.ln2, rows, grad));
    let (dq, dkv) = attn_bwd(p, ix.attn, &c.attn, &dx1, false, grad);
    let da = add(&dq, &dkv);
    add(&dx1, &ln_bwd(p, ix.ln1, &da, &c.ln1, rows, grad))
}

pub(crate) struct DecCache {
    ln1: LnCache,
    self_attn: AttnCache,
    ln2: LnCache,
    cross: AttnCache,
    ln3: LnCache,
    ff: FfCache,
}

fn dec_block_fwd(p: &PolicyParams, ix: &DecBlockIdx, x: &[f64], rows: usize, mem: &[f64], mem_rows: usize) -> (Vec<f64>, DecCache) {
    let (a, ln1) = ln_fwd(p, ix.ln1, x, rows);
    let (sa, self_attn) = attn_fwd(p, ix.self_attn, &a, rows, &a, rows, true);
    let x1 = add(x, &sa);
    let (b, ln2) = ln_fwd(p, ix.ln2, &x1, rows);
    let (ca, cross) = attn_fwd(p, ix.cross, &b, rows, mem, mem_rows, false);
    let x2 = add(&x1, &ca);
    let (c, ln3) = ln_fwd(p, ix.ln3, &x2, rows);
    let (f, ff) = ff_fwd(p, ix.ff, &c, rows);
    (
        add(&x2, &f),
        DecCache {
            ln1,
            self_attn,
            ln2,
            cross,
            ln3,
            ff,
        },
    )
}

/// Returns the input gradient and accumulates the memory gradient into `dmem`.
fn dec_block_bwd(p: &PolicyParams, ix: &DecBlockIdx, c: &DecCache, dx3: &[f64], rows: usize, dmem: &mut [f64], grad: &mut Gradient) -> Vec<f64> {
    let dc = ff_bwd(p, ix.ff, &c.ff, dx3, grad);
    let dx2 = add(dx3, &ln_bwd(p, ix.ln3, &dc, &c.ln3, rows, grad));
    let (dqb, dm) = attn_bwd(p, ix.cross, &c.cross, &dx2, false, grad);
    nn::add_assign(dmem, &dm);
    let dx1 = add(&dx2, &ln_bwd(p, ix.ln2, &dqb, &c.ln2, rows, grad));
    let (dq, dkv) = attn_bwd(p, ix.self_attn, &c.self_attn, &dx1, true, grad);
    let da = add(&dq, &dkv);
    add(&dx1, &ln_bwd(p, ix.ln1, &da, &c.ln1, rows, grad))
}

/// Sum of per-channel frame embeddings.
pub(crate) fn frame_embedding(p: &PolicyParams, frame: &Frame, out: &mut [f64]) {
    for (ch, &id) in frame.iter().enumerate() {
        nn::add_assign(out, p.row(p.layout.frame_emb[ch], id as usize));
    }
}

pub(crate) fn check_frame(p: &PolicyParams, frame: &Frame) -> Result<()> {
    if frame.iter().any(|&id| id >= p.config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "frame {frame:?} has ids outside the audio vocabulary of {}",
            p.config.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn check_conditioning(p: &PolicyParams, cond: &Conditioning) -> Result<()> {
    if let Some(text) = cond.text {
        if text.len() > p.config.max_text_len {
            return Err(Error::LengthExceeded {
                len: text.len(),
                max: p.config.max_text_len,
            });
        }
    }
    if let Some(ctx) = cond.context {
        if ctx.len() > p.config.max_context_len {
            return Err(Error::LengthExceeded {
                len: ctx.len(),
                max: p.config.max_context_len,
            });
        }
        ctx.iter().try_for_each(|f| check_frame(p, f))?;
    }
    Ok(())
}

/// Encoder input rows and the token ids that produced them.
pub(crate) fn encoder_input(p: &PolicyParams, text: Option<&[TextToken]>) -> (Vec<f64>, usize) {
    let d = p.config.width;
    match text {
        Some(text) if !text.is_empty() => {
            let mut x = vec![0.0; text.len() * d];
            for (j, tok) in text.iter().enumerate() {
                let row = &mut x[j * d..(j + 1) * d];
                row.copy_from_slice(p.row(p.layout.text_emb, tok.id()));
                nn::add_assign(row, p.row(p.layout.text_pos, j));
            }
            (x, text.len())
        }
        _ => (p.t(p.layout.null_text).to_vec(), 1),
    }
}

/// Encoder memory (after the final norm) plus caches.
pub(crate) fn encode(p: &PolicyParams, text: Option<&[TextToken]>) -> (Vec<f64>, usize, Vec<EncCache>, LnCache) {
    let (mut x, rows) = encoder_input(p, text);
    let mut caches = Vec::with_capacity(p.layout.enc.len());
    for ix in &p.layout.enc {
        let (y, c) = enc_block_fwd(p, ix, &x, rows);
        caches.push(c);
        x = y;
    }
    let (mem, ln) = ln_fwd(p, p.layout.enc_ln, &x, rows);
    (mem, rows, caches, ln)
}

/// Cached activations of one teacher-forced pass.
pub struct Trace {
    text: Option<Vec<TextToken>>,
    context: Option<Vec<Frame>>,
    gen_inputs: Vec<Frame>,
    mem_rows: usize,
    ctx_rows: usize,
    enc: Vec<EncCache>,
    enc_ln: LnCache,
    dec: Vec<DecCache>,
    dec_ln: LnCache,
    hidden: Vec<f64>,
    /// Per channel, `positions x vocab` logits.
    pub logits: [Vec<f64>; CHANNELS],
}

impl Trace {
    /// Number of predicted positions.
    pub fn positions(&self) -> usize {
        self.gen_inputs.len()
    }

    pub fn logits_at(&self, ch: usize, t: usize) -> &[f64] {
        let v = self.logits[ch].len() / self.positions();
        &self.logits[ch][t * v..(t + 1) * v]
    }
}

/// Teacher-forced pass over `[context | BOS | prefix]`.
pub fn forward(p: &PolicyParams, cond: &Conditioning, prefix: &[Frame]) -> Result<Trace> {
    check_conditioning(p, cond)?;
    let cfg = &p.config;
    let d = cfg.width;
    let n_gen = prefix.len() + 1;
    if n_gen > cfg.max_gen_len {
        return Err(Error::LengthExceeded {
            len: n_gen,
            max: cfg.max_gen_len,
        });
    }
    prefix.iter().try_for_each(|f| check_frame(p, f))?;

    let (mem, mem_rows, enc, enc_ln) = encode(p, cond.text);

    let ctx_rows = cond.context.map_or(1, |c| c.len());
    let rows = ctx_rows + n_gen;
    let mut x = vec![0.0; rows * d];
    match cond.context {
        Some(ctx) => {
            for (j, f) in ctx.iter().enumerate() {
                let row = &mut x[j * d..(j + 1) * d];
                frame_embedding(p, f, row);
                nn::add_assign(row, p.row(p.layout.ctx_pos, j));
            }
        }
        None => x[..d].copy_from_slice(p.t(p.layout.null_ctx)),
    }
    let mut gen_inputs = Vec::with_capacity(n_gen);
    gen_inputs.push(cfg.vocab().bos_frame());
    gen_inputs.extend_from_slice(prefix);
    for (t, f) in gen_inputs.iter().enumerate() {
        let r = ctx_rows + t;
        let row = &mut x[r * d..(r + 1) * d];
        frame_embedding(p, f, row);
        nn::add_assign(row, p.row(p.layout.gen_pos, t));
    }

    let mut dec = Vec::with_capacity(p.layout.dec.len());
    for ix in &p.layout.dec {
        let (y, c) = dec_block_fwd(p, ix, &x, rows, &mem, mem_rows);
        dec.push(c);
        x = y;
    }
    let (h, dec_ln) = ln_fwd(p, p.layout.dec_ln, &x, rows);
    let hidden = h[ctx_rows * d..].to_vec();
    let v = cfg.vocab_size as usize;
    let logits = std::array::from_fn(|ch| {
        nn::linear(&hidden, n_gen, d, p.t(p.layout.head_w[ch]), Some(p.t(p.layout.head_b[ch])), v)
    });
    Ok(Trace {
        text: cond.text.map(|t| t.to_vec()),
        context: cond.context.map(|c| c.to_vec()),
        gen_inputs,
        mem_rows,
        ctx_rows,
        enc,
        enc_ln,
        dec,
        dec_ln,
        hidden,
        logits,
    })
}

/// Accumulate into `grad` the parameter gradient given per-channel logit
/// gradients (same shape as [`Trace::logits`]).
pub fn backward(p: &PolicyParams, trace: &Trace, dlogits: &[Vec<f64>; CHANNELS], grad: &mut Gradient) {
    let cfg = &p.config;
    let d = cfg.width;
    let v = cfg.vocab_size as usize;
    let layout: &Layout = &p.layout;
    let n_gen = trace.positions();
    let rows = trace.ctx_rows + n_gen;

    let mut dh = vec![0.0; rows * d];
    for ch in 0..CHANNELS {
        let (dw, db) = grad.pair_mut(layout, layout.head_w[ch], layout.head_b[ch]);
        let dhid = nn::linear_backward(&trace.hidden, &dlogits[ch], n_gen, d, p.t(layout.head_w[ch]), v, dw, Some(db));
        nn::add_assign(&mut dh[trace.ctx_rows * d..], &dhid);
    }
    let mut dx = ln_bwd(p, layout.dec_ln, &dh, &trace.dec_ln, rows, grad);
    let mut dmem = vec![0.0; trace.mem_rows * d];
    for (ix, c) in layout.dec.iter().zip(&trace.dec).rev() {
        dx = dec_block_bwd(p, ix, c, &dx, rows, &mut dmem, grad);
    }

    // Decoder embeddings.
    match &trace.context {
        Some(ctx) => {
            for (j, f) in ctx.iter().enumerate() {
                let g = &dx[j * d..(j + 1) * d];
                scatter_frame(layout, f, g, d, grad);
                nn::add_assign(&mut grad.t_mut(layout, layout.ctx_pos)[j * d..(j + 1) * d], g);
            }
        }
        None => nn::add_assign(grad.t_mut(layout, layout.null_ctx), &dx[..d]),
    }
    for (t, f) in trace.gen_inputs.iter().enumerate() {
        let r = trace.ctx_rows + t;
        let g = &dx[r * d..(r + 1) * d];
        scatter_frame(layout, f, g, d, grad);
        nn::add_assign(&mut grad.t_mut(layout, layout.gen_pos)[t * d..(t + 1) * d], g);
    }

    // Encoder.
    let rows = trace.mem_rows;
    let mut dx = ln_bwd(p, layout.enc_ln, &dmem, &trace.enc_ln, rows, grad);
    for (ix, c) in layout.enc.iter().zip(&trace.enc).rev() {
        dx = enc_block_bwd(p, ix, c, &dx, rows, grad);
    }
    match trace.text.as_deref() {
        Some(text) if !text.is_empty() => {
            for (j, tok) in text.iter().enumerate() {
                let g = &dx[j * d..(j + 1) * d];
                let id = tok.id();
                nn::add_assign(&mut grad.t_mut(layout, layout.text_emb)[id * d..(id + 1) * d], g);
                nn::add_assign(&mut grad.t_mut(layout, layout.text_pos)[j * d..(j + 1) * d], g);
            }
        }
        _ => nn::add_assign(grad.t_mut(layout, layout.null_text), &dx[..d]),
    }
}

fn scatter_frame(layout: &Layout, frame: &Frame, g: &[f64], d: usize, grad: &mut Gradient) {
    for (ch, &id) in frame.iter().enumerate() {
        let id = id as usize;
        nn::add_assign(&mut grad.t_mut(layout, layout.frame_emb[ch])[id * d..(id + 1) * d], g);
    }
}

/// Log-likelihood of `response` under a trace whose prefix is
/// `response[..len-1]`, plus `scale * d(logp)/d(logits)` when requested.
pub fn score_response(trace: &Trace, response: &[Frame], scale: Option<f64>) -> (f64, Option<[Vec<f64>; CHANNELS]>) {
    let n = trace.positions();
    debug_assert_eq!(n, response.len());
    let v = trace.logits[0].len() / n;
    let mut total = 0.0;
    let mut dl: Option<[Vec<f64>; CHANNELS]> = scale.map(|_| std::array::from_fn(|_| vec![0.0; n * v]));
    for (t, frame) in response.iter().enumerate() {
        for (ch, &tok) in frame.iter().enumerate() {
            let lp = nn::log_softmax(trace.logits_at(ch, t));
            total += lp[tok as usize];
            if let (Some(s), Some(dl)) = (scale, dl.as_mut()) {
                let row = &mut dl[ch][t * v..(t + 1) * v];
                for (g, l) in row.iter_mut().zip(&lp) {
                    *g = -s * l.exp();
                }
                row[tok as usize] += s;
            }
        }
    }
    (total, dl)
}
