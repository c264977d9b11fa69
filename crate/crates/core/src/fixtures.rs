//! Small worlds, prompts and a finite-difference checker shared by unit
//! tests, integration tests and examples.

use rand::Rng as _;

use crate::policy::{init_params, Gradient, ModelConfig, PolicyParams};
use crate::rng::{self, Rng};
use crate::synthworld::{gen_world_from, synthesize_reference, Prompt, World, WorldSpec};
use crate::tokens::{TextSeq, TextToken};

/// Two languages of four symbols and two speakers in a 16-id vocabulary,
/// matching [`ModelConfig::tiny`].
pub fn tiny_world() -> World {
    let spec = WorldSpec {
        vocab_size: 16,
        ..WorldSpec::new(7, 2, 2, 4)
    };
    gen_world_from(&spec).expect("tiny world fits")
}

/// A prompt with a text of `text_len` symbols and `ctx_len` context frames.
pub fn prompt_with_lengths(world: &World, rng: &mut Rng, text_len: usize, ctx_len: usize) -> Prompt {
    let language_id = rng.gen_range(0..world.languages.len()) as u32;
    let speaker_id = rng.gen_range(0..world.speakers.len()) as u32;
    let lang = world.language(language_id).unwrap();
    let spk = world.speaker(speaker_id).unwrap();
    let pick = |rng: &mut Rng, n: usize| -> TextSeq {
        TextSeq((0..n).map(|_| lang.alphabet[rng.gen_range(0..lang.alphabet.len())]).collect())
    };
    let text = pick(rng, text_len);
    let context = synthesize_reference(world.vocab, lang, spk, &pick(rng, ctx_len)).unwrap();
    Prompt {
        language_id,
        speaker_id,
        text,
        context,
    }
}

/// A random prompt sized for the tiny model.
pub fn tiny_prompt(world: &World, rng: &mut Rng) -> Prompt {
    let t = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=4);
    prompt_with_lengths(world, rng, t, c)
}

/// Tiny parameters with every coordinate perturbed, so no gradient path is
/// trivially zero (the output heads start at zero).
pub fn perturbed_tiny_params(seed: u64) -> PolicyParams {
    perturbed(&ModelConfig::tiny(), seed, 0.3)
}

pub fn perturbed(config: &ModelConfig, seed: u64, scale: f64) -> PolicyParams {
    let mut p = init_params(config, seed).unwrap();
    let mut r = rng::rng_for(seed, &[rng::tag("perturb")]);
    for v in p.values.iter_mut() {
        *v += scale * (r.gen::<f64>() * 2.0 - 1.0);
    }
    p
}

pub fn text(s: &[u8]) -> TextSeq {
    TextSeq(s.iter().copied().map(TextToken).collect())
}

/// Worst coordinate of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare `analytic` with central differences of `f` at step `eps` on
/// every coordinate. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    params: &PolicyParams,
    analytic: &Gradient,
    eps: f64,
    floor: f64,
    f: impl Fn(&PolicyParams) -> f64,
) -> FdReport {
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..params.values.len() {
        let x = params.values[i];
        work.values[i] = x + eps;
        let up = f(&work);
        work.values[i] = x - eps;
        let down = f(&work);
        work.values[i] = x;
        let n = (up - down) / (2.0 * eps);
        let a = analytic.0[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel_err {
            report = FdReport {
                max_rel_err: rel,
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    report
}
