//! Paired training triplets and unpaired GRPO prompts.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{synthesize_reference, World};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tokens::{AudioFrameSeq, TextSeq};

/// Lengths of target and prompt texts.
pub const TEXT_LEN_RANGE: RangeInclusive<usize> = 4..=16;
/// Lengths of the texts behind context (speaker reference) audio.
pub const CONTEXT_LEN_RANGE: RangeInclusive<usize> = 4..=8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedExample {
    pub language_id: u32,
    pub speaker_id: u32,
    pub text: TextSeq,
    pub context_audio: AudioFrameSeq,
    pub target_audio: AudioFrameSeq,
}

impl PairedExample {
    pub fn prompt(&self) -> Prompt {
        Prompt {
            language_id: self.language_id,
            speaker_id: self.speaker_id,
            text: self.text.clone(),
            context: self.context_audio.clone(),
        }
    }
}

/// Text to synthesize plus reference audio of the speaker to imitate. The
/// two are unrelated in content.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub language_id: u32,
    pub speaker_id: u32,
    pub text: TextSeq,
    pub context: AudioFrameSeq,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn for_language(&self, language_id: u32) -> PromptSet {
        PromptSet {
            prompts: self
                .prompts
                .iter()
                .filter(|p| p.language_id == language_id)
                .cloned()
                .collect(),
        }
    }
}

/// Uniform symbols from the language's alphabet, length uniform in `lengths`.
pub fn random_text(world: &World, language_id: u32, lengths: RangeInclusive<usize>, rng: &mut Rng) -> Result<TextSeq> {
    let lang = world.language(language_id)?;
    let n = rng.gen_range(lengths);
    Ok(TextSeq(
        (0..n)
            .map(|_| *lang.alphabet.choose(rng).expect("alphabet is non-empty"))
            .collect(),
    ))
}

fn speaker_reference(world: &World, language_id: u32, speaker_id: u32, avoid: Option<&TextSeq>, rng: &mut Rng) -> Result<AudioFrameSeq> {
    let lang = world.language(language_id)?;
    let spk = world.speaker(speaker_id)?;
    let text = loop {
        let t = random_text(world, language_id, CONTEXT_LEN_RANGE, rng)?;
        if Some(&t) != avoid {
            break t;
        }
    };
    synthesize_reference(world.vocab, lang, spk, &text)
}

/// `n_examples` triplets for one language. Context audio comes from the same
/// speaker reading a different text.
pub fn make_paired_dataset(world: &World, language_id: u32, n_examples: usize, seed: u64) -> Result<Vec<PairedExample>> {
    if n_examples == 0 {
        return Err(Error::InvalidInput("paired dataset needs at least one example".into()));
    }
    let lang = world.language(language_id)?;
    let mut rng = rng::rng_for(seed, &[rng::tag("paired"), language_id as u64]);
    (0..n_examples)
        .map(|_| {
            let speaker_id = rng.gen_range(0..world.speakers.len()) as u32;
            let text = random_text(world, language_id, TEXT_LEN_RANGE, &mut rng)?;
            let context_audio = speaker_reference(world, language_id, speaker_id, Some(&text), &mut rng)?;
            let target_audio = synthesize_reference(world.vocab, lang, world.speaker(speaker_id)?, &text)?;
            Ok(PairedExample {
                language_id,
                speaker_id,
                text,
                context_audio,
                target_audio,
            })
        })
        .collect()
}

/// `n_per_language` prompts for each listed language, text and speaker
/// reference drawn independently.
pub fn make_prompt_set(world: &World, language_ids: &[u32], n_per_language: usize, seed: u64) -> Result<PromptSet> {
    let mut prompts = Vec::with_capacity(language_ids.len() * n_per_language);
    for &language_id in language_ids {
        world.language(language_id)?;
        let mut rng = rng::rng_for(seed, &[rng::tag("prompts"), language_id as u64]);
        for _ in 0..n_per_language {
            let text = random_text(world, language_id, TEXT_LEN_RANGE, &mut rng)?;
            let speaker_id = rng.gen_range(0..world.speakers.len()) as u32;
            let context = speaker_reference(world, language_id, speaker_id, None, &mut rng)?;
            prompts.push(Prompt {
                language_id,
                speaker_id,
                text,
                context,
            });
        }
    }
    Ok(PromptSet { prompts })
}
