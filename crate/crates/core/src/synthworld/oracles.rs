//! Judges: recognizer + CER, speaker similarity, and reference-free quality.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Prompt, World};
use crate::error::{Error, Result};
use crate::tokens::{AudioFrameSeq, FrameVocab, TextSeq, TextToken, CONTENT, GARBAGE_TOKEN, SPEAKER};

pub const QUALITY_MIN: f64 = -0.5;
pub const QUALITY_MAX: f64 = 4.5;
/// Weight of code validity in the quality score; consistency gets the rest.
pub const QUALITY_VALIDITY_WEIGHT: f64 = 0.7;

/// Raw judge outputs for one response, after range clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub cer: f64,
    pub ssim: f64,
    pub pesq: f64,
}

impl RawScores {
    pub fn clipped(cer: f64, ssim: f64, pesq: f64) -> Self {
        RawScores {
            cer: cer.clamp(0.0, 1.0),
            ssim: ssim.clamp(-1.0, 1.0),
            pesq: pesq.clamp(QUALITY_MIN, QUALITY_MAX),
        }
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("judge failed: {0}")]
    Failed(String),
}

/// Scores a generated response against its prompt.
pub trait Oracle: Sync {
    fn score(&self, prompt: &Prompt, response: &AudioFrameSeq) -> Result<RawScores, OracleError>;
}

/// Speaker embedding used by the similarity judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerEmbedding {
    /// Histogram of speaker-channel ids.
    #[default]
    Unigram,
    /// Histogram of consecutive speaker-channel id pairs.
    Bigram,
}

/// The synthetic judges over one world.
#[derive(Debug, Clone, Copy)]
pub struct SynthOracle<'w> {
    pub world: &'w World,
    pub embedding: SpeakerEmbedding,
}

impl<'w> SynthOracle<'w> {
    pub fn new(world: &'w World) -> Self {
        SynthOracle {
            world,
            embedding: SpeakerEmbedding::Unigram,
        }
    }

    pub fn with_embedding(world: &'w World, embedding: SpeakerEmbedding) -> Self {
        SynthOracle { world, embedding }
    }
}

impl Oracle for SynthOracle<'_> {
    fn score(&self, prompt: &Prompt, response: &AudioFrameSeq) -> Result<RawScores, OracleError> {
        let hyp = asr_decode(response, self.world);
        let cer = character_error_rate(&prompt.text, &hyp)
            .map_err(|e| OracleError::Failed(e.to_string()))?;
        let ssim = match self.embedding {
            SpeakerEmbedding::Unigram => speaker_similarity(self.world.vocab, &prompt.context, response),
            SpeakerEmbedding::Bigram => bigram_speaker_similarity(self.world.vocab, &prompt.context, response),
        };
        let pesq = quality_score(response, self.world);
        Ok(RawScores::clipped(cer, ssim, pesq))
    }
}

/// Invert content codes through every language's map, stopping at the first
/// EOS. Codes no language uses become the garbage token.
pub fn asr_decode(audio: &AudioFrameSeq, world: &World) -> TextSeq {
    TextSeq(
        audio
            .until_eos(world.vocab)
            .iter()
            .map(|f| TextToken(world.invert_code(f[CONTENT]).unwrap_or(GARBAGE_TOKEN)))
            .collect(),
    )
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Edit distance over reference length, clipped at 1.
pub fn character_error_rate(reference: &TextSeq, hypothesis: &TextSeq) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("CER needs a non-empty reference".into()));
    }
    let d = edit_distance(reference.tokens(), hypothesis.tokens());
    Ok((d as f64 / reference.len() as f64).min(1.0))
}

fn speaker_ids(vocab: FrameVocab, audio: &AudioFrameSeq) -> Vec<u32> {
    audio
        .frames()
        .iter()
        .filter(|f| !vocab.is_eos(f))
        .map(|f| f[SPEAKER])
        .collect()
}

fn cosine<K: std::hash::Hash + Eq>(a: &HashMap<K, f64>, b: &HashMap<K, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn histogram<K: std::hash::Hash + Eq>(items: impl Iterator<Item = K>) -> HashMap<K, f64> {
    let mut h = HashMap::new();
    for k in items {
        *h.entry(k).or_insert(0.0) += 1.0;
    }
    h
}

/// Cosine similarity of speaker-channel histograms over non-EOS frames.
/// Inputs without speech score 0.
pub fn speaker_similarity(vocab: FrameVocab, context: &AudioFrameSeq, generated: &AudioFrameSeq) -> f64 {
    let a = speaker_ids(vocab, context);
    let b = speaker_ids(vocab, generated);
    if a.is_empty() || b.is_empty() {
        log::warn!("speaker similarity on audio without non-EOS frames; scoring 0");
        return 0.0;
    }
    cosine(&histogram(a.into_iter()), &histogram(b.into_iter()))
}

/// Bigram variant, used as the held-out evaluation embedding.
pub fn bigram_speaker_similarity(vocab: FrameVocab, context: &AudioFrameSeq, generated: &AudioFrameSeq) -> f64 {
    let a = speaker_ids(vocab, context);
    let b = speaker_ids(vocab, generated);
    if a.len() < 2 || b.len() < 2 {
        log::warn!("bigram speaker similarity needs two non-EOS frames; scoring 0");
        return 0.0;
    }
    let pairs = |v: &[u32]| histogram(v.windows(2).map(|w| (w[0], w[1])));
    cosine(&pairs(&a), &pairs(&b))
}

/// Quality in [-0.5, 4.5] from the share of decodable content codes and the
/// share of speaker ids explained by a single speaker.
pub fn quality_score(audio: &AudioFrameSeq, world: &World) -> f64 {
    let frames: Vec<_> = audio
        .frames()
        .iter()
        .filter(|f| !world.vocab.is_eos(f))
        .collect();
    if frames.is_empty() {
        return QUALITY_MIN;
    }
    let n = frames.len() as f64;
    let valid = frames
        .iter()
        .filter(|f| world.invert_code(f[CONTENT]).is_some())
        .count() as f64
        / n;
    let mut per_speaker: HashMap<u32, usize> = HashMap::new();
    for f in &frames {
        if let Some(s) = world.speaker_of(f[SPEAKER]) {
            *per_speaker.entry(s).or_default() += 1;
        }
    }
    let consistent = per_speaker.values().copied().max().unwrap_or(0) as f64 / n;
    QUALITY_MIN
        + (QUALITY_MAX - QUALITY_MIN)
            * (QUALITY_VALIDITY_WEIGHT * valid + (1.0 - QUALITY_VALIDITY_WEIGHT) * consistent)
}
