//! A deterministic synthetic multilingual "speech" universe.
//!
//! Each language maps its text symbols injectively onto its own block of
//! content-channel codes; each speaker owns four speaker-channel ids that a
//! reference rendering cycles through. The judges in [`oracles`] stand in for
//! ASR, speaker verification and a reference-free quality estimator.

mod data;
pub mod oracles;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use data::{
    make_paired_dataset, make_prompt_set, random_text, PairedExample, Prompt, PromptSet,
    CONTEXT_LEN_RANGE, TEXT_LEN_RANGE,
};
pub use oracles::{
    asr_decode, character_error_rate, edit_distance, quality_score, speaker_similarity,
    Oracle, OracleError, RawScores, SpeakerEmbedding, SynthOracle,
};

use crate::error::{Error, Result};
use crate::rng;
use crate::tokens::{AudioFrameSeq, FrameVocab, TextSeq, TextToken, GARBAGE_TOKEN, SPEAKER_PAD};

pub const WORLD_FORMAT_VERSION: u32 = 1;

/// Number of speaker-channel ids in a speaker signature.
pub const SIGNATURE_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLanguage {
    pub language_id: u32,
    pub alphabet: Vec<TextToken>,
    /// Symbol byte to content-channel code.
    pub content_map: BTreeMap<u8, u32>,
}

impl SynthLanguage {
    pub fn code(&self, symbol: TextToken) -> Option<u32> {
        self.content_map.get(&symbol.0).copied()
    }

    pub fn contains(&self, symbol: TextToken) -> bool {
        self.content_map.contains_key(&symbol.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpeaker {
    pub speaker_id: u32,
    pub signature: [u32; SIGNATURE_LEN],
}

/// Parameters of [`gen_world`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_languages: usize,
    pub n_speakers: usize,
    pub alphabet_size: usize,
    /// Number of distinct text symbols the alphabets are drawn from. `None`
    /// gives every language its own disjoint alphabet.
    #[serde(default)]
    pub symbol_pool: Option<usize>,
    /// Number of trailing languages whose alphabets are drawn only from
    /// symbols that some earlier language already uses. Requires a pool.
    #[serde(default)]
    pub held_out: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: u32,
}

fn default_vocab_size() -> u32 {
    FrameVocab::default().size
}

impl WorldSpec {
    pub fn new(seed: u64, n_languages: usize, n_speakers: usize, alphabet_size: usize) -> Self {
        WorldSpec {
            seed,
            n_languages,
            n_speakers,
            alphabet_size,
            symbol_pool: None,
            held_out: 0,
            vocab_size: default_vocab_size(),
        }
    }
}

/// Text bytes usable as symbols: everything except the two lowest ids, with
/// letters first so small worlds stay readable.
fn symbol_candidates() -> Vec<u8> {
    let mut out: Vec<u8> = (b'a'..=b'z').chain(b'A'..=b'Z').chain(b'0'..=b'9').collect();
    for b in 2..=255u8 {
        if !out.contains(&b) {
            out.push(b);
        }
    }
    debug_assert!(!out.contains(&GARBAGE_TOKEN));
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorldFile {
    version: u32,
    spec: WorldSpec,
    languages: Vec<SynthLanguage>,
    speakers: Vec<SynthSpeaker>,
}

/// The generated universe plus lookup tables used by the judges.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "WorldFile", into = "WorldFile")]
pub struct World {
    pub spec: WorldSpec,
    pub vocab: FrameVocab,
    pub languages: Vec<SynthLanguage>,
    pub speakers: Vec<SynthSpeaker>,
    /// Content code to symbol, over the union of all languages.
    inverse: Vec<Option<u8>>,
    /// Speaker-channel id to owning speaker.
    owner: Vec<Option<u32>>,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.languages == other.languages
            && self.speakers == other.speakers
    }
}

impl From<World> for WorldFile {
    fn from(w: World) -> Self {
        WorldFile {
            version: WORLD_FORMAT_VERSION,
            spec: w.spec,
            languages: w.languages,
            speakers: w.speakers,
        }
    }
}

impl TryFrom<WorldFile> for World {
    type Error = String;

    fn try_from(f: WorldFile) -> std::result::Result<Self, String> {
        if f.version != WORLD_FORMAT_VERSION {
            return Err(format!(
                "unsupported world format version {} (expected {WORLD_FORMAT_VERSION})",
                f.version
            ));
        }
        World::assemble(f.spec, f.languages, f.speakers).map_err(|e| e.to_string())
    }
}

impl World {
    fn assemble(
        spec: WorldSpec,
        languages: Vec<SynthLanguage>,
        speakers: Vec<SynthSpeaker>,
    ) -> Result<Self> {
        let vocab = FrameVocab::new(spec.vocab_size)?;
        let mut inverse = vec![None; vocab.len()];
        for lang in &languages {
            for (&sym, &code) in &lang.content_map {
                let slot = inverse
                    .get_mut(code as usize)
                    .filter(|_| code < vocab.eos())
                    .ok_or_else(|| Error::Config(format!("content code {code} out of range")))?;
                if slot.is_some() {
                    return Err(Error::Config(format!(
                        "content code {code} assigned twice"
                    )));
                }
                *slot = Some(sym);
            }
        }
        let mut owner = vec![None; vocab.len()];
        for spk in &speakers {
            for &id in &spk.signature {
                let slot = owner
                    .get_mut(id as usize)
                    .filter(|_| id != SPEAKER_PAD && id < vocab.eos())
                    .ok_or_else(|| Error::Config(format!("speaker id {id} out of range")))?;
                if slot.is_some() {
                    return Err(Error::Config(format!("speaker id {id} assigned twice")));
                }
                *slot = Some(spk.speaker_id);
            }
        }
        Ok(World {
            spec,
            vocab,
            languages,
            speakers,
            inverse,
            owner,
        })
    }

    pub fn language(&self, id: u32) -> Result<&SynthLanguage> {
        self.languages
            .iter()
            .find(|l| l.language_id == id)
            .ok_or_else(|| Error::InvalidInput(format!("no language with id {id}")))
    }

    pub fn speaker(&self, id: u32) -> Result<&SynthSpeaker> {
        self.speakers
            .iter()
            .find(|s| s.speaker_id == id)
            .ok_or_else(|| Error::InvalidInput(format!("no speaker with id {id}")))
    }

    /// Symbol a content code decodes to, if any language uses it.
    pub fn invert_code(&self, code: u32) -> Option<u8> {
        self.inverse.get(code as usize).copied().flatten()
    }

    pub fn speaker_of(&self, id: u32) -> Option<u32> {
        self.owner.get(id as usize).copied().flatten()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Generate a world. Content codes are disjoint across languages and
/// speaker signatures are disjoint across speakers.
pub fn gen_world(seed: u64, n_languages: usize, n_speakers: usize, alphabet_size: usize) -> Result<World> {
    gen_world_from(&WorldSpec::new(seed, n_languages, n_speakers, alphabet_size))
}

pub fn gen_world_from(spec: &WorldSpec) -> Result<World> {
    let vocab = FrameVocab::new(spec.vocab_size)?;
    if spec.n_languages == 0 || spec.n_speakers == 0 || spec.alphabet_size == 0 {
        return Err(Error::Config(
            "worlds need at least one language, one speaker and one symbol".into(),
        ));
    }
    // Content ids exclude BOS/EOS; speaker ids also exclude the pad id.
    let content_capacity = vocab.len() - 2;
    let speaker_capacity = vocab.len() - 3;
    let content_needed = spec.n_languages * spec.alphabet_size;
    if content_needed > content_capacity {
        return Err(Error::WorldTooLarge(format!(
            "{} languages x {} symbols need {content_needed} content codes, only {content_capacity} available",
            spec.n_languages, spec.alphabet_size
        )));
    }
    let speaker_needed = spec.n_speakers * SIGNATURE_LEN;
    if speaker_needed > speaker_capacity {
        return Err(Error::WorldTooLarge(format!(
            "{} speakers need {speaker_needed} speaker ids, only {speaker_capacity} available",
            spec.n_speakers
        )));
    }
    let candidates = symbol_candidates();
    let pool_size = spec
        .symbol_pool
        .unwrap_or(spec.n_languages * spec.alphabet_size);
    if pool_size < spec.alphabet_size || pool_size > candidates.len() {
        return Err(Error::Config(format!(
            "symbol pool of {pool_size} cannot supply alphabets of {} (at most {} symbols exist)",
            spec.alphabet_size,
            candidates.len()
        )));
    }
    let pool = &candidates[..pool_size];

    let mut rng = rng::rng_for(spec.seed, &[rng::tag("world")]);
    let mut content_ids: Vec<u32> = (0..content_capacity as u32).collect();
    content_ids.shuffle(&mut rng);
    let mut speaker_ids: Vec<u32> = (1..=speaker_capacity as u32).collect();
    speaker_ids.shuffle(&mut rng);

    if spec.held_out > 0 && (spec.symbol_pool.is_none() || spec.held_out >= spec.n_languages) {
        return Err(Error::Config(
            "held-out languages need a symbol pool and at least one other language".into(),
        ));
    }
    let n_open = spec.n_languages - spec.held_out;
    let mut languages: Vec<SynthLanguage> = Vec::with_capacity(spec.n_languages);
    for l in 0..spec.n_languages {
        let mut alphabet: Vec<u8> = if spec.symbol_pool.is_none() {
            pool[l * spec.alphabet_size..(l + 1) * spec.alphabet_size].to_vec()
        } else if l < n_open {
            pool.choose_multiple(&mut rng, spec.alphabet_size).copied().collect()
        } else {
            let covered: Vec<u8> = pool
                .iter()
                .copied()
                .filter(|b| languages[..n_open].iter().any(|lang| lang.contains(TextToken(*b))))
                .collect();
            if covered.len() < spec.alphabet_size {
                return Err(Error::Config(format!(
                    "only {} symbols are covered by open languages; held-out alphabets need {}",
                    covered.len(),
                    spec.alphabet_size
                )));
            }
            covered.choose_multiple(&mut rng, spec.alphabet_size).copied().collect()
        };
        alphabet.sort_unstable();
        let codes = &content_ids[l * spec.alphabet_size..(l + 1) * spec.alphabet_size];
        languages.push(SynthLanguage {
            language_id: l as u32,
            alphabet: alphabet.iter().copied().map(TextToken).collect(),
            content_map: alphabet.iter().copied().zip(codes.iter().copied()).collect(),
        });
    }
    let speakers = (0..spec.n_speakers)
        .map(|s| {
            let mut signature = [0u32; SIGNATURE_LEN];
            signature.copy_from_slice(&speaker_ids[s * SIGNATURE_LEN..(s + 1) * SIGNATURE_LEN]);
            SynthSpeaker {
                speaker_id: s as u32,
                signature,
            }
        })
        .collect();
    World::assemble(spec.clone(), languages, speakers)
}

/// Ground-truth rendering: one frame per symbol, speaker ids cycling through
/// the signature, then an EOS frame.
pub fn synthesize_reference(
    vocab: FrameVocab,
    lang: &SynthLanguage,
    spk: &SynthSpeaker,
    text: &TextSeq,
) -> Result<AudioFrameSeq> {
    let mut frames = Vec::with_capacity(text.len() + 1);
    for (i, &tok) in text.tokens().iter().enumerate() {
        let code = lang.code(tok).ok_or(Error::UnknownSymbol {
            symbol: tok.0,
            language: lang.language_id,
        })?;
        frames.push([code, spk.signature[i % SIGNATURE_LEN]]);
    }
    frames.push(vocab.eos_frame());
    Ok(AudioFrameSeq::new(frames))
}
