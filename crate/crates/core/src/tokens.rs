//! Byte-level text tokens and the frame vocabulary shared by every audio
//! channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the byte-level text vocabulary.
pub const TEXT_VOCAB: usize = 256;

/// Text token emitted by the recognizer for codes it cannot invert.
pub const GARBAGE_TOKEN: u8 = 1;

/// Content channel index within a frame.
pub const CONTENT: usize = 0;
/// Speaker channel index within a frame.
pub const SPEAKER: usize = 1;

/// Speaker-channel id used at BOS/EOS positions.
pub const SPEAKER_PAD: u32 = 0;

/// A byte-level text token. Every `u8` is a valid id, so the vocabulary
/// bound holds by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TextToken(pub u8);

impl TextToken {
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TextSeq(pub Vec<TextToken>);

impl TextSeq {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        TextSeq(bytes.iter().copied().map(TextToken).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TextToken] {
        &self.0
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|t| t.id())
    }
}

/// Tokenize a non-empty byte string, one token per byte.
pub fn encode_text(raw: &[u8]) -> Result<TextSeq> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("cannot tokenize an empty byte string".into()));
    }
    Ok(TextSeq::from_bytes(raw))
}

pub fn decode_text(seq: &TextSeq) -> Vec<u8> {
    seq.0.iter().map(|t| t.0).collect()
}

/// Frame vocabulary: `size` ids per channel, the top two reserved as BOS and
/// EOS on the content channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameVocab {
    pub size: u32,
}

impl Default for FrameVocab {
    fn default() -> Self {
        FrameVocab { size: 256 }
    }
}

impl FrameVocab {
    pub fn new(size: u32) -> Result<Self> {
        if size < 8 {
            return Err(Error::Config(format!(
                "audio vocabulary of {size} is too small; need at least 8 ids"
            )));
        }
        Ok(FrameVocab { size })
    }

    pub fn bos(self) -> u32 {
        self.size - 1
    }

    pub fn eos(self) -> u32 {
        self.size - 2
    }

    pub fn len(self) -> usize {
        self.size as usize
    }

    pub fn bos_frame(self) -> Frame {
        [self.bos(), SPEAKER_PAD]
    }

    pub fn eos_frame(self) -> Frame {
        [self.eos(), SPEAKER_PAD]
    }

    pub fn is_eos(self, frame: &Frame) -> bool {
        frame[CONTENT] == self.eos()
    }
}

/// Number of parallel codebook channels: content and speaker.
pub const CHANNELS: usize = 2;

/// One frame: one token id per channel.
pub type Frame = [u32; CHANNELS];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AudioFrameSeq(pub Vec<Frame>);

impl AudioFrameSeq {
    pub fn new(frames: Vec<Frame>) -> Self {
        AudioFrameSeq(frames)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Frames before the first EOS.
    pub fn until_eos(&self, vocab: FrameVocab) -> &[Frame] {
        let end = self
            .0
            .iter()
            .position(|f| vocab.is_eos(f))
            .unwrap_or(self.0.len());
        &self.0[..end]
    }

    /// Ends with EOS on the content channel and has no EOS elsewhere.
    pub fn is_well_formed(&self, vocab: FrameVocab) -> bool {
        match self.0.split_last() {
            Some((last, body)) => {
                vocab.is_eos(last) && !body.iter().any(|f| vocab.is_eos(f))
            }
            None => false,
        }
    }

    pub fn in_vocab(&self, vocab: FrameVocab) -> bool {
        self.0.iter().all(|f| f.iter().all(|&id| id < vocab.size))
    }
}
