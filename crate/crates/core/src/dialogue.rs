//! Dialogue domain types: the utterance catalog (the action space), the
//! conversation state, and the deterministic hashed bag-of-tokens encoder
//! that turns a conversation into a fixed-length feature vector.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phase marker used once an episode has reached a terminal transition.
pub const TERMINAL_PHASE: &str = "terminal";

/// Smallest supported encoder dimension: four fixed slots plus at least
/// four token buckets.
pub const MIN_ENCODER_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Incremental FNV-1a, for hashing several fields without concatenating.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn write(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 = (self.0 ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// One agent utterance template; an element of the action space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub intent_tag: String,
    #[serde(default)]
    pub is_fallback: bool,
}

/// Ordered, validated set of utterances. The order is the canonical action
/// index used by every network head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionCatalog {
    utterances: Vec<Utterance>,
    index: HashMap<String, usize>,
    fallback: usize,
}

impl ActionCatalog {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Data("action catalog is empty".into()));
        }
        let mut index = HashMap::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            if index.insert(u.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate utterance id `{}`", u.id)));
            }
        }
        let fallbacks: Vec<usize> = utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.is_fallback)
            .map(|(i, _)| i)
            .collect();
        let fallback = match fallbacks.as_slice() {
            [one] => *one,
            [] => return Err(Error::Data("catalog has no fallback utterance".into())),
            _ => {
                return Err(Error::Data(format!(
                    "catalog has {} fallback utterances, expected exactly one",
                    fallbacks.len()
                )))
            }
        };
        Ok(Self {
            utterances,
            index,
            fallback,
        })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::new(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.utterances)?)
    }

    /// Canonical index of the utterance with this id.
    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::Lookup {
            what: "utterance",
            key: id.to_owned(),
        })
    }

    pub fn get(&self, index: usize) -> Option<&Utterance> {
        self.utterances.get(index)
    }

    pub fn by_id(&self, id: &str) -> Result<&Utterance> {
        self.index_of(id).map(|i| &self.utterances[i])
    }

    pub fn fallback_index(&self) -> usize {
        self.fallback
    }

    pub fn fallback(&self) -> &Utterance {
        &self.utterances[self.fallback]
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.utterances.iter().map(|u| u.id.clone()).collect()
    }
}

/// Subset of catalog indices an agent may choose from in a given state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionMask(Vec<bool>);

impl ActionMask {
    pub fn all(n: usize) -> Self {
        ActionMask(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        ActionMask(vec![false; n])
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = Self::none(n);
        for i in indices {
            mask.0[i] = true;
        }
        mask
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.get(index).copied().unwrap_or(false)
    }

    pub fn set(&mut self, index: usize, allowed: bool) {
        self.0[index] = allowed;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn intersect(&self, other: &ActionMask) -> ActionMask {
        ActionMask(self.0.iter().zip(&other.0).map(|(&a, &b)| a && b).collect())
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    User,
}

impl Speaker {
    fn salt(self) -> &'static str {
        match self {
            Speaker::Agent => "agent:",
            Speaker::User => "user:",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::Agent => "agent",
            Speaker::User => "user",
        })
    }
}

/// Full interaction context of one conversation.
///
/// A completed turn contributes an agent entry followed by a user entry;
/// the history may additionally end with one agent entry awaiting a reply.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogueState {
    pub history: Vec<(Speaker, String)>,
    pub turn: u32,
    pub max_turns: u32,
    pub segment_id: String,
    pub phase_key: String,
}

impl DialogueState {
    pub fn new(segment_id: impl Into<String>, phase_key: impl Into<String>, max_turns: u32) -> Self {
        Self {
            history: Vec::new(),
            turn: 0,
            max_turns,
            segment_id: segment_id.into(),
            phase_key: phase_key.into(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.phase_key == TERMINAL_PHASE || self.turn >= self.max_turns
    }

    pub fn remaining_turns(&self) -> u32 {
        self.max_turns.saturating_sub(self.turn)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_turns < 1 {
            return Err(Error::Precondition("max_turns must be at least 1".into()));
        }
        if self.turn > self.max_turns {
            return Err(Error::Precondition(format!(
                "turn {} exceeds max_turns {}",
                self.turn, self.max_turns
            )));
        }
        let completed = 2 * self.turn as usize;
        let len = self.history.len();
        if len != completed && len != completed + 1 {
            return Err(Error::Precondition(format!(
                "history has {len} entries, inconsistent with turn {}",
                self.turn
            )));
        }
        for (i, (speaker, _)) in self.history.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Agent } else { Speaker::User };
            if *speaker != expected {
                return Err(Error::Precondition(format!(
                    "history entry {i} is from {speaker}, expected {expected}"
                )));
            }
        }
        Ok(())
    }

    /// Stable 64-bit digest over every field.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.write(self.segment_id.as_bytes())
            .write(&[0])
            .write(self.phase_key.as_bytes())
            .write(&[0])
            .write(&self.turn.to_le_bytes())
            .write(&self.max_turns.to_le_bytes());
        for (speaker, text) in &self.history {
            h.write(speaker.salt().as_bytes()).write(text.as_bytes()).write(&[0]);
        }
        h.finish()
    }

    /// Aggregation key used by the experience store.
    pub fn phase_turn_key(&self) -> String {
        phase_turn_key(&self.phase_key, self.turn)
    }
}

pub fn phase_turn_key(phase: &str, turn: u32) -> String {
    format!("{phase}@{turn}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dimension: usize,
    #[serde(default = "default_encoder_version")]
    pub version: u32,
}

fn default_encoder_version() -> u32 {
    1
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dimension: 128,
            version: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < MIN_ENCODER_DIM {
            return Err(Error::config(
                "encoder.dimension",
                format!("must be at least {MIN_ENCODER_DIM}, got {}", self.dimension),
            ));
        }
        Ok(())
    }

    /// Hex digest identifying the encoder scheme and its parameters.
    pub fn fingerprint(&self) -> String {
        let tag = format!("talktrack/hashed-bow/v{}/d{}", self.version, self.dimension);
        format!("{:016x}", fnv1a(tag.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEncoding {
    pub values: Vec<f64>,
    pub encoder_fingerprint: String,
}

impl StateEncoding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Digest of the raw bit patterns; used when no phase key is available.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::default();
        for v in &self.values {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

/// Lowercase, split on runs of non-alphanumeric ASCII characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
}

fn token_bucket(speaker: Speaker, token: &str, buckets: usize) -> usize {
    let mut h = Fnv1a::default();
    h.write(speaker.salt().as_bytes()).write(token.as_bytes());
    (h.finish() % buckets as u64) as usize
}

fn segment_slot(segment_id: &str) -> f64 {
    let mut h = Fnv1a::default();
    h.write(b"segment:").write(segment_id.as_bytes());
    ((h.finish() % 8) + 1) as f64 / 8.0
}

/// Encode a conversation as `[token buckets ; turn fraction, remaining
/// fraction, segment slot, bias]`.
///
/// Each utterance contributes a unit-norm vector spread over the buckets
/// its tokens hash to, so appending an utterance only touches its own
/// buckets.
pub fn encode_state(state: &DialogueState, cfg: &EncoderConfig) -> Result<StateEncoding> {
    cfg.validate()?;
    let dim = cfg.dimension;
    let buckets = dim - 4;
    let mut values = vec![0.0; dim];
    for (speaker, text) in &state.history {
        let tokens: Vec<String> = tokenize(text).collect();
        if tokens.is_empty() {
            continue;
        }
        let weight = 1.0 / (tokens.len() as f64).sqrt();
        for token in &tokens {
            values[token_bucket(*speaker, token, buckets)] += weight;
        }
    }
    let max_turns = f64::from(state.max_turns.max(1));
    values[dim - 4] = f64::from(state.turn) / max_turns;
    values[dim - 3] = f64::from(state.max_turns.saturating_sub(state.turn)) / max_turns;
    values[dim - 2] = segment_slot(&state.segment_id);
    values[dim - 1] = 1.0;
    Ok(StateEncoding {
        values,
        encoder_fingerprint: cfg.fingerprint(),
    })
}
