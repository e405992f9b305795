//! Replay memory, episode logs and aggregation of logged conversations.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dialogue::{phase_turn_key, ActionMask, TERMINAL_PHASE};
use crate::error::{Error, Result};
use crate::scenario::ScenarioSpec;

/// One `(s, a, r, s', done)` tuple plus the action mask that applies in `s'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state_enc: Vec<f64>,
    pub action_index: usize,
    pub reward: f64,
    pub next_state_enc: Vec<f64>,
    pub done: bool,
    pub allowed_mask_next: ActionMask,
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer_capacity", "must be at least 1"));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total pushes since creation, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    /// `n` independent uniform draws, with replacement.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyInput("cannot sample from an empty replay buffer"));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// One agent turn in a logged conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggedTurn {
    pub phase: String,
    pub action_id: String,
    pub reply: String,
    pub reward: f64,
}

/// One logged conversation. The schema has no room for customer or agent
/// identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggedEpisode {
    pub segment: String,
    pub turns: Vec<LoggedTurn>,
    #[serde(serialize_with = "bool_as_int", deserialize_with = "int_as_bool")]
    pub converted: bool,
}

fn bool_as_int<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

fn int_as_bool<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(serde::de::Error::custom(format!("converted must be 0 or 1, got {other}"))),
    }
}

impl LoggedEpisode {
    pub fn new(segment: impl Into<String>) -> Self {
        Self {
            segment: segment.into(),
            turns: Vec::new(),
            converted: false,
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.turns.iter().map(|t| t.reward).sum()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.segment.is_empty() {
            return Err("empty segment".into());
        }
        if let Some((i, _)) = self.turns.iter().enumerate().find(|(_, t)| !t.reward.is_finite()) {
            return Err(format!("turn {i}: non-finite reward"));
        }
        if let Some((i, _)) = self
            .turns
            .iter()
            .enumerate()
            .find(|(_, t)| t.phase.is_empty() || t.action_id.is_empty())
        {
            return Err(format!("turn {i}: empty phase or action_id"));
        }
        Ok(())
    }
}

/// A malformed log line; `line` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub path: PathBuf,
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.path.display(), self.line, self.message)
    }
}

impl From<LineError> for Error {
    fn from(e: LineError) -> Self {
        Error::Schema {
            path: e.path,
            line: e.line,
            message: e.message,
        }
    }
}

/// Result of ingesting one or more log files.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub episodes: Vec<LoggedEpisode>,
    pub errors: Vec<LineError>,
}

impl IngestReport {
    /// Fail on the first malformed line, if any.
    pub fn into_strict(self) -> Result<Vec<LoggedEpisode>> {
        match self.errors.into_iter().next() {
            Some(e) => Err(e.into()),
            None => Ok(self.episodes),
        }
    }
}

/// Read a JSON-lines episode log. Blank lines are skipped; malformed lines
/// are reported with their line number and do not abort the read.
pub fn ingest_log(path: impl AsRef<Path>) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = IngestReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<LoggedEpisode>(&line)
            .map_err(|e| e.to_string())
            .and_then(|ep| ep.validate().map(|()| ep));
        match parsed {
            Ok(ep) => report.episodes.push(ep),
            Err(message) => report.errors.push(LineError {
                path: path.to_owned(),
                line: i + 1,
                message,
            }),
        }
    }
    if !report.errors.is_empty() {
        log::warn!("{}: {} malformed line(s)", path.display(), report.errors.len());
    }
    Ok(report)
}

/// Ingest every `*.jsonl` file in a directory, in file-name order.
pub fn ingest_dir(dir: impl AsRef<Path>) -> Result<IngestReport> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    files.sort();
    let reports: Vec<IngestReport> = files.par_iter().map(ingest_log).collect::<Result<_>>()?;
    let mut merged = IngestReport::default();
    for r in reports {
        merged.episodes.extend(r.episodes);
        merged.errors.extend(r.errors);
    }
    Ok(merged)
}

pub fn write_log(path: impl AsRef<Path>, episodes: &[LoggedEpisode]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Statistics for one `(state, action)` pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub reply_counts: BTreeMap<String, u64>,
    /// Phase observed on the following turn; only recorded when the
    /// successor is known from the log.
    pub next_phase_counts: BTreeMap<String, u64>,
    pub episodes: u64,
    pub conversions: u64,
    pub reward_sum: f64,
}

impl AggregateEntry {
    /// Most frequent reply; ties go to the lexicographically smallest.
    pub fn modal_reply(&self) -> Option<&str> {
        modal(&self.reply_counts)
    }

    pub fn modal_next_phase(&self) -> Option<&str> {
        modal(&self.next_phase_counts)
    }

    pub fn mean_conversion(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.conversions as f64 / self.episodes as f64
        }
    }

    pub fn mean_reward(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.reward_sum / self.episodes as f64
        }
    }
}

fn modal(counts: &BTreeMap<String, u64>) -> Option<&str> {
    let mut best: Option<(&str, u64)> = None;
    for (k, &c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k)
}

/// Per-`(phase@turn, action_id)` statistics over logged episodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub entries: BTreeMap<String, BTreeMap<String, AggregateEntry>>,
}

impl AggregateTable {
    pub fn get(&self, state_key: &str, action_id: &str) -> Option<&AggregateEntry> {
        self.entries.get(state_key)?.get(action_id)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// Replace the dynamics of `template` with logged statistics wherever
    /// the logs cover a `(phase, action)` pair. Counts are pooled across
    /// turns. The result is a scenario whose aggregate-mode behaviour follows
    /// the logs.
    pub fn apply_to(&self, template: &ScenarioSpec) -> Result<ScenarioSpec> {
        let mut pooled: BTreeMap<(String, String), AggregateEntry> = BTreeMap::new();
        for (key, actions) in &self.entries {
            let phase = key.rsplit_once('@').map_or(key.as_str(), |(p, _)| p);
            for (action, entry) in actions {
                let acc = pooled.entry((phase.to_owned(), action.clone())).or_default();
                merge_counts(&mut acc.reply_counts, &entry.reply_counts);
                merge_counts(&mut acc.next_phase_counts, &entry.next_phase_counts);
                acc.episodes += entry.episodes;
                acc.conversions += entry.conversions;
                acc.reward_sum += entry.reward_sum;
            }
        }
        let mut spec = template.clone();
        for d in &mut spec.dynamics {
            let Some(entry) = pooled.get(&(d.phase.clone(), d.action.clone())) else {
                continue;
            };
            if let Some(next) = entry.modal_next_phase() {
                d.next_phase = next.to_owned();
            }
            let total: u64 = entry.reply_counts.values().sum();
            if total > 0 {
                d.replies = entry
                    .reply_counts
                    .iter()
                    .map(|(r, &c)| (r.clone(), c as f64 / total as f64))
                    .collect();
            }
            let terminal = d.next_phase == TERMINAL_PHASE;
            d.conversion_probability = if terminal { entry.mean_conversion() } else { 0.0 };
            let conversion_part = if terminal {
                entry.mean_conversion() * template.conversion_value
            } else {
                0.0
            };
            d.immediate_reward = entry.mean_reward() - conversion_part;
        }
        Ok(spec)
    }
}

fn merge_counts(into: &mut BTreeMap<String, u64>, from: &BTreeMap<String, u64>) {
    for (k, v) in from {
        *into.entry(k.clone()).or_default() += v;
    }
}

/// Build the aggregate table. The result does not depend on episode order.
///
/// `max_turns`, when known, disambiguates the final turn of an episode: a
/// conversation that ends before the budget ended by a terminal transition.
pub fn aggregate(episodes: &[LoggedEpisode], max_turns: Option<u32>) -> AggregateTable {
    let mut rewards: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut table = AggregateTable::default();
    for ep in episodes {
        let n = ep.turns.len();
        for (t, turn) in ep.turns.iter().enumerate() {
            let key = phase_turn_key(&turn.phase, t as u32);
            let entry = table
                .entries
                .entry(key.clone())
                .or_default()
                .entry(turn.action_id.clone())
                .or_default();
            *entry.reply_counts.entry(turn.reply.clone()).or_default() += 1;
            let next = if t + 1 < n {
                Some(ep.turns[t + 1].phase.as_str())
            } else if ep.converted || max_turns.is_some_and(|m| (n as u32) < m) {
                Some(TERMINAL_PHASE)
            } else {
                None
            };
            if let Some(next) = next {
                *entry.next_phase_counts.entry(next.to_owned()).or_default() += 1;
            }
            entry.episodes += 1;
            entry.conversions += u64::from(ep.converted);
            rewards.entry((key, turn.action_id.clone())).or_default().push(turn.reward);
        }
    }
    // Summing in sorted order keeps the float total independent of input order.
    for ((key, action), mut values) in rewards {
        values.sort_by(f64::total_cmp);
        let entry = table.entries.get_mut(&key).and_then(|m| m.get_mut(&action));
        if let Some(entry) = entry {
            entry.reward_sum = values.iter().sum();
        }
    }
    table
}
