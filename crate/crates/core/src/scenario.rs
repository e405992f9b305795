//! Simulated-user environment: a declarative scenario file describing phases,
//! per-(phase, action) reply distributions, transitions and conversion
//! probabilities, plus an environment wrapper with sampled and aggregate
//! feedback modes.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::{ActionCatalog, ActionMask, DialogueState, Speaker, TERMINAL_PHASE};
use crate::error::{Error, Result};

const PROBABILITY_TOLERANCE: f64 = 1e-9;

fn default_conversion_value() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub segment_id: String,
    pub start_phase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub phase: String,
    pub action: String,
    pub replies: Vec<(String, f64)>,
    /// Either a phase key or [`TERMINAL_PHASE`].
    pub next_phase: String,
    #[serde(default)]
    pub conversion_probability: f64,
    #[serde(default)]
    pub immediate_reward: f64,
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub phases: Vec<String>,
    pub segments: Vec<SegmentSpec>,
    pub eligibility: BTreeMap<String, Vec<String>>,
    pub max_turns: u32,
    #[serde(default = "default_conversion_value")]
    pub conversion_value: f64,
    pub dynamics: Vec<DynamicsSpec>,
}

impl ScenarioSpec {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Where a transition leads.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum NextPhase {
    Phase(usize),
    Terminal,
}

/// Validated dynamics for one (phase, action) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub replies: Vec<(String, f64)>,
    pub modal_reply: usize,
    pub next: NextPhase,
    pub conversion_probability: f64,
    pub immediate_reward: f64,
}

impl Dynamics {
    pub fn is_terminal(&self) -> bool {
        self.next == NextPhase::Terminal
    }

    /// Expected reward of this transition, given the conversion value.
    pub fn expected_reward(&self, conversion_value: f64) -> f64 {
        if self.is_terminal() {
            self.immediate_reward + self.conversion_probability * conversion_value
        } else {
            self.immediate_reward
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub reply_text: String,
    /// Sampled conversion outcome; present only on terminal transitions in
    /// sampled mode.
    pub converted: Option<bool>,
    /// Conversion expectation; present only on terminal transitions in
    /// aggregate mode.
    pub expected_conversion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: DialogueState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// A scenario validated against an action catalog.
#[derive(Debug, Clone)]
pub struct Scenario {
    spec: ScenarioSpec,
    catalog: Arc<ActionCatalog>,
    phase_index: HashMap<String, usize>,
    segment_index: HashMap<String, usize>,
    start_phase: Vec<usize>,
    eligible: Vec<ActionMask>,
    dynamics: HashMap<(usize, usize), Dynamics>,
}

impl Scenario {
    pub fn new(spec: ScenarioSpec, catalog: Arc<ActionCatalog>) -> Result<Self> {
        if spec.max_turns < 1 {
            return Err(Error::config("max_turns", "must be at least 1"));
        }
        if !spec.conversion_value.is_finite() {
            return Err(Error::config("conversion_value", "must be finite"));
        }
        let mut phase_index = HashMap::new();
        for (i, p) in spec.phases.iter().enumerate() {
            if p == TERMINAL_PHASE {
                return Err(Error::config("phases", format!("`{TERMINAL_PHASE}` is reserved")));
            }
            if phase_index.insert(p.clone(), i).is_some() {
                return Err(Error::config("phases", format!("duplicate phase `{p}`")));
            }
        }
        let lookup_phase = |field: &str, p: &str| {
            phase_index
                .get(p)
                .copied()
                .ok_or_else(|| Error::config(field, format!("unknown phase `{p}`")))
        };

        if spec.segments.is_empty() {
            return Err(Error::config("segments", "at least one segment is required"));
        }
        let mut segment_index = HashMap::new();
        let mut start_phase = Vec::new();
        let mut eligible = Vec::new();
        for (i, seg) in spec.segments.iter().enumerate() {
            if segment_index.insert(seg.segment_id.clone(), i).is_some() {
                return Err(Error::config(
                    "segments",
                    format!("duplicate segment `{}`", seg.segment_id),
                ));
            }
            start_phase.push(lookup_phase("segments.start_phase", &seg.start_phase)?);
            let field = format!("eligibility.{}", seg.segment_id);
            let ids = spec
                .eligibility
                .get(&seg.segment_id)
                .ok_or_else(|| Error::config(&field, "missing eligibility list"))?;
            let mut mask = ActionMask::none(catalog.len());
            for id in ids {
                let idx = catalog
                    .index_of(id)
                    .map_err(|_| Error::config(&field, format!("unknown action `{id}`")))?;
                mask.set(idx, true);
            }
            if !mask.contains(catalog.fallback_index()) {
                return Err(Error::config(&field, "the fallback utterance must be eligible"));
            }
            eligible.push(mask);
        }
        for seg in spec.eligibility.keys() {
            if !segment_index.contains_key(seg) {
                return Err(Error::config("eligibility", format!("unknown segment `{seg}`")));
            }
        }

        let mut dynamics = HashMap::new();
        for (n, d) in spec.dynamics.iter().enumerate() {
            let field = format!("dynamics[{n}]");
            let phase = lookup_phase(&field, &d.phase)?;
            let action = catalog
                .index_of(&d.action)
                .map_err(|_| Error::config(&field, format!("unknown action `{}`", d.action)))?;
            let next = if d.next_phase == TERMINAL_PHASE {
                NextPhase::Terminal
            } else {
                NextPhase::Phase(lookup_phase(&field, &d.next_phase)?)
            };
            if d.replies.is_empty() {
                return Err(Error::config(&field, "reply distribution is empty"));
            }
            let mut total = 0.0;
            for (_, p) in &d.replies {
                if !(p.is_finite() && *p >= 0.0) {
                    return Err(Error::config(&field, format!("invalid reply probability {p}")));
                }
                total += p;
            }
            if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
                return Err(Error::config(
                    &field,
                    format!("reply probabilities sum to {total}, expected 1"),
                ));
            }
            if !(0.0..=1.0).contains(&d.conversion_probability) {
                return Err(Error::config(
                    &field,
                    format!("conversion_probability {} outside [0, 1]", d.conversion_probability),
                ));
            }
            if !d.immediate_reward.is_finite() {
                return Err(Error::config(&field, "immediate_reward must be finite"));
            }
            let modal_reply = modal_reply_index(&d.replies);
            let entry = Dynamics {
                replies: d.replies.clone(),
                modal_reply,
                next,
                conversion_probability: d.conversion_probability,
                immediate_reward: d.immediate_reward,
            };
            if dynamics.insert((phase, action), entry).is_some() {
                return Err(Error::config(
                    &field,
                    format!("duplicate entry for ({}, {})", d.phase, d.action),
                ));
            }
        }

        let scenario = Self {
            spec,
            catalog,
            phase_index,
            segment_index,
            start_phase,
            eligible,
            dynamics,
        };
        scenario.check_coverage()?;
        Ok(scenario)
    }

    pub fn from_json(json: &str, catalog: Arc<ActionCatalog>) -> Result<Self> {
        Self::new(ScenarioSpec::from_json(json)?, catalog)
    }

    pub fn load(path: impl AsRef<Path>, catalog: Arc<ActionCatalog>) -> Result<Self> {
        Self::new(ScenarioSpec::load(path)?, catalog)
    }

    /// Every phase a segment can reach must define dynamics for each action
    /// eligible in that segment.
    fn check_coverage(&self) -> Result<()> {
        for (seg, &start) in self.start_phase.iter().enumerate() {
            for phase in self.reachable_phases(seg) {
                for action in self.eligible[seg].indices() {
                    if !self.dynamics.contains_key(&(phase, action)) {
                        return Err(Error::config(
                            "dynamics",
                            format!(
                                "segment `{}` (start `{}`) can reach phase `{}` but action `{}` has no entry there",
                                self.spec.segments[seg].segment_id,
                                self.spec.phases[start],
                                self.spec.phases[phase],
                                self.catalog.get(action).map(|u| u.id.as_str()).unwrap_or("?"),
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Phases reachable from a segment's start under its eligible actions,
    /// in discovery order.
    pub fn reachable_phases(&self, segment: usize) -> Vec<usize> {
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut queue = VecDeque::from([self.start_phase[segment]]);
        while let Some(p) = queue.pop_front() {
            if !seen.insert(p) {
                continue;
            }
            order.push(p);
            for a in self.eligible[segment].indices() {
                if let Some(Dynamics {
                    next: NextPhase::Phase(n),
                    ..
                }) = self.dynamics.get(&(p, a))
                {
                    queue.push_back(*n);
                }
            }
        }
        order
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn catalog(&self) -> &ActionCatalog {
        &self.catalog
    }

    pub fn catalog_arc(&self) -> Arc<ActionCatalog> {
        Arc::clone(&self.catalog)
    }

    pub fn max_turns(&self) -> u32 {
        self.spec.max_turns
    }

    pub fn conversion_value(&self) -> f64 {
        self.spec.conversion_value
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.spec.segments.iter().map(|s| s.segment_id.as_str())
    }

    pub fn segment_count(&self) -> usize {
        self.spec.segments.len()
    }

    pub fn segment_id(&self, index: usize) -> &str {
        &self.spec.segments[index].segment_id
    }

    pub fn segment_index(&self, segment_id: &str) -> Result<usize> {
        self.segment_index.get(segment_id).copied().ok_or_else(|| Error::Lookup {
            what: "segment",
            key: segment_id.to_owned(),
        })
    }

    pub fn phase_count(&self) -> usize {
        self.spec.phases.len()
    }

    pub fn phase_key(&self, index: usize) -> &str {
        &self.spec.phases[index]
    }

    pub fn phase_index(&self, key: &str) -> Result<usize> {
        self.phase_index.get(key).copied().ok_or_else(|| Error::Lookup {
            what: "phase",
            key: key.to_owned(),
        })
    }

    pub fn start_phase(&self, segment: usize) -> usize {
        self.start_phase[segment]
    }

    /// Actions the environment accepts for a segment.
    pub fn eligible_mask(&self, segment_id: &str) -> Result<&ActionMask> {
        Ok(&self.eligible[self.segment_index(segment_id)?])
    }

    pub fn eligible_by_index(&self, segment: usize) -> &ActionMask {
        &self.eligible[segment]
    }

    pub fn dynamics(&self, phase: usize, action: usize) -> Option<&Dynamics> {
        self.dynamics.get(&(phase, action))
    }

    /// Initial state for a segment. Reset is deterministic; the seed
    /// parameter of the environment only affects sampled steps.
    pub fn reset(&self, segment_id: &str) -> Result<DialogueState> {
        let seg = self.segment_index(segment_id)?;
        Ok(DialogueState::new(
            segment_id,
            self.spec.phases[self.start_phase[seg]].clone(),
            self.spec.max_turns,
        ))
    }

    fn resolve(&self, state: &DialogueState, action: usize) -> Result<&Dynamics> {
        if state.is_terminal() {
            return Err(Error::Protocol(format!(
                "cannot step a terminal state (phase `{}`, turn {})",
                state.phase_key, state.turn
            )));
        }
        let seg = self.segment_index(&state.segment_id)?;
        let utterance = self.catalog.get(action).ok_or_else(|| Error::Lookup {
            what: "action index",
            key: action.to_string(),
        })?;
        if !self.eligible[seg].contains(action) {
            return Err(Error::Ineligible {
                action: utterance.id.clone(),
                segment: state.segment_id.clone(),
            });
        }
        let phase = self.phase_index(&state.phase_key)?;
        self.dynamics.get(&(phase, action)).ok_or_else(|| {
            Error::Data(format!(
                "no dynamics for phase `{}` and action `{}`",
                state.phase_key, utterance.id
            ))
        })
    }

    fn successor(&self, state: &DialogueState, action: usize, dynamics: &Dynamics, reply: &str) -> (DialogueState, bool) {
        let mut next = state.clone();
        let text = self.catalog.get(action).map(|u| u.text.clone()).unwrap_or_default();
        next.history.push((Speaker::Agent, text));
        next.history.push((Speaker::User, reply.to_owned()));
        next.turn += 1;
        next.phase_key = match dynamics.next {
            NextPhase::Terminal => TERMINAL_PHASE.to_owned(),
            NextPhase::Phase(p) => self.spec.phases[p].clone(),
        };
        let done = dynamics.is_terminal() || next.turn >= next.max_turns;
        (next, done)
    }

    /// Sampled step: the reply is drawn from the reply distribution and a
    /// terminal transition converts with its conversion probability.
    pub fn step_sampled<R: Rng + ?Sized>(
        &self,
        state: &DialogueState,
        action: usize,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let d = self.resolve(state, action)?;
        let reply = sample_reply(&d.replies, rng.random::<f64>());
        let (next_state, done) = self.successor(state, action, d, &d.replies[reply].0);
        let mut reward = d.immediate_reward;
        let converted = if d.is_terminal() {
            let converted = rng.random::<f64>() < d.conversion_probability;
            if converted {
                reward += self.spec.conversion_value;
            }
            Some(converted)
        } else {
            None
        };
        Ok(StepOutcome {
            next_state,
            reward,
            done,
            info: StepInfo {
                reply_text: d.replies[reply].0.clone(),
                converted,
                expected_conversion: None,
            },
        })
    }

    /// Aggregate step: modal reply, expected conversion reward, no
    /// randomness.
    pub fn step_aggregate(&self, state: &DialogueState, action: usize) -> Result<StepOutcome> {
        let d = self.resolve(state, action)?;
        let reply = &d.replies[d.modal_reply].0;
        let (next_state, done) = self.successor(state, action, d, reply);
        let expected_conversion = d.is_terminal().then_some(d.conversion_probability);
        Ok(StepOutcome {
            next_state,
            reward: d.expected_reward(self.spec.conversion_value),
            done,
            info: StepInfo {
                reply_text: reply.clone(),
                converted: None,
                expected_conversion,
            },
        })
    }

    /// Step with a reply supplied from outside, e.g. typed by a person
    /// playing the customer. The phase moves as in the other step modes;
    /// no reward is produced. Returns the next state and whether the
    /// conversation is over.
    pub fn step_with_reply(&self, state: &DialogueState, action: usize, reply: &str) -> Result<(DialogueState, bool)> {
        let d = self.resolve(state, action)?;
        Ok(self.successor(state, action, d, reply))
    }

    pub fn step_by_id<R: Rng + ?Sized>(
        &self,
        state: &DialogueState,
        action_id: &str,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        self.step_sampled(state, self.catalog.index_of(action_id)?, rng)
    }
}

fn modal_reply_index(replies: &[(String, f64)]) -> usize {
    let mut best = 0;
    for (i, (text, p)) in replies.iter().enumerate().skip(1) {
        let (best_text, best_p) = &replies[best];
        if *p > *best_p || (*p == *best_p && text < best_text) {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; `u` is uniform on [0, 1).
fn sample_reply(replies: &[(String, f64)], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, (_, p)) in replies.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave the cumulative sum a hair below one.
    replies.iter().rposition(|(_, p)| *p > 0.0).unwrap_or(replies.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// Per-step samples from the reply and conversion distributions.
    #[default]
    Sampled,
    /// Modal replies and expected conversion rewards.
    Aggregate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvCounters {
    pub steps: u64,
    pub rng_draws: u64,
    /// Number of reward values handed out through [`ScenarioEnv::step`].
    pub reward_reads: u64,
}

/// One environment transition as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub segment: String,
    pub phase: String,
    pub turn: u32,
    pub action: usize,
    pub reply: String,
    pub reward: f64,
    pub done: bool,
}

/// Stateful environment: a scenario, a feedback mode and an owned RNG.
/// One instance per worker.
#[derive(Debug, Clone)]
pub struct ScenarioEnv {
    scenario: Arc<Scenario>,
    mode: FeedbackMode,
    rng: ChaCha8Rng,
    counters: EnvCounters,
    trace: Option<Vec<TraceEvent>>,
}

impl ScenarioEnv {
    pub fn new(scenario: Arc<Scenario>, mode: FeedbackMode, seed: u64) -> Self {
        Self {
            scenario,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: EnvCounters::default(),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn scenario_arc(&self) -> Arc<Scenario> {
        Arc::clone(&self.scenario)
    }

    pub fn mode(&self) -> FeedbackMode {
        self.mode
    }

    pub fn counters(&self) -> EnvCounters {
        self.counters
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceEvent>> {
        self.trace.take()
    }

    pub fn reset(&mut self, segment_id: &str) -> Result<DialogueState> {
        self.scenario.reset(segment_id)
    }

    pub fn step(&mut self, state: &DialogueState, action: usize) -> Result<StepOutcome> {
        let outcome = self.transition(state, action)?;
        self.counters.reward_reads += 1;
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEvent {
                segment: state.segment_id.clone(),
                phase: state.phase_key.clone(),
                turn: state.turn,
                action,
                reply: outcome.info.reply_text.clone(),
                reward: outcome.reward,
                done: outcome.done,
            });
        }
        Ok(outcome)
    }

    /// Move the conversation forward without reading the reward channel.
    pub fn advance(&mut self, state: &DialogueState, action: usize) -> Result<(DialogueState, bool)> {
        let outcome = self.transition(state, action)?;
        Ok((outcome.next_state, outcome.done))
    }

    fn transition(&mut self, state: &DialogueState, action: usize) -> Result<StepOutcome> {
        let outcome = match self.mode {
            FeedbackMode::Sampled => {
                let mut counting = CountingRng {
                    inner: &mut self.rng,
                    draws: 0,
                };
                let outcome = self.scenario.step_sampled(state, action, &mut counting)?;
                self.counters.rng_draws += counting.draws;
                outcome
            }
            FeedbackMode::Aggregate => self.scenario.step_aggregate(state, action)?,
        };
        self.counters.steps += 1;
        Ok(outcome)
    }
}

/// Wraps an RNG and counts 64-bit draws.
struct CountingRng<'a, R: Rng> {
    inner: &'a mut R,
    draws: u64,
}

impl<R: Rng> rand::RngCore for CountingRng<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draws += 1;
        self.inner.fill_bytes(dst)
    }
}
