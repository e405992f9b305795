//! A scenario bundled with its compliance gate and state encoder: everything
//! an agent needs to act in a conversation.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::compliance::{ActionOrigin, AuditLog, ComplianceGate, RuleSet};
use crate::dialogue::{
    encode_state, ActionCatalog, ActionMask, DialogueState, EncoderConfig, Speaker, StateEncoding, TERMINAL_PHASE,
};
use crate::error::{Error, Result};
use crate::experience::{LoggedEpisode, LoggedTurn};
use crate::policy::{derive_seed, Policy};
use crate::scenario::{FeedbackMode, Scenario, ScenarioEnv};

pub const TOYSHOP_CATALOG_JSON: &str = include_str!("../data/toyshop_catalog.json");
pub const TOYSHOP_RULES_JSON: &str = include_str!("../data/toyshop_rules.json");
pub const TOYSHOP_SCENARIO_JSON: &str = include_str!("../data/toyshop_scenario.json");

#[derive(Debug, Clone)]
pub struct World {
    scenario: Arc<Scenario>,
    gate: ComplianceGate,
    encoder: EncoderConfig,
}

impl World {
    pub fn new(scenario: Arc<Scenario>, rules: Arc<RuleSet>, encoder: EncoderConfig) -> Result<Self> {
        encoder.validate()?;
        let gate = ComplianceGate::new(scenario.catalog_arc(), rules);
        Ok(Self {
            scenario,
            gate,
            encoder,
        })
    }

    pub fn with_gate(scenario: Arc<Scenario>, gate: ComplianceGate, encoder: EncoderConfig) -> Result<Self> {
        encoder.validate()?;
        Ok(Self {
            scenario,
            gate,
            encoder,
        })
    }

    /// Load a scenario, catalog and rules file.
    pub fn load(
        scenario: impl AsRef<Path>,
        catalog: impl AsRef<Path>,
        rules: impl AsRef<Path>,
        encoder: EncoderConfig,
    ) -> Result<Self> {
        let catalog = Arc::new(ActionCatalog::load(catalog)?);
        let scenario = Arc::new(Scenario::load(scenario, catalog)?);
        Self::new(scenario, Arc::new(RuleSet::load(rules)?), encoder)
    }

    /// Replace the gate's audit log, e.g. to share one log across runs.
    pub fn with_audit(mut self, audit: Arc<AuditLog>) -> Self {
        self.gate = ComplianceGate::with_audit(self.scenario.catalog_arc(), Arc::new(self.gate.rules().clone()), audit);
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn scenario_arc(&self) -> Arc<Scenario> {
        Arc::clone(&self.scenario)
    }

    pub fn catalog(&self) -> &ActionCatalog {
        self.scenario.catalog()
    }

    pub fn gate(&self) -> &ComplianceGate {
        &self.gate
    }

    pub fn rules(&self) -> &RuleSet {
        self.gate.rules()
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn num_actions(&self) -> usize {
        self.catalog().len()
    }

    pub fn encode(&self, state: &DialogueState) -> Result<StateEncoding> {
        encode_state(state, &self.encoder)
    }

    /// Actions an agent may pick: compliance mask intersected with the
    /// segment's eligibility filter. Always contains the fallback.
    pub fn allowed(&self, state: &DialogueState) -> Result<ActionMask> {
        let eligible = self.scenario.eligible_mask(&state.segment_id)?;
        Ok(self.gate.mask(state).intersect(eligible))
    }

    pub fn env(&self, mode: FeedbackMode, seed: u64) -> ScenarioEnv {
        ScenarioEnv::new(self.scenario_arc(), mode, seed)
    }

    /// Environment for a training or evaluation run seeded with `seed`.
    pub fn make_env(&self, opts: &EnvOptions, seed: u64) -> ScenarioEnv {
        let env_seed = opts.env_seed.unwrap_or_else(|| derive_seed(seed, "env"));
        let env = self.env(opts.mode, env_seed);
        if opts.trace {
            env.with_trace()
        } else {
            env
        }
    }
}

impl World {
    /// Play `episodes` sampled conversations with `policy` and record them
    /// in the log schema. Segments rotate by episode index.
    pub fn simulate_logs(&self, policy: &dyn Policy, episodes: usize, seed: u64) -> Result<Vec<LoggedEpisode>> {
        let mut env = self.env(FeedbackMode::Sampled, derive_seed(seed, "logs"));
        let segments: Vec<String> = self.scenario.segments().map(str::to_owned).collect();
        let mut out = Vec::with_capacity(episodes);
        for k in 0..episodes {
            let segment = &segments[k % segments.len()];
            let mut log = LoggedEpisode::new(segment.clone());
            let mut state = env.reset(segment)?;
            loop {
                let enc = self.encode(&state)?.values;
                let allowed = self.allowed(&state)?;
                let chosen = policy.act(&state, &enc, &allowed)?;
                let action = self.gate.enforce(chosen, &state, ActionOrigin::Agent)?.executed;
                let step = env.step(&state, action)?;
                log.turns.push(LoggedTurn {
                    phase: state.phase_key.clone(),
                    action_id: self.catalog().get(action).map(|u| u.id.clone()).unwrap_or_default(),
                    reply: step.info.reply_text.clone(),
                    reward: step.reward,
                });
                if step.done {
                    log.converted = step.info.converted == Some(true);
                    break;
                }
                state = step.next_state;
            }
            out.push(log);
        }
        Ok(out)
    }

    /// Rebuild the conversation states behind a logged episode. Phases come
    /// from the log itself; the final step is marked done.
    pub fn replay_log(&self, episode: &LoggedEpisode) -> Result<Vec<ReplayedStep>> {
        let max_turns = self.scenario.max_turns();
        if episode.turns.len() > max_turns as usize {
            return Err(Error::Data(format!(
                "episode has {} turns, budget is {max_turns}",
                episode.turns.len()
            )));
        }
        let mut state = self.scenario.reset(&episode.segment).map_err(|e| Error::Data(e.to_string()))?;
        let mut steps = Vec::with_capacity(episode.turns.len());
        for (i, turn) in episode.turns.iter().enumerate() {
            self.scenario
                .phase_index(&turn.phase)
                .map_err(|_| Error::Data(format!("turn {i}: unknown phase `{}`", turn.phase)))?;
            state.phase_key.clone_from(&turn.phase);
            let action = self
                .catalog()
                .index_of(&turn.action_id)
                .map_err(|_| Error::Data(format!("turn {i}: unknown action `{}`", turn.action_id)))?;
            let mut next = state.clone();
            next.history.push((Speaker::Agent, self.catalog().get(action).map(|u| u.text.clone()).unwrap_or_default()));
            next.history.push((Speaker::User, turn.reply.clone()));
            next.turn += 1;
            let done = i + 1 == episode.turns.len();
            next.phase_key = match episode.turns.get(i + 1) {
                Some(t) => t.phase.clone(),
                None if next.turn < max_turns => TERMINAL_PHASE.to_owned(),
                None => turn.phase.clone(),
            };
            steps.push(ReplayedStep {
                state: state.clone(),
                action,
                reward: turn.reward,
                next_state: next.clone(),
                done,
            });
            state = next;
        }
        Ok(steps)
    }
}

/// One step of a replayed log.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayedStep {
    pub state: DialogueState,
    pub action: usize,
    pub reward: f64,
    pub next_state: DialogueState,
    pub done: bool,
}

/// How a run talks to the simulator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvOptions {
    pub mode: FeedbackMode,
    /// Environment RNG seed; derived from the run seed when absent.
    pub env_seed: Option<u64>,
    /// Record every environment step.
    pub trace: bool,
}

impl EnvOptions {
    pub fn aggregate() -> Self {
        Self {
            mode: FeedbackMode::Aggregate,
            ..Self::default()
        }
    }
}

/// Bundled toy-shop scenario with its catalog and rules.
pub fn toyshop_catalog() -> Arc<ActionCatalog> {
    Arc::new(ActionCatalog::from_json(TOYSHOP_CATALOG_JSON).expect("bundled catalog is valid"))
}

pub fn toyshop_scenario() -> Arc<Scenario> {
    Arc::new(Scenario::from_json(TOYSHOP_SCENARIO_JSON, toyshop_catalog()).expect("bundled scenario is valid"))
}

pub fn toyshop_rules() -> Arc<RuleSet> {
    Arc::new(RuleSet::from_json(TOYSHOP_RULES_JSON).expect("bundled rules are valid"))
}

pub fn toyshop() -> World {
    World::new(toyshop_scenario(), toyshop_rules(), EncoderConfig::default()).expect("bundled world is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toyshop_loads_and_masks() {
        let w = toyshop();
        assert!(w.scenario().phase_count() <= 12);
        assert!(w.num_actions() <= 6);
        let s = w.scenario().reset("retail").unwrap();
        let allowed = w.allowed(&s).unwrap();
        let ids: Vec<&str> = allowed.indices().map(|i| w.catalog().get(i).unwrap().id.as_str()).collect();
        assert_eq!(ids, ["greet", "probe_age", "fallback"]);
        let s = w.scenario().reset("wholesale").unwrap();
        let mut s1 = s.clone();
        s1.turn = 1;
        s1.history = vec![
            (crate::dialogue::Speaker::Agent, "x".into()),
            (crate::dialogue::Speaker::User, "y".into()),
        ];
        let ids: Vec<&str> = w.allowed(&s1).unwrap().indices().map(|i| w.catalog().get(i).unwrap().id.as_str()).collect();
        assert_eq!(ids, ["greet", "pitch_bundle", "close", "fallback"]);
    }
}
