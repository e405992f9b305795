//! Exact finite-MDP view of a scenario, used as a testing oracle.
//!
//! States are the (phase, turn) grid of one segment plus a single absorbing
//! terminal state. Expected rewards fold in the conversion expectation, so
//! the table matches sampled-mode dynamics in expectation.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::dialogue::{ActionMask, DialogueState};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::scenario::{NextPhase, Scenario};
use crate::world::World;

pub const DEFAULT_ORACLE_CAP: usize = 10_000;

#[derive(Debug, Clone)]
pub struct ExplicitMdp {
    pub segment_id: String,
    pub num_phases: usize,
    pub max_turns: u32,
    pub num_actions: usize,
    /// Allowed actions per state; empty for the terminal state.
    pub allowed: Vec<ActionMask>,
    /// `transitions[s][a]` lists `(next_state, probability)`; empty when `a`
    /// is not allowed in `s`.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    /// Expected immediate reward of `(s, a)`; zero when not allowed.
    pub rewards: Vec<Vec<f64>>,
    pub start: usize,
}

impl ExplicitMdp {
    pub fn num_states(&self) -> usize {
        self.allowed.len()
    }

    pub fn terminal(&self) -> usize {
        self.num_states() - 1
    }

    pub fn state_index(&self, phase: usize, turn: u32) -> usize {
        phase * self.max_turns as usize + turn as usize
    }

    /// Inverse of [`state_index`](Self::state_index); `None` for the
    /// terminal state.
    pub fn phase_turn(&self, state: usize) -> Option<(usize, u32)> {
        (state < self.terminal()).then(|| {
            let t = self.max_turns as usize;
            (state / t, (state % t) as u32)
        })
    }

    /// States reachable from the start state under allowed actions, sorted.
    pub fn reachable(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_states()];
        let mut stack = vec![self.start];
        while let Some(s) = stack.pop() {
            if std::mem::replace(&mut seen[s], true) {
                continue;
            }
            for succ in &self.transitions[s] {
                for &(n, p) in succ {
                    if p > 0.0 && !seen[n] {
                        stack.push(n);
                    }
                }
            }
        }
        (0..self.num_states()).filter(|&s| seen[s] && s != self.terminal()).collect()
    }
}

/// Enumerate using environment eligibility only.
pub fn enumerate_mdp(scenario: &Scenario, segment_id: &str, cap: usize) -> Result<ExplicitMdp> {
    let seg = scenario.segment_index(segment_id)?;
    let eligible = scenario.eligible_by_index(seg).clone();
    build(scenario, segment_id, cap, |_| Ok(eligible.clone()))
}

/// Enumerate using the world's full action filter (eligibility and
/// compliance mask), i.e. the action sets agents actually face.
pub fn enumerate_world_mdp(world: &World, segment_id: &str, cap: usize) -> Result<ExplicitMdp> {
    build(world.scenario(), segment_id, cap, |s| world.allowed(s))
}

fn build(
    scenario: &Scenario,
    segment_id: &str,
    cap: usize,
    allowed_for: impl Fn(&DialogueState) -> Result<ActionMask>,
) -> Result<ExplicitMdp> {
    scenario.segment_index(segment_id)?;
    let phases = scenario.phase_count();
    let max_turns = scenario.max_turns();
    let grid = phases * max_turns as usize;
    if grid > cap {
        return Err(Error::OracleSize { states: grid, cap });
    }
    let n_actions = scenario.catalog().len();
    let n_states = grid + 1;
    let terminal = grid;
    let index = |phase: usize, turn: u32| phase * max_turns as usize + turn as usize;

    let mut allowed = vec![ActionMask::none(n_actions); n_states];
    let mut transitions = vec![vec![Vec::new(); n_actions]; n_states];
    let mut rewards = vec![vec![0.0; n_actions]; n_states];
    for phase in 0..phases {
        for turn in 0..max_turns {
            let s = index(phase, turn);
            let mut probe = DialogueState::new(segment_id, scenario.phase_key(phase), max_turns);
            probe.turn = turn;
            let mask = allowed_for(&probe)?;
            for a in mask.indices() {
                let Some(d) = scenario.dynamics(phase, a) else {
                    continue;
                };
                let next = match d.next {
                    NextPhase::Terminal => terminal,
                    NextPhase::Phase(_) if turn + 1 >= max_turns => terminal,
                    NextPhase::Phase(p) => index(p, turn + 1),
                };
                allowed[s].set(a, true);
                transitions[s][a] = vec![(next, 1.0)];
                rewards[s][a] = d.expected_reward(scenario.conversion_value());
            }
        }
    }
    let seg = scenario.segment_index(segment_id)?;
    Ok(ExplicitMdp {
        segment_id: segment_id.to_owned(),
        num_phases: phases,
        max_turns,
        num_actions: n_actions,
        allowed,
        transitions,
        rewards,
        start: index(scenario.start_phase(seg), 0),
    })
}

#[derive(Debug, Clone)]
pub struct ValueIterationResult {
    /// `q[s][a]`; `NEG_INFINITY` where `a` is not allowed.
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Greedy action per state, ties to the lowest index; `None` when no
    /// action is available.
    pub policy: Vec<Option<usize>>,
    pub iterations: usize,
    pub residual: f64,
}

impl ValueIterationResult {
    /// True when `action` attains the optimal value at `state` within `tol`.
    pub fn is_optimal(&self, state: usize, action: usize, tol: f64) -> bool {
        self.q[state][action] >= self.v[state] - tol
    }
}

fn q_value(mdp: &ExplicitMdp, v: &[f64], gamma: f64, s: usize, a: usize) -> f64 {
    mdp.rewards[s][a] + gamma * mdp.transitions[s][a].iter().map(|&(n, p)| p * v[n]).sum::<f64>()
}

/// Synchronous value iteration until the sup-norm Bellman residual drops
/// below `tol`.
pub fn value_iteration(mdp: &ExplicitMdp, gamma: f64, tol: f64) -> Result<ValueIterationResult> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Precondition(format!("gamma {gamma} outside [0, 1]")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Precondition(format!("tolerance {tol} must be positive")));
    }
    let n = mdp.num_states();
    let mut v = vec![0.0; n];
    let mut iterations = 0;
    // Rewards only accrue before the horizon, so the grid converges in at
    // most max_turns + 1 sweeps; the bound guards malformed inputs.
    let max_iterations = 10 * (mdp.max_turns as usize + 2) + 10_000;
    let residual = loop {
        iterations += 1;
        let next: Vec<f64> = (0..n)
            .map(|s| {
                let best = mdp.allowed[s]
                    .indices()
                    .map(|a| q_value(mdp, &v, gamma, s, a))
                    .fold(f64::NEG_INFINITY, f64::max);
                if best == f64::NEG_INFINITY {
                    0.0
                } else {
                    best
                }
            })
            .collect();
        let residual = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if residual < tol || iterations >= max_iterations {
            break residual;
        }
    };
    let mut q = vec![vec![f64::NEG_INFINITY; mdp.num_actions]; n];
    let mut policy = vec![None; n];
    for s in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for a in mdp.allowed[s].indices() {
            let value = q_value(mdp, &v, gamma, s, a);
            q[s][a] = value;
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((a, value));
            }
        }
        policy[s] = best.map(|(a, _)| a);
    }
    Ok(ValueIterationResult {
        q,
        v,
        policy,
        iterations,
        residual,
    })
}

/// Exact value of a stochastic policy. `policy(s)` returns a distribution
/// over actions; mass on disallowed actions is an error.
pub fn evaluate_policy(
    mdp: &ExplicitMdp,
    gamma: f64,
    policy: impl Fn(usize) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let n = mdp.num_states();
    let dists: Vec<Vec<f64>> = (0..n).map(&policy).collect();
    for (s, d) in dists.iter().enumerate() {
        if s == mdp.terminal() || mdp.allowed[s].count() == 0 {
            continue;
        }
        if d.len() != mdp.num_actions {
            return Err(Error::Dimension {
                expected: mdp.num_actions,
                actual: d.len(),
            });
        }
        for (a, &p) in d.iter().enumerate() {
            if p > 0.0 && !mdp.allowed[s].contains(a) {
                return Err(Error::Precondition(format!("policy puts mass on disallowed action {a} in state {s}")));
            }
        }
    }
    let mut v = vec![0.0; n];
    for _ in 0..=(mdp.max_turns as usize + 1) {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if s == mdp.terminal() {
                continue;
            }
            next[s] = mdp.allowed[s]
                .indices()
                .map(|a| dists[s][a] * q_value(mdp, &v, gamma, s, a))
                .sum();
        }
        v = next;
    }
    Ok(v)
}

/// A representative conversation for every reachable grid state of a
/// world MDP. Each state is reached by breadth-first search from the start,
/// trying actions in catalog order, with modal replies.
pub fn canonical_states(world: &World, mdp: &ExplicitMdp) -> Result<BTreeMap<usize, DialogueState>> {
    let scenario = world.scenario();
    let mut found = BTreeMap::new();
    let start = scenario.reset(&mdp.segment_id)?;
    found.insert(mdp.start, start.clone());
    let mut queue = VecDeque::from([start]);
    while let Some(state) = queue.pop_front() {
        for a in world.allowed(&state)?.indices() {
            let out = scenario.step_aggregate(&state, a)?;
            if out.done {
                continue;
            }
            let next = &out.next_state;
            let idx = mdp.state_index(scenario.phase_index(&next.phase_key)?, next.turn);
            if let std::collections::btree_map::Entry::Vacant(slot) = found.entry(idx) {
                slot.insert(next.clone());
                queue.push_back(next.clone());
            }
        }
    }
    Ok(found)
}

/// The value-iteration greedy policy of a world, one solved MDP per segment.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    phases: Vec<String>,
    solved: BTreeMap<String, (ExplicitMdp, ValueIterationResult)>,
}

impl OraclePolicy {
    pub fn new(world: &World, gamma: f64) -> Result<Self> {
        let scenario = world.scenario();
        let mut solved = BTreeMap::new();
        for segment in scenario.segments() {
            let mdp = enumerate_world_mdp(world, segment, DEFAULT_ORACLE_CAP)?;
            let vi = value_iteration(&mdp, gamma, 1e-12)?;
            solved.insert(segment.to_owned(), (mdp, vi));
        }
        Ok(Self {
            phases: (0..scenario.phase_count()).map(|p| scenario.phase_key(p).to_owned()).collect(),
            solved,
        })
    }

    /// Optimal expected return from the start of `segment`.
    pub fn start_value(&self, segment: &str) -> Option<f64> {
        self.solved.get(segment).map(|(mdp, vi)| vi.v[mdp.start])
    }

    /// Mean optimal start value over segments, the expectation under
    /// round-robin segment assignment.
    pub fn mean_start_value(&self) -> f64 {
        let n = self.solved.len().max(1) as f64;
        self.solved.values().map(|(mdp, vi)| vi.v[mdp.start]).sum::<f64>() / n
    }

    pub fn solved(&self, segment: &str) -> Option<&(ExplicitMdp, ValueIterationResult)> {
        self.solved.get(segment)
    }

    /// Optimal action for a live conversation, or `None` for terminal or
    /// unknown states.
    pub fn action_for(&self, state: &DialogueState) -> Option<usize> {
        let (mdp, vi) = self.solved.get(&state.segment_id)?;
        let phase = self.phases.iter().position(|p| *p == state.phase_key)?;
        if state.turn >= mdp.max_turns {
            return None;
        }
        vi.policy[mdp.state_index(phase, state.turn)]
    }
}

impl Policy for OraclePolicy {
    fn act(&self, state: &DialogueState, _encoding: &[f64], allowed: &ActionMask) -> Result<usize> {
        match self.action_for(state) {
            Some(a) if allowed.contains(a) => Ok(a),
            _ => allowed
                .indices()
                .next()
                .ok_or_else(|| Error::Precondition("empty allowed set".into())),
        }
    }
}

/// How often a policy picks an optimal action on reachable states.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OracleAgreement {
    pub states: usize,
    pub matched: usize,
    /// `(segment, phase@turn, chosen action id, optimal action ids)`.
    pub mismatches: Vec<(String, String, String, Vec<String>)>,
}

impl OracleAgreement {
    pub fn fraction(&self) -> f64 {
        if self.states == 0 {
            1.0
        } else {
            self.matched as f64 / self.states as f64
        }
    }
}

/// Compare `policy` against value iteration on every reachable
/// `(phase, turn)` state of every segment. An action counts as optimal when
/// its Q-value is within `tol` of the state value.
pub fn oracle_agreement(world: &World, policy: &dyn Policy, gamma: f64, tol: f64) -> Result<OracleAgreement> {
    let mut report = OracleAgreement::default();
    for segment in world.scenario().segments() {
        let mdp = enumerate_world_mdp(world, segment, DEFAULT_ORACLE_CAP)?;
        let vi = value_iteration(&mdp, gamma, 1e-12)?;
        let states = canonical_states(world, &mdp)?;
        for s in mdp.reachable() {
            let state = states
                .get(&s)
                .ok_or_else(|| Error::Data(format!("no canonical dialogue for state {s}")))?;
            let enc = world.encode(state)?.values;
            let allowed = world.allowed(state)?;
            let a = policy.act(state, &enc, &allowed)?;
            report.states += 1;
            if allowed.contains(a) && vi.is_optimal(s, a, tol) {
                report.matched += 1;
            } else {
                let catalog = world.catalog();
                let name = |i: usize| catalog.get(i).map_or_else(|| i.to_string(), |u| u.id.clone());
                let optimal = mdp.allowed[s].indices().filter(|&b| vi.is_optimal(s, b, tol)).map(name).collect();
                report
                    .mismatches
                    .push((segment.to_owned(), state.phase_turn_key(), name(a), optimal));
            }
        }
    }
    Ok(report)
}
