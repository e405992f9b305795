//! Proximal policy optimisation over the masked utterance catalog.
//!
//! The policy network outputs one logit per catalog action; blocked actions
//! are removed before the softmax. A separate network estimates state
//! values for generalised advantage estimation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compliance::ActionOrigin;
use crate::dialogue::ActionMask;
use crate::error::{Error, Result};
use crate::nn::{masked_log_softmax, Gradients, Mlp, Optimizer, OptimizerKind};
use crate::policy::{config_digest, derive_seed, Algo, PolicyArtifact, POLICY_NET, VALUE_NET};
use crate::scenario::{EnvCounters, ScenarioEnv, TraceEvent};
use crate::world::{EnvOptions, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub rollout_episodes: usize,
    pub num_iterations: usize,
    pub learning_rate: f64,
    /// Normalise advantages to zero mean and unit variance per batch.
    pub normalize_advantages: bool,
    /// Subtract the entropy term instead of adding it.
    pub penalize_entropy: bool,
    pub hidden_layers: Vec<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs_per_batch: 4,
            minibatch_size: 64,
            rollout_episodes: 32,
            num_iterations: 200,
            learning_rate: 1e-3,
            normalize_advantages: true,
            penalize_entropy: false,
            hidden_layers: vec![64],
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("ppo.{field}"), format!("must be in [0, 1], got {v}")));
            }
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return Err(Error::config("ppo.clip_epsilon", "must be positive"));
        }
        for (field, v) in [("entropy_coef", self.entropy_coef), ("value_coef", self.value_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("ppo.{field}"), "must be non-negative"));
            }
        }
        if self.epochs_per_batch == 0 {
            return Err(Error::config("ppo.epochs_per_batch", "must be at least 1"));
        }
        if self.minibatch_size == 0 {
            return Err(Error::config("ppo.minibatch_size", "must be at least 1"));
        }
        if self.rollout_episodes == 0 {
            return Err(Error::config("ppo.rollout_episodes", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("ppo.learning_rate", "must be positive"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("ppo.hidden_layers", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// One recorded step of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub state_enc: Vec<f64>,
    pub action_index: usize,
    pub reward: f64,
    pub old_log_prob: f64,
    pub value_estimate: f64,
    pub done: bool,
    pub allowed: ActionMask,
}

/// Steps of whole episodes, stored contiguously.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub steps: Vec<RolloutStep>,
    /// Undiscounted return of each episode, in order.
    pub episode_returns: Vec<f64>,
    /// Compliance substitutions made by the gate during collection.
    pub compliance_violations: u64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value_estimate).collect()
    }

    pub fn dones(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.done).collect()
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Sample an action from the masked softmax of `policy` and return it with
/// its log-probability.
pub fn sample_action<R: Rng + ?Sized>(
    policy: &Mlp,
    state_enc: &[f64],
    allowed: &ActionMask,
    rng: &mut R,
) -> Result<(usize, f64)> {
    let log_probs = masked_log_softmax(&policy.predict(state_enc)?, allowed.as_slice());
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    let a = sample_categorical(&probs, rng);
    Ok((a, log_probs[a]))
}

/// Play `episodes` full episodes with the current policy. Episode `k` uses
/// segment `(first_episode + k) mod n_segments`.
pub fn collect_rollout<R: Rng + ?Sized>(
    policy: &Mlp,
    value_net: &Mlp,
    world: &World,
    env: &mut ScenarioEnv,
    episodes: usize,
    first_episode: usize,
    rng: &mut R,
) -> Result<RolloutBatch> {
    if episodes == 0 {
        return Err(Error::Precondition("collect_rollout needs at least one episode".into()));
    }
    let segments: Vec<&str> = world.scenario().segments().collect();
    let mut batch = RolloutBatch::default();
    for k in 0..episodes {
        let mut state = env.reset(segments[(first_episode + k) % segments.len()])?;
        let mut ret = 0.0;
        loop {
            let enc = world.encode(&state)?.values;
            let allowed = world.allowed(&state)?;
            let (chosen, mut log_prob) = sample_action(policy, &enc, &allowed, rng)?;
            let executed = world.gate().enforce(chosen, &state, ActionOrigin::Agent)?.executed;
            if executed != chosen {
                batch.compliance_violations += 1;
                log_prob = masked_log_softmax(&policy.predict(&enc)?, allowed.as_slice())[executed];
            }
            let value = value_net.predict(&enc)?[0];
            let out = env.step(&state, executed)?;
            ret += out.reward;
            batch.steps.push(RolloutStep {
                state_enc: enc,
                action_index: executed,
                reward: out.reward,
                old_log_prob: log_prob,
                value_estimate: value,
                done: out.done,
                allowed,
            });
            if out.done {
                break;
            }
            state = out.next_state;
        }
        batch.episode_returns.push(ret);
    }
    Ok(batch)
}

/// Generalised advantage estimation. Values past an episode end count as
/// zero, and advantages never cross `done` boundaries.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    gae_lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: if values.len() != n { values.len() } else { dones.len() },
        });
    }
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value * cont - values[t];
        running = delta + gamma * gae_lambda * cont * running;
        advantages[t] = running;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Mean-zero, unit-variance copy of `xs`; the divisor is at least 1e-8.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// Averages of the objective terms over a set of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoTerms {
    pub l_clip: f64,
    pub entropy: f64,
    pub value_loss: f64,
}

impl PpoTerms {
    /// `L_clip + beta * H - value_coef * L_value`, the quantity maximised.
    pub fn objective(&self, cfg: &PpoConfig) -> f64 {
        self.l_clip + entropy_weight(cfg) * self.entropy - cfg.value_coef * self.value_loss
    }
}

fn entropy_weight(cfg: &PpoConfig) -> f64 {
    if cfg.penalize_entropy {
        -cfg.entropy_coef
    } else {
        cfg.entropy_coef
    }
}

/// Objective terms on `indices` of `batch` plus gradients of the loss
/// (the negated objective) for both networks.
pub fn ppo_objective(
    policy: &Mlp,
    value_net: &Mlp,
    batch: &RolloutBatch,
    advantages: &[f64],
    returns: &[f64],
    indices: &[usize],
    cfg: &PpoConfig,
) -> Result<(PpoTerms, Gradients, Gradients)> {
    if indices.is_empty() {
        return Err(Error::EmptyInput("ppo objective needs at least one sample"));
    }
    let n = indices.len() as f64;
    let beta = entropy_weight(cfg);
    let mut terms = PpoTerms::default();
    let mut policy_grads = Gradients::zeros_like(policy);
    let mut value_grads = Gradients::zeros_like(value_net);
    for &i in indices {
        let step = &batch.steps[i];
        let mask = step.allowed.as_slice();
        let (logits, cache) = policy.forward(&step.state_enc)?;
        let log_probs = masked_log_softmax(&logits, mask);
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let a = step.action_index;
        let adv = advantages[i];
        let ratio = (log_probs[a] - step.old_log_prob).exp();
        terms.l_clip += clipped_objective(ratio, adv, cfg.clip_epsilon) / n;
        let entropy: f64 = -(0..probs.len()).filter(|&j| mask[j]).map(|j| probs[j] * log_probs[j]).sum::<f64>();
        terms.entropy += entropy / n;

        // The clipped branch is constant in the parameters.
        let clip_active = (adv > 0.0 && ratio > 1.0 + cfg.clip_epsilon) || (adv < 0.0 && ratio < 1.0 - cfg.clip_epsilon);
        let d_logp = if clip_active { 0.0 } else { ratio * adv };
        let mut grad = vec![0.0; logits.len()];
        for j in (0..logits.len()).filter(|&j| mask[j]) {
            let d_clip = d_logp * (f64::from(u8::from(j == a)) - probs[j]);
            let d_entropy = -probs[j] * (log_probs[j] + entropy);
            grad[j] = -(d_clip + beta * d_entropy) / n;
        }
        policy.backward_into(&cache, &grad, &mut policy_grads)?;

        let (v, vcache) = value_net.forward(&step.state_enc)?;
        let err = v[0] - returns[i];
        terms.value_loss += err * err / n;
        value_net.backward_into(&vcache, &[cfg.value_coef * 2.0 * err / n], &mut value_grads)?;
    }
    if !(terms.l_clip.is_finite() && terms.entropy.is_finite() && terms.value_loss.is_finite()) {
        return Err(Error::Divergence(format!("non-finite PPO objective {terms:?}")));
    }
    Ok((terms, policy_grads, value_grads))
}

/// Optimiser state for the two networks.
#[derive(Debug, Clone)]
pub struct PpoOptimizers {
    pub policy: Optimizer,
    pub value: Optimizer,
}

impl PpoOptimizers {
    pub fn new(cfg: &PpoConfig) -> Self {
        Self {
            policy: Optimizer::new(cfg.optimizer, cfg.learning_rate),
            value: Optimizer::new(cfg.optimizer, cfg.learning_rate),
        }
    }
}

/// Loss components reported after an update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLosses {
    /// Means over every minibatch of every epoch.
    pub l_clip: f64,
    pub entropy: f64,
    pub value_loss: f64,
    /// `mean(old_log_prob - new_log_prob)` over the batch after the update.
    pub kl_estimate: f64,
}

/// `epochs_per_batch` passes of shuffled minibatch ascent on the clipped
/// objective with entropy and value terms.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Mlp,
    value_net: &mut Mlp,
    batch: &RolloutBatch,
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    opts: &mut PpoOptimizers,
    rng: &mut R,
) -> Result<PpoLosses> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("ppo_update needs a non-empty batch"));
    }
    if advantages.len() != batch.len() || returns.len() != batch.len() {
        return Err(Error::Dimension {
            expected: batch.len(),
            actual: advantages.len().min(returns.len()),
        });
    }
    let advantages = if cfg.normalize_advantages {
        normalize(advantages)
    } else {
        advantages.to_vec()
    };
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut sums = PpoTerms::default();
    let mut count = 0usize;
    for _ in 0..cfg.epochs_per_batch {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let (terms, pg, vg) = ppo_objective(policy, value_net, batch, &advantages, returns, chunk, cfg)?;
            opts.policy.step(policy, &pg)?;
            opts.value.step(value_net, &vg)?;
            sums.l_clip += terms.l_clip;
            sums.entropy += terms.entropy;
            sums.value_loss += terms.value_loss;
            count += 1;
        }
    }
    let mut kl = 0.0;
    for step in &batch.steps {
        let lp = masked_log_softmax(&policy.predict(&step.state_enc)?, step.allowed.as_slice());
        kl += step.old_log_prob - lp[step.action_index];
    }
    let c = count as f64;
    Ok(PpoLosses {
        l_clip: sums.l_clip / c,
        entropy: sums.entropy / c,
        value_loss: sums.value_loss / c,
        kl_estimate: kl / batch.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoIterationMetrics {
    pub iteration: usize,
    pub mean_return: f64,
    pub l_clip: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub kl_estimate: f64,
}

#[derive(Debug, Clone)]
pub struct PpoRun {
    pub artifact: PolicyArtifact,
    pub metrics: Vec<PpoIterationMetrics>,
    pub env_counters: EnvCounters,
    pub compliance_violations: u64,
    pub trace: Option<Vec<TraceEvent>>,
}

/// Policy (`dim -> |catalog|`) and value (`dim -> 1`) networks.
pub fn ppo_networks(world: &World, hidden: &[usize], seed: u64) -> Result<(Mlp, Mlp)> {
    let dim = world.encoder().dimension;
    let dims = |out: usize| -> Vec<usize> {
        std::iter::once(dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(out))
            .collect()
    };
    let policy = Mlp::new(&dims(world.num_actions()), &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "ppo/policy")))?;
    let value = Mlp::new(&dims(1), &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "ppo/value")))?;
    Ok((policy, value))
}

/// Train from scratch on `world`.
pub fn run_ppo(world: &World, cfg: &PpoConfig, env_opts: &EnvOptions, seed: u64) -> Result<PpoRun> {
    let (policy, value) = ppo_networks(world, &cfg.hidden_layers, seed)?;
    run_ppo_from(world, cfg, env_opts, seed, policy, value)
}

/// Train starting from the given networks.
pub fn run_ppo_from(
    world: &World,
    cfg: &PpoConfig,
    env_opts: &EnvOptions,
    seed: u64,
    mut policy: Mlp,
    mut value_net: Mlp,
) -> Result<PpoRun> {
    cfg.validate()?;
    let mut env = world.make_env(env_opts, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ppo/agent"));
    let mut opts = PpoOptimizers::new(cfg);
    let mut metrics = Vec::with_capacity(cfg.num_iterations);
    let mut violations = 0;
    for iteration in 0..cfg.num_iterations {
        let batch = collect_rollout(
            &policy,
            &value_net,
            world,
            &mut env,
            cfg.rollout_episodes,
            iteration * cfg.rollout_episodes,
            &mut rng,
        )?;
        violations += batch.compliance_violations;
        let (adv, ret) = compute_gae(&batch.rewards(), &batch.values(), &batch.dones(), cfg.gamma, cfg.gae_lambda)?;
        let losses = ppo_update(&mut policy, &mut value_net, &batch, &adv, &ret, cfg, &mut opts, &mut rng)?;
        metrics.push(PpoIterationMetrics {
            iteration,
            mean_return: batch.episode_returns.iter().sum::<f64>() / batch.episode_returns.len() as f64,
            l_clip: losses.l_clip,
            entropy: losses.entropy,
            value_loss: losses.value_loss,
            kl_estimate: losses.kl_estimate,
        });
    }
    let artifact = PolicyArtifact::new(
        Algo::Ppo,
        world,
        BTreeMap::from([(POLICY_NET.to_owned(), policy), (VALUE_NET.to_owned(), value_net)]),
        config_digest(cfg)?,
        seed,
    );
    Ok(PpoRun {
        artifact,
        metrics,
        env_counters: env.counters(),
        compliance_violations: violations,
        trace: env.take_trace(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::toyshop;

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_objective(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_objective(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn gae_monte_carlo_case() {
        let (adv, ret) = compute_gae(&[1.0, 2.0, 3.0], &[0.0; 3], &[false, false, true], 1.0, 1.0).unwrap();
        assert_eq!(adv, [6.0, 5.0, 3.0]);
        assert_eq!(ret, adv);
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[true], 1.0, 1.0).is_err());
    }

    #[test]
    fn gae_respects_episode_boundaries() {
        let r = [1.0, 1.0, 5.0, 7.0];
        let (a, _) = compute_gae(&r, &[0.0; 4], &[false, true, false, true], 1.0, 1.0).unwrap();
        let (b, _) = compute_gae(&[1.0, 1.0, -50.0, 0.0], &[0.0; 4], &[false, true, false, true], 1.0, 1.0).unwrap();
        assert_eq!(a[..2], b[..2]);
    }

    #[test]
    fn normalize_guard() {
        assert_eq!(normalize(&[3.0, 3.0]), [0.0, 0.0]);
        let z = normalize(&[1.0, 2.0, 3.0]);
        assert!(z.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_returns_initial_networks() {
        let world = toyshop();
        let cfg = PpoConfig {
            num_iterations: 0,
            ..PpoConfig::default()
        };
        let run = run_ppo(&world, &cfg, &EnvOptions::default(), 5).unwrap();
        let (p, v) = ppo_networks(&world, &cfg.hidden_layers, 5).unwrap();
        assert_eq!(run.artifact.networks[POLICY_NET], p);
        assert_eq!(run.artifact.networks[VALUE_NET], v);
        assert!(run.metrics.is_empty());
    }

    #[test]
    fn rollout_records_masked_log_probs() {
        let world = toyshop();
        let (policy, value) = ppo_networks(&world, &[8], 1).unwrap();
        let mut env = world.make_env(&EnvOptions::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = collect_rollout(&policy, &value, &world, &mut env, 5, 0, &mut rng).unwrap();
        assert!(batch.len() <= 5 * world.scenario().max_turns() as usize);
        assert_eq!(batch.dones().iter().filter(|d| **d).count(), 5);
        for s in &batch.steps {
            let lp = masked_log_softmax(&policy.predict(&s.state_enc).unwrap(), s.allowed.as_slice());
            assert_eq!(lp[s.action_index], s.old_log_prob);
            assert!(s.allowed.contains(s.action_index));
        }
    }
}
