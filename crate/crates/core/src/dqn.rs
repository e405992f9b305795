//! Epsilon-greedy Q-learning with a replay buffer, a periodically synced
//! target network and compliance-masked action selection.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compliance::ActionOrigin;
use crate::dialogue::ActionMask;
use crate::error::{Error, Result};
use crate::experience::{LoggedEpisode, ReplayBuffer, Transition};
use crate::nn::{masked_argmax, Gradients, Mlp, Optimizer, OptimizerKind};
use crate::policy::{config_digest, derive_seed, Algo, PolicyArtifact, Q_NET};
use crate::scenario::{EnvCounters, TraceEvent};
use crate::world::{EnvOptions, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Multiplicative decay applied once per episode.
    pub epsilon_decay: f64,
    /// Target network sync period, in environment steps.
    pub target_update_period: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub num_episodes: usize,
    /// Gradient steps taken when training from logged transitions.
    pub offline_steps: usize,
    /// When set, must equal the scenario's turn budget.
    pub max_turns: Option<u32>,
    pub hidden_layers: Vec<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay: 0.999,
            target_update_period: 250,
            batch_size: 32,
            buffer_capacity: 20_000,
            learning_rate: 1e-3,
            num_episodes: 6_000,
            offline_steps: 20_000,
            max_turns: None,
            hidden_layers: vec![64],
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("dqn.{field}"), format!("must be in [0, 1], got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("epsilon_start", self.epsilon_start)?;
        unit("epsilon_end", self.epsilon_end)?;
        if self.epsilon_end > self.epsilon_start {
            return Err(Error::config("dqn.epsilon_end", "must not exceed epsilon_start"));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(Error::config("dqn.epsilon_decay", "must be in (0, 1]"));
        }
        if self.target_update_period == 0 {
            return Err(Error::config("dqn.target_update_period", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("dqn.batch_size", "must be at least 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("dqn.buffer_capacity", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("dqn.learning_rate", "must be a positive number"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("dqn.hidden_layers", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Epsilon-greedy choice restricted to `allowed`; greedy ties go to the
/// lowest index. Always consumes exactly one uniform draw, plus one more
/// when exploring.
pub fn select_action<R: Rng + ?Sized>(
    q_net: &Mlp,
    state_enc: &[f64],
    epsilon: f64,
    allowed: &ActionMask,
    rng: &mut R,
) -> Result<usize> {
    assert!(allowed.count() > 0, "allowed action set must not be empty");
    if rng.random::<f64>() < epsilon {
        let k = rng.random_range(0..allowed.count());
        return Ok(allowed.indices().nth(k).expect("k < count"));
    }
    let q = q_net.predict(state_enc)?;
    Ok(masked_argmax(&q, allowed.as_slice()).expect("allowed is non-empty"))
}

/// `y = r` for terminal transitions, otherwise `r + gamma * max Q_target(s', a')`
/// over the actions allowed in `s'`.
pub fn td_targets(batch: &[&Transition], target_net: &Mlp, gamma: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("td_targets needs a non-empty batch"));
    }
    batch
        .iter()
        .map(|t| {
            if t.done {
                return Ok(t.reward);
            }
            let q = target_net.predict(&t.next_state_enc)?;
            let best = t
                .allowed_mask_next
                .indices()
                .map(|a| q[a])
                .fold(f64::NEG_INFINITY, f64::max);
            if best == f64::NEG_INFINITY {
                return Err(Error::Data("non-terminal transition with an empty next mask".into()));
            }
            Ok(t.reward + gamma * best)
        })
        .collect()
}

/// Mean squared TD error over `batch` and its gradient.
pub fn td_loss(q_net: &Mlp, batch: &[&Transition], targets: &[f64]) -> Result<(f64, Gradients)> {
    let n = batch.len() as f64;
    let mut grads = Gradients::zeros_like(q_net);
    let mut loss = 0.0;
    let mut out_grad = vec![0.0; q_net.output_dim()];
    for (t, &y) in batch.iter().zip(targets) {
        let (q, cache) = q_net.forward(&t.state_enc)?;
        let err = q[t.action_index] - y;
        loss += err * err / n;
        out_grad.iter_mut().for_each(|g| *g = 0.0);
        out_grad[t.action_index] = 2.0 * err / n;
        q_net.backward_into(&cache, &out_grad, &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite TD loss {loss}")));
    }
    Ok((loss, grads))
}

/// One minibatch regression step; returns the pre-update loss.
pub fn train_step<R: Rng + ?Sized>(
    q_net: &mut Mlp,
    target_net: &Mlp,
    buffer: &ReplayBuffer,
    cfg: &DqnConfig,
    opt: &mut Optimizer,
    rng: &mut R,
) -> Result<f64> {
    let batch = buffer.sample_uniform(cfg.batch_size, rng)?;
    let targets = td_targets(&batch, target_net, cfg.gamma)?;
    let (loss, grads) = td_loss(q_net, &batch, &targets)?;
    opt.step(q_net, &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnEpisodeMetrics {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub epsilon: f64,
    /// Mean training loss over the episode's gradient steps, if any.
    pub loss_mean: Option<f64>,
    /// Cumulative environment steps at the end of the episode.
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct DqnRun {
    pub artifact: PolicyArtifact,
    pub metrics: Vec<DqnEpisodeMetrics>,
    pub env_counters: EnvCounters,
    pub compliance_violations: u64,
    pub trace: Option<Vec<TraceEvent>>,
}

pub fn q_network(world: &World, hidden: &[usize], seed: u64) -> Result<Mlp> {
    let dims: Vec<usize> = std::iter::once(world.encoder().dimension)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(world.num_actions()))
        .collect();
    Mlp::new(&dims, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "dqn/init")))
}

/// Train a Q-network on `world`. Segments are visited round-robin by
/// episode index.
pub fn run_dqn(world: &World, cfg: &DqnConfig, env_opts: &EnvOptions, seed: u64) -> Result<DqnRun> {
    cfg.validate()?;
    if let Some(m) = cfg.max_turns {
        if m != world.scenario().max_turns() {
            return Err(Error::config(
                "dqn.max_turns",
                format!("{m} does not match the scenario budget {}", world.scenario().max_turns()),
            ));
        }
    }
    let mut env = world.make_env(env_opts, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dqn/agent"));
    let mut q_net = q_network(world, &cfg.hidden_layers, seed)?;
    let mut target_net = q_net.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let segments: Vec<String> = world.scenario().segments().map(str::to_owned).collect();
    let mut epsilon = cfg.epsilon_start;
    let mut steps = 0u64;
    let mut violations = 0u64;
    let mut metrics = Vec::with_capacity(cfg.num_episodes);

    for episode in 0..cfg.num_episodes {
        let mut state = env.reset(&segments[episode % segments.len()])?;
        let mut enc = world.encode(&state)?.values;
        let mut allowed = world.allowed(&state)?;
        let (mut ret, mut loss_sum, mut loss_n) = (0.0, 0.0, 0usize);
        loop {
            let chosen = select_action(&q_net, &enc, epsilon, &allowed, &mut rng)?;
            let executed = world.gate().enforce(chosen, &state, ActionOrigin::Agent)?.executed;
            violations += u64::from(executed != chosen);
            let out = env.step(&state, executed)?;
            let next_enc = world.encode(&out.next_state)?.values;
            let next_allowed = if out.done {
                ActionMask::none(world.num_actions())
            } else {
                world.allowed(&out.next_state)?
            };
            buffer.push(Transition {
                state_enc: std::mem::take(&mut enc),
                action_index: executed,
                reward: out.reward,
                next_state_enc: next_enc.clone(),
                done: out.done,
                allowed_mask_next: next_allowed.clone(),
            });
            steps += 1;
            ret += out.reward;
            if buffer.len() >= cfg.batch_size {
                loss_sum += train_step(&mut q_net, &target_net, &buffer, cfg, &mut opt, &mut rng)?;
                loss_n += 1;
            }
            if steps.is_multiple_of(cfg.target_update_period) {
                target_net.clone_from(&q_net);
            }
            if out.done {
                break;
            }
            state = out.next_state;
            enc = next_enc;
            allowed = next_allowed;
        }
        metrics.push(DqnEpisodeMetrics {
            episode,
            episode_return: ret,
            epsilon,
            loss_mean: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            steps,
        });
        epsilon = (epsilon * cfg.epsilon_decay).max(cfg.epsilon_end);
    }

    let artifact = PolicyArtifact::new(
        Algo::Dqn,
        world,
        BTreeMap::from([(Q_NET.to_owned(), q_net)]),
        config_digest(cfg)?,
        seed,
    );
    Ok(DqnRun {
        artifact,
        metrics,
        env_counters: env.counters(),
        compliance_violations: violations,
        trace: env.take_trace(),
    })
}

/// Replay-ready transitions rebuilt from logged conversations.
pub fn log_transitions(world: &World, episodes: &[LoggedEpisode]) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for ep in episodes {
        for step in world.replay_log(ep)? {
            let allowed_mask_next = if step.done {
                ActionMask::none(world.num_actions())
            } else {
                world.allowed(&step.next_state)?
            };
            out.push(Transition {
                state_enc: world.encode(&step.state)?.values,
                action_index: step.action,
                reward: step.reward,
                next_state_enc: world.encode(&step.next_state)?.values,
                done: step.done,
                allowed_mask_next,
            });
        }
    }
    Ok(out)
}

/// Fit a Q-network to a fixed set of logged transitions without touching
/// the environment. One metrics row is emitted per target-sync period, with
/// `episode` counting periods and `steps` counting gradient steps.
pub fn run_dqn_offline(world: &World, cfg: &DqnConfig, transitions: Vec<Transition>, seed: u64) -> Result<DqnRun> {
    cfg.validate()?;
    if transitions.is_empty() {
        return Err(Error::NoTrainingData("no logged transitions".into()));
    }
    let mut buffer = ReplayBuffer::new(transitions.len())?;
    for t in transitions {
        buffer.push(t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dqn/agent"));
    let mut q_net = q_network(world, &cfg.hidden_layers, seed)?;
    let mut target_net = q_net.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mean_reward = buffer.iter().map(|t| t.reward).sum::<f64>() / buffer.len() as f64;
    let mut metrics = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 1..=cfg.offline_steps as u64 {
        loss_sum += train_step(&mut q_net, &target_net, &buffer, cfg, &mut opt, &mut rng)?;
        loss_n += 1;
        if step % cfg.target_update_period == 0 || step == cfg.offline_steps as u64 {
            target_net.clone_from(&q_net);
            metrics.push(DqnEpisodeMetrics {
                episode: metrics.len(),
                episode_return: mean_reward,
                epsilon: 0.0,
                loss_mean: Some(loss_sum / loss_n as f64),
                steps: step,
            });
            (loss_sum, loss_n) = (0.0, 0);
        }
    }
    let artifact = PolicyArtifact::new(
        Algo::Dqn,
        world,
        BTreeMap::from([(Q_NET.to_owned(), q_net)]),
        config_digest(cfg)?,
        seed,
    );
    Ok(DqnRun {
        artifact,
        metrics,
        env_counters: EnvCounters::default(),
        compliance_violations: 0,
        trace: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::toyshop;

    fn tr(reward: f64, done: bool, mask: ActionMask) -> Transition {
        Transition {
            state_enc: vec![0.0, 0.0],
            action_index: 0,
            reward,
            next_state_enc: vec![0.0, 0.0],
            done,
            allowed_mask_next: mask,
        }
    }

    fn const_net(q: &[f64]) -> Mlp {
        let mut net = Mlp::zeros(&[2, q.len()]).unwrap();
        net.layers_mut()[0].biases = q.to_vec();
        net
    }

    #[test]
    fn greedy_and_masked_selection() {
        let net = const_net(&[0.1, 0.9, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&net, &[0.0, 0.0], 0.0, &ActionMask::all(3), &mut rng).unwrap(), 1);
        let mask = ActionMask::from_indices(3, [0, 2]);
        assert_eq!(select_action(&net, &[0.0, 0.0], 0.0, &mask, &mut rng).unwrap(), 2);
    }

    #[test]
    fn td_target_cases() {
        let net = const_net(&[1.0, 5.0]);
        let all = ActionMask::all(2);
        let a = tr(1.0, true, all.clone());
        assert_eq!(td_targets(&[&a], &net, 0.9).unwrap(), [1.0]);
        let b = tr(0.3, false, all.clone());
        assert_eq!(td_targets(&[&b], &net, 0.0).unwrap(), [0.3]);
        let c = tr(0.0, false, ActionMask::from_indices(2, [0]));
        assert!((td_targets(&[&c], &net, 0.9).unwrap()[0] - 0.9).abs() < 1e-15);
        assert!(td_targets(&[], &net, 0.9).is_err());
    }

    #[test]
    fn zero_error_batch_leaves_parameters() {
        let net = const_net(&[0.5, 0.0]);
        let t = tr(0.5, true, ActionMask::all(2));
        let mut buffer = ReplayBuffer::new(4).unwrap();
        buffer.push(t);
        let mut q = net.clone();
        let cfg = DqnConfig {
            batch_size: 2,
            ..DqnConfig::default()
        };
        let mut opt = Optimizer::sgd(0.1);
        let loss = train_step(&mut q, &net, &buffer, &cfg, &mut opt, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(q, net);
    }

    #[test]
    fn zero_episodes_gives_initial_network() {
        let world = toyshop();
        let cfg = DqnConfig {
            num_episodes: 0,
            ..DqnConfig::default()
        };
        let run = run_dqn(&world, &cfg, &EnvOptions::default(), 3).unwrap();
        assert!(run.metrics.is_empty());
        assert_eq!(run.env_counters.steps, 0);
        assert_eq!(run.artifact.networks[Q_NET], q_network(&world, &cfg.hidden_layers, 3).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            DqnConfig {
                gamma: 1.5,
                ..DqnConfig::default()
            },
            DqnConfig {
                epsilon_end: 0.9,
                epsilon_start: 0.1,
                ..DqnConfig::default()
            },
            DqnConfig {
                target_update_period: 0,
                ..DqnConfig::default()
            },
            DqnConfig {
                epsilon_decay: 0.0,
                ..DqnConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        }
    }
}
