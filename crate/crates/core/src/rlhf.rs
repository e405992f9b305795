//! Learning from human feedback in three stages: behaviour cloning of
//! annotated conversations, a pairwise reward model, and policy fine-tuning
//! against that reward model.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compliance::ActionOrigin;
use crate::dialogue::{fnv1a, ActionMask, DialogueState};
use crate::error::{Error, Result};
use crate::experience::LoggedEpisode;
use crate::mdp::OraclePolicy;
use crate::nn::{masked_argmax, masked_log_softmax, masked_softmax, Gradients, Mlp, Optimizer, OptimizerKind};
use crate::policy::{config_digest, derive_seed, Algo, PolicyArtifact, POLICY_NET, REWARD_NET, VALUE_NET};
use crate::ppo::{compute_gae, ppo_update, sample_action, PpoConfig, PpoOptimizers, RolloutBatch, RolloutStep};
use crate::scenario::{EnvCounters, FeedbackMode};
use crate::world::{EnvOptions, World};

// ---------------------------------------------------------------------------
// JSON-lines helpers

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Annotated conversations and behaviour cloning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationSource {
    Human,
    SyntheticExpert,
}

/// A state and the action an annotator chose there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedStep {
    pub state_digest: u64,
    pub state_enc: Vec<f64>,
    pub allowed: ActionMask,
    pub action_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedDialogue {
    pub source: AnnotationSource,
    pub steps: Vec<AnnotatedStep>,
}

impl AnnotatedDialogue {
    /// Treat a logged conversation as a human demonstration.
    pub fn from_log(world: &World, episode: &LoggedEpisode) -> Result<Self> {
        let steps = world
            .replay_log(episode)?
            .into_iter()
            .map(|s| annotate(world, &s.state, s.action))
            .collect::<Result<_>>()?;
        Ok(Self {
            source: AnnotationSource::Human,
            steps,
        })
    }

    fn validate(&self, num_actions: usize, dim: usize) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.allowed.len() != num_actions || s.action_index >= num_actions {
                return Err(Error::Data(format!("step {i}: action index or mask does not fit the catalog")));
            }
            if !s.allowed.contains(s.action_index) {
                return Err(Error::Data(format!("step {i}: chosen action is not in the allowed set")));
            }
            if s.state_enc.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: s.state_enc.len(),
                });
            }
        }
        Ok(())
    }
}

fn annotate(world: &World, state: &DialogueState, action: usize) -> Result<AnnotatedStep> {
    Ok(AnnotatedStep {
        state_digest: state.digest(),
        state_enc: world.encode(state)?.values,
        allowed: world.allowed(state)?,
        action_index: action,
    })
}

pub fn read_annotated(path: impl AsRef<Path>) -> Result<Vec<AnnotatedDialogue>> {
    read_jsonl(path.as_ref())
}

pub fn write_annotated(path: impl AsRef<Path>, dialogues: &[AnnotatedDialogue]) -> Result<()> {
    write_jsonl(path.as_ref(), dialogues)
}

/// Conversations labelled by the value-iteration oracle. With probability
/// `explore` the executed action is a uniformly random allowed one, which
/// widens state coverage; the label is always the oracle's choice.
pub fn expert_dialogues(
    world: &World,
    oracle: &OraclePolicy,
    episodes: usize,
    explore: f64,
    seed: u64,
) -> Result<Vec<AnnotatedDialogue>> {
    if !(0.0..=1.0).contains(&explore) {
        return Err(Error::Precondition(format!("explore {explore} outside [0, 1]")));
    }
    let mut env = world.env(FeedbackMode::Sampled, derive_seed(seed, "expert/env"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "expert/agent"));
    let segments: Vec<String> = world.scenario().segments().map(str::to_owned).collect();
    let mut out = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut state = env.reset(&segments[k % segments.len()])?;
        let mut steps = Vec::new();
        loop {
            let allowed = world.allowed(&state)?;
            let label = crate::policy::Policy::act(oracle, &state, &[], &allowed)?;
            steps.push(annotate(world, &state, label)?);
            let executed = if rng.random::<f64>() < explore {
                let choices: Vec<usize> = allowed.indices().collect();
                choices[rng.random_range(0..choices.len())]
            } else {
                label
            };
            let (next, done) = env.advance(&state, executed)?;
            if done {
                break;
            }
            state = next;
        }
        out.push(AnnotatedDialogue {
            source: AnnotationSource::SyntheticExpert,
            steps,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains full-batch; each rejected step (loss went up) is undone
    /// and the step size halved, so the training loss never increases.
    pub minibatch_size: Option<usize>,
    pub hidden_layers: Vec<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 3e-3,
            minibatch_size: None,
            hidden_layers: vec![64],
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("sft.learning_rate", "must be positive"));
        }
        if self.minibatch_size == Some(0) {
            return Err(Error::config("sft.minibatch_size", "must be at least 1"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("sft.hidden_layers", "layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean training cross-entropy after each epoch.
    pub losses: Vec<f64>,
    pub rejected_steps: usize,
}

/// Mean cross-entropy of the chosen actions under the masked softmax, and
/// its gradient.
pub fn sft_loss(policy: &Mlp, steps: &[&AnnotatedStep]) -> Result<(f64, Gradients)> {
    if steps.is_empty() {
        return Err(Error::EmptyInput("sft_loss needs at least one step"));
    }
    let n = steps.len() as f64;
    let mut grads = Gradients::zeros_like(policy);
    let mut loss = 0.0;
    for s in steps {
        let (logits, cache) = policy.forward(&s.state_enc)?;
        let mask = s.allowed.as_slice();
        let lp = masked_log_softmax(&logits, mask);
        loss -= lp[s.action_index] / n;
        let grad: Vec<f64> = (0..logits.len())
            .map(|j| {
                if mask[j] {
                    (lp[j].exp() - f64::from(u8::from(j == s.action_index))) / n
                } else {
                    0.0
                }
            })
            .collect();
        policy.backward_into(&cache, &grad, &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite cross-entropy {loss}")));
    }
    Ok((loss, grads))
}

/// Behaviour-clone a base policy from annotated conversations.
pub fn sft_train(
    dialogues: &[AnnotatedDialogue],
    world: &World,
    cfg: &SftConfig,
    seed: u64,
) -> Result<(PolicyArtifact, SftReport)> {
    cfg.validate()?;
    let dim = world.encoder().dimension;
    for d in dialogues {
        d.validate(world.num_actions(), dim)?;
    }
    let steps: Vec<&AnnotatedStep> = dialogues.iter().flat_map(|d| &d.steps).collect();
    if steps.is_empty() {
        return Err(Error::NoTrainingData("no annotated steps".into()));
    }
    let dims: Vec<usize> = std::iter::once(dim)
        .chain(cfg.hidden_layers.iter().copied())
        .chain(std::iter::once(world.num_actions()))
        .collect();
    let mut policy = Mlp::new(&dims, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "sft/init")))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut report = SftReport::default();
    match cfg.minibatch_size {
        None => {
            let (mut loss, mut grads) = sft_loss(&policy, &steps)?;
            for _ in 0..cfg.epochs {
                let saved = (policy.clone(), opt.clone());
                opt.step(&mut policy, &grads)?;
                let (new_loss, new_grads) = sft_loss(&policy, &steps)?;
                if new_loss <= loss {
                    loss = new_loss;
                    grads = new_grads;
                } else {
                    (policy, opt) = saved;
                    opt.learning_rate /= 2.0;
                    report.rejected_steps += 1;
                }
                report.losses.push(loss);
            }
        }
        Some(size) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sft/shuffle"));
            let mut order = steps.clone();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(size) {
                    let (_, grads) = sft_loss(&policy, chunk)?;
                    opt.step(&mut policy, &grads)?;
                }
                report.losses.push(sft_loss(&policy, &steps)?.0);
            }
        }
    }
    let artifact = PolicyArtifact::new(
        Algo::Sft,
        world,
        BTreeMap::from([(POLICY_NET.to_owned(), policy)]),
        config_digest(cfg)?,
        seed,
    );
    Ok((artifact, report))
}

// ---------------------------------------------------------------------------
// Preference records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

/// One pairwise judgement: which of two actions is better in a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub state_digest: String,
    pub state_enc: Vec<f64>,
    pub a: usize,
    pub b: usize,
    pub choice: Choice,
    pub annotator: String,
    /// Seconds since the Unix epoch.
    pub ts: u64,
}

impl PreferenceRecord {
    pub fn winner(&self) -> usize {
        match self.choice {
            Choice::A => self.a,
            Choice::B => self.b,
        }
    }

    pub fn loser(&self) -> usize {
        match self.choice {
            Choice::A => self.b,
            Choice::B => self.a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == self.b {
            return Err(Error::Data("preference record compares an action with itself".into()));
        }
        if self.state_enc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("preference record has a non-finite encoding".into()));
        }
        Ok(())
    }

    /// Stable hash of the record's content, used for the train/held-out
    /// split.
    pub fn content_hash(&self) -> Result<u64> {
        Ok(fnv1a(&serde_json::to_vec(self)?))
    }
}

/// Append-only JSON-lines store. Each append is flushed and synced to disk
/// before it returns.
#[derive(Debug)]
pub struct PreferenceStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl PreferenceStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &PreferenceRecord) -> Result<()> {
        record.validate()?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        file.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    /// Every record stored so far.
    pub fn snapshot(&self) -> Result<Vec<PreferenceRecord>> {
        let _guard = self.file.lock().unwrap_or_else(|e| e.into_inner());
        read_preferences(&self.path)
    }
}

pub fn read_preferences(path: impl AsRef<Path>) -> Result<Vec<PreferenceRecord>> {
    let records: Vec<PreferenceRecord> = read_jsonl(path.as_ref())?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

pub fn write_preferences(path: impl AsRef<Path>, records: &[PreferenceRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

// ---------------------------------------------------------------------------
// Reward model

/// Scalar score over `state_enc ++ one_hot(action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    net: Mlp,
    num_actions: usize,
}

impl RewardModel {
    pub fn new(state_dim: usize, num_actions: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(state_dim + num_actions)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let net = Mlp::new(&dims, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "reward/init")))?;
        Ok(Self { net, num_actions })
    }

    /// The all-zero model: every action scores 0.
    pub fn zeros(state_dim: usize, num_actions: usize) -> Result<Self> {
        Ok(Self {
            net: Mlp::zeros(&[state_dim + num_actions, 1])?,
            num_actions,
        })
    }

    pub fn from_network(net: Mlp, num_actions: usize) -> Result<Self> {
        if net.output_dim() != 1 || net.input_dim() <= num_actions {
            return Err(Error::Data("reward network must map state ++ one-hot action to a scalar".into()));
        }
        Ok(Self { net, num_actions })
    }

    pub fn from_artifact(artifact: &PolicyArtifact) -> Result<Self> {
        let net = artifact
            .network(REWARD_NET)
            .ok_or_else(|| Error::Data("artifact has no reward network".into()))?;
        Self::from_network(net.clone(), artifact.catalog_ids.len())
    }

    pub fn to_artifact(&self, world: &World, config_digest: String, seed: u64) -> PolicyArtifact {
        PolicyArtifact::new(
            Algo::RewardModel,
            world,
            BTreeMap::from([(REWARD_NET.to_owned(), self.net.clone())]),
            config_digest,
            seed,
        )
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim() - self.num_actions
    }

    fn input(&self, state_enc: &[f64], action: usize) -> Result<Vec<f64>> {
        if state_enc.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                actual: state_enc.len(),
            });
        }
        if action >= self.num_actions {
            return Err(Error::Lookup {
                what: "action index",
                key: action.to_string(),
            });
        }
        let mut x = state_enc.to_vec();
        x.resize(state_enc.len() + self.num_actions, 0.0);
        x[state_enc.len() + action] = 1.0;
        Ok(x)
    }

    pub fn score(&self, state_enc: &[f64], action: usize) -> Result<f64> {
        Ok(self.net.predict(&self.input(state_enc, action)?)?[0])
    }

    pub fn scores(&self, state_enc: &[f64]) -> Result<Vec<f64>> {
        (0..self.num_actions).map(|a| self.score(state_enc, a)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardModelConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub hidden_layers: Vec<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            minibatch_size: 64,
            hidden_layers: vec![64],
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl RewardModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("reward_model.learning_rate", "must be positive"));
        }
        if self.minibatch_size == 0 {
            return Err(Error::config("reward_model.minibatch_size", "must be at least 1"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("reward_model.hidden_layers", "layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelReport {
    pub train_records: usize,
    pub held_out_records: usize,
    /// Mean pairwise loss on the training split after each epoch.
    pub losses: Vec<f64>,
    /// `None` when the split left no held-out records.
    pub held_out_accuracy: Option<f64>,
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean Bradley-Terry loss `-log sigmoid(R(s, winner) - R(s, loser))` and
/// its gradient.
pub fn pairwise_loss(model: &RewardModel, records: &[&PreferenceRecord]) -> Result<(f64, Gradients)> {
    if records.is_empty() {
        return Err(Error::EmptyInput("pairwise_loss needs at least one record"));
    }
    let n = records.len() as f64;
    let mut grads = Gradients::zeros_like(&model.net);
    let mut loss = 0.0;
    for r in records {
        let (w_out, w_cache) = model.net.forward(&model.input(&r.state_enc, r.winner())?)?;
        let (l_out, l_cache) = model.net.forward(&model.input(&r.state_enc, r.loser())?)?;
        let margin = w_out[0] - l_out[0];
        loss -= log_sigmoid(margin) / n;
        let g = sigmoid(-margin) / n;
        model.net.backward_into(&w_cache, &[-g], &mut grads)?;
        model.net.backward_into(&l_cache, &[g], &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite preference loss {loss}")));
    }
    Ok((loss, grads))
}

/// Deterministic 90/10 split by record content: records whose hash is 0
/// modulo 10 are held out.
pub fn split_records(records: &[PreferenceRecord]) -> Result<(Vec<&PreferenceRecord>, Vec<&PreferenceRecord>)> {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for r in records {
        if r.content_hash()? % 10 == 0 {
            held.push(r);
        } else {
            train.push(r);
        }
    }
    Ok((train, held))
}

pub fn reward_model_train(
    records: &[PreferenceRecord],
    state_dim: usize,
    num_actions: usize,
    cfg: &RewardModelConfig,
    seed: u64,
) -> Result<(RewardModel, RewardModelReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::NoTrainingData("no preference records".into()));
    }
    for r in records {
        r.validate()?;
        if r.a >= num_actions || r.b >= num_actions {
            return Err(Error::Data(format!("record action out of range for {num_actions} actions")));
        }
    }
    let (mut train, held) = split_records(records)?;
    if train.is_empty() {
        return Err(Error::NoTrainingData("every record fell into the held-out split".into()));
    }
    let mut model = RewardModel::new(state_dim, num_actions, &cfg.hidden_layers, seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "reward/shuffle"));
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.minibatch_size) {
            let (_, grads) = pairwise_loss(&model, chunk)?;
            opt.step(&mut model.net, &grads)?;
        }
        losses.push(pairwise_loss(&model, &train)?.0);
    }
    let held_out_accuracy = if held.is_empty() {
        None
    } else {
        Some(accuracy(&model, &held)?)
    };
    let report = RewardModelReport {
        train_records: train.len(),
        held_out_records: held.len(),
        losses,
        held_out_accuracy,
    };
    Ok((model, report))
}

fn accuracy(model: &RewardModel, records: &[&PreferenceRecord]) -> Result<f64> {
    let mut hits = 0.0;
    for r in records {
        let w = model.score(&r.state_enc, r.winner())?;
        let l = model.score(&r.state_enc, r.loser())?;
        hits += if w > l {
            1.0
        } else if w == l {
            0.5
        } else {
            0.0
        };
    }
    Ok(hits / records.len() as f64)
}

/// Fraction of records whose stored choice the model's scores agree with;
/// ties count one half.
pub fn preference_accuracy(model: &RewardModel, records: &[PreferenceRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("preference_accuracy needs at least one record"));
    }
    accuracy(model, &records.iter().collect::<Vec<_>>())
}

// ---------------------------------------------------------------------------
// Synthetic preferences

/// A known linear scoring `u(s, a) = w_a . enc(s)` standing in for human
/// judgement in tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUtility {
    pub weights: Vec<Vec<f64>>,
}

impl PlantedUtility {
    /// Weights drawn uniformly from [-1, 1].
    pub fn random(state_dim: usize, num_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "planted"));
        let weights = (0..num_actions)
            .map(|_| (0..state_dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        Self { weights }
    }

    pub fn negated(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w.iter().map(|x| -x).collect()).collect(),
        }
    }

    pub fn utility(&self, state_enc: &[f64], action: usize) -> f64 {
        self.weights[action].iter().zip(state_enc).map(|(w, x)| w * x).sum()
    }

    /// Highest-utility allowed action, ties to the lowest index.
    pub fn best_action(&self, state_enc: &[f64], allowed: &ActionMask) -> Option<usize> {
        let u: Vec<f64> = (0..self.weights.len()).map(|a| self.utility(state_enc, a)).collect();
        masked_argmax(&u, allowed.as_slice())
    }

    /// Whether `record`'s choice matches the planted ordering.
    pub fn agrees(&self, record: &PreferenceRecord) -> bool {
        self.utility(&record.state_enc, record.winner()) > self.utility(&record.state_enc, record.loser())
    }
}

/// Distinct non-terminal states visited by uniformly random conversations.
pub fn random_states(world: &World, episodes: usize, seed: u64) -> Result<Vec<DialogueState>> {
    let mut env = world.env(FeedbackMode::Sampled, derive_seed(seed, "states/env"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "states/agent"));
    let segments: Vec<String> = world.scenario().segments().map(str::to_owned).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for k in 0..episodes {
        let mut state = env.reset(&segments[k % segments.len()])?;
        loop {
            if seen.insert(state.digest()) {
                out.push(state.clone());
            }
            let choices: Vec<usize> = world.allowed(&state)?.indices().collect();
            let (next, done) = env.advance(&state, choices[rng.random_range(0..choices.len())])?;
            if done {
                break;
            }
            state = next;
        }
    }
    Ok(out)
}

/// `n` preference records on states from random conversations. Each record
/// compares two allowed actions whose planted utilities differ by at least
/// `min_margin`; the better one is chosen with probability `1 - noise`.
pub fn synthesize_preferences(
    world: &World,
    utility: &PlantedUtility,
    n: usize,
    noise: f64,
    min_margin: f64,
    seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    if !(0.0..0.5).contains(&noise) {
        return Err(Error::Precondition(format!("noise {noise} outside [0, 0.5)")));
    }
    let states = random_states(world, 500, seed)?;
    let mut pool = Vec::new();
    for s in &states {
        let enc = world.encode(s)?.values;
        let allowed: Vec<usize> = world.allowed(s)?.indices().collect();
        let mut pairs = Vec::new();
        for (i, &a) in allowed.iter().enumerate() {
            for &b in &allowed[i + 1..] {
                if (utility.utility(&enc, a) - utility.utility(&enc, b)).abs() >= min_margin {
                    pairs.push((a, b));
                }
            }
        }
        if !pairs.is_empty() {
            pool.push((format!("{:016x}", s.digest()), enc, pairs));
        }
    }
    if pool.is_empty() {
        return Err(Error::Precondition(format!("no action pair reaches margin {min_margin}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "preferences"));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (digest, enc, pairs) = &pool[rng.random_range(0..pool.len())];
        let (mut a, mut b) = pairs[rng.random_range(0..pairs.len())];
        if rng.random::<bool>() {
            std::mem::swap(&mut a, &mut b);
        }
        let a_better = utility.utility(enc, a) > utility.utility(enc, b);
        let flip = rng.random::<f64>() < noise;
        let choice = if a_better != flip { Choice::A } else { Choice::B };
        out.push(PreferenceRecord {
            state_digest: digest.clone(),
            state_enc: enc.clone(),
            a,
            b,
            choice,
            annotator: "planted".into(),
            ts: i as u64,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fine-tuning against the reward model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlhfConfig {
    pub ppo: PpoConfig,
    /// Weight of the per-sample `log pi - log pi_base` penalty subtracted
    /// from the reward-model score. Zero disables it.
    pub kl_coef: f64,
}

impl Default for RlhfConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig {
                num_iterations: 100,
                ..PpoConfig::default()
            },
            kl_coef: 0.02,
        }
    }
}

impl RlhfConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(Error::config("rlhf.kl_coef", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlhfIterationMetrics {
    pub iteration: usize,
    pub prompts: usize,
    pub mean_reward_score: f64,
    pub mean_kl_penalty: f64,
    pub l_clip: f64,
    pub entropy: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RlhfRun {
    pub artifact: PolicyArtifact,
    pub metrics: Vec<RlhfIterationMetrics>,
    pub env_counters: EnvCounters,
    pub compliance_violations: u64,
}

/// Fine-tune `base` so its actions score well under `reward`. Prompts are
/// the states of conversations played by the current policy; the
/// environment only advances those conversations and its reward channel is
/// never read. Each prompt is its own one-step episode, so advantages are
/// `r - V(s)`.
pub fn rlhf_finetune(
    base: &PolicyArtifact,
    reward: &RewardModel,
    world: &World,
    cfg: &RlhfConfig,
    env_opts: &EnvOptions,
    seed: u64,
) -> Result<RlhfRun> {
    cfg.validate()?;
    base.check_compatible(world)?;
    let base_policy = base
        .network(POLICY_NET)
        .ok_or_else(|| Error::Data("base artifact has no policy network".into()))?
        .clone();
    if reward.state_dim() != world.encoder().dimension || reward.num_actions() != world.num_actions() {
        return Err(Error::Data("reward model does not match the world's encoder and catalog".into()));
    }
    let ppo = &cfg.ppo;
    let mut policy = base_policy.clone();
    let value_dims: Vec<usize> = std::iter::once(world.encoder().dimension)
        .chain(ppo.hidden_layers.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    let mut value_net = Mlp::new(&value_dims, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "rlhf/value")))?;
    let mut env = world.make_env(env_opts, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rlhf/agent"));
    let mut opts = PpoOptimizers::new(ppo);
    let segments: Vec<String> = world.scenario().segments().map(str::to_owned).collect();
    let mut metrics = Vec::with_capacity(ppo.num_iterations);
    let mut violations = 0;
    for iteration in 0..ppo.num_iterations {
        let mut batch = RolloutBatch::default();
        let mut scores = Vec::new();
        let mut penalties = Vec::new();
        for k in 0..ppo.rollout_episodes {
            let segment = &segments[(iteration * ppo.rollout_episodes + k) % segments.len()];
            let mut state = env.reset(segment)?;
            loop {
                let enc = world.encode(&state)?.values;
                let allowed = world.allowed(&state)?;
                let (chosen, _) = sample_action(&policy, &enc, &allowed, &mut rng)?;
                let action = world.gate().enforce(chosen, &state, ActionOrigin::Agent)?.executed;
                violations += u64::from(action != chosen);
                let log_prob = masked_log_softmax(&policy.predict(&enc)?, allowed.as_slice())[action];
                let base_log_prob = masked_log_softmax(&base_policy.predict(&enc)?, allowed.as_slice())[action];
                let score = reward.score(&enc, action)?;
                let penalty = cfg.kl_coef * (log_prob - base_log_prob);
                scores.push(score);
                penalties.push(penalty);
                batch.steps.push(RolloutStep {
                    value_estimate: value_net.predict(&enc)?[0],
                    state_enc: enc,
                    action_index: action,
                    reward: score - penalty,
                    old_log_prob: log_prob,
                    done: true,
                    allowed,
                });
                let (next, done) = env.advance(&state, action)?;
                if done {
                    break;
                }
                state = next;
            }
        }
        let rewards = batch.rewards();
        let (mut adv, ret) = compute_gae(&rewards, &batch.values(), &batch.dones(), ppo.gamma, ppo.gae_lambda)?;
        // A constant reward carries no preference signal; without this the
        // advantages would only reflect value-network error.
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rewards.len() as f64;
        if var.sqrt() < 1e-8 {
            adv.iter_mut().for_each(|a| *a = 0.0);
        }
        let losses = ppo_update(&mut policy, &mut value_net, &batch, &adv, &ret, ppo, &mut opts, &mut rng)?;
        let n = scores.len() as f64;
        metrics.push(RlhfIterationMetrics {
            iteration,
            prompts: scores.len(),
            mean_reward_score: scores.iter().sum::<f64>() / n,
            mean_kl_penalty: penalties.iter().sum::<f64>() / n,
            l_clip: losses.l_clip,
            entropy: losses.entropy,
            value_loss: losses.value_loss,
        });
    }
    let artifact = PolicyArtifact::new(
        Algo::Rlhf,
        world,
        BTreeMap::from([(POLICY_NET.to_owned(), policy), (VALUE_NET.to_owned(), value_net)]),
        config_digest(cfg)?,
        seed,
    );
    Ok(RlhfRun {
        artifact,
        metrics,
        env_counters: env.counters(),
        compliance_violations: violations,
    })
}

/// Action distribution of a policy network over the allowed set.
pub fn policy_distribution(policy: &Mlp, state_enc: &[f64], allowed: &ActionMask) -> Result<Vec<f64>> {
    Ok(masked_softmax(&policy.predict(state_enc)?, allowed.as_slice()))
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Distinct non-terminal states met when `policy` is sampled from its
/// softmax; the natural probe set for comparing fine-tuned policies.
pub fn policy_states(world: &World, policy: &Mlp, episodes: usize, seed: u64) -> Result<Vec<DialogueState>> {
    let mut env = world.env(FeedbackMode::Sampled, derive_seed(seed, "probe/env"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe/agent"));
    let segments: Vec<String> = world.scenario().segments().map(str::to_owned).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for k in 0..episodes {
        let mut state = env.reset(&segments[k % segments.len()])?;
        loop {
            if seen.insert(state.digest()) {
                out.push(state.clone());
            }
            let enc = world.encode(&state)?.values;
            let (a, _) = sample_action(policy, &enc, &world.allowed(&state)?, &mut rng)?;
            let (next, done) = env.advance(&state, a)?;
            if done {
                break;
            }
            state = next;
        }
    }
    Ok(out)
}
