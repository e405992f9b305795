use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use talktrack::compliance::{ActionOrigin, AuditLog};
use talktrack::dialogue::{ActionMask, DialogueState, Speaker};
use talktrack::nn::masked_softmax;
use talktrack::policy::{Algo, PolicyArtifact};
use talktrack::ppo::sample_categorical;
use talktrack::rlhf::{Choice, PreferenceRecord, PreferenceStore};
use talktrack::scenario::FeedbackMode;
use talktrack::world::World;
use talktrack::Error;

/// Failures surfaced to HTTP clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceError {
    NotFound(String),
    Conflict(String),
    Protocol(String),
    BadRequest(String),
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Protocol(_) => "protocol",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            ServiceError::NotFound(m)
            | ServiceError::Conflict(m)
            | ServiceError::Protocol(m)
            | ServiceError::BadRequest(m)
            | ServiceError::Internal(m) => m,
        }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        match e {
            Error::Lookup { .. } => ServiceError::NotFound(e.to_string()),
            Error::Protocol(_) => ServiceError::Protocol(e.to_string()),
            Error::Precondition(_) | Error::Ineligible { .. } => ServiceError::BadRequest(e.to_string()),
            _ => ServiceError::Internal(e.to_string()),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub preferences: PathBuf,
    pub sessions: PathBuf,
    pub lease: Duration,
    pub generate_tasks: bool,
    /// Reloaded after each completed chat session when its contents change.
    pub artifact_path: Option<PathBuf>,
    pub seed: u64,
}

impl ServiceOptions {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            preferences: dir.join("preferences.jsonl"),
            sessions: dir.join("sessions.jsonl"),
            lease: Duration::from_secs(120),
            generate_tasks: true,
            artifact_path: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateView {
    pub segment: String,
    pub turn: u32,
    pub history: Vec<Turn>,
}

impl From<&DialogueState> for StateView {
    fn from(s: &DialogueState) -> Self {
        Self {
            segment: s.segment_id.clone(),
            turn: s.turn,
            history: s
                .history
                .iter()
                .map(|(speaker, text)| Turn {
                    speaker: *speaker,
                    text: text.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Open,
    Labeled,
}

/// A pairwise labeling task as shown to annotators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTask {
    pub task_id: String,
    pub state: StateView,
    pub candidate_a: Candidate,
    pub candidate_b: Candidate,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAck {
    pub task_id: String,
    pub status: TaskStatus,
    /// False when the label repeats one already stored.
    pub recorded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub reply: Option<String>,
    pub turn: u32,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub labels: u64,
    pub labels_by_annotator: BTreeMap<String, u64>,
    pub tasks_open: usize,
    pub tasks_leased: usize,
    pub tasks_labeled: usize,
    pub sessions_active: usize,
    pub sessions_completed: u64,
    pub agent_blocks: usize,
    pub policy_reloads: u64,
}

struct TaskEntry {
    task: LabelTask,
    state: DialogueState,
    state_digest: String,
    state_enc: Vec<f64>,
    a: usize,
    b: usize,
    lease: Option<(String, Instant)>,
    labeled_by: Option<String>,
}

impl TaskEntry {
    fn leased_to_other(&self, annotator: &str, now: Instant) -> bool {
        matches!(&self.lease, Some((who, until)) if who != annotator && *until > now)
    }
}

/// A conversation where a person plays the customer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    pub state: DialogueState,
    /// Digest of the artifact that produced the agent's replies.
    pub artifact_digest: String,
    pub transcript: Vec<Turn>,
    /// Agent action awaiting the customer's reply.
    pub pending_action: Option<usize>,
    pub done: bool,
}

struct Inner {
    tasks: Vec<TaskEntry>,
    task_index: HashMap<String, usize>,
    sessions: HashMap<String, ChatSession>,
    sessions_completed: u64,
    next_id: u64,
    rng: ChaCha8Rng,
    labels_by_annotator: BTreeMap<String, u64>,
    policy_reloads: u64,
}

struct Served {
    artifact: PolicyArtifact,
    digest: String,
}

/// Label queue and chat sandbox over one world and one policy. All
/// mutations go through a single lock; the policy sits behind a read-write
/// lock so it can be swapped between sessions.
pub struct FeedbackService {
    world: World,
    audit: Arc<AuditLog>,
    policy: RwLock<Arc<Served>>,
    store: PreferenceStore,
    sessions_log: Mutex<File>,
    opts: ServiceOptions,
    inner: Mutex<Inner>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl FeedbackService {
    pub fn new(world: World, artifact: PolicyArtifact, opts: ServiceOptions) -> talktrack::Result<Self> {
        check_servable(&artifact, &world)?;
        let audit = Arc::new(AuditLog::in_memory());
        let world = world.with_audit(audit.clone());
        let store = PreferenceStore::open(&opts.preferences)?;
        let sessions_log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&opts.sessions)
            .map_err(|e| Error::io(&opts.sessions, e))?;
        let digest = artifact.digest()?;
        Ok(Self {
            world,
            audit,
            policy: RwLock::new(Arc::new(Served { artifact, digest })),
            store,
            sessions_log: Mutex::new(sessions_log),
            inner: Mutex::new(Inner {
                tasks: Vec::new(),
                task_index: HashMap::new(),
                sessions: HashMap::new(),
                sessions_completed: 0,
                next_id: 0,
                rng: ChaCha8Rng::seed_from_u64(opts.seed),
                labels_by_annotator: BTreeMap::new(),
                policy_reloads: 0,
            }),
            opts,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn store(&self) -> &PreferenceStore {
        &self.store
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    fn served(&self) -> Arc<Served> {
        self.policy.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn probabilities(&self, policy: &PolicyArtifact, state: &DialogueState) -> talktrack::Result<(Vec<f64>, ActionMask)> {
        let enc = self.world.encode(state)?.values;
        let allowed = self.world.allowed(state)?;
        Ok((masked_softmax(&policy.action_scores(&enc)?, allowed.as_slice()), allowed))
    }

    // -- label tasks -------------------------------------------------------

    /// Hand out an open task not leased to someone else, generating one when
    /// the queue is empty and generation is enabled.
    pub fn next_task(&self, annotator: &str) -> ServiceResult<Option<LabelTask>> {
        if annotator.trim().is_empty() {
            return Err(ServiceError::BadRequest("annotator id is required".into()));
        }
        let now = Instant::now();
        let mut inner = lock(&self.inner);
        let pick = inner
            .tasks
            .iter()
            .position(|t| t.labeled_by.is_none() && !t.leased_to_other(annotator, now));
        let idx = match pick {
            Some(i) => i,
            None if self.opts.generate_tasks => match self.generate_task(&mut inner)? {
                Some(i) => i,
                None => return Ok(None),
            },
            None => return Ok(None),
        };
        let entry = &mut inner.tasks[idx];
        entry.lease = Some((annotator.to_owned(), now + self.opts.lease));
        Ok(Some(entry.task.clone()))
    }

    /// Queue a task for an explicit state and candidate pair.
    pub fn add_task(&self, state: &DialogueState, a: usize, b: usize) -> ServiceResult<LabelTask> {
        let allowed = self.world.allowed(state)?;
        if a == b || !allowed.contains(a) || !allowed.contains(b) {
            return Err(ServiceError::BadRequest("candidates must be two distinct allowed actions".into()));
        }
        let mut inner = lock(&self.inner);
        let idx = self.push_task(&mut inner, state, a, b)?;
        Ok(inner.tasks[idx].task.clone())
    }

    fn generate_task(&self, inner: &mut Inner) -> ServiceResult<Option<usize>> {
        let served = self.served();
        let scenario = self.world.scenario();
        for _ in 0..32 {
            let segment = scenario.segment_id(inner.rng.random_range(0..scenario.segment_count())).to_owned();
            let prefix = inner.rng.random_range(0..scenario.max_turns());
            let mut env = self.world.env(FeedbackMode::Sampled, inner.rng.random());
            let mut state = env.reset(&segment)?;
            let mut ended = false;
            for _ in 0..prefix {
                let (probs, _) = self.probabilities(&served.artifact, &state)?;
                let a = sample_categorical(&probs, &mut inner.rng);
                let (next, done) = env.advance(&state, a)?;
                if done {
                    ended = true;
                    break;
                }
                state = next;
            }
            if ended {
                continue;
            }
            let (probs, allowed) = self.probabilities(&served.artifact, &state)?;
            if let Some((a, b)) = top_two(&probs, &allowed, self.world.catalog().fallback_index()) {
                return Ok(Some(self.push_task(inner, &state, a, b)?));
            }
        }
        Ok(None)
    }

    fn push_task(&self, inner: &mut Inner, state: &DialogueState, a: usize, b: usize) -> ServiceResult<usize> {
        let catalog = self.world.catalog();
        let candidate = |i: usize| {
            let u = catalog.get(i).expect("allowed actions are in the catalog");
            Candidate {
                id: u.id.clone(),
                text: u.text.clone(),
            }
        };
        inner.next_id += 1;
        let task_id = format!("t{:06}", inner.next_id);
        let entry = TaskEntry {
            task: LabelTask {
                task_id: task_id.clone(),
                state: state.into(),
                candidate_a: candidate(a),
                candidate_b: candidate(b),
                created: unix_now(),
                status: TaskStatus::Open,
            },
            state: state.clone(),
            state_digest: format!("{:016x}", state.digest()),
            state_enc: self.world.encode(state)?.values,
            a,
            b,
            lease: None,
            labeled_by: None,
        };
        inner.tasks.push(entry);
        let idx = inner.tasks.len() - 1;
        inner.task_index.insert(task_id, idx);
        Ok(idx)
    }

    /// Record an annotator's choice. Repeating the same label is
    /// acknowledged without storing a second record.
    pub fn submit_label(&self, task_id: &str, annotator: &str, choice: Choice) -> ServiceResult<LabelAck> {
        if annotator.trim().is_empty() {
            return Err(ServiceError::BadRequest("annotator id is required".into()));
        }
        let mut inner = lock(&self.inner);
        let idx = *inner
            .task_index
            .get(task_id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown task `{task_id}`")))?;
        let entry = &mut inner.tasks[idx];
        match &entry.labeled_by {
            Some(who) if who == annotator => {
                return Ok(LabelAck {
                    task_id: task_id.to_owned(),
                    status: TaskStatus::Labeled,
                    recorded: false,
                })
            }
            Some(_) => return Err(ServiceError::Conflict(format!("task `{task_id}` was labeled by another annotator"))),
            None => {}
        }
        if entry.leased_to_other(annotator, Instant::now()) {
            return Err(ServiceError::Conflict(format!("task `{task_id}` is leased to another annotator")));
        }
        let record = PreferenceRecord {
            state_digest: entry.state_digest.clone(),
            state_enc: entry.state_enc.clone(),
            a: entry.a,
            b: entry.b,
            choice,
            annotator: annotator.to_owned(),
            ts: unix_now(),
        };
        self.store.append(&record)?;
        entry.labeled_by = Some(annotator.to_owned());
        entry.task.status = TaskStatus::Labeled;
        entry.lease = None;
        *inner.labels_by_annotator.entry(annotator.to_owned()).or_default() += 1;
        Ok(LabelAck {
            task_id: task_id.to_owned(),
            status: TaskStatus::Labeled,
            recorded: true,
        })
    }

    // -- chat --------------------------------------------------------------

    pub fn chat_start(&self, segment: &str) -> ServiceResult<String> {
        let state = self.world.scenario().reset(segment)?;
        let digest = self.served().digest.clone();
        let mut inner = lock(&self.inner);
        inner.next_id += 1;
        let session_id = format!("s{:06}", inner.next_id);
        inner.sessions.insert(
            session_id.clone(),
            ChatSession {
                session_id: session_id.clone(),
                state,
                artifact_digest: digest,
                transcript: Vec::new(),
                pending_action: None,
                done: false,
            },
        );
        Ok(session_id)
    }

    /// The customer speaks; the agent answers with the policy's best allowed
    /// utterance. The customer's text is the reply to the agent's previous
    /// utterance, if any.
    pub fn chat_message(&self, session_id: &str, text: &str) -> ServiceResult<ChatReply> {
        let served = self.served();
        let mut inner = lock(&self.inner);
        let session = inner
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session `{session_id}`")))?;
        if session.done {
            return Err(ServiceError::Protocol(format!("session `{session_id}` is finished")));
        }
        session.transcript.push(Turn {
            speaker: Speaker::User,
            text: text.to_owned(),
        });
        let scenario = self.world.scenario();
        if let Some(a) = session.pending_action.take() {
            let (next, done) = scenario.step_with_reply(&session.state, a, text)?;
            session.state = next;
            if done {
                session.done = true;
                let turn = session.state.turn;
                self.finish(&mut inner, session_id)?;
                return Ok(ChatReply { reply: None, turn, done: true });
            }
        }
        let (probs, allowed) = self.probabilities(&served.artifact, &session.state)?;
        let chosen = talktrack::nn::masked_argmax(&probs, allowed.as_slice())
            .ok_or_else(|| ServiceError::Internal("empty allowed set".into()))?;
        let executed = self
            .world
            .gate()
            .enforce(chosen, &session.state, ActionOrigin::Agent)?
            .executed;
        let utterance = scenario.catalog().get(executed).expect("gate returns catalog actions").text.clone();
        session.transcript.push(Turn {
            speaker: Speaker::Agent,
            text: utterance.clone(),
        });
        let ends_now = scenario
            .dynamics(scenario.phase_index(&session.state.phase_key)?, executed)
            .is_some_and(|d| d.is_terminal())
            || session.state.turn + 1 >= session.state.max_turns;
        if ends_now {
            let (next, _) = scenario.step_with_reply(&session.state, executed, "")?;
            session.state = next;
            session.done = true;
            let turn = session.state.turn;
            self.finish(&mut inner, session_id)?;
            return Ok(ChatReply {
                reply: Some(utterance),
                turn,
                done: true,
            });
        }
        session.pending_action = Some(executed);
        Ok(ChatReply {
            reply: Some(utterance),
            turn: session.state.turn,
            done: false,
        })
    }

    /// The conversation state a task was generated from.
    pub fn task_state(&self, task_id: &str) -> Option<DialogueState> {
        let inner = lock(&self.inner);
        inner.task_index.get(task_id).map(|&i| inner.tasks[i].state.clone())
    }

    pub fn session(&self, session_id: &str) -> Option<ChatSession> {
        lock(&self.inner).sessions.get(session_id).cloned()
    }

    /// Persist a finished session and pick up a retrained policy if the
    /// artifact file has changed.
    fn finish(&self, inner: &mut Inner, session_id: &str) -> ServiceResult<()> {
        if let Some(session) = inner.sessions.get(session_id) {
            let mut line = serde_json::to_vec(session).map_err(Error::from)?;
            line.push(b'\n');
            let mut f = lock(&self.sessions_log);
            f.write_all(&line)
                .and_then(|()| f.sync_data())
                .map_err(|e| Error::io(&self.opts.sessions, e))?;
        }
        inner.sessions_completed += 1;
        if self.reload_policy()? {
            inner.policy_reloads += 1;
        }
        Ok(())
    }

    /// Reload the artifact from disk; true when a different one was loaded.
    /// A file that fails to load or does not fit the world is ignored.
    pub fn reload_policy(&self) -> ServiceResult<bool> {
        let Some(path) = &self.opts.artifact_path else {
            return Ok(false);
        };
        let artifact = match PolicyArtifact::load(path).and_then(|a| check_servable(&a, &self.world).map(|()| a)) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("keeping current policy: {e}");
                return Ok(false);
            }
        };
        let digest = artifact.digest()?;
        if digest == self.served().digest {
            return Ok(false);
        }
        *self.policy.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(Served { artifact, digest });
        Ok(true)
    }

    pub fn metrics(&self) -> ServiceMetrics {
        let now = Instant::now();
        let inner = lock(&self.inner);
        let labeled = inner.tasks.iter().filter(|t| t.labeled_by.is_some()).count();
        let leased = inner
            .tasks
            .iter()
            .filter(|t| t.labeled_by.is_none() && t.lease.as_ref().is_some_and(|(_, until)| *until > now))
            .count();
        ServiceMetrics {
            labels: inner.labels_by_annotator.values().sum(),
            labels_by_annotator: inner.labels_by_annotator.clone(),
            tasks_open: inner.tasks.len() - labeled - leased,
            tasks_leased: leased,
            tasks_labeled: labeled,
            sessions_active: inner.sessions.values().filter(|s| !s.done).count(),
            sessions_completed: inner.sessions_completed,
            agent_blocks: self.audit.agent_blocks(),
            policy_reloads: inner.policy_reloads,
        }
    }
}

fn check_servable(artifact: &PolicyArtifact, world: &World) -> talktrack::Result<()> {
    if artifact.algo == Algo::RewardModel {
        return Err(Error::config("service.artifact", "a reward model cannot drive a conversation"));
    }
    artifact.check_compatible(world)
}

/// The two most probable allowed actions, leaving out the fallback when at
/// least two other actions are allowed.
fn top_two(probs: &[f64], allowed: &ActionMask, fallback: usize) -> Option<(usize, usize)> {
    let others = allowed.indices().filter(|&i| i != fallback).count();
    let mut ranked: Vec<usize> = allowed.indices().filter(|&i| others < 2 || i != fallback).collect();
    ranked.sort_by(|&x, &y| probs[y].total_cmp(&probs[x]).then(x.cmp(&y)));
    match ranked.as_slice() {
        [a, b, ..] => Some((*a, *b)),
        _ => None,
    }
}
