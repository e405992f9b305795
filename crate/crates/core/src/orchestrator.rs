//! Run dispatch, greedy evaluation and A/B comparison.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compliance::ActionOrigin;
use crate::config::{RunConfig, TrainMode};
use crate::dqn::{log_transitions, run_dqn, run_dqn_offline};
use crate::error::{Error, Result};
use crate::experience::ingest_dir;
use crate::mdp::OraclePolicy;
use crate::policy::{config_digest, derive_seed, Algo, Policy, PolicyArtifact};
use crate::ppo::run_ppo;
use crate::rlhf::{
    expert_dialogues, read_annotated, read_preferences, reward_model_train, rlhf_finetune, sft_train,
    AnnotatedDialogue, RewardModel,
};
use crate::scenario::{EnvCounters, FeedbackMode};
use crate::world::{EnvOptions, World};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ARTIFACT_FILE: &str = "artifact.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// What a training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub algo: Algo,
    pub mode: TrainMode,
    pub seed: u64,
    pub config_digest: String,
    pub artifact_digest: String,
    pub metrics_rows: usize,
    pub env_counters: EnvCounters,
    pub compliance_violations: u64,
    /// False when the environment drew no random numbers, i.e. feedback was
    /// deterministic.
    pub sampling_variance: bool,
    /// Stage-specific figures such as held-out accuracy.
    pub details: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifact: PolicyArtifact,
    pub summary: TrainSummary,
    pub artifact_path: PathBuf,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[derive(Serialize)]
struct EpochLoss {
    epoch: usize,
    loss: f64,
}

fn epoch_losses(losses: &[f64]) -> Vec<EpochLoss> {
    losses.iter().enumerate().map(|(epoch, &loss)| EpochLoss { epoch, loss }).collect()
}

fn env_options(mode: TrainMode) -> EnvOptions {
    match mode {
        TrainMode::Aggregate => EnvOptions::aggregate(),
        TrainMode::Online | TrainMode::Offline => EnvOptions::default(),
    }
}

/// Run the configured stage and write `artifact.json`, `metrics.jsonl` and
/// `summary.json` into the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let world = cfg.world()?;
    let opts = env_options(cfg.mode);
    let mut details = BTreeMap::new();
    let (artifact, metrics, env_counters, violations) = match cfg.algo {
        Algo::Dqn => {
            let run = if cfg.mode == TrainMode::Offline {
                let dir = cfg.data.logs.as_ref().ok_or_else(|| Error::config("data.logs", "required"))?;
                let episodes = ingest_dir(dir)?.into_strict()?;
                if episodes.is_empty() {
                    return Err(Error::NoTrainingData(format!("no episodes in {}", dir.display())));
                }
                details.insert("logged_episodes".into(), episodes.len().into());
                run_dqn_offline(&world, &cfg.dqn, log_transitions(&world, &episodes)?, cfg.seed)?
            } else {
                run_dqn(&world, &cfg.dqn, &opts, cfg.seed)?
            };
            (run.artifact, jsonl(&run.metrics)?, run.env_counters, run.compliance_violations)
        }
        Algo::Ppo => {
            let run = run_ppo(&world, &cfg.ppo, &opts, cfg.seed)?;
            (run.artifact, jsonl(&run.metrics)?, run.env_counters, run.compliance_violations)
        }
        Algo::Sft => {
            let dialogues = sft_data(cfg, &world)?;
            details.insert("dialogues".into(), dialogues.len().into());
            let (artifact, report) = sft_train(&dialogues, &world, &cfg.sft, cfg.seed)?;
            details.insert("rejected_steps".into(), report.rejected_steps.into());
            (artifact, jsonl(&epoch_losses(&report.losses))?, EnvCounters::default(), 0)
        }
        Algo::RewardModel => {
            let path = cfg.data.preferences.as_ref().ok_or_else(|| Error::config("data.preferences", "required"))?;
            let records = read_preferences(path)?;
            let (model, report) = reward_model_train(
                &records,
                world.encoder().dimension,
                world.num_actions(),
                &cfg.reward_model,
                cfg.seed,
            )?;
            details.insert("train_records".into(), report.train_records.into());
            details.insert("held_out_records".into(), report.held_out_records.into());
            details.insert("held_out_accuracy".into(), serde_json::to_value(report.held_out_accuracy)?);
            let artifact = model.to_artifact(&world, config_digest(&cfg.reward_model)?, cfg.seed);
            (artifact, jsonl(&epoch_losses(&report.losses))?, EnvCounters::default(), 0)
        }
        Algo::Rlhf => {
            let load = |field: &str, p: &Option<PathBuf>| -> Result<PolicyArtifact> {
                PolicyArtifact::load(p.as_ref().ok_or_else(|| Error::config(field, "required"))?)
            };
            let base = load("data.base_artifact", &cfg.data.base_artifact)?;
            let reward_artifact = load("data.reward_artifact", &cfg.data.reward_artifact)?;
            reward_artifact.check_compatible(&world)?;
            let reward = RewardModel::from_artifact(&reward_artifact)?;
            let run = rlhf_finetune(&base, &reward, &world, &cfg.rlhf, &opts, cfg.seed)?;
            (run.artifact, jsonl(&run.metrics)?, run.env_counters, run.compliance_violations)
        }
    };

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let artifact_path = dir.join(ARTIFACT_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    let summary_path = dir.join(SUMMARY_FILE);
    artifact.save(&artifact_path)?;
    fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;
    let summary = TrainSummary {
        algo: cfg.algo,
        mode: cfg.mode,
        seed: cfg.seed,
        config_digest: cfg.digest()?,
        artifact_digest: artifact.digest()?,
        metrics_rows: metrics.iter().filter(|&&b| b == b'\n').count(),
        env_counters,
        compliance_violations: violations,
        sampling_variance: env_counters.rng_draws > 0,
        details,
    };
    write_json(&summary_path, &summary)?;
    Ok(TrainOutcome {
        artifact,
        summary,
        artifact_path,
        metrics_path,
        summary_path,
    })
}

fn sft_data(cfg: &RunConfig, world: &World) -> Result<Vec<AnnotatedDialogue>> {
    let mut dialogues = Vec::new();
    if let Some(p) = &cfg.data.annotated {
        dialogues.extend(read_annotated(p)?);
    }
    if let Some(dir) = &cfg.data.logs {
        for ep in ingest_dir(dir)?.into_strict()? {
            dialogues.push(AnnotatedDialogue::from_log(world, &ep)?);
        }
    }
    if let Some(n) = cfg.data.expert_episodes.filter(|&n| n > 0) {
        let oracle = OraclePolicy::new(world, cfg.ppo.gamma)?;
        dialogues.extend(expert_dialogues(world, &oracle, n, 0.3, derive_seed(cfg.seed, "sft/expert"))?);
    }
    if dialogues.iter().all(|d| d.steps.is_empty()) {
        return Err(Error::NoTrainingData("no annotated conversations, logs or expert episodes".into()));
    }
    Ok(dialogues)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Evaluation

/// One greedy conversation's outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub segment: usize,
    pub episode_return: f64,
    pub turns: u32,
    pub converted: bool,
    pub violations: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub episodes: usize,
    pub conversion_rate: f64,
    pub mean_return: f64,
    pub mean_turns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub conversion_rate: f64,
    pub mean_return: f64,
    /// Standard error of `mean_return`.
    pub return_std_error: f64,
    pub mean_turns: f64,
    pub compliance_violations: u64,
    pub segments: BTreeMap<String, SegmentReport>,
}

/// Play one greedy conversation in a freshly seeded sampled environment.
pub fn play_episode(policy: &dyn Policy, world: &World, segment: usize, env_seed: u64) -> Result<EpisodeOutcome> {
    let mut env = world.env(FeedbackMode::Sampled, env_seed);
    let mut state = env.reset(world.scenario().segment_id(segment))?;
    let mut out = EpisodeOutcome {
        segment,
        episode_return: 0.0,
        turns: 0,
        converted: false,
        violations: 0,
    };
    loop {
        let enc = world.encode(&state)?.values;
        let allowed = world.allowed(&state)?;
        let chosen = policy.act(&state, &enc, &allowed)?;
        let executed = world.gate().enforce(chosen, &state, ActionOrigin::Agent)?.executed;
        out.violations += u64::from(executed != chosen);
        let step = env.step(&state, executed)?;
        out.episode_return += step.reward;
        out.turns += 1;
        if step.done {
            out.converted = step.info.converted == Some(true);
            return Ok(out);
        }
        state = step.next_state;
    }
}

/// Greedy rollouts of `policy`. Episode `i` plays segment `i mod k` with an
/// environment seed derived from `(seed, i)`, so the report does not depend
/// on how episodes are spread over threads.
pub fn evaluate(policy: &dyn Policy, world: &World, episodes: usize, seed: u64) -> Result<EvalReport> {
    Ok(summarize(world, &eval_outcomes(policy, world, episodes, seed, "eval")?))
}

/// Check the artifact against the world, then [`evaluate`] it.
pub fn evaluate_artifact(artifact: &PolicyArtifact, world: &World, episodes: usize, seed: u64) -> Result<EvalReport> {
    artifact.check_compatible(world)?;
    evaluate(artifact, world, episodes, seed)
}

fn eval_outcomes(policy: &dyn Policy, world: &World, episodes: usize, seed: u64, label: &str) -> Result<Vec<EpisodeOutcome>> {
    if episodes == 0 {
        return Err(Error::Precondition("at least one episode is required".into()));
    }
    let k = world.scenario().segment_count();
    (0..episodes)
        .into_par_iter()
        .map(|i| play_episode(policy, world, i % k, derive_seed(seed, &format!("{label}/{i}"))))
        .collect()
}

fn summarize(world: &World, outcomes: &[EpisodeOutcome]) -> EvalReport {
    let mut segments: BTreeMap<String, SegmentReport> = BTreeMap::new();
    let (mut conv, mut ret, mut ret2, mut turns, mut violations) = (0.0, 0.0, 0.0, 0.0, 0);
    for o in outcomes {
        conv += f64::from(u8::from(o.converted));
        ret += o.episode_return;
        ret2 += o.episode_return * o.episode_return;
        turns += f64::from(o.turns);
        violations += o.violations;
        let s = segments.entry(world.scenario().segment_id(o.segment).to_owned()).or_default();
        s.episodes += 1;
        s.conversion_rate += f64::from(u8::from(o.converted));
        s.mean_return += o.episode_return;
        s.mean_turns += f64::from(o.turns);
    }
    for s in segments.values_mut() {
        let n = s.episodes as f64;
        s.conversion_rate /= n;
        s.mean_return /= n;
        s.mean_turns /= n;
    }
    let n = outcomes.len() as f64;
    let mean = ret / n;
    let var = if outcomes.len() > 1 {
        ((ret2 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    EvalReport {
        episodes: outcomes.len(),
        conversion_rate: conv / n,
        mean_return: mean,
        return_std_error: (var / n).sqrt(),
        mean_turns: turns / n,
        compliance_violations: violations,
        segments,
    }
}

// ---------------------------------------------------------------------------
// A/B comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub a: EvalReport,
    pub b: EvalReport,
    /// Conversion rate of A minus conversion rate of B.
    pub lift: f64,
    /// 95% two-proportion normal-approximation interval for `lift`.
    pub ci_low: f64,
    pub ci_high: f64,
    /// True when the interval excludes zero.
    pub significant: bool,
}

const Z_95: f64 = 1.959_963_984_540_054;

/// Two-proportion z-interval for `p_a - p_b`.
pub fn two_proportion_ci(p_a: f64, n_a: usize, p_b: f64, n_b: usize) -> (f64, f64, f64) {
    let diff = p_a - p_b;
    let se = (p_a * (1.0 - p_a) / n_a as f64 + p_b * (1.0 - p_b) / n_b as f64).sqrt();
    (diff, diff - Z_95 * se, diff + Z_95 * se)
}

/// Evaluate both arms on independent environment streams and compare their
/// conversion rates.
pub fn ab_compare(a: &dyn Policy, b: &dyn Policy, world: &World, per_arm: usize, seed: u64) -> Result<AbReport> {
    let a = summarize(world, &eval_outcomes(a, world, per_arm, seed, "ab/a")?);
    let b = summarize(world, &eval_outcomes(b, world, per_arm, seed, "ab/b")?);
    let (lift, ci_low, ci_high) = two_proportion_ci(a.conversion_rate, a.episodes, b.conversion_rate, b.episodes);
    Ok(AbReport {
        a,
        b,
        lift,
        ci_low,
        ci_high,
        significant: ci_low > 0.0 || ci_high < 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FallbackPolicy;
    use crate::world::toyshop;

    #[test]
    fn zero_episodes_rejected() {
        let world = toyshop();
        let p = FallbackPolicy {
            fallback: world.catalog().fallback_index(),
        };
        assert!(evaluate(&p, &world, 0, 1).is_err());
        assert!(ab_compare(&p, &p, &world, 0, 1).is_err());
    }

    #[test]
    fn evaluation_is_independent_of_thread_count() {
        let world = toyshop();
        let oracle = OraclePolicy::new(&world, 0.95).unwrap();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = single.install(|| evaluate(&oracle, &world, 300, 9)).unwrap();
        let b = evaluate(&oracle, &world, 300, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.compliance_violations, 0);
        assert_eq!(a.segments.values().map(|s| s.episodes).sum::<usize>(), 300);
    }

    #[test]
    fn degenerate_interval() {
        let (lift, lo, hi) = two_proportion_ci(1.0, 100, 0.0, 100);
        assert_eq!((lift, lo, hi), (1.0, 1.0, 1.0));
        let (lift, lo, hi) = two_proportion_ci(0.5, 100, 0.5, 100);
        assert_eq!(lift, 0.0);
        assert!(lo < 0.0 && hi > 0.0);
    }
}
