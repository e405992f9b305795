use std::fs;
use std::path::Path;

use talktrack::config::RunConfig;
use talktrack::experience::write_log;
use talktrack::mdp::{oracle_agreement, OraclePolicy};
use talktrack::orchestrator::{evaluate, train, TrainOutcome, METRICS_FILE};
use talktrack::policy::{FallbackPolicy, PolicyArtifact};
use talktrack::rlhf::{synthesize_preferences, write_preferences, PlantedUtility};
use talktrack::world::toyshop;
use talktrack::ErrorKind;
use tempfile::TempDir;

fn run(dir: &Path, name: &str, body: &str) -> talktrack::Result<TrainOutcome> {
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, body).unwrap();
    train(&RunConfig::load(&path)?)
}

#[test]
fn offline_dqn_learns_from_logs_only() {
    let dir = TempDir::new().unwrap();
    let world = toyshop();
    fs::create_dir(dir.path().join("logs")).unwrap();
    let oracle = OraclePolicy::new(&world, 0.95).unwrap();
    write_log(dir.path().join("logs/oracle.jsonl"), &world.simulate_logs(&oracle, 2000, 1).unwrap()).unwrap();
    let out = run(
        dir.path(),
        "offline",
        "seed = 3\nalgo = \"dqn\"\nmode = \"offline\"\noutput_dir = \"out\"\n[data]\nlogs = \"logs\"\n[dqn]\noffline_steps = 4000\n",
    )
    .unwrap();
    assert_eq!(out.summary.env_counters.steps, 0);
    assert_eq!(out.summary.details["logged_episodes"], 2000);
    assert!(fs::read_to_string(out.metrics_path).unwrap().lines().count() > 1);
    let report = evaluate(&out.artifact, &world, 2000, 5).unwrap();
    let fallback = evaluate(&FallbackPolicy { fallback: world.catalog().fallback_index() }, &world, 2000, 5).unwrap();
    assert!(report.mean_return > fallback.mean_return);
}

#[test]
fn aggregate_mode_never_samples() {
    let dir = TempDir::new().unwrap();
    let out = run(
        dir.path(),
        "agg",
        "seed = 3\nalgo = \"ppo\"\nmode = \"aggregate\"\noutput_dir = \"out\"\n[ppo]\nnum_iterations = 30\n",
    )
    .unwrap();
    assert_eq!(out.summary.env_counters.rng_draws, 0);
    assert!(!out.summary.sampling_variance);
    let online = run(dir.path(), "online", "seed = 3\nalgo = \"ppo\"\noutput_dir = \"on\"\n[ppo]\nnum_iterations = 5\n").unwrap();
    assert!(online.summary.sampling_variance);
}

#[test]
fn full_rlhf_chain_through_configs() {
    let dir = TempDir::new().unwrap();
    let world = toyshop();
    let planted = PlantedUtility::random(world.encoder().dimension, world.num_actions(), 9);
    let prefs = synthesize_preferences(&world, &planted, 1500, 0.0, 0.5, 9).unwrap();
    write_preferences(dir.path().join("prefs.jsonl"), &prefs).unwrap();

    let sft = run(
        dir.path(),
        "sft",
        "seed = 9\nalgo = \"sft\"\nmode = \"offline\"\noutput_dir = \"sft\"\n[data]\nexpert_episodes = 100\n[sft]\nepochs = 100\n",
    )
    .unwrap();
    assert_eq!(sft.summary.env_counters.steps, 0);
    let agreement = oracle_agreement(&world, &sft.artifact, 0.95, 1e-9).unwrap();
    assert!(agreement.fraction() >= 0.8, "{agreement:?}");

    let rm = run(
        dir.path(),
        "rm",
        "seed = 9\nalgo = \"reward-model\"\nmode = \"offline\"\noutput_dir = \"rm\"\n[data]\npreferences = \"prefs.jsonl\"\n",
    )
    .unwrap();
    let acc = rm.summary.details["held_out_accuracy"].as_f64().unwrap();
    assert!(acc > 0.85, "{acc}");
    assert!(PolicyArtifact::load(&rm.artifact_path).is_ok());

    let tuned = run(
        dir.path(),
        "rlhf",
        "seed = 9\nalgo = \"rlhf\"\noutput_dir = \"rlhf\"\n[data]\nbase_artifact = \"sft/artifact.json\"\nreward_artifact = \"rm/artifact.json\"\n[rlhf.ppo]\nnum_iterations = 10\n",
    )
    .unwrap();
    assert_eq!(tuned.summary.env_counters.reward_reads, 0);
    assert_eq!(tuned.summary.compliance_violations, 0);
    assert_eq!(fs::read_to_string(dir.path().join("rlhf").join(METRICS_FILE)).unwrap().lines().count(), 10);
}

#[test]
fn stage_and_mode_mismatches_are_config_errors() {
    let dir = TempDir::new().unwrap();
    for body in [
        "seed = 1\nalgo = \"ppo\"\nmode = \"offline\"\n",
        "seed = 1\nalgo = \"sft\"\n",
        "seed = 1\nalgo = \"dqn\"\nmode = \"offline\"\n",
        "seed = 1\nalgo = \"rlhf\"\n",
        "seed = 1\nalgo = \"dqn\"\n[data]\nlogs = \"missing\"\n",
    ] {
        let err = run(dir.path(), "bad", body).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Config, "{body}: {err}");
    }
}
