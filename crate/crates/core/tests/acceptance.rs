//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use talktrack::compliance::AuditLog;
use talktrack::config::RunConfig;
use talktrack::dqn::{run_dqn, DqnConfig};
use talktrack::mdp::{enumerate_world_mdp, evaluate_policy, oracle_agreement, OraclePolicy, DEFAULT_ORACLE_CAP};
use talktrack::nn::Mlp;
use talktrack::orchestrator::{ab_compare, evaluate, train, METRICS_FILE};
use talktrack::policy::{derive_seed, POLICY_NET};
use talktrack::ppo::{clipped_objective, compute_gae, run_ppo, PpoConfig};
use talktrack::rlhf::{
    expert_dialogues, policy_distribution, policy_states, reward_model_train, rlhf_finetune, sft_train,
    split_records, synthesize_preferences, total_variation, PlantedUtility, RewardModelConfig,
    RlhfConfig, SftConfig,
};
use talktrack::scenario::FeedbackMode;
use talktrack::world::{toyshop, EnvOptions, World};

const SEED: u64 = 7;

struct Verdict {
    id: u8,
    title: &'static str,
    pass: bool,
    detail: String,
}

/// Episode and violation tallies shared by every run in the suite.
#[derive(Default)]
struct Tally {
    episodes: AtomicU64,
    violations: AtomicU64,
}

impl Tally {
    fn add(&self, episodes: u64, violations: u64) {
        self.episodes.fetch_add(episodes, Ordering::Relaxed);
        self.violations.fetch_add(violations, Ordering::Relaxed);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn gradients(verdicts: &mut Vec<Verdict>) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut dims = vec![rng.random_range(1..=8)];
        for _ in 0..rng.random_range(1..=2) {
            dims.push(rng.random_range(1..=16));
        }
        dims.push(rng.random_range(1..=6));
        let mut net = Mlp::new(&dims, &mut rng).unwrap();
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..*dims.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |n: &Mlp| n.predict(&x).unwrap().iter().zip(&w).map(|(o, wi)| o * wi).sum::<f64>();
        let (_, cache) = net.forward(&x).unwrap();
        let analytic = net.backward(&cache, &w).unwrap().flat();
        let params = net.params_flat();
        for (i, &g) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[i] += h;
            net.set_params_flat(&p).unwrap();
            let up = loss(&net);
            p[i] -= 2.0 * h;
            net.set_params_flat(&p).unwrap();
            let down = loss(&net);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
        }
        net.set_params_flat(&params).unwrap();
    }
    let el = t.elapsed();
    verdicts.push(Verdict {
        id: 1,
        title: "gradient correctness",
        pass: worst < 1e-4 && el < Duration::from_secs(10),
        detail: format!("max relative error {worst:.2e} over 50 draws (< 1e-4), {} (< 10s)", secs(el)),
    });
}

fn dqn_oracle(world: &World, tally: &Tally, verdicts: &mut Vec<Verdict>) {
    let t = Instant::now();
    let cfg = DqnConfig::default();
    let run = run_dqn(world, &cfg, &EnvOptions::default(), SEED).unwrap();
    let agreement = oracle_agreement(world, &run.artifact, cfg.gamma, 1e-9).unwrap();
    let el = t.elapsed();
    tally.add(cfg.num_episodes as u64, run.compliance_violations);
    let steps = run.env_counters.steps;
    verdicts.push(Verdict {
        id: 2,
        title: "DQN oracle match",
        pass: agreement.fraction() >= 0.95 && steps <= 50_000 && el < Duration::from_secs(120),
        detail: format!(
            "{}/{} reachable states optimal ({:.1}%, >= 95%), {steps} env steps (<= 50000), {} (< 120s)",
            agreement.matched,
            agreement.states,
            100.0 * agreement.fraction(),
            secs(el)
        ),
    });
}

fn ppo_oracle(world: &World, tally: &Tally, verdicts: &mut Vec<Verdict>) -> talktrack::policy::PolicyArtifact {
    let t = Instant::now();
    let cfg = PpoConfig::default();
    let run = run_ppo(world, &cfg, &EnvOptions::default(), SEED).unwrap();
    let report = evaluate(&run.artifact, world, 4000, SEED).unwrap();
    let optimum = OraclePolicy::new(world, 1.0).unwrap().mean_start_value();
    let el = t.elapsed();
    tally.add((cfg.num_iterations * cfg.rollout_episodes) as u64, run.compliance_violations);
    tally.add(report.episodes as u64, report.compliance_violations);
    let ratio = report.mean_return / optimum;
    verdicts.push(Verdict {
        id: 3,
        title: "PPO oracle return",
        pass: ratio >= 0.9 && cfg.num_iterations <= 200 && el < Duration::from_secs(180),
        detail: format!(
            "greedy return {:.4} ± {:.4} vs optimum {optimum:.4} = {:.1}% (>= 90%), {} iterations, {} (< 180s)",
            report.mean_return,
            report.return_std_error,
            100.0 * ratio,
            cfg.num_iterations,
            secs(el)
        ),
    });
    run.artifact
}

fn gae(verdicts: &mut Vec<Verdict>) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let gamma = rng.random_range(0.0..=1.0);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut dones = vec![false; n];
        dones[n - 1] = true;
        let (adv, _) = compute_gae(&r, &v, &dones, gamma, 0.0).unwrap();
        for t in 0..n {
            let next = if t + 1 < n { v[t + 1] } else { 0.0 };
            worst = worst.max((adv[t] - (r[t] + gamma * next - v[t])).abs());
        }
    }
    verdicts.push(Verdict {
        id: 4,
        title: "GAE one-step reduction",
        pass: worst <= 1e-12,
        detail: format!("max abs deviation {worst:.2e} over 1000 episodes (<= 1e-12)"),
    });
}

fn clip_law(verdicts: &mut Vec<Verdict>) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut above, mut unequal) = (0, 0);
    for _ in 0..100_000 {
        let ratio = rng.random_range(0.0..3.0);
        let adv = rng.random_range(-10.0..10.0);
        let eps = rng.random_range(0.01..0.5);
        let c = clipped_objective(ratio, adv, eps);
        above += usize::from(c > ratio * adv);
        unequal += usize::from((ratio - 1.0f64).abs() <= eps && c != ratio * adv);
    }
    verdicts.push(Verdict {
        id: 5,
        title: "clip law",
        pass: above == 0 && unequal == 0,
        detail: format!("1e5 triples: {above} above ratio*A, {unequal} unequal inside the clip range"),
    });
}

fn aggregate_determinism(world: &World, tally: &Tally, verdicts: &mut Vec<Verdict>) {
    let cfg = DqnConfig {
        num_episodes: 300,
        ..DqnConfig::default()
    };
    let opts = |env_seed| EnvOptions {
        mode: FeedbackMode::Aggregate,
        env_seed: Some(env_seed),
        trace: true,
    };
    let a = run_dqn(world, &cfg, &opts(1), SEED).unwrap();
    let b = run_dqn(world, &cfg, &opts(2), SEED).unwrap();
    tally.add(600, a.compliance_violations + b.compliance_violations);
    let same = a.trace == b.trace && a.trace.as_ref().is_some_and(|t| !t.is_empty());
    let draws = a.env_counters.rng_draws + b.env_counters.rng_draws;
    let dir = tempfile::tempdir().unwrap();
    let mut run_cfg = RunConfig::from_toml("seed = 7\nalgo = \"dqn\"\nmode = \"aggregate\"\n[dqn]\nnum_episodes = 50\n").unwrap();
    run_cfg.output_dir = dir.path().to_owned();
    let summary = train(&run_cfg).unwrap().summary;
    tally.add(50, summary.compliance_violations);
    verdicts.push(Verdict {
        id: 7,
        title: "aggregate-mode determinism",
        pass: same && draws == 0 && !summary.sampling_variance,
        detail: format!(
            "env seeds 1 and 2: traces identical = {same} ({} steps), env rng draws = {draws}, sampling_variance flag = {}",
            a.trace.map_or(0, |t| t.len()),
            summary.sampling_variance
        ),
    });
}

fn reward_model_and_rlhf(world: &World, tally: &Tally, verdicts: &mut Vec<Verdict>) {
    let dim = world.encoder().dimension;
    let na = world.num_actions();
    let t = Instant::now();
    let planted = PlantedUtility::random(dim, na, SEED);
    let prefs = synthesize_preferences(world, &planted, 5000, 0.1, 0.5, SEED).unwrap();
    let (rm, report) = reward_model_train(&prefs, dim, na, &RewardModelConfig::default(), SEED).unwrap();
    let (_, held) = split_records(&prefs).unwrap();
    let correct = held
        .iter()
        .filter(|r| {
            let (hi, lo) = if planted.utility(&r.state_enc, r.a) > planted.utility(&r.state_enc, r.b) {
                (r.a, r.b)
            } else {
                (r.b, r.a)
            };
            rm.score(&r.state_enc, hi).unwrap() > rm.score(&r.state_enc, lo).unwrap()
        })
        .count();
    let acc = correct as f64 / held.len() as f64;
    let el = t.elapsed();
    verdicts.push(Verdict {
        id: 8,
        title: "reward-model accuracy",
        pass: acc >= 0.9 && el < Duration::from_secs(60),
        detail: format!(
            "held-out agreement with planted ordering {acc:.3} on {} records (>= 0.9); agreement with noisy labels {:.3}; {} (< 60s)",
            held.len(),
            report.held_out_accuracy.unwrap_or(f64::NAN),
            secs(el)
        ),
    });

    let oracle = OraclePolicy::new(world, 0.95).unwrap();
    let demos = expert_dialogues(world, &oracle, 200, 0.3, SEED).unwrap();
    let (base, _) = sft_train(&demos, world, &SftConfig::default(), SEED).unwrap();
    let base_net = base.network(POLICY_NET).unwrap().clone();
    let probes = policy_states(world, &base_net, 200, SEED).unwrap();
    let probe_data: Vec<_> = probes
        .iter()
        .map(|s| (world.encode(s).unwrap().values, world.allowed(s).unwrap()))
        .collect();
    let mean_score = |net: &Mlp| {
        probe_data
            .iter()
            .map(|(enc, allowed)| {
                let p = policy_distribution(net, enc, allowed).unwrap();
                let scores = rm.scores(enc).unwrap();
                p.iter().zip(&scores).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum::<f64>()
            / probe_data.len() as f64
    };
    let oracle_score = probe_data
        .iter()
        .map(|(enc, allowed)| rm.score(enc, planted.best_action(enc, allowed).unwrap()).unwrap())
        .sum::<f64>()
        / probe_data.len() as f64;
    let base_score = mean_score(&base_net);

    let tune = |kl_coef| {
        let cfg = RlhfConfig {
            kl_coef,
            ..RlhfConfig::default()
        };
        let run = rlhf_finetune(&base, &rm, world, &cfg, &EnvOptions::default(), SEED).unwrap();
        tally.add((cfg.ppo.num_iterations * cfg.ppo.rollout_episodes) as u64, run.compliance_violations);
        (run.artifact.network(POLICY_NET).unwrap().clone(), run.env_counters.reward_reads)
    };
    let (tuned, reads) = tune(RlhfConfig::default().kl_coef);
    let tuned_score = mean_score(&tuned);
    let closed = (tuned_score - base_score) / (oracle_score - base_score);
    let (anchored, reads_anchored) = tune(1e3);
    let tv = probe_data
        .iter()
        .map(|(enc, allowed)| {
            total_variation(
                &policy_distribution(&anchored, enc, allowed).unwrap(),
                &policy_distribution(&base_net, enc, allowed).unwrap(),
            )
        })
        .sum::<f64>()
        / probe_data.len() as f64;
    verdicts.push(Verdict {
        id: 9,
        title: "RLHF improvement",
        pass: tuned_score > base_score && closed >= 0.2 && tv < 0.05 && reads + reads_anchored == 0,
        detail: format!(
            "mean RM score base {base_score:.3} -> tuned {tuned_score:.3}, planted-argmax {oracle_score:.3}: gap closed {:.1}% (>= 20%); kl_coef 1e3 mean TV {tv:.4} (< 0.05) on {} probe states; reward reads {}",
            100.0 * closed,
            probe_data.len(),
            reads + reads_anchored
        ),
    });
}

fn sampling_consistency(world: &World, verdicts: &mut Vec<Verdict>) {
    let segments: Vec<String> = world.scenario().segments().map(str::to_owned).collect();
    let mut exact = 0.0;
    for seg in &segments {
        let mdp = enumerate_world_mdp(world, seg, DEFAULT_ORACLE_CAP).unwrap();
        let v = evaluate_policy(&mdp, 1.0, |s| {
            let allowed = &mdp.allowed[s];
            let k = allowed.count().max(1) as f64;
            (0..mdp.num_actions).map(|a| if allowed.contains(a) { 1.0 / k } else { 0.0 }).collect()
        })
        .unwrap();
        exact += v[mdp.start] / segments.len() as f64;
    }
    let n = 100_000usize;
    let returns: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut env = world.env(FeedbackMode::Sampled, derive_seed(SEED, &format!("mc/env/{i}")));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SEED, &format!("mc/agent/{i}")));
            let mut state = env.reset(&segments[i % segments.len()]).unwrap();
            let mut ret = 0.0;
            loop {
                let allowed: Vec<usize> = world.allowed(&state).unwrap().indices().collect();
                let a = allowed[rng.random_range(0..allowed.len())];
                let out = env.step(&state, a).unwrap();
                ret += out.reward;
                if out.done {
                    return ret;
                }
                state = out.next_state;
            }
        })
        .collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let z = (mean - exact) / se;
    verdicts.push(Verdict {
        id: 10,
        title: "sampling consistency",
        pass: z.abs() <= 3.0,
        detail: format!("random policy: MC {mean:.5} ± {se:.5} over 1e5 episodes vs exact {exact:.5}, |z| = {:.2} (<= 3)", z.abs()),
    });
}

fn ab_calibration(world: &World, artifact: &talktrack::policy::PolicyArtifact, tally: &Tally, verdicts: &mut Vec<Verdict>) {
    let mut contains = 0;
    for rep in 0..20u64 {
        let r = ab_compare(artifact, artifact, world, 500, derive_seed(SEED, &format!("ab/{rep}"))).unwrap();
        tally.add(1000, r.a.compliance_violations + r.b.compliance_violations);
        contains += usize::from(r.ci_low <= 0.0 && r.ci_high >= 0.0);
    }
    verdicts.push(Verdict {
        id: 11,
        title: "A/B calibration",
        pass: contains >= 19,
        detail: format!("{contains}/20 intervals for identical artifacts contain 0 (>= 19), 500 episodes per arm"),
    });
}

fn determinism(tally: &Tally, verdicts: &mut Vec<Verdict>) {
    let configs = [
        "seed = 11\nalgo = \"dqn\"\n[dqn]\nnum_episodes = 300\n",
        "seed = 11\nalgo = \"ppo\"\n[ppo]\nnum_iterations = 10\n",
    ];
    let mut identical = true;
    let mut files = 0;
    for text in configs {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = RunConfig::from_toml(text).unwrap();
            cfg.output_dir = dir.path().to_owned();
            let out = train(&cfg).unwrap();
            tally.add(out.summary.metrics_rows as u64, out.summary.compliance_violations);
            let world = cfg.world().unwrap();
            let eval = evaluate(&out.artifact, &world, 500, 3).unwrap();
            tally.add(500, eval.compliance_violations);
            outputs.push((
                std::fs::read(dir.path().join(METRICS_FILE)).unwrap(),
                out.summary.artifact_digest.clone(),
                serde_json::to_vec(&out.summary).unwrap(),
                serde_json::to_vec(&eval).unwrap(),
            ));
        }
        identical &= outputs[0] == outputs[1];
        files += 4;
    }
    verdicts.push(Verdict {
        id: 12,
        title: "run determinism",
        pass: identical,
        detail: format!("dqn and ppo runs repeated: {files} metrics/digest/summary/eval outputs byte-identical = {identical}"),
    });
}

fn main() {
    let audit = Arc::new(AuditLog::in_memory());
    let world = toyshop().with_audit(audit.clone());
    let tally = Tally::default();
    let mut verdicts = Vec::new();

    gradients(&mut verdicts);
    dqn_oracle(&world, &tally, &mut verdicts);
    let ppo_artifact = ppo_oracle(&world, &tally, &mut verdicts);
    gae(&mut verdicts);
    clip_law(&mut verdicts);
    aggregate_determinism(&world, &tally, &mut verdicts);
    reward_model_and_rlhf(&world, &tally, &mut verdicts);
    sampling_consistency(&world, &mut verdicts);
    ab_calibration(&world, &ppo_artifact, &tally, &mut verdicts);
    determinism(&tally, &mut verdicts);

    let episodes = tally.episodes.load(Ordering::Relaxed);
    let violations = tally.violations.load(Ordering::Relaxed);
    let blocks = audit.agent_blocks();
    verdicts.push(Verdict {
        id: 6,
        title: "compliance zero-violation",
        pass: episodes >= 10_000 && violations == 0 && blocks == 0,
        detail: format!("{episodes} agent episodes (>= 10000): {violations} executed violations, {blocks} agent blocks in the audit log"),
    });

    verdicts.sort_by_key(|v| v.id);
    println!();
    for v in &verdicts {
        println!("{} [{:>2}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.title, v.detail);
    }
    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", verdicts.len());
    } else {
        eprintln!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
