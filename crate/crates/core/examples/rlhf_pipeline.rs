//! The preference pipeline end to end on synthetic data: clone an expert,
//! learn a reward model from noisy pairwise labels drawn from a hidden
//! utility, then fine-tune the cloned policy against the learned reward.

use talktrack::mdp::OraclePolicy;
use talktrack::policy::POLICY_NET;
use talktrack::rlhf::{
    expert_dialogues, policy_distribution, policy_states, reward_model_train, rlhf_finetune, sft_train,
    synthesize_preferences, PlantedUtility, RewardModelConfig, RlhfConfig, SftConfig,
};
use talktrack::world::{toyshop, EnvOptions};

fn main() -> talktrack::Result<()> {
    let seed = 3;
    let world = toyshop();
    let (dim, na) = (world.encoder().dimension, world.num_actions());

    let oracle = OraclePolicy::new(&world, 0.95)?;
    let demos = expert_dialogues(&world, &oracle, 200, 0.3, seed)?;
    let (base, sft) = sft_train(&demos, &world, &SftConfig::default(), seed)?;
    println!("behaviour cloning: {} dialogues, final loss {:.4}", demos.len(), sft.losses.last().unwrap_or(&f64::NAN));

    let hidden = PlantedUtility::random(dim, na, seed);
    let prefs = synthesize_preferences(&world, &hidden, 5000, 0.1, 0.5, seed)?;
    let (reward, report) = reward_model_train(&prefs, dim, na, &RewardModelConfig::default(), seed)?;
    println!(
        "reward model: {} train / {} held out, held-out label accuracy {:.3}",
        report.train_records,
        report.held_out_records,
        report.held_out_accuracy.unwrap_or(f64::NAN)
    );

    let run = rlhf_finetune(&base, &reward, &world, &RlhfConfig::default(), &EnvOptions::default(), seed)?;
    for m in run.metrics.iter().step_by(20) {
        println!(
            "iter {:>3}  reward score {:>7.3}  kl penalty {:.4}  entropy {:.3}",
            m.iteration, m.mean_reward_score, m.mean_kl_penalty, m.entropy
        );
    }

    let before = base.network(POLICY_NET).unwrap();
    let after = run.artifact.network(POLICY_NET).unwrap();
    let states = policy_states(&world, before, 200, seed)?;
    let mean_score = |net| -> talktrack::Result<f64> {
        let mut total = 0.0;
        for s in &states {
            let enc = world.encode(s)?.values;
            let p = policy_distribution(net, &enc, &world.allowed(s)?)?;
            total += p.iter().zip(reward.scores(&enc)?).map(|(p, r)| p * r).sum::<f64>();
        }
        Ok(total / states.len() as f64)
    };
    println!(
        "expected reward-model score on {} states: cloned {:.3}, fine-tuned {:.3}",
        states.len(),
        mean_score(before)?,
        mean_score(after)?
    );
    println!("environment reward reads during fine-tuning: {}", run.env_counters.reward_reads);
    Ok(())
}
