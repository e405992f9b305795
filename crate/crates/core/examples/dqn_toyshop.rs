//! Train a DQN agent on the bundled toy-shop scenario and compare its greedy
//! policy with the exact optimum from value iteration.
//!
//! ```text
//! cargo run --release -p talktrack --example dqn_toyshop -- [seed]
//! ```

use std::time::Instant;

use talktrack::dqn::{run_dqn, DqnConfig};
use talktrack::mdp::oracle_agreement;
use talktrack::world::{toyshop, EnvOptions};

fn main() -> talktrack::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let world = toyshop();
    let cfg = DqnConfig::default();
    let started = Instant::now();
    let run = run_dqn(&world, &cfg, &EnvOptions::default(), seed)?;
    let elapsed = started.elapsed();

    let last = &run.metrics[run.metrics.len().saturating_sub(200)..];
    let mean_return = last.iter().map(|m| m.episode_return).sum::<f64>() / last.len().max(1) as f64;
    println!(
        "{} episodes, {} env steps in {:.1?}; mean return over the last {} episodes: {mean_return:.3}",
        run.metrics.len(),
        run.env_counters.steps,
        elapsed,
        last.len()
    );

    let agreement = oracle_agreement(&world, &run.artifact, cfg.gamma, 1e-9)?;
    println!(
        "greedy policy is optimal in {}/{} reachable states ({:.1}%)",
        agreement.matched,
        agreement.states,
        100.0 * agreement.fraction()
    );
    for (segment, state, chosen, optimal) in &agreement.mismatches {
        println!("  {segment} {state}: chose {chosen}, optimal {optimal:?}");
    }
    println!("compliance substitutions: {}", run.compliance_violations);
    Ok(())
}
