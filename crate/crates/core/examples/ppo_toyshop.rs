//! Train the clipped-surrogate actor-critic on the toy shop and compare its
//! greedy return with the exact optimum.
//!
//! ```text
//! cargo run --release -p talktrack --example ppo_toyshop -- [seed]
//! ```

use talktrack::mdp::OraclePolicy;
use talktrack::orchestrator::evaluate;
use talktrack::ppo::{run_ppo, PpoConfig};
use talktrack::world::{toyshop, EnvOptions};

fn main() -> talktrack::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let world = toyshop();
    let run = run_ppo(&world, &PpoConfig::default(), &EnvOptions::default(), seed)?;
    for m in run.metrics.iter().step_by(25) {
        println!(
            "iter {:>3}  return {:>6.3}  entropy {:.3}  l_clip {:>8.4}  value {:.4}",
            m.iteration, m.mean_return, m.entropy, m.l_clip, m.value_loss
        );
    }
    let report = evaluate(&run.artifact, &world, 5000, seed)?;
    let optimum = OraclePolicy::new(&world, 1.0)?.mean_start_value();
    println!(
        "greedy return {:.3} ± {:.3}, optimum {optimum:.3} ({:.1}%)",
        report.mean_return,
        report.return_std_error,
        100.0 * report.mean_return / optimum
    );
    Ok(())
}
