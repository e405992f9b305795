//! Work from conversation logs instead of the simulator: write logs from a
//! mediocre behaviour policy, ingest them, aggregate them into per-state
//! statistics and train a Q-network without any environment interaction.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talktrack::dqn::{log_transitions, run_dqn_offline, DqnConfig};
use talktrack::experience::{aggregate, ingest_dir, write_log};
use talktrack::mdp::OraclePolicy;
use talktrack::orchestrator::evaluate;
use talktrack::policy::FnPolicy;
use talktrack::world::toyshop;

fn main() -> talktrack::Result<()> {
    let world = toyshop();
    let dir = std::env::temp_dir().join("talktrack-offline-logs");
    std::fs::create_dir_all(&dir).map_err(|e| talktrack::Error::io(&dir, e))?;

    // Behaviour policy: the oracle half of the time, otherwise uniform.
    let oracle = OraclePolicy::new(&world, 0.95)?;
    let rng = Mutex::new(ChaCha8Rng::seed_from_u64(1));
    let behaviour = FnPolicy(|state: &_, allowed: &talktrack::dialogue::ActionMask| {
        let mut rng = rng.lock().unwrap();
        let choices: Vec<usize> = allowed.indices().collect();
        match oracle.action_for(state) {
            Some(a) if rng.random::<bool>() => a,
            _ => choices[rng.random_range(0..choices.len())],
        }
    });
    let episodes = world.simulate_logs(&behaviour, 3000, 1)?;
    write_log(dir.join("behaviour.jsonl"), &episodes)?;

    let report = ingest_dir(&dir)?;
    println!("ingested {} episodes, {} malformed lines", report.episodes.len(), report.errors.len());
    let episodes = report.into_strict()?;
    let table = aggregate(&episodes, None);
    println!("aggregate table: {} (state, action) cells", table.len());

    let transitions = log_transitions(&world, &episodes)?;
    let run = run_dqn_offline(&world, &DqnConfig::default(), transitions, 1)?;
    println!("offline training: {} env steps", run.env_counters.steps);

    let logged = episodes.iter().filter(|e| e.converted).count() as f64 / episodes.len() as f64;
    let learned = evaluate(&run.artifact, &world, 2000, 9)?;
    let best = evaluate(&oracle, &world, 2000, 9)?;
    println!(
        "conversion: logged {logged:.3}, learned greedy {:.3}, oracle {:.3}",
        learned.conversion_rate, best.conversion_rate
    );
    Ok(())
}
