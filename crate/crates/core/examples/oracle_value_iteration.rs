//! Enumerate the toy shop as an explicit MDP, solve it by value iteration
//! and print the optimal talk track for each customer segment.

use talktrack::mdp::{enumerate_world_mdp, value_iteration, DEFAULT_ORACLE_CAP};
use talktrack::world::toyshop;

fn main() -> talktrack::Result<()> {
    let world = toyshop();
    let scenario = world.scenario();
    for segment in scenario.segments() {
        let mdp = enumerate_world_mdp(&world, segment, DEFAULT_ORACLE_CAP)?;
        let vi = value_iteration(&mdp, 1.0, 1e-12)?;
        println!(
            "{segment}: {} reachable states, start value {:.3} after {} sweeps",
            mdp.reachable().len(),
            vi.v[mdp.start],
            vi.iterations
        );
        // Follow the most likely transition from the start to show the
        // modal optimal conversation.
        let mut s = mdp.start;
        while let (Some(a), Some((phase, turn))) = (vi.policy[s], mdp.phase_turn(s)) {
            println!(
                "  turn {turn} in {:<12} say {:<18} (Q = {:.3})",
                scenario.phase_key(phase),
                world.catalog().get(a).map_or("?", |u| u.id.as_str()),
                vi.q[s][a]
            );
            let Some(&(next, _)) = mdp.transitions[s][a].iter().max_by(|x, y| x.1.total_cmp(&y.1)) else {
                break;
            };
            s = next;
        }
    }
    Ok(())
}
