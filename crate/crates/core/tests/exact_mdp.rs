use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talktrack::mdp::{enumerate_world_mdp, evaluate_policy, value_iteration, ExplicitMdp, OraclePolicy, DEFAULT_ORACLE_CAP};
use talktrack::orchestrator::evaluate;
use talktrack::world::toyshop;

/// Finite-horizon expectimax by plain recursion over the explicit model.
fn expectimax(mdp: &ExplicitMdp, s: usize) -> f64 {
    let best = mdp.allowed[s]
        .indices()
        .map(|a| mdp.rewards[s][a] + mdp.transitions[s][a].iter().map(|&(n, p)| p * expectimax(mdp, n)).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

#[test]
fn value_iteration_matches_expectimax() {
    let world = toyshop();
    for seg in world.scenario().segments() {
        let mdp = enumerate_world_mdp(&world, seg, DEFAULT_ORACLE_CAP).unwrap();
        let vi = value_iteration(&mdp, 1.0, 1e-12).unwrap();
        for s in mdp.reachable() {
            assert!((vi.v[s] - expectimax(&mdp, s)).abs() < 1e-9, "{seg} state {s}");
        }
    }
}

#[test]
fn toyshop_optimum_is_frozen() {
    let oracle = OraclePolicy::new(&toyshop(), 1.0).unwrap();
    assert!((oracle.start_value("retail").unwrap() - 1.0).abs() < 1e-9);
    assert!((oracle.start_value("wholesale").unwrap() - 0.95).abs() < 1e-9);
    assert!((oracle.mean_start_value() - 0.975).abs() < 1e-9);
}

#[test]
fn transition_rows_are_distributions() {
    let world = toyshop();
    for seg in world.scenario().segments() {
        let mdp = enumerate_world_mdp(&world, seg, DEFAULT_ORACLE_CAP).unwrap();
        for s in 0..mdp.num_states() {
            for a in mdp.allowed[s].indices() {
                let total: f64 = mdp.transitions[s][a].iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn oracle_policy_return_matches_simulation() {
    let world = toyshop();
    let oracle = OraclePolicy::new(&world, 1.0).unwrap();
    let report = evaluate(&oracle, &world, 20_000, 17).unwrap();
    let z = (report.mean_return - oracle.mean_start_value()) / report.return_std_error;
    assert!(z.abs() < 4.0, "MC {} vs exact {}", report.mean_return, oracle.mean_start_value());
}

#[test]
fn policy_evaluation_is_linear_in_mixtures() {
    let world = toyshop();
    let mdp = enumerate_world_mdp(&world, "retail", DEFAULT_ORACLE_CAP).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let weights: Vec<Vec<f64>> = (0..mdp.num_states())
        .map(|s| {
            let w: Vec<f64> = (0..mdp.num_actions)
                .map(|a| if mdp.allowed[s].contains(a) { rng.random::<f64>() } else { 0.0 })
                .collect();
            let sum: f64 = w.iter().sum();
            w.iter().map(|x| if sum > 0.0 { x / sum } else { 0.0 }).collect()
        })
        .collect();
    let v = evaluate_policy(&mdp, 1.0, |s| weights[s].clone()).unwrap();
    for s in mdp.reachable() {
        let backup: f64 = mdp.allowed[s]
            .indices()
            .map(|a| weights[s][a] * (mdp.rewards[s][a] + mdp.transitions[s][a].iter().map(|&(n, p)| p * v[n]).sum::<f64>()))
            .sum();
        assert!((v[s] - backup).abs() < 1e-9);
    }
}
