use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talktrack::nn::Mlp;
use talktrack::ppo::{collect_rollout, compute_gae, ppo_networks, ppo_objective, PpoConfig, RolloutBatch};
use talktrack::world::{toyshop, EnvOptions};

fn setup() -> (Mlp, Mlp, RolloutBatch, Vec<f64>, Vec<f64>) {
    let world = toyshop();
    let (old_policy, value) = ppo_networks(&world, &[8], 11).unwrap();
    let mut env = world.make_env(&EnvOptions::default(), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = collect_rollout(&old_policy, &value, &world, &mut env, 6, 0, &mut rng).unwrap();
    let (adv, ret) = compute_gae(&batch.rewards(), &batch.values(), &batch.dones(), 0.95, 0.9).unwrap();
    // Evaluate away from ratio = 1 so both branches of the clip get exercised.
    let (policy, _) = ppo_networks(&world, &[8], 12).unwrap();
    (policy, value, batch, adv, ret)
}

fn loss(policy: &Mlp, value: &Mlp, batch: &RolloutBatch, adv: &[f64], ret: &[f64], cfg: &PpoConfig) -> f64 {
    let idx: Vec<usize> = (0..batch.len()).collect();
    -ppo_objective(policy, value, batch, adv, ret, &idx, cfg).unwrap().0.objective(cfg)
}

fn check(cfg: &PpoConfig) {
    let (policy, value, batch, adv, ret) = setup();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, pg, vg) = ppo_objective(&policy, &value, &batch, &adv, &ret, &idx, cfg).unwrap();
    let h = 1e-6;
    for (net_is_policy, analytic) in [(true, pg.flat()), (false, vg.flat())] {
        let base = if net_is_policy { policy.params_flat() } else { value.params_flat() };
        for k in (0..base.len()).step_by(7) {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[k] += delta;
                let (mut pol, mut val) = (policy.clone(), value.clone());
                if net_is_policy {
                    pol.set_params_flat(&p).unwrap();
                } else {
                    val.set_params_flat(&p).unwrap();
                }
                loss(&pol, &val, &batch, &adv, &ret, cfg)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (numeric - analytic[k]).abs() < 1e-6 * (1.0 + numeric.abs()),
                "param {k} (policy={net_is_policy}): numeric {numeric} analytic {}",
                analytic[k]
            );
        }
    }
}

#[test]
fn ppo_loss_gradient_matches_finite_differences() {
    check(&PpoConfig::default());
}

#[test]
fn ppo_gradient_with_flipped_entropy_sign() {
    check(&PpoConfig { penalize_entropy: true, entropy_coef: 0.3, ..PpoConfig::default() });
}
