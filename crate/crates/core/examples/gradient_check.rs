//! Compare backpropagated gradients of a small tanh network against central
//! finite differences, then fit it to a toy regression with Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talktrack::nn::{Gradients, Mlp, Optimizer};

fn main() -> talktrack::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = Mlp::new(&[3, 8, 8, 2], &mut rng)?;
    let x = [0.3, -1.2, 0.7];
    let target = [0.5, -0.25];
    let loss = |net: &Mlp| -> f64 {
        let y = net.predict(&x).unwrap();
        y.iter().zip(&target).map(|(a, b)| 0.5 * (a - b).powi(2)).sum()
    };

    let (y, cache) = net.forward(&x)?;
    let residual: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
    let analytic = net.backward(&cache, &residual)?.flat();
    let params = net.params_flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        net.set_params_flat(&p)?;
        let up = loss(&net);
        p[i] -= 2.0 * h;
        net.set_params_flat(&p)?;
        let fd = (up - loss(&net)) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8));
    }
    net.set_params_flat(&params)?;
    println!("{} parameters, max relative error {worst:.2e}", params.len());

    // Fit y = (sin x0, x1 * x2) on random inputs.
    let data: Vec<([f64; 3], [f64; 2])> = (0..256)
        .map(|_| {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            (v, [v[0].sin(), v[1] * v[2]])
        })
        .collect();
    let mut opt = Optimizer::adam(1e-2);
    for epoch in 0..=300 {
        let mut grads = Gradients::zeros_like(&net);
        let mut total = 0.0;
        for (input, want) in &data {
            let (out, cache) = net.forward(input)?;
            let r: Vec<f64> = out.iter().zip(want).map(|(a, b)| (a - b) / data.len() as f64).collect();
            total += out.iter().zip(want).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>() / data.len() as f64;
            net.backward_into(&cache, &r, &mut grads)?;
        }
        opt.step(&mut net, &grads)?;
        if epoch % 50 == 0 {
            println!("epoch {epoch:>3}  mse/2 {total:.5}");
        }
    }
    Ok(())
}
