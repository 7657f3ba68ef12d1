//! Backprop against central finite differences on tiny networks.
//!
//! The loss is only piecewise smooth (ReLU, max-pool). A central difference
//! whose `±h` probes land in different linear pieces measures a chord across
//! a kink, not the derivative, so for those parameters the step is shrunk
//! until both probes share the unperturbed activation pattern.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitlens::nn::{build_network, Arch, Network};

const STEP: f64 = 1e-3;
const TOLERANCE: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn batch(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * 784).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..10u8)).collect();
    (x, y)
}

fn loss(net: &Network<f64>, x: &[f64], y: &[u8]) -> f64 {
    net.loss_and_gradients(x, y).unwrap().0
}

fn param(net: &mut Network<f64>, layer: usize, bias: bool, i: usize) -> &mut f64 {
    if bias {
        &mut net.params[layer].bias[i]
    } else {
        &mut net.params[layer].weight[i]
    }
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub params: usize,
    pub kink_adjusted: usize,
}

pub fn gradient_check(seed: u64) -> GradCheck {
    let net = build_network::<f64>(Arch::tiny(2, 8), seed);
    let (x, y) = batch(seed + 1000, 2);
    let (_, grads) = net.loss_and_gradients(&x, &y).unwrap();
    let base = net.activation_pattern(&x).unwrap();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        params: 0,
        kink_adjusted: 0,
    };
    for layer in 0..6 {
        for bias in [false, true] {
            let len = if bias { net.params[layer].bias.len() } else { net.params[layer].weight.len() };
            for i in 0..len {
                let g = if bias { grads[layer].bias[i] } else { grads[layer].weight[i] };
                let mut h = STEP;
                let fd = loop {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    *param(&mut plus, layer, bias, i) += h;
                    *param(&mut minus, layer, bias, i) -= h;
                    let smooth = plus.activation_pattern(&x).unwrap() == base
                        && minus.activation_pattern(&x).unwrap() == base;
                    if smooth || h < 1e-8 {
                        break (loss(&plus, &x, &y) - loss(&minus, &x, &y)) / (2.0 * h);
                    }
                    h *= 0.1;
                };
                if h < STEP {
                    out.kink_adjusted += 1;
                }
                out.params += 1;
                out.max_rel_err = out.max_rel_err.max(rel_err(g, fd));
            }
        }
    }
    out
}

#[test]
fn backprop_matches_finite_differences() {
    for seed in 0..5 {
        let r = gradient_check(seed);
        println!(
            "seed {seed}: {} params, {} kink-adjusted, max rel err {:.3e}",
            r.params, r.kink_adjusted, r.max_rel_err
        );
        assert!(r.max_rel_err < TOLERANCE, "seed {seed}: max relative error {:e}", r.max_rel_err);
    }
}
