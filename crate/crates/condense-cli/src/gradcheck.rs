//! Finite-difference gradient check over randomized small networks, the
//! CLI-facing version of the property suite.

use condense_core::error::Result;
use condense_core::grad::{ConvKernel, PlaneMap, TrainLayer, TrainNet};
use condense_core::harness::finite_diff_grad;
use condense_core::layers::{PoolOp, XPoolParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_net(rng: &mut ChaCha8Rng, in_channels: usize, op: PoolOp) -> TrainNet {
    let alpha = [2usize, 4][rng.gen_range(0..2)];
    let mid = rng.gen_range(1..=2);
    let k1 = [1usize, 3][rng.gen_range(0..2)];
    let k2 = [1usize, 3][rng.gen_range(0..2)];
    let mut conv1 = ConvKernel::new(mid * alpha, in_channels, k1).expect("valid kernel");
    for w in conv1.weights.iter_mut() {
        *w = rng.gen_range(-0.7..0.7);
    }
    for b in conv1.bias.iter_mut() {
        *b = rng.gen_range(-0.2..0.2);
    }
    let mut conv2 = ConvKernel::new(1, mid, k2).expect("valid kernel");
    for w in conv2.weights.iter_mut() {
        *w = rng.gen_range(-0.7..0.7);
    }
    TrainNet {
        layers: vec![
            TrainLayer::Conv(conv1),
            TrainLayer::Act { slope: 0.1 },
            TrainLayer::XPool(XPoolParams::new(alpha, op)),
            TrainLayer::Conv(conv2),
        ],
    }
}

fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Run `cases` seeded shapes; returns the worst relative error observed.
pub fn run(seed: u64, cases: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case));
        let op = match case % 3 {
            0 => PoolOp::Max,
            1 => PoolOp::Avg,
            _ => PoolOp::Min,
        };
        let in_channels = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
        let net = random_net(&mut rng, in_channels, op);
        // Coarse grid plus fine jitter keeps every argmax unique.
        let inputs: Vec<PlaneMap> = (0..2)
            .map(|_| {
                let mut m = PlaneMap::zeros(in_channels, h, w);
                for v in m.data.iter_mut() {
                    *v = rng.gen_range(-8i32..8) as f64 * 0.25 + rng.gen_range(-1e-3..1e-3);
                }
                m
            })
            .collect();
        let targets: Vec<PlaneMap> = inputs
            .iter()
            .map(|x| {
                let mut t = net.forward(x)?;
                for v in t.data.iter_mut() {
                    *v += rng.gen_range(-0.5..0.5);
                }
                Ok(t)
            })
            .collect::<Result<_>>()?;

        let (analytic, _) = net.mse_grads(&inputs, &targets)?;
        let flat: Vec<f64> = (0..net.param_count()).map(|i| net.get_param(i)).collect();
        let numeric = finite_diff_grad(
            |p| {
                let mut probe = net.clone();
                for (i, v) in p.iter().enumerate() {
                    probe.set_param(i, *v);
                }
                probe.mse(&inputs, &targets).expect("forward evaluates")
            },
            &flat,
            1e-4,
        )?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(grad_error(*a, *n));
        }
    }
    Ok(worst)
}
