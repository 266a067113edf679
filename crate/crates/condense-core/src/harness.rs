//! Randomized-case generation and the independent oracles backing the
//! property suites.
//!
//! The oracles here deliberately re-implement convolution and cross-channel
//! reduction over plain nested vectors, with different loop nests than the
//! engine kernels, so an implementation bug cannot hide in shared code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::PlaneMap;
use crate::layers::{ConvParams, PoolOp, SPoolParams, XPoolParams};
use crate::netdef::{
    init_random_weights, ConvLayerSpec, LayerSpec, NetworkDef, QuantScheme, WeightStore,
};
use crate::quant::ActQuantizer;
use crate::tensor::{BitWidth, Tensor};

/// Shape of the randomized-network space a property suite draws from.
#[derive(Debug, Clone)]
pub struct CaseSpec {
    pub seed: u64,
    /// Conv-layer depth range (inclusive).
    pub min_convs: usize,
    pub max_convs: usize,
    /// Stored output channels per conv layer (inclusive).
    pub max_stored_channels: usize,
    /// Input spatial extent range (inclusive).
    pub min_hw: usize,
    pub max_hw: usize,
    pub alphas: Vec<usize>,
    pub ops: Vec<PoolOp>,
    pub schemes: Vec<QuantScheme>,
    /// Probability of a spatial pooling layer after each conv.
    pub spool_prob: f64,
}

impl Default for CaseSpec {
    fn default() -> Self {
        CaseSpec {
            seed: 0,
            min_convs: 1,
            max_convs: 4,
            max_stored_channels: 4,
            min_hw: 5,
            max_hw: 24,
            alphas: vec![1, 2, 4],
            ops: vec![PoolOp::Max, PoolOp::Avg, PoolOp::Min],
            schemes: vec![QuantScheme::W1A2, QuantScheme::Full32],
            spool_prob: 0.3,
        }
    }
}

/// One generated case: a valid network, matching seeded weights, and an
/// input tensor.
#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub net: NetworkDef,
    pub store: WeightStore,
    pub input: Tensor,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// Deterministically generate case `index` from the given [`CaseSpec`].
/// Generated networks satisfy every chaining invariant by construction and
/// stay small enough that oracle runs finish well under a second.
pub fn gen_network(spec: &CaseSpec, index: u64) -> GeneratedCase {
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let scheme = *pick(&mut rng, &spec.schemes);
    let input_bits = match scheme {
        QuantScheme::W1A2 => *pick(&mut rng, &[BitWidth::B8, BitWidth::B2]),
        QuantScheme::Full32 => *pick(&mut rng, &[BitWidth::B32, BitWidth::B8]),
    };
    let mut h = rng.gen_range(spec.min_hw..=spec.max_hw);
    let mut w = rng.gen_range(spec.min_hw..=spec.max_hw);
    let input_c = rng.gen_range(1..=3);
    let input_h = h;
    let input_w = w;

    let n_convs = rng.gen_range(spec.min_convs..=spec.max_convs);
    let mut layers = Vec::new();
    let mut c = input_c;
    for i in 0..n_convs {
        let alpha = *pick(&mut rng, &spec.alphas);
        let stored = rng.gen_range(1..=spec.max_stored_channels);
        let kernel = *pick(&mut rng, &[1usize, 3, 5]);
        let act = match scheme {
            QuantScheme::W1A2 => {
                ActQuantizer::Hwgq2 { delta: *pick(&mut rng, &[0.25f32, 0.5, 1.0]) }
            }
            QuantScheme::Full32 => *pick(
                &mut rng,
                &[
                    ActQuantizer::LeakyRelu { slope: 0.1 },
                    ActQuantizer::LeakyRelu { slope: 0.0 },
                    ActQuantizer::Identity,
                    // Quantizing activations inside a full-precision net are
                    // legal; the stored sets then hold code values as f32.
                    ActQuantizer::Hwgq2 { delta: 0.5 },
                ],
            ),
        };
        layers.push(LayerSpec::Conv(ConvLayerSpec {
            conv: ConvParams::new(stored * alpha, c, kernel).expect("kernel from valid set"),
            xpool: XPoolParams::new(alpha, *pick(&mut rng, &spec.ops)),
            act,
            bias: rng.gen_bool(0.5),
        }));
        c = stored;
        if i + 1 < n_convs && h >= 4 && w >= 4 && rng.gen_bool(spec.spool_prob) {
            let stride = if rng.gen_bool(0.7) { 2 } else { 1 };
            layers.push(LayerSpec::SPool(SPoolParams::new(stride).expect("stride valid")));
            if stride == 2 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
    }
    let net = NetworkDef { input_h, input_w, input_c, input_bits, scheme, layers };
    let store = init_random_weights(&net, rng.gen()).expect("random weights never all-zero");
    let input = random_input(&net, rng.gen());
    GeneratedCase { net, store, input }
}

/// Seeded random input tensor matching a network's input specification.
pub fn random_input(net: &NetworkDef, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(net.input_h, net.input_w, net.input_c, net.input_bits);
    let narrow = t.natural_narrowing();
    for c in 0..net.input_c {
        for y in 0..net.input_h {
            for x in 0..net.input_w {
                let v = match net.input_bits {
                    BitWidth::B2 => rng.gen_range(0..4) as f32,
                    BitWidth::B8 => rng.gen_range(0..256) as f32,
                    BitWidth::B32 => rng.gen_range(-1.0f32..1.0),
                };
                t.set(c, y, x, v, narrow);
            }
        }
    }
    t
}

/// Plain nested-vector image: `planes[channel][row][col]`.
pub type Planes = Vec<Vec<Vec<f64>>>;

/// Widen a tensor into nested vectors for oracle arithmetic.
pub fn tensor_to_planes(t: &Tensor) -> Planes {
    (0..t.channels())
        .map(|c| {
            (0..t.height())
                .map(|y| (0..t.width()).map(|x| t.get(c, y, x) as f64).collect())
                .collect()
        })
        .collect()
}

/// Dense map to nested vectors.
pub fn planemap_to_planes(m: &PlaneMap) -> Planes {
    (0..m.channels)
        .map(|c| {
            (0..m.height)
                .map(|y| (0..m.width).map(|x| m.get(c, y, x)).collect())
                .collect()
        })
        .collect()
}

/// Independent same-size convolution: nested vectors, kernel-major loop nest
/// (kernel row, kernel column, then input channel), zero padding.
pub fn oracle_conv(
    input: &Planes,
    weights: &[f64],
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    bias: Option<&[f64]>,
) -> Planes {
    let h = input[0].len();
    let w = input[0][0].len();
    let pad = (kernel - 1) / 2;
    let mut out = vec![vec![vec![0.0; w]; h]; out_channels];
    for (oc, plane) in out.iter_mut().enumerate() {
        for u in 0..kernel {
            for v in 0..kernel {
                for n in 0..in_channels {
                    let wv = weights[((oc * in_channels + n) * kernel + u) * kernel + v];
                    for (y, row) in plane.iter_mut().enumerate() {
                        let iy = y + u;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        for (x, slot) in row.iter_mut().enumerate() {
                            let ix = x + v;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            *slot += wv * input[n][iy - pad][ix - pad];
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            for row in plane.iter_mut() {
                for slot in row.iter_mut() {
                    *slot += b[oc];
                }
            }
        }
    }
    out
}

/// Independent dense cross-channel reduction with first-winner tie handling.
pub fn oracle_xpool(input: &Planes, alpha: usize, op: PoolOp) -> Planes {
    let channels = input.len();
    assert_eq!(channels % alpha, 0);
    let h = input[0].len();
    let w = input[0][0].len();
    (0..channels / alpha)
        .map(|j| {
            (0..h)
                .map(|y| {
                    (0..w)
                        .map(|x| {
                            let window: Vec<f64> =
                                (0..alpha).map(|t| input[j * alpha + t][y][x]).collect();
                            match op {
                                PoolOp::Max => window
                                    .iter()
                                    .copied()
                                    .reduce(|a, b| if b > a { b } else { a })
                                    .unwrap(),
                                PoolOp::Min => window
                                    .iter()
                                    .copied()
                                    .reduce(|a, b| if b < a { b } else { a })
                                    .unwrap(),
                                PoolOp::Avg => {
                                    window.iter().sum::<f64>() / alpha as f64
                                }
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Central-difference gradient estimate of `f` at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteInput { value: if up.is_finite() { down } else { up } });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
