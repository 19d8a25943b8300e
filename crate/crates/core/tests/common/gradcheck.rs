//! Finite-difference probes of the library's analytic gradients against the
//! double-precision reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cimnas_core::nn::{Layer, Network, Padding, ParamMap};
use cimnas_core::Tensor;

use super::reference::{loss, to_f64};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;

#[derive(Debug, Default)]
pub struct ProbeSummary {
    pub probes: usize,
    pub failures: usize,
    pub worst_relative_error: f64,
    /// Probes per parameter tensor (input probes under "input").
    pub per_tensor: std::collections::BTreeMap<String, usize>,
    pub kinks_skipped: usize,
}

/// Conv (same) -> ReLU -> conv (valid) -> sigmoid -> flatten -> dense -> ReLU -> dense -> CE.
pub fn probe_network() -> Network {
    Network::new(
        vec![2, 5, 5],
        vec![
            Layer::Conv2d {
                name: "c1".into(),
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                padding: Padding::Same,
                quant: None,
            },
            Layer::Relu,
            Layer::Conv2d {
                name: "c2".into(),
                in_channels: 3,
                out_channels: 2,
                kernel: 3,
                padding: Padding::Valid,
                quant: None,
            },
            Layer::Sigmoid,
            Layer::Flatten,
            Layer::Dense {
                name: "d1".into(),
                in_features: 18,
                out_features: 6,
                quant: None,
            },
            Layer::Relu,
            Layer::Dense {
                name: "d2".into(),
                in_features: 6,
                out_features: 4,
                quant: None,
            },
        ],
    )
    .unwrap()
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Runs `n` probes on random parameters and inputs drawn from `seed`. Each
/// probe picks a parameter element (or, every fifth probe, an input element)
/// and compares the analytic gradient with a central difference of the
/// reference loss. Probes whose difference crosses a ReLU kink are redrawn.
pub fn run_probes(seed: u64, n: usize) -> ProbeSummary {
    let net = probe_network();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    for (name, shape) in net.param_shapes() {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-0.6f32..0.6)).collect();
        params.insert(name, Tensor::new(shape, data).unwrap());
    }
    let batch = 3;
    let x: Vec<f32> = (0..batch * 50).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..4)).collect();
    let xt = Tensor::new(vec![batch, 2, 5, 5], x.clone()).unwrap();
    let tape = net.forward_tape(&params, &xt).unwrap();
    let l = tape.cross_entropy(&labels).unwrap();
    let (grads, dx) = net.backward_with_input_grad(&tape, &l).unwrap();

    let p64 = to_f64(&params);
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut s = ProbeSummary::default();
    while s.probes < n {
        let on_input = s.probes % 5 == 4;
        let (key, idx) = if on_input {
            ("input".to_string(), rng.random_range(0..x64.len()))
        } else {
            let name = names[rng.random_range(0..names.len())].clone();
            let len = p64[&name].len();
            (name, rng.random_range(0..len))
        };
        let eval = |delta: f64| {
            let (mut p, mut xi) = (p64.clone(), x64.clone());
            if on_input {
                xi[idx] += delta;
            } else {
                p.get_mut(&key).unwrap()[idx] += delta;
            }
            loss(&net, &p, &xi, batch, &labels)
        };
        let ((up, s_up), (down, s_down)) = (eval(STEP), eval(-STEP));
        if s_up != s_down {
            s.kinks_skipped += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * STEP);
        let analytic = if on_input {
            dx.data()[idx]
        } else {
            grads.get(&key).unwrap().data()[idx]
        } as f64;
        let err = relative_error(analytic, fd);
        s.worst_relative_error = s.worst_relative_error.max(err);
        if err > TOLERANCE {
            s.failures += 1;
        }
        *s.per_tensor.entry(key).or_default() += 1;
        s.probes += 1;
    }
    s
}
