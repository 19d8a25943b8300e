//! Straightforward double-precision forward pass and cross-entropy, written
//! independently of the library kernels, for gradient checks.

use std::collections::BTreeMap;

use cimnas_core::nn::{Layer, Network, Padding, ParamMap};

pub type Params64 = BTreeMap<String, Vec<f64>>;

pub fn to_f64(params: &ParamMap) -> Params64 {
    params
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Mean cross-entropy over the batch, plus the sign pattern of every ReLU
/// input (used to detect finite differences that straddle a kink).
pub fn loss(net: &Network, params: &Params64, x: &[f64], batch: usize, labels: &[usize]) -> (f64, Vec<bool>) {
    let mut shape = net.input_shape().to_vec();
    let per: usize = shape.iter().product();
    let mut signs = Vec::new();
    let mut total = 0.0;
    for n in 0..batch {
        shape = net.input_shape().to_vec();
        let mut cur: Vec<f64> = x[n * per..(n + 1) * per].to_vec();
        for layer in net.layers() {
            match layer {
                Layer::Conv2d {
                    name,
                    out_channels,
                    kernel,
                    padding,
                    ..
                } => {
                    let (c_in, h, w) = (shape[0], shape[1], shape[2]);
                    let k = *kernel;
                    let pad = if *padding == Padding::Same { k / 2 } else { 0 };
                    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
                    let wt = &params[&format!("{name}.weight")];
                    let b = &params[&format!("{name}.bias")];
                    let mut out = vec![0.0; out_channels * oh * ow];
                    for o in 0..*out_channels {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut s = b[o];
                                for c in 0..c_in {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = y as isize + ky as isize - pad as isize;
                                            let ix = xx as isize + kx as isize - pad as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            s += wt[((o * c_in + c) * k + ky) * k + kx]
                                                * cur[(c * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                                out[(o * oh + y) * ow + xx] = s;
                            }
                        }
                    }
                    cur = out;
                    shape = vec![*out_channels, oh, ow];
                }
                Layer::Dense {
                    name,
                    in_features,
                    out_features,
                    ..
                } => {
                    let wt = &params[&format!("{name}.weight")];
                    let b = &params[&format!("{name}.bias")];
                    cur = (0..*out_features)
                        .map(|o| b[o] + (0..*in_features).map(|i| wt[o * in_features + i] * cur[i]).sum::<f64>())
                        .collect();
                    shape = vec![*out_features];
                }
                Layer::Relu => {
                    signs.extend(cur.iter().map(|&v| v > 0.0));
                    cur = cur.iter().map(|&v| v.max(0.0)).collect();
                }
                Layer::Sigmoid => cur = cur.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                Layer::Flatten => shape = vec![cur.len()],
                Layer::Quantize { .. } => panic!("reference has no quantizer"),
            }
        }
        let m = cur.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + cur.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        total += lse - cur[labels[n]];
    }
    (total / batch as f64, signs)
}
