//! Convolution and dense kernels over raw slices.
//!
//! Storage is `f32`; every reduction accumulates in `f64` and rounds once on
//! the way out.

/// Geometry of a stride-1, square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Output rows (or columns) `[lo, hi)` whose tap at kernel offset `k`
    /// lands inside an input extent of `len`.
    fn span(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k);
        let hi = (len + self.pad).saturating_sub(k).min(out_len);
        (lo, hi.max(lo))
    }

    fn weight_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_channels + ic) * self.kernel + ky) * self.kernel + kx
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, batch: usize, input: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut acc = vec![0f64; g.out_plane()];
    for b in 0..batch {
        let xb = &input[b * g.in_channels * g.in_plane()..(b + 1) * g.in_channels * g.in_plane()];
        for oc in 0..g.out_channels {
            acc.fill(bias[oc] as f64);
            for ic in 0..g.in_channels {
                let plane = &xb[ic * g.in_plane()..(ic + 1) * g.in_plane()];
                for ky in 0..g.kernel {
                    let (y0, y1) = g.span(ky, g.height, oh);
                    for kx in 0..g.kernel {
                        let (x0, x1) = g.span(kx, g.width, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = weight[g.weight_index(oc, ic, ky, kx)] as f64;
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let src = &plane[iy * g.width + x0 + kx - g.pad..iy * g.width + x1 + kx - g.pad];
                            let dst = &mut acc[y * ow + x0..y * ow + x1];
                            for (a, &v) in dst.iter_mut().zip(src) {
                                *a += wv * v as f64;
                            }
                        }
                    }
                }
            }
            let o = &mut out[(b * g.out_channels + oc) * g.out_plane()..][..g.out_plane()];
            for (dst, &a) in o.iter_mut().zip(&acc) {
                *dst = a as f32;
            }
        }
    }
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f32],
    weight: &[f32],
    d_out: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut dw = vec![0f64; weight.len()];
    let mut db = vec![0f64; g.out_channels];
    let mut dx = vec![0f32; input.len()];
    let mut dx_acc = vec![0f64; g.in_channels * g.in_plane()];
    for b in 0..batch {
        let xb = &input[b * g.in_channels * g.in_plane()..(b + 1) * g.in_channels * g.in_plane()];
        dx_acc.fill(0.0);
        for oc in 0..g.out_channels {
            let gout = &d_out[(b * g.out_channels + oc) * g.out_plane()..][..g.out_plane()];
            db[oc] += gout.iter().map(|&v| v as f64).sum::<f64>();
            for ic in 0..g.in_channels {
                let plane = &xb[ic * g.in_plane()..(ic + 1) * g.in_plane()];
                let dplane = &mut dx_acc[ic * g.in_plane()..(ic + 1) * g.in_plane()];
                for ky in 0..g.kernel {
                    let (y0, y1) = g.span(ky, g.height, oh);
                    for kx in 0..g.kernel {
                        let (x0, x1) = g.span(kx, g.width, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wi = g.weight_index(oc, ic, ky, kx);
                        let wv = weight[wi] as f64;
                        let mut gw = 0f64;
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let start = iy * g.width + x0 + kx - g.pad;
                            let len = x1 - x0;
                            let grow = &gout[y * ow + x0..y * ow + x1];
                            let xrow = &plane[start..start + len];
                            let drow = &mut dplane[start..start + len];
                            for ((d, &x), &go) in drow.iter_mut().zip(xrow).zip(grow) {
                                let go = go as f64;
                                gw += go * x as f64;
                                *d += wv * go;
                            }
                        }
                        dw[wi] += gw;
                    }
                }
            }
        }
        let dst = &mut dx[b * g.in_channels * g.in_plane()..(b + 1) * g.in_channels * g.in_plane()];
        for (d, &a) in dst.iter_mut().zip(&dx_acc) {
            *d = a as f32;
        }
    }
    (
        dx,
        dw.into_iter().map(|v| v as f32).collect(),
        db.into_iter().map(|v| v as f32).collect(),
    )
}

/// `out[n, o] = bias[o] + sum_i weight[o, i] * input[n, i]`.
pub(crate) fn dense_forward(
    batch: usize,
    in_features: usize,
    out_features: usize,
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    out: &mut [f32],
) {
    for b in 0..batch {
        let x = &input[b * in_features..(b + 1) * in_features];
        for o in 0..out_features {
            let w = &weight[o * in_features..(o + 1) * in_features];
            let dot: f64 = w.iter().zip(x).map(|(&a, &v)| a as f64 * v as f64).sum();
            out[b * out_features + o] = (bias[o] as f64 + dot) as f32;
        }
    }
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn dense_backward(
    batch: usize,
    in_features: usize,
    out_features: usize,
    input: &[f32],
    weight: &[f32],
    d_out: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dw = vec![0f64; weight.len()];
    let mut db = vec![0f64; out_features];
    let mut dx = vec![0f32; input.len()];
    let mut dx_acc = vec![0f64; in_features];
    for b in 0..batch {
        let x = &input[b * in_features..(b + 1) * in_features];
        dx_acc.fill(0.0);
        for o in 0..out_features {
            let go = d_out[b * out_features + o] as f64;
            if go == 0.0 {
                continue;
            }
            db[o] += go;
            let w = &weight[o * in_features..(o + 1) * in_features];
            let dwo = &mut dw[o * in_features..(o + 1) * in_features];
            for ((d, a), (&wv, &xv)) in dwo.iter_mut().zip(dx_acc.iter_mut()).zip(w.iter().zip(x)) {
                *d += go * xv as f64;
                *a += go * wv as f64;
            }
        }
        for (d, &a) in dx[b * in_features..(b + 1) * in_features].iter_mut().zip(&dx_acc) {
            *d = a as f32;
        }
    }
    (
        dx,
        dw.into_iter().map(|v| v as f32).collect(),
        db.into_iter().map(|v| v as f32).collect(),
    )
}
