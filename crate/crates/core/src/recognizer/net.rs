//! Layer kernels for the toy extractor: strided 5x5 convolutions with ReLU,
//! a flatten + linear head, and an MLP alternative. All loops run in a
//! fixed order so gradients are deterministic.

use crate::geometry::GridShape;

pub(crate) const KSIZE: usize = 5;
pub(crate) const STRIDE: usize = 2;
pub(crate) const PAD: usize = 2;

/// Output spatial extent of one conv stage.
pub(crate) fn conv_out(n: usize) -> usize {
    (n + 2 * PAD - KSIZE) / STRIDE + 1
}

/// Spatial shapes after each stage.
pub(crate) fn stage_shapes(input: GridShape, n_stages: usize) -> Vec<GridShape> {
    let mut shapes = Vec::with_capacity(n_stages);
    let mut h = input.height;
    let mut w = input.width;
    for _ in 0..n_stages {
        h = conv_out(h);
        w = conv_out(w);
        shapes.push(GridShape::new(h, w));
    }
    shapes
}

/// out[o, oy, ox] = bias[o] + sum_{ic, ky, kx} in[ic, 2oy+ky-2, 2ox+kx-2] * k[o, ic, ky, kx]
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    kernel: &[f64],
    bias: &[f64],
    input: &[f64],
    in_ch: usize,
    in_shape: GridShape,
    out_ch: usize,
    out_shape: GridShape,
    out: &mut [f64],
) {
    let (h, w) = (in_shape.height, in_shape.width);
    let (ho, wo) = (out_shape.height, out_shape.width);
    debug_assert_eq!(out.len(), out_ch * ho * wo);
    for o in 0..out_ch {
        let out_plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        out_plane.fill(bias[o]);
        for ic in 0..in_ch {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let k = &kernel[((o * in_ch) + ic) * KSIZE * KSIZE..][..KSIZE * KSIZE];
            for oy in 0..ho {
                let iy0 = (oy * STRIDE) as isize - PAD as isize;
                for ky in 0..KSIZE {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
                    let k_row = &k[ky * KSIZE..ky * KSIZE + KSIZE];
                    let out_row = &mut out_plane[oy * wo..oy * wo + wo];
                    for (kx, &kv) in k_row.iter().enumerate() {
                        let off = kx as isize - PAD as isize;
                        // 0 <= 2*ox + off < w
                        let ox_lo = ((-off + STRIDE as isize - 1).max(0) / STRIDE as isize) as usize;
                        let ox_hi_excl =
                            (((w as isize - off + STRIDE as isize - 1) / STRIDE as isize).max(0) as usize).min(wo);
                        for ox in ox_lo..ox_hi_excl {
                            let ix = (ox * STRIDE) as isize + off;
                            out_row[ox] += in_row[ix as usize] * kv;
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv_forward`]. `d_out` is the gradient at the conv
/// output (pre-activation). Writes kernel/bias gradients and, when
/// `d_input` is given, accumulates the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    kernel: &[f64],
    input: &[f64],
    in_ch: usize,
    in_shape: GridShape,
    out_ch: usize,
    out_shape: GridShape,
    d_out: &[f64],
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let (h, w) = (in_shape.height, in_shape.width);
    let (ho, wo) = (out_shape.height, out_shape.width);
    for o in 0..out_ch {
        let d_plane = &d_out[o * ho * wo..(o + 1) * ho * wo];
        d_bias[o] += d_plane.iter().sum::<f64>();
        for ic in 0..in_ch {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let k = &kernel[((o * in_ch) + ic) * KSIZE * KSIZE..][..KSIZE * KSIZE];
            let dk = &mut d_kernel[((o * in_ch) + ic) * KSIZE * KSIZE..][..KSIZE * KSIZE];
            for oy in 0..ho {
                let iy0 = (oy * STRIDE) as isize - PAD as isize;
                let d_row = &d_plane[oy * wo..oy * wo + wo];
                for ky in 0..KSIZE {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_base = iy as usize * w;
                    let in_row = &in_plane[row_base..row_base + w];
                    for kx in 0..KSIZE {
                        let off = kx as isize - PAD as isize;
                        let ox_lo = ((-off + STRIDE as isize - 1).max(0) / STRIDE as isize) as usize;
                        let ox_hi_excl =
                            (((w as isize - off + STRIDE as isize - 1) / STRIDE as isize).max(0) as usize).min(wo);
                        let mut acc = 0.0;
                        for ox in ox_lo..ox_hi_excl {
                            let ix = ((ox * STRIDE) as isize + off) as usize;
                            acc += d_row[ox] * in_row[ix];
                        }
                        dk[ky * KSIZE + kx] += acc;
                        if let Some(d_in) = d_input.as_deref_mut() {
                            let kv = k[ky * KSIZE + kx];
                            let d_in_row = &mut d_in[ic * h * w + row_base..ic * h * w + row_base + w];
                            for ox in ox_lo..ox_hi_excl {
                                let ix = ((ox * STRIDE) as isize + off) as usize;
                                d_in_row[ix] += d_row[ox] * kv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// In-place ReLU; returns nothing, caller keeps the pre-activation copy.
pub(crate) fn relu(buf: &mut [f64]) {
    for v in buf.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// d_pre = d_act where pre > 0 else 0 (derivative 0 at the kink).
pub(crate) fn relu_backward(pre: &[f64], d_act: &[f64], d_pre: &mut [f64]) {
    for ((p, g), out) in pre.iter().zip(d_act).zip(d_pre.iter_mut()) {
        *out = if *p > 0.0 { *g } else { 0.0 };
    }
}

/// out = W x + b, with W stored row-major [rows, cols].
pub(crate) fn linear_forward(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let wr = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in wr.iter().zip(x) {
            acc += wv * xv;
        }
        out[r] = acc;
    }
}

/// Backward of [`linear_forward`]: accumulates dW, db and optionally dx.
pub(crate) fn linear_backward(
    w: &[f64],
    x: &[f64],
    rows: usize,
    cols: usize,
    d_out: &[f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
    mut d_x: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let g = d_out[r];
        d_b[r] += g;
        let dw_row = &mut d_w[r * cols..(r + 1) * cols];
        for (slot, xv) in dw_row.iter_mut().zip(x) {
            *slot += g * xv;
        }
        if let Some(dx) = d_x.as_deref_mut() {
            let wr = &w[r * cols..(r + 1) * cols];
            for (slot, wv) in dx.iter_mut().zip(wr) {
                *slot += g * wv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn conv_shapes() {
        assert_eq!(conv_out(64), 32);
        assert_eq!(conv_out(32), 16);
        assert_eq!(conv_out(112), 56);
        assert_eq!(conv_out(7), 4);
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = crate::rng::stream(31, "net-test", 0);
        let (in_ch, out_ch) = (2, 3);
        let in_shape = GridShape::new(7, 6);
        let out_shape = GridShape::new(conv_out(7), conv_out(6));
        let kernel: Vec<f64> = (0..out_ch * in_ch * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input: Vec<f64> = (0..in_ch * 42).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; out_ch * out_shape.len()];
        conv_forward(&kernel, &bias, &input, in_ch, in_shape, out_ch, out_shape, &mut out);

        for o in 0..out_ch {
            for oy in 0..out_shape.height {
                for ox in 0..out_shape.width {
                    let mut acc = bias[o];
                    for ic in 0..in_ch {
                        for ky in 0..5 {
                            for kx in 0..5 {
                                let iy = (oy * 2 + ky) as isize - 2;
                                let ix = (ox * 2 + kx) as isize - 2;
                                if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                    acc += input[ic * 42 + iy as usize * 6 + ix as usize]
                                        * kernel[((o * in_ch + ic) * 5 + ky) * 5 + kx];
                                }
                            }
                        }
                    }
                    let got = out[(o * out_shape.height + oy) * out_shape.width + ox];
                    assert!((got - acc).abs() < 1e-12, "({o},{oy},{ox}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = crate::rng::stream(32, "net-test", 1);
        let (in_ch, out_ch) = (2, 2);
        let in_shape = GridShape::new(6, 5);
        let out_shape = GridShape::new(conv_out(6), conv_out(5));
        let kernel: Vec<f64> = (0..out_ch * in_ch * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input: Vec<f64> = (0..in_ch * 30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..out_ch * out_shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |kernel: &[f64], bias: &[f64], input: &[f64]| {
            let mut out = vec![0.0; out_ch * out_shape.len()];
            conv_forward(kernel, bias, input, in_ch, in_shape, out_ch, out_shape, &mut out);
            out.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut dk = vec![0.0; kernel.len()];
        let mut db = vec![0.0; bias.len()];
        let mut di = vec![0.0; input.len()];
        conv_backward(
            &kernel, &input, in_ch, in_shape, out_ch, out_shape, &upstream, &mut dk, &mut db,
            Some(&mut di),
        );

        let h = 1e-6;
        for idx in [0usize, 7, 24, kernel.len() - 1] {
            let mut kp = kernel.clone();
            let mut km = kernel.clone();
            kp[idx] += h;
            km[idx] -= h;
            let fd = (loss(&kp, &bias, &input) - loss(&km, &bias, &input)) / (2.0 * h);
            assert!((dk[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0), "kernel {idx}");
        }
        for idx in 0..bias.len() {
            let mut bp = bias.clone();
            let mut bm = bias.clone();
            bp[idx] += h;
            bm[idx] -= h;
            let fd = (loss(&kernel, &bp, &input) - loss(&kernel, &bm, &input)) / (2.0 * h);
            assert!((db[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0), "bias {idx}");
        }
        for idx in [0usize, 11, 29, input.len() - 1] {
            let mut ip = input.clone();
            let mut im = input.clone();
            ip[idx] += h;
            im[idx] -= h;
            let fd = (loss(&kernel, &bias, &ip) - loss(&kernel, &bias, &im)) / (2.0 * h);
            assert!((di[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0), "input {idx}");
        }
    }
}
