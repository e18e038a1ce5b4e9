//! Raw forward/backward routines for the spatial ops.
//!
//! All arrays are flat row-major: index (c, y, x) = (c * h + y) * w + x.
//! The inner loops are arranged so that stride-1 convolutions reduce to
//! contiguous axpy/dot passes over rows.

/// Output extent for one spatial axis. Caller has validated divisibility.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Valid output-index range [lo, hi) such that x*stride + shift lands in [0, w).
fn valid_range(w: usize, wo: usize, stride: usize, shift: isize) -> (usize, usize) {
    let lo = if shift >= 0 {
        0
    } else {
        (((-shift) as usize) + stride - 1) / stride
    };
    let last = w as isize - 1 - shift;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(wo);
    (lo, hi.max(lo))
}

/// [c][hw] channel-major -> [hw][c] channel-last.
fn to_channel_last(src: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let s = &src[ch * hw..(ch + 1) * hw];
        for (p, &v) in s.iter().enumerate() {
            out[p * c + ch] = v;
        }
    }
    out
}

/// [hw][c] channel-last -> [c][hw] channel-major.
fn from_channel_last(src: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = src[p * c + ch];
        }
    }
    out
}

/// Kernel [co][ci][k][k] -> tap-major [ci][k][k][co]: per input channel and
/// tap, the output-channel fiber is contiguous.
fn kernel_tap_major(kernel: &[f64], ci: usize, co: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; ci * k * k * co];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..k * k {
                out[(i * k * k + t) * co + o] = kernel[(o * ci + i) * k * k + t];
            }
        }
    }
    out
}

/// Kernel [co][ci][k][k] -> [co][k][k][ci]: per output channel and tap, the
/// input-channel fiber is contiguous.
fn kernel_in_major(kernel: &[f64], ci: usize, co: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * k * k * ci];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..k * k {
                out[(o * k * k + t) * ci + i] = kernel[(o * ci + i) * k * k + t];
            }
        }
    }
    out
}

// The three conv passes accumulate along a contiguous channel fiber so the
// inner loop is a dense axpy that autovectorizes; scalar multipliers of 0.0
// (common after ReLU) are skipped.

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let hwo = ho * wo;
    let kt = kernel_tap_major(kernel, ci, co, k);
    let mut out_cl = vec![0.0; hwo * co];
    for p in 0..hwo {
        out_cl[p * co..(p + 1) * co].copy_from_slice(bias);
    }
    for i in 0..ci {
        let in_ch = &input[i * h * w..(i + 1) * h * w];
        for a in 0..k {
            for b in 0..k {
                let taps = &kt[(i * k * k + a * k + b) * co..(i * k * k + a * k + b + 1) * co];
                let shift = b as isize - pad as isize;
                let (lo, hi) = valid_range(w, wo, stride, shift);
                for y in 0..ho {
                    let iy = (y * stride + a) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = iy as usize * w;
                    for x in lo..hi {
                        let ix = ((x * stride) as isize + shift) as usize;
                        let s = in_ch[in_row + ix];
                        if s == 0.0 {
                            continue;
                        }
                        let dst = &mut out_cl[(y * wo + x) * co..(y * wo + x + 1) * co];
                        for (d, kv) in dst.iter_mut().zip(taps) {
                            *d += s * kv;
                        }
                    }
                }
            }
        }
    }
    from_channel_last(&out_cl, co, hwo)
}

/// Gradient of conv2d w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input(
    gout: &[f64],
    kernel: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let hw = h * w;
    let ki = kernel_in_major(kernel, ci, co, k);
    let mut gin_cl = vec![0.0; hw * ci];
    for o in 0..co {
        let g_ch = &gout[o * ho * wo..(o + 1) * ho * wo];
        for a in 0..k {
            for b in 0..k {
                let taps = &ki[(o * k * k + a * k + b) * ci..(o * k * k + a * k + b + 1) * ci];
                let shift = b as isize - pad as isize;
                let (lo, hi) = valid_range(w, wo, stride, shift);
                for y in 0..ho {
                    let iy = (y * stride + a) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = iy as usize * w;
                    for x in lo..hi {
                        let g = g_ch[y * wo + x];
                        if g == 0.0 {
                            continue;
                        }
                        let ix = ((x * stride) as isize + shift) as usize;
                        let dst = &mut gin_cl[(in_row + ix) * ci..(in_row + ix + 1) * ci];
                        for (d, kv) in dst.iter_mut().zip(taps) {
                            *d += g * kv;
                        }
                    }
                }
            }
        }
    }
    from_channel_last(&gin_cl, ci, hw)
}

/// Gradient of conv2d w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_kernel(
    gout: &[f64],
    input: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let hwo = ho * wo;
    let g_cl = to_channel_last(gout, co, hwo);
    // accumulate in tap-major [ci][k][k][co], transpose at the end
    let mut gk_tm = vec![0.0; ci * k * k * co];
    for i in 0..ci {
        let in_ch = &input[i * h * w..(i + 1) * h * w];
        for a in 0..k {
            for b in 0..k {
                let acc =
                    &mut gk_tm[(i * k * k + a * k + b) * co..(i * k * k + a * k + b + 1) * co];
                let shift = b as isize - pad as isize;
                let (lo, hi) = valid_range(w, wo, stride, shift);
                for y in 0..ho {
                    let iy = (y * stride + a) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = iy as usize * w;
                    for x in lo..hi {
                        let ix = ((x * stride) as isize + shift) as usize;
                        let s = in_ch[in_row + ix];
                        if s == 0.0 {
                            continue;
                        }
                        let g_row = &g_cl[(y * wo + x) * co..(y * wo + x + 1) * co];
                        for (d, g) in acc.iter_mut().zip(g_row) {
                            *d += s * g;
                        }
                    }
                }
            }
        }
    }
    let mut gk = vec![0.0; co * ci * k * k];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..k * k {
                gk[(o * ci + i) * k * k + t] = gk_tm[(i * k * k + t) * co + o];
            }
        }
    }
    gk
}

pub fn conv2d_grad_bias(gout: &[f64], co: usize, ho: usize, wo: usize) -> Vec<f64> {
    (0..co)
        .map(|o| gout[o * ho * wo..(o + 1) * ho * wo].iter().sum())
        .collect()
}

/// Per-axis sample positions for align-corners-false bilinear interpolation.
/// Returns (i0, i1, t) per output index: value = (1-t)*in[i0] + t*in[i1].
fn bilinear_axis(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) / factor as f64 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = (floor as isize).clamp(0, n_in as isize - 1) as usize;
            let i1 = (floor as isize + 1).clamp(0, n_in as isize - 1) as usize;
            (i0, i1, t)
        })
        .collect()
}

pub fn upsample_bilinear_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let ys = bilinear_axis(h, factor);
    let xs = bilinear_axis(w, factor);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let in_ch = &input[ch * h * w..(ch + 1) * h * w];
        let out_ch = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (y, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = (1.0 - tx) * in_ch[y0 * w + x0] + tx * in_ch[y0 * w + x1];
                let bot = (1.0 - tx) * in_ch[y1 * w + x0] + tx * in_ch[y1 * w + x1];
                out_ch[y * wo + x] = (1.0 - ty) * top + ty * bot;
            }
        }
    }
    out
}

/// Transpose of the interpolation map.
pub fn upsample_bilinear_backward(
    gout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let ys = bilinear_axis(h, factor);
    let xs = bilinear_axis(w, factor);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        let g_ch = &gout[ch * ho * wo..(ch + 1) * ho * wo];
        let gin_ch = &mut gin[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = g_ch[y * wo + x];
                gin_ch[y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * g;
                gin_ch[y0 * w + x1] += (1.0 - ty) * tx * g;
                gin_ch[y1 * w + x0] += ty * (1.0 - tx) * g;
                gin_ch[y1 * w + x1] += ty * tx * g;
            }
        }
    }
    gin
}

/// Per-pixel softmax over the channel axis with max subtraction.
pub fn softmax_channels_forward(logits: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let mut mx = f64::NEG_INFINITY;
        for ch in 0..c {
            mx = mx.max(logits[ch * hw + p]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (logits[ch * hw + p] - mx).exp();
            out[ch * hw + p] = e;
            sum += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= sum;
        }
    }
    out
}

/// g_logit[c] = p[c] * (g[c] - sum_k g[k] p[k]), per pixel.
pub fn softmax_channels_backward(
    gout: &[f64],
    probs: &[f64],
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut gin = vec![0.0; c * hw];
    for p in 0..hw {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += gout[ch * hw + p] * probs[ch * hw + p];
        }
        for ch in 0..c {
            gin[ch * hw + p] = probs[ch * hw + p] * (gout[ch * hw + p] - dot);
        }
    }
    gin
}
