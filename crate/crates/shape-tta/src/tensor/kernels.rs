//! Dense numeric kernels behind the tape ops.
//!
//! Parallel kernels partition their *output* across rayon tasks, so every
//! element is written by exactly one task in a fixed accumulation order and
//! results are bit-identical regardless of thread count.

use rayon::prelude::*;

/// out[b,co,oy,ox] = bias[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] * x[b,ci,oy*s+ky-p,ox*s+kx-p]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    [b, ci, h, wd]: [usize; 4],
    [co, _, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];

    let fused3 = stride == 1 && pad == 1 && kw == 3 && wd >= 2;
    out.par_chunks_mut(co * oh * ow).enumerate().for_each(|(bi, out_b)| {
        let x_b = &x[bi * ci * h * wd..(bi + 1) * ci * h * wd];
        for c_out in 0..co {
            let out_plane = &mut out_b[c_out * oh * ow..(c_out + 1) * oh * ow];
            if let Some(bias) = bias {
                out_plane.fill(bias[c_out]);
            }
            for c_in in 0..ci {
                let x_plane = &x_b[c_in * h * wd..(c_in + 1) * h * wd];
                if fused3 {
                    for ky in 0..kh {
                        let wrow = &w[((c_out * ci + c_in) * kh + ky) * kw..][..3];
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            fused_row3(out_row, x_row, wrow[0], wrow[1], wrow[2]);
                        }
                    }
                } else {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w[((c_out * ci + c_in) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            accumulate_rows(out_plane, x_plane, wv, oh, ow, h, wd, stride, pad, ky, kx);
                        }
                    }
                }
            }
        }
    });
    out
}

/// One fused pass of a 3-tap horizontal stencil with unit padding:
/// out[m] += w0*x[m-1] + w1*x[m] + w2*x[m+1], clipping at the row ends.
#[inline]
fn fused_row3(out: &mut [f64], x: &[f64], w0: f64, w1: f64, w2: f64) {
    let n = out.len();
    out[0] += w1 * x[0] + w2 * x[1];
    let interior = &mut out[1..n - 1];
    for (m, o) in interior.iter_mut().enumerate() {
        *o += w0 * x[m] + w1 * x[m + 1] + w2 * x[m + 2];
    }
    out[n - 1] += w0 * x[n - 2] + w1 * x[n - 1];
}

/// out_plane[oy,ox] += wv * x_plane[oy*s+ky-p, ox*s+kx-p] over the valid range.
#[inline]
fn accumulate_rows(
    out_plane: &mut [f64],
    x_plane: &[f64],
    wv: f64,
    oh: usize,
    ow: usize,
    h: usize,
    wd: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let x_row = &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            // ix = ox + kx - pad must lie in [0, wd)
            let lo = pad.saturating_sub(kx);
            let hi = (wd + pad - kx).min(ow);
            if lo >= hi {
                continue;
            }
            let off = lo + kx - pad;
            for (o, xv) in out_row[lo..hi].iter_mut().zip(&x_row[off..off + (hi - lo)]) {
                *o += wv * xv;
            }
        } else {
            for (ox, o) in out_row.iter_mut().enumerate() {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix >= 0 && ix < wd as isize {
                    *o += wv * x_row[ix as usize];
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution input. Parallel over batch items.
pub fn conv2d_backward_input(
    g: &[f64],
    w: &[f64],
    [b, ci, h, wd]: [usize; 4],
    [co, _, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut gx = vec![0.0; b * ci * h * wd];

    let fused3 = stride == 1 && pad == 1 && kw == 3 && wd >= 2;
    gx.par_chunks_mut(ci * h * wd).enumerate().for_each(|(bi, gx_b)| {
        let g_b = &g[bi * co * oh * ow..(bi + 1) * co * oh * ow];
        for c_in in 0..ci {
            let gx_plane = &mut gx_b[c_in * h * wd..(c_in + 1) * h * wd];
            for c_out in 0..co {
                let g_plane = &g_b[c_out * oh * ow..(c_out + 1) * oh * ow];
                if fused3 {
                    // Transposed stencil: gx[m] += w0*g[m+1] + w1*g[m] + w2*g[m-1],
                    // i.e. fused_row3 with the taps flipped.
                    for ky in 0..kh {
                        let wrow = &w[((c_out * ci + c_in) * kh + ky) * kw..][..3];
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let gx_row = &mut gx_plane[iy as usize * wd..(iy as usize + 1) * wd];
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            fused_row3(gx_row, g_row, wrow[2], wrow[1], wrow[0]);
                        }
                    }
                } else {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w[((c_out * ci + c_in) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            scatter_rows(gx_plane, g_plane, wv, oh, ow, h, wd, stride, pad, ky, kx);
                        }
                    }
                }
            }
        }
    });
    gx
}

/// gx_plane[oy*s+ky-p, ox*s+kx-p] += wv * g_plane[oy,ox] over the valid range.
#[inline]
fn scatter_rows(
    gx_plane: &mut [f64],
    g_plane: &[f64],
    wv: f64,
    oh: usize,
    ow: usize,
    h: usize,
    wd: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let gx_row = &mut gx_plane[iy as usize * wd..(iy as usize + 1) * wd];
        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let lo = pad.saturating_sub(kx);
            let hi = (wd + pad - kx).min(ow);
            if lo >= hi {
                continue;
            }
            let off = lo + kx - pad;
            for (xg, gv) in gx_row[off..off + (hi - lo)].iter_mut().zip(&g_row[lo..hi]) {
                *xg += wv * gv;
            }
        } else {
            for (ox, gv) in g_row.iter().enumerate() {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix >= 0 && ix < wd as isize {
                    gx_row[ix as usize] += wv * gv;
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution weights. Parallel over output channels.
pub fn conv2d_backward_weight(
    g: &[f64],
    x: &[f64],
    [b, ci, h, wd]: [usize; 4],
    [co, _, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut gw = vec![0.0; co * ci * kh * kw];

    let fused3 = stride == 1 && pad == 1 && kw == 3 && wd >= 2;
    gw.par_chunks_mut(ci * kh * kw).enumerate().for_each(|(c_out, gw_c)| {
        for bi in 0..b {
            let g_plane = &g[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
            for c_in in 0..ci {
                let x_plane = &x[(bi * ci + c_in) * h * wd..(bi * ci + c_in + 1) * h * wd];
                if fused3 {
                    for ky in 0..kh {
                        let mut acc = [0.0f64; 3];
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let n = g_row.len();
                            let mut a0 = 0.0;
                            let mut a1 = 0.0;
                            let mut a2 = 0.0;
                            for m in 1..n - 1 {
                                let gv = g_row[m];
                                a0 += gv * x_row[m - 1];
                                a1 += gv * x_row[m];
                                a2 += gv * x_row[m + 1];
                            }
                            a0 += g_row[n - 1] * x_row[n - 2];
                            a1 += g_row[0] * x_row[0] + g_row[n - 1] * x_row[n - 1];
                            a2 += g_row[0] * x_row[1];
                            acc[0] += a0;
                            acc[1] += a1;
                            acc[2] += a2;
                        }
                        for (kx, a) in acc.iter().enumerate() {
                            gw_c[(c_in * kh + ky) * kw + kx] += a;
                        }
                    }
                    continue;
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let lo = pad.saturating_sub(kx);
                                let hi = (wd + pad - kx).min(ow);
                                if lo >= hi {
                                    continue;
                                }
                                let off = lo + kx - pad;
                                for (gv, xv) in g_row[lo..hi].iter().zip(&x_row[off..off + (hi - lo)]) {
                                    acc += gv * xv;
                                }
                            } else {
                                for (ox, gv) in g_row.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        acc += gv * x_row[ix as usize];
                                    }
                                }
                            }
                        }
                        gw_c[(c_in * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

pub fn conv2d_backward_bias(g: &[f64], b: usize, co: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; co];
    for bi in 0..b {
        for (c, gb_c) in gb.iter_mut().enumerate() {
            let base = (bi * co + c) * plane;
            *gb_c += g[base..base + plane].iter().sum::<f64>();
        }
    }
    gb
}

pub fn upsample2x_forward(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let r0 = 2 * y * ow + 2 * x_;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + ow] = v;
                dst[r0 + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward(g: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let _ = oh;
    let mut gx = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let r0 = 2 * y * ow + 2 * x_;
                dst[y * w + x_] = src[r0] + src[r0 + 1] + src[r0 + ow] + src[r0 + ow + 1];
            }
        }
    }
    gx
}

/// Per-channel mean and biased variance over (B, H, W).
pub fn channel_stats(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let m = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (ch, mean_c) in mean.iter_mut().enumerate() {
        let mut acc = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            acc += x[base..base + plane].iter().sum::<f64>();
        }
        *mean_c = acc / m;
    }
    for (ch, var_c) in var.iter_mut().enumerate() {
        let mu = mean[ch];
        let mut acc = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for v in &x[base..base + plane] {
                let d = v - mu;
                acc += d * d;
            }
        }
        *var_c = acc / m;
    }
    (mean, var)
}

pub fn batch_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    invstd: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let (mu, is, gm, bt) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
            for i in base..base + plane {
                out[i] = gm * (x[i] - mu) * is + bt;
            }
        }
    }
    out
}

/// Backward through batch normalization.
///
/// With batch statistics the mean/variance depend on x, so the full chain
/// rule applies; with fixed statistics dx is a plain per-channel scaling.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward(
    g: &[f64],
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    invstd: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    batch_stats: bool,
    need_gx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let m = (b * plane) as f64;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    // sum_g[ch] = sum of g; sum_gx[ch] = sum of g * xhat
    for ch in 0..c {
        let (mu, is) = (mean[ch], invstd[ch]);
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for i in base..base + plane {
                sg += g[i];
                sgx += g[i] * (x[i] - mu) * is;
            }
        }
        gbeta[ch] = sg;
        ggamma[ch] = sgx;
    }
    let mut gx = Vec::new();
    if need_gx {
        gx = vec![0.0; x.len()];
        for ch in 0..c {
            let (mu, is, gm) = (mean[ch], invstd[ch], gamma[ch]);
            let (sg, sgx) = (gbeta[ch], ggamma[ch]);
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    if batch_stats {
                        let xhat = (x[i] - mu) * is;
                        gx[i] = gm * is * (g[i] - sg / m - xhat * sgx / m);
                    } else {
                        gx[i] = gm * is * g[i];
                    }
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Numerically stable softmax over the channel axis of B×K×H×W.
pub fn softmax_channels(x: &[f64], b: usize, k: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * k * plane;
        for p in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..k {
                mx = mx.max(x[base + ch * plane + p]);
            }
            let mut denom = 0.0;
            for ch in 0..k {
                let e = (x[base + ch * plane + p] - mx).exp();
                out[base + ch * plane + p] = e;
                denom += e;
            }
            for ch in 0..k {
                out[base + ch * plane + p] /= denom;
            }
        }
    }
    out
}

/// ds_k = s_k * (g_k - sum_j g_j s_j), per pixel.
pub fn softmax_channels_backward(g: &[f64], s: &[f64], b: usize, k: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut gx = vec![0.0; g.len()];
    for bi in 0..b {
        let base = bi * k * plane;
        for p in 0..plane {
            let mut dot = 0.0;
            for ch in 0..k {
                let idx = base + ch * plane + p;
                dot += g[idx] * s[idx];
            }
            for ch in 0..k {
                let idx = base + ch * plane + p;
                gx[idx] = s[idx] * (g[idx] - dot);
            }
        }
    }
    gx
}
