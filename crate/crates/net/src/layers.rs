//! Dense CPU kernels for single-sample `C x H x W` feature maps.
//!
//! Every forward kernel returns what its backward needs; backward kernels
//! accumulate parameter gradients into caller-provided slices.

use matrixmultiply::sgemm;

/// Row-major `C = A * B + beta * C` with optional transposes of the stored
/// operands. `A` is `m x k`, `B` is `k x n` after transposition.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths above cover every element addressed by the
    // given shapes and strides.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Mirror an out-of-range coordinate back into `0..n` (edge not repeated).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Copy row `src` shifted by `dx` with reflection at both ends into `dst`.
#[inline]
fn shifted_row(src: &[f32], dst: &mut [f32], dx: isize) {
    let w = src.len();
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)) as usize;
    if lo < hi {
        let s0 = (lo as isize + dx) as usize;
        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
    }
    for x in (0..lo.min(w)).chain(hi.max(lo)..w) {
        dst[x] = src[reflect(x as isize + dx, w)];
    }
}

#[inline]
fn shifted_row_add(dsrc: &mut [f32], d: &[f32], dx: isize) {
    let w = dsrc.len();
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)) as usize;
    if lo < hi {
        let s0 = (lo as isize + dx) as usize;
        for (a, b) in dsrc[s0..s0 + (hi - lo)].iter_mut().zip(&d[lo..hi]) {
            *a += *b;
        }
    }
    for x in (0..lo.min(w)).chain(hi.max(lo)..w) {
        dsrc[reflect(x as isize + dx, w)] += d[x];
    }
}

/// 3x3 patches with reflect padding: `cols[(ci*9 + ky*3 + kx), y*w + x]`.
pub fn im2col3(input: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut cols = vec![0.0f32; cin * 9 * hw];
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    shifted_row(
                        &plane[sy * w..(sy + 1) * w],
                        &mut cols[row + y * w..row + (y + 1) * w],
                        kx as isize - 1,
                    );
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0f32; cin * hw];
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    shifted_row_add(
                        &mut plane[sy * w..(sy + 1) * w],
                        &cols[row + y * w..row + (y + 1) * w],
                        kx as isize - 1,
                    );
                }
            }
        }
    }
    out
}

/// 3x3 convolution, reflect padding, stride 1. Returns `(output, cols)`.
pub fn conv3_forward(input: &[f32], cin: usize, h: usize, w: usize, weight: &[f32], bias: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let cout = bias.len();
    let hw = h * w;
    let cols = im2col3(input, cin, h, w);
    let mut out = vec![0.0f32; cout * hw];
    for (co, b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(*b);
    }
    gemm(cout, cin * 9, hw, weight, false, &cols, false, 1.0, &mut out);
    (out, cols)
}

/// Accumulates weight/bias gradients; returns the input gradient if asked.
#[allow(clippy::too_many_arguments)]
pub fn conv3_backward(
    dout: &[f32],
    cols: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_input_grad: bool,
) -> Option<Vec<f32>> {
    let cout = dbias.len();
    let hw = h * w;
    gemm(cout, hw, cin * 9, dout, false, cols, true, 1.0, dweight);
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dout[co * hw..(co + 1) * hw].iter().sum::<f32>();
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![0.0f32; cin * 9 * hw];
    gemm(cin * 9, cout, hw, weight, true, dout, false, 0.0, &mut dcols);
    Some(col2im3(&dcols, cin, h, w))
}

pub const IN_EPS: f32 = 1e-5;

/// Per-channel instance normalization with affine `gamma`, `beta`, in place.
/// Returns `(x_hat, inv_std)`.
pub fn instance_norm_forward(x: &mut [f32], c: usize, hw: usize, gamma: &[f32], beta: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut xhat = vec![0.0f32; c * hw];
    let mut inv = vec![0.0f32; c];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        let mean = plane.iter().map(|v| *v as f64).sum::<f64>() / hw as f64;
        let var = plane.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let is = 1.0 / (var + IN_EPS as f64).sqrt();
        inv[ch] = is as f32;
        for (i, v) in plane.iter_mut().enumerate() {
            let h = ((*v as f64 - mean) * is) as f32;
            xhat[ch * hw + i] = h;
            *v = gamma[ch] * h + beta[ch];
        }
    }
    (xhat, inv)
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward(
    dy: &mut [f32],
    c: usize,
    hw: usize,
    xhat: &[f32],
    inv: &[f32],
    gamma: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let n = hw as f64;
    for ch in 0..c {
        let d = &mut dy[ch * hw..(ch + 1) * hw];
        let xh = &xhat[ch * hw..(ch + 1) * hw];
        let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
        for (dv, hv) in d.iter().zip(xh) {
            sum_d += *dv as f64;
            sum_dx += (*dv as f64) * (*hv as f64);
        }
        dgamma[ch] += sum_dx as f32;
        dbeta[ch] += sum_d as f32;
        let g = gamma[ch] as f64;
        let is = inv[ch] as f64;
        for (dv, hv) in d.iter_mut().zip(xh) {
            let dxh = *dv as f64 * g;
            *dv = (is / n * (n * dxh - g * sum_d - *hv as f64 * g * sum_dx)) as f32;
        }
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero `grad` wherever the post-activation output is not positive.
pub fn relu_backward(grad: &mut [f32], out: &[f32]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling on even `h`, `w`. Returns `(output, argmax)` where argmax
/// holds the flat input index of each winner.
pub fn maxpool_forward(input: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w;
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &cnd in &cands[1..] {
                    if input[cnd] > input[best] {
                        best = cnd;
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(dout: &[f32], arg: &[u32], input_len: usize) -> Vec<f32> {
    let mut din = vec![0.0f32; input_len];
    for (d, a) in dout.iter().zip(arg) {
        din[*a as usize] += *d;
    }
    din
}

/// 2x2 stride-2 transposed convolution. `weight` is `[2, 2, cout, cin]`.
pub fn tconv_forward(input: &[f32], cin: usize, h: usize, w: usize, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let cout = bias.len();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; cout * oh * ow];
    let mut tmp = vec![0.0f32; cout * hw];
    for d in 0..4 {
        let (dy, dx) = (d / 2, d % 2);
        gemm(cout, cin, hw, &weight[d * cout * cin..(d + 1) * cout * cin], false, input, false, 0.0, &mut tmp);
        for co in 0..cout {
            for y in 0..h {
                let orow = co * oh * ow + (2 * y + dy) * ow;
                let trow = &tmp[co * hw + y * w..co * hw + (y + 1) * w];
                for (x, t) in trow.iter().enumerate() {
                    out[orow + 2 * x + dx] = *t + bias[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn tconv_backward(
    dout: &[f32],
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
) -> Vec<f32> {
    let cout = dbias.len();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dout[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f32>();
    }
    let mut din = vec![0.0f32; cin * hw];
    let mut g = vec![0.0f32; cout * hw];
    for d in 0..4 {
        let (dy, dx) = (d / 2, d % 2);
        for co in 0..cout {
            for y in 0..h {
                let orow = co * oh * ow + (2 * y + dy) * ow;
                for x in 0..w {
                    g[co * hw + y * w + x] = dout[orow + 2 * x + dx];
                }
            }
        }
        let span = d * cout * cin..(d + 1) * cout * cin;
        gemm(cout, hw, cin, &g, false, input, true, 1.0, &mut dweight[span.clone()]);
        gemm(cin, cout, hw, &weight[span], true, &g, false, 1.0, &mut din);
    }
    din
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f32) -> f32 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
