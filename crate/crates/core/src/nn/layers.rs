//! Layer primitives with explicit forward/backward passes.
//!
//! Parameters live in one flat f32 buffer; each layer spec holds ranges
//! into it. Backward passes accumulate gradients into a buffer of the same
//! layout and return the input cotangent.

use std::ops::Range;

use super::tensor::{matmul, Tensor};

// ---------------------------------------------------------------------------
// Conv2d, 3x3, pad 1, stride 1 or 2
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize, // 1 or 3
    pub stride: usize, // 1 or 2
    pub w: Range<usize>,
    pub b: Range<usize>,
}

pub struct ConvCache {
    col: Vec<f32>, // (c_in * k * k) x (h_out * w_out)
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
}

fn im2col(x: &Tensor, kernel: usize, stride: usize) -> (Vec<f32>, usize, usize) {
    let pad = kernel / 2;
    let h_out = (x.h + 2 * pad - kernel) / stride + 1;
    let w_out = (x.w + 2 * pad - kernel) / stride + 1;
    let mut col = vec![0.0f32; x.c * kernel * kernel * h_out * w_out];
    let hw_out = h_out * w_out;
    for ci in 0..x.c {
        let plane = x.plane(ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &mut col[(ci * kernel * kernel + ky * kernel + kx) * hw_out
                    ..(ci * kernel * kernel + ky * kernel + kx + 1) * hw_out];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let dst = &mut row[oy * w_out..(oy + 1) * w_out];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (col, h_out, w_out)
}

fn col2im(
    dcol: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
) -> Tensor {
    let pad = kernel / 2;
    let mut dx = Tensor::zeros(c, h, w);
    let hw_out = h_out * w_out;
    for ci in 0..c {
        let plane = dx.plane_mut(ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &dcol[(ci * kernel * kernel + ky * kernel + kx) * hw_out
                    ..(ci * kernel * kernel + ky * kernel + kx + 1) * hw_out];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * w_out..(oy + 1) * w_out];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv_forward(spec: &ConvSpec, params: &[f32], x: &Tensor) -> (Tensor, ConvCache) {
    debug_assert_eq!(x.c, spec.c_in);
    let (col, h_out, w_out) = im2col(x, spec.kernel, spec.stride);
    let hw = h_out * w_out;
    let kk = spec.c_in * spec.kernel * spec.kernel;
    let mut out = Tensor::zeros(spec.c_out, h_out, w_out);
    matmul(&params[spec.w.clone()], &col, &mut out.data, spec.c_out, kk, hw, false);
    let bias = &params[spec.b.clone()];
    for co in 0..spec.c_out {
        let b = bias[co];
        for v in out.plane_mut(co) {
            *v += b;
        }
    }
    let cache = ConvCache { col, h_in: x.h, w_in: x.w, h_out, w_out };
    (out, cache)
}

pub fn conv_backward(
    spec: &ConvSpec,
    params: &[f32],
    cache: &ConvCache,
    dout: &Tensor,
    grads: Option<&mut [f32]>,
) -> Tensor {
    let hw = cache.h_out * cache.w_out;
    let kk = spec.c_in * spec.kernel * spec.kernel;
    if let Some(grads) = grads {
        // dW[c_out x kk] = dOut[c_out x hw] * col^T[hw x kk]; transpose col
        // explicitly to keep the GEMM row-major.
        let mut col_t = vec![0.0f32; hw * kk];
        for r in 0..kk {
            for j in 0..hw {
                col_t[j * kk + r] = cache.col[r * hw + j];
            }
        }
        matmul(&dout.data, &col_t, &mut grads[spec.w.clone()], spec.c_out, hw, kk, true);
        for co in 0..spec.c_out {
            let s: f32 = dout.plane(co).iter().sum();
            grads[spec.b.clone()][co] += s;
        }
    }
    // dcol[kk x hw] = W^T[kk x c_out] * dOut[c_out x hw]
    let w = &params[spec.w.clone()];
    let mut w_t = vec![0.0f32; kk * spec.c_out];
    for r in 0..spec.c_out {
        for j in 0..kk {
            w_t[j * spec.c_out + r] = w[r * kk + j];
        }
    }
    let mut dcol = vec![0.0f32; kk * hw];
    matmul(&w_t, &dout.data, &mut dcol, kk, spec.c_out, hw, false);
    col2im(
        &dcol,
        spec.c_in,
        cache.h_in,
        cache.w_in,
        spec.kernel,
        spec.stride,
        cache.h_out,
        cache.w_out,
    )
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GroupNormSpec {
    pub c: usize,
    pub groups: usize,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
}

pub struct GroupNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>, // per group
}

const GN_EPS: f32 = 1e-5;

pub fn group_norm_forward(spec: &GroupNormSpec, params: &[f32], x: &Tensor) -> (Tensor, GroupNormCache) {
    debug_assert_eq!(x.c % spec.groups, 0);
    let per = x.c / spec.groups;
    let hw = x.h * x.w;
    let gamma = &params[spec.gamma.clone()];
    let beta = &params[spec.beta.clone()];
    let mut out = Tensor::zeros(x.c, x.h, x.w);
    let mut xhat = Tensor::zeros(x.c, x.h, x.w);
    let mut inv_std = vec![0.0f32; spec.groups];
    for g in 0..spec.groups {
        let slice = &x.data[g * per * hw..(g + 1) * per * hw];
        let n = slice.len() as f32;
        let mean = slice.iter().sum::<f32>() / n;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let istd = 1.0 / (var + GN_EPS).sqrt();
        inv_std[g] = istd;
        for ci in 0..per {
            let c = g * per + ci;
            let xs = &x.data[c * hw..(c + 1) * hw];
            let xh = &mut xhat.data[c * hw..(c + 1) * hw];
            let os = &mut out.data[c * hw..(c + 1) * hw];
            for j in 0..hw {
                let v = (xs[j] - mean) * istd;
                xh[j] = v;
                os[j] = gamma[c] * v + beta[c];
            }
        }
    }
    (out, GroupNormCache { xhat, inv_std })
}

pub fn group_norm_backward(
    spec: &GroupNormSpec,
    params: &[f32],
    cache: &GroupNormCache,
    dout: &Tensor,
    grads: Option<&mut [f32]>,
) -> Tensor {
    let per = spec.c / spec.groups;
    let hw = dout.h * dout.w;
    let gamma = &params[spec.gamma.clone()];
    let mut dx = Tensor::zeros(dout.c, dout.h, dout.w);
    let mut dgamma = vec![0.0f32; spec.c];
    let mut dbeta = vec![0.0f32; spec.c];
    for g in 0..spec.groups {
        let n = (per * hw) as f32;
        let istd = cache.inv_std[g];
        // dxhat = dout * gamma; need mean(dxhat) and mean(dxhat * xhat).
        let mut sum_dxh = 0.0f32;
        let mut sum_dxh_xh = 0.0f32;
        for ci in 0..per {
            let c = g * per + ci;
            let d = &dout.data[c * hw..(c + 1) * hw];
            let xh = &cache.xhat.data[c * hw..(c + 1) * hw];
            for j in 0..hw {
                let dxh = d[j] * gamma[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[j];
                dgamma[c] += d[j] * xh[j];
                dbeta[c] += d[j];
            }
        }
        let m_dxh = sum_dxh / n;
        let m_dxh_xh = sum_dxh_xh / n;
        for ci in 0..per {
            let c = g * per + ci;
            let d = &dout.data[c * hw..(c + 1) * hw];
            let xh = &cache.xhat.data[c * hw..(c + 1) * hw];
            let o = &mut dx.data[c * hw..(c + 1) * hw];
            for j in 0..hw {
                let dxh = d[j] * gamma[c];
                o[j] = istd * (dxh - m_dxh - xh[j] * m_dxh_xh);
            }
        }
    }
    if let Some(grads) = grads {
        for c in 0..spec.c {
            grads[spec.gamma.clone()][c] += dgamma[c];
            grads[spec.beta.clone()][c] += dbeta[c];
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

pub struct SiluCache {
    x: Tensor,
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_forward(x: &Tensor) -> (Tensor, SiluCache) {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v *= sigmoid(*v);
    }
    (out, SiluCache { x: x.clone() })
}

pub fn silu_backward(cache: &SiluCache, dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    for (d, &x) in dx.data.iter_mut().zip(cache.x.data.iter()) {
        let s = sigmoid(x);
        *d *= s * (1.0 + x * (1.0 - s));
    }
    dx
}

pub fn silu_vec_forward(x: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let out = x.iter().map(|&v| v * sigmoid(v)).collect();
    (out, x.to_vec())
}

pub fn silu_vec_backward(x: &[f32], dout: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dout.iter())
        .map(|(&x, &d)| {
            let s = sigmoid(x);
            d * s * (1.0 + x * (1.0 - s))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Linear (for the time-embedding perceptrons)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LinearSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub w: Range<usize>,
    pub b: Range<usize>,
}

pub fn linear_forward(spec: &LinearSpec, params: &[f32], x: &[f32]) -> Vec<f32> {
    debug_assert_eq!(x.len(), spec.d_in);
    let w = &params[spec.w.clone()];
    let b = &params[spec.b.clone()];
    (0..spec.d_out)
        .map(|o| {
            let row = &w[o * spec.d_in..(o + 1) * spec.d_in];
            row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f32>() + b[o]
        })
        .collect()
}

pub fn linear_backward(
    spec: &LinearSpec,
    params: &[f32],
    x: &[f32],
    dout: &[f32],
    grads: Option<&mut [f32]>,
) -> Vec<f32> {
    let w = &params[spec.w.clone()];
    if let Some(grads) = grads {
        for o in 0..spec.d_out {
            let gw = &mut grads[spec.w.clone()][o * spec.d_in..(o + 1) * spec.d_in];
            for (g, &xi) in gw.iter_mut().zip(x.iter()) {
                *g += dout[o] * xi;
            }
            grads[spec.b.clone()][o] += dout[o];
        }
    }
    let mut dx = vec![0.0f32; spec.d_in];
    for o in 0..spec.d_out {
        let row = &w[o * spec.d_in..(o + 1) * spec.d_in];
        for (d, &wi) in dx.iter_mut().zip(row.iter()) {
            *d += dout[o] * wi;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Resampling and concatenation
// ---------------------------------------------------------------------------

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.c, x.h * 2, x.w * 2);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        let (h2, w2) = (x.h * 2, x.w * 2);
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of nearest upsampling: sum each 2x2 block.
pub fn upsample2_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let src = dout.plane(c);
        let dst = dx.plane_mut(c);
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dst[(y / 2) * w + xx / 2] += src[y * dout.w + xx];
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut out = Tensor::zeros(a.c + b.c, a.h, a.w);
    out.data[..a.len()].copy_from_slice(&a.data);
    out.data[a.len()..].copy_from_slice(&b.data);
    out
}

pub fn split_channels(d: &Tensor, c_a: usize) -> (Tensor, Tensor) {
    let hw = d.h * d.w;
    let a = Tensor::from_vec(c_a, d.h, d.w, d.data[..c_a * hw].to_vec());
    let b = Tensor::from_vec(d.c - c_a, d.h, d.w, d.data[c_a * hw..].to_vec());
    (a, b)
}

/// Sinusoidal embedding of an integer step index.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / (half as f64 - 1.0)).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha12Rng) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(c, h, w, data)
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // 3x3 kernel with centre 1 on the diagonal reproduces the input.
        let c = 2;
        let spec = ConvSpec { c_in: c, c_out: c, kernel: 3, stride: 1, w: 0..c * c * 9, b: c * c * 9..c * c * 9 + c };
        let mut params = vec![0.0f32; c * c * 9 + c];
        for ci in 0..c {
            params[ci * c * 9 + ci * 9 + 4] = 1.0;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = rand_tensor(c, 5, 6, &mut rng);
        let (y, _) = conv_forward(&spec, &params, &x);
        for (a, b) in x.data.iter().zip(y.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_stride2_halves_resolution() {
        let spec = ConvSpec { c_in: 1, c_out: 1, kernel: 3, stride: 2, w: 0..9, b: 9..10 };
        let params = vec![0.0f32; 10];
        let x = Tensor::zeros(1, 8, 8);
        let (y, _) = conv_forward(&spec, &params, &x);
        assert_eq!((y.h, y.w), (4, 4));
    }

    /// Finite-difference check of a scalar loss L = sum(out * cot).
    fn check_conv_grads(stride: usize) {
        let (c_in, c_out) = (3, 4);
        let n_w = c_out * c_in * 9;
        let spec = ConvSpec { c_in, c_out, kernel: 3, stride, w: 0..n_w, b: n_w..n_w + c_out };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut params = vec![0.0f32; n_w + c_out];
        for p in params.iter_mut() {
            *p = rng.gen_range(-0.3f32..0.3);
        }
        let x = rand_tensor(c_in, 6, 6, &mut rng);
        let (out, cache) = conv_forward(&spec, &params, &x);
        let cot = rand_tensor(out.c, out.h, out.w, &mut rng);
        let mut grads = vec![0.0f32; params.len()];
        let dx = conv_backward(&spec, &params, &cache, &cot, Some(&mut grads));

        let loss = |params: &[f32], x: &Tensor| -> f64 {
            let (o, _) = conv_forward(&spec, params, x);
            o.data.iter().zip(cot.data.iter()).map(|(a, b)| (a * b) as f64).sum()
        };
        let h = 1e-3f32;
        for idx in [0usize, 5, n_w - 1, n_w + 1] {
            let mut pp = params.clone();
            pp[idx] += h;
            let mut pm = params.clone();
            pm[idx] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h as f64);
            assert!(
                (fd - grads[idx] as f64).abs() <= 2e-2 * fd.abs().max(1.0),
                "param {idx}: fd {fd} vs {}",
                grads[idx]
            );
        }
        for idx in [0usize, 17, 50] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h as f64);
            assert!(
                (fd - dx.data[idx] as f64).abs() <= 2e-2 * fd.abs().max(1.0),
                "input {idx}: fd {fd} vs {}",
                dx.data[idx]
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_conv_grads(1);
        check_conv_grads(2);
    }

    #[test]
    fn group_norm_normalizes_and_backprops() {
        let c = 4;
        let spec = GroupNormSpec { c, groups: 2, gamma: 0..c, beta: c..2 * c };
        let mut params = vec![0.0f32; 2 * c];
        params[..c].fill(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand_tensor(c, 4, 4, &mut rng);
        let (y, cache) = group_norm_forward(&spec, &params, &x);
        // Each group has zero mean, unit variance.
        let hw = 16;
        for g in 0..2 {
            let s = &y.data[g * 2 * hw..(g + 1) * 2 * hw];
            let mean: f32 = s.iter().sum::<f32>() / s.len() as f32;
            let var: f32 = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / s.len() as f32;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }

        let cot = rand_tensor(c, 4, 4, &mut rng);
        let mut grads = vec![0.0f32; params.len()];
        let dx = group_norm_backward(&spec, &params, &cache, &cot, Some(&mut grads));
        let loss = |params: &[f32], x: &Tensor| -> f64 {
            let (o, _) = group_norm_forward(&spec, params, x);
            o.data.iter().zip(cot.data.iter()).map(|(a, b)| (a * b) as f64).sum()
        };
        let h = 1e-3f32;
        for idx in [0usize, 33, 60] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h as f64);
            assert!(
                (fd - dx.data[idx] as f64).abs() <= 5e-2 * fd.abs().max(0.5),
                "input {idx}: fd {fd} vs {}",
                dx.data[idx]
            );
        }
        for idx in [1usize, c + 2] {
            let mut pp = params.clone();
            pp[idx] += h;
            let mut pm = params.clone();
            pm[idx] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h as f64);
            assert!(
                (fd - grads[idx] as f64).abs() <= 5e-2 * fd.abs().max(0.5),
                "param {idx}: fd {fd} vs {}",
                grads[idx]
            );
        }
    }

    #[test]
    fn silu_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_tensor(2, 3, 3, &mut rng);
        let (_, cache) = silu_forward(&x);
        let cot = rand_tensor(2, 3, 3, &mut rng);
        let dx = silu_backward(&cache, &cot);
        let h = 1e-3f32;
        for idx in [0usize, 7, 15] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let f = |t: &Tensor| -> f64 {
                let (o, _) = silu_forward(t);
                o.data.iter().zip(cot.data.iter()).map(|(a, b)| (a * b) as f64).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h as f64);
            assert!((fd - dx.data[idx] as f64).abs() <= 1e-2 * fd.abs().max(0.5));
        }
    }

    #[test]
    fn upsample_and_adjoint() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = rand_tensor(2, 3, 4, &mut rng);
        let up = upsample2_forward(&x);
        assert_eq!((up.h, up.w), (6, 8));
        assert_eq!(up.plane(0)[0], x.plane(0)[0]);
        assert_eq!(up.plane(0)[1], x.plane(0)[0]);
        // Adjoint identity <up(x), y> = <x, up^T(y)>.
        let y = rand_tensor(2, 6, 8, &mut rng);
        let down = upsample2_backward(&y);
        let lhs: f64 = up.data.iter().zip(y.data.iter()).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.data.iter().zip(down.data.iter()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let a = rand_tensor(3, 4, 4, &mut rng);
        let b = rand_tensor(2, 4, 4, &mut rng);
        let cat = concat_channels(&a, &b);
        let (a2, b2) = split_channels(&cat, 3);
        assert_eq!(a.data, a2.data);
        assert_eq!(b.data, b2.data);
    }

    #[test]
    fn sinusoidal_embedding_shape_and_range() {
        let e = sinusoidal_embedding(500, 128);
        assert_eq!(e.len(), 128);
        assert!(e.iter().all(|v| v.abs() <= 1.0 + 1e-6));
        let e2 = sinusoidal_embedding(501, 128);
        assert_ne!(e, e2);
    }
}
