//! Batched kernels: same-padded convolution, fused batch-norm + ReLU, 2×2
//! max pooling. Activations are `N × C × H × W`, row-major; a batch may sit
//! inside a wider buffer, in which case sample `n` starts at `n · stride`.

use rayon::prelude::*;

use super::Real;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// `C ← α·op(A)·op(B) + β·C` with `op(A)` of shape `m × k` and `op(B)` of
/// shape `k × n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    T::gemm(m, k, n, alpha, a, [rsa, csa], b, [rsb, csb], beta, c, [n, 1]);
}

/// Column matrix `(c·ks²) × (h·w)` of the zero-padded `ks × ks` patches.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, ks: usize, col: &mut [T]) {
    let r = (ks / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (ci * ks + ky) * ks + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + ky as isize - r;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, o) in out.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *o = if sx >= 0 && sx < w as isize { src[sx as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns back into `x`.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, ks: usize, x: &mut [T]) {
    let r = (ks / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (ci * ks + ky) * ks + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Shape of one convolution applied to an `h × w` map.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub ks: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.cin * self.ks * self.ks
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// `out[n][offset..offset + cout·hw] = W ∗ input[n][..cin·hw]` for every
/// sample. `weight` is `cout × cin·ks²`.
pub(crate) fn conv_forward<T: Real>(
    s: ConvShape,
    input: &[T],
    in_stride: usize,
    weight: &[T],
    out: &mut [T],
    out_stride: usize,
    out_offset: usize,
) {
    let hw = s.hw();
    out.par_chunks_mut(out_stride).enumerate().for_each_init(
        || vec![T::zero(); if s.ks == 1 { 0 } else { s.patch() * hw }],
        |col, (n, o)| {
            let x = &input[n * in_stride..n * in_stride + s.cin * hw];
            let dst = &mut o[out_offset..out_offset + s.cout * hw];
            let b = if s.ks == 1 {
                x
            } else {
                im2col(x, s.cin, s.h, s.w, s.ks, col);
                col
            };
            gemm(false, false, s.cout, s.patch(), hw, T::one(), weight, b, T::zero(), dst);
        },
    );
}

/// Backward of [`conv_forward`]. Adds the weight gradient into `dweight`
/// (summed over samples in order) and, when requested, overwrites the
/// compact `N × cin × hw` input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    s: ConvShape,
    batch: usize,
    input: &[T],
    in_stride: usize,
    weight: &[T],
    dout: &[T],
    dout_stride: usize,
    dout_offset: usize,
    dweight: &mut [T],
    dinput: Option<&mut [T]>,
) {
    let hw = s.hw();
    let patch = s.patch();
    let per_sample = |n: usize, col: &mut Vec<T>, dx: Option<&mut [T]>| -> Vec<T> {
        let x = &input[n * in_stride..n * in_stride + s.cin * hw];
        let dy = &dout[n * dout_stride + dout_offset..n * dout_stride + dout_offset + s.cout * hw];
        let b: &[T] = if s.ks == 1 {
            x
        } else {
            im2col(x, s.cin, s.h, s.w, s.ks, col);
            col
        };
        let mut dw = vec![T::zero(); s.cout * patch];
        gemm(false, true, s.cout, hw, patch, T::one(), dy, b, T::zero(), &mut dw);
        if let Some(dx) = dx {
            if s.ks == 1 {
                gemm(true, false, s.cin, s.cout, hw, T::one(), weight, dy, T::zero(), dx);
            } else {
                gemm(true, false, patch, s.cout, hw, T::one(), weight, dy, T::zero(), col);
                dx.fill(T::zero());
                col2im(col, s.cin, s.h, s.w, s.ks, dx);
            }
        }
        dw
    };
    let scratch = || vec![T::zero(); if s.ks == 1 { 0 } else { patch * hw }];
    let parts: Vec<Vec<T>> = match dinput {
        Some(dx) => dx
            .par_chunks_mut(s.cin * hw)
            .enumerate()
            .map_init(scratch, |col, (n, d)| per_sample(n, col, Some(d)))
            .collect(),
        None => (0..batch)
            .into_par_iter()
            .map_init(scratch, |col, n| per_sample(n, col, None))
            .collect(),
    };
    for dw in parts {
        for (a, b) in dweight.iter_mut().zip(dw) {
            *a += b;
        }
    }
}

/// Per-channel batch statistics of a fused batch-norm + ReLU.
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Training-mode `relu(γ·x̂ + β)` with batch statistics over `N × hw` for
/// each of the first `c` channels of a strided batch. Returns the compact
/// activation.
pub(crate) fn bn_relu_train<T: Real>(
    input: &[T],
    stride: usize,
    batch: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, BnCache<T>) {
    let m = T::from_usize(batch * hw).expect("count fits");
    let eps = T::from_f64(BN_EPS).expect("eps");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for n in 0..batch {
            let base = n * stride + ch * hw;
            s += input[base..base + hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut q = T::zero();
        for n in 0..batch {
            let base = n * stride + ch * hw;
            q += input[base..base + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = q / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); batch * c * hw];
    let mut act = vec![T::zero(); batch * c * hw];
    xhat.par_chunks_mut(c * hw)
        .zip(act.par_chunks_mut(c * hw))
        .enumerate()
        .for_each(|(n, (xh, a))| {
            for ch in 0..c {
                let src = &input[n * stride + ch * hw..n * stride + (ch + 1) * hw];
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for ((xv, av), &v) in xh[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .zip(&mut a[ch * hw..(ch + 1) * hw])
                    .zip(src)
                {
                    *xv = (v - mu) * is;
                    *av = (g * *xv + b).max(T::zero());
                }
            }
        });
    (
        act,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Eval-mode `relu(γ·(x − μ)/√(σ² + ε) + β)` with running statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_relu_eval<T: Real>(
    input: &[T],
    stride: usize,
    batch: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Vec<T> {
    let eps = T::from_f64(BN_EPS).expect("eps");
    let mut act = vec![T::zero(); batch * c * hw];
    act.par_chunks_mut(c * hw).enumerate().for_each(|(n, a)| {
        for ch in 0..c {
            let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
            let shift = beta[ch] - scale * running_mean[ch];
            let src = &input[n * stride + ch * hw..n * stride + (ch + 1) * hw];
            for (o, &v) in a[ch * hw..(ch + 1) * hw].iter_mut().zip(src) {
                *o = (scale * v + shift).max(T::zero());
            }
        }
    });
    act
}

/// Backward of [`bn_relu_train`] with the full batch-statistics gradient.
/// Adds into `dgamma`, `dbeta` and the strided `dinput`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_relu_backward<T: Real>(
    dact: &[T],
    act: &[T],
    cache: &BnCache<T>,
    batch: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dinput: &mut [T],
    stride: usize,
) {
    let m = T::from_usize(batch * hw).expect("count fits");
    let mut sg = vec![T::zero(); c];
    let mut sb = vec![T::zero(); c];
    for n in 0..batch {
        for ch in 0..c {
            let r = n * c * hw + ch * hw..n * c * hw + (ch + 1) * hw;
            for ((&d, &a), &xh) in dact[r.clone()].iter().zip(&act[r.clone()]).zip(&cache.xhat[r]) {
                if a > T::zero() {
                    sg[ch] += d * xh;
                    sb[ch] += d;
                }
            }
        }
    }
    dinput.par_chunks_mut(stride).take(batch).enumerate().for_each(|(n, dx)| {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            let base = n * c * hw + ch * hw;
            for i in 0..hw {
                let dpre = if act[base + i] > T::zero() { dact[base + i] } else { T::zero() };
                dx[ch * hw + i] += k * (m * dpre - sb[ch] - cache.xhat[base + i] * sg[ch]);
            }
        }
    });
    for ch in 0..c {
        dgamma[ch] += sg[ch];
        dbeta[ch] += sb[ch];
    }
}

/// 2×2 stride-2 max pooling of a compact batch. The stored argmax is the
/// offset within the window; ties go to the first element in row order.
pub(crate) fn maxpool_forward<T: Real>(x: &[T], batch: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); batch * c * oh * ow];
    let mut arg = vec![0u8; out.len()];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (o, a))| {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = src[2 * y * w + 2 * xx];
                    let mut which = 0u8;
                    for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = src[(2 * y + dy) * w + 2 * xx + dx];
                        if v > best {
                            best = v;
                            which = k as u8 + 1;
                        }
                    }
                    o[y * ow + xx] = best;
                    a[y * ow + xx] = which;
                }
            }
        });
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(dout: &[T], arg: &[u8], batch: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![T::zero(); batch * c * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, d)| {
        for y in 0..oh {
            for xx in 0..ow {
                let i = plane * oh * ow + y * ow + xx;
                let (dy, dxo) = [(0, 0), (0, 1), (1, 0), (1, 1)][arg[i] as usize];
                d[(2 * y + dy) * w + 2 * xx + dxo] = dout[i];
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, ks) = (2, 3, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * ks * ks * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, ks, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, ks, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_bn_relu_conv() {
        // One 4×4 channel, batch 1. Batch norm with γ=1, β=0 standardises;
        // the ramp 0..15 has mean 7.5 and variance 21.25.
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let (act, _) = bn_relu_train(&x, 16, 1, 1, 16, &[1.0], &[0.0]);
        let sd = (21.25f64 + 1e-5).sqrt();
        for (i, a) in act.iter().enumerate() {
            assert!((a - ((i as f64 - 7.5) / sd).max(0.0)).abs() < 1e-12);
        }
        // 3×3 kernel with a single 1 at the centre-right tap: out(y,x) = act(y,x+1).
        let mut k = [0.0; 9];
        k[5] = 1.0;
        let mut out = vec![0.0; 16];
        let s = ConvShape {
            cin: 1,
            cout: 1,
            ks: 3,
            h: 4,
            w: 4,
        };
        conv_forward(s, &act, 16, &k, &mut out, 16, 0);
        for y in 0..4 {
            for xx in 0..4 {
                let want = if xx < 3 { act[y * 4 + xx + 1] } else { 0.0 };
                assert!((out[y * 4 + xx] - want).abs() < 1e-6);
            }
        }
        // Box kernel at the top-left corner sums the 2×2 neighbourhood.
        let mut out = vec![0.0; 16];
        conv_forward(s, &act, 16, &[1.0; 9], &mut out, 16, 0);
        assert!((out[0] - (act[0] + act[1] + act[4] + act[5])).abs() < 1e-6);
        assert!((out[15] - (act[10] + act[11] + act[14] + act[15])).abs() < 1e-6);
    }

    #[test]
    fn maxpool_routes_to_first_maximum() {
        let x = [1.0, 1.0, 0.0, 2.0, 1.0, 1.0, 3.0, 2.0];
        let (out, arg) = maxpool_forward(&x, 1, 1, 2, 4);
        assert_eq!(out, vec![1.0, 3.0]);
        assert_eq!(arg, vec![0, 2]);
        let dx = maxpool_backward(&[5.0, 7.0], &arg, 1, 1, 2, 4);
        assert_eq!(dx, vec![5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0, 0.0]);
    }
}
