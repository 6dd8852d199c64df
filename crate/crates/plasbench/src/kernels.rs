//! Raw numeric kernels behind the tape operators.
//!
//! All loops are direct (no im2col, no FFT): desk-scale inputs keep them fast
//! enough and every index is auditable against the backward rules. Layout is
//! row-major NCHW throughout.

use crate::tensor::Scalar;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        out_row.iter_mut().for_each(|x| *x = E::zero());
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// dA += G * B^T, dB += A^T * G for C = A*B with upstream gradient G[m,n].
pub fn matmul_backward<E: Scalar>(
    a: &[E],
    b: &[E],
    g: &[E],
    m: usize,
    k: usize,
    n: usize,
    da: &mut [E],
    db: &mut [E],
) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for j in 0..n {
                acc += g_row[j] * b_row[j];
            }
            da[i * k + p] += acc;
        }
    }
    for p in 0..k {
        let db_row = &mut db[p * n..(p + 1) * n];
        for i in 0..m {
            let a_ip = a[i * k + p];
            let g_row = &g[i * n..(i + 1) * n];
            for j in 0..n {
                db_row[j] += a_ip * g_row[j];
            }
        }
    }
}

/// Output spatial extent of a convolution: floor((in + 2*pad - kernel)/stride) + 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        conv_out_extent(self.in_h, self.kernel_h, self.stride, self.pad)
    }
    pub fn out_w(&self) -> usize {
        conv_out_extent(self.in_w, self.kernel_w, self.stride, self.pad)
    }
}

/// Output positions o with `o*stride + k_off - pad` inside `[0, extent_in)`,
/// clamped to `[0, extent_out)`.
#[inline]
fn valid_out_range(
    extent_in: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
    extent_out: usize,
) -> std::ops::Range<usize> {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    if extent_in + pad <= k_off {
        return 0..0;
    }
    let hi = ((extent_in - 1 + pad - k_off) / stride + 1).min(extent_out);
    lo..hi.max(lo)
}

/// Unfolds one image's patches into `patches[C*kh*kw][OH*OW]` (row-major),
/// zero-filling padded positions. Row k = (c, kh, kw) in kernel layout order,
/// matching the weight tensor flattened as [F, C*kh*kw].
fn im2col<E: Scalar>(x_image: &[E], d: &ConvDims, patches: &mut [E]) {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let positions = oh_n * ow_n;
    let s = d.stride;
    patches.iter_mut().for_each(|v| *v = E::zero());
    let mut row = 0;
    for c in 0..d.in_channels {
        let x_plane = &x_image[(c * d.in_h) * d.in_w..][..d.in_h * d.in_w];
        for kh in 0..d.kernel_h {
            let oh_range = valid_out_range(d.in_h, kh, s, d.pad, oh_n);
            for kw in 0..d.kernel_w {
                let ow_range = valid_out_range(d.in_w, kw, s, d.pad, ow_n);
                let p_row = &mut patches[row * positions..][..positions];
                for oh in oh_range.clone() {
                    let ih = oh * s + kh - d.pad;
                    let x_row = &x_plane[ih * d.in_w..][..d.in_w];
                    let p = &mut p_row[oh * ow_n..][..ow_n];
                    if s == 1 {
                        let off = kw as isize - d.pad as isize;
                        for ow in ow_range.clone() {
                            p[ow] = x_row[(ow as isize + off) as usize];
                        }
                    } else {
                        for ow in ow_range.clone() {
                            p[ow] = x_row[ow * s + kw - d.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Accumulates patch-space gradients back into one image (reverse of
/// `im2col`; overlapping patches sum).
fn col2im<E: Scalar>(patches: &[E], d: &ConvDims, dx_image: &mut [E]) {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let positions = oh_n * ow_n;
    let s = d.stride;
    let mut row = 0;
    for c in 0..d.in_channels {
        let dx_plane = &mut dx_image[(c * d.in_h) * d.in_w..][..d.in_h * d.in_w];
        for kh in 0..d.kernel_h {
            let oh_range = valid_out_range(d.in_h, kh, s, d.pad, oh_n);
            for kw in 0..d.kernel_w {
                let ow_range = valid_out_range(d.in_w, kw, s, d.pad, ow_n);
                let p_row = &patches[row * positions..][..positions];
                for oh in oh_range.clone() {
                    let ih = oh * s + kh - d.pad;
                    let dx_row = &mut dx_plane[ih * d.in_w..][..d.in_w];
                    let p = &p_row[oh * ow_n..][..ow_n];
                    if s == 1 {
                        let off = kw as isize - d.pad as isize;
                        for ow in ow_range.clone() {
                            dx_row[(ow as isize + off) as usize] += p[ow];
                        }
                    } else {
                        for ow in ow_range.clone() {
                            dx_row[ow * s + kw - d.pad] += p[ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Unfolds the whole batch into `patches[K][N*positions]` so one matmul
/// covers every image; column block n holds image n's positions.
fn im2col_batch<E: Scalar>(x: &[E], d: &ConvDims, k: usize, positions: usize) -> Vec<E> {
    let image = d.in_channels * d.in_h * d.in_w;
    let cols = d.batch * positions;
    let mut all = vec![E::zero(); k * cols];
    let mut single = vec![E::zero(); k * positions];
    for n in 0..d.batch {
        im2col(&x[n * image..][..image], d, &mut single);
        for row in 0..k {
            all[row * cols + n * positions..row * cols + (n + 1) * positions]
                .copy_from_slice(&single[row * positions..(row + 1) * positions]);
        }
    }
    all
}

/// out[f][n*positions] -> out[n][f][positions].
fn scatter_batch_major<E: Scalar>(from: &[E], d: &ConvDims, positions: usize, to: &mut [E]) {
    let cols = d.batch * positions;
    for f in 0..d.out_channels {
        for n in 0..d.batch {
            let flat = &from[f * cols + n * positions..][..positions];
            let nchw = (n * d.out_channels + f) * positions;
            to[nchw..nchw + positions].copy_from_slice(flat);
        }
    }
}

/// Cross-correlation via batched im2col: out = W[F, K] x patches[K, N*pos].
pub fn conv2d<E: Scalar>(x: &[E], w: &[E], d: &ConvDims, out: &mut [E]) {
    let positions = d.out_h() * d.out_w();
    let k = d.in_channels * d.kernel_h * d.kernel_w;
    debug_assert_eq!(out.len(), d.batch * d.out_channels * positions);
    let patches = im2col_batch(x, d, k, positions);
    let mut flat = vec![E::zero(); d.out_channels * d.batch * positions];
    matmul(w, &patches, d.out_channels, k, d.batch * positions, &mut flat);
    scatter_batch_major(&flat, d, positions, out);
}

/// Backward through the same unfolding: dW += G * P^T, dP = W^T * G folded
/// back image by image.
pub fn conv2d_backward<E: Scalar>(
    x: &[E],
    w: &[E],
    g: &[E],
    d: &ConvDims,
    dx: &mut [E],
    dw: &mut [E],
) {
    let positions = d.out_h() * d.out_w();
    let k = d.in_channels * d.kernel_h * d.kernel_w;
    let image = d.in_channels * d.in_h * d.in_w;
    let cols = d.batch * positions;
    let patches = im2col_batch(x, d, k, positions);

    // Gradient in channel-major [F][N*positions] layout.
    let mut g_flat = vec![E::zero(); d.out_channels * cols];
    for n in 0..d.batch {
        for f in 0..d.out_channels {
            let nchw = (n * d.out_channels + f) * positions;
            g_flat[f * cols + n * positions..f * cols + (n + 1) * positions]
                .copy_from_slice(&g[nchw..nchw + positions]);
        }
    }

    let mut d_patches = vec![E::zero(); k * cols];
    matmul_backward(w, &patches, &g_flat, d.out_channels, k, cols, dw, &mut d_patches);

    let mut single = vec![E::zero(); k * positions];
    for n in 0..d.batch {
        for row in 0..k {
            single[row * positions..(row + 1) * positions].copy_from_slice(
                &d_patches[row * cols + n * positions..row * cols + (n + 1) * positions],
            );
        }
        col2im(&single, d, &mut dx[n * image..][..image]);
    }
}

/// Per-channel batch statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<E: Scalar> {
    pub mean: Vec<E>,
    /// Biased variance (divide by the per-channel element count).
    pub var: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Train-mode batch norm over NCHW: normalizes each channel by its batch
/// statistics. Returns the statistics so the caller can update running stats.
pub fn batch_norm_train<E: Scalar>(
    x: &[E],
    scale: &[E],
    shift: &[E],
    batch: usize,
    channels: usize,
    plane: usize, // H*W
    eps: E,
    out: &mut [E],
) -> BatchNormSaved<E> {
    let m = batch * plane;
    let m_e = E::from_f64(m as f64);
    let mut mean = vec![E::zero(); channels];
    let mut var = vec![E::zero(); channels];
    let mut inv_std = vec![E::zero(); channels];
    for c in 0..channels {
        let mut sum = E::zero();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in 0..plane {
                sum += x[base + i];
            }
        }
        let mu = sum / m_e;
        let mut vsum = E::zero();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in 0..plane {
                let d = x[base + i] - mu;
                vsum += d * d;
            }
        }
        let v = vsum / m_e;
        let is = (v + eps).sqrt().recip();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in 0..plane {
                out[base + i] = scale[c] * (x[base + i] - mu) * is + shift[c];
            }
        }
        mean[c] = mu;
        var[c] = v;
        inv_std[c] = is;
    }
    BatchNormSaved { mean, var, inv_std }
}

/// Backward through train-mode batch norm, differentiating through the batch
/// statistics: dx_i = scale/(m*std) * (m*g_i - sum(g) - xhat_i * sum(g*xhat)).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_train_backward<E: Scalar>(
    x: &[E],
    scale: &[E],
    saved: &BatchNormSaved<E>,
    g: &[E],
    batch: usize,
    channels: usize,
    plane: usize,
    dx: &mut [E],
    dscale: &mut [E],
    dshift: &mut [E],
) {
    let m = batch * plane;
    let m_e = E::from_f64(m as f64);
    for c in 0..channels {
        let (mu, is) = (saved.mean[c], saved.inv_std[c]);
        let mut g_sum = E::zero();
        let mut gx_sum = E::zero();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in 0..plane {
                let xhat = (x[base + i] - mu) * is;
                g_sum += g[base + i];
                gx_sum += g[base + i] * xhat;
            }
        }
        dscale[c] += gx_sum;
        dshift[c] += g_sum;
        let coef = scale[c] * is / m_e;
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in 0..plane {
                let xhat = (x[base + i] - mu) * is;
                dx[base + i] += coef * (m_e * g[base + i] - g_sum - xhat * gx_sum);
            }
        }
    }
}

/// Eval-mode batch norm: normalizes by the provided running statistics, which
/// are constants for differentiation.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval<E: Scalar>(
    x: &[E],
    scale: &[E],
    shift: &[E],
    running_mean: &[E],
    running_var: &[E],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: E,
    out: &mut [E],
) {
    for c in 0..channels {
        let is = (running_var[c] + eps).sqrt().recip();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in 0..plane {
                out[base + i] = scale[c] * (x[base + i] - running_mean[c]) * is + shift[c];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval_backward<E: Scalar>(
    x: &[E],
    scale: &[E],
    running_mean: &[E],
    running_var: &[E],
    g: &[E],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: E,
    dx: &mut [E],
    dscale: &mut [E],
    dshift: &mut [E],
) {
    for c in 0..channels {
        let is = (running_var[c] + eps).sqrt().recip();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in 0..plane {
                let xhat = (x[base + i] - running_mean[c]) * is;
                dx[base + i] += g[base + i] * scale[c] * is;
                dscale[c] += g[base + i] * xhat;
                dshift[c] += g[base + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = [1.0f64, 0.0, 0.0, 1.0];
        let b = [1.0f64, 2.0, 3.0, 4.0];
        let mut out = [0.0f64; 4];
        matmul(&i2, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_permutation_swaps_columns() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let p = [0.0f64, 1.0, 1.0, 0.0];
        let mut out = [0.0f64; 4];
        matmul(&a, &p, 2, 2, 2, &mut out);
        assert_eq!(out, [2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn conv_output_shape_formula() {
        // N=2,C=3,H=W=8, F=4, k=3, stride 2, pad 1 -> 2x4x4x4
        let d = ConvDims {
            batch: 2,
            in_channels: 3,
            in_h: 8,
            in_w: 8,
            out_channels: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((d.out_h(), d.out_w()), (4, 4));
    }

    #[test]
    fn conv_ones_kernel_sums_window() {
        // 3x3 all-ones kernel over a constant-1 5x5 input, pad 0 -> 3x3 of 9s,
        // checked against an independently coded direct-summation oracle.
        let d = ConvDims {
            batch: 1,
            in_channels: 1,
            in_h: 5,
            in_w: 5,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            pad: 0,
        };
        let x = vec![1.0f64; 25];
        let w = vec![1.0f64; 9];
        let mut out = vec![0.0f64; 9];
        conv2d(&x, &w, &d, &mut out);

        let mut oracle = vec![0.0f64; 9];
        for oh in 0..3 {
            for ow in 0..3 {
                let mut s = 0.0;
                for kh in 0..3 {
                    for kw in 0..3 {
                        s += x[(oh + kh) * 5 + (ow + kw)] * w[kh * 3 + kw];
                    }
                }
                oracle[oh * 3 + ow] = s;
            }
        }
        assert_eq!(out, oracle);
        assert!(out.iter().all(|&v| v == 9.0));
    }

    #[test]
    fn batch_norm_train_output_is_zero_mean() {
        let (n, c, plane) = (4, 2, 6);
        let x: Vec<f64> = (0..n * c * plane).map(|i| (i as f64 * 0.37).sin()).collect();
        let scale = vec![1.0; c];
        let shift = vec![0.0; c];
        let mut out = vec![0.0; x.len()];
        batch_norm_train(&x, &scale, &shift, n, c, plane, 1e-5, &mut out);
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                sum += out[base..base + plane].iter().sum::<f64>();
            }
            assert!((sum / (n * plane) as f64).abs() < 1e-5);
        }
    }
}
