//! Small dense matrix kernels backing the im2col convolution path.
//!
//! All loops are written in axpy / dot form so LLVM autovectorizes them;
//! there is no threading here (parallelism happens across graph instances).

use crate::tensor::Scalar;

/// c[m,n] += a[m,k] . b[k,n]
pub fn matmul_nn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[k,m]^T . b[k,n]
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] . b[n,k]^T
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// Unfold padded (c,h,w) windows into a (c*k*k, oh*ow) patch matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kernel * kernel * oh * ow);
    let plane = oh * ow;
    for ci in 0..c {
        let img = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ci * kernel + ky) * kernel + kx) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = S::ZERO);
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            S::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a (c*k*k, oh*ow) patch matrix back onto the (c,h,w) image grid.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    debug_assert_eq!(out.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kernel * kernel * oh * ow);
    let plane = oh * ow;
    for ci in 0..c {
        let img = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ci * kernel + ky) * kernel + kx) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_matches_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_nn_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn tn_and_nt_match_nn() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut c_ref = vec![0.0; m * n];
        matmul_nn_acc(&a, &b, &mut c_ref, m, k, n);

        // a laid out transposed as (k, m)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(c_ref.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // b laid out transposed as (n, k)
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_nt_acc(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(c_ref.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_then_col2im_counts_window_coverage() {
        // col2im(im2col(ones)) at each pixel equals the number of windows
        // covering it; with kernel 1 stride 1 that is exactly 1 everywhere.
        let (c, h, w) = (2, 4, 4);
        let input = vec![1.0f64; c * h * w];
        let mut cols = vec![0.0; c * h * w];
        im2col(&input, c, h, w, 1, 1, 0, h, w, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im_acc(&cols, c, h, w, 1, 1, 0, h, w, &mut back);
        assert_eq!(back, input);
    }
}
