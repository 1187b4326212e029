//! Element-wise and normalization ops with their backward rules.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Zero-norm channel vectors pass through unchanged; positive norms get this
/// epsilon added before division.
const L2_EPS: f64 = 1e-12;

/// Normalize each spatial position's channel vector to unit length, then
/// scale channel-wise by a learned vector.
pub fn l2norm_scale<S: Scalar>(input: &Tensor<S>, scale: &[S]) -> Result<Tensor<S>> {
    let sh = input.shape();
    if scale.len() != sh.c {
        return Err(Error::Shape(format!(
            "scale length {} does not match channel count {} (input {})",
            scale.len(),
            sh.c,
            sh
        )));
    }
    let mut out = Tensor::zeros(sh);
    let plane = sh.h * sh.w;
    let eps = S::from_f64(L2_EPS);
    for b in 0..sh.n {
        let item = input.batch_item(b);
        let oitem = out.batch_item_mut(b);
        for p in 0..plane {
            let mut sq = S::ZERO;
            for c in 0..sh.c {
                let v = item[c * plane + p];
                sq += v * v;
            }
            if sq == S::ZERO {
                continue; // dead position: pass zeros through
            }
            let inv = S::ONE / (sq.sqrt() + eps);
            for c in 0..sh.c {
                oitem[c * plane + p] = item[c * plane + p] * inv * scale[c];
            }
        }
    }
    out.debug_assert_finite("l2norm_scale");
    Ok(out)
}

/// Gradients of [`l2norm_scale`] w.r.t. input and scale (accumulating).
pub fn l2norm_scale_backward<S: Scalar>(
    input: &Tensor<S>,
    scale: &[S],
    grad_out: &Tensor<S>,
    grad_input: &mut [S],
    grad_scale: &mut [S],
) {
    let sh = input.shape();
    let plane = sh.h * sh.w;
    let eps = S::from_f64(L2_EPS);
    let item_len = sh.c * plane;
    for b in 0..sh.n {
        let x = input.batch_item(b);
        let g = grad_out.batch_item(b);
        let gx = &mut grad_input[b * item_len..(b + 1) * item_len];
        for p in 0..plane {
            let mut sq = S::ZERO;
            for c in 0..sh.c {
                let v = x[c * plane + p];
                sq += v * v;
            }
            if sq == S::ZERO {
                continue;
            }
            let norm = sq.sqrt() + eps;
            let inv = S::ONE / norm;
            // proj = sum_k s_k * g_k * x_k
            let mut proj = S::ZERO;
            for c in 0..sh.c {
                proj += scale[c] * g[c * plane + p] * x[c * plane + p];
            }
            let inv3 = inv * inv * inv;
            for c in 0..sh.c {
                let xv = x[c * plane + p];
                let gv = g[c * plane + p];
                gx[c * plane + p] += scale[c] * gv * inv - xv * proj * inv3;
                grad_scale[c] += gv * xv * inv;
            }
        }
    }
}

/// Cell-wise sum of two identically shaped tensors.
pub fn elementwise_add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "elementwise_add on mismatched shapes {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(a.shape());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x + y;
    }
    out.debug_assert_finite("elementwise_add");
    Ok(out)
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(input.shape());
    for (o, &x) in out.data_mut().iter_mut().zip(input.data()) {
        *o = x.max_s(S::ZERO);
    }
    out
}

/// Backward of relu using the saved forward input.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &[S], grad_input: &mut [S]) {
    for ((gi, &x), &g) in grad_input.iter_mut().zip(input.data()).zip(grad_out) {
        if x > S::ZERO {
            *gi += g;
        }
    }
}

/// 2x2 max pooling with stride 2. Records the argmax flat index per output
/// cell for the backward pass; ties resolve to the first maximum in window
/// scan order.
pub fn maxpool2d<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let sh = input.shape();
    if sh.h % 2 != 0 || sh.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2d requires even spatial extents, got {}",
            sh
        )));
    }
    let osh = Shape::new(sh.n, sh.c, sh.h / 2, sh.w / 2);
    let mut out = Tensor::zeros(osh);
    let mut argmax = vec![0u32; osh.numel()];
    for b in 0..sh.n {
        for c in 0..sh.c {
            for oy in 0..osh.h {
                for ox in 0..osh.w {
                    let mut best = S::from_f64(f64::NEG_INFINITY);
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let iy = oy * 2 + dy;
                            let ix = ox * 2 + dx;
                            let idx = sh.index(b, c, iy, ix);
                            let v = input.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = osh.index(b, c, oy, ox);
                    out.data_mut()[oidx] = best;
                    argmax[oidx] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<S: Scalar>(argmax: &[u32], grad_out: &[S], grad_input: &mut [S]) {
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_input[idx as usize] += g;
    }
}

/// Row-wise softmax over an (rows x cols) matrix, numerically stabilized.
pub fn softmax_rows<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(data.len(), rows * cols);
    let mut out = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.max_s(v);
        }
        let mut sum = S::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        let inv = S::ONE / sum;
        orow.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2norm_three_four_five() {
        let input = Tensor::new(Shape::new(1, 2, 1, 1), vec![3.0f64, 4.0]).unwrap();
        let out = l2norm_scale(&input, &[1.0, 1.0]).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-9);
        assert!((out.data()[1] - 0.8).abs() < 1e-9);

        let scaled = l2norm_scale(&input, &[20.0, 20.0]).unwrap();
        assert!((scaled.data()[0] - 12.0).abs() < 1e-9);
        assert!((scaled.data()[1] - 16.0).abs() < 1e-9);
    }

    #[test]
    fn l2norm_zero_position_passes_through() {
        let input = Tensor::new(Shape::new(1, 2, 1, 2), vec![0.0f64, 3.0, 0.0, 4.0]).unwrap();
        let out = l2norm_scale(&input, &[5.0, 5.0]).unwrap();
        // position 0 is the zero vector, position 1 is (3,4)
        assert_eq!(out.at(0, 0, 0, 0), 0.0);
        assert_eq!(out.at(0, 1, 0, 0), 0.0);
        assert!((out.at(0, 0, 0, 1) - 3.0).abs() < 1e-9);
        assert!((out.at(0, 1, 0, 1) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn add_identity_and_mismatch() {
        let a = Tensor::new(Shape::new(1, 1, 1, 3), vec![1.0f64, -2.0, 3.0]).unwrap();
        let z = Tensor::zeros(a.shape());
        assert_eq!(elementwise_add(&a, &z).unwrap().data(), a.data());

        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 1));
        let msg = elementwise_add(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("1x1x1x3") && msg.contains("1x1x3x1"), "{msg}");
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_picks_window_max_and_rejects_odd() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = maxpool2d(&x).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);

        let odd = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
        assert!(maxpool2d(&odd).is_err());
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let out = softmax_rows(&[0.0f64, 0.0], 1, 2);
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);

        let data = [1.0f64, -3.0, 0.5, 2.0, 100.0, 99.0, 98.0, 97.0];
        let sm = softmax_rows(&data, 2, 4);
        for r in 0..2 {
            let sum: f64 = sm[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }
}
