//! Convolution and transposed convolution, forward and backward.
//!
//! Two forward paths exist: a direct nested-loop implementation and an
//! im2col-to-matmul lowering. The default entry points use im2col; the
//! direct path stays available as a cross-check (the two must agree to
//! 1e-5 in f32, and the test suite holds them to that).

use serde::{Deserialize, Serialize};

use super::matmul::{col2im_acc, im2col, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Geometry of one (de)convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl ConvParams {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvParams {
            out_channels,
            kernel,
            stride,
            pad,
            transposed: false,
        }
    }

    pub fn deconv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvParams {
            out_channels,
            kernel,
            stride,
            pad,
            transposed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be positive".into()));
        }
        if !matches!(self.kernel, 1..=3) {
            return Err(Error::Config(format!(
                "kernel extent {} outside {{1,2,3}}",
                self.kernel
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!(
                "stride {} outside {{1,2}}",
                self.stride
            )));
        }
        if self.pad > 1 {
            return Err(Error::Config(format!("pad {} outside {{0,1}}", self.pad)));
        }
        Ok(())
    }

    /// Output extent of one spatial axis.
    pub fn out_extent(&self, h: usize) -> Result<usize> {
        self.validate()?;
        if self.transposed {
            // (h - 1) * stride - 2 * pad + kernel
            let raw = (h as isize - 1) * self.stride as isize - 2 * self.pad as isize
                + self.kernel as isize;
            if h == 0 || raw < 1 {
                return Err(Error::Shape(format!(
                    "transposed conv (k{} s{} p{}) on extent {} yields non-positive extent {}",
                    self.kernel, self.stride, self.pad, h, raw
                )));
            }
            Ok(raw as usize)
        } else {
            let padded = h + 2 * self.pad;
            if padded < self.kernel {
                return Err(Error::Shape(format!(
                    "conv (k{} s{} p{}) does not fit extent {}",
                    self.kernel, self.stride, self.pad, h
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        }
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(
            input.n,
            self.out_channels,
            self.out_extent(input.h)?,
            self.out_extent(input.w)?,
        ))
    }

    /// Weight shape: (out, in, k, k) for conv, (in, out, k, k) for deconv.
    pub fn weight_shape(&self, in_channels: usize) -> Shape {
        if self.transposed {
            Shape::new(in_channels, self.out_channels, self.kernel, self.kernel)
        } else {
            Shape::new(self.out_channels, in_channels, self.kernel, self.kernel)
        }
    }

    pub fn weight_count(&self, in_channels: usize) -> usize {
        in_channels * self.out_channels * self.kernel * self.kernel
    }
}

fn check_conv_args<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &[S],
    p: &ConvParams,
) -> Result<Shape> {
    p.validate()?;
    let ws = weight.shape();
    let expect = p.weight_shape(input.shape().c);
    if ws != expect {
        return Err(Error::Shape(format!(
            "weight shape {} does not match input {} under {} (expected {})",
            ws,
            input.shape(),
            if p.transposed { "deconv" } else { "conv" },
            expect
        )));
    }
    if bias.len() != p.out_channels {
        return Err(Error::Shape(format!(
            "bias length {} does not match out_channels {}",
            bias.len(),
            p.out_channels
        )));
    }
    p.out_shape(input.shape())
}

/// Forward convolution via im2col lowering.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &[S],
    p: &ConvParams,
) -> Result<Tensor<S>> {
    if p.transposed {
        return Err(Error::Config("conv2d called with transposed params".into()));
    }
    let out_shape = check_conv_args(input, weight, bias, p)?;
    let ish = input.shape();
    let (c, h, w) = (ish.c, ish.h, ish.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let ckk = c * p.kernel * p.kernel;
    let plane = oh * ow;

    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![S::ZERO; ckk * plane];
    for b in 0..ish.n {
        im2col(
            input.batch_item(b),
            c,
            h,
            w,
            p.kernel,
            p.stride,
            p.pad,
            oh,
            ow,
            &mut cols,
        );
        let item = out.batch_item_mut(b);
        matmul_nn_acc(weight.data(), &cols, item, p.out_channels, ckk, plane);
        for co in 0..p.out_channels {
            let bv = bias[co];
            item[co * plane..(co + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
    out.debug_assert_finite("conv2d");
    Ok(out)
}

/// Forward convolution as plain nested loops (reference path).
pub fn conv2d_direct<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &[S],
    p: &ConvParams,
) -> Result<Tensor<S>> {
    if p.transposed {
        return Err(Error::Config("conv2d called with transposed params".into()));
    }
    let out_shape = check_conv_args(input, weight, bias, p)?;
    let ish = input.shape();
    let mut out = Tensor::zeros(out_shape);
    for b in 0..ish.n {
        for co in 0..p.out_channels {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = bias[co];
                    for ci in 0..ish.c {
                        for ky in 0..p.kernel {
                            for kx in 0..p.kernel {
                                let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                                let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                                if iy < 0
                                    || iy >= ish.h as isize
                                    || ix < 0
                                    || ix >= ish.w as isize
                                {
                                    continue;
                                }
                                acc += input.at(b, ci, iy as usize, ix as usize)
                                    * weight.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    out.debug_assert_finite("conv2d_direct");
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
///
/// Contributions are accumulated (`+=`) so callers can sum across a batch.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    p: &ConvParams,
    grad_out: &Tensor<S>,
    grad_input: &mut [S],
    grad_weight: &mut [S],
    grad_bias: &mut [S],
) {
    let ish = input.shape();
    let osh = grad_out.shape();
    let (c, h, w) = (ish.c, ish.h, ish.w);
    let (oh, ow) = (osh.h, osh.w);
    let ckk = c * p.kernel * p.kernel;
    let plane = oh * ow;
    debug_assert_eq!(grad_input.len(), ish.numel());
    debug_assert_eq!(grad_weight.len(), weight.numel());
    debug_assert_eq!(grad_bias.len(), p.out_channels);

    let item = c * h * w;
    let mut cols = vec![S::ZERO; ckk * plane];
    let mut dcols = vec![S::ZERO; ckk * plane];
    for b in 0..ish.n {
        let g = grad_out.batch_item(b);
        // dW += g . cols^T
        im2col(
            input.batch_item(b),
            c,
            h,
            w,
            p.kernel,
            p.stride,
            p.pad,
            oh,
            ow,
            &mut cols,
        );
        matmul_nt_acc(g, &cols, grad_weight, p.out_channels, plane, ckk);
        // db += row sums of g
        for co in 0..p.out_channels {
            let mut acc = S::ZERO;
            for &v in &g[co * plane..(co + 1) * plane] {
                acc += v;
            }
            grad_bias[co] += acc;
        }
        // dX += col2im(W^T . g)
        dcols.iter_mut().for_each(|v| *v = S::ZERO);
        matmul_tn_acc(weight.data(), g, &mut dcols, ckk, p.out_channels, plane);
        col2im_acc(
            &dcols,
            c,
            h,
            w,
            p.kernel,
            p.stride,
            p.pad,
            oh,
            ow,
            &mut grad_input[b * item..(b + 1) * item],
        );
    }
}

/// Forward transposed convolution (the gradient-of-conv scatter formulation).
///
/// Weight layout is (in_channels, out_channels, k, k).
pub fn conv_transpose2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &[S],
    p: &ConvParams,
) -> Result<Tensor<S>> {
    if !p.transposed {
        return Err(Error::Config(
            "conv_transpose2d called with non-transposed params".into(),
        ));
    }
    let out_shape = check_conv_args(input, weight, bias, p)?;
    let ish = input.shape();
    let (ci, ih, iw) = (ish.c, ish.h, ish.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let cokk = p.out_channels * p.kernel * p.kernel;
    let plane = ih * iw;
    let oplane = oh * ow;

    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![S::ZERO; cokk * plane];
    for b in 0..ish.n {
        // cols = W^T (cokk, ci) . in (ci, ih*iw), then scatter onto the output grid
        cols.iter_mut().for_each(|v| *v = S::ZERO);
        matmul_tn_acc(weight.data(), input.batch_item(b), &mut cols, cokk, ci, plane);
        let item = out.batch_item_mut(b);
        col2im_acc(
            &cols,
            p.out_channels,
            oh,
            ow,
            p.kernel,
            p.stride,
            p.pad,
            ih,
            iw,
            item,
        );
        for co in 0..p.out_channels {
            let bv = bias[co];
            item[co * oplane..(co + 1) * oplane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
    out.debug_assert_finite("conv_transpose2d");
    Ok(out)
}

/// Transposed convolution as an explicit scatter-accumulate loop (reference path).
pub fn conv_transpose2d_direct<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &[S],
    p: &ConvParams,
) -> Result<Tensor<S>> {
    if !p.transposed {
        return Err(Error::Config(
            "conv_transpose2d called with non-transposed params".into(),
        ));
    }
    let out_shape = check_conv_args(input, weight, bias, p)?;
    let ish = input.shape();
    let mut out = Tensor::zeros(out_shape);
    for b in 0..ish.n {
        for co in 0..p.out_channels {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    out.set(b, co, oy, ox, bias[co]);
                }
            }
        }
        for ci in 0..ish.c {
            for y in 0..ish.h {
                for x in 0..ish.w {
                    let v = input.at(b, ci, y, x);
                    for co in 0..p.out_channels {
                        for ky in 0..p.kernel {
                            for kx in 0..p.kernel {
                                let oy = (y * p.stride + ky) as isize - p.pad as isize;
                                let ox = (x * p.stride + kx) as isize - p.pad as isize;
                                if oy < 0
                                    || oy >= out_shape.h as isize
                                    || ox < 0
                                    || ox >= out_shape.w as isize
                                {
                                    continue;
                                }
                                let cur = out.at(b, co, oy as usize, ox as usize);
                                out.set(
                                    b,
                                    co,
                                    oy as usize,
                                    ox as usize,
                                    cur + v * weight.at(ci, co, ky, kx),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    out.debug_assert_finite("conv_transpose2d_direct");
    Ok(out)
}

/// Gradients of [`conv_transpose2d`]; accumulates like [`conv2d_backward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    p: &ConvParams,
    grad_out: &Tensor<S>,
    grad_input: &mut [S],
    grad_weight: &mut [S],
    grad_bias: &mut [S],
) {
    let ish = input.shape();
    let osh = grad_out.shape();
    let (ci, ih, iw) = (ish.c, ish.h, ish.w);
    let (oh, ow) = (osh.h, osh.w);
    let cokk = p.out_channels * p.kernel * p.kernel;
    let plane = ih * iw;
    let oplane = oh * ow;
    debug_assert_eq!(grad_input.len(), ish.numel());
    debug_assert_eq!(grad_weight.len(), weight.numel());
    debug_assert_eq!(grad_bias.len(), p.out_channels);

    let item = ci * ih * iw;
    let mut gcols = vec![S::ZERO; cokk * plane];
    for b in 0..ish.n {
        let g = grad_out.batch_item(b);
        // gcols gathers the output-grad windows seen by each input cell
        im2col(
            g,
            p.out_channels,
            oh,
            ow,
            p.kernel,
            p.stride,
            p.pad,
            ih,
            iw,
            &mut gcols,
        );
        // dIn += W (ci, cokk) . gcols (cokk, ih*iw)
        matmul_nn_acc(
            weight.data(),
            &gcols,
            &mut grad_input[b * item..(b + 1) * item],
            ci,
            cokk,
            plane,
        );
        // dW += in (ci, ih*iw) . gcols^T (ih*iw, cokk)
        matmul_nt_acc(
            input.batch_item(b),
            &gcols,
            grad_weight,
            ci,
            plane,
            cokk,
        );
        for co in 0..p.out_channels {
            let mut acc = S::ZERO;
            for &v in &g[co * oplane..(co + 1) * oplane] {
                acc += v;
            }
            grad_bias[co] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv_returns_input() {
        let input = Tensor::new(
            Shape::new(1, 1, 3, 3),
            vec![1.0f64, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let weight = Tensor::new(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let p = ConvParams::conv(1, 1, 1, 0);
        let out = conv2d(&input, &weight, &[0.0], &p).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let input = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let weight = Tensor::<f64>::zeros(Shape::new(2, 2, 3, 3));
        let p = ConvParams::conv(2, 3, 1, 1);
        let err = conv2d(&input, &weight, &[0.0, 0.0], &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x2x3x3"), "{msg}");
        assert!(msg.contains("1x3x4x4"), "{msg}");
    }

    #[test]
    fn deconv_output_extent_formula() {
        // 10 -> (10-1)*2 - 2 + 3 = 19
        let p = ConvParams::deconv(1, 3, 2, 1);
        assert_eq!(p.out_extent(10).unwrap(), 19);
        // Kernel 2, pad 0 doubles: 4 -> 8
        let p2 = ConvParams::deconv(1, 2, 2, 0);
        assert_eq!(p2.out_extent(4).unwrap(), 8);
    }

    #[test]
    fn deconv_rejects_non_positive_extent() {
        let p = ConvParams::deconv(1, 2, 2, 1);
        assert!(p.out_extent(1).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let input = Tensor::<f64>::zeros(Shape::new(1, 2, 10, 10));
        let weight = Tensor::filled(Shape::new(2, 3, 3, 3), 0.5);
        let p = ConvParams::deconv(3, 3, 2, 1);
        let out = conv_transpose2d(&input, &weight, &[0.0; 3], &p).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 19, 19));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
