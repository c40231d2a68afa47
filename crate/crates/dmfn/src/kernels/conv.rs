//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Weight layouts follow the usual conventions: convolution weights are
//! `[C_out, C_in, kh, kw]`, transposed-convolution weights `[C_in, C_out,
//! kh, kw]`. All kernels parallelize over batch samples; gradient
//! accumulations across samples are folded in index order so results are
//! independent of scheduling.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

use super::{for_each_indexed, map_indexed, Exec};
use crate::scalar::Scalar;

/// Output spatial size of a convolution along one axis.
pub fn conv2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> usize {
    let eff = dil * (kernel - 1) + 1;
    assert!(
        input + 2 * pad >= eff,
        "convolution input {input} too small for kernel {kernel} (dilation {dil}, pad {pad})"
    );
    (input + 2 * pad - eff) / stride + 1
}

/// Unfold one sample into a `[C*kh*kw, Ho*Wo]` patch matrix.
fn im2col<F: Scalar>(
    x: ArrayView3<F>,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    dil: usize,
    out_hw: (usize, usize),
) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let (kh, kw) = kernel;
    let (ho, wo) = out_hw;
    let mut cols = Array2::<F>::zeros((c_in * kh * kw, ho * wo));
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_idx = (c * kh + ki) * kw + kj;
                let mut row = cols.row_mut(row_idx);
                let row = row.as_slice_mut().expect("cols row contiguous");
                let x_plane = x.slice(s![c, .., ..]);
                for oh in 0..ho {
                    let ih = (oh * stride + ki * dil) as isize - pad as isize;
                    let seg = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        continue; // already zero
                    }
                    let x_row = x_plane.row(ih as usize);
                    let x_row = x_row.as_slice().expect("input row contiguous");
                    // valid ow range where 0 <= ow*stride + kj*dil - pad < w
                    let off = kj as isize * dil as isize - pad as isize;
                    let ow_lo = if off >= 0 {
                        0
                    } else {
                        ((-off) as usize + stride - 1) / stride
                    };
                    let ow_hi = {
                        let max_iw = w as isize - 1 - off;
                        if max_iw < 0 {
                            0
                        } else {
                            (max_iw as usize / stride + 1).min(wo)
                        }
                    };
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    if stride == 1 {
                        let iw0 = (ow_lo as isize + off) as usize;
                        seg[ow_lo..ow_hi].copy_from_slice(&x_row[iw0..iw0 + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            let iw = (ow as isize * stride as isize + off) as usize;
                            seg[ow] = x_row[iw];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto a sample.
fn col2im<F: Scalar>(
    cols: &Array2<F>,
    c_in: usize,
    hw: (usize, usize),
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    dil: usize,
    out_hw: (usize, usize),
) -> Array3<F> {
    let (h, w) = hw;
    let (kh, kw) = kernel;
    let (ho, wo) = out_hw;
    let mut x = Array3::<F>::zeros((c_in, h, w));
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_idx = (c * kh + ki) * kw + kj;
                let row = cols.row(row_idx);
                let row = row.as_slice().expect("cols row contiguous");
                for oh in 0..ho {
                    let ih = (oh * stride + ki * dil) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let mut x_row = x.slice_mut(s![c, ih as usize, ..]);
                    let x_row = x_row.as_slice_mut().expect("row contiguous");
                    let seg = &row[oh * wo..(oh + 1) * wo];
                    let off = kj as isize * dil as isize - pad as isize;
                    let ow_lo = if off >= 0 {
                        0
                    } else {
                        ((-off) as usize + stride - 1) / stride
                    };
                    let ow_hi = {
                        let max_iw = w as isize - 1 - off;
                        if max_iw < 0 {
                            0
                        } else {
                            (max_iw as usize / stride + 1).min(wo)
                        }
                    };
                    for ow in ow_lo..ow_hi {
                        let iw = (ow as isize * stride as isize + off) as usize;
                        x_row[iw] = x_row[iw] + seg[ow];
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward pass.
pub fn conv2d<F: Scalar>(
    exec: Exec,
    x: &Array4<F>,
    w: &ArrayView4<F>,
    bias: Option<&Array1<F>>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Array4<F> {
    let (n, c_in, h, wdt) = x.dim();
    let (c_out, wc_in, kh, kw) = w.dim();
    assert_eq!(c_in, wc_in, "conv2d channel mismatch");
    let ho = conv2d_out_size(h, kh, stride, pad, dil);
    let wo = conv2d_out_size(wdt, kw, stride, pad, dil);
    let w_mat = w
        .view()
        .into_shape((c_out, c_in * kh * kw))
        .expect("conv weight contiguous");
    let mut y = Array4::<F>::zeros((n, c_out, ho, wo));
    let samples: Vec<_> = y.outer_iter_mut().zip(x.outer_iter()).collect();
    for_each_indexed(exec, samples, |_, (yn, xn)| {
        let cols = im2col(xn, (kh, kw), stride, pad, dil, (ho, wo));
        let mut y_mat = yn
            .into_shape((c_out, ho * wo))
            .expect("output contiguous");
        general_mat_mul(F::one(), &w_mat, &cols, F::zero(), &mut y_mat);
        if let Some(b) = bias {
            for (co, mut row) in y_mat.outer_iter_mut().enumerate() {
                let bv = b[co];
                row.mapv_inplace(|v| v + bv);
            }
        }
    });
    y
}

/// Convolution backward pass.
///
/// Returns the input gradient (when `need_input_grad`) and the parameter
/// gradients (when `need_param_grad`). The bias gradient is always the sum of
/// `gy` over batch and space.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    exec: Exec,
    x: &Array4<F>,
    w: &ArrayView4<F>,
    gy: &Array4<F>,
    stride: usize,
    pad: usize,
    dil: usize,
    need_input_grad: bool,
    need_param_grad: bool,
) -> (Option<Array4<F>>, Option<(Array4<F>, Array1<F>)>) {
    let (n, c_in, h, wdt) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (gn, gc, ho, wo) = gy.dim();
    assert_eq!((gn, gc), (n, c_out), "conv2d gradient shape mismatch");
    let w_mat = w
        .view()
        .into_shape((c_out, c_in * kh * kw))
        .expect("conv weight contiguous");

    let gx = need_input_grad.then(|| {
        let mut gx = Array4::<F>::zeros((n, c_in, h, wdt));
        let samples: Vec<_> = gx.outer_iter_mut().zip(gy.outer_iter()).collect();
        for_each_indexed(exec, samples, |_, (mut gxn, gyn)| {
            let gy_mat = gyn
                .into_shape((c_out, ho * wo))
                .expect("gy contiguous");
            let dcols = w_mat.t().dot(&gy_mat);
            let dx = col2im(&dcols, c_in, (h, wdt), (kh, kw), stride, pad, dil, (ho, wo));
            gxn.assign(&dx);
        });
        gx
    });

    let gparam = need_param_grad.then(|| {
        let parts = map_indexed(
            exec,
            x.outer_iter().zip(gy.outer_iter()).collect::<Vec<_>>(),
            |_, (xn, gyn)| {
                let cols = im2col(xn, (kh, kw), stride, pad, dil, (ho, wo));
                let gy_mat = gyn
                    .into_shape((c_out, ho * wo))
                    .expect("gy contiguous");
                let dw = gy_mat.dot(&cols.t());
                let db = gy_mat.sum_axis(Axis(1));
                (dw, db)
            },
        );
        let mut dw = Array2::<F>::zeros((c_out, c_in * kh * kw));
        let mut db = Array1::<F>::zeros(c_out);
        for (pw, pb) in parts {
            dw += &pw;
            db += &pb;
        }
        let dw = dw
            .into_shape((c_out, c_in, kh, kw))
            .expect("weight grad shape");
        (dw, db)
    });

    (gx, gparam)
}

/// Transposed convolution forward pass (`[C_in, C_out, kh, kw]` weights).
///
/// Output spatial size is `(in - 1) * stride - 2 * pad + kernel`.
pub fn conv_transpose2d<F: Scalar>(
    exec: Exec,
    x: &Array4<F>,
    w: &ArrayView4<F>,
    bias: Option<&Array1<F>>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c_in, h, wdt) = x.dim();
    let (wc_in, c_out, kh, kw) = w.dim();
    assert_eq!(c_in, wc_in, "conv_transpose2d channel mismatch");
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wdt - 1) * stride + kw - 2 * pad;
    let w_mat = w
        .view()
        .into_shape((c_in, c_out * kh * kw))
        .expect("tconv weight contiguous");
    let mut y = Array4::<F>::zeros((n, c_out, ho, wo));
    let samples: Vec<_> = y.outer_iter_mut().zip(x.outer_iter()).collect();
    for_each_indexed(exec, samples, |_, (mut yn, xn)| {
        let x_mat = xn.into_shape((c_in, h * wdt)).expect("input contiguous");
        let cols = w_mat.t().dot(&x_mat);
        let out = col2im(&cols, c_out, (ho, wo), (kh, kw), stride, pad, 1, (h, wdt));
        yn.assign(&out);
        if let Some(b) = bias {
            for (co, mut plane) in yn.outer_iter_mut().enumerate() {
                let bv = b[co];
                plane.mapv_inplace(|v| v + bv);
            }
        }
    });
    y
}

/// Transposed-convolution backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<F: Scalar>(
    exec: Exec,
    x: &Array4<F>,
    w: &ArrayView4<F>,
    gy: &Array4<F>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
    need_param_grad: bool,
) -> (Option<Array4<F>>, Option<(Array4<F>, Array1<F>)>) {
    let (_, c_in, h, wdt) = x.dim();
    let (_, c_out, kh, kw) = w.dim();
    let (_, _, ho, wo) = gy.dim();

    // d/dx of y = col2im(W^T x) is the plain convolution of gy with W.
    let gx = need_input_grad.then(|| conv2d(exec, gy, w, None, stride, pad, 1));

    let gparam = need_param_grad.then(|| {
        let parts = map_indexed(
            exec,
            x.outer_iter().zip(gy.outer_iter()).collect::<Vec<_>>(),
            |_, (xn, gyn)| {
                let x_mat = xn.into_shape((c_in, h * wdt)).expect("input contiguous");
                let gcols = im2col(gyn.view(), (kh, kw), stride, pad, 1, (h, wdt));
                let dw = x_mat.dot(&gcols.t()); // [C_in, C_out*kh*kw]
                let db = gyn
                    .into_shape((c_out, ho * wo))
                    .expect("gy contiguous")
                    .sum_axis(Axis(1));
                (dw, db)
            },
        );
        let mut dw = Array2::<F>::zeros((c_in, c_out * kh * kw));
        let mut db = Array1::<F>::zeros(c_out);
        for (pw, pb) in parts {
            dw += &pw;
            db += &pb;
        }
        let dw = dw
            .into_shape((c_in, c_out, kh, kw))
            .expect("weight grad shape");
        (dw, db)
    });

    (gx, gparam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn out_size_matches_expectations() {
        assert_eq!(conv2d_out_size(8, 3, 1, 1, 1), 8);
        assert_eq!(conv2d_out_size(8, 4, 2, 1, 1), 4);
        assert_eq!(conv2d_out_size(8, 3, 1, 8, 8), 8); // dilation 8, pad 8
        assert_eq!(conv2d_out_size(8, 5, 1, 2, 1), 8);
    }

    #[test]
    fn identity_kernel_passes_through() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Array::linspace(0.0f64, 1.0, 2 * 3 * 4 * 4)
            .into_shape((2, 3, 4, 4))
            .unwrap();
        let mut w = Array4::<f64>::zeros((3, 3, 1, 1));
        for c in 0..3 {
            w[[c, c, 0, 0]] = 1.0;
        }
        let y = conv2d(Exec::Sequential, &x, &w.view(), None, 1, 0, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn transpose_doubles_spatial_size() {
        let x = Array4::<f32>::zeros((1, 2, 5, 7));
        let w = Array4::<f32>::zeros((2, 3, 4, 4));
        let y = conv_transpose2d(Exec::Sequential, &x, &w.view(), None, 2, 1);
        assert_eq!(y.dim(), (1, 3, 10, 14));
    }
}
