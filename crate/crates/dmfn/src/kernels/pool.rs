//! Pooling kernels: 2x2 max/average pooling and global average pooling.

use ndarray::{Array2, Array4, Axis};

use super::{for_each_indexed, Exec};
use crate::scalar::Scalar;

/// 2x2 stride-2 max pooling. Returns the pooled map and the winner position
/// code (0..4, row-major within each window) needed for backprop.
pub fn max_pool2<F: Scalar>(exec: Exec, x: &Array4<F>) -> (Array4<F>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<F>::zeros((n, c, ho, wo));
    let mut idx = Array4::<u8>::zeros((n, c, ho, wo));
    let samples: Vec<_> = y
        .outer_iter_mut()
        .zip(idx.outer_iter_mut())
        .zip(x.outer_iter())
        .collect();
    for_each_indexed(exec, samples, |_, ((mut yn, mut in_), xn)| {
        for ci in 0..c {
            let xc = xn.index_axis(Axis(0), ci);
            for oh in 0..ho {
                for ow in 0..wo {
                    let (i, j) = (oh * 2, ow * 2);
                    let vals = [
                        xc[[i, j]],
                        xc[[i, j + 1]],
                        xc[[i + 1, j]],
                        xc[[i + 1, j + 1]],
                    ];
                    let mut best = 0usize;
                    for k in 1..4 {
                        if vals[k] > vals[best] {
                            best = k;
                        }
                    }
                    yn[[ci, oh, ow]] = vals[best];
                    in_[[ci, oh, ow]] = best as u8;
                }
            }
        }
    });
    (y, idx)
}

/// Backward pass of [`max_pool2`]: route gradients to the winners.
pub fn max_pool2_backward<F: Scalar>(
    exec: Exec,
    gy: &Array4<F>,
    idx: &Array4<u8>,
    in_hw: (usize, usize),
) -> Array4<F> {
    let (n, c, ho, wo) = gy.dim();
    let (h, w) = in_hw;
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    let samples: Vec<_> = gx
        .outer_iter_mut()
        .zip(gy.outer_iter().zip(idx.outer_iter()))
        .collect();
    for_each_indexed(exec, samples, |_, (mut gxn, (gyn, idxn))| {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let k = idxn[[ci, oh, ow]] as usize;
                    let (di, dj) = (k / 2, k % 2);
                    let (i, j) = (oh * 2 + di, ow * 2 + dj);
                    gxn[[ci, i, j]] = gxn[[ci, i, j]] + gyn[[ci, oh, ow]];
                }
            }
        }
    });
    gx
}

/// 2x2 stride-2 average pooling. Constants are preserved exactly up to
/// roundoff, and outputs stay inside the input's value range.
pub fn avg_pool2<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::from_f64(0.25);
    Array4::from_shape_fn((n, c, ho, wo), |(ni, ci, oh, ow)| {
        let (i, j) = (oh * 2, ow * 2);
        (x[[ni, ci, i, j]] + x[[ni, ci, i, j + 1]] + x[[ni, ci, i + 1, j]]
            + x[[ni, ci, i + 1, j + 1]])
            * quarter
    })
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let m = F::from_usize(h * w);
    let mut y = Array2::<F>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let mut sum = F::zero();
            for &v in plane.iter() {
                sum = sum + v;
            }
            y[[ni, ci]] = sum / m;
        }
    }
    y
}

/// Backward pass of [`global_avg_pool`].
pub fn global_avg_pool_backward<F: Scalar>(gy: &Array2<F>, in_hw: (usize, usize)) -> Array4<F> {
    let (n, c) = gy.dim();
    let (h, w) = in_hw;
    let m = F::from_usize(h * w);
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| gy[[ni, ci]] / m)
}
