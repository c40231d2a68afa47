//! Shared test support: independent brute-force oracles (naive loop
//! implementations, written without reference to the library's kernels) and
//! finite-difference helpers.
//!
//! Everything here works in `f64`; the oracles are deliberately slow and
//! simple so they can serve as ground truth.

#![allow(dead_code)]

use indexmap::IndexMap;
use ndarray::{Array1, Array4, ArrayD};
use rand::Rng;

pub const IN_EPS: f64 = 1e-5;

/// Naive direct convolution: seven nested loops, zero padding.
pub fn conv2d_naive(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Array4<f64> {
    let (n, c_in, h, wid) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let ho = (h + 2 * pad - (dil * (kh - 1) + 1)) / stride + 1;
    let wo = (wid + 2 * pad - (dil * (kw - 1) + 1)) / stride + 1;
    let mut y = Array4::<f64>::zeros((n, c_out, ho, wo));
    for ni in 0..n {
        for co in 0..c_out {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oh * stride + ki * dil) as isize - pad as isize;
                                let iw = (ow * stride + kj * dil) as isize - pad as isize;
                                if ih >= 0
                                    && iw >= 0
                                    && (ih as usize) < h
                                    && (iw as usize) < wid
                                {
                                    acc += x[[ni, ci, ih as usize, iw as usize]]
                                        * w[[co, ci, ki, kj]];
                                }
                            }
                        }
                    }
                    y[[ni, co, oh, ow]] = acc;
                }
            }
        }
    }
    y
}

/// Naive transposed convolution: scatter every input pixel through the
/// kernel onto the (virtually padded) output.
pub fn conv_transpose2d_naive(
    x: &Array4<f64>,
    w: &Array4<f64>, // [C_in, C_out, kh, kw]
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c_in, h, wid) = x.dim();
    let (_, c_out, kh, kw) = w.dim();
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wid - 1) * stride + kw - 2 * pad;
    let mut y = Array4::<f64>::zeros((n, c_out, ho, wo));
    for ni in 0..n {
        for co in 0..c_out {
            for ih in 0..h {
                for iw in 0..wid {
                    for ci in 0..c_in {
                        let v = x[[ni, ci, ih, iw]];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oh = (ih * stride + ki) as isize - pad as isize;
                                let ow = (iw * stride + kj) as isize - pad as isize;
                                if oh >= 0
                                    && ow >= 0
                                    && (oh as usize) < ho
                                    && (ow as usize) < wo
                                {
                                    y[[ni, co, oh as usize, ow as usize]] +=
                                        v * w[[ci, co, ki, kj]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for ni in 0..n {
            for co in 0..c_out {
                for oh in 0..ho {
                    for ow in 0..wo {
                        y[[ni, co, oh, ow]] += b[co];
                    }
                }
            }
        }
    }
    y
}

/// Naive per-(sample, channel) whitening with optional affine parameters.
pub fn instance_norm_naive(
    x: &Array4<f64>,
    gamma: Option<&Array1<f64>>,
    beta: Option<&Array1<f64>>,
    eps: f64,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut y = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mut mean = 0.0;
            for i in 0..h {
                for j in 0..w {
                    mean += x[[ni, ci, i, j]];
                }
            }
            mean /= m;
            let mut var = 0.0;
            for i in 0..h {
                for j in 0..w {
                    var += (x[[ni, ci, i, j]] - mean).powi(2);
                }
            }
            var /= m;
            let g = gamma.map_or(1.0, |g| g[ci]);
            let b = beta.map_or(0.0, |b| b[ci]);
            for i in 0..h {
                for j in 0..w {
                    y[[ni, ci, i, j]] = g * (x[[ni, ci, i, j]] - mean) / (var + eps).sqrt() + b;
                }
            }
        }
    }
    y
}

pub fn relu_naive(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn avg_pool2_naive(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    y[[ni, ci, i, j]] = (x[[ni, ci, 2 * i, 2 * j]]
                        + x[[ni, ci, 2 * i, 2 * j + 1]]
                        + x[[ni, ci, 2 * i + 1, 2 * j]]
                        + x[[ni, ci, 2 * i + 1, 2 * j + 1]])
                        / 4.0;
                }
            }
        }
    }
    y
}

/// Weight lookup helper for network oracles.
pub struct NamedTensors(pub IndexMap<String, ArrayD<f64>>);

impl NamedTensors {
    pub fn a4(&self, name: &str) -> Array4<f64> {
        self.0[name]
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap_or_else(|_| panic!("{name} is not rank 4"))
    }

    pub fn a1(&self, name: &str) -> Array1<f64> {
        self.0[name]
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap_or_else(|_| panic!("{name} is not rank 1"))
    }
}

/// Independent full-block oracle for the default fusion block: channel
/// reduction, four dilated branch convolutions, cumulative combination
/// convolutions, concat, 1x1 fusion and the residual sum. Weights are read
/// by name from the block's own parameter manifest, but every numeric step
/// here is naive loop code.
pub fn dmfb_forward_naive(
    params: &NamedTensors,
    x: &Array4<f64>,
    dilations: &[usize],
) -> Array4<f64> {
    let unit = |x: &Array4<f64>, w: &str, b: &str, pad: usize, dil: usize| -> Array4<f64> {
        let conv = conv2d_naive(x, &params.a4(w), Some(&params.a1(b)), 1, pad, dil);
        relu_naive(&instance_norm_naive(&conv, None, None, IN_EPS))
    };
    let x_red = unit(x, "block.reduce.w", "block.reduce.b", 1, 1);
    let xs: Vec<Array4<f64>> = dilations
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            unit(
                &x_red,
                &format!("block.branch{}.w", i + 1),
                &format!("block.branch{}.b", i + 1),
                d,
                d,
            )
        })
        .collect();
    // y_1 = x_1; y_2 = K_2(x_1 + x_2); y_i = K_i(y_{i-1} + x_i).
    let mut ys = vec![xs[0].clone()];
    let mut prev = xs[0].clone();
    for i in 1..4 {
        let sum = &prev + &xs[i];
        let yi = unit(
            &sum,
            &format!("block.k{}.w", i + 1),
            &format!("block.k{}.b", i + 1),
            1,
            1,
        );
        prev = yi.clone();
        ys.push(yi);
    }
    let views: Vec<_> = ys.iter().map(|y| y.view()).collect();
    let cat = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
    let post = relu_naive(&instance_norm_naive(&cat, None, None, IN_EPS));
    let fused = conv2d_naive(
        &post,
        &params.a4("block.fuse.w"),
        Some(&params.a1("block.fuse.b")),
        1,
        0,
        1,
    );
    let fused = instance_norm_naive(&fused, None, None, IN_EPS);
    &fused + x
}

/// Max abs elementwise difference, relative to the oracle's max magnitude.
pub fn rel_err_arrays(got: &Array4<f64>, want: &Array4<f64>) -> f64 {
    let mut max_diff = 0.0f64;
    let mut max_mag = 0.0f64;
    for (&a, &b) in got.iter().zip(want.iter()) {
        max_diff = max_diff.max((a - b).abs());
        max_mag = max_mag.max(b.abs());
    }
    max_diff / max_mag.max(1e-12)
}

pub fn rel_err_scalar(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-9)
}

/// Relative error between gradient vectors (max-norm).
pub fn rel_err_slices(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let mut max_diff = 0.0f64;
    let mut max_mag = 0.0f64;
    for (&a, &b) in got.iter().zip(want.iter()) {
        max_diff = max_diff.max((a - b).abs());
        max_mag = max_mag.max(b.abs());
    }
    max_diff / max_mag.max(1e-12)
}

/// Central finite differences of a scalar function over a flat buffer.
pub fn central_diff(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// Uniform random array in [lo, hi).
pub fn rand_array4(rng: &mut impl Rng, dim: (usize, usize, usize, usize), lo: f64, hi: f64) -> Array4<f64> {
    Array4::from_shape_simple_fn(dim, || rng.gen_range(lo..hi))
}
