//! Image resampling: differentiable bilinear resize and box-average (area)
//! downscaling for the data pipeline.

use ndarray::{Array4, Axis};

use super::{for_each_indexed, Exec};
use crate::scalar::Scalar;

/// Per-axis bilinear sampling table (half-pixel-center convention).
struct LerpTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f64>,
}

fn lerp_table(n_in: usize, n_out: usize) -> LerpTable {
    let scale = n_in as f64 / n_out as f64;
    let mut lo = Vec::with_capacity(n_out);
    let mut hi = Vec::with_capacity(n_out);
    let mut t = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        lo.push(i0);
        hi.push(i1);
        t.push(src - i0 as f64);
    }
    LerpTable { lo, hi, t }
}

/// Bilinear resize of a `[N, C, H, W]` array to `out_hw`.
///
/// Resizing to the input size is an exact copy, so callers can use it
/// unconditionally.
pub fn resize_bilinear<F: Scalar>(exec: Exec, x: &Array4<F>, out_hw: (usize, usize)) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = out_hw;
    let rows = lerp_table(h, ho);
    let cols = lerp_table(w, wo);
    let mut y = Array4::<F>::zeros((n, c, ho, wo));
    let samples: Vec<_> = y.outer_iter_mut().zip(x.outer_iter()).collect();
    for_each_indexed(exec, samples, |_, (mut yn, xn)| {
        for ci in 0..c {
            let xc = xn.index_axis(Axis(0), ci);
            for oh in 0..ho {
                let (r0, r1, tr) = (rows.lo[oh], rows.hi[oh], rows.t[oh]);
                let trf = F::from_f64(tr);
                let one_m_trf = F::from_f64(1.0 - tr);
                for ow in 0..wo {
                    let (c0, c1, tc) = (cols.lo[ow], cols.hi[ow], cols.t[ow]);
                    let tcf = F::from_f64(tc);
                    let one_m_tcf = F::from_f64(1.0 - tc);
                    let top = xc[[r0, c0]] * one_m_tcf + xc[[r0, c1]] * tcf;
                    let bot = xc[[r1, c0]] * one_m_tcf + xc[[r1, c1]] * tcf;
                    yn[[ci, oh, ow]] = top * one_m_trf + bot * trf;
                }
            }
        }
    });
    y
}

/// Backward pass of [`resize_bilinear`]: transpose-scatter of the sampling
/// weights onto the input grid.
pub fn resize_bilinear_backward<F: Scalar>(
    exec: Exec,
    gy: &Array4<F>,
    in_hw: (usize, usize),
) -> Array4<F> {
    let (n, c, ho, wo) = gy.dim();
    let (h, w) = in_hw;
    let rows = lerp_table(h, ho);
    let cols = lerp_table(w, wo);
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    let samples: Vec<_> = gx.outer_iter_mut().zip(gy.outer_iter()).collect();
    for_each_indexed(exec, samples, |_, (mut gxn, gyn)| {
        for ci in 0..c {
            for oh in 0..ho {
                let (r0, r1, tr) = (rows.lo[oh], rows.hi[oh], rows.t[oh]);
                for ow in 0..wo {
                    let (c0, c1, tc) = (cols.lo[ow], cols.hi[ow], cols.t[ow]);
                    let g = gyn[[ci, oh, ow]];
                    let w00 = F::from_f64((1.0 - tr) * (1.0 - tc));
                    let w01 = F::from_f64((1.0 - tr) * tc);
                    let w10 = F::from_f64(tr * (1.0 - tc));
                    let w11 = F::from_f64(tr * tc);
                    gxn[[ci, r0, c0]] = gxn[[ci, r0, c0]] + g * w00;
                    gxn[[ci, r0, c1]] = gxn[[ci, r0, c1]] + g * w01;
                    gxn[[ci, r1, c0]] = gxn[[ci, r1, c0]] + g * w10;
                    gxn[[ci, r1, c1]] = gxn[[ci, r1, c1]] + g * w11;
                }
            }
        }
    });
    gx
}

/// Per-axis box coverage for area resampling.
fn box_table(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let r = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let start = o as f64 * r;
            let end = (o as f64 + 1.0) * r;
            let mut spans = Vec::new();
            let i0 = start.floor() as usize;
            let i1 = (end.ceil() as usize).min(n_in);
            for i in i0..i1 {
                let cover = end.min((i + 1) as f64) - start.max(i as f64);
                if cover > 0.0 {
                    spans.push((i, cover / r));
                }
            }
            spans
        })
        .collect()
}

/// Box-average (area) resampling; the right filter for downscaling since
/// every source pixel contributes proportionally to its coverage.
pub fn resize_area<F: Scalar>(x: &Array4<F>, out_hw: (usize, usize)) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = out_hw;
    let rows = box_table(h, ho);
    let cols = box_table(w, wo);
    let mut y = Array4::<F>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f64;
                    for &(i, wr) in &rows[oh] {
                        for &(j, wc) in &cols[ow] {
                            acc += x[[ni, ci, i, j]].to_f64() * wr * wc;
                        }
                    }
                    y[[ni, ci, oh, ow]] = F::from_f64(acc);
                }
            }
        }
    }
    y
}
