//! Loss oracles and gradient checks: every objective is compared against an
//! independent brute-force double-precision implementation on batches of
//! random inputs, and every analytic gradient against central finite
//! differences.

mod common;

use common::*;
use dmfn::losses::{self, DistanceMetric};
use dmfn::types::{ImageBatch, RangeTag};
use dmfn::vgg::FeaturePyramid;
use ndarray::{Array1, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn img(data: Array4<f64>) -> ImageBatch<f64> {
    ImageBatch::new(data, RangeTag::ModelRange).unwrap()
}

// ---------------------------------------------------------------- oracles

fn error_map_oracle(out: &Array4<f64>, gt: &Array4<f64>, metric: DistanceMetric) -> Array4<f64> {
    let (n, _, h, w) = out.dim();
    let mut m = Array4::<f64>::zeros((n, 1, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut sq = 0.0;
                let mut dot = 0.0;
                for c in 0..3 {
                    let d = out[[ni, c, i, j]] - gt[[ni, c, i, j]];
                    sq += d * d;
                    dot += out[[ni, c, i, j]] * gt[[ni, c, i, j]];
                }
                m[[ni, 0, i, j]] = match metric {
                    DistanceMetric::L2 => sq / 3.0,
                    DistanceMetric::Gaussian { sigma } => (-sq / (2.0 * sigma * sigma)).exp(),
                    DistanceMetric::DotProduct => dot,
                };
            }
        }
    }
    m
}

fn normalize_oracle(err: &Array4<f64>) -> Array4<f64> {
    let (n, _, h, w) = err.dim();
    let mut out = err.clone();
    for ni in 0..n {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..h {
            for j in 0..w {
                lo = lo.min(err[[ni, 0, i, j]]);
                hi = hi.max(err[[ni, 0, i, j]]);
            }
        }
        for i in 0..h {
            for j in 0..w {
                out[[ni, 0, i, j]] = (err[[ni, 0, i, j]] - lo) / (hi - lo + 1e-8);
            }
        }
    }
    out
}

fn weighted_l1_oracle(out: &[Array4<f64>], gt: &[Array4<f64>], guides: Option<&[Array4<f64>]>) -> f64 {
    let mut total = 0.0;
    for (l, (o, g)) in out.iter().zip(gt.iter()).enumerate() {
        let c = o.dim().1;
        let w = 1e3 / ((c * c) as f64);
        let n = o.len() as f64;
        let mut acc = 0.0;
        for (idx, (&ov, &gv)) in o.indexed_iter().zip(g.iter().map(|v| v)).map(|(a, b)| (a.0, (a.1, b))) {
            let m = match guides {
                Some(gs) => gs[l][[idx.0, 0, idx.2, idx.3]],
                None => 1.0,
            };
            acc += m * (gv - ov).abs();
        }
        total += w * acc / n;
    }
    total
}

fn centers_oracle(resp: &Array4<f64>) -> ndarray::Array3<f64> {
    let (n, k, h, w) = resp.dim();
    let mut c = ndarray::Array3::<f64>::zeros((n, k, 2));
    for ni in 0..n {
        for ki in 0..k {
            let mut mass = 0.0;
            let mut mu = 0.0;
            let mut mv = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let r = resp[[ni, ki, i, j]];
                    mass += r;
                    mu += i as f64 * r;
                    mv += j as f64 * r;
                }
            }
            if mass <= 1e-8 {
                c[[ni, ki, 0]] = (h as f64 - 1.0) / 2.0;
                c[[ni, ki, 1]] = (w as f64 - 1.0) / 2.0;
            } else {
                c[[ni, ki, 0]] = mu / mass;
                c[[ni, ki, 1]] = mv / mass;
            }
        }
    }
    c
}

fn alignment_oracle(out: &Array4<f64>, gt: &Array4<f64>) -> f64 {
    let co = centers_oracle(out);
    let cg = centers_oracle(gt);
    let (n, k, _, _) = out.dim();
    let mut total = 0.0;
    for ni in 0..n {
        for ki in 0..k {
            total += (co[[ni, ki, 0]] - cg[[ni, ki, 0]]).powi(2)
                + (co[[ni, ki, 1]] - cg[[ni, ki, 1]]).powi(2);
        }
    }
    total / n as f64
}

fn sigmoid_oracle(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ragan_g_oracle(real: &[f64], fake: &[f64]) -> f64 {
    let mean_r: f64 = real.iter().sum::<f64>() / real.len() as f64;
    let mean_f: f64 = fake.iter().sum::<f64>() / fake.len() as f64;
    let t1: f64 = real
        .iter()
        .map(|&r| -(1.0 - sigmoid_oracle(r - mean_f)).ln())
        .sum::<f64>()
        / real.len() as f64;
    let t2: f64 = fake
        .iter()
        .map(|&f| -(sigmoid_oracle(f - mean_r)).ln())
        .sum::<f64>()
        / fake.len() as f64;
    t1 + t2
}

fn mae_oracle(out: &Array4<f64>, gt: &Array4<f64>) -> f64 {
    out.iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / out.len() as f64
}

// ----------------------------------------------------- synthetic fixtures

/// Five-level pyramid with halving sizes, strictly positive activations.
fn synth_pyramid(rng: &mut ChaCha8Rng, base: usize, chans: &[usize; 5]) -> FeaturePyramid<f64> {
    let mut levels = Vec::new();
    let mut s = base;
    for &c in chans {
        levels.push(rand_array4(rng, (1, c, s, s), 0.05, 1.0));
        s /= 2;
    }
    FeaturePyramid::new(levels).unwrap()
}

/// Pyramid pair whose element-wise differences stay away from the L1 kink.
fn kink_safe_pair(
    rng: &mut ChaCha8Rng,
    base: usize,
    chans: &[usize; 5],
) -> (FeaturePyramid<f64>, FeaturePyramid<f64>) {
    let out = synth_pyramid(rng, base, chans);
    let gt_levels: Vec<Array4<f64>> = out
        .levels()
        .iter()
        .map(|l| {
            l.mapv(|v| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (v + sign * rng.gen_range(0.05..0.3)).max(0.0)
            })
        })
        .collect();
    let gt = FeaturePyramid::new(gt_levels).unwrap();
    (out, gt)
}

const CHANS: [usize; 5] = [3, 4, 4, 4, 4];

// ----------------------------------------------------------- oracle tests

#[test]
fn error_map_matches_oracle_for_all_metrics() {
    let mut r = rng(10);
    for metric in [
        DistanceMetric::L2,
        DistanceMetric::Gaussian { sigma: 1.0 },
        DistanceMetric::Gaussian { sigma: 0.5 },
        DistanceMetric::DotProduct,
    ] {
        for _ in 0..20 {
            let o = rand_array4(&mut r, (2, 3, 8, 8), -1.0, 1.0);
            let g = rand_array4(&mut r, (2, 3, 8, 8), -1.0, 1.0);
            let got = losses::error_map(&img(o.clone()), &img(g.clone()), metric).unwrap();
            let want = error_map_oracle(&o, &g, metric);
            assert!(rel_err_arrays(&got, &want) < 1e-12, "{metric:?}");
        }
    }
}

#[test]
fn normalize_guidance_matches_oracle() {
    let mut r = rng(11);
    for _ in 0..20 {
        let e = rand_array4(&mut r, (2, 1, 4, 4), 0.0, 3.0);
        let got = losses::normalize_guidance(&e);
        let want = normalize_oracle(&e);
        assert!(rel_err_arrays(&got, &want) < 1e-6);
    }
}

#[test]
fn guidance_pyramid_matches_pooling_oracle() {
    let mut r = rng(12);
    for _ in 0..20 {
        let g1 = rand_array4(&mut r, (1, 1, 8, 8), 0.0, 1.0);
        let pyr = losses::guidance_pyramid(g1.clone()).unwrap();
        let want = avg_pool2_naive(&g1);
        assert!(rel_err_arrays(pyr.level(1), &want) < 1e-7);
        assert_eq!(pyr.level(0), &g1);
    }
}

#[test]
fn self_guided_matches_oracle() {
    let mut r = rng(13);
    for _ in 0..20 {
        let (out, gt) = kink_safe_pair(&mut r, 16, &CHANS);
        let guide1 = rand_array4(&mut r, (1, 1, 16, 16), 0.0, 1.0);
        let guide = losses::guidance_pyramid(guide1).unwrap();
        let got = losses::self_guided_loss(&out, &gt, &guide).unwrap();
        let want = weighted_l1_oracle(
            &out.levels()[..2],
            &gt.levels()[..2],
            Some(&[guide.level(0).clone(), guide.level(1).clone()]),
        );
        assert!(rel_err_scalar(got, want) < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn vgg_fm_matches_oracle() {
    let mut r = rng(14);
    for _ in 0..20 {
        let (out, gt) = kink_safe_pair(&mut r, 16, &CHANS);
        let got = losses::vgg_fm_loss(&out, &gt).unwrap();
        let want = weighted_l1_oracle(out.levels(), gt.levels(), None);
        assert!(rel_err_scalar(got, want) < 1e-10);
    }
}

#[test]
fn dis_fm_matches_oracle_and_constant_offset_value() {
    let mut r = rng(15);
    for _ in 0..20 {
        let taps_out: Vec<Array4<f64>> = (0..5)
            .map(|l| rand_array4(&mut r, (2, l + 2, 6, 6), -1.0, 1.0))
            .collect();
        let taps_gt: Vec<Array4<f64>> = taps_out
            .iter()
            .map(|t| t.mapv(|v| v + r.gen_range(0.05..0.2)))
            .collect();
        let got = losses::dis_fm_loss(&taps_out, &taps_gt).unwrap();
        let want = weighted_l1_oracle(&taps_out, &taps_gt, None);
        assert!(rel_err_scalar(got, want) < 1e-10);
    }
    // one tap differing by a constant delta contributes w_l * delta
    let zeros: Vec<Array4<f64>> = (0..5).map(|_| Array4::zeros((1, 2, 4, 4))).collect();
    let mut shifted = zeros.clone();
    shifted[3] = Array4::from_elem((1, 2, 4, 4), 0.25);
    let got = losses::dis_fm_loss(&shifted, &zeros).unwrap();
    let w = 1e3 / 4.0;
    assert!((got - w * 0.25).abs() < 1e-12);
}

#[test]
fn feature_centers_and_alignment_match_oracles() {
    let mut r = rng(16);
    for _ in 0..20 {
        let out = rand_array4(&mut r, (2, 3, 8, 8), 0.0, 1.0);
        let gt = rand_array4(&mut r, (2, 3, 8, 8), 0.0, 1.0);
        let got_c = losses::feature_centers(&out).unwrap();
        let want_c = centers_oracle(&out);
        for (a, b) in got_c.centers.iter().zip(want_c.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let got = losses::alignment_loss(&out, &gt).unwrap();
        let want = alignment_oracle(&out, &gt);
        assert!(rel_err_scalar(got, want) < 1e-10);
    }
}

#[test]
fn ragan_losses_match_high_precision_oracle() {
    let mut r = rng(17);
    for _ in 0..20 {
        let real: Vec<f64> = (0..6).map(|_| r.gen_range(-3.0..3.0)).collect();
        let fake: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
        let ra = Array1::from_vec(real.clone());
        let fa = Array1::from_vec(fake.clone());
        let got_g = losses::ragan_g_loss(&ra, &fa).unwrap();
        let want_g = ragan_g_oracle(&real, &fake);
        assert!(rel_err_scalar(got_g, want_g) < 1e-12);
        let got_d = losses::ragan_d_loss(&ra, &fa).unwrap();
        let want_d = ragan_g_oracle(&fake, &real);
        assert!(rel_err_scalar(got_d, want_d) < 1e-12);
    }
    // Saturated tails: +/-20 separation linearizes both log-sigmoids.
    let r20 = Array1::from_elem(3, 10.0);
    let f20 = Array1::from_elem(3, -10.0);
    let got = losses::ragan_g_loss(&r20, &f20).unwrap();
    let want = ragan_g_oracle(&[10.0, 10.0, 10.0], &[-10.0, -10.0, -10.0]);
    // the naive oracle formula cancels catastrophically in the tails
    assert!(rel_err_scalar(got, want) < 1e-6);
    assert!((got - 40.0).abs() < 1e-6);
}

#[test]
fn mae_matches_oracle() {
    let mut r = rng(18);
    for _ in 0..20 {
        let o = rand_array4(&mut r, (2, 3, 8, 8), -1.0, 1.0);
        let g = rand_array4(&mut r, (2, 3, 8, 8), -1.0, 1.0);
        let got = losses::mae_loss(&img(o.clone()), &img(g.clone())).unwrap();
        assert!(rel_err_scalar(got, mae_oracle(&o, &g)) < 1e-12);
    }
}

// -------------------------------------------------------- gradient checks

const GRAD_TOL_F64: f64 = 1e-5;
const FD_H: f64 = 1e-6;

#[test]
fn self_guided_gradient_checks() {
    let mut r = rng(20);
    let (out, gt) = kink_safe_pair(&mut r, 16, &CHANS);
    let guide1 = rand_array4(&mut r, (1, 1, 16, 16), 0.1, 0.9);
    let guide = losses::guidance_pyramid(guide1).unwrap();
    let (_, grads) = losses::self_guided_loss_grad(&out, &gt, &guide).unwrap();
    for l in 0..2 {
        let base: Vec<f64> = out.level(l).iter().cloned().collect();
        let mut f = |vals: &[f64]| -> f64 {
            let mut levels: Vec<Array4<f64>> = out.levels().to_vec();
            let mut lv = levels[l].clone();
            for (dst, &v) in lv.iter_mut().zip(vals.iter()) {
                *dst = v;
            }
            levels[l] = lv;
            let pyr = FeaturePyramid::new(levels).unwrap();
            losses::self_guided_loss(&pyr, &gt, &guide).unwrap()
        };
        let num = central_diff(&mut f, &base, FD_H);
        let ana: Vec<f64> = grads[l].iter().cloned().collect();
        let err = rel_err_slices(&ana, &num);
        assert!(err < GRAD_TOL_F64, "level {l}: rel err {err}");
    }
}

#[test]
fn vgg_fm_gradient_checks() {
    let mut r = rng(21);
    let (out, gt) = kink_safe_pair(&mut r, 16, &CHANS);
    let (_, grads) = losses::vgg_fm_loss_grad(&out, &gt).unwrap();
    for l in 0..5 {
        let base: Vec<f64> = out.level(l).iter().cloned().collect();
        let mut f = |vals: &[f64]| -> f64 {
            let mut levels: Vec<Array4<f64>> = out.levels().to_vec();
            let mut lv = levels[l].clone();
            for (dst, &v) in lv.iter_mut().zip(vals.iter()) {
                *dst = v;
            }
            levels[l] = lv;
            let pyr = FeaturePyramid::new(levels).unwrap();
            losses::vgg_fm_loss(&pyr, &gt).unwrap()
        };
        let num = central_diff(&mut f, &base, FD_H);
        let ana: Vec<f64> = grads[l].iter().cloned().collect();
        assert!(rel_err_slices(&ana, &num) < GRAD_TOL_F64, "level {l}");
    }
}

#[test]
fn dis_fm_gradient_checks() {
    let mut r = rng(22);
    let taps_out: Vec<Array4<f64>> = (0..5)
        .map(|l| rand_array4(&mut r, (1, l + 2, 4, 4), -1.0, 1.0))
        .collect();
    let taps_gt: Vec<Array4<f64>> = taps_out
        .iter()
        .map(|t| {
            t.mapv(|v| {
                let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                v + sign * r.gen_range(0.05..0.3)
            })
        })
        .collect();
    let (_, grads) = losses::dis_fm_loss_grad(&taps_out, &taps_gt).unwrap();
    for l in 0..5 {
        let base: Vec<f64> = taps_out[l].iter().cloned().collect();
        let mut f = |vals: &[f64]| -> f64 {
            let mut taps = taps_out.clone();
            for (dst, &v) in taps[l].iter_mut().zip(vals.iter()) {
                *dst = v;
            }
            losses::dis_fm_loss(&taps, &taps_gt).unwrap()
        };
        let num = central_diff(&mut f, &base, FD_H);
        let ana: Vec<f64> = grads[l].iter().cloned().collect();
        assert!(rel_err_slices(&ana, &num) < GRAD_TOL_F64, "tap {l}");
    }
}

#[test]
fn alignment_gradient_checks() {
    let mut r = rng(23);
    let out = rand_array4(&mut r, (1, 4, 6, 6), 0.1, 1.0);
    let gt = rand_array4(&mut r, (1, 4, 6, 6), 0.1, 1.0);
    let (_, grad) = losses::alignment_loss_grad(&out, &gt).unwrap();
    let base: Vec<f64> = out.iter().cloned().collect();
    let mut f = |vals: &[f64]| -> f64 {
        let mut o = out.clone();
        for (dst, &v) in o.iter_mut().zip(vals.iter()) {
            *dst = v;
        }
        losses::alignment_loss(&o, &gt).unwrap()
    };
    let num = central_diff(&mut f, &base, FD_H);
    let ana: Vec<f64> = grad.iter().cloned().collect();
    assert!(rel_err_slices(&ana, &num) < GRAD_TOL_F64);
}

#[test]
fn ragan_gradient_checks() {
    let mut r = rng(24);
    let real: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
    let fake: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
    let ra = Array1::from_vec(real.clone());
    let fa = Array1::from_vec(fake.clone());
    let (_, g_real, g_fake) = losses::ragan_g_loss_grad(&ra, &fa).unwrap();
    let mut f_real = |vals: &[f64]| -> f64 {
        losses::ragan_g_loss(&Array1::from_vec(vals.to_vec()), &fa).unwrap()
    };
    let num_r = central_diff(&mut f_real, &real, FD_H);
    assert!(rel_err_slices(&g_real.to_vec(), &num_r) < GRAD_TOL_F64);
    let mut f_fake = |vals: &[f64]| -> f64 {
        losses::ragan_g_loss(&ra, &Array1::from_vec(vals.to_vec())).unwrap()
    };
    let num_f = central_diff(&mut f_fake, &fake, FD_H);
    assert!(rel_err_slices(&g_fake.to_vec(), &num_f) < GRAD_TOL_F64);

    let (_, d_real, d_fake) = losses::ragan_d_loss_grad(&ra, &fa).unwrap();
    let mut fd_real = |vals: &[f64]| -> f64 {
        losses::ragan_d_loss(&Array1::from_vec(vals.to_vec()), &fa).unwrap()
    };
    let num_dr = central_diff(&mut fd_real, &real, FD_H);
    assert!(rel_err_slices(&d_real.to_vec(), &num_dr) < GRAD_TOL_F64);
    let mut fd_fake = |vals: &[f64]| -> f64 {
        losses::ragan_d_loss(&ra, &Array1::from_vec(vals.to_vec())).unwrap()
    };
    let num_df = central_diff(&mut fd_fake, &fake, FD_H);
    assert!(rel_err_slices(&d_fake.to_vec(), &num_df) < GRAD_TOL_F64);
}

#[test]
fn mae_gradient_checks() {
    let mut r = rng(25);
    let out = rand_array4(&mut r, (1, 3, 8, 8), -0.8, 0.8);
    let gt = out.mapv(|v| {
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        v + sign * 0.05
    });
    let (_, grad) = losses::mae_loss_grad(&img(out.clone()), &img(gt.clone())).unwrap();
    let base: Vec<f64> = out.iter().cloned().collect();
    let mut f = |vals: &[f64]| -> f64 {
        let mut o = out.clone();
        for (dst, &v) in o.iter_mut().zip(vals.iter()) {
            *dst = v;
        }
        losses::mae_loss(&img(o), &img(gt.clone())).unwrap()
    };
    let num = central_diff(&mut f, &base, FD_H);
    let ana: Vec<f64> = grad.iter().cloned().collect();
    assert!(rel_err_slices(&ana, &num) < GRAD_TOL_F64);
}

/// Single-precision gradients stay within the looser 1e-3 tolerance.
#[test]
fn f32_gradients_within_single_precision_tolerance() {
    let mut r = rng(26);
    let out64 = rand_array4(&mut r, (1, 3, 8, 8), -0.8, 0.8);
    let gt64 = out64.mapv(|v| {
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        v + sign * 0.1
    });
    let out32 = out64.mapv(|v| v as f32);
    let gt32 = gt64.mapv(|v| v as f32);
    let o = ImageBatch::new(out32.clone(), RangeTag::ModelRange).unwrap();
    let g = ImageBatch::new(gt32, RangeTag::ModelRange).unwrap();
    let (_, grad) = losses::mae_loss_grad(&o, &g).unwrap();
    // f32 analytic against f64 finite differences.
    let base: Vec<f64> = out64.iter().cloned().collect();
    let mut f = |vals: &[f64]| -> f64 {
        let mut o = out64.clone();
        for (dst, &v) in o.iter_mut().zip(vals.iter()) {
            *dst = v;
        }
        mae_oracle(&o, &gt64)
    };
    let num = central_diff(&mut f, &base, 1e-5);
    let ana: Vec<f64> = grad.iter().map(|&v| v as f64).collect();
    assert!(rel_err_slices(&ana, &num) < 1e-3);
}

// ------------------------------------------------------------- properties

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_values_always_bounded(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let scale = r.gen_range(0.1..100.0);
        let e = rand_array4(&mut r, (1, 1, 8, 8), -scale, scale);
        let g1 = losses::normalize_guidance(&e);
        prop_assert!(g1.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let pyr = losses::guidance_pyramid(g1).unwrap();
        prop_assert!(pyr.level(1).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..1000) {
        let mut r = rng(seed);
        let (out, gt) = kink_safe_pair(&mut r, 16, &[2, 2, 2, 2, 2]);
        let guide1 = rand_array4(&mut r, (1, 1, 16, 16), 0.0, 1.0);
        let guide = losses::guidance_pyramid(guide1).unwrap();
        prop_assert!(losses::self_guided_loss(&out, &gt, &guide).unwrap() >= 0.0);
        prop_assert!(losses::vgg_fm_loss(&out, &gt).unwrap() >= 0.0);
        let a = rand_array4(&mut r, (1, 2, 4, 4), 0.0, 1.0);
        let b = rand_array4(&mut r, (1, 2, 4, 4), 0.0, 1.0);
        prop_assert!(losses::alignment_loss(&a, &b).unwrap() >= 0.0);
        let o = rand_array4(&mut r, (1, 3, 4, 4), -1.0, 1.0);
        let g = rand_array4(&mut r, (1, 3, 4, 4), -1.0, 1.0);
        prop_assert!(losses::mae_loss(&img(o), &img(g)).unwrap() >= 0.0);
    }

    /// Shifting a response map (zero padding, no mass loss) shifts every
    /// non-degenerate center by exactly the shift.
    #[test]
    fn center_translation_equivariance(seed in 0u64..1000) {
        let mut r = rng(seed);
        // mass confined to a 4x4 block inside an 8x8 map
        let block = rand_array4(&mut r, (1, 2, 4, 4), 0.1, 1.0);
        let du = r.gen_range(0..3usize);
        let dv = r.gen_range(0..3usize);
        let mut a = Array4::<f64>::zeros((1, 2, 8, 8));
        let mut b = Array4::<f64>::zeros((1, 2, 8, 8));
        for ki in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    a[[0, ki, i, j]] = block[[0, ki, i, j]];
                    b[[0, ki, i + du, j + dv]] = block[[0, ki, i, j]];
                }
            }
        }
        let ca = losses::feature_centers(&a).unwrap();
        let cb = losses::feature_centers(&b).unwrap();
        for ki in 0..2 {
            prop_assert!((cb.centers[[0, ki, 0]] - ca.centers[[0, ki, 0]] - du as f64).abs() < 1e-6);
            prop_assert!((cb.centers[[0, ki, 1]] - ca.centers[[0, ki, 1]] - dv as f64).abs() < 1e-6);
        }
    }

    /// Swapping the error-map metric never changes the guidance structure:
    /// values stay bounded and level 2 is exactly the pooled level 1.
    #[test]
    fn metric_choice_only_changes_the_error_map(seed in 0u64..500) {
        let mut r = rng(seed);
        let o = rand_array4(&mut r, (1, 3, 8, 8), -1.0, 1.0);
        let g = rand_array4(&mut r, (1, 3, 8, 8), -1.0, 1.0);
        for metric in [DistanceMetric::L2, DistanceMetric::Gaussian { sigma: 1.0 }, DistanceMetric::DotProduct] {
            let e = losses::error_map(&img(o.clone()), &img(g.clone()), metric).unwrap();
            let pyr = losses::guidance_pyramid(losses::normalize_guidance(&e)).unwrap();
            let pooled = avg_pool2_naive(pyr.level(0));
            prop_assert!(rel_err_arrays(pyr.level(1), &pooled) < 1e-12);
        }
    }
}
