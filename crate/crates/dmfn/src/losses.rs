//! Training objectives: error map and guidance pyramid, self-guided
//! regression, geometric center alignment, VGG / discriminator feature
//! matching, relativistic average adversarial losses, MAE, and the weighted
//! total.
//!
//! Every differentiable loss has a `*_grad` twin returning the analytic
//! gradient alongside the value; the gradient-check suite verifies them
//! against central finite differences in double precision.

use ndarray::{Array1, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::avg_pool2;
use crate::scalar::Scalar;
use crate::types::{ImageBatch, LossWeights};
use crate::vgg::FeaturePyramid;

/// Epsilon in the guidance normalization denominator.
pub const GUIDANCE_EPS: f64 = 1e-8;
/// Channels whose total response mass falls below this yield the image-center
/// coordinate (and a zero gradient).
pub const CENTER_MASS_EPS: f64 = 1e-8;

/// Per-pixel distance used by the error map.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceMetric {
    L2,
    Gaussian { sigma: f64 },
    DotProduct,
}

impl Default for DistanceMetric {
    fn default() -> Self {
        DistanceMetric::L2
    }
}

impl DistanceMetric {
    pub fn validate(&self) -> Result<()> {
        if let DistanceMetric::Gaussian { sigma } = self {
            if !(*sigma > 0.0) {
                return Err(Error::config("gaussian metric sigma must be > 0"));
            }
        }
        Ok(())
    }
}

fn check_same_shape<F: Scalar>(a: &ImageBatch<F>, b: &ImageBatch<F>) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::contract("image batch shape mismatch"));
    }
    Ok(())
}

/// Per-pixel error map `[N, 1, H, W]` between output and ground truth.
///
/// `l2` averages squared differences over the three channels; `gaussian` and
/// `dot_product` apply their kernel to the RGB 3-vector at each position.
pub fn error_map<F: Scalar>(
    out: &ImageBatch<F>,
    gt: &ImageBatch<F>,
    metric: DistanceMetric,
) -> Result<Array4<F>> {
    check_same_shape(out, gt)?;
    metric.validate()?;
    let (n, _, h, w) = out.data().dim();
    let o = out.data();
    let g = gt.data();
    let third = F::from_f64(1.0 / 3.0);
    let map = Array4::from_shape_fn((n, 1, h, w), |(ni, _, i, j)| {
        let mut sq = F::zero();
        let mut dot = F::zero();
        for c in 0..3 {
            let d = o[[ni, c, i, j]] - g[[ni, c, i, j]];
            sq = sq + d * d;
            dot = dot + o[[ni, c, i, j]] * g[[ni, c, i, j]];
        }
        match metric {
            DistanceMetric::L2 => sq * third,
            DistanceMetric::Gaussian { sigma } => {
                let denom = F::from_f64(2.0 * sigma * sigma);
                (-(sq / denom)).exp()
            }
            DistanceMetric::DotProduct => dot,
        }
    });
    Ok(map)
}

/// Min-max normalize an error map per sample: `(e - min) / (max - min + eps)`.
/// A constant map normalizes to all zeros.
pub fn normalize_guidance<F: Scalar>(err: &Array4<F>) -> Array4<F> {
    let mut out = err.clone();
    let eps = F::from_f64(GUIDANCE_EPS);
    for mut sample in out.outer_iter_mut() {
        let mut lo = F::infinity();
        let mut hi = F::neg_infinity();
        for &v in sample.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let denom = hi - lo + eps;
        sample.mapv_inplace(|v| (v - lo) / denom);
    }
    out
}

/// Soft spatial weights for pyramid levels 1 and 2.
#[derive(Debug, Clone)]
pub struct GuidancePyramid<F: Scalar> {
    levels: [Array4<F>; 2],
}

impl<F: Scalar> GuidancePyramid<F> {
    pub fn level(&self, l: usize) -> &Array4<F> {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Array4<F>; 2] {
        &self.levels
    }
}

/// Build the two-level guidance pyramid: level 1 is the normalized map,
/// level 2 its 2x2 stride-2 average pool. Values stay in `[0, 1]`.
pub fn guidance_pyramid<F: Scalar>(g1: Array4<F>) -> Result<GuidancePyramid<F>> {
    let (_, c, h, w) = g1.dim();
    if c != 1 {
        return Err(Error::contract("guidance map must have one channel"));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(
            "guidance map needs even spatial dims for pooling",
        ));
    }
    if !g1.iter().all(|&v| v >= F::zero() && v <= F::one()) {
        return Err(Error::contract("guidance values must lie in [0, 1]"));
    }
    let g2 = avg_pool2(&g1);
    Ok(GuidancePyramid { levels: [g1, g2] })
}

/// `w^l = 1000 / C_l^2` with `C_l` the level's channel count.
fn level_weight<F: Scalar>(channels: usize) -> F {
    F::from_f64(1e3 / ((channels * channels) as f64))
}

fn check_levels_match<F: Scalar>(a: &Array4<F>, b: &Array4<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!("{what} shape mismatch")));
    }
    Ok(())
}

/// Weighted, guidance-masked L1 over pyramid levels 1-2.
pub fn self_guided_loss<F: Scalar>(
    out_pyr: &FeaturePyramid<F>,
    gt_pyr: &FeaturePyramid<F>,
    guide: &GuidancePyramid<F>,
) -> Result<F> {
    Ok(self_guided_loss_grad(out_pyr, gt_pyr, guide)?.0)
}

/// Loss value plus gradients w.r.t. the output features of levels 1-2.
/// The guidance maps are constants for backprop.
pub fn self_guided_loss_grad<F: Scalar>(
    out_pyr: &FeaturePyramid<F>,
    gt_pyr: &FeaturePyramid<F>,
    guide: &GuidancePyramid<F>,
) -> Result<(F, Vec<Array4<F>>)> {
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(2);
    for l in 0..2 {
        let out = out_pyr.level(l);
        let gt = gt_pyr.level(l);
        check_levels_match(out, gt, "pyramid level")?;
        let m = guide.level(l);
        let (n, c, h, w) = out.dim();
        if m.dim() != (n, 1, h, w) {
            return Err(Error::contract("guidance level misaligned with features"));
        }
        let weight = level_weight::<F>(c);
        let inv_n = F::from_f64(1.0 / out.len() as f64);
        let coeff = weight * inv_n;
        let mut g = Array4::<F>::zeros(out.raw_dim());
        let mut acc = F::zero();
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mv = m[[ni, 0, i, j]];
                        let d = gt[[ni, ci, i, j]] - out[[ni, ci, i, j]];
                        acc = acc + mv * d.abs();
                        // d|m*(gt-out)|/d out = m * sign(out - gt)
                        let s = if d > F::zero() {
                            -F::one()
                        } else if d < F::zero() {
                            F::one()
                        } else {
                            F::zero()
                        };
                        g[[ni, ci, i, j]] = coeff * mv * s;
                    }
                }
            }
        }
        total = total + coeff * acc;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Geometric centers `(c_u, c_v)` per channel, `[N, K, 2]`.
#[derive(Debug, Clone)]
pub struct GeometricCenters<F: Scalar> {
    pub centers: Array3<F>,
}

/// Mass centers of non-negative response maps. Degenerate channels (total
/// mass below [`CENTER_MASS_EPS`]) take the image-center coordinate.
pub fn feature_centers<F: Scalar>(resp: &Array4<F>) -> Result<GeometricCenters<F>> {
    if resp.iter().any(|&v| v < F::zero()) {
        return Err(Error::contract(
            "feature centers need non-negative responses",
        ));
    }
    let (n, k, h, w) = resp.dim();
    let eps = F::from_f64(CENTER_MASS_EPS);
    let center_u = F::from_f64((h as f64 - 1.0) / 2.0);
    let center_v = F::from_f64((w as f64 - 1.0) / 2.0);
    let mut centers = Array3::<F>::zeros((n, k, 2));
    for ni in 0..n {
        for ki in 0..k {
            let plane = resp.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ki);
            let mut mass = F::zero();
            let mut mu = F::zero();
            let mut mv = F::zero();
            for i in 0..h {
                for j in 0..w {
                    let r = plane[[i, j]];
                    mass = mass + r;
                    mu = mu + F::from_usize(i) * r;
                    mv = mv + F::from_usize(j) * r;
                }
            }
            if mass <= eps {
                centers[[ni, ki, 0]] = center_u;
                centers[[ni, ki, 1]] = center_v;
            } else {
                centers[[ni, ki, 0]] = mu / mass;
                centers[[ni, ki, 1]] = mv / mass;
            }
        }
    }
    Ok(GeometricCenters { centers })
}

/// Squared distance between output and target feature centers, summed over
/// channels, averaged over the batch.
pub fn alignment_loss<F: Scalar>(out_resp: &Array4<F>, gt_resp: &Array4<F>) -> Result<F> {
    Ok(alignment_loss_grad(out_resp, gt_resp)?.0)
}

/// Loss plus gradient w.r.t. `out_resp`; target centers are constants.
pub fn alignment_loss_grad<F: Scalar>(
    out_resp: &Array4<F>,
    gt_resp: &Array4<F>,
) -> Result<(F, Array4<F>)> {
    check_levels_match(out_resp, gt_resp, "response map")?;
    let out_c = feature_centers(out_resp)?;
    let gt_c = feature_centers(gt_resp)?;
    let (n, k, h, w) = out_resp.dim();
    let eps = F::from_f64(CENTER_MASS_EPS);
    let inv_n = F::from_f64(1.0 / n as f64);
    let two = F::from_f64(2.0);
    let mut total = F::zero();
    let mut grad = Array4::<F>::zeros(out_resp.raw_dim());
    for ni in 0..n {
        for ki in 0..k {
            let du = out_c.centers[[ni, ki, 0]] - gt_c.centers[[ni, ki, 0]];
            let dv = out_c.centers[[ni, ki, 1]] - gt_c.centers[[ni, ki, 1]];
            total = total + du * du + dv * dv;
            // dc_u/dR(u,v) = (u - c_u) / S for non-degenerate channels.
            let plane = out_resp.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ki);
            let mut mass = F::zero();
            for &r in plane.iter() {
                mass = mass + r;
            }
            if mass <= eps {
                continue;
            }
            let cu = out_c.centers[[ni, ki, 0]];
            let cv = out_c.centers[[ni, ki, 1]];
            let coeff_u = two * du * inv_n / mass;
            let coeff_v = two * dv * inv_n / mass;
            for i in 0..h {
                for j in 0..w {
                    grad[[ni, ki, i, j]] = coeff_u * (F::from_usize(i) - cu)
                        + coeff_v * (F::from_usize(j) - cv);
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// Weighted L1 feature matching over all five pyramid levels.
pub fn vgg_fm_loss<F: Scalar>(
    out_pyr: &FeaturePyramid<F>,
    gt_pyr: &FeaturePyramid<F>,
) -> Result<F> {
    Ok(vgg_fm_loss_grad(out_pyr, gt_pyr)?.0)
}

pub fn vgg_fm_loss_grad<F: Scalar>(
    out_pyr: &FeaturePyramid<F>,
    gt_pyr: &FeaturePyramid<F>,
) -> Result<(F, Vec<Array4<F>>)> {
    let (v, g) = weighted_l1_stack_grad(out_pyr.levels(), gt_pyr.levels())?;
    Ok((v, g))
}

/// Weighted L1 matching over discriminator taps (exactly five).
pub fn dis_fm_loss<F: Scalar>(out_taps: &[Array4<F>], gt_taps: &[Array4<F>]) -> Result<F> {
    Ok(dis_fm_loss_grad(out_taps, gt_taps)?.0)
}

pub fn dis_fm_loss_grad<F: Scalar>(
    out_taps: &[Array4<F>],
    gt_taps: &[Array4<F>],
) -> Result<(F, Vec<Array4<F>>)> {
    if out_taps.len() != 5 || gt_taps.len() != 5 {
        return Err(Error::contract(format!(
            "expected 5 taps, got {} / {}",
            out_taps.len(),
            gt_taps.len()
        )));
    }
    weighted_l1_stack_grad(out_taps, gt_taps)
}

fn weighted_l1_stack_grad<F: Scalar>(
    out: &[Array4<F>],
    gt: &[Array4<F>],
) -> Result<(F, Vec<Array4<F>>)> {
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(out.len());
    for (o, g) in out.iter().zip(gt.iter()) {
        check_levels_match(o, g, "feature level")?;
        let c = o.dim().1;
        let coeff = level_weight::<F>(c) * F::from_f64(1.0 / o.len() as f64);
        let mut acc = F::zero();
        let mut grad = Array4::<F>::zeros(o.raw_dim());
        ndarray::Zip::from(&mut grad).and(o).and(g).for_each(|gr, &ov, &gv| {
            let d = ov - gv;
            acc = acc + d.abs();
            *gr = if d > F::zero() {
                coeff
            } else if d < F::zero() {
                -coeff
            } else {
                F::zero()
            };
        });
        total = total + coeff * acc;
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Numerically stable softplus: `ln(1 + e^x)`.
fn softplus<F: Scalar>(x: F) -> F {
    let zero = F::zero();
    let m = if x > zero { x } else { zero };
    m + ((x - m).exp() + (zero - m).exp()).ln()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn check_scores<F: Scalar>(real: &Array1<F>, fake: &Array1<F>) -> Result<()> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::contract("critic score batches must be non-empty"));
    }
    Ok(())
}

/// Relativistic average adversarial loss for the generator:
/// `-E[log(1 - sigmoid(C_r - mean C_f))] - E[log sigmoid(C_f - mean C_r)]`.
pub fn ragan_g_loss<F: Scalar>(real: &Array1<F>, fake: &Array1<F>) -> Result<F> {
    Ok(ragan_g_loss_grad(real, fake)?.0)
}

/// Value plus gradients w.r.t. both score vectors.
pub fn ragan_g_loss_grad<F: Scalar>(
    real: &Array1<F>,
    fake: &Array1<F>,
) -> Result<(F, Array1<F>, Array1<F>)> {
    check_scores(real, fake)?;
    let n_r = F::from_usize(real.len());
    let n_f = F::from_usize(fake.len());
    let mean_r = real.iter().fold(F::zero(), |a, &v| a + v) / n_r;
    let mean_f = fake.iter().fold(F::zero(), |a, &v| a + v) / n_f;
    // -log(1 - sigmoid(a)) = softplus(a); -log(sigmoid(b)) = softplus(-b).
    let mut loss = F::zero();
    let mut sum_sig_a = F::zero();
    let mut g_real = Array1::<F>::zeros(real.len());
    for (i, &r) in real.iter().enumerate() {
        let a = r - mean_f;
        loss = loss + softplus(a) / n_r;
        let s = sigmoid(a);
        sum_sig_a = sum_sig_a + s;
        g_real[i] = s / n_r;
    }
    let mut sum_sig_nb = F::zero();
    let mut g_fake = Array1::<F>::zeros(fake.len());
    for (j, &f) in fake.iter().enumerate() {
        let b = f - mean_r;
        loss = loss + softplus(-b) / n_f;
        let s = sigmoid(-b);
        sum_sig_nb = sum_sig_nb + s;
        g_fake[j] = -s / n_f;
    }
    // Mean couplings: a_i depends on mean(fake), b_j on mean(real).
    let fake_coupling = -sum_sig_a / (n_r * n_f);
    for g in g_fake.iter_mut() {
        *g = *g + fake_coupling;
    }
    let real_coupling = sum_sig_nb / (n_f * n_r);
    for g in g_real.iter_mut() {
        *g = *g + real_coupling;
    }
    Ok((loss, g_real, g_fake))
}

/// Discriminator-side relativistic average loss: the generator loss with the
/// roles of real and fake swapped.
pub fn ragan_d_loss<F: Scalar>(real: &Array1<F>, fake: &Array1<F>) -> Result<F> {
    ragan_g_loss(fake, real)
}

pub fn ragan_d_loss_grad<F: Scalar>(
    real: &Array1<F>,
    fake: &Array1<F>,
) -> Result<(F, Array1<F>, Array1<F>)> {
    let (loss, g_fake, g_real) = ragan_g_loss_grad(fake, real)?;
    Ok((loss, g_real, g_fake))
}

/// Mean absolute error over every element.
pub fn mae_loss<F: Scalar>(out: &ImageBatch<F>, gt: &ImageBatch<F>) -> Result<F> {
    Ok(mae_loss_grad(out, gt)?.0)
}

pub fn mae_loss_grad<F: Scalar>(
    out: &ImageBatch<F>,
    gt: &ImageBatch<F>,
) -> Result<(F, Array4<F>)> {
    check_same_shape(out, gt)?;
    let inv_n = F::from_f64(1.0 / out.data().len() as f64);
    let mut acc = F::zero();
    let mut grad = Array4::<F>::zeros(out.data().raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(out.data())
        .and(gt.data())
        .for_each(|g, &o, &t| {
            let d = o - t;
            acc = acc + d.abs();
            *g = if d > F::zero() {
                inv_n
            } else if d < F::zero() {
                -inv_n
            } else {
                F::zero()
            };
        });
    Ok((acc * inv_n, grad))
}

/// The six per-term scalars of the total objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<F: Scalar> {
    pub mae: F,
    pub self_guided: F,
    pub fm_vgg: F,
    pub fm_dis: F,
    pub adv: F,
    pub align: F,
}

/// `L = mae + lambda (self_guided + fm_vgg) + eta fm_dis + mu adv + gamma align`.
pub fn total_g_loss<F: Scalar>(parts: &LossTerms<F>, w: &LossWeights) -> F {
    parts.mae
        + F::from_f64(w.lambda) * (parts.self_guided + parts.fm_vgg)
        + F::from_f64(w.eta) * parts.fm_dis
        + F::from_f64(w.mu) * parts.adv
        + F::from_f64(w.gamma) * parts.align
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RangeTag;
    fn img(data: Array4<f64>) -> ImageBatch<f64> {
        ImageBatch::new(data, RangeTag::ModelRange).unwrap()
    }

    #[test]
    fn l2_error_map_matches_hand_value() {
        let mut o = Array4::from_elem((1, 3, 4, 4), 0.0f64);
        o[[0, 1, 2, 3]] = 0.3;
        let g = Array4::from_elem((1, 3, 4, 4), 0.0f64);
        let m = error_map(&img(o), &img(g), DistanceMetric::L2).unwrap();
        assert!((m[[0, 0, 2, 3]] - 0.03).abs() < 1e-12);
        assert_eq!(m[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn gaussian_metric_is_one_at_zero_distance() {
        let o = Array4::from_elem((1, 3, 4, 4), 0.25f64);
        let m = error_map(
            &img(o.clone()),
            &img(o),
            DistanceMetric::Gaussian { sigma: 1.0 },
        )
        .unwrap();
        assert!(m.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn normalize_guidance_min_max() {
        let mut e = Array4::from_elem((1, 1, 2, 2), 0.0f64);
        e[[0, 0, 0, 1]] = 4.0;
        e[[0, 0, 1, 0]] = 1.0;
        let g = normalize_guidance(&e);
        assert!((g[[0, 0, 1, 0]] - 0.25).abs() < 1e-7);
        assert_eq!(g[[0, 0, 0, 0]], 0.0);
        let flat = normalize_guidance(&Array4::from_elem((1, 1, 2, 2), 3.0f64));
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guidance_pyramid_pools_and_bounds() {
        let g1 = Array4::from_shape_vec((1, 1, 2, 2), vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        let pyr = guidance_pyramid(g1).unwrap();
        assert_eq!(pyr.level(1)[[0, 0, 0, 0]], 0.5);
        let ones = Array4::from_elem((1, 1, 4, 4), 1.0f64);
        let pyr = guidance_pyramid(ones).unwrap();
        assert!(pyr.level(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ragan_losses_at_equal_scores() {
        let r = Array1::from_elem(4, 0.7f64);
        let f = Array1::from_elem(4, 0.7f64);
        let expect = 2.0 * (2.0f64).ln();
        assert!((ragan_g_loss(&r, &f).unwrap() - expect).abs() < 1e-12);
        assert!((ragan_d_loss(&r, &f).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ragan_d_is_g_with_swapped_roles() {
        let r = Array1::from_vec(vec![0.3f64, -1.2, 0.8]);
        let f = Array1::from_vec(vec![1.1f64, 0.0, -0.4]);
        let d = ragan_d_loss(&r, &f).unwrap();
        let g = ragan_g_loss(&f, &r).unwrap();
        assert_eq!(d, g);
    }

    #[test]
    fn ragan_g_saturates_to_twice_the_gap() {
        // Real scores 20 above fake: both log-sigmoid tails linearize and the
        // loss approaches 2 * 20.
        let r = Array1::from_elem(3, 10.0f64);
        let f = Array1::from_elem(3, -10.0f64);
        let loss = ragan_g_loss(&r, &f).unwrap();
        assert!((loss - 40.0).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn mae_of_constant_offset() {
        let o = Array4::from_elem((1, 3, 4, 4), 0.5f64);
        let g = Array4::from_elem((1, 3, 4, 4), 0.0f64);
        assert!((mae_loss(&img(o), &img(g)).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let parts = LossTerms {
            mae: 1.0,
            self_guided: 1.0,
            fm_vgg: 1.0,
            fm_dis: 1.0,
            adv: 1.0,
            align: 1.0,
        };
        let w = LossWeights::default();
        let total: f64 = total_g_loss(&parts, &w);
        assert_eq!(total, 1.0 + 25.0 * (1.0 + 1.0) + 5.0 * 1.0 + 0.003 * 1.0 + 1.0 * 1.0);
        assert!((total - 57.003).abs() < 1e-12);
        let zero = LossWeights {
            lambda: 0.0,
            eta: 0.0,
            mu: 0.0,
            gamma: 0.0,
        };
        assert_eq!(total_g_loss(&parts, &zero), 1.0);
    }

    #[test]
    fn impulse_centers_are_exact() {
        let mut r = Array4::from_elem((1, 1, 8, 8), 0.0f64);
        r[[0, 0, 2, 5]] = 3.0;
        let c = feature_centers(&r).unwrap();
        assert_eq!(c.centers[[0, 0, 0]], 2.0);
        assert_eq!(c.centers[[0, 0, 1]], 5.0);
    }

    #[test]
    fn uniform_map_center_is_middle() {
        let r = Array4::from_elem((1, 1, 4, 4), 1.0f64);
        let c = feature_centers(&r).unwrap();
        assert!((c.centers[[0, 0, 0]] - 1.5).abs() < 1e-12);
        assert!((c.centers[[0, 0, 1]] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_of_identical_maps_is_zero() {
        let r = Array4::from_shape_fn((1, 3, 6, 6), |(_, k, i, j)| ((k + i * j) % 4) as f64);
        assert_eq!(alignment_loss(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn alignment_of_unit_offset_impulses_is_one() {
        let mut a = Array4::from_elem((1, 2, 8, 8), 0.0f64);
        let mut b = Array4::from_elem((1, 2, 8, 8), 0.0f64);
        // Channel 0: impulses one pixel apart along u. Channel 1: identical.
        a[[0, 0, 3, 4]] = 1.0;
        b[[0, 0, 4, 4]] = 1.0;
        a[[0, 1, 2, 2]] = 1.0;
        b[[0, 1, 2, 2]] = 1.0;
        let loss = alignment_loss(&a, &b).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_responses_rejected() {
        let r = Array4::from_elem((1, 1, 4, 4), -0.1f64);
        assert!(feature_centers(&r).is_err());
    }
}
