//! Mask generation, input formation, output composition and local-patch
//! selection.
//!
//! Convention everywhere: mask value 1 marks hole (unknown) pixels, 0 marks
//! known pixels; it is never inverted.

use std::path::Path;

use ndarray::{Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{resize_bilinear, Exec};
use crate::scalar::Scalar;
use crate::types::{ImageBatch, Mask, RangeTag};

/// How masks are drawn during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProtocol {
    Center,
    Random,
    Irregular,
}

impl Default for MaskProtocol {
    fn default() -> Self {
        MaskProtocol::Random
    }
}

impl MaskProtocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "center" => Ok(MaskProtocol::Center),
            "random" => Ok(MaskProtocol::Random),
            "irregular" => Ok(MaskProtocol::Irregular),
            other => Err(Error::config(format!(
                "unknown mask protocol '{other}' (expected center, random, irregular)"
            ))),
        }
    }
}

/// Load a mask PNG at its native size, no resizing or augmentation
/// (binarize at 0.5, white = hole). Used by the single-image CLI paths.
pub fn load_mask_exact(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read mask '{}': {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Array4::<u8>::zeros((1, 1, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        data[[0, 0, y as usize, x as usize]] = u8::from(p.0[0] as f32 / 255.0 > 0.5);
    }
    Mask::new(data)
}

/// An axis-aligned hole rectangle, fully inside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HoleBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl HoleBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

fn mask_from_box(image_size: usize, b: &HoleBox) -> Mask {
    let mut data = Array4::<u8>::zeros((1, 1, image_size, image_size));
    data.slice_mut(ndarray::s![
        0,
        0,
        b.top..b.top + b.height,
        b.left..b.left + b.width
    ])
    .fill(1);
    Mask::new(data).expect("box mask is binary")
}

/// Square hole of side `hole`, centered.
pub fn center_mask(image_size: usize, hole: usize) -> Result<(Mask, HoleBox)> {
    if hole > image_size {
        return Err(Error::contract(format!(
            "hole {hole} larger than image {image_size}"
        )));
    }
    let b = HoleBox {
        top: (image_size - hole) / 2,
        left: (image_size - hole) / 2,
        height: hole,
        width: hole,
    };
    Ok((mask_from_box(image_size, &b), b))
}

/// Random regular hole: each side uniform in `[max_hole/2, max_hole]`,
/// position uniform over valid placements. Draw order is fixed
/// (height, width, top, left) for reproducibility.
pub fn random_regular_mask(
    image_size: usize,
    max_hole: usize,
    rng: &mut impl Rng,
) -> (Mask, HoleBox) {
    assert!(max_hole <= image_size && max_hole >= 2);
    let height = rng.gen_range(max_hole / 2..=max_hole);
    let width = rng.gen_range(max_hole / 2..=max_hole);
    let top = rng.gen_range(0..=image_size - height);
    let left = rng.gen_range(0..=image_size - width);
    let b = HoleBox {
        top,
        left,
        height,
        width,
    };
    (mask_from_box(image_size, &b), b)
}

/// Load an irregular mask file (8-bit grayscale, white = hole), resize to
/// `image_size` and binarize at 0.5. The rng picks one of the eight dihedral
/// orientations, the usual augmentation for irregular mask sets.
pub fn load_irregular_mask(
    path: &Path,
    image_size: usize,
    rng: &mut impl Rng,
) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read mask '{}': {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut gray = Array4::<f32>::zeros((1, 1, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        gray[[0, 0, y as usize, x as usize]] = p.0[0] as f32 / 255.0;
    }
    let resized = resize_bilinear(Exec::Sequential, &gray, (image_size, image_size));
    let rot: u8 = rng.gen_range(0..4);
    let flip: bool = rng.gen();
    let mut data = Array4::<u8>::zeros((1, 1, image_size, image_size));
    for i in 0..image_size {
        for j in 0..image_size {
            let (si, mut sj) = match rot {
                0 => (i, j),
                1 => (j, image_size - 1 - i),
                2 => (image_size - 1 - i, image_size - 1 - j),
                _ => (image_size - 1 - j, i),
            };
            if flip {
                sj = image_size - 1 - sj;
            }
            data[[0, 0, i, j]] = u8::from(resized[[0, 0, si, sj]] > 0.5);
        }
    }
    Mask::new(data)
}

/// Best `patch x patch` box per sample: the placement covering the most hole
/// pixels, ties broken topmost then leftmost; an all-zero mask falls back to
/// the centered box. Exact via a summed-area table.
pub fn local_patch_box(mask: &Mask, patch: usize) -> Result<Vec<HoleBox>> {
    let (n, _, h, w) = mask.data().dim();
    if patch > h || patch > w {
        return Err(Error::contract(format!(
            "patch {patch} exceeds mask size {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let plane = mask.data().index_axis(Axis(0), ni);
        let plane = plane.index_axis(Axis(0), 0);
        // sat[i][j] = sum of plane[..i, ..j]
        let mut sat = vec![vec![0u32; w + 1]; h + 1];
        for i in 0..h {
            for j in 0..w {
                sat[i + 1][j + 1] =
                    sat[i][j + 1] + sat[i + 1][j] - sat[i][j] + plane[[i, j]] as u32;
            }
        }
        let cover = |top: usize, left: usize| -> u32 {
            sat[top + patch][left + patch] + sat[top][left]
                - sat[top][left + patch]
                - sat[top + patch][left]
        };
        let total_holes = sat[h][w];
        if total_holes == 0 {
            out.push(HoleBox {
                top: (h - patch) / 2,
                left: (w - patch) / 2,
                height: patch,
                width: patch,
            });
            continue;
        }
        let mut best = (0u32, 0usize, 0usize);
        for top in 0..=h - patch {
            for left in 0..=w - patch {
                let c = cover(top, left);
                if c > best.0 {
                    best = (c, top, left);
                }
            }
        }
        out.push(HoleBox {
            top: best.1,
            left: best.2,
            height: patch,
            width: patch,
        });
    }
    Ok(out)
}

/// `I_in = I_gt * (1 - M)`: zero out hole pixels (model range).
pub fn make_input<F: Scalar>(gt: &ImageBatch<F>, mask: &Mask) -> Result<ImageBatch<F>> {
    gt.expect_range(RangeTag::ModelRange)?;
    check_mask_shape(gt, mask)?;
    let mut data = gt.data().clone();
    apply_mask(&mut data, mask, |v, hole| if hole { F::zero() } else { v });
    Ok(ImageBatch::new_unchecked(data, RangeTag::ModelRange))
}

/// `I_out = I_in + I_pred * M`: copy known pixels from the input, take the
/// prediction inside the hole. Known pixels are preserved bit-exactly.
pub fn compose_output<F: Scalar>(
    img_in: &ImageBatch<F>,
    pred: &ImageBatch<F>,
    mask: &Mask,
) -> Result<ImageBatch<F>> {
    img_in.expect_range(RangeTag::ModelRange)?;
    pred.expect_range(RangeTag::ModelRange)?;
    if img_in.data().dim() != pred.data().dim() {
        return Err(Error::contract("input / prediction shape mismatch"));
    }
    check_mask_shape(img_in, mask)?;
    let mut data = img_in.data().clone();
    let p = pred.data();
    let m = mask.data();
    let (n, c, h, w) = data.dim();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if m[[ni, 0, i, j]] == 1 {
                        data[[ni, ci, i, j]] = p[[ni, ci, i, j]];
                    }
                }
            }
        }
    }
    Ok(ImageBatch::new_unchecked(data, RangeTag::ModelRange))
}

/// Gradient of [`compose_output`] w.r.t. the prediction: the hole selector.
pub fn compose_grad_to_pred<F: Scalar>(g_out: &Array4<F>, mask: &Mask) -> Array4<F> {
    let mut g = g_out.clone();
    let m = mask.data();
    let (n, c, h, w) = g.dim();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if m[[ni, 0, i, j]] == 0 {
                        g[[ni, ci, i, j]] = F::zero();
                    }
                }
            }
        }
    }
    g
}

fn check_mask_shape<F: Scalar>(img: &ImageBatch<F>, mask: &Mask) -> Result<()> {
    if (img.batch_size(), img.height(), img.width())
        != (mask.batch_size(), mask.height(), mask.width())
    {
        return Err(Error::contract("image / mask shape mismatch"));
    }
    Ok(())
}

fn apply_mask<F: Scalar>(data: &mut Array4<F>, mask: &Mask, f: impl Fn(F, bool) -> F) {
    let m = mask.data();
    let (n, c, h, w) = data.dim();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let hole = m[[ni, 0, i, j]] == 1;
                    data[[ni, ci, i, j]] = f(data[[ni, ci, i, j]], hole);
                }
            }
        }
    }
}

/// Crop each sample at its box and rescale to `patch` (bilinear). Returns the
/// stacked patches; differentiable via [`crop_resize_backward`].
pub fn crop_resize<F: Scalar>(
    exec: Exec,
    img: &Array4<F>,
    boxes: &[HoleBox],
    patch: usize,
) -> Array4<F> {
    let (n, c, _, _) = img.dim();
    assert_eq!(n, boxes.len(), "one box per sample");
    let mut out = Array4::<F>::zeros((n, c, patch, patch));
    for (ni, b) in boxes.iter().enumerate() {
        let crop = img
            .slice(ndarray::s![
                ni..ni + 1,
                ..,
                b.top..b.top + b.height,
                b.left..b.left + b.width
            ])
            .to_owned();
        let resized = resize_bilinear(exec, &crop, (patch, patch));
        out.slice_mut(ndarray::s![ni..ni + 1, .., .., ..])
            .assign(&resized);
    }
    out
}

/// Scatter patch gradients back onto the full frame.
pub fn crop_resize_backward<F: Scalar>(
    exec: Exec,
    g_patch: &Array4<F>,
    boxes: &[HoleBox],
    frame_hw: (usize, usize),
) -> Array4<F> {
    let (n, c, _, _) = g_patch.dim();
    let mut g = Array4::<F>::zeros((n, c, frame_hw.0, frame_hw.1));
    for (ni, b) in boxes.iter().enumerate() {
        let gp = g_patch
            .slice(ndarray::s![ni..ni + 1, .., .., ..])
            .to_owned();
        let g_crop = crate::kernels::resize_bilinear_backward(exec, &gp, (b.height, b.width));
        let mut dst = g.slice_mut(ndarray::s![
            ni..ni + 1,
            ..,
            b.top..b.top + b.height,
            b.left..b.left + b.width
        ]);
        dst += &g_crop;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_mask_geometry() {
        let (mask, b) = center_mask(256, 128).unwrap();
        assert_eq!(
            b,
            HoleBox {
                top: 64,
                left: 64,
                height: 128,
                width: 128
            }
        );
        assert_eq!(mask.hole_pixel_count(), 128 * 128);
        let (full, _) = center_mask(256, 256).unwrap();
        assert_eq!(full.hole_pixel_count(), 256 * 256);
        assert!(center_mask(128, 256).is_err());
    }

    #[test]
    fn random_masks_stay_in_bounds_and_reproduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m1, b1) = random_regular_mask(64, 32, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let (m2, b2) = random_regular_mask(64, 32, &mut rng2);
        assert_eq!(b1, b2);
        assert_eq!(m1.data(), m2.data());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (_, b) = random_regular_mask(64, 32, &mut rng);
            assert!(b.top + b.height <= 64 && b.left + b.width <= 64);
            assert!((16..=32).contains(&b.height) && (16..=32).contains(&b.width));
        }
    }

    #[test]
    fn make_input_and_compose_are_selectors() {
        let gt = ImageBatch::new(
            Array4::from_shape_fn((1, 3, 8, 8), |(_, c, i, j)| {
                ((c + i + j) % 5) as f32 * 0.3 - 0.6
            }),
            RangeTag::ModelRange,
        )
        .unwrap();
        let (mask, _) = center_mask(8, 4).unwrap();
        let input = make_input(&gt, &mask).unwrap();
        // Known pixels bit-exact, hole pixels zero.
        for ((ni, ci, i, j), &v) in input.data().indexed_iter() {
            if mask.data()[[ni, 0, i, j]] == 1 {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, gt.data()[[ni, ci, i, j]]);
            }
        }
        let composed = compose_output(&input, &gt, &mask).unwrap();
        assert_eq!(composed.data(), gt.data());
    }

    #[test]
    fn compose_with_extreme_masks() {
        let gt = ImageBatch::new(
            Array4::from_elem((1, 3, 8, 8), 0.5f32),
            RangeTag::ModelRange,
        )
        .unwrap();
        let pred = ImageBatch::new(
            Array4::from_elem((1, 3, 8, 8), -0.25f32),
            RangeTag::ModelRange,
        )
        .unwrap();
        let zeros = Mask::new(Array4::zeros((1, 1, 8, 8))).unwrap();
        let ones = Mask::new(Array4::from_elem((1, 1, 8, 8), 1u8)).unwrap();
        assert_eq!(
            compose_output(&gt, &pred, &zeros).unwrap().data(),
            gt.data()
        );
        assert_eq!(
            compose_output(&gt, &pred, &ones).unwrap().data(),
            pred.data()
        );
    }

    #[test]
    fn local_patch_box_prefers_covered_holes() {
        let (mask, b) = center_mask(64, 32).unwrap();
        let boxes = local_patch_box(&mask, 32).unwrap();
        assert_eq!(boxes[0], b);

        // Single hole pixel: the tie-break picks the topmost-leftmost window
        // containing it.
        let mut data = Array4::<u8>::zeros((1, 1, 32, 32));
        data[[0, 0, 10, 10]] = 1;
        let mask = Mask::new(data).unwrap();
        let boxes = local_patch_box(&mask, 8).unwrap();
        assert_eq!(boxes[0].top, 3);
        assert_eq!(boxes[0].left, 3);

        // All-zero mask falls back to the center.
        let empty = Mask::new(Array4::zeros((1, 1, 32, 32))).unwrap();
        let boxes = local_patch_box(&empty, 8).unwrap();
        assert_eq!((boxes[0].top, boxes[0].left), (12, 12));
    }

    #[test]
    fn crop_resize_identity_when_box_matches_patch() {
        let img = Array4::from_shape_fn((1, 3, 16, 16), |(_, c, i, j)| {
            (c as f32) + (i as f32) * 0.1 + (j as f32) * 0.01
        });
        let boxes = vec![HoleBox {
            top: 4,
            left: 4,
            height: 8,
            width: 8,
        }];
        let patch = crop_resize(Exec::Sequential, &img, &boxes, 8);
        for ci in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(patch[[0, ci, i, j]], img[[0, ci, 4 + i, 4 + j]]);
                }
            }
        }
    }
}
