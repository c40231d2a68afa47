//! Frozen VGG19 feature extractor exposing the five relu{l}_1 taps.
//!
//! Weights come from a manifest file converted from a public pretrained
//! release (`scripts/fetch_vgg19.py`), or from a seeded He-normal draw
//! (`synthetic:<seed>`) when pretrained weights are unavailable; the
//! synthetic extractor keeps the exact architecture and stays frozen, which
//! preserves every structural contract at desk scale.

use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::kernels::{self, Exec};
use crate::nn::{Act, Conv2d, Unit, UnitCache};
use crate::scalar::Scalar;
use crate::types::{ImageBatch, RangeTag};

/// ImageNet preprocessing constants (unit-range RGB).
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Channel width of each pyramid level.
pub const LEVEL_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

/// (name, in_channels, out_channels, pool_before, tap)
const LAYOUT: &[(&str, usize, usize, bool, bool)] = &[
    ("conv1_1", 3, 64, false, true),
    ("conv1_2", 64, 64, false, false),
    ("conv2_1", 64, 128, true, true),
    ("conv2_2", 128, 128, false, false),
    ("conv3_1", 128, 256, true, true),
    ("conv3_2", 256, 256, false, false),
    ("conv3_3", 256, 256, false, false),
    ("conv3_4", 256, 256, false, false),
    ("conv4_1", 256, 512, true, true),
    ("conv4_2", 512, 512, false, false),
    ("conv4_3", 512, 512, false, false),
    ("conv4_4", 512, 512, false, false),
    ("conv5_1", 512, 512, true, true),
];

/// The five relu{l}_1 activation maps, shallow to deep.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<F: Scalar> {
    levels: Vec<Array4<F>>,
}

impl<F: Scalar> FeaturePyramid<F> {
    /// Validate and wrap five post-ReLU maps. Spatial sizes must halve from
    /// level to level and all activations must be non-negative.
    pub fn new(levels: Vec<Array4<F>>) -> Result<Self> {
        if levels.len() != 5 {
            return Err(Error::contract(format!(
                "feature pyramid needs 5 levels, got {}",
                levels.len()
            )));
        }
        for w in levels.windows(2) {
            let (_, _, h0, w0) = w[0].dim();
            let (_, _, h1, w1) = w[1].dim();
            if h1 != h0 / 2 || w1 != w0 / 2 {
                return Err(Error::contract(format!(
                    "pyramid levels must halve spatially ({h0}x{w0} -> {h1}x{w1})"
                )));
            }
        }
        if levels
            .iter()
            .any(|l| l.iter().any(|&v| v < F::zero()))
        {
            return Err(Error::contract("pyramid activations must be >= 0"));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Array4<F>] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &Array4<F> {
        &self.levels[l]
    }
}

/// Where extractor weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VggSource {
    File(PathBuf),
    Synthetic(u64),
}

impl VggSource {
    /// Parse a config string: `synthetic:<seed>` or a file path. An empty
    /// string is rejected with a load hint.
    pub fn parse(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::MissingVggWeights {
                path: "<unset>".into(),
            });
        }
        if let Some(seed) = s.strip_prefix("synthetic:") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::config(format!("bad synthetic vgg seed in '{s}'")))?;
            return Ok(VggSource::Synthetic(seed));
        }
        Ok(VggSource::File(PathBuf::from(s)))
    }
}

/// Frozen feature extractor.
#[derive(Debug, Clone)]
pub struct VggFeatures<F: Scalar> {
    units: Vec<Unit<F>>,
    checksum: String,
}

#[derive(Debug)]
pub struct VggCache<F: Scalar> {
    inputs: Vec<Array4<F>>,
    units: Vec<UnitCache<F>>,
    pools: Vec<Option<(Array4<u8>, (usize, usize))>>,
    input_dim: (usize, usize, usize, usize),
}

impl<F: Scalar> VggFeatures<F> {
    pub fn load(source: &VggSource) -> Result<Self> {
        match source {
            VggSource::File(path) => Self::from_file(path),
            VggSource::Synthetic(seed) => Ok(Self::synthetic(*seed)),
        }
    }

    /// Load pretrained weights from a manifest file.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingVggWeights {
                path: path.display().to_string(),
            });
        }
        let (header, tensors) = checkpoint::read_manifest::<F>(path)?;
        if header.kind != "vgg19_features" {
            return Err(Error::Checkpoint(format!(
                "expected vgg19_features manifest, got '{}'",
                header.kind
            )));
        }
        let mut units = Vec::with_capacity(LAYOUT.len());
        for &(name, in_c, out_c, _, _) in LAYOUT {
            let w = tensors
                .get(&format!("{name}.w"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}.w'")))?;
            let b = tensors
                .get(&format!("{name}.b"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}.b'")))?;
            let expected = [out_c, in_c, 3, 3];
            if w.shape() != expected {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for '{name}.w': stored {:?}, expected {:?}",
                    w.shape(),
                    expected
                )));
            }
            let w4 = w.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
            let b1 = b.clone().into_dimensionality::<ndarray::Ix1>().map_err(|_| {
                Error::Checkpoint(format!("bias '{name}.b' must be rank 1"))
            })?;
            units.push(Unit::conv(
                Conv2d {
                    w: w4,
                    b: b1,
                    stride: 1,
                    pad: 1,
                    dilation: 1,
                },
                None,
                Act::Relu,
            ));
        }
        Ok(Self::finish(units))
    }

    /// Seeded random extractor with the exact VGG19 architecture.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(seed, "vgg", 0));
        let units = LAYOUT
            .iter()
            .map(|&(_, in_c, out_c, _, _)| {
                Unit::conv(Conv2d::he(in_c, out_c, 3, 1, 1, &mut rng), None, Act::Relu)
            })
            .collect();
        Self::finish(units)
    }

    fn finish(units: Vec<Unit<F>>) -> Self {
        let mut tensors = Vec::new();
        for (unit, &(name, ..)) in units.iter().zip(LAYOUT) {
            unit.visit(name, &mut |n, v| tensors.push((n, v.to_owned())));
        }
        let checksum = checkpoint::tensors_checksum(&tensors);
        Self { units, checksum }
    }

    /// SHA-256 of the weights; constant across a training run.
    pub fn weights_checksum(&self) -> &str {
        &self.checksum
    }

    /// Save in manifest form (used by tests to build fixture weights).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (unit, &(name, ..)) in self.units.iter().zip(LAYOUT) {
            unit.visit(name, &mut |n, v| tensors.push((n, v.to_owned())));
        }
        checkpoint::write_manifest(path, "vgg19_features", serde_json::Value::Null, &tensors)
    }

    fn preprocess(&self, img: &ImageBatch<F>) -> Array4<F> {
        let mut x = img.data().clone();
        let half = F::from_f64(0.5);
        for c in 0..3 {
            let mean = F::from_f64(IMAGENET_MEAN[c]);
            let inv_std = F::from_f64(1.0 / IMAGENET_STD[c]);
            x.index_axis_mut(Axis(1), c)
                .mapv_inplace(|v| ((v + F::one()) * half - mean) * inv_std);
        }
        x
    }

    /// Extract the five-tap pyramid (inference).
    pub fn extract_pyramid(&self, exec: Exec, img: &ImageBatch<F>) -> Result<FeaturePyramid<F>> {
        img.expect_range(RangeTag::ModelRange)?;
        let mut h = self.preprocess(img);
        let mut taps = Vec::with_capacity(5);
        for (unit, &(_, _, _, pool_before, tap)) in self.units.iter().zip(LAYOUT) {
            if pool_before {
                let (pooled, _) = kernels::max_pool2(exec, &h);
                h = pooled;
            }
            h = unit.forward(exec, &h);
            if tap {
                taps.push(h.clone());
            }
        }
        FeaturePyramid::new(taps)
    }

    /// Extract keeping caches for [`VggFeatures::backward`].
    pub fn extract_train(
        &self,
        exec: Exec,
        img: &ImageBatch<F>,
    ) -> Result<(FeaturePyramid<F>, VggCache<F>)> {
        img.expect_range(RangeTag::ModelRange)?;
        let x = self.preprocess(img);
        let input_dim = x.dim();
        let mut h = x;
        let mut taps = Vec::with_capacity(5);
        let mut inputs = Vec::with_capacity(self.units.len());
        let mut unit_caches = Vec::with_capacity(self.units.len());
        let mut pools = Vec::with_capacity(self.units.len());
        for (unit, &(_, _, _, pool_before, tap)) in self.units.iter().zip(LAYOUT) {
            if pool_before {
                let in_hw = (h.dim().2, h.dim().3);
                let (pooled, idx) = kernels::max_pool2(exec, &h);
                pools.push(Some((idx, in_hw)));
                h = pooled;
            } else {
                pools.push(None);
            }
            let (out, cache) = unit.forward_t(exec, &h);
            inputs.push(h);
            unit_caches.push(cache);
            h = out;
            if tap {
                taps.push(h.clone());
            }
        }
        Ok((
            FeaturePyramid::new(taps)?,
            VggCache {
                inputs,
                units: unit_caches,
                pools,
                input_dim,
            },
        ))
    }

    /// Backward from gradients at the five taps to the gradient w.r.t. the
    /// model-range input image. VGG weights are frozen; no parameter
    /// gradients exist.
    pub fn backward(&self, exec: Exec, cache: &VggCache<F>, tap_grads: &[Array4<F>]) -> Array4<F> {
        assert_eq!(tap_grads.len(), 5, "five tap gradients expected");
        let mut tap_idx = 4;
        let mut g: Option<Array4<F>> = None;
        for (i, (unit, &(_, _, _, _pool, tap))) in
            self.units.iter().zip(LAYOUT).enumerate().rev()
        {
            if tap {
                g = Some(match g.take() {
                    Some(acc) => acc + &tap_grads[tap_idx],
                    None => tap_grads[tap_idx].clone(),
                });
                tap_idx = tap_idx.wrapping_sub(1);
            }
            let g_out = g.expect("deepest tap initializes the gradient");
            let g_in = unit
                .backward(exec, &cache.inputs[i], &cache.units[i], &g_out, true, None)
                .expect("vgg input grad");
            g = Some(match &cache.pools[i] {
                Some((idx, in_hw)) => kernels::max_pool2_backward(exec, &g_in, idx, *in_hw),
                None => g_in,
            });
        }
        let mut g_pre = g.expect("gradient reached the input");
        assert_eq!(g_pre.dim(), cache.input_dim);
        // Chain through preprocessing: d pre / d model = 0.5 / std.
        let half = F::from_f64(0.5);
        for c in 0..3 {
            let scale = half * F::from_f64(1.0 / IMAGENET_STD[c]);
            g_pre.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * scale);
        }
        g_pre
    }
}

/// Channel-mean map of one pyramid level (1-indexed), for the debug emitters.
pub fn average_feature_map<F: Scalar>(pyr: &FeaturePyramid<F>, level: usize) -> Result<Array4<F>> {
    if !(1..=5).contains(&level) {
        return Err(Error::contract(format!(
            "pyramid level must be in 1..=5, got {level}"
        )));
    }
    let map = pyr.level(level - 1);
    let (n, c, h, w) = map.dim();
    let inv_c = F::from_f64(1.0 / c as f64);
    let mut out = Array4::<F>::zeros((n, 1, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let plane = map.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let mut acc = out.index_axis_mut(Axis(0), ni);
            let mut acc = acc.index_axis_mut(Axis(0), 0);
            acc.zip_mut_with(&plane, |a, &v| *a = *a + v);
        }
    }
    out.mapv_inplace(|v| v * inv_c);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn model_img(n: usize, s: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> ImageBatch<f32> {
        ImageBatch::new(Array4::from_shape_fn((n, 3, s, s), |(a, b, c, d)| f(a, b, c, d)), RangeTag::ModelRange)
            .unwrap()
    }

    #[test]
    fn pyramid_levels_have_vgg_shapes() {
        let vgg = VggFeatures::<f32>::synthetic(1);
        let img = model_img(1, 64, |_, c, i, j| {
            0.3 * ((c + i + j) % 3) as f32 - 0.2
        });
        let pyr = vgg.extract_pyramid(Exec::default(), &img).unwrap();
        let sizes: Vec<_> = pyr.levels().iter().map(|l| l.dim()).collect();
        assert_eq!(sizes[0], (1, 64, 64, 64));
        assert_eq!(sizes[1], (1, 128, 32, 32));
        assert_eq!(sizes[2], (1, 256, 16, 16));
        assert_eq!(sizes[3], (1, 512, 8, 8));
        assert_eq!(sizes[4], (1, 512, 4, 4));
    }

    #[test]
    fn taps_are_non_negative_and_deterministic() {
        let vgg = VggFeatures::<f32>::synthetic(2);
        let img = model_img(1, 32, |_, c, i, j| ((c * 31 + i * 7 + j) % 11) as f32 / 11.0 - 0.4);
        let a = vgg.extract_pyramid(Exec::default(), &img).unwrap();
        let b = vgg.extract_pyramid(Exec::default(), &img).unwrap();
        for (la, lb) in a.levels().iter().zip(b.levels()) {
            assert_eq!(la, lb);
            assert!(la.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn missing_weights_file_is_a_load_error_with_hint() {
        let err = VggFeatures::<f32>::from_file(Path::new("/nonexistent/vgg.ckpt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fetch_vgg19"), "hint missing: {msg}");
        assert!(msg.contains("synthetic"), "hint missing: {msg}");
    }

    #[test]
    fn average_feature_map_of_constant_is_constant() {
        let pyr = FeaturePyramid::new(vec![
            Array4::from_elem((1, 4, 16, 16), 0.7f32),
            Array4::from_elem((1, 8, 8, 8), 0.7f32),
            Array4::from_elem((1, 8, 4, 4), 0.7f32),
            Array4::from_elem((1, 8, 2, 2), 0.7f32),
            Array4::from_elem((1, 8, 1, 1), 0.7f32),
        ])
        .unwrap();
        let avg = average_feature_map(&pyr, 1).unwrap();
        assert_eq!(avg.dim(), (1, 1, 16, 16));
        assert!(avg.iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert!(average_feature_map(&pyr, 6).is_err());
    }
}
