//! Dataset ingestion: per-dataset crop/scale policies, deterministic seeded
//! batching with fresh masks per item, image file IO, and a procedural
//! corpus generator for self-contained smoke training.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{resize_area, resize_bilinear, Exec};
use crate::masking::{self, HoleBox, MaskProtocol};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::types::{to_model_range, ImageBatch, Mask, RangeTag, TrainConfig};

/// Crop/scale policy applied before training or evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CropPolicy {
    /// Random 537x537 crop, then scale to the target size.
    ParisStreetview,
    /// Random 512x512 crop, then scale to the target size.
    Places2,
    /// Direct whole-image scale (1024-type face data).
    Face1024,
    /// Center-crop to a square, then scale.
    Generic,
}

impl CropPolicy {
    fn crop_size(self) -> Option<usize> {
        match self {
            CropPolicy::ParisStreetview => Some(537),
            CropPolicy::Places2 => Some(512),
            CropPolicy::Face1024 | CropPolicy::Generic => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Where and how to read a dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub policy: CropPolicy,
    pub split: Split,
    pub target_size: usize,
}

/// A scanned dataset: lexicographically sorted image files under
/// `root/<split>` (or `root` if no split subdirectory exists).
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: DatasetSpec,
    files: Vec<PathBuf>,
}

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg"];

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

impl Dataset {
    pub fn open(spec: DatasetSpec) -> Result<Self> {
        let split_dir = spec.root.join(spec.split.dir_name());
        let dir = if split_dir.is_dir() {
            split_dir
        } else {
            spec.root.clone()
        };
        if !dir.is_dir() {
            return Err(Error::data(format!(
                "dataset root '{}' does not exist",
                dir.display()
            )));
        }
        let files = list_images(&dir)?;
        if files.is_empty() {
            return Err(Error::data(format!(
                "no images found under '{}'",
                dir.display()
            )));
        }
        // The contract asks for at least one decodable image; check eagerly
        // so a bad directory fails at open, not mid-training.
        image::open(&files[0])
            .map_err(|e| Error::data(format!("cannot decode '{}': {e}", files[0].display())))?;
        Ok(Self { spec, files })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    /// Decode and prepare one image by index with the given rng.
    pub fn load_sample<F: Scalar>(&self, idx: usize, rng: &mut impl Rng) -> Result<ImageBatch<F>> {
        let img = image::open(&self.files[idx])
            .map_err(|e| {
                Error::data(format!("cannot decode '{}': {e}", self.files[idx].display()))
            })?
            .to_rgb8();
        prepare_sample(&img, self.spec.policy, self.spec.target_size, rng)
    }
}

/// Decode an RGB image into a unit-range `[1, 3, H, W]` array.
fn rgb_to_array<F: Scalar>(img: &RgbImage) -> Array4<F> {
    let (w, h) = img.dimensions();
    let mut a = Array4::<F>::zeros((1, 3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            a[[0, c, y as usize, x as usize]] = F::from_f64(p.0[c] as f64 / 255.0);
        }
    }
    a
}

/// Apply a crop/scale policy and map into model range.
pub fn prepare_sample<F: Scalar>(
    img: &RgbImage,
    policy: CropPolicy,
    target_size: usize,
    rng: &mut impl Rng,
) -> Result<ImageBatch<F>> {
    let mut a = rgb_to_array::<F>(img);
    let (_, _, mut h, mut w) = a.dim();
    match policy {
        CropPolicy::ParisStreetview | CropPolicy::Places2 => {
            let crop = policy.crop_size().expect("crop policy");
            if h < crop || w < crop {
                log::warn!(
                    "image {h}x{w} smaller than crop {crop}; scaling up before cropping"
                );
                let scale = (crop as f64 / h as f64).max(crop as f64 / w as f64);
                let nh = ((h as f64 * scale).ceil() as usize).max(crop);
                let nw = ((w as f64 * scale).ceil() as usize).max(crop);
                a = resize_bilinear(Exec::Sequential, &a, (nh, nw));
                h = a.dim().2;
                w = a.dim().3;
            }
            let top = rng.gen_range(0..=h - crop);
            let left = rng.gen_range(0..=w - crop);
            let cropped = a
                .slice(ndarray::s![.., .., top..top + crop, left..left + crop])
                .to_owned();
            a = scale_to(&cropped, target_size);
        }
        CropPolicy::Face1024 => {
            a = scale_to(&a, target_size);
        }
        CropPolicy::Generic => {
            let side = h.min(w);
            let top = (h - side) / 2;
            let left = (w - side) / 2;
            let cropped = a
                .slice(ndarray::s![.., .., top..top + side, left..left + side])
                .to_owned();
            a = scale_to(&cropped, target_size);
        }
    }
    let unit = ImageBatch::new(a.mapv(|v| v.max(F::zero()).min(F::one())), RangeTag::UnitRange)?;
    to_model_range(&unit)
}

/// Area filter when shrinking, bilinear when growing.
fn scale_to<F: Scalar>(a: &Array4<F>, target: usize) -> Array4<F> {
    let (_, _, h, w) = a.dim();
    if h == target && w == target {
        a.clone()
    } else if h >= target && w >= target {
        resize_area(a, (target, target))
    } else {
        resize_bilinear(Exec::Sequential, a, (target, target))
    }
}

/// One training batch: ground truth, fresh masks, and per-sample patch boxes
/// for the local critic branch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub gt: ImageBatch<f32>,
    pub mask: Mask,
    pub boxes: Vec<HoleBox>,
    /// Dataset indices of the samples (for diagnostics).
    pub indices: Vec<usize>,
}

/// Mask-sampling settings for the batch stream.
#[derive(Debug, Clone)]
pub struct BatchSettings {
    pub batch_size: usize,
    pub seed: u64,
    pub max_hole: usize,
    pub protocol: MaskProtocol,
    pub irregular_dir: Option<PathBuf>,
    /// Patch box side used for irregular masks (regular masks carry their
    /// own hole box).
    pub irregular_patch: usize,
}

impl BatchSettings {
    pub fn from_config(
        cfg: &TrainConfig,
        protocol: MaskProtocol,
        irregular_dir: Option<PathBuf>,
    ) -> Self {
        Self {
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            max_hole: cfg.max_hole,
            protocol,
            irregular_dir,
            irregular_patch: cfg.max_hole,
        }
    }
}

/// Deterministic epoch-shuffled batch stream. The full sequence is a pure
/// function of `(seed, dataset, settings)`; `skip_to` replays to any
/// iteration in O(1), which is what makes checkpoint resume exact.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    ds: &'a Dataset,
    settings: BatchSettings,
    irregular_files: Vec<PathBuf>,
    batch_index: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(ds: &'a Dataset, settings: BatchSettings) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::data("empty dataset"));
        }
        let irregular_files = match (&settings.protocol, &settings.irregular_dir) {
            (MaskProtocol::Irregular, Some(dir)) => {
                let files = list_images(dir)
                    .map_err(|e| Error::data(format!("irregular mask dir: {e}")))?;
                if files.is_empty() {
                    return Err(Error::data("no mask files in irregular_mask_dir"));
                }
                files
            }
            (MaskProtocol::Irregular, None) => {
                return Err(Error::config(
                    "mask_protocol = irregular requires paths.irregular_mask_dir",
                ))
            }
            _ => Vec::new(),
        };
        Ok(Self {
            ds,
            settings,
            irregular_files,
            batch_index: 0,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        let n = self.ds.len() as u64;
        let b = self.settings.batch_size as u64;
        (n + b - 1) / b
    }

    /// Jump the stream to the given batch index (used on resume).
    pub fn skip_to(&mut self, batch_index: u64) {
        self.batch_index = batch_index;
    }

    fn epoch_permutation(&mut self, epoch: u64) -> &[usize] {
        let needs = match &self.cached_epoch {
            Some((e, _)) => *e != epoch,
            None => true,
        };
        if needs {
            let mut perm: Vec<usize> = (0..self.ds.len()).collect();
            let mut rng = rng_for(self.settings.seed, "shuffle", epoch);
            // Fisher-Yates, fixed draw order.
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            self.cached_epoch = Some((epoch, perm));
        }
        &self.cached_epoch.as_ref().expect("cached").1
    }

    /// Produce the next batch (the stream is infinite; epochs repeat with
    /// fresh shuffles).
    pub fn next_batch(&mut self) -> Result<TrainBatch> {
        let i = self.batch_index;
        self.batch_index += 1;
        let bpe = self.batches_per_epoch();
        let epoch = i / bpe;
        let k = (i % bpe) as usize;
        let b = self.settings.batch_size;
        let n = self.ds.len();
        let indices: Vec<usize> = {
            let perm = self.epoch_permutation(epoch);
            perm[(k * b).min(n)..((k + 1) * b).min(n)].to_vec()
        };
        let size = self.ds.spec().target_size;

        let mut crop_rng = rng_for(self.settings.seed, "crop", i);
        let mut gt = Array4::<f32>::zeros((indices.len(), 3, size, size));
        for (slot, &idx) in indices.iter().enumerate() {
            let sample = self.ds.load_sample::<f32>(idx, &mut crop_rng)?;
            gt.index_axis_mut(Axis(0), slot)
                .assign(&sample.data().index_axis(Axis(0), 0));
        }
        let gt = ImageBatch::new_unchecked(gt, RangeTag::ModelRange);

        let mut mask_rng = rng_for(self.settings.seed, "mask", i);
        let mut mask = Array4::<u8>::zeros((indices.len(), 1, size, size));
        let mut boxes = Vec::with_capacity(indices.len());
        for slot in 0..indices.len() {
            let (m, bx) = match self.settings.protocol {
                MaskProtocol::Center => masking::center_mask(size, self.settings.max_hole)?,
                MaskProtocol::Random => {
                    masking::random_regular_mask(size, self.settings.max_hole, &mut mask_rng)
                }
                MaskProtocol::Irregular => {
                    let file =
                        &self.irregular_files[mask_rng.gen_range(0..self.irregular_files.len())];
                    let m = masking::load_irregular_mask(file, size, &mut mask_rng)?;
                    let bx = masking::local_patch_box(&m, self.settings.irregular_patch)?[0];
                    (m, bx)
                }
            };
            mask.index_axis_mut(Axis(0), slot)
                .assign(&m.data().index_axis(Axis(0), 0));
            boxes.push(bx);
        }
        Ok(TrainBatch {
            gt,
            mask: Mask::new(mask)?,
            boxes,
            indices,
        })
    }
}

/// Save a unit-range `[1, 3, H, W]` image as 8-bit PNG (`round(255 v)`).
pub fn save_unit_image(img: &ImageBatch<f32>, path: &Path) -> Result<()> {
    img.expect_range(RangeTag::UnitRange)?;
    let (_, _, h, w) = img.data().dim();
    let mut out = ImageBuffer::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        let px = |c: usize| -> u8 {
            (img.data()[[0, c, y as usize, x as usize]] * 255.0).round() as u8
        };
        *p = Rgb([px(0), px(1), px(2)]);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    out.save(path)?;
    Ok(())
}

/// Load a PNG/JPEG into a unit-range single-image batch.
pub fn load_unit_image(path: &Path) -> Result<ImageBatch<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read '{}': {e}", path.display())))?
        .to_rgb8();
    let a = rgb_to_array::<f32>(&img);
    ImageBatch::new(a, RangeTag::UnitRange)
}

/// Save a `[1, 1, H, W]` map in `[0, 1]` as grayscale PNG.
pub fn save_gray_map(map: &Array4<f32>, path: &Path) -> Result<()> {
    let (_, _, h, w) = map.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = map[[0, 0, y as usize, x as usize]].clamp(0.0, 1.0);
        *p = image::Luma([(v * 255.0).round() as u8]);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    out.save(path)?;
    Ok(())
}

/// Generate a deterministic procedural corpus: gradient backgrounds with
/// solid rectangles and ellipses plus light sensor noise. Enough structure
/// for an inpainting network to learn at desk scale without external data.
pub fn generate_synthetic_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..count {
        let mut rng = rng_for(seed, "synth", i as u64);
        let img = synthetic_image(size, &mut rng);
        let unit = crate::types::from_model_range(&img)?;
        let path = dir.join(format!("synth_{i:05}.png"));
        save_unit_image(&unit, &path)?;
    }
    Ok(())
}

fn synthetic_image(size: usize, rng: &mut impl Rng) -> ImageBatch<f32> {
    let mut a = Array4::<f32>::zeros((1, 3, size, size));
    let c0: [f32; 3] = [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ];
    let c1: [f32; 3] = [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ];
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    for i in 0..size {
        for j in 0..size {
            let t = ((i as f32 * dy + j as f32 * dx) / (size as f32 * 1.5) + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                a[[0, c, i, j]] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let n_rect = rng.gen_range(1..=3);
    for _ in 0..n_rect {
        let h = rng.gen_range(size / 8..size / 2);
        let w = rng.gen_range(size / 8..size / 2);
        let top = rng.gen_range(0..size - h);
        let left = rng.gen_range(0..size - w);
        let col: [f32; 3] = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ];
        for i in top..top + h {
            for j in left..left + w {
                for c in 0..3 {
                    a[[0, c, i, j]] = col[c];
                }
            }
        }
    }
    let n_ell = rng.gen_range(1..=3);
    for _ in 0..n_ell {
        let cy = rng.gen_range(0..size) as f32;
        let cx = rng.gen_range(0..size) as f32;
        let ry = rng.gen_range(size / 10..size / 3) as f32;
        let rx = rng.gen_range(size / 10..size / 3) as f32;
        let col: [f32; 3] = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ];
        for i in 0..size {
            for j in 0..size {
                let d = ((i as f32 - cy) / ry).powi(2) + ((j as f32 - cx) / rx).powi(2);
                if d <= 1.0 {
                    for c in 0..3 {
                        a[[0, c, i, j]] = col[c];
                    }
                }
            }
        }
    }
    for v in a.iter_mut() {
        *v = (*v + rng.gen_range(-0.01..0.01)).clamp(0.0, 1.0);
    }
    let unit = ImageBatch::new(a, RangeTag::UnitRange).expect("synthetic image in range");
    to_model_range(&unit).expect("range conversion")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(dir: &Path, n: usize, size: usize) -> Dataset {
        generate_synthetic_corpus(dir, n, size, 7).unwrap();
        Dataset::open(DatasetSpec {
            root: dir.to_path_buf(),
            policy: CropPolicy::Generic,
            split: Split::Train,
            target_size: size,
        })
        .unwrap()
    }

    #[test]
    fn batches_partition_an_epoch() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = corpus(tmp.path(), 10, 16);
        let cfg = TrainConfig {
            batch_size: 4,
            seed: 3,
            image_size: 16,
            max_hole: 8,
            ..Default::default()
        };
        let mut it = BatchIterator::new(
            &ds,
            BatchSettings::from_config(&cfg, MaskProtocol::Random, None),
        )
        .unwrap();
        assert_eq!(it.batches_per_epoch(), 3);
        let sizes: Vec<usize> = (0..3)
            .map(|_| it.next_batch().unwrap().gt.batch_size())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_stream_different_epochs_differ() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = corpus(tmp.path(), 6, 16);
        let cfg = TrainConfig {
            batch_size: 2,
            seed: 9,
            image_size: 16,
            max_hole: 8,
            ..Default::default()
        };
        let settings = BatchSettings::from_config(&cfg, MaskProtocol::Random, None);
        let mut a = BatchIterator::new(&ds, settings.clone()).unwrap();
        let mut b = BatchIterator::new(&ds, settings).unwrap();
        let mut order_epoch0 = Vec::new();
        let mut order_epoch1 = Vec::new();
        for step in 0..6 {
            let ba = a.next_batch().unwrap();
            let bb = b.next_batch().unwrap();
            assert_eq!(ba.indices, bb.indices, "step {step}");
            assert_eq!(ba.gt.data(), bb.gt.data());
            assert_eq!(ba.mask.data(), bb.mask.data());
            if step < 3 {
                order_epoch0.extend(ba.indices.clone());
            } else {
                order_epoch1.extend(ba.indices.clone());
            }
        }
        assert_ne!(order_epoch0, order_epoch1, "epoch shuffles should differ");
        let mut s0 = order_epoch0.clone();
        let mut s1 = order_epoch1.clone();
        s0.sort_unstable();
        s1.sort_unstable();
        assert_eq!(s0, s1, "each epoch covers the dataset");
    }

    #[test]
    fn skip_to_replays_the_stream() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = corpus(tmp.path(), 6, 16);
        let cfg = TrainConfig {
            batch_size: 2,
            seed: 5,
            image_size: 16,
            max_hole: 8,
            ..Default::default()
        };
        let settings = BatchSettings::from_config(&cfg, MaskProtocol::Random, None);
        let mut a = BatchIterator::new(&ds, settings.clone()).unwrap();
        for _ in 0..4 {
            a.next_batch().unwrap();
        }
        let expected = a.next_batch().unwrap();
        let mut b = BatchIterator::new(&ds, settings).unwrap();
        b.skip_to(4);
        let got = b.next_batch().unwrap();
        assert_eq!(expected.indices, got.indices);
        assert_eq!(expected.gt.data(), got.gt.data());
        assert_eq!(expected.mask.data(), got.mask.data());
    }

    #[test]
    fn prepare_sample_policies_hit_target_size() {
        let mut rng = rng_for(1, "t", 0);
        let img = RgbImage::from_fn(936, 537, |x, y| {
            Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
        });
        let s: ImageBatch<f32> =
            prepare_sample(&img, CropPolicy::ParisStreetview, 256, &mut rng).unwrap();
        assert_eq!(s.data().dim(), (1, 3, 256, 256));
        let face = RgbImage::from_fn(1024, 1024, |x, y| Rgb([x as u8, y as u8, 7]));
        let s: ImageBatch<f32> =
            prepare_sample(&face, CropPolicy::Face1024, 256, &mut rng).unwrap();
        assert_eq!(s.data().dim(), (1, 3, 256, 256));
    }

    #[test]
    fn prepare_sample_is_deterministic_under_seed() {
        let img = RgbImage::from_fn(600, 600, |x, y| Rgb([(x / 3) as u8, (y / 3) as u8, 0]));
        let a: ImageBatch<f32> =
            prepare_sample(&img, CropPolicy::Places2, 128, &mut rng_for(4, "c", 0)).unwrap();
        let b: ImageBatch<f32> =
            prepare_sample(&img, CropPolicy::Places2, 128, &mut rng_for(4, "c", 0)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn png_roundtrip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("img.png");
        let mut rng = rng_for(2, "img", 0);
        let img = synthetic_image(32, &mut rng);
        let unit = crate::types::from_model_range(&img).unwrap();
        save_unit_image(&unit, &path).unwrap();
        let loaded = load_unit_image(&path).unwrap();
        save_unit_image(&loaded, &tmp.path().join("img2.png")).unwrap();
        let b1 = fs::read(&path).unwrap();
        let b2 = fs::read(tmp.path().join("img2.png")).unwrap();
        assert_eq!(b1, b2, "quantize -> save -> load -> save is stable");
    }
}
