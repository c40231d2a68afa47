//! Shared domain types and value-range contracts.
//!
//! Images move through the system as [`ImageBatch`] values carrying an
//! explicit range tag; masks are strictly binary with 1 marking hole pixels.
//! Both are validated at construction so range or shape violations surface
//! immediately instead of as silent numeric drift.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Value range an [`ImageBatch`] is tagged with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    /// Model range `[-1, 1]`; what the networks consume and produce.
    ModelRange,
    /// Unit range `[0, 1]`; what codecs and metrics use.
    UnitRange,
}

impl RangeTag {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            RangeTag::ModelRange => (-1.0, 1.0),
            RangeTag::UnitRange => (0.0, 1.0),
        }
    }
}

/// A batch of RGB images, shape `[N, 3, H, W]`, values inside the tagged range.
///
/// `H` and `W` must be multiples of 4 so the two stride-2 stages divide evenly.
#[derive(Debug, Clone)]
pub struct ImageBatch<F: Scalar> {
    data: Array4<F>,
    range: RangeTag,
}

impl<F: Scalar> ImageBatch<F> {
    pub fn new(data: Array4<F>, range: RangeTag) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::contract(format!(
                "image batch must have 3 channels, got {c}"
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::contract(format!(
                "image size {h}x{w} must be a multiple of 4"
            )));
        }
        let (lo, hi) = range.bounds();
        let (lo, hi) = (F::from_f64(lo), F::from_f64(hi));
        // NaN fails this check as well.
        if !data.iter().all(|&v| v >= lo && v <= hi) {
            return Err(Error::contract(format!(
                "image values outside declared range {range:?}"
            )));
        }
        Ok(Self { data, range })
    }

    /// Construct without scanning values. For internal producers whose output
    /// range is guaranteed by construction (e.g. a Tanh head).
    pub(crate) fn new_unchecked(data: Array4<F>, range: RangeTag) -> Self {
        Self { data, range }
    }

    pub fn data(&self) -> &Array4<F> {
        &self.data
    }

    pub fn into_data(self) -> Array4<F> {
        self.data
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    pub fn expect_range(&self, range: RangeTag) -> Result<()> {
        if self.range != range {
            return Err(Error::contract(format!(
                "expected {range:?} image, got {:?}",
                self.range
            )));
        }
        Ok(())
    }
}

/// `out = 2 * in - 1`: map a unit-range batch to model range.
pub fn to_model_range<F: Scalar>(img: &ImageBatch<F>) -> Result<ImageBatch<F>> {
    img.expect_range(RangeTag::UnitRange)?;
    let two = F::from_f64(2.0);
    let one = F::one();
    let data = img.data().mapv(|v| two * v - one);
    Ok(ImageBatch::new_unchecked(data, RangeTag::ModelRange))
}

/// `out = (in + 1) / 2`, clamped to `[0, 1]`.
///
/// The clamp absorbs roundoff from arithmetic compositions; a Tanh head keeps
/// outputs inside `(-1, 1)` but sums with masks can land epsilon outside.
pub fn from_model_range<F: Scalar>(img: &ImageBatch<F>) -> Result<ImageBatch<F>> {
    img.expect_range(RangeTag::ModelRange)?;
    let half = F::from_f64(0.5);
    let one = F::one();
    let zero = F::zero();
    let data = img
        .data()
        .mapv(|v| ((v + one) * half).max(zero).min(one));
    Ok(ImageBatch::new_unchecked(data, RangeTag::UnitRange))
}

/// Binary hole mask, shape `[N, 1, H, W]`; 1 = hole (unknown), 0 = known.
#[derive(Debug, Clone)]
pub struct Mask {
    data: Array4<u8>,
}

impl Mask {
    pub fn new(data: Array4<u8>) -> Result<Self> {
        if data.dim().1 != 1 {
            return Err(Error::contract(format!(
                "mask must have 1 channel, got {}",
                data.dim().1
            )));
        }
        if !data.iter().all(|&v| v == 0 || v == 1) {
            return Err(Error::contract("mask values must be exactly 0 or 1"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<u8> {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// Mask as floating-point `[N, 1, H, W]` (1.0 = hole).
    pub fn to_float<F: Scalar>(&self) -> Array4<F> {
        self.data.mapv(|v| F::from_usize(v as usize))
    }

    pub fn hole_pixel_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Weights of the six-term training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub eta: f64,
    pub mu: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 25.0,
            eta: 5.0,
            mu: 0.003,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("mu", self.mu),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Optimizer and schedule settings for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub image_size: usize,
    pub max_hole: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            batch_size: 16,
            iterations: 10_000,
            seed: 0,
            image_size: 256,
            max_hole: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.max_hole == 0 || self.max_hole > self.image_size {
            return Err(Error::config(format!(
                "max_hole must satisfy 0 < max_hole <= image_size ({} vs {})",
                self.max_hole, self.image_size
            )));
        }
        if self.image_size % 4 != 0 {
            return Err(Error::config("image_size must be a multiple of 4"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        Ok(())
    }
}
