//! Network building blocks with explicit forward/backward passes.
//!
//! Layers store their parameters inline; gradients are accumulated into a
//! name-keyed [`GradMap`] whose keys match the names produced by
//! [`ParamSet::visit_params`], which is also the naming used by checkpoint
//! manifests and the Adam optimizer state.

pub mod adam;
pub mod init;
pub mod layers;

pub use adam::Adam;
pub use layers::{Act, Conv2d, ConvT2d, InstanceNorm, Linear, Unit, UnitCache};

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use crate::scalar::Scalar;

/// Name-keyed gradient accumulator.
#[derive(Debug, Default)]
pub struct GradMap<F: Scalar> {
    grads: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> GradMap<F> {
    pub fn new() -> Self {
        Self {
            grads: IndexMap::new(),
        }
    }

    /// Accumulate a gradient contribution for `name`.
    pub fn add(&mut self, name: String, grad: ArrayD<F>) {
        match self.grads.get_mut(&name) {
            Some(g) => *g += &grad,
            None => {
                self.grads.insert(name, grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.grads.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.grads.iter()
    }

    /// Global L2 norm over every stored gradient.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = F::from_f64(max_norm / norm);
            for g in self.grads.values_mut() {
                g.mapv_inplace(|v| v * scale);
            }
        }
    }
}

/// A collection of named trainable parameters.
pub trait ParamSet<F: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(String, ArrayViewD<'_, F>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>));
}

/// Total number of trainable scalars.
pub fn param_count<F: Scalar>(set: &impl ParamSet<F>) -> usize {
    let mut n = 0;
    set.visit_params(&mut |_, v| n += v.len());
    n
}

/// Names and shapes in declaration order.
pub fn param_shapes<F: Scalar>(set: &impl ParamSet<F>) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    set.visit_params(&mut |name, v| out.push((name, v.shape().to_vec())));
    out
}

/// Snapshot parameters into owned arrays (for checkpoints).
pub fn param_snapshot<F: Scalar>(set: &impl ParamSet<F>) -> Vec<(String, ArrayD<F>)> {
    let mut out = Vec::new();
    set.visit_params(&mut |name, v| out.push((name, v.to_owned())));
    out
}

/// Load parameters by name, checking shapes. Returns an error naming the
/// first mismatched or missing parameter.
pub fn param_load<F: Scalar>(
    set: &mut impl ParamSet<F>,
    source: &IndexMap<String, ArrayD<F>>,
    prefix: &str,
) -> crate::Result<()> {
    let mut err: Option<crate::Error> = None;
    set.visit_params_mut(&mut |name, mut view| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match source.get(&key) {
            Some(stored) if stored.shape() == view.shape() => view.assign(stored),
            Some(stored) => {
                err = Some(crate::Error::Checkpoint(format!(
                    "shape mismatch for parameter '{key}': stored {:?}, expected {:?}",
                    stored.shape(),
                    view.shape()
                )));
            }
            None => {
                err = Some(crate::Error::Checkpoint(format!(
                    "missing parameter '{key}' in checkpoint"
                )));
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
