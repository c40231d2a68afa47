//! Two-branch critic: a global branch over the full frame and a local branch
//! over the hole patch. Branch features are globally average-pooled,
//! concatenated and mapped to one pre-sigmoid score per sample; the five
//! local-branch activations are exposed as taps for the discriminator
//! feature-matching loss.

use ndarray::{concatenate, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Exec};
use crate::nn::{Act, Conv2d, GradMap, Linear, ParamSet, Unit, UnitCache};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub global_layers: usize,
    pub local_layers: usize,
    pub base_width: usize,
    /// Local patches are cropped at the hole and bilinearly rescaled to this
    /// size before entering the local branch.
    pub local_patch_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            global_layers: 6,
            local_layers: 5,
            base_width: 64,
            local_patch_size: 128,
        }
    }
}

pub const TAP_COUNT: usize = 5;

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_layers < TAP_COUNT {
            return Err(Error::config(format!(
                "local_layers must be >= {TAP_COUNT} (one per feature tap)"
            )));
        }
        if self.global_layers < 1 || self.base_width < 1 {
            return Err(Error::config("discriminator layer/width counts invalid"));
        }
        if self.local_patch_size < 1 << self.local_layers {
            return Err(Error::config(
                "local_patch_size too small for the local branch depth",
            ));
        }
        Ok(())
    }

    fn width(&self, layer: usize) -> usize {
        (self.base_width << layer).min(512)
    }
}

/// Pre-sigmoid scores plus the local-branch feature taps (shallow to deep).
#[derive(Debug, Clone)]
pub struct CriticResult<F: Scalar> {
    pub score: Array1<F>,
    pub local_taps: Vec<Array4<F>>,
}

#[derive(Debug)]
pub struct DiscriminatorCache<F: Scalar> {
    global_inputs: Vec<Array4<F>>,
    global: Vec<UnitCache<F>>,
    local_inputs: Vec<Array4<F>>,
    local: Vec<UnitCache<F>>,
    global_last: Array4<F>,
    local_last: Array4<F>,
    fc_in: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct Discriminator<F: Scalar> {
    cfg: DiscriminatorConfig,
    global: Vec<Unit<F>>,
    local: Vec<Unit<F>>,
    fc: Linear<F>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "discriminator", 0));
        let mut global = Vec::new();
        let mut in_c = 3;
        for l in 0..cfg.global_layers {
            let out_c = cfg.width(l);
            global.push(Unit::conv(
                Conv2d::orthogonal(in_c, out_c, 4, 2, 1, 1, &mut rng),
                None,
                Act::Leaky(LEAKY_SLOPE),
            ));
            in_c = out_c;
        }
        let global_out = in_c;
        let mut local = Vec::new();
        let mut in_c = 3;
        for l in 0..cfg.local_layers {
            let out_c = cfg.width(l);
            local.push(Unit::conv(
                Conv2d::orthogonal(in_c, out_c, 4, 2, 1, 1, &mut rng),
                None,
                Act::Leaky(LEAKY_SLOPE),
            ));
            in_c = out_c;
        }
        let fc = Linear::orthogonal(global_out + in_c, 1, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            global,
            local,
            fc,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    fn check_inputs(&self, full: &Array4<F>, patch: &Array4<F>) -> Result<()> {
        if full.dim().0 != patch.dim().0 {
            return Err(Error::contract(
                "full image and local patch batch sizes differ",
            ));
        }
        if full.dim().1 != 3 || patch.dim().1 != 3 {
            return Err(Error::contract("critic inputs must have 3 channels"));
        }
        Ok(())
    }

    /// Inference forward: scores and local taps, no cache.
    pub fn forward(&self, exec: Exec, full: &Array4<F>, patch: &Array4<F>) -> Result<CriticResult<F>> {
        let (result, _) = self.forward_impl(exec, full, patch, false)?;
        Ok(result)
    }

    /// Training forward keeping caches for [`Discriminator::backward`].
    pub fn forward_train(
        &self,
        exec: Exec,
        full: &Array4<F>,
        patch: &Array4<F>,
    ) -> Result<(CriticResult<F>, DiscriminatorCache<F>)> {
        let (result, cache) = self.forward_impl(exec, full, patch, true)?;
        Ok((result, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        exec: Exec,
        full: &Array4<F>,
        patch: &Array4<F>,
        keep: bool,
    ) -> Result<(CriticResult<F>, Option<DiscriminatorCache<F>>)> {
        self.check_inputs(full, patch)?;
        let mut global_inputs = Vec::new();
        let mut global_caches = Vec::new();
        let mut h = full.clone();
        for unit in &self.global {
            assert_spatial_halving(&h);
            if keep {
                let (out, c) = unit.forward_t(exec, &h);
                global_inputs.push(h);
                global_caches.push(c);
                h = out;
            } else {
                h = unit.forward(exec, &h);
            }
        }
        let global_last = h;

        let mut local_inputs = Vec::new();
        let mut local_caches = Vec::new();
        let mut taps = Vec::with_capacity(self.local.len());
        let mut h = patch.clone();
        for unit in &self.local {
            assert_spatial_halving(&h);
            if keep {
                let (out, c) = unit.forward_t(exec, &h);
                local_inputs.push(h);
                local_caches.push(c);
                h = out;
            } else {
                h = unit.forward(exec, &h);
            }
            taps.push(h.clone());
        }
        let local_last = h;

        let g_pool = kernels::global_avg_pool(&global_last);
        let l_pool = kernels::global_avg_pool(&local_last);
        let fc_in = concatenate(Axis(1), &[g_pool.view(), l_pool.view()]).expect("score concat");
        let score2 = self.fc.forward(&fc_in);
        let score = score2.index_axis(Axis(1), 0).to_owned();
        let result = CriticResult {
            score,
            local_taps: taps,
        };
        let cache = keep.then(|| DiscriminatorCache {
            global_inputs,
            global: global_caches,
            local_inputs,
            local: local_caches,
            global_last,
            local_last,
            fc_in,
        });
        Ok((result, cache))
    }

    /// Backward pass. `g_score` is the gradient at the pre-sigmoid scores;
    /// `g_taps`, when present, adds gradients at each local tap. Parameter
    /// gradients are accumulated when `grads` is given (discriminator step);
    /// input gradients are returned when `need_input_grads` (generator step).
    pub fn backward(
        &self,
        exec: Exec,
        cache: &DiscriminatorCache<F>,
        g_score: &Array1<F>,
        g_taps: Option<&[Array4<F>]>,
        need_input_grads: bool,
        mut grads: Option<&mut GradMap<F>>,
    ) -> (Option<Array4<F>>, Option<Array4<F>>) {
        let n = g_score.len();
        let g_score2 = g_score.view().into_shape((n, 1)).expect("score grad shape");
        let fc_grads = grads.as_deref_mut().map(|gm| (gm, "fc"));
        let g_fc_in = self.fc.backward(&cache.fc_in, &g_score2.to_owned(), fc_grads);
        let global_c = cache.global_last.dim().1;
        let g_gpool = g_fc_in.slice(ndarray::s![.., ..global_c]).to_owned();
        let g_lpool = g_fc_in.slice(ndarray::s![.., global_c..]).to_owned();
        let (gh, gw) = (cache.global_last.dim().2, cache.global_last.dim().3);
        let (lh, lw) = (cache.local_last.dim().2, cache.local_last.dim().3);
        let mut g_global = kernels::global_avg_pool_backward(&g_gpool, (gh, gw));
        let mut g_local = kernels::global_avg_pool_backward(&g_lpool, (lh, lw));

        // Global branch.
        for (i, unit) in self.global.iter().enumerate().rev() {
            let need = need_input_grads || i > 0;
            let sub = grads.as_deref_mut().map(|gm| (gm, format!("global{}", i + 1)));
            let g_in = match sub {
                Some((gm, p)) => unit.backward(
                    exec,
                    &cache.global_inputs[i],
                    &cache.global[i],
                    &g_global,
                    need,
                    Some((gm, p.as_str())),
                ),
                None => unit.backward(
                    exec,
                    &cache.global_inputs[i],
                    &cache.global[i],
                    &g_global,
                    need,
                    None,
                ),
            };
            match g_in {
                Some(g) => g_global = g,
                None => break,
            }
        }
        // Local branch, folding tap gradients in at each level.
        for (i, unit) in self.local.iter().enumerate().rev() {
            if let Some(taps) = g_taps {
                g_local += &taps[i];
            }
            let need = need_input_grads || i > 0;
            let sub = grads.as_deref_mut().map(|gm| (gm, format!("local{}", i + 1)));
            let g_in = match sub {
                Some((gm, p)) => unit.backward(
                    exec,
                    &cache.local_inputs[i],
                    &cache.local[i],
                    &g_local,
                    need,
                    Some((gm, p.as_str())),
                ),
                None => unit.backward(
                    exec,
                    &cache.local_inputs[i],
                    &cache.local[i],
                    &g_local,
                    need,
                    None,
                ),
            };
            match g_in {
                Some(g) => g_local = g,
                None => break,
            }
        }
        if need_input_grads {
            (Some(g_global), Some(g_local))
        } else {
            (None, None)
        }
    }
}

/// Tap/branch maps halve per stride-2 layer; inputs must stay divisible.
fn assert_spatial_halving<F: Scalar>(x: &Array4<F>) {
    let (_, _, h, w) = x.dim();
    assert!(
        h % 2 == 0 && w % 2 == 0 && h >= 2 && w >= 2,
        "critic input {h}x{w} not divisible by 2"
    );
}

impl<F: Scalar> ParamSet<F> for Discriminator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        for (i, u) in self.global.iter().enumerate() {
            u.visit(&format!("global{}", i + 1), f);
        }
        for (i, u) in self.local.iter().enumerate() {
            u.visit(&format!("local{}", i + 1), f);
        }
        f("fc.w".into(), self.fc.w.view().into_dyn());
        f("fc.b".into(), self.fc.b.view().into_dyn());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'_, F>)) {
        for (i, u) in self.global.iter_mut().enumerate() {
            u.visit_mut(&format!("global{}", i + 1), f);
        }
        for (i, u) in self.local.iter_mut().enumerate() {
            u.visit_mut(&format!("local{}", i + 1), f);
        }
        f("fc.w".into(), self.fc.w.view_mut().into_dyn());
        f("fc.b".into(), self.fc.b.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_and_taps_have_expected_shapes() {
        let d = Discriminator::<f32>::new(&DiscriminatorConfig::default(), 5).unwrap();
        let full = Array4::from_elem((3, 3, 128, 128), 0.1f32);
        let patch = Array4::from_elem((3, 3, 64, 64), -0.2f32);
        let r = d.forward(Exec::default(), &full, &patch).unwrap();
        assert_eq!(r.score.len(), 3);
        assert_eq!(r.local_taps.len(), TAP_COUNT);
        for (l, tap) in r.local_taps.iter().enumerate() {
            assert_eq!(tap.dim().0, 3);
            assert_eq!(tap.dim().2, 64 >> (l + 1), "tap {l} spatial size");
        }
        assert!(r.score.iter().all(|v| v.is_finite()));
        assert!(r.local_taps.iter().flat_map(|t| t.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let d = Discriminator::<f32>::new(&DiscriminatorConfig::default(), 5).unwrap();
        let full = Array4::from_shape_fn((2, 3, 64, 64), |(n, c, i, j)| {
            ((n + c + i + j) % 5) as f32 * 0.1 - 0.2
        });
        let patch = Array4::from_elem((2, 3, 32, 32), 0.3f32);
        let a = d.forward(Exec::default(), &full, &patch).unwrap();
        let b = d.forward(Exec::default(), &full, &patch).unwrap();
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn mismatched_batch_sizes_rejected() {
        let d = Discriminator::<f32>::new(&DiscriminatorConfig::default(), 5).unwrap();
        let full = Array4::from_elem((2, 3, 64, 64), 0.0f32);
        let patch = Array4::from_elem((3, 3, 32, 32), 0.0f32);
        assert!(d.forward(Exec::default(), &full, &patch).is_err());
    }
}
