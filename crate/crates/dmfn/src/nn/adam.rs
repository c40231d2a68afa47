//! Adam optimizer over name-keyed parameter sets.

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::{GradMap, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug)]
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, ArrayD<F>>,
    v: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update step. Parameters without a gradient entry are skipped and
    /// their moments left untouched.
    pub fn step(&mut self, params: &mut impl ParamSet<F>, grads: &GradMap<F>) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = F::from_f64(self.lr / bc1);
        let bc2_sqrt_inv = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_params_mut(&mut |name, mut w| {
            let Some(g) = grads.get(&name) else { return };
            let m_t = m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v_t = v
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut w)
                .and(m_t)
                .and(v_t)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let v_hat_sqrt = (*v).sqrt() * bc2_sqrt_inv;
                    *w = *w - step * *m / (v_hat_sqrt + eps);
                });
        });
    }

    /// Optimizer state tensors for checkpointing, prefixed `m.` / `v.`.
    pub fn state_tensors(&self) -> Vec<(String, ArrayD<F>)> {
        let mut out = Vec::new();
        for (k, a) in &self.m {
            out.push((format!("m.{k}"), a.clone()));
        }
        for (k, a) in &self.v {
            out.push((format!("v.{k}"), a.clone()));
        }
        out
    }

    /// Restore optimizer state saved by [`Adam::state_tensors`].
    pub fn load_state(&mut self, t: u64, tensors: &IndexMap<String, ArrayD<F>>, prefix: &str) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (k, a) in tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                if let Some(name) = rest.strip_prefix("m.") {
                    self.m.insert(name.to_string(), a.clone());
                } else if let Some(name) = rest.strip_prefix("v.") {
                    self.v.insert(name.to_string(), a.clone());
                }
            }
        }
    }
}
