//! Layer primitives: convolutions, instance norm, linear, and the
//! conv(+norm)(+activation) [`Unit`] every network here is wired from.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use super::init;
use super::GradMap;
use crate::kernels::{self, Exec, InstanceNormCache};
use crate::scalar::Scalar;

/// Activation applied at the end of a [`Unit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    None,
    Relu,
    Leaky(f64),
    Tanh,
}

impl Act {
    pub fn apply<F: Scalar>(self, x: &mut Array4<F>) {
        match self {
            Act::None => {}
            Act::Relu => x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() }),
            Act::Leaky(a) => {
                let a = F::from_f64(a);
                x.mapv_inplace(|v| if v > F::zero() { v } else { v * a })
            }
            Act::Tanh => x.mapv_inplace(|v| v.tanh()),
        }
    }

    /// Gradient gate given the activation *input* value.
    fn gate<F: Scalar>(self, pre: F, gy: F) -> F {
        match self {
            Act::None => gy,
            Act::Relu => {
                if pre > F::zero() {
                    gy
                } else {
                    F::zero()
                }
            }
            Act::Leaky(a) => {
                if pre > F::zero() {
                    gy
                } else {
                    gy * F::from_f64(a)
                }
            }
            Act::Tanh => {
                let t = pre.tanh();
                gy * (F::one() - t * t)
            }
        }
    }
}

/// Plain convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn orthogonal(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: init::orthogonal_conv((out_c, in_c, kernel, kernel), rng),
            b: init::zeros_bias(out_c),
            stride,
            pad,
            dilation,
        }
    }

    pub fn he(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: init::he_normal_conv((out_c, in_c, kernel, kernel), rng),
            b: init::zeros_bias(out_c),
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn forward(&self, exec: Exec, x: &Array4<F>) -> Array4<F> {
        kernels::conv2d(
            exec,
            x,
            &self.w.view(),
            Some(&self.b),
            self.stride,
            self.pad,
            self.dilation,
        )
    }

    pub fn backward(
        &self,
        exec: Exec,
        x: &Array4<F>,
        gy: &Array4<F>,
        need_input_grad: bool,
        grads: Option<(&mut GradMap<F>, &str)>,
    ) -> Option<Array4<F>> {
        let (gx, gp) = kernels::conv2d_backward(
            exec,
            x,
            &self.w.view(),
            gy,
            self.stride,
            self.pad,
            self.dilation,
            need_input_grad,
            grads.is_some(),
        );
        if let (Some((gm, prefix)), Some((gw, gb))) = (grads, gp) {
            gm.add(format!("{prefix}.w"), gw.into_dyn());
            gm.add(format!("{prefix}.b"), gb.into_dyn());
        }
        gx
    }
}

/// Transposed convolution layer (`[C_in, C_out, k, k]` weights).
#[derive(Debug, Clone)]
pub struct ConvT2d<F: Scalar> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> ConvT2d<F> {
    pub fn orthogonal(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: init::orthogonal_conv((in_c, out_c, kernel, kernel), rng),
            b: init::zeros_bias(out_c),
            stride,
            pad,
        }
    }

    pub fn forward(&self, exec: Exec, x: &Array4<F>) -> Array4<F> {
        kernels::conv_transpose2d(exec, x, &self.w.view(), Some(&self.b), self.stride, self.pad)
    }

    pub fn backward(
        &self,
        exec: Exec,
        x: &Array4<F>,
        gy: &Array4<F>,
        need_input_grad: bool,
        grads: Option<(&mut GradMap<F>, &str)>,
    ) -> Option<Array4<F>> {
        let (gx, gp) = kernels::conv_transpose2d_backward(
            exec,
            x,
            &self.w.view(),
            gy,
            self.stride,
            self.pad,
            need_input_grad,
            grads.is_some(),
        );
        if let (Some((gm, prefix)), Some((gw, gb))) = (grads, gp) {
            gm.add(format!("{prefix}.w"), gw.into_dyn());
            gm.add(format!("{prefix}.b"), gb.into_dyn());
        }
        gx
    }
}

/// Instance normalization, optionally with learned affine parameters.
#[derive(Debug, Clone)]
pub struct InstanceNorm<F: Scalar> {
    pub gamma: Option<Array1<F>>,
    pub beta: Option<Array1<F>>,
    pub eps: F,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl<F: Scalar> InstanceNorm<F> {
    /// Whitening only; no trainable parameters (used inside fusion blocks).
    pub fn plain() -> Self {
        Self {
            gamma: None,
            beta: None,
            eps: F::from_f64(INSTANCE_NORM_EPS),
        }
    }

    /// Learned affine scale and shift.
    pub fn affine(channels: usize) -> Self {
        Self {
            gamma: Some(Array1::from_elem(channels, F::one())),
            beta: Some(Array1::zeros(channels)),
            eps: F::from_f64(INSTANCE_NORM_EPS),
        }
    }

    pub fn forward(&self, exec: Exec, x: &Array4<F>) -> (Array4<F>, InstanceNormCache<F>) {
        kernels::instance_norm(exec, x, self.gamma.as_ref(), self.beta.as_ref(), self.eps)
    }

    pub fn backward(
        &self,
        exec: Exec,
        x: &Array4<F>,
        gy: &Array4<F>,
        cache: &InstanceNormCache<F>,
        grads: Option<(&mut GradMap<F>, &str)>,
    ) -> Array4<F> {
        let (gx, affine) =
            kernels::instance_norm_backward(exec, x, gy, cache, self.gamma.as_ref());
        if let (Some((gm, prefix)), Some((dg, db))) = (grads, affine) {
            gm.add(format!("{prefix}.g"), dg.into_dyn());
            gm.add(format!("{prefix}.b"), db.into_dyn());
        }
        gx
    }

    /// Normalized value for a single element, given saved statistics.
    fn norm_value(&self, v: F, mu: F, inv_std: F, c: usize) -> F {
        let g = self.gamma.as_ref().map_or(F::one(), |g| g[c]);
        let b = self.beta.as_ref().map_or(F::zero(), |b| b[c]);
        g * (v - mu) * inv_std + b
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn orthogonal(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: init::orthogonal_linear(out_dim, in_dim, rng),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        kernels::linear(x, &self.w, &self.b)
    }

    pub fn backward(
        &self,
        x: &Array2<F>,
        gy: &Array2<F>,
        grads: Option<(&mut GradMap<F>, &str)>,
    ) -> Array2<F> {
        let (gx, gw, gb) = kernels::linear_backward(x, &self.w, gy);
        if let Some((gm, prefix)) = grads {
            gm.add(format!("{prefix}.w"), gw.into_dyn());
            gm.add(format!("{prefix}.b"), gb.into_dyn());
        }
        gx
    }
}

/// Convolution op of a [`Unit`]: plain or transposed.
#[derive(Debug, Clone)]
pub enum ConvOp<F: Scalar> {
    Conv(Conv2d<F>),
    ConvT(ConvT2d<F>),
}

/// conv (+ instance norm) (+ activation), the building block of every network
/// in this crate. The forward cache keeps the convolution input implicit (the
/// caller owns it) and stores only the pre-norm map plus norm statistics.
#[derive(Debug, Clone)]
pub struct Unit<F: Scalar> {
    pub op: ConvOp<F>,
    pub norm: Option<InstanceNorm<F>>,
    pub act: Act,
}

#[derive(Debug)]
pub struct UnitCache<F: Scalar> {
    /// Convolution output, before normalization/activation.
    pub pre_norm: Array4<F>,
    pub norm: Option<InstanceNormCache<F>>,
}

impl<F: Scalar> Unit<F> {
    pub fn conv(conv: Conv2d<F>, norm: Option<InstanceNorm<F>>, act: Act) -> Self {
        Self {
            op: ConvOp::Conv(conv),
            norm,
            act,
        }
    }

    pub fn conv_t(conv: ConvT2d<F>, norm: Option<InstanceNorm<F>>, act: Act) -> Self {
        Self {
            op: ConvOp::ConvT(conv),
            norm,
            act,
        }
    }

    pub fn forward(&self, exec: Exec, x: &Array4<F>) -> Array4<F> {
        let mut y = match &self.op {
            ConvOp::Conv(c) => c.forward(exec, x),
            ConvOp::ConvT(c) => c.forward(exec, x),
        };
        if let Some(norm) = &self.norm {
            let (ny, _) = norm.forward(exec, &y);
            y = ny;
        }
        self.act.apply(&mut y);
        y
    }

    /// Forward keeping what backward needs. Returns `(output, cache)`.
    pub fn forward_t(&self, exec: Exec, x: &Array4<F>) -> (Array4<F>, UnitCache<F>) {
        let pre_norm = match &self.op {
            ConvOp::Conv(c) => c.forward(exec, x),
            ConvOp::ConvT(c) => c.forward(exec, x),
        };
        let (mut y, norm_cache) = match &self.norm {
            Some(norm) => {
                let (ny, cache) = norm.forward(exec, &pre_norm);
                (ny, Some(cache))
            }
            None => (pre_norm.clone(), None),
        };
        self.act.apply(&mut y);
        (
            y,
            UnitCache {
                pre_norm,
                norm: norm_cache,
            },
        )
    }

    /// Gate the output gradient through the activation, recomputing the
    /// activation input from the pre-norm map and saved statistics.
    fn gated_grad(&self, cache: &UnitCache<F>, gy: &Array4<F>) -> Array4<F> {
        if self.act == Act::None {
            return gy.clone();
        }
        let (n, c, _, _) = cache.pre_norm.dim();
        let mut gated = gy.clone();
        for ni in 0..n {
            for ci in 0..c {
                let mut gplane = gated.index_axis_mut(Axis(0), ni);
                let mut gplane = gplane.index_axis_mut(Axis(0), ci);
                let gseg = gplane.as_slice_mut().expect("grad plane contiguous");
                let pre_plane = cache.pre_norm.index_axis(Axis(0), ni);
                let pre_plane = pre_plane.index_axis(Axis(0), ci);
                let pre = pre_plane.as_slice().expect("pre-norm plane contiguous");
                match (&self.norm, &cache.norm) {
                    (Some(norm), Some(nc)) => {
                        let (mu, is) = (nc.mean[[ni, ci]], nc.inv_std[[ni, ci]]);
                        for (g, &p) in gseg.iter_mut().zip(pre.iter()) {
                            *g = self.act.gate(norm.norm_value(p, mu, is, ci), *g);
                        }
                    }
                    _ => {
                        for (g, &p) in gseg.iter_mut().zip(pre.iter()) {
                            *g = self.act.gate(p, *g);
                        }
                    }
                }
            }
        }
        gated
    }

    /// Backward from the gradient at the unit output. `x` must be the same
    /// input passed to `forward_t`.
    pub fn backward(
        &self,
        exec: Exec,
        x: &Array4<F>,
        cache: &UnitCache<F>,
        gy: &Array4<F>,
        need_input_grad: bool,
        mut grads: Option<(&mut GradMap<F>, &str)>,
    ) -> Option<Array4<F>> {
        let gated = self.gated_grad(cache, gy);
        let g_pre = match (&self.norm, &cache.norm) {
            (Some(norm), Some(nc)) => match grads.as_mut() {
                Some((gm, prefix)) => {
                    let norm_prefix = format!("{prefix}.norm");
                    norm.backward(
                        exec,
                        &cache.pre_norm,
                        &gated,
                        nc,
                        Some((&mut **gm, norm_prefix.as_str())),
                    )
                }
                None => norm.backward(exec, &cache.pre_norm, &gated, nc, None),
            },
            _ => gated,
        };
        match &self.op {
            ConvOp::Conv(c) => c.backward(exec, x, &g_pre, need_input_grad, grads),
            ConvOp::ConvT(c) => c.backward(exec, x, &g_pre, need_input_grad, grads),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        match &self.op {
            ConvOp::Conv(c) => {
                f(format!("{prefix}.w"), c.w.view().into_dyn());
                f(format!("{prefix}.b"), c.b.view().into_dyn());
            }
            ConvOp::ConvT(c) => {
                f(format!("{prefix}.w"), c.w.view().into_dyn());
                f(format!("{prefix}.b"), c.b.view().into_dyn());
            }
        }
        if let Some(norm) = &self.norm {
            if let (Some(g), Some(b)) = (&norm.gamma, &norm.beta) {
                f(format!("{prefix}.norm.g"), g.view().into_dyn());
                f(format!("{prefix}.norm.b"), b.view().into_dyn());
            }
        }
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'_, F>),
    ) {
        match &mut self.op {
            ConvOp::Conv(c) => {
                f(format!("{prefix}.w"), c.w.view_mut().into_dyn());
                f(format!("{prefix}.b"), c.b.view_mut().into_dyn());
            }
            ConvOp::ConvT(c) => {
                f(format!("{prefix}.w"), c.w.view_mut().into_dyn());
                f(format!("{prefix}.b"), c.b.view_mut().into_dyn());
            }
        }
        if let Some(norm) = &mut self.norm {
            if let (Some(g), Some(b)) = (&mut norm.gamma, &mut norm.beta) {
                f(format!("{prefix}.norm.g"), g.view_mut().into_dyn());
                f(format!("{prefix}.norm.b"), b.view_mut().into_dyn());
            }
        }
    }
}
