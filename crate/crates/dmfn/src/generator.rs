//! The inpainting generator: encoder, a chain of dense multi-scale fusion
//! blocks (DMFB), transposed-convolution upsampler and Tanh output head.
//!
//! A DMFB reduces the 256-channel bottleneck to 64 channels, runs four
//! parallel 3x3 dilated convolutions, densifies them through cumulative
//! combination convolutions, fuses the concatenation with a 1x1 convolution
//! and adds the block input back. The structural ablations replace the
//! middle part: a single dilated convolution (`rate_k`), plain concatenation
//! (`no_combination`), or parameter-free cumulative sums (`no_ki`).

use ndarray::{concatenate, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Exec, InstanceNormCache};
use crate::nn::{Act, Conv2d, ConvT2d, GradMap, InstanceNorm, ParamSet, Unit, UnitCache};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::types::{ImageBatch, Mask, RangeTag};

/// Dense multi-scale fusion block configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DmfbConfig {
    pub in_channels: usize,
    pub branch_channels: usize,
    pub dilations: Vec<usize>,
    /// Instance normalization on/off. Turned off only for receptive-field
    /// analysis, where the norms' global statistics would blur the support.
    pub normalize: bool,
}

impl Default for DmfbConfig {
    fn default() -> Self {
        Self {
            in_channels: 256,
            branch_channels: 64,
            dilations: vec![1, 2, 4, 8],
            normalize: true,
        }
    }
}

impl DmfbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.len() != 4 {
            return Err(Error::config("dmfb.dilations must have exactly 4 entries"));
        }
        if !self.dilations.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("dmfb.dilations must be strictly increasing"));
        }
        if self.in_channels == 0 || self.branch_channels == 0 {
            return Err(Error::config("dmfb channel counts must be positive"));
        }
        Ok(())
    }

    /// Width of the concatenation fed to the 1x1 fusion convolution.
    pub fn concat_width(&self) -> usize {
        self.branch_channels * 4
    }
}

/// Generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// RGB + mask planes; fixed at 4.
    pub input_channels: usize,
    pub base_width: usize,
    pub bottleneck_channels: usize,
    pub num_dmfb: usize,
    pub dmfb: DmfbConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            base_width: 64,
            bottleneck_channels: 256,
            num_dmfb: 8,
            dmfb: DmfbConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 4 {
            return Err(Error::config("generator input_channels is fixed at 4"));
        }
        if self.bottleneck_channels != self.dmfb.in_channels {
            return Err(Error::config(
                "bottleneck_channels must equal dmfb.in_channels",
            ));
        }
        if self.num_dmfb < 1 {
            return Err(Error::config("num_dmfb must be >= 1"));
        }
        if self.bottleneck_channels % 4 != 0 {
            return Err(Error::config("bottleneck_channels must be divisible by 4"));
        }
        self.dmfb.validate()
    }
}

/// Middle-part wiring of the fusion block.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AblationVariant {
    FullDmfb,
    /// Single dilated convolution in place of branches + combination.
    /// `wide` keeps a 256->256 middle convolution (with the unused channel
    /// reducer still allocated); the narrow wiring routes through the
    /// 64-channel reduction instead.
    RateK {
        rate: usize,
        #[serde(default = "default_wide")]
        wide: bool,
    },
    NoCombination,
    NoKi,
}

fn default_wide() -> bool {
    true
}

impl Default for AblationVariant {
    fn default() -> Self {
        AblationVariant::FullDmfb
    }
}

impl AblationVariant {
    pub fn parse(s: &str) -> Result<Self> {
        let low = s.to_ascii_lowercase();
        match low.as_str() {
            "full" | "full_dmfb" | "dmfb" => Ok(AblationVariant::FullDmfb),
            "no_combination" | "no_comb" => Ok(AblationVariant::NoCombination),
            "no_ki" => Ok(AblationVariant::NoKi),
            other => {
                if let Some(num) = other
                    .strip_prefix("rate=")
                    .or_else(|| other.strip_prefix("rate_"))
                {
                    let rate: usize = num
                        .parse()
                        .map_err(|_| Error::config(format!("bad ablation rate '{s}'")))?;
                    Ok(AblationVariant::RateK { rate, wide: true })
                } else {
                    Err(Error::config(format!(
                        "unknown ablation '{s}' (expected full_dmfb, rate_<k>, no_combination, no_ki)"
                    )))
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            AblationVariant::FullDmfb => "DMFB".to_string(),
            AblationVariant::RateK { rate, wide } => {
                if *wide {
                    format!("rate={rate}")
                } else {
                    format!("rate={rate} (narrow)")
                }
            }
            AblationVariant::NoCombination => "w/o combination".to_string(),
            AblationVariant::NoKi => "w/o K_i".to_string(),
        }
    }
}

fn norm_if<F: Scalar>(normalize: bool) -> Option<InstanceNorm<F>> {
    normalize.then(InstanceNorm::plain)
}

/// Run a unit backward, extending the gradient-map prefix with `sub_name`.
fn unit_backward<F: Scalar>(
    unit: &Unit<F>,
    exec: Exec,
    x: &Array4<F>,
    cache: &UnitCache<F>,
    gy: &Array4<F>,
    need_input_grad: bool,
    grads: &mut Option<(&mut GradMap<F>, &str)>,
    sub_name: &str,
) -> Option<Array4<F>> {
    match grads {
        Some((gm, prefix)) => {
            let p = format!("{prefix}.{sub_name}");
            unit.backward(exec, x, cache, gy, need_input_grad, Some((&mut **gm, p.as_str())))
        }
        None => unit.backward(exec, x, cache, gy, need_input_grad, None),
    }
}

/// One fusion block.
#[derive(Debug, Clone)]
pub struct Dmfb<F: Scalar> {
    cfg: DmfbConfig,
    variant: AblationVariant,
    reduce: Unit<F>,
    branches: Vec<Unit<F>>,
    combiners: Vec<Unit<F>>,
    middle: Option<Unit<F>>,
    concat_norm: Option<InstanceNorm<F>>,
    fuse: Unit<F>,
}

#[derive(Debug)]
pub struct DmfbCache<F: Scalar> {
    reduce: Option<(UnitCache<F>, Array4<F>)>,
    branches: Vec<(UnitCache<F>, Array4<F>)>,
    combiners: Vec<(Array4<F>, UnitCache<F>)>,
    middle: Option<(UnitCache<F>, Array4<F>)>,
    concat_in: Option<Array4<F>>,
    concat_norm: Option<InstanceNormCache<F>>,
    post_concat: Array4<F>,
    fuse: UnitCache<F>,
}

impl<F: Scalar> Dmfb<F> {
    pub fn new(cfg: &DmfbConfig, variant: &AblationVariant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = cfg.in_channels;
        let bc = cfg.branch_channels;
        let nrm = cfg.normalize;
        let reduce = Unit::conv(
            Conv2d::orthogonal(cin, bc, 3, 1, 1, 1, &mut rng),
            norm_if(nrm),
            Act::Relu,
        );
        let mut branches = Vec::new();
        let mut combiners = Vec::new();
        let mut middle = None;
        let mut concat_norm = None;
        match variant {
            AblationVariant::FullDmfb | AblationVariant::NoCombination | AblationVariant::NoKi => {
                for &d in &cfg.dilations {
                    branches.push(Unit::conv(
                        Conv2d::orthogonal(bc, bc, 3, 1, d, d, &mut rng),
                        norm_if(nrm),
                        Act::Relu,
                    ));
                }
                if matches!(variant, AblationVariant::FullDmfb) {
                    for _ in 0..3 {
                        combiners.push(Unit::conv(
                            Conv2d::orthogonal(bc, bc, 3, 1, 1, 1, &mut rng),
                            norm_if(nrm),
                            Act::Relu,
                        ));
                    }
                }
                concat_norm = norm_if(nrm);
            }
            AblationVariant::RateK { rate, wide } => {
                if *rate == 0 {
                    return Err(Error::config("ablation rate must be >= 1"));
                }
                let in_c = if *wide { cin } else { bc };
                middle = Some(Unit::conv(
                    Conv2d::orthogonal(in_c, cin, 3, 1, *rate, *rate, &mut rng),
                    norm_if(nrm),
                    Act::Relu,
                ));
            }
        }
        let fuse_in = match variant {
            AblationVariant::RateK { .. } => cin,
            _ => cfg.concat_width(),
        };
        let fuse = Unit::conv(
            Conv2d::orthogonal(fuse_in, cin, 1, 1, 0, 1, &mut rng),
            norm_if(nrm),
            Act::None,
        );
        Ok(Self {
            cfg: cfg.clone(),
            variant: variant.clone(),
            reduce,
            branches,
            combiners,
            middle,
            concat_norm,
            fuse,
        })
    }

    pub fn variant(&self) -> &AblationVariant {
        &self.variant
    }

    pub fn config(&self) -> &DmfbConfig {
        &self.cfg
    }

    pub fn forward(&self, exec: Exec, x: &Array4<F>) -> Array4<F> {
        let (y, _) = self.forward_impl(exec, x, false);
        y
    }

    pub fn forward_t(&self, exec: Exec, x: &Array4<F>) -> (Array4<F>, DmfbCache<F>) {
        let (y, cache) = self.forward_impl(exec, x, true);
        (y, cache.expect("cache requested"))
    }

    fn forward_impl(
        &self,
        exec: Exec,
        x: &Array4<F>,
        keep: bool,
    ) -> (Array4<F>, Option<DmfbCache<F>>) {
        assert_eq!(
            x.dim().1,
            self.cfg.in_channels,
            "fusion block input channel mismatch"
        );
        let mut reduce_cache = None;
        let mut branch_caches = Vec::new();
        let mut combiner_caches = Vec::new();
        let mut middle_cache = None;
        let mut concat_in_cache = None;
        let mut concat_norm_cache = None;

        let pre_fuse: Array4<F> = match &self.variant {
            AblationVariant::RateK { wide, .. } => {
                let middle = self.middle.as_ref().expect("rate_k middle");
                let reduced;
                let m_in: &Array4<F> = if *wide {
                    x
                } else {
                    let (xr, rc) = self.reduce.forward_t(exec, x);
                    reduced = xr;
                    if keep {
                        reduce_cache = Some((rc, reduced.clone()));
                    }
                    &reduced
                };
                let (out, mc) = middle.forward_t(exec, m_in);
                if keep {
                    middle_cache = Some((mc, m_in.clone()));
                }
                out
            }
            variant => {
                let (x_red, rc) = self.reduce.forward_t(exec, x);
                let mut xs = Vec::with_capacity(4);
                for b in &self.branches {
                    let (xi, bcache) = b.forward_t(exec, &x_red);
                    if keep {
                        branch_caches.push((bcache, xi.clone()));
                    }
                    xs.push(xi);
                }
                let ys: Vec<Array4<F>> = match variant {
                    AblationVariant::FullDmfb => {
                        let mut ys = vec![xs[0].clone()];
                        let mut prev = xs[0].clone();
                        for i in 1..4 {
                            let sum = &prev + &xs[i];
                            let (yi, kc) = self.combiners[i - 1].forward_t(exec, &sum);
                            if keep {
                                combiner_caches.push((sum, kc));
                            }
                            prev = yi.clone();
                            ys.push(yi);
                        }
                        ys
                    }
                    AblationVariant::NoKi => {
                        let mut ys = vec![xs[0].clone()];
                        let mut acc = xs[0].clone();
                        for xi in xs.iter().skip(1) {
                            acc = &acc + xi;
                            ys.push(acc.clone());
                        }
                        ys
                    }
                    AblationVariant::NoCombination => xs.clone(),
                    AblationVariant::RateK { .. } => unreachable!(),
                };
                if keep {
                    reduce_cache = Some((rc, x_red));
                }
                let views: Vec<_> = ys.iter().map(|y| y.view()).collect();
                let cin = concatenate(Axis(1), &views).expect("branch concat");
                let mut out = match &self.concat_norm {
                    Some(norm) => {
                        let (v, nc) = norm.forward(exec, &cin);
                        if keep {
                            concat_norm_cache = Some(nc);
                        }
                        v
                    }
                    None => cin.clone(),
                };
                Act::Relu.apply(&mut out);
                if keep {
                    concat_in_cache = Some(cin);
                }
                out
            }
        };

        let (fused, fc) = self.fuse.forward_t(exec, &pre_fuse);
        let y = &fused + x;
        let cache = keep.then(|| DmfbCache {
            reduce: reduce_cache,
            branches: branch_caches,
            combiners: combiner_caches,
            middle: middle_cache,
            concat_in: concat_in_cache,
            concat_norm: concat_norm_cache,
            post_concat: pre_fuse,
            fuse: fc,
        });
        (y, cache)
    }

    /// Backward pass; returns the gradient w.r.t. the block input when asked.
    pub fn backward(
        &self,
        exec: Exec,
        x: &Array4<F>,
        cache: &DmfbCache<F>,
        gy: &Array4<F>,
        mut grads: Option<(&mut GradMap<F>, &str)>,
        need_input_grad: bool,
    ) -> Option<Array4<F>> {
        let bc = self.cfg.branch_channels;
        let g_pre_fuse = unit_backward(
            &self.fuse,
            exec,
            &cache.post_concat,
            &cache.fuse,
            gy,
            true,
            &mut grads,
            "fuse",
        )
        .expect("fuse input grad");

        let g_into_reduce: Array4<F> = match &self.variant {
            AblationVariant::RateK { wide, .. } => {
                let (mc, m_in) = cache.middle.as_ref().expect("middle cache");
                let middle = self.middle.as_ref().expect("middle unit");
                let g_m_in = unit_backward(
                    middle,
                    exec,
                    m_in,
                    mc,
                    &g_pre_fuse,
                    true,
                    &mut grads,
                    "middle",
                )
                .expect("middle input grad");
                if *wide {
                    // Wide wiring bypasses the reducer entirely; residual adds gy.
                    return need_input_grad.then(|| g_m_in + gy);
                }
                g_m_in
            }
            variant => {
                let concat_in = cache.concat_in.as_ref().expect("concat cache");
                let gated = gate_relu_after_norm(
                    &self.concat_norm,
                    &cache.concat_norm,
                    concat_in,
                    &g_pre_fuse,
                );
                let g_concat = match (&self.concat_norm, &cache.concat_norm) {
                    (Some(norm), Some(nc)) => norm.backward(exec, concat_in, &gated, nc, None),
                    _ => gated,
                };
                let g_ys: Vec<Array4<F>> = (0..4)
                    .map(|i| {
                        g_concat
                            .slice(ndarray::s![.., i * bc..(i + 1) * bc, .., ..])
                            .to_owned()
                    })
                    .collect();
                let g_xs: Vec<Array4<F>> = match variant {
                    AblationVariant::FullDmfb => {
                        let mut g_xs: Vec<Option<Array4<F>>> = vec![None, None, None, None];
                        let mut carry: Option<Array4<F>> = None;
                        for i in (1..4).rev() {
                            let g_yi = match carry.take() {
                                Some(c) => &g_ys[i] + &c,
                                None => g_ys[i].clone(),
                            };
                            let (sum_in, kc) = &cache.combiners[i - 1];
                            let g_sum = unit_backward(
                                &self.combiners[i - 1],
                                exec,
                                sum_in,
                                kc,
                                &g_yi,
                                true,
                                &mut grads,
                                &format!("k{}", i + 1),
                            )
                            .expect("combiner input grad");
                            g_xs[i] = Some(g_sum.clone());
                            carry = Some(g_sum);
                        }
                        g_xs[0] = Some(match carry {
                            Some(c) => &g_ys[0] + &c,
                            None => g_ys[0].clone(),
                        });
                        g_xs.into_iter().map(|g| g.unwrap()).collect()
                    }
                    AblationVariant::NoKi => {
                        // y1 = x1, y_i = y_{i-1} + x_i: suffix sums of g_y.
                        let mut carry = g_ys[3].clone();
                        let mut g_xs = vec![carry.clone()];
                        for i in (0..3).rev() {
                            carry = &carry + &g_ys[i];
                            g_xs.push(carry.clone());
                        }
                        g_xs.reverse();
                        g_xs
                    }
                    AblationVariant::NoCombination => g_ys,
                    AblationVariant::RateK { .. } => unreachable!(),
                };
                let (_, x_red) = cache.reduce.as_ref().expect("reduce cache");
                let mut g_x_red: Option<Array4<F>> = None;
                for (i, b) in self.branches.iter().enumerate() {
                    let (bcache, _) = &cache.branches[i];
                    let g = unit_backward(
                        b,
                        exec,
                        x_red,
                        bcache,
                        &g_xs[i],
                        true,
                        &mut grads,
                        &format!("branch{}", i + 1),
                    )
                    .expect("branch input grad");
                    g_x_red = Some(match g_x_red.take() {
                        Some(acc) => acc + &g,
                        None => g,
                    });
                }
                g_x_red.expect("at least one branch")
            }
        };

        let (rc, _) = cache.reduce.as_ref().expect("reduce cache");
        let g_in = unit_backward(
            &self.reduce,
            exec,
            x,
            rc,
            &g_into_reduce,
            need_input_grad,
            &mut grads,
            "reduce",
        );
        need_input_grad.then(|| g_in.expect("reduce input grad") + gy)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        self.reduce.visit(&format!("{prefix}.reduce"), f);
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&format!("{prefix}.branch{}", i + 1), f);
        }
        for (i, k) in self.combiners.iter().enumerate() {
            k.visit(&format!("{prefix}.k{}", i + 2), f);
        }
        if let Some(m) = &self.middle {
            m.visit(&format!("{prefix}.middle"), f);
        }
        self.fuse.visit(&format!("{prefix}.fuse"), f);
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'_, F>),
    ) {
        self.reduce.visit_mut(&format!("{prefix}.reduce"), f);
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.branch{}", i + 1), f);
        }
        for (i, k) in self.combiners.iter_mut().enumerate() {
            k.visit_mut(&format!("{prefix}.k{}", i + 2), f);
        }
        if let Some(m) = &mut self.middle {
            m.visit_mut(&format!("{prefix}.middle"), f);
        }
        self.fuse.visit_mut(&format!("{prefix}.fuse"), f);
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("block", &mut |_, v| n += v.len());
        n
    }
}

impl<F: Scalar> ParamSet<F> for Dmfb<F> {
    fn visit_params(&self, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        self.visit("block", f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'_, F>)) {
        self.visit_mut("block", f);
    }
}

/// Gate a gradient through the ReLU that follows the concat norm.
fn gate_relu_after_norm<F: Scalar>(
    norm: &Option<InstanceNorm<F>>,
    cache: &Option<InstanceNormCache<F>>,
    pre: &Array4<F>,
    gy: &Array4<F>,
) -> Array4<F> {
    let (n, c, _, _) = pre.dim();
    let mut gated = gy.clone();
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is) = match cache {
                Some(nc) => (nc.mean[[ni, ci]], nc.inv_std[[ni, ci]]),
                None => (F::zero(), F::one()),
            };
            let mut gplane = gated.index_axis_mut(Axis(0), ni);
            let mut gplane = gplane.index_axis_mut(Axis(0), ci);
            let gseg = gplane.as_slice_mut().expect("grad plane contiguous");
            let pplane = pre.index_axis(Axis(0), ni);
            let pplane = pplane.index_axis(Axis(0), ci);
            let pseg = pplane.as_slice().expect("pre plane contiguous");
            for (g, &p) in gseg.iter_mut().zip(pseg.iter()) {
                let v = match norm {
                    Some(_) => (p - mu) * is,
                    None => p,
                };
                if v <= F::zero() {
                    *g = F::zero();
                }
            }
        }
    }
    gated
}

/// Build a fusion block (standalone entry point for tests and the ablation
/// table).
pub fn build_dmfb<F: Scalar>(
    cfg: &DmfbConfig,
    variant: &AblationVariant,
    seed: u64,
) -> Result<Dmfb<F>> {
    Dmfb::new(cfg, variant, seed)
}

/// Spatial extent (rows, cols) of the nonzero input-gradient footprint of the
/// block output at the center pixel. Meaningful with `normalize: false`,
/// where supports are exactly the convolutional ones.
pub fn dmfb_input_gradient_footprint<F: Scalar>(
    block: &Dmfb<F>,
    size: usize,
    seed: u64,
) -> (usize, usize) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = block.cfg.in_channels;
    let x = Array4::from_shape_simple_fn((1, c, size, size), || {
        F::from_f64(rng.gen_range(0.5..1.5))
    });
    let (_, cache) = block.forward_t(Exec::default(), &x);
    let mut gy = Array4::<F>::zeros((1, c, size, size));
    for ci in 0..c {
        gy[[0, ci, size / 2, size / 2]] = F::one();
    }
    let mut gx = block
        .backward(Exec::default(), &x, &cache, &gy, None, true)
        .expect("input grad");
    // Remove the residual path's delta so the footprint reflects the
    // convolutional part only.
    for ci in 0..c {
        gx[[0, ci, size / 2, size / 2]] = gx[[0, ci, size / 2, size / 2]] - F::one();
    }
    let mut rows = (usize::MAX, 0usize);
    let mut cols = (usize::MAX, 0usize);
    for i in 0..size {
        for j in 0..size {
            let any = (0..c).any(|ci| gx[[0, ci, i, j]] != F::zero());
            if any {
                rows = (rows.0.min(i), rows.1.max(i));
                cols = (cols.0.min(j), cols.1.max(j));
            }
        }
    }
    if rows.0 == usize::MAX {
        return (0, 0);
    }
    (rows.1 - rows.0 + 1, cols.1 - cols.0 + 1)
}

/// The full generator.
#[derive(Debug, Clone)]
pub struct Generator<F: Scalar> {
    cfg: GeneratorConfig,
    variant: AblationVariant,
    stem: Unit<F>,
    down1: Unit<F>,
    down2: Unit<F>,
    blocks: Vec<Dmfb<F>>,
    up1: Unit<F>,
    up2: Unit<F>,
    head: Unit<F>,
}

#[derive(Debug)]
pub struct GeneratorCache<F: Scalar> {
    x: Array4<F>,
    stem: UnitCache<F>,
    stem_out: Array4<F>,
    down1: UnitCache<F>,
    down1_out: Array4<F>,
    down2: UnitCache<F>,
    block_inputs: Vec<Array4<F>>, // input of each block; first is down2 output
    blocks: Vec<DmfbCache<F>>,
    bott_out: Array4<F>,
    up1: UnitCache<F>,
    up1_out: Array4<F>,
    up2: UnitCache<F>,
    up2_out: Array4<F>,
    head: UnitCache<F>,
}

impl<F: Scalar> Generator<F> {
    pub fn new(cfg: &GeneratorConfig, variant: &AblationVariant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "generator", 0));
        let bw = cfg.base_width;
        let bott = cfg.bottleneck_channels;
        let stem = Unit::conv(
            Conv2d::orthogonal(cfg.input_channels, bw, 5, 1, 2, 1, &mut rng),
            Some(InstanceNorm::affine(bw)),
            Act::Relu,
        );
        let down1 = Unit::conv(
            Conv2d::orthogonal(bw, bw * 2, 4, 2, 1, 1, &mut rng),
            Some(InstanceNorm::affine(bw * 2)),
            Act::Relu,
        );
        let down2 = Unit::conv(
            Conv2d::orthogonal(bw * 2, bott, 4, 2, 1, 1, &mut rng),
            Some(InstanceNorm::affine(bott)),
            Act::Relu,
        );
        let blocks = (0..cfg.num_dmfb)
            .map(|i| Dmfb::new(&cfg.dmfb, variant, derive_seed(seed, "dmfb", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let up1 = Unit::conv_t(
            ConvT2d::orthogonal(bott, bott / 2, 4, 2, 1, &mut rng),
            Some(InstanceNorm::affine(bott / 2)),
            Act::Relu,
        );
        let up2 = Unit::conv_t(
            ConvT2d::orthogonal(bott / 2, bott / 4, 4, 2, 1, &mut rng),
            Some(InstanceNorm::affine(bott / 4)),
            Act::Relu,
        );
        let head = Unit::conv(
            Conv2d::orthogonal(bott / 4, 3, 3, 1, 1, 1, &mut rng),
            None,
            Act::Tanh,
        );
        Ok(Self {
            cfg: cfg.clone(),
            variant: variant.clone(),
            stem,
            down1,
            down2,
            blocks,
            up1,
            up2,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn variant(&self) -> &AblationVariant {
        &self.variant
    }

    /// Stack image and mask into the 4-channel network input.
    pub fn stack_input(img_in: &ImageBatch<F>, mask: &Mask) -> Result<Array4<F>> {
        img_in.expect_range(RangeTag::ModelRange)?;
        if (img_in.batch_size(), img_in.height(), img_in.width())
            != (mask.batch_size(), mask.height(), mask.width())
        {
            return Err(Error::contract("image / mask size mismatch"));
        }
        let m = mask.to_float::<F>();
        Ok(concatenate(Axis(1), &[img_in.data().view(), m.view()]).expect("stack input"))
    }

    /// Inference-only forward: full-frame prediction in model range.
    pub fn forward(
        &self,
        exec: Exec,
        img_in: &ImageBatch<F>,
        mask: &Mask,
    ) -> Result<ImageBatch<F>> {
        let x = Self::stack_input(img_in, mask)?;
        let y = self.forward_raw(exec, &x);
        Ok(ImageBatch::new_unchecked(y, RangeTag::ModelRange))
    }

    /// Forward on a raw 4-channel input.
    pub fn forward_raw(&self, exec: Exec, x: &Array4<F>) -> Array4<F> {
        let mut h = self.stem.forward(exec, x);
        h = self.down1.forward(exec, &h);
        h = self.down2.forward(exec, &h);
        for b in &self.blocks {
            h = b.forward(exec, &h);
        }
        h = self.up1.forward(exec, &h);
        h = self.up2.forward(exec, &h);
        self.head.forward(exec, &h)
    }

    /// Training forward keeping caches for [`Generator::backward`].
    pub fn forward_train(&self, exec: Exec, x: &Array4<F>) -> (Array4<F>, GeneratorCache<F>) {
        let (stem_out, stem) = self.stem.forward_t(exec, x);
        let (down1_out, down1) = self.down1.forward_t(exec, &stem_out);
        let (down2_out, down2) = self.down2.forward_t(exec, &down1_out);
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut h = down2_out;
        for b in &self.blocks {
            let (out, cache) = b.forward_t(exec, &h);
            block_inputs.push(h);
            block_caches.push(cache);
            h = out;
        }
        let bott_out = h;
        let (up1_out, up1) = self.up1.forward_t(exec, &bott_out);
        let (up2_out, up2) = self.up2.forward_t(exec, &up1_out);
        let (pred, head) = self.head.forward_t(exec, &up2_out);
        (
            pred,
            GeneratorCache {
                x: x.clone(),
                stem,
                stem_out,
                down1,
                down1_out,
                down2,
                block_inputs,
                blocks: block_caches,
                bott_out,
                up1,
                up1_out,
                up2,
                up2_out,
                head,
            },
        )
    }

    /// Backward from the gradient w.r.t. the prediction; accumulates
    /// parameter gradients into `grads`.
    pub fn backward(
        &self,
        exec: Exec,
        cache: &GeneratorCache<F>,
        g_pred: &Array4<F>,
        grads: &mut GradMap<F>,
    ) {
        let g = self
            .head
            .backward(
                exec,
                &cache.up2_out,
                &cache.head,
                g_pred,
                true,
                Some((&mut *grads, "head")),
            )
            .expect("head grad");
        let g = self
            .up2
            .backward(
                exec,
                &cache.up1_out,
                &cache.up2,
                &g,
                true,
                Some((&mut *grads, "up2")),
            )
            .expect("up2 grad");
        let mut g = self
            .up1
            .backward(
                exec,
                &cache.bott_out,
                &cache.up1,
                &g,
                true,
                Some((&mut *grads, "up1")),
            )
            .expect("up1 grad");
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let name = format!("block{}", i + 1);
            g = b
                .backward(
                    exec,
                    &cache.block_inputs[i],
                    &cache.blocks[i],
                    &g,
                    Some((&mut *grads, name.as_str())),
                    true,
                )
                .expect("block grad");
        }
        let g = self
            .down2
            .backward(
                exec,
                &cache.down1_out,
                &cache.down2,
                &g,
                true,
                Some((&mut *grads, "down2")),
            )
            .expect("down2 grad");
        let g = self
            .down1
            .backward(
                exec,
                &cache.stem_out,
                &cache.down1,
                &g,
                true,
                Some((&mut *grads, "down1")),
            )
            .expect("down1 grad");
        self.stem.backward(
            exec,
            &cache.x,
            &cache.stem,
            &g,
            false,
            Some((&mut *grads, "stem")),
        );
    }
}

impl<F: Scalar> ParamSet<F> for Generator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        self.stem.visit("stem", f);
        self.down1.visit("down1", f);
        self.down2.visit("down2", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{}", i + 1), f);
        }
        self.up1.visit("up1", f);
        self.up2.visit("up2", f);
        self.head.visit("head", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'_, F>)) {
        self.stem.visit_mut("stem", f);
        self.down1.visit_mut("down1", f);
        self.down2.visit_mut("down2", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{}", i + 1), f);
        }
        self.up1.visit_mut("up1", f);
        self.up2.visit_mut("up2", f);
        self.head.visit_mut("head", f);
    }
}

/// Run the generator on a masked input, returning the full-frame prediction.
pub fn generator_forward<F: Scalar>(
    gen: &Generator<F>,
    exec: Exec,
    img_in: &ImageBatch<F>,
    mask: &Mask,
) -> Result<ImageBatch<F>> {
    gen.forward(exec, img_in, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_block(variant: &AblationVariant) -> Dmfb<f32> {
        Dmfb::new(&DmfbConfig::default(), variant, 11).unwrap()
    }

    #[test]
    fn parameter_counts_match_reference_table() {
        assert_eq!(f32_block(&AblationVariant::FullDmfb).param_count(), 471_808);
        assert_eq!(f32_block(&AblationVariant::NoKi).param_count(), 361_024);
        assert_eq!(
            f32_block(&AblationVariant::NoCombination).param_count(),
            361_024
        );
        assert_eq!(
            f32_block(&AblationVariant::RateK { rate: 2, wide: true }).param_count(),
            803_392
        );
        assert_eq!(
            f32_block(&AblationVariant::RateK { rate: 8, wide: true }).param_count(),
            803_392
        );
        assert_eq!(
            f32_block(&AblationVariant::RateK { rate: 2, wide: false }).param_count(),
            361_024
        );
    }

    #[test]
    fn block_preserves_shape() {
        let block = f32_block(&AblationVariant::FullDmfb);
        let x = Array4::<f32>::zeros((1, 256, 16, 16));
        let y = block.forward(Exec::default(), &x);
        assert_eq!(y.dim(), (1, 256, 16, 16));
    }

    #[test]
    fn zero_weights_zero_bias_give_zero_output() {
        let mut block = f32_block(&AblationVariant::FullDmfb);
        block.visit_mut("block", &mut |_, mut v| v.fill(0.0));
        let x = Array4::<f32>::zeros((1, 256, 8, 8));
        let y = block.forward(Exec::default(), &x);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_fusion_conv_makes_block_identity() {
        let mut block = f32_block(&AblationVariant::FullDmfb);
        block.visit_mut("block", &mut |name, mut v| {
            if name.starts_with("block.fuse") {
                v.fill(0.0);
            }
        });
        let x = Array4::from_shape_fn((1, 256, 8, 8), |(_, c, i, j)| {
            ((c + i * 3 + j) % 7) as f32 * 0.1 + 0.05
        });
        let y = block.forward(Exec::default(), &x);
        assert_eq!(y, x);
    }

    #[test]
    fn generator_output_shape_and_range() {
        let cfg = GeneratorConfig {
            num_dmfb: 2,
            ..Default::default()
        };
        let gen = Generator::<f32>::new(&cfg, &AblationVariant::FullDmfb, 3).unwrap();
        let x = Array4::from_elem((1, 4, 32, 32), 0.25f32);
        let y = gen.forward_raw(Exec::default(), &x);
        assert_eq!(y.dim(), (1, 3, 32, 32));
        assert!(y.iter().all(|&v| v > -1.0 && v < 1.0 && v.is_finite()));
    }
}
