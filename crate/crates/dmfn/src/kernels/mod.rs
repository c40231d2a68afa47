//! Data-parallel compute kernels.
//!
//! Every kernel takes an [`Exec`] mode: `Parallel` fans work out over rayon
//! (batch samples first, output partitions second), `Sequential` runs the
//! identical per-element arithmetic on one thread. Parallel partitions are
//! disjoint and every accumulation is folded in a fixed order, so results do
//! not depend on thread count or scheduling.
//!
//! The `parallel` cargo feature (default) enables the rayon path; without it
//! `Exec::Parallel` silently degrades to the sequential loop. The criterion
//! bench suite compares both backends on the same inputs.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, conv2d_out_size,
};
pub use linear::{linear, linear_backward};
pub use norm::{instance_norm, instance_norm_backward, InstanceNormCache};
pub use pool::{
    avg_pool2, global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward,
};
pub use resize::{resize_area, resize_bilinear, resize_bilinear_backward};

/// Execution backend selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Run `op` once per item, in parallel when requested and compiled in.
///
/// Items own disjoint output regions; `op` must not rely on ordering.
pub(crate) fn for_each_indexed<T, OP>(exec: Exec, items: Vec<T>, op: OP)
where
    T: Send,
    OP: Fn(usize, T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec == Exec::Parallel {
            use rayon::prelude::*;
            items.into_par_iter().enumerate().for_each(|(i, t)| op(i, t));
            return;
        }
    }
    let _ = exec;
    for (i, t) in items.into_iter().enumerate() {
        op(i, t);
    }
}

/// Map each item to a value, preserving item order in the result.
pub(crate) fn map_indexed<T, R, OP>(exec: Exec, items: Vec<T>, op: OP) -> Vec<R>
where
    T: Send,
    R: Send,
    OP: Fn(usize, T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec == Exec::Parallel {
            use rayon::prelude::*;
            return items
                .into_par_iter()
                .enumerate()
                .map(|(i, t)| op(i, t))
                .collect();
        }
    }
    let _ = exec;
    items
        .into_iter()
        .enumerate()
        .map(|(i, t)| op(i, t))
        .collect()
}
