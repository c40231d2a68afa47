//! Fully connected layer kernels (`[O, D]` weights, row-vector batches).

use ndarray::{Array1, Array2, Axis};

use crate::scalar::Scalar;

/// `y = x W^T + b` with `x: [N, D]`, `w: [O, D]`.
pub fn linear<F: Scalar>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    for mut row in y.outer_iter_mut() {
        row += b;
    }
    y
}

/// Backward pass; returns `(gx, gw, gb)`.
pub fn linear_backward<F: Scalar>(
    x: &Array2<F>,
    w: &Array2<F>,
    gy: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let gx = gy.dot(w);
    let gw = gy.t().dot(x);
    let gb = gy.sum_axis(Axis(0));
    (gx, gw, gb)
}
