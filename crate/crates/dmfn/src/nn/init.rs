//! Weight initialization: orthogonal for trainable convolutions (stable
//! adversarial training under a fixed seed), He-normal for the synthetic
//! feature extractor.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Orthogonal matrix via modified Gram-Schmidt on a Gaussian draw.
/// Rows are orthonormal when `rows <= cols`, columns otherwise.
fn orthogonal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut a = gaussian_matrix(r, c, rng);
    for i in 0..r {
        // Two MGS sweeps keep the basis orthonormal to near machine precision.
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = a.row(i).dot(&a.row(j));
                let rj = a.row(j).to_owned();
                a.row_mut(i).zip_mut_with(&rj, |v, &q| *v -= dot * q);
            }
        }
        let norm = a.row(i).dot(&a.row(i)).sqrt();
        if norm < 1e-12 {
            // Degenerate draw; replace with a fresh row and redo this index.
            let fresh = gaussian_matrix(1, c, rng);
            a.row_mut(i).assign(&fresh.row(0));
            continue;
        }
        a.row_mut(i).mapv_inplace(|v| v / norm);
    }
    if transpose {
        a.t().to_owned()
    } else {
        a
    }
}

/// Orthogonal initialization for a convolution weight of the given shape
/// (first axis treated as rows, the rest flattened as columns).
pub fn orthogonal_conv<F: Scalar>(shape: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array4<F> {
    let (o, i, kh, kw) = shape;
    let m = orthogonal_matrix(o, i * kh * kw, rng);
    let m = m.mapv(F::from_f64);
    m.into_shape(shape).expect("orthogonal conv shape")
}

/// He-normal initialization (std = sqrt(2 / fan_in)).
pub fn he_normal_conv<F: Scalar>(shape: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array4<F> {
    let (_, i, kh, kw) = shape;
    let std = (2.0 / (i * kh * kw) as f64).sqrt();
    Array4::from_shape_simple_fn(shape, || {
        F::from_f64(rng.sample::<f64, _>(StandardNormal) * std)
    })
}

pub fn orthogonal_linear<F: Scalar>(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Array2<F> {
    orthogonal_matrix(out_dim, in_dim, rng).mapv(F::from_f64)
}

pub fn zeros_bias<F: Scalar>(n: usize) -> Array1<F> {
    Array1::zeros(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = orthogonal_matrix(8, 32, &mut rng);
        for i in 0..8 {
            for j in 0..8 {
                let dot = m.row(i).dot(&m.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "rows {i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn orthogonal_tall_matrix_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = orthogonal_matrix(32, 8, &mut rng);
        for i in 0..8 {
            let dot = m.column(i).dot(&m.column(i));
            assert!((dot - 1.0).abs() < 1e-10);
        }
    }
}
