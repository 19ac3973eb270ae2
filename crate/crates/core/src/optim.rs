use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Plain gradient descent: `param ← param − lr · grad` for each pair.
pub fn sgd_step(params: &mut [&mut DenseMatrix], grads: &[DenseMatrix], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.check_same_shape(g, "sgd_step")?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_noop() {
        let mut p = DenseMatrix::row_vector(vec![1.0, 2.0]);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[DenseMatrix::row_vector(vec![5.0, -3.0])], 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step() {
        let mut p = DenseMatrix::filled(1, 1, 1.0);
        sgd_step(&mut [&mut p], &[DenseMatrix::filled(1, 1, 2.0)], 0.5).unwrap();
        assert_eq!(p.scalar(), Some(0.0));
    }

    #[test]
    fn quadratic_decays_geometrically() {
        // f(x) = x², grad 2x, so x_t = (1 − 2η)^t.
        let lr = 0.1;
        let mut x = DenseMatrix::filled(1, 1, 1.0);
        let mut prev = 1.0f64;
        for t in 1..=50 {
            let g = x.map(|v| 2.0 * v);
            sgd_step(&mut [&mut x], &[g], lr).unwrap();
            let v = x.scalar().unwrap();
            assert!(v.abs() < prev.abs());
            assert!((v - (1.0f64 - 2.0 * lr).powi(t)).abs() < 1e-12);
            prev = v;
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = DenseMatrix::zeros(2, 2);
        let err = sgd_step(&mut [&mut p], &[DenseMatrix::zeros(2, 3)], 0.1);
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
