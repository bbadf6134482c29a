use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::dense::{dot, norm2};
use crate::numerics::DenseMatrix;

/// Largest singular value of `w` by power iteration on the smaller Gram matrix.
///
/// Iteration stops once the eigen-residual `‖Gv − μv‖` drops below
/// `tol · max(1, μ)` or after `max_iters` steps.
pub fn spectral_norm(w: &DenseMatrix, max_iters: usize, tol: f64) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::InvalidArgument(
            "spectral_norm of an empty matrix".into(),
        ));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("spectral_norm input".into()));
    }
    let gram = if w.rows() >= w.cols() {
        w.transpose().matmul(w)?
    } else {
        w.matmul(&w.transpose())?
    };
    let lambda = top_eigenvalue_psd(&gram, max_iters, tol);
    Ok(lambda.max(0.0).sqrt())
}

/// Dominant eigenvalue of a symmetric positive semidefinite matrix.
pub(crate) fn top_eigenvalue_psd(g: &DenseMatrix, max_iters: usize, tol: f64) -> f64 {
    let n = g.rows();
    if g.data().iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut mu = 0.0;
    for _ in 0..max_iters.max(1) {
        let gv = g.matvec(&v).expect("square gram matrix");
        mu = dot(&v, &gv);
        let resid = gv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - mu * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let ng = norm2(&gv);
        if ng == 0.0 {
            return 0.0;
        }
        if resid <= tol * mu.max(1.0) {
            break;
        }
        v = gv.into_iter().map(|x| x / ng).collect();
    }
    mu
}
