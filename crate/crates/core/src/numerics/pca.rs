use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::dense::{dot, norm2};
use crate::numerics::DenseMatrix;

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 1000;

/// Principal component model: `transform(x) = (x − mean) · componentsᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × d`, orthonormal rows.
    pub components: DenseMatrix,
    /// Sample variance (denominator `n − 1`) along each component, nonincreasing.
    pub explained_variance: Vec<f64>,
}

/// Fits the top-`k` principal directions of `x` (`n × d`).
///
/// Uses power iteration on the sample covariance, orthogonalizing every
/// iterate against the components found so far (Hotelling deflation).
/// Each component's largest-magnitude entry is made positive.
pub fn pca_fit(x: &DenseMatrix, k: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "PCA rank {k} outside 1..={}",
            n.min(d)
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("PCA input".into()));
    }

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let cov = covariance(x, &mean);

    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for c in 0..k {
        let v = leading_direction(&cov, &comps, c);
        let lambda = dot(&v, &cov.matvec(&v)?).max(0.0);
        comps.push(v);
        variances.push(lambda);
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    let mut data = Vec::with_capacity(k * d);
    let mut explained_variance = Vec::with_capacity(k);
    for &i in &order {
        let mut v = comps[i].clone();
        canonical_sign(&mut v);
        data.extend_from_slice(&v);
        explained_variance.push(variances[i]);
    }
    Ok(PcaModel {
        mean,
        components: DenseMatrix::new(k, d, data)?,
        explained_variance,
    })
}

fn covariance(x: &DenseMatrix, mean: &[f64]) -> DenseMatrix {
    let (n, d) = (x.rows(), x.cols());
    let mut cov = DenseMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(x.row(i)).zip(mean) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            let row = &mut cov.row_mut(a)[a..];
            for (r, cb) in row.iter_mut().zip(&centered[a..]) {
                *r += ca * cb;
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov.get(a, b) / denom;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    cov
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let p = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
    }
}

/// Unit vector orthogonal to `basis`, maximizing the Rayleigh quotient of `cov`
/// on that complement (up to the iteration budget).
fn leading_direction(cov: &DenseMatrix, basis: &[Vec<f64>], index: usize) -> Vec<f64> {
    let d = cov.rows();
    // Deterministic ramp start; the ramp breaks exact symmetries.
    let mut v: Vec<f64> = (0..d)
        .map(|j| 1.0 + (j as f64 + index as f64) / (2.0 * d as f64))
        .collect();
    project_out(&mut v, basis);
    project_out(&mut v, basis);
    if norm2(&v) < 1e-12 {
        v = fallback_basis_vector(d, basis);
    }
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    for _ in 0..POWER_MAX_ITERS {
        let mut w = cov.matvec(&v).expect("square covariance");
        project_out(&mut w, basis);
        project_out(&mut w, basis);
        let nw = norm2(&w);
        if nw < 1e-300 {
            // Zero variance on the complement: any orthonormal completion works.
            return v;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let delta = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        v = w;
        if delta < POWER_TOL {
            break;
        }
    }
    v
}

fn fallback_basis_vector(d: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        project_out(&mut e, basis);
        project_out(&mut e, basis);
        if norm2(&e) > 1e-6 {
            return e;
        }
    }
    unreachable!("basis smaller than dimension always leaves a complement")
}

fn canonical_sign(v: &mut [f64]) {
    let (mut best, mut idx) = (0.0, 0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v.get(idx).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn transform(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        pca_transform(self, x)
    }

    /// Maps reduced coordinates back to the input space.
    pub fn inverse_transform(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        if z.cols() != self.k() {
            return Err(Error::dims("pca_inverse_transform", self.k(), z.cols()));
        }
        let mut out = z.matmul(&self.components)?;
        for i in 0..out.rows() {
            out.row_mut(i)
                .iter_mut()
                .zip(&self.mean)
                .for_each(|(o, m)| *o += m);
        }
        Ok(out)
    }
}

pub fn pca_transform(model: &PcaModel, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols() != model.dim() {
        return Err(Error::dims("pca_transform", model.dim(), x.cols()));
    }
    let k = model.k();
    let mut out = DenseMatrix::zeros(x.rows(), k);
    let mut centered = vec![0.0; model.dim()];
    for i in 0..x.rows() {
        for ((c, v), m) in centered.iter_mut().zip(x.row(i)).zip(&model.mean) {
            *c = v - m;
        }
        for j in 0..k {
            out.set(i, j, dot(&centered, model.components.row(j)));
        }
    }
    Ok(out)
}
