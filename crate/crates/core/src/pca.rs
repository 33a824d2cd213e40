//! PCA reduction of descriptors via a deterministic cyclic-Jacobi
//! eigendecomposition of the population covariance.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{GbError, Result};

/// A fitted linear projection. `components` is row-major d×D; rows are
/// unit-norm principal directions sorted by non-increasing variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Vec<f64>,
    pub n_components: usize,
    pub input_dim: usize,
    pub explained_variance: Vec<f64>,
    pub rank_deficient: bool,
}

/// Default reduced dimension: min(32, D, N-1), at least 1.
pub fn default_dim(n: usize, input_dim: usize) -> usize {
    32usize.min(input_dim).min(n.saturating_sub(1)).max(1)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// (eigenvalues, eigenvectors as columns of V). Sweeps stop when the
/// off-diagonal Frobenius norm drops below 1e-10 times the trace.
fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::eye(n);
    let trace: f64 = (0..n).map(|i| a[[i, i]]).sum();
    let off2 = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += m[[p, q]] * m[[p, q]];
                }
            }
        }
        s
    };
    let thresh = (1e-10 * trace.max(0.0)).powi(2);
    for _sweep in 0..100 {
        if off2(&a) <= thresh {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[[i, i]]).collect();
    (eigenvalues, v)
}

/// Fits a d-dimensional PCA on the N×D matrix X using population (1/N)
/// covariance. Rank deficiency below d zero-fills the surplus variances and
/// sets `rank_deficient`.
pub fn pca_fit(x: ArrayView2<'_, f64>, d: usize) -> Result<PcaModel> {
    let (n, dim) = x.dim();
    if n < 2 {
        return Err(GbError::invalid("pca_fit needs at least 2 rows"));
    }
    if d < 1 || d > n.min(dim) {
        return Err(GbError::invalid(format!(
            "reduced dimension {d} out of range 1..={}",
            n.min(dim)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in pca input".into()));
    }
    let mean: Array1<f64> = x.mean_axis(ndarray::Axis(0)).unwrap();
    let mut cov = Array2::zeros((dim, dim));
    for row in x.rows() {
        let c: Vec<f64> = row.iter().zip(mean.iter()).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            if c[i] == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    let nf = n as f64;
    for i in 0..dim {
        for j in i..dim {
            cov[[i, j]] /= nf;
            cov[[j, i]] = cov[[i, j]];
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| {
        eigenvalues[j]
            .partial_cmp(&eigenvalues[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let trace: f64 = eigenvalues.iter().sum();
    let rank_eps = 1e-12 * trace.abs().max(1.0);
    let mut components = Vec::with_capacity(d * dim);
    let mut explained_variance = Vec::with_capacity(d);
    let mut positive = 0usize;
    for &col in order.iter().take(d) {
        let mut row: Vec<f64> = (0..dim).map(|r| vectors[[r, col]]).collect();
        // Sign convention: the entry of largest magnitude is nonnegative,
        // ties resolved to the lowest index.
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        let ev = eigenvalues[col].max(0.0);
        let ev = if ev <= rank_eps { 0.0 } else { ev };
        if ev > 0.0 {
            positive += 1;
        }
        explained_variance.push(ev);
        components.extend_from_slice(&row);
    }
    Ok(PcaModel {
        mean: mean.to_vec(),
        components,
        n_components: d,
        input_dim: dim,
        explained_variance,
        rank_deficient: positive < d,
    })
}

impl PcaModel {
    pub fn components_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.n_components, self.input_dim), self.components.clone())
            .expect("component shape")
    }

    /// Projects rows of X: y = components · (x − mean).
    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(GbError::invalid(format!(
                "dimension mismatch: input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        let comp = self.components_matrix();
        let mean = Array1::from(self.mean.clone());
        let centered = &x - &mean.broadcast((x.nrows(), self.input_dim)).unwrap();
        Ok(centered.dot(&comp.t()))
    }

    /// Maps reduced rows back: x̂ = y · components + mean.
    pub fn inverse_transform(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if y.ncols() != self.n_components {
            return Err(GbError::invalid(format!(
                "dimension mismatch: input has {} columns, model has {} components",
                y.ncols(),
                self.n_components
            )));
        }
        let comp = self.components_matrix();
        let mean = Array1::from(self.mean.clone());
        let x = y.dot(&comp);
        Ok(&x + &mean.broadcast((y.nrows(), self.input_dim)).unwrap())
    }
}

/// Convenience: fit then transform.
pub fn pca_fit_transform(x: ArrayView2<'_, f64>, d: usize) -> Result<(PcaModel, Array2<f64>)> {
    let model = pca_fit(x, d)?;
    let reduced = model.transform(x)?;
    Ok((model, reduced))
}
