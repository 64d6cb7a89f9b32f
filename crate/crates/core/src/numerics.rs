//! Symmetric-matrix linear algebra for the Fréchet distance: a cyclic
//! Jacobi eigensolver, the trace of a PSD matrix-product square root, and
//! Gaussian moment estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
/// Eigenvalues in `[-PSD_TOLERANCE, 0)` are treated as rounding noise.
pub const PSD_TOLERANCE: f64 = 1e-8;
pub const MAX_JACOBI_SWEEPS: usize = 100;
/// Relative off-diagonal Frobenius norm at which Jacobi sweeps stop.
const JACOBI_TOLERANCE: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::invalid(format!(
                "symmetric matrix of dim {dim} needs {} entries, got {}",
                dim * dim,
                data.len()
            )));
        }
        for i in 0..dim {
            for j in i + 1..dim {
                if (data[i * dim + j] - data[j * dim + i]).abs() >= SYMMETRY_TOLERANCE {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SymmetricMatrix { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let dim = values.len();
        let mut data = vec![0.0; dim * dim];
        for (i, v) in values.iter().enumerate() {
            data[i * dim + i] = *v;
        }
        SymmetricMatrix { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }
}

/// Eigendecomposition of a symmetric matrix. `vectors` is row-major with
/// eigenvectors stored as columns, matching `values` order (descending).
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub dim: usize,
}

impl SymEig {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.dim;
        let scaled: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.vectors[i * n + k] * scaled[k] * self.vectors[j * n + k];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }
}

/// Cyclic Jacobi eigensolver.
pub fn sym_eig(m: &SymmetricMatrix) -> Result<SymEig> {
    let n = m.dim;
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off_norm = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = n == 1 || off_norm(&a) <= JACOBI_TOLERANCE * scale;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                off_norm: off_norm(&a),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) <= JACOBI_TOLERANCE * scale;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    Ok(SymEig {
        values,
        vectors,
        dim: n,
    })
}

fn check_psd(eig: &SymEig) -> Result<()> {
    match eig.values.iter().copied().find(|&l| l < -PSD_TOLERANCE) {
        Some(l) => Err(Error::NotPsd(l)),
        None => Ok(()),
    }
}

fn symmetrize(data: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (data[i * n + j] + data[j * n + i]);
            data[i * n + j] = m;
            data[j * n + i] = m;
        }
    }
}

/// `Tr((a·b)^{1/2})` for PSD `a`, `b`, evaluated as the sum of square roots
/// of the eigenvalues of the symmetric matrix `√a · b · √a`.
pub fn sqrt_trace_of_product(a: &SymmetricMatrix, b: &SymmetricMatrix) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::ShapeMismatch {
            op: "sqrt_trace_of_product",
            lhs: vec![a.dim, a.dim],
            rhs: vec![b.dim, b.dim],
        });
    }
    let n = a.dim;
    let eig_a = sym_eig(a)?;
    check_psd(&eig_a)?;
    check_psd(&sym_eig(b)?)?;
    let root_a = eig_a.reconstruct_with(|l| l.max(0.0).sqrt());

    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            tmp[i * n + j] = (0..n).map(|k| root_a[i * n + k] * b.data[k * n + j]).sum();
        }
    }
    let mut product = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            product[i * n + j] = (0..n).map(|k| tmp[i * n + k] * root_a[k * n + j]).sum();
        }
    }
    symmetrize(&mut product, n);
    let eig = sym_eig(&SymmetricMatrix {
        dim: n,
        data: product,
    })?;
    check_psd(&eig)?;
    Ok(eig.values.iter().map(|l| l.max(0.0).sqrt()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub covariance: SymmetricMatrix,
    pub sample_count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (`N - 1`) covariance.
pub fn estimate_stats<V: AsRef<[f64]>>(features: &[V]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples to estimate covariance, got {}",
            features.len()
        )));
    }
    let dim = features[0].as_ref().len();
    if dim == 0 || features.iter().any(|f| f.as_ref().len() != dim) {
        return Err(Error::invalid(
            "feature vectors must share a positive dimension",
        ));
    }
    let count = features.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        mean.iter_mut().zip(f.as_ref()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let mut cov = vec![0.0; dim * dim];
    for f in features {
        let centered: Vec<f64> = f.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += centered[i] * centered[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (count - 1) as f64);
    symmetrize(&mut cov, dim);
    Ok(GaussianStats {
        mean,
        covariance: SymmetricMatrix { dim, data: cov },
        sample_count: count,
    })
}
