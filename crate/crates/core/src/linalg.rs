//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Block-diagonal scale matrix `diag(t^i I_d)`, `i = 1..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleMatrix {
    pub t: f64,
    pub n: usize,
    pub d: usize,
}

impl ScaleMatrix {
    pub fn new(t: f64, n: usize, d: usize) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("scale parameter must be positive, got {t}")));
        }
        Ok(ScaleMatrix { t, n, d })
    }

    /// Diagonal entry for coordinate `k` (0-based over all `n·d` coordinates).
    #[inline]
    pub fn entry(&self, k: usize) -> f64 {
        self.t.powi((k / self.d + 1) as i32)
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.n * self.d, |k, _| self.entry(k))
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diagonal())
    }

    pub fn inverse_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diagonal().map(|v| 1.0 / v))
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (k, (o, x)) in out.iter_mut().zip(v).enumerate() {
            *o = x * self.entry(k);
        }
    }

    pub fn apply_inv(&self, v: &[f64], out: &mut [f64]) {
        for (k, (o, x)) in out.iter_mut().zip(v).enumerate() {
            *o = x / self.entry(k);
        }
    }
}

/// Convenience constructor mirroring [`ScaleMatrix::new`].
pub fn scale_matrix(t: f64, n: usize, d: usize) -> Result<ScaleMatrix> {
    ScaleMatrix::new(t, n, d)
}

/// Cholesky factor, or a conditioning error carrying the smallest eigenvalue.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning {
            smallest_eigenvalue: f64::NAN,
        });
    }
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => Err(Error::Conditioning {
            smallest_eigenvalue: smallest_eigenvalue(m),
        }),
    }
}

pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    SymmetricEigen::new(sym).eigenvalues.max()
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// True when some power `m^k`, `k ≤ dim`, vanishes identically.
pub fn is_nilpotent(m: &DMatrix<f64>) -> bool {
    let mut p = m.clone();
    for _ in 0..m.nrows() {
        if p.iter().all(|v| *v == 0.0) {
            return true;
        }
        p = &p * m;
    }
    p.iter().all(|v| *v == 0.0)
}

/// `exp(m·tau)` when `m` is nilpotent: a finite power series.
pub fn expm_nilpotent(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let dim = m.nrows();
    let mut out = DMatrix::identity(dim, dim);
    let mut term = DMatrix::identity(dim, dim);
    for k in 1..dim {
        term = &term * m * (tau / k as f64);
        if term.iter().all(|v| *v == 0.0) {
            break;
        }
        out += &term;
    }
    out
}

/// Matrix exponential `exp(m·tau)`.
pub fn expm(m: &DMatrix<f64>, tau: f64, nilpotent: bool) -> DMatrix<f64> {
    if nilpotent {
        expm_nilpotent(m, tau)
    } else {
        (m * tau).exp()
    }
}

/// Spectral norm.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone().svd(false, false).singular_values.min()
}

pub fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
