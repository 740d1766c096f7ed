//! Chain SDE models: drift, diffusion, frozen coefficient and regularity data.

mod catalog;
mod descriptor;
pub(crate) mod generator;
mod validate;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub use catalog::{catalog_descriptor, catalog_names, model_by_name, nonlinear_kolmogorov_modulated};
pub use descriptor::{DescriptorModel, DiffusionDescriptor, Factor, ModelDescriptor, Modulation, Term, Var};
pub use generator::{apply_generator, apply_generator_with, apply_parabolic_generator, GaussianBump, GeneratorOptions, Quadratic, TestFunction};
pub use validate::{validate_model, validate_model_with, ValidationOptions, ValidationReport};

use crate::error::{Error, Result};

/// Pointwise evaluators of a chain model.
///
/// Blocks are 0-based here: block `b` of the state occupies coordinates
/// `b·d .. (b+1)·d`. The drift of block `b ≥ 1` may only read blocks
/// `b-1 ..= n-1`.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// Row-major `d×d` gradient of the block-`block` drift with respect to block `block-1`.
    fn transmission(&self, t: f64, x: &[f64], block: usize, out: &mut [f64]);

    /// Row-major `d×d` diffusion matrix `a = σσ*`.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// Row-major `d×d` frozen coefficient used by the Gaussian proxy.
    fn frozen_diffusion(&self, t: f64, out: &mut [f64]);

    /// `(A, b)` when the drift is `A x + b` with constant coefficients.
    fn affine_drift(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        None
    }

    /// The full `nd×nd` subdiagonal gradient matrix when it does not depend on `(t, x)`.
    fn constant_transmission(&self) -> Option<DMatrix<f64>> {
        None
    }

    fn constant_diffusion(&self) -> Option<DMatrix<f64>> {
        None
    }

    fn constant_frozen_diffusion(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// A chain model together with its declared regularity constants.
#[derive(Clone)]
pub struct ChainSpec {
    pub n: usize,
    pub d: usize,
    pub name: String,
    pub lipschitz: f64,
    pub holder: f64,
    pub ellipticity: f64,
    pub nondegeneracy_margin: f64,
    coeffs: Arc<dyn Coefficients>,
    affine: Option<Arc<(DMatrix<f64>, DVector<f64>)>>,
    transmission: Option<Arc<DMatrix<f64>>>,
    diffusion: Option<Arc<DMatrix<f64>>>,
    frozen: Option<Arc<DMatrix<f64>>>,
}

impl fmt::Debug for ChainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("lipschitz", &self.lipschitz)
            .field("holder", &self.holder)
            .field("ellipticity", &self.ellipticity)
            .field("nondegeneracy_margin", &self.nondegeneracy_margin)
            .finish()
    }
}

impl ChainSpec {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        d: usize,
        coeffs: Arc<dyn Coefficients>,
        lipschitz: f64,
        holder: f64,
        ellipticity: f64,
        nondegeneracy_margin: f64,
    ) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Shape("n and d must be positive".into()));
        }
        if !(holder > 0.0 && holder <= 1.0) {
            return Err(Error::Domain(format!("Hölder exponent {holder} outside (0, 1]")));
        }
        if !(ellipticity >= 1.0) {
            return Err(Error::Domain(format!("ellipticity {ellipticity} must be >= 1")));
        }
        if !(lipschitz >= 0.0) {
            return Err(Error::Domain(format!("Lipschitz constant {lipschitz} must be >= 0")));
        }
        let dim = n * d;
        let affine = coeffs.affine_drift().filter(|(a, b)| a.shape() == (dim, dim) && b.len() == dim);
        let transmission = coeffs.constant_transmission().filter(|s| s.shape() == (dim, dim));
        let diffusion = coeffs.constant_diffusion().filter(|m| m.shape() == (d, d));
        let frozen = coeffs.constant_frozen_diffusion().filter(|m| m.shape() == (d, d));
        Ok(ChainSpec {
            n,
            d,
            name: name.into(),
            lipschitz,
            holder,
            ellipticity,
            nondegeneracy_margin,
            coeffs,
            affine: affine.map(Arc::new),
            transmission: transmission.map(Arc::new),
            diffusion: diffusion.map(Arc::new),
            frozen: frozen.map(Arc::new),
        })
    }

    /// Builds a model from a descriptor; missing constants default to conservative values.
    pub fn from_descriptor(desc: &ModelDescriptor) -> Result<Self> {
        let model = DescriptorModel::compile(desc)?;
        let amp = desc.diffusion.modulation.as_ref().map_or(0.0, |m| m.amplitude.abs());
        let base = DMatrix::from_fn(desc.d, desc.d, |i, j| desc.diffusion.base[i][j]);
        let eig = nalgebra::SymmetricEigen::new(0.5 * (&base + base.transpose())).eigenvalues;
        let (lo, hi) = (eig.min() * (1.0 - amp), eig.max() * (1.0 + amp));
        let ellipticity = desc
            .ellipticity
            .unwrap_or_else(|| if lo > 0.0 { hi.max(1.0 / lo).max(1.0) } else { 1.0 });
        ChainSpec::new(
            desc.name.clone().unwrap_or_else(|| "custom".into()),
            desc.n,
            desc.d,
            Arc::new(model),
            desc.lipschitz.unwrap_or(1.0),
            desc.holder.unwrap_or(1.0),
            ellipticity,
            desc.nondegeneracy_margin.unwrap_or(0.0),
        )
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coeffs
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.coeffs.drift(t, x, out)
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.coeffs.drift(t, x, out.as_mut_slice());
        out
    }

    /// Writes the `nd×nd` subdiagonal gradient into `out` (overwriting everything).
    pub fn transmission_into(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        if let Some(s) = &self.transmission {
            out.copy_from(s);
            return;
        }
        out.fill(0.0);
        let d = self.d;
        let mut block = [0.0; 16];
        let mut heap;
        let buf: &mut [f64] = if d * d <= 16 {
            &mut block[..d * d]
        } else {
            heap = vec![0.0; d * d];
            &mut heap
        };
        for b in 1..self.n {
            self.coeffs.transmission(t, x, b, buf);
            for r in 0..d {
                for c in 0..d {
                    out[(b * d + r, (b - 1) * d + c)] = buf[r * d + c];
                }
            }
        }
    }

    pub fn transmission_matrix(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        self.transmission_into(t, x, &mut m);
        m
    }

    /// `D_{x_{b-1}} F_b` for 0-based block `b ≥ 1`.
    pub fn transmission_block(&self, t: f64, x: &[f64], b: usize) -> DMatrix<f64> {
        let d = self.d;
        let mut buf = vec![0.0; d * d];
        self.coeffs.transmission(t, x, b, &mut buf);
        DMatrix::from_row_slice(d, d, &buf)
    }

    pub fn diffusion(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        if let Some(a) = &self.diffusion {
            return (**a).clone();
        }
        let d = self.d;
        let mut buf = vec![0.0; d * d];
        self.coeffs.diffusion(t, x, &mut buf);
        DMatrix::from_row_slice(d, d, &buf)
    }

    pub fn frozen_diffusion(&self, t: f64) -> DMatrix<f64> {
        if let Some(a) = &self.frozen {
            return (**a).clone();
        }
        let d = self.d;
        let mut buf = vec![0.0; d * d];
        self.coeffs.frozen_diffusion(t, &mut buf);
        DMatrix::from_row_slice(d, d, &buf)
    }

    pub fn affine(&self) -> Option<&(DMatrix<f64>, DVector<f64>)> {
        self.affine.as_deref()
    }

    pub fn constant_transmission(&self) -> Option<&DMatrix<f64>> {
        self.transmission.as_deref()
    }

    pub fn constant_diffusion(&self) -> Option<&DMatrix<f64>> {
        self.diffusion.as_deref()
    }

    pub fn constant_frozen(&self) -> Option<&DMatrix<f64>> {
        self.frozen.as_deref()
    }

    /// Block `b` (0-based) of a state vector.
    #[inline]
    pub fn block<'a>(&self, x: &'a [f64], b: usize) -> &'a [f64] {
        &x[b * self.d..(b + 1) * self.d]
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point has {} coordinates, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("point has non-finite coordinates".into()));
        }
        Ok(())
    }
}

/// A space-time point `(s, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimePoint {
    pub s: f64,
    pub x: Vec<f64>,
}

impl SpaceTimePoint {
    pub fn new(s: f64, x: impl Into<Vec<f64>>) -> Self {
        SpaceTimePoint { s, x: x.into() }
    }

    pub fn checked(spec: &ChainSpec, s: f64, x: impl Into<Vec<f64>>) -> Result<Self> {
        let x = x.into();
        spec.check_point(&x)?;
        Ok(SpaceTimePoint { s, x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_sparsity_holds_for_catalog() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for name in catalog_names() {
            let spec = model_by_name(name).unwrap();
            let dim = spec.dim();
            for _ in 0..50 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                for i in 2..spec.n {
                    // perturb blocks strictly below i-1
                    let mut x2 = x.clone();
                    for j in 0..(i - 1) * spec.d {
                        x2[j] += rng.random_range(-1.0..1.0);
                    }
                    let f1 = spec.drift(0.3, &x);
                    let f2 = spec.drift(0.3, &x2);
                    for c in i * spec.d..(i + 1) * spec.d {
                        assert_eq!(f1[c], f2[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn transmission_matrix_is_subdiagonal() {
        let spec = model_by_name("nonlinear-kolmogorov").unwrap();
        let m = spec.transmission_matrix(0.0, &[0.3, 1.0]);
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 1)], 0.0);
        assert!((m[(1, 0)] - (1.0 + 0.25 * 0.3f64.cos())).abs() < 1e-15);
    }
}
