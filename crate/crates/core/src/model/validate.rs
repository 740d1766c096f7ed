//! Sampled checks of ellipticity, non-degeneracy, Lipschitz and Hölder regularity.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ChainSpec;
use crate::error::{Error, Result};
use crate::linalg::min_singular_value;

const PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut v = 0.0;
    while i > 0 {
        v += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    v
}

/// Sampling box for the assumption checks.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationOptions {
    pub half_width: f64,
    pub time_range: (f64, f64),
    /// relative tolerance applied to the declared constants
    pub tolerance: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            half_width: 3.0,
            time_range: (0.0, 1.0),
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub diffusion_min_eigenvalue: f64,
    pub diffusion_max_eigenvalue: f64,
    pub transmission_min_singular: f64,
    pub transmission_max_singular: f64,
    pub lipschitz_estimate: f64,
    pub holder_ratio: f64,
    pub structure_ok: bool,
    pub ellipticity_pass: bool,
    pub nondegeneracy_pass: bool,
    pub lipschitz_pass: bool,
    pub holder_pass: bool,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.structure_ok && self.ellipticity_pass && self.nondegeneracy_pass && self.lipschitz_pass && self.holder_pass
    }
}

fn finite(v: &[f64], what: &'static str, t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::ModelEvaluation { what, t })
    }
}

/// Checks the standing assumptions on `sample_budget` quasi-random points.
pub fn validate_model(spec: &ChainSpec, sample_budget: usize, rng_seed: u64) -> Result<ValidationReport> {
    validate_model_with(spec, sample_budget, rng_seed, &ValidationOptions::default())
}

pub fn validate_model_with(
    spec: &ChainSpec,
    sample_budget: usize,
    rng_seed: u64,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    if sample_budget == 0 {
        return Err(Error::Usage("sample budget must be at least 1".into()));
    }
    let (n, d, dim) = (spec.n, spec.d, spec.dim());
    let qdim = 1 + 2 * dim;
    if qdim > PRIMES.len() {
        return Err(Error::Usage(format!("state dimension {dim} too large for the sampler")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shift: Vec<f64> = (0..qdim).map(|_| rng.random::<f64>()).collect();
    let coeffs = spec.coefficients();

    let mut eig_min = f64::INFINITY;
    let mut eig_max = f64::NEG_INFINITY;
    let mut sv_min = f64::INFINITY;
    let mut sv_max = 0.0f64;
    let mut lip = 0.0f64;
    let mut holder = 0.0f64;
    let mut structure_ok = true;

    let mut f1 = vec![0.0; dim];
    let mut f2 = vec![0.0; dim];
    let mut a1 = vec![0.0; d * d];
    let mut a2 = vec![0.0; d * d];
    let mut blk = vec![0.0; d * d];
    let (t0, t1) = opts.time_range;
    let w = opts.half_width;

    for k in 0..sample_budget {
        let u: Vec<f64> = (0..qdim)
            .map(|j| (radical_inverse(k as u64 + 1, PRIMES[j]) + shift[j]).fract())
            .collect();
        let t = t0 + (t1 - t0) * u[0];
        let x: Vec<f64> = (0..dim).map(|j| -w + 2.0 * w * u[1 + j]).collect();
        // second point: alternate between far pairs and near pairs
        let spread = if k % 2 == 0 { 1.0 } else { 1e-2 };
        let x2: Vec<f64> = (0..dim)
            .map(|j| x[j] + spread * w * (2.0 * u[1 + dim + j] - 1.0))
            .collect();

        coeffs.diffusion(t, &x, &mut a1);
        finite(&a1, "diffusion", t)?;
        let am = DMatrix::from_row_slice(d, d, &a1);
        let eig = SymmetricEigen::new(0.5 * (&am + am.transpose())).eigenvalues;
        eig_min = eig_min.min(eig.min());
        eig_max = eig_max.max(eig.max());

        for b in 1..n {
            coeffs.transmission(t, &x, b, &mut blk);
            finite(&blk, "transmission gradient", t)?;
            let m = DMatrix::from_row_slice(d, d, &blk);
            let s = min_singular_value(&m);
            sv_min = sv_min.min(s);
            sv_max = sv_max.max(crate::linalg::op_norm(&m));
        }

        coeffs.drift(t, &x, &mut f1);
        finite(&f1, "drift", t)?;
        coeffs.drift(t, &x2, &mut f2);
        finite(&f2, "drift", t)?;
        let dx = x.iter().zip(&x2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dx > 0.0 {
            for b in 0..n {
                let df = (b * d..(b + 1) * d)
                    .map(|c| (f1[c] - f2[c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                lip = lip.max(df / dx);
            }
            coeffs.diffusion(t, &x2, &mut a2);
            finite(&a2, "diffusion", t)?;
            let da = a1.iter().zip(&a2).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            holder = holder.max(da / dx.powf(spec.holder));
        }

        // blocks strictly below b-1 must not influence block b
        for b in 2..n {
            let mut x3 = x.clone();
            for c in 0..(b - 1) * d {
                x3[c] = x2[c];
            }
            coeffs.drift(t, &x3, &mut f2);
            if (b * d..(b + 1) * d).any(|c| f1[c] != f2[c]) {
                structure_ok = false;
            }
        }
    }
    if n == 1 {
        sv_min = f64::INFINITY;
    }

    let tol = opts.tolerance;
    let lam = spec.ellipticity;
    Ok(ValidationReport {
        samples: sample_budget,
        diffusion_min_eigenvalue: eig_min,
        diffusion_max_eigenvalue: eig_max,
        transmission_min_singular: sv_min,
        transmission_max_singular: sv_max,
        lipschitz_estimate: lip,
        holder_ratio: holder,
        structure_ok,
        ellipticity_pass: eig_min >= 1.0 / lam * (1.0 - tol) && eig_max <= lam * (1.0 + tol),
        nondegeneracy_pass: sv_min >= spec.nondegeneracy_margin * (1.0 - tol),
        lipschitz_pass: lip <= spec.lipschitz * (1.0 + tol) + tol,
        holder_pass: holder.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_by_name;

    #[test]
    fn brownian_passes_with_unit_spectrum() {
        let r = validate_model(&model_by_name("brownian").unwrap(), 64, 1).unwrap();
        assert!(r.all_pass());
        assert_eq!(r.diffusion_min_eigenvalue, 1.0);
        assert_eq!(r.diffusion_max_eigenvalue, 1.0);
    }

    #[test]
    fn kolmogorov_margin_is_one() {
        let r = validate_model(&model_by_name("kolmogorov").unwrap(), 64, 1).unwrap();
        assert!(r.nondegeneracy_pass);
        assert_eq!(r.transmission_min_singular, 1.0);
    }

    #[test]
    fn nonlinear_margin_matches_grid_oracle() {
        let r = validate_model(&model_by_name("nonlinear-kolmogorov").unwrap(), 4000, 9).unwrap();
        assert!(r.all_pass(), "{r:?}");
        // oracle: 1 + 0.25 cos(x) on a fine grid of the sampling box
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..=200_000 {
            let x = -3.0 + 6.0 * k as f64 / 200_000.0;
            let v = 1.0 + 0.25 * x.cos();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(r.transmission_min_singular >= lo - 1e-12);
        assert!(r.transmission_min_singular - lo < 5e-3);
        assert!(hi - r.transmission_max_singular < 5e-3);
        assert!(r.transmission_min_singular >= 0.75);
    }

    #[test]
    fn zero_budget_is_rejected() {
        assert!(validate_model(&model_by_name("brownian").unwrap(), 0, 1).is_err());
    }

    #[test]
    fn non_finite_drift_is_reported() {
        use crate::model::{ChainSpec, DiffusionDescriptor, Factor, ModelDescriptor, Term, Var};
        let desc = ModelDescriptor {
            name: None,
            n: 1,
            d: 1,
            drift: vec![vec![vec![Term {
                coef: 1.0,
                factors: vec![Factor::Pow {
                    var: Var::Coord([1, 1]),
                    exp: 800,
                }],
            }]]],
            diffusion: DiffusionDescriptor {
                base: vec![vec![1.0]],
                modulation: None,
            },
            lipschitz: None,
            holder: None,
            ellipticity: None,
            nondegeneracy_margin: None,
        };
        let spec = ChainSpec::from_descriptor(&desc).unwrap();
        let err = validate_model(&spec, 64, 1).unwrap_err();
        assert!(matches!(err, Error::ModelEvaluation { .. }));
    }
}
