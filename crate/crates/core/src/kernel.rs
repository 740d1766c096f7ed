//! The frozen Gaussian proxy: covariance, density and its derivatives,
//! comparison kernels and exact sampling.
//!
//! Everything is computed through the scaled covariance
//! `Ǩ = Δ 𝕋_Δ⁻¹ K̃ 𝕋_Δ⁻¹` (with `Δ = t - s`), which stays well conditioned as
//! `Δ → 0` while the raw covariance does not.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::{FlowSolver, LinearizedFlow};
use crate::linalg::{cholesky, largest_eigenvalue, smallest_eigenvalue, ScaleMatrix};
use crate::model::ChainSpec;
use crate::quadrature::{hermite_grid, legendre, map_point};

pub use crate::linalg::scale_matrix;

#[derive(Debug)]
struct ScaledFactor {
    scaled_cov: DMatrix<f64>,
    /// lower Cholesky factor of `Ǩ`
    chol: DMatrix<f64>,
    log_det_scaled: f64,
    resolvent: DMatrix<f64>,
    /// `𝕋⁻¹ R̃(t, s) 𝕋`
    rbar: DMatrix<f64>,
}

fn scaled_covariance_of(lin: &LinearizedFlow, s: f64, t: f64) -> Result<DMatrix<f64>> {
    let spec = lin.spec();
    let (n, d) = (spec.n, spec.d);
    let dim = n * d;
    let delta = t - s;
    let scale = ScaleMatrix::new(delta, n, d)?;
    let inv: Vec<f64> = (0..dim).map(|k| 1.0 / scale.entry(k)).collect();
    let rule = legendre(16);
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let mut g = DMatrix::<f64>::zeros(dim, d);
    let constant_frozen = spec.constant_frozen().cloned();
    for (a, b) in lin.panels(s, t) {
        for (u, w) in rule.on(a, b) {
            let r = lin.resolvent(t, u)?;
            for i in 0..dim {
                for j in 0..d {
                    g[(i, j)] = inv[i] * r[(i, j)];
                }
            }
            let sig = match &constant_frozen {
                Some(m) => m.clone(),
                None => spec.frozen_diffusion(u),
            };
            if sig.iter().any(|v| !v.is_finite()) {
                return Err(Error::ModelEvaluation {
                    what: "frozen diffusion",
                    t: u,
                });
            }
            acc += (&g * sig * g.transpose()) * w;
        }
    }
    acc *= delta;
    Ok(0.5 * (&acc + acc.transpose()))
}

fn build_factor(lin: &LinearizedFlow, s: f64, t: f64) -> Result<ScaledFactor> {
    let spec = lin.spec();
    let scaled_cov = scaled_covariance_of(lin, s, t)?;
    let chol = cholesky(&scaled_cov)?.l();
    let log_det_scaled = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let resolvent = lin.resolvent(t, s)?;
    let scale = ScaleMatrix::new(t - s, spec.n, spec.d)?;
    let dim = spec.dim();
    let rbar = DMatrix::from_fn(dim, dim, |i, j| resolvent[(i, j)] * scale.entry(j) / scale.entry(i));
    Ok(ScaledFactor {
        scaled_cov,
        chol,
        log_det_scaled,
        resolvent,
        rbar,
    })
}

/// Frozen covariance `K̃ = ∫_s^t R̃(t,u) B ς(u) B* R̃(t,u)* du` for the freeze `(T, y)`.
pub fn covariance(solver: &FlowSolver, freeze_time: f64, freeze_point: &[f64], s: f64, t: f64) -> Result<DMatrix<f64>> {
    if !(s < t) {
        return Err(if s == t {
            Error::DegenerateInterval(s)
        } else {
            Error::Domain(format!("covariance needs s < t, got s={s}, t={t}"))
        });
    }
    let lin = LinearizedFlow::new(solver, freeze_time, freeze_point, s.min(freeze_time), t.max(freeze_time))?;
    let ck = scaled_covariance_of(&lin, s, t)?;
    let spec = solver.spec();
    let scale = ScaleMatrix::new(t - s, spec.n, spec.d)?;
    let dim = spec.dim();
    let k = DMatrix::from_fn(dim, dim, |i, j| ck[(i, j)] * scale.entry(i) * scale.entry(j) / (t - s));
    let lam = smallest_eigenvalue(&ck);
    if !(lam > 0.0) {
        return Err(Error::Conditioning {
            smallest_eigenvalue: lam,
        });
    }
    Ok(k)
}

/// The Gaussian law of the frozen linear SDE started at `(s, x)`, observed at time `t`.
#[derive(Debug, Clone)]
pub struct FrozenGaussian {
    n: usize,
    d: usize,
    s: f64,
    t: f64,
    delta: f64,
    x: DVector<f64>,
    freeze_time: f64,
    freeze_point: DVector<f64>,
    mean: DVector<f64>,
    theta_s: DVector<f64>,
    factor: Arc<ScaledFactor>,
    /// diagonal of `𝕋_Δ⁻¹`
    inv_scale: Vec<f64>,
}

/// Density value together with its first and second (block-1) derivatives in `x`.
#[derive(Debug, Clone)]
pub struct DensityDerivatives {
    pub value: f64,
    /// `∇_x q̃`, all `n·d` coordinates
    pub gradient: DVector<f64>,
    /// `D²_{x₁} q̃`, a `d×d` matrix
    pub hessian11: DMatrix<f64>,
    /// `K̃⁻¹ (mean - y)`
    pub precision_residual: DVector<f64>,
}

impl FrozenGaussian {
    pub fn span(&self) -> (f64, f64) {
        (self.s, self.t)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn freeze(&self) -> (f64, &DVector<f64>) {
        (self.freeze_time, &self.freeze_point)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    /// `θ̃_{t,s}(x)`.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `θ_{s,T}(y)` for the freeze `(T, y)`.
    pub fn characteristic_at_start(&self) -> &DVector<f64> {
        &self.theta_s
    }

    pub fn resolvent(&self) -> &DMatrix<f64> {
        &self.factor.resolvent
    }

    pub fn scaled_resolvent(&self) -> &DMatrix<f64> {
        &self.factor.rbar
    }

    pub fn scaled_covariance(&self) -> &DMatrix<f64> {
        &self.factor.scaled_cov
    }

    pub fn scaled_cholesky(&self) -> &DMatrix<f64> {
        &self.factor.chol
    }

    pub fn scale(&self) -> ScaleMatrix {
        ScaleMatrix {
            t: self.delta,
            n: self.n,
            d: self.d,
        }
    }

    /// Raw covariance `K̃ = Δ⁻¹ 𝕋 Ǩ 𝕋`; for display only, never factored.
    pub fn covariance(&self) -> DMatrix<f64> {
        let dim = self.n * self.d;
        let ck = &self.factor.scaled_cov;
        DMatrix::from_fn(dim, dim, |i, j| ck[(i, j)] / (self.inv_scale[i] * self.inv_scale[j] * self.delta))
    }

    /// `log det K̃ = log det Ǩ + 2 Σ d·i·log Δ - n·d·log Δ`.
    pub fn log_det(&self) -> f64 {
        let (n, d) = (self.n as f64, self.d as f64);
        let l = self.delta.ln();
        let sum_i = n * (n + 1.0) / 2.0;
        self.factor.log_det_scaled + 2.0 * d * sum_i * l - n * d * l
    }

    pub fn log_det_scaled(&self) -> f64 {
        self.factor.log_det_scaled
    }

    /// `𝕋⁻¹ (mean - y)`.
    fn scaled_residual(&self, y: &[f64]) -> Result<DVector<f64>> {
        let dim = self.n * self.d;
        if y.len() != dim {
            return Err(Error::Shape(format!("point has {} coordinates, expected {dim}", y.len())));
        }
        Ok(DVector::from_fn(dim, |k, _| (self.mean[k] - y[k]) * self.inv_scale[k]))
    }

    /// `L⁻¹ 𝕋⁻¹ (mean - y)`.
    fn whitened(&self, y: &[f64]) -> Result<DVector<f64>> {
        let r = self.scaled_residual(y)?;
        Ok(self
            .factor
            .chol
            .solve_lower_triangular(&r)
            .expect("Cholesky factor has a positive diagonal"))
    }

    /// `⟨K̃⁻¹ (mean - y), mean - y⟩`.
    pub fn quadratic_form(&self, y: &[f64]) -> Result<f64> {
        Ok(self.delta * self.whitened(y)?.norm_squared())
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        let dim = (self.n * self.d) as f64;
        Ok(-0.5 * dim * (2.0 * PI).ln() - 0.5 * self.log_det() - 0.5 * self.quadratic_form(y)?)
    }

    /// `q̃(s, t, x, y)`.
    pub fn density(&self, y: &[f64]) -> Result<f64> {
        Ok(self.log_density(y)?.exp())
    }

    /// `Ǩ⁻¹ 𝕋⁻¹ (mean - y)`.
    fn scaled_precision_residual(&self, y: &[f64]) -> Result<DVector<f64>> {
        let w = self.whitened(y)?;
        Ok(self
            .factor
            .chol
            .transpose()
            .solve_upper_triangular(&w)
            .expect("Cholesky factor has a positive diagonal"))
    }

    /// `(q̃, R* K̃⁻¹ v, [R* K̃⁻¹ R]₁₁, K̃⁻¹ v)` with `v = mean - y`.
    fn raw_derivatives(&self, y: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>, DVector<f64>)> {
        let d = self.d;
        let dim = self.n * d;
        let q = self.density(y)?;
        let p = self.scaled_precision_residual(y)?;
        // R* K̃⁻¹ v = Δ 𝕋⁻¹ R̄* Ǩ⁻¹ 𝕋⁻¹ v
        let rp = self.factor.rbar.transpose() * &p;
        let rw = DVector::from_fn(dim, |k, _| self.delta * self.inv_scale[k] * rp[k]);
        // [R* K̃⁻¹ R]₁₁ = Δ⁻¹ [R̄* Ǩ⁻¹ R̄]₁₁
        let rb1 = self.factor.rbar.columns(0, d).into_owned();
        let z = self
            .factor
            .chol
            .solve_lower_triangular(&rb1)
            .expect("Cholesky factor has a positive diagonal");
        let h = z.transpose() * z / self.delta;
        let w = DVector::from_fn(dim, |k, _| self.delta * self.inv_scale[k] * p[k]);
        Ok((q, rw, h, w))
    }

    /// Density with its `x`-gradient and block-1 Hessian.
    pub fn derivatives(&self, y: &[f64]) -> Result<DensityDerivatives> {
        let d = self.d;
        let (q, rw, h, w) = self.raw_derivatives(y)?;
        let gradient = -&rw * q;
        let hessian11 = DMatrix::from_fn(d, d, |i, j| (rw[i] * rw[j] - h[(i, j)]) * q);
        Ok(DensityDerivatives {
            value: q,
            gradient,
            hessian11,
            precision_residual: w,
        })
    }

    /// Block-`j` gradient (`j` is 1-based).
    pub fn grad(&self, y: &[f64], j: usize) -> Result<DVector<f64>> {
        if j == 0 || j > self.n {
            return Err(Error::Usage(format!("block index {j} outside 1..={}", self.n)));
        }
        let g = self.derivatives(y)?.gradient;
        Ok(g.rows((j - 1) * self.d, self.d).into_owned())
    }

    /// `D²_{x₁} q̃(s, t, x, y)`.
    pub fn hess11(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.derivatives(y)?.hessian11)
    }

    /// `∂_s q̃` with the freeze held fixed, from the closed-form dependence of mean and covariance on `s`.
    pub fn time_derivative(&self, spec: &ChainSpec, y: &[f64]) -> Result<f64> {
        let d = self.d;
        let (q, rw, h, w) = self.raw_derivatives(y)?;
        let th = self.theta_s.as_slice();
        let f = spec.drift(self.s, th);
        let df = spec.transmission_matrix(self.s, th);
        // ∂_s mean = -R (F(s, θ_s) + DF(s, θ_s)(x - θ_s))
        let dmean = -(&self.factor.resolvent * (f + df * (&self.x - &self.theta_s)));
        let sig = spec.frozen_diffusion(self.s);
        // ∂_s log q̃ = ½ tr(ς H) - ⟨K̃⁻¹v, ∂_s mean⟩ - ½ g*ςg,  g = (R* K̃⁻¹ v)₁
        let mut tr = 0.0;
        let mut gsg = 0.0;
        for i in 0..d {
            for j in 0..d {
                tr += sig[(i, j)] * h[(j, i)];
                gsg += rw[i] * sig[(i, j)] * rw[j];
            }
        }
        Ok((0.5 * tr - w.dot(&dmean) - 0.5 * gsg) * q)
    }

    /// `(Δ⁻¹|𝕋_Δ ξ|²)⁻¹ ⟨K̃ ξ, ξ⟩ = ⟨Ǩ η, η⟩ / |η|²` with `η = 𝕋_Δ ξ`.
    pub fn gsp_ratio(&self, xi: &[f64]) -> Result<f64> {
        let dim = self.n * self.d;
        if xi.len() != dim {
            return Err(Error::Shape(format!("vector has {} coordinates, expected {dim}", xi.len())));
        }
        let eta = DVector::from_fn(dim, |k, _| xi[k] / self.inv_scale[k]);
        let nn = eta.norm_squared();
        if !(nn > 0.0) {
            return Err(Error::Domain("ratio undefined for the zero vector".into()));
        }
        Ok((eta.transpose() * &self.factor.scaled_cov * &eta)[(0, 0)] / nn)
    }

    /// Extreme eigenvalues of `Ǩ`.
    pub fn scaled_spectrum(&self) -> (f64, f64) {
        (
            smallest_eigenvalue(&self.factor.scaled_cov),
            largest_eigenvalue(&self.factor.scaled_cov),
        )
    }

    /// `(λ_min(K̃), λ_max(K̃))`, the smallest one via `K̃⁻¹ = Δ 𝕋⁻¹ Ǩ⁻¹ 𝕋⁻¹`.
    pub fn covariance_spectrum(&self) -> (f64, f64) {
        let dim = self.n * self.d;
        let linv = self
            .factor
            .chol
            .clone()
            .try_inverse()
            .expect("Cholesky factor is invertible");
        let ckinv = linv.transpose() * &linv;
        let kinv = DMatrix::from_fn(dim, dim, |i, j| self.delta * self.inv_scale[i] * self.inv_scale[j] * ckinv[(i, j)]);
        let lmin = 1.0 / largest_eigenvalue(&kinv);
        let lmax = largest_eigenvalue(&self.covariance());
        (lmin, lmax)
    }

    /// Same freeze and interval, started at another point.
    pub fn restarted(&self, x: &[f64]) -> FrozenGaussian {
        let xv = DVector::from_column_slice(x);
        let mean = &self.mean + &self.factor.resolvent * (&xv - &self.x);
        FrozenGaussian {
            x: xv,
            mean,
            ..self.clone()
        }
    }

    /// `Δ^{-1/2} 𝕋_Δ L`: maps a standard normal vector to a centered sample.
    pub fn whitening_map(&self) -> DMatrix<f64> {
        let dim = self.n * self.d;
        let c = self.delta.sqrt();
        DMatrix::from_fn(dim, dim, |i, j| self.factor.chol[(i, j)] / (self.inv_scale[i] * c))
    }

    /// `mean + Δ^{-1/2} 𝕋_Δ L z`.
    pub fn sample_with(&self, z: &[f64]) -> DVector<f64> {
        let dim = self.n * self.d;
        let c = 1.0 / self.delta.sqrt();
        let mut out = self.mean.clone();
        for i in 0..dim {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.factor.chol[(i, j)] * z[j];
            }
            out[i] += c * acc / self.inv_scale[i];
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z: Vec<f64> = (0..self.n * self.d).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with(&z)
    }

    /// `Δ |𝕋_Δ⁻¹ (mean - y)|²`, the exponent scale shared by the comparison kernels.
    pub fn envelope_exponent(&self, y: &[f64]) -> Result<f64> {
        Ok(self.delta * self.scaled_residual(y)?.norm_squared())
    }

    /// `q_c(s,t,x,y) = c^{nd/2} (2π)^{-nd/2} Δ^{-n²d/2} exp(-(c/2) Δ |𝕋⁻¹(mean - y)|²)`.
    pub fn comparison_kernel(&self, y: &[f64], c: f64) -> Result<f64> {
        let (n, d) = (self.n as f64, self.d as f64);
        let e = self.envelope_exponent(y)?;
        Ok(((n * d / 2.0) * (c / (2.0 * PI)).ln() - (n * n * d / 2.0) * self.delta.ln() - 0.5 * c * e).exp())
    }

    /// `(log lower, log upper)` multi-scale envelopes with constant `c ≥ 1`:
    /// `c⁻¹ Δ^{-n²d/2} e^{-c E}` and `c Δ^{-n²d/2} e^{-E/c}`.
    pub fn log_envelopes(&self, y: &[f64], c: f64) -> Result<(f64, f64)> {
        let e = self.envelope_exponent(y)?;
        let a = -((self.n * self.n * self.d) as f64) / 2.0 * self.delta.ln();
        Ok((-c.ln() + a - c * e, c.ln() + a - e / c))
    }

    /// `|∇_{x_j} q̃| / (Δ^{1-j} |𝕋⁻¹(mean - y)| q̃)`.
    pub fn derivative_scaling_ratio(&self, y: &[f64], j: usize) -> Result<f64> {
        let g = self.grad(y, j)?;
        let q = self.density(y)?;
        let r = self.scaled_residual(y)?.norm();
        let denom = self.delta.powi(1 - j as i32) * r * q;
        if !(denom > 0.0) {
            return Err(Error::Domain("ratio undefined at the mean".into()));
        }
        Ok(g.norm() / denom)
    }

    /// `|D²_{x₁} q̃| Δ / q_c`.
    pub fn hessian_singularity_ratio(&self, y: &[f64], c: f64) -> Result<f64> {
        let h = self.hess11(y)?;
        let qc = self.comparison_kernel(y, c)?;
        Ok(h.norm() * self.delta / qc)
    }
}

/// Builds frozen Gaussians for a model, caching the `(s, t)`-only parts when the
/// linearization does not depend on the freeze point.
#[derive(Debug)]
pub struct ProxyKernel {
    solver: FlowSolver,
    cache: Option<Mutex<HashMap<u64, Arc<ScaledFactor>>>>,
}

impl Clone for ProxyKernel {
    fn clone(&self) -> Self {
        ProxyKernel::with_solver(self.solver.clone())
    }
}

impl ProxyKernel {
    pub fn new(spec: &ChainSpec) -> Self {
        ProxyKernel::with_solver(FlowSolver::new(spec))
    }

    pub fn with_solver(solver: FlowSolver) -> Self {
        let spec = solver.spec();
        let cacheable = spec.affine().is_some() && spec.constant_transmission().is_some() && spec.constant_frozen().is_some();
        ProxyKernel {
            cache: cacheable.then(|| Mutex::new(HashMap::new())),
            solver,
        }
    }

    pub fn solver(&self) -> &FlowSolver {
        &self.solver
    }

    pub fn spec(&self) -> &ChainSpec {
        self.solver.spec()
    }

    /// True when the law only depends on the freeze through the mean.
    pub fn is_freeze_invariant(&self) -> bool {
        self.cache.is_some()
    }

    /// Frozen Gaussian on `[s, t]` started at `x`, with the freeze `(freeze_time, freeze_point)`.
    pub fn frozen(&self, s: f64, t: f64, x: &[f64], freeze_time: f64, freeze_point: &[f64]) -> Result<FrozenGaussian> {
        let spec = self.solver.spec();
        spec.check_point(x)?;
        spec.check_point(freeze_point)?;
        if !(s < t) {
            return Err(if s == t {
                Error::DegenerateInterval(s)
            } else {
                Error::Domain(format!("frozen kernel needs s < t, got s={s}, t={t}"))
            });
        }
        let (n, d) = (spec.n, spec.d);
        let dim = n * d;
        let delta = t - s;
        let scale = ScaleMatrix::new(delta, n, d)?;
        let inv_scale: Vec<f64> = (0..dim).map(|k| 1.0 / scale.entry(k)).collect();
        let (factor, theta_s, theta_t) = match &self.cache {
            Some(cache) => {
                let key = delta.to_bits();
                let hit = cache.lock().unwrap().get(&key).cloned();
                let factor = match hit {
                    Some(f) => f,
                    None => {
                        let lin = LinearizedFlow::new(&self.solver, t, freeze_point, s, t)?;
                        let f = Arc::new(build_factor(&lin, s, t)?);
                        cache.lock().unwrap().insert(key, f.clone());
                        f
                    }
                };
                let theta_s = self.solver.flow(s, freeze_time, freeze_point)?;
                let theta_t = self.solver.flow(t, freeze_time, freeze_point)?;
                (factor, theta_s, theta_t)
            }
            None => {
                let lin = LinearizedFlow::new(&self.solver, freeze_time, freeze_point, s.min(freeze_time), t.max(freeze_time))?;
                let f = Arc::new(build_factor(&lin, s, t)?);
                (f, lin.theta(s)?, lin.theta(t)?)
            }
        };
        let xv = DVector::from_column_slice(x);
        let mean = theta_t + &factor.resolvent * (&xv - &theta_s);
        Ok(FrozenGaussian {
            n,
            d,
            s,
            t,
            delta,
            x: xv,
            freeze_time,
            freeze_point: DVector::from_column_slice(freeze_point),
            mean,
            theta_s,
            factor,
            inv_scale,
        })
    }

    /// The proxy used by the parametrix: freeze at the terminal point `(t, y)`.
    pub fn at(&self, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<FrozenGaussian> {
        self.frozen(s, t, x, t, y)
    }

    /// `q̃(s, t, x, y)` with freeze `(t, y)`.
    pub fn density(&self, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        self.at(s, t, x, y)?.density(y)
    }
}

/// `max_y |q̃(s,t,x,y) - ∫ q̃(s,u,x,z) q̃(u,t,z,y) dz|` over `ys`, divided by the
/// largest `q̃(s,t,x,y)`. For each `y` the inner integral uses Gauss–Hermite nodes
/// centered and whitened on the product of the two Gaussians (in `z`), with
/// `order` points per axis. Only globally frozen models compose exactly.
pub fn chapman_kolmogorov_error(pk: &ProxyKernel, s: f64, u: f64, t: f64, x: &[f64], ys: &[Vec<f64>], order: usize) -> Result<f64> {
    if !pk.is_freeze_invariant() {
        return Err(Error::Usage("composition identity needs a globally frozen model".into()));
    }
    if !(s < u && u < t) {
        return Err(Error::Domain(format!("composition needs s < u < t, got {s}, {u}, {t}")));
    }
    let dim = x.len();
    let first = pk.at(s, u, x, x)?;
    let second = pk.at(u, t, x, x)?;
    let whole = pk.at(s, t, x, x)?;
    // in the whitened coordinates w of the first kernel, the second one is a
    // Gaussian in y with mean R(m₁ + W w) + c
    let w = first.whitening_map();
    let r = second.resolvent().clone();
    let c = second.mean() - &r * DVector::from_column_slice(x);
    let rw = &r * &w;
    let k2inv = cholesky(&second.covariance())?.inverse();
    let p = DMatrix::identity(dim, dim) + rw.transpose() * &k2inv * &rw;
    let chol = cholesky(&p)?;
    let map = w.clone() * chol.l().transpose().try_inverse().ok_or(Error::Conditioning { smallest_eigenvalue: 0.0 })?;
    let jac = map.determinant().abs();
    let base = &r * first.mean() + &c;
    let grid = hermite_grid(order, dim);
    let mut z = vec![0.0; dim];
    let mut worst: f64 = 0.0;
    let mut peak: f64 = 0.0;
    for y in ys {
        let gap = DVector::from_column_slice(y) - &base;
        let center = first.mean() + &w * chol.solve(&(rw.transpose() * &k2inv * gap));
        let mut composed = 0.0;
        for (node, wl, _) in grid.iter() {
            map_point(center.as_slice(), &map, node, &mut z);
            composed += jac * wl * first.density(&z)? * second.restarted(&z).density(y)?;
        }
        let direct = whole.density(y)?;
        worst = worst.max((direct - composed).abs());
        peak = peak.max(direct);
    }
    Ok(if peak > 0.0 { worst / peak } else { worst })
}

/// Smallest `C ≥ 1` such that every `(log q, log-scale, exponent)` triple lies between
/// `-ln C + a - C e` and `ln C + a - e/C`.
pub fn fit_envelope_constant(samples: &[(f64, f64, f64)]) -> f64 {
    let ok = |c: f64| {
        samples.iter().all(|&(lq, a, e)| lq <= c.ln() + a - e / c + 1e-12 && lq >= -c.ln() + a - c * e - 1e-12)
    };
    if samples.is_empty() || ok(1.0) {
        return 1.0;
    }
    let mut hi = 2.0;
    while !ok(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return f64::INFINITY;
        }
    }
    let mut lo = hi / 2.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_by_name;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kolmogorov_oracle(delta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[delta, delta * delta / 2.0, delta * delta / 2.0, delta.powi(3) / 3.0])
    }

    #[test]
    fn scalar_heat_variance() {
        let spec = model_by_name("brownian").unwrap();
        let k = covariance(&FlowSolver::new(&spec), 0.8, &[0.0], 0.1, 0.8).unwrap();
        assert_relative_eq!(k[(0, 0)], 0.7, max_relative = 1e-14);
    }

    #[test]
    fn kolmogorov_covariance_is_exact() {
        let spec = model_by_name("kolmogorov").unwrap();
        let solver = FlowSolver::new(&spec);
        for delta in [1e-3, 1e-2, 1e-1, 1.0] {
            let k = covariance(&solver, delta, &[0.3, -0.2], 0.0, delta).unwrap();
            let oracle = kolmogorov_oracle(delta);
            for i in 0..2 {
                for j in 0..2 {
                    assert_relative_eq!(k[(i, j)], oracle[(i, j)], max_relative = 1e-10);
                }
            }
            let g = ProxyKernel::new(&spec).at(0.0, delta, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
            assert_relative_eq!(g.log_det().exp(), delta.powi(4) / 12.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn density_examples() {
        let spec = model_by_name("kolmogorov").unwrap();
        let q = ProxyKernel::new(&spec).density(0.0, 1.0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(q, 3f64.sqrt() / PI, max_relative = 1e-12);
        let spec = model_by_name("brownian").unwrap();
        let pk = ProxyKernel::new(&spec);
        let q = pk.density(0.0, 1.0, &[0.0], &[0.0]).unwrap();
        assert_relative_eq!(q, 1.0 / (2.0 * PI).sqrt(), max_relative = 1e-14);
        let h = pk.at(0.0, 1.0, &[0.0], &[0.0]).unwrap().hess11(&[0.0]).unwrap();
        assert_relative_eq!(h[(0, 0)], -1.0 / (2.0 * PI).sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn far_points_are_negligible() {
        // metric distance 5 along the second block: |y₂| = 5³ · Δ^{3/2}-scaled displacement
        let spec = model_by_name("kolmogorov").unwrap();
        let pk = ProxyKernel::new(&spec);
        let peak = pk.density(0.0, 0.01, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        for y in [[0.5f64.powi(1) * 0.0 + 4.9 * 0.1, 0.0], [0.0, 125.0 * 0.001], [2.0, 0.0]] {
            let q = pk.density(0.0, 0.01, &[0.0, 0.0], &y).unwrap();
            assert!(q < 1e-6 * peak, "{y:?}: {q} vs {peak}");
        }
    }

    #[test]
    fn gsp_examples() {
        let spec = model_by_name("kolmogorov").unwrap();
        let g = ProxyKernel::new(&spec).at(0.2, 0.45, &[0.1, 0.0], &[0.0, 0.3]).unwrap();
        assert_relative_eq!(g.gsp_ratio(&[1.0, 0.0]).unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(g.gsp_ratio(&[0.0, 1.0]).unwrap(), 1.0 / 3.0, max_relative = 1e-12);
        assert!(g.gsp_ratio(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn gradient_vanishes_at_mean_and_matches_differences() {
        let spec = model_by_name("nonlinear-kolmogorov").unwrap();
        let pk = ProxyKernel::new(&spec);
        let g = pk.at(0.1, 0.6, &[0.3, -0.2], &[0.5, 0.1]).unwrap();
        let m = g.mean().clone();
        for j in 1..=2 {
            assert!(g.grad(m.as_slice(), j).unwrap().norm() < 1e-12);
        }
        // central differences in x with the freeze held fixed
        let y = [0.5, 0.1];
        let der = g.derivatives(&y).unwrap();
        let h = 1e-5;
        for k in 0..2 {
            let mut xp = vec![0.3, -0.2];
            let mut xm = xp.clone();
            xp[k] += h;
            xm[k] -= h;
            let qp = pk.frozen(0.1, 0.6, &xp, 0.6, &y).unwrap().density(&y).unwrap();
            let qm = pk.frozen(0.1, 0.6, &xm, 0.6, &y).unwrap().density(&y).unwrap();
            assert_relative_eq!((qp - qm) / (2.0 * h), der.gradient[k], max_relative = 1e-7);
        }
    }

    #[test]
    fn time_derivative_matches_central_difference() {
        let spec = model_by_name("nonlinear-kolmogorov").unwrap();
        let pk = ProxyKernel::new(&spec);
        let y = [0.5, 0.1];
        let x = [0.3, -0.2];
        let g = pk.at(0.1, 0.6, &x, &y).unwrap();
        let analytic = g.time_derivative(&spec, &y).unwrap();
        let h = 1e-4;
        let qp = pk.at(0.1 + h, 0.6, &x, &y).unwrap().density(&y).unwrap();
        let qm = pk.at(0.1 - h, 0.6, &x, &y).unwrap().density(&y).unwrap();
        assert_relative_eq!((qp - qm) / (2.0 * h), analytic, max_relative = 1e-5);
    }

    #[test]
    fn log_det_scaling_identity() {
        let spec = model_by_name("chain3").unwrap();
        let g = ProxyKernel::new(&spec).at(0.0, 0.05, &[0.0; 3], &[0.0; 3]).unwrap();
        let raw = g.covariance().determinant().ln();
        assert_relative_eq!(g.log_det(), raw, max_relative = 1e-6);
    }

    #[test]
    fn sampling_is_reproducible_and_matches_covariance() {
        let spec = model_by_name("kolmogorov").unwrap();
        let g = ProxyKernel::new(&spec).at(0.0, 0.5, &[0.2, 0.1], &[0.0, 0.0]).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(g.sample(&mut a), g.sample(&mut b));
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = g.covariance();
        let m = g.mean().clone();
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        let mut acc2 = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let v = g.sample(&mut rng) - &m;
            let o = &v * v.transpose();
            acc2 += o.component_mul(&o);
            acc += o;
        }
        let mean = &acc / n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let var = acc2[(i, j)] / n as f64 - mean[(i, j)].powi(2);
                let se = (var / n as f64).sqrt();
                assert!((mean[(i, j)] - k[(i, j)]).abs() < 5.0 * se);
            }
        }
    }

    #[test]
    fn kernels_compose_on_kolmogorov() {
        let pk = ProxyKernel::new(&model_by_name("kolmogorov").unwrap());
        let ys: Vec<Vec<f64>> = (0..41).map(|k| vec![-2.0 + 0.1 * k as f64, 0.05 * (k as f64 - 20.0)]).collect();
        let err = chapman_kolmogorov_error(&pk, 0.0, 0.4, 1.0, &[0.3, -0.1], &ys, 6).unwrap();
        assert!(err < 1e-6, "{err}");
        let nl = ProxyKernel::new(&model_by_name("nonlinear-kolmogorov").unwrap());
        assert!(chapman_kolmogorov_error(&nl, 0.0, 0.4, 1.0, &[0.3, -0.1], &ys, 8).is_err());
    }

    #[test]
    fn envelope_fit_is_tight() {
        let samples = [(0.0, 0.0, 0.0), (-1.0, 0.0, 0.5)];
        let c = fit_envelope_constant(&samples);
        assert!(c >= 1.0 && c.is_finite());
        for &(lq, a, e) in &samples {
            assert!(lq <= c.ln() + a - e / c + 1e-9 && lq >= -c.ln() + a - c * e - 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn hessian_matches_finite_differences(a in -2.0f64..2.0, b in -2.0f64..2.0, y1 in -1.0f64..1.0, y2 in -1.0f64..1.0, dt in 0.1f64..0.9) {
            let spec = model_by_name("nonlinear-kolmogorov").unwrap();
            let pk = ProxyKernel::new(&spec);
            let y = [y1, y2];
            // start points within two standard deviations of the pulled-back terminal point
            let back = pk.solver().flow(0.0, dt, &y).unwrap();
            let (x1, x2) = (back[0] + a * dt.sqrt(), back[1] + b * dt.powf(1.5));
            let q = |v: f64| pk.frozen(0.0, dt, &[v, x2], dt, &y).unwrap().density(&y).unwrap();
            let exact = pk.at(0.0, dt, &[x1, x2], &y).unwrap().hess11(&y).unwrap()[(0, 0)];
            let second = |h: f64| (q(x1 + h) - 2.0 * q(x1) + q(x1 - h)) / (h * h);
            // Richardson step removes the O(h²) truncation
            let fd = (4.0 * second(5e-4) - second(1e-3)) / 3.0;
            let scale = pk.density(0.0, dt, &[x1, x2], &y).unwrap() / dt;
            prop_assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(scale), "{fd} vs {exact}");
        }

        #[test]
        fn normalization(x1 in -1.0f64..1.0, x2 in -1.0f64..1.0, dt in 0.01f64..1.0) {
            let spec = model_by_name("chain3").unwrap();
            let g = ProxyKernel::new(&spec).frozen(0.0, dt, &[x1, x2, 0.1], dt, &[0.2, 0.0, -0.3]).unwrap();
            let grid = hermite_grid(8, 3);
            let map = g.whitening_map();
            let total = grid.integrate_mapped(g.mean().as_slice(), &map, |y| g.density(y).unwrap());
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }
}
