//! The singular kernel `k = D²_{x₁} q̃`, its split into a near-diagonal and a far
//! part, truncated singular integrals and empirical checks of the standard
//! estimates.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridField, SpaceTimeField};
use crate::flow::resolvable_rho;
use crate::kernel::ProxyKernel;
use crate::metric::{rho, sample_on_sphere, StripGrid};
use crate::quadrature::{dyadic_panels, dyadic_towards_zero, legendre};
use crate::spatial::{clip_panels, integrate_backward, integrate_forward, relative_change, split_panels};
use crate::stats::{statistics_to_csv, Statistic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingularKernelConfig {
    /// `δ`: the cutoff is 1 below `δ` and 0 above `2δ`
    pub split_radius: f64,
    /// decreasing truncation radii `ε`
    pub truncation_levels: Vec<f64>,
    pub horizon: f64,
    pub hermite_order: usize,
    pub legendre_order: usize,
    /// dyadic time levels towards the diagonal in untruncated integrals
    pub diagonal_levels: usize,
    pub refinement_tolerance: f64,
    /// locality radius of the smoothness check
    pub lambda_cut: f64,
    /// `c` in `c·d((s,x),(σ,ξ)) ≤ d((s,x),(t,y))`
    pub separation: f64,
    /// exponent `η` of the smoothness majorant
    pub holder_exponent: f64,
    /// constant of the comparison kernel used by the envelope fits
    pub envelope_c: f64,
}

impl Default for SingularKernelConfig {
    fn default() -> Self {
        SingularKernelConfig {
            split_radius: 0.25,
            truncation_levels: vec![0.4, 0.2, 0.1, 0.05],
            horizon: 1.0,
            hermite_order: 20,
            legendre_order: 8,
            diagonal_levels: 16,
            refinement_tolerance: 1e-2,
            lambda_cut: 0.5,
            separation: 2.0,
            holder_exponent: 1.0,
            envelope_c: 0.5,
        }
    }
}

impl SingularKernelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.split_radius > 0.0) {
            return bad("split_radius must be positive");
        }
        if self.truncation_levels.iter().any(|e| !(*e > 0.0)) || self.truncation_levels.windows(2).any(|w| w[1] >= w[0]) {
            return bad("truncation_levels must be positive and strictly decreasing");
        }
        if !(self.horizon > 0.0 && self.horizon <= 1.0) {
            return bad("horizon must lie in (0, 1]");
        }
        if self.hermite_order < 2 || self.legendre_order < 2 {
            return bad("quadrature orders must be at least 2");
        }
        if !(self.refinement_tolerance > 0.0) || !(self.lambda_cut > 0.0) || !(self.separation >= 1.0) {
            return bad("refinement_tolerance and lambda_cut must be positive, separation at least 1");
        }
        if !(self.holder_exponent > 0.0 && self.holder_exponent <= 1.0) || !(self.envelope_c > 0.0 && self.envelope_c <= 1.0) {
            return bad("holder_exponent and envelope_c must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Quintic smoothstep: 1 on `[0, δ]`, 0 on `[2δ, ∞)`, `C²` in between.
pub fn cutoff(r: f64, delta: f64) -> f64 {
    let u = ((r - delta) / delta).clamp(0.0, 1.0);
    1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// `ρ(t - s, θ_{t,s}(x) - y)`.
pub fn displacement(pk: &ProxyKernel, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let spec = pk.spec();
    let theta = pk.solver().flow(t, s, x)?;
    let z: Vec<f64> = theta.iter().zip(y).map(|(a, b)| a - b).collect();
    Ok(rho(t - s, &z, spec.n, spec.d))
}

/// `k(s, t, x, y) = 𝟙_{t>s} D²_{x₁} q̃(s, t, x, y)` with freeze `(t, y)`.
pub fn kernel_value(pk: &ProxyKernel, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
    let d = pk.spec().d;
    if t <= s {
        return Ok(DMatrix::zeros(d, d));
    }
    pk.at(s, t, x, y)?.hess11(y)
}

/// `k*(s, t, x, y) = k(t, s, y, x)`.
pub fn adjoint_kernel_value(pk: &ProxyKernel, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
    kernel_value(pk, t, s, y, x)
}

/// `(η_δ·k, k - η_δ·k)` with the cutoff evaluated at the displacement along the flow.
pub fn split_kernel(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    s: f64,
    t: f64,
    x: &[f64],
    y: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = kernel_value(pk, s, t, x, y)?;
    if t <= s {
        return Ok((k.clone(), k));
    }
    let eta = cutoff(displacement(pk, s, t, x, y)?, cfg.split_radius);
    let near = &k * eta;
    let far = k - &near;
    Ok((near, far))
}

struct KernelIntegral {
    value: DMatrix<f64>,
    absolute: DMatrix<f64>,
}

/// `∫_panels ∫ k f` with `u = |t - s|` running over the panels; `adjoint` integrates
/// `k(t, s, y, x)` over earlier times instead.
#[allow(clippy::too_many_arguments)]
fn kernel_integral(
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
    panels: &[(f64, f64)],
    adjoint: bool,
    time_order: usize,
    space_order: usize,
) -> Result<KernelIntegral> {
    let d = pk.spec().d;
    let rule = legendre(time_order);
    let mut value = DMatrix::zeros(d, d);
    let mut absolute = DMatrix::zeros(d, d);
    for &(a, b) in panels {
        for (u, wt) in rule.on(a, b) {
            let t = if adjoint { s - u } else { s + u };
            let profile = f.spatial_profile(t);
            let mut add = |h: DMatrix<f64>, w: f64| {
                for (k, v) in h.iter().enumerate() {
                    value[k] += w * v;
                    absolute[k] += (w * v).abs();
                }
            };
            if adjoint {
                integrate_backward(pk, t, s, x, profile.as_ref(), space_order, |g, y, wy| {
                    let fv = f.value(t, y);
                    if fv != 0.0 {
                        add(g.hess11(x)?, wt * wy * fv);
                    }
                    Ok(())
                })?;
            } else {
                integrate_forward(pk, s, t, x, profile.as_ref(), space_order, |g, y, wy| {
                    let fv = f.value(t, y);
                    if fv != 0.0 {
                        add(g.hess11(y)?, wt * wy * fv);
                    }
                    Ok(())
                })?;
            }
        }
    }
    Ok(KernelIntegral { value, absolute })
}

/// Evaluates on the panels and on a refinement (halved panels, Hermite order + 4);
/// returns the refined value and the largest relative change.
#[allow(clippy::too_many_arguments)]
fn refined_integral(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
    panels: &[(f64, f64)],
    adjoint: bool,
    space_order: usize,
) -> Result<(DMatrix<f64>, f64)> {
    let d = pk.spec().d;
    if panels.is_empty() || f.is_zero() {
        return Ok((DMatrix::zeros(d, d), 0.0));
    }
    let coarse = kernel_integral(pk, f, s, x, panels, adjoint, cfg.legendre_order, space_order)?;
    let fine = kernel_integral(pk, f, s, x, &split_panels(panels, 2), adjoint, cfg.legendre_order, space_order + 4)?;
    let mut worst: f64 = 0.0;
    for k in 0..d * d {
        worst = worst.max(relative_change(coarse.value[k], fine.value[k], fine.absolute[k]));
    }
    if worst > cfg.refinement_tolerance {
        return Err(Error::Accuracy {
            relative_change: worst,
            tolerance: cfg.refinement_tolerance,
        });
    }
    Ok((fine.value, worst))
}

fn check_entry(pk: &ProxyKernel, i: usize, j: usize) -> Result<()> {
    let d = pk.spec().d;
    if i >= d || j >= d {
        return Err(Error::Shape(format!("kernel entry ({i}, {j}) outside a {d}×{d} block")));
    }
    Ok(())
}

/// `∫∫_{t-s > ε²} k_{ij}(s, t, x, y) f(t, y) dy dt` over the strip `[0, horizon]`,
/// with dyadic time panels from `ε²` and whitened Gauss–Hermite in space.
/// `i, j` index the first block (0-based).
#[allow(clippy::too_many_arguments)]
pub fn truncated_integral(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
    eps: f64,
    i: usize,
    j: usize,
) -> Result<f64> {
    check_entry(pk, i, j)?;
    if !(eps > 0.0) {
        return Err(Error::Domain("truncation radius must be positive".into()));
    }
    let (a, b) = f.time_support();
    let panels = clip_panels(&dyadic_panels(eps * eps, cfg.horizon - s), a - s, b - s);
    Ok(refined_integral(cfg, pk, f, s, x, &panels, false, cfg.hermite_order)?.0[(i, j)])
}

/// The same for the adjoint kernel: `∫∫_{s-t > ε²} k(t, s, y, x)_{ij} f(t, y) dy dt`
/// over earlier times `t ∈ [0, s - ε²]`.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_truncated_integral(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
    eps: f64,
    i: usize,
    j: usize,
) -> Result<f64> {
    check_entry(pk, i, j)?;
    if !(eps > 0.0) {
        return Err(Error::Domain("truncation radius must be positive".into()));
    }
    let (a, b) = f.time_support();
    let panels = clip_panels(&dyadic_panels(eps * eps, s), s - b, s - a);
    Ok(refined_integral(cfg, pk, f, s, x, &panels, true, cfg.hermite_order)?.0[(i, j)])
}

/// Truncation over the exact region `d((s,x),(t,y)) > ε` for scalar models: the
/// time-truncated integral plus the part with `t - s < ε²` and `|θ_{t,s}(x) - y| > ε - √(t-s)`.
pub fn metric_truncated_integral_scalar(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
    eps: f64,
) -> Result<f64> {
    if pk.spec().dim() != 1 {
        return Err(Error::Usage("exact quasi-metric truncation is only implemented for scalar models".into()));
    }
    let outer = truncated_integral(cfg, pk, f, s, x, eps, 0, 0)?;
    let (a, b) = f.time_support();
    let gap = (eps * eps).min(cfg.horizon - s);
    let panels = clip_panels(&dyadic_towards_zero(gap, 40), a - s, b - s);
    let rule = legendre(cfg.legendre_order);
    let fine = legendre(16);
    let mut inner = 0.0;
    for &(pa, pb) in &panels {
        for (u, wt) in rule.on(pa, pb) {
            let t = s + u;
            let m = pk.solver().flow(t, s, x)?[0];
            let reference = pk.at(s, t, x, &[m])?;
            let sigma = reference.covariance()[(0, 0)].sqrt();
            let r = eps - u.sqrt();
            if r > 12.0 * sigma {
                continue;
            }
            // tails beyond ±r, in slices of half a standard deviation
            let pieces = 48;
            let h = 0.5 * sigma;
            let mut tail = 0.0;
            for side in [-1.0, 1.0] {
                for k in 0..pieces {
                    let lo = r + k as f64 * h;
                    for (v, wv) in fine.on(lo, lo + h) {
                        let y = [m + side * v];
                        let fv = f.value(t, &y);
                        if fv != 0.0 {
                            tail += wv * fv * kernel_value(pk, s, t, x, &y)?[(0, 0)];
                        }
                    }
                }
            }
            inner += wt * tail;
        }
    }
    Ok(outer + inner)
}

/// `D²_{x₁} G̃f(s, x)`: the untruncated singular integral, with dyadic time panels
/// refining towards the diagonal. Returns the matrix and the refinement change.
pub fn green_hessian(cfg: &SingularKernelConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64], space_order: usize) -> Result<(DMatrix<f64>, f64)> {
    let (a, b) = f.time_support();
    let panels = clip_panels(&dyadic_towards_zero(cfg.horizon - s, cfg.diagonal_levels), a - s, b - s);
    refined_integral(cfg, pk, f, s, x, &panels, false, space_order)
}

#[derive(Debug, Clone)]
pub struct CzRatio {
    pub ratio: f64,
    pub output_norm: f64,
    pub input_norm: f64,
    /// Frobenius norm of `D²_{x₁} G̃f` at the grid nodes
    pub field: GridField,
    pub max_relative_change: f64,
}

/// `‖D²_{x₁} G̃f‖_p / ‖f‖_p`, the numerator by a Riemann sum over `grid`.
pub fn cz_ratio(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    p: f64,
    grid: &StripGrid,
    space_order: usize,
) -> Result<CzRatio> {
    if !(p > 1.0) {
        return Err(Error::Domain("the exponent p must exceed 1".into()));
    }
    let mut field = GridField::zeros(grid.times.clone(), grid.axes.clone());
    if f.is_zero() {
        return Ok(CzRatio {
            ratio: 0.0,
            output_norm: 0.0,
            input_norm: 0.0,
            field,
            max_relative_change: 0.0,
        });
    }
    let mut worst: f64 = 0.0;
    for (k, (s, x)) in field.nodes().into_iter().enumerate() {
        if s >= cfg.horizon {
            continue;
        }
        let (h, change) = green_hessian(cfg, pk, f, s, &x, space_order)?;
        worst = worst.max(change);
        field.values[k] = h.norm();
    }
    let input_norm = match f.lp_norm(p) {
        Some(v) => v,
        None => GridField::sample(f, grid.times.clone(), grid.axes.clone()).lp_norm(p),
    };
    let output_norm = field.lp_norm(p);
    Ok(CzRatio {
        ratio: output_norm / input_norm,
        output_norm,
        input_norm,
        field,
        max_relative_change: worst,
    })
}

/// A pair `(s, x)`, `(t, y)` at displacement `r` along the flow, `t > s` (or `t < s`
/// when `backward`), inside the strip, with `x ∈ [-1, 1]^{nd}`.
fn draw_pair<R: Rng + ?Sized>(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    r: f64,
    backward: bool,
    rng: &mut R,
) -> Result<(f64, Vec<f64>, f64, Vec<f64>)> {
    let spec = pk.spec();
    let (n, d) = (spec.n, spec.d);
    let (tau, z) = loop {
        let (tau, z) = sample_on_sphere(rng, n, d, r);
        if tau.abs() < cfg.horizon {
            break (tau.abs(), z);
        }
    };
    let s = if backward {
        tau + rng.random::<f64>() * (cfg.horizon - tau)
    } else {
        rng.random::<f64>() * (cfg.horizon - tau)
    };
    let t = if backward { s - tau } else { s + tau };
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let theta = pk.solver().flow(t, s, &x)?;
    let y: Vec<f64> = theta.iter().zip(&z).map(|(a, b)| a - b).collect();
    Ok((s, x, t, y))
}

fn near_part(cfg: &SingularKernelConfig, pk: &ProxyKernel, s: f64, t: f64, x: &[f64], y: &[f64], adjoint: bool) -> Result<DMatrix<f64>> {
    Ok(if adjoint {
        split_kernel(cfg, pk, t, s, y, x)?.0
    } else {
        split_kernel(cfg, pk, s, t, x, y)?.0
    })
}

/// Radius uniform in `[floor, hi]`, the floor being where the last block still
/// resolves in double precision.
fn resolvable_radius<R: Rng + ?Sized>(pk: &ProxyKernel, hi: f64, rng: &mut R) -> f64 {
    let floor = resolvable_rho(pk.spec().n).min(0.5 * hi);
    floor + (hi - floor) * rng.random::<f64>()
}

fn homogeneous_degree(pk: &ProxyKernel) -> f64 {
    let spec = pk.spec();
    (spec.n * spec.n * spec.d + 2) as f64
}

/// Size estimate: `sup |near(s,t,x,y)|·d^{n²d+2}` over sampled pairs with `d < 2δ`.
pub fn size_statistic<R: Rng + ?Sized>(cfg: &SingularKernelConfig, pk: &ProxyKernel, samples: usize, adjoint: bool, rng: &mut R) -> Result<f64> {
    let q = homogeneous_degree(pk);
    let mut sup: f64 = 0.0;
    for _ in 0..samples {
        let r = resolvable_radius(pk, 2.0 * cfg.split_radius, rng);
        let (s, x, t, y) = draw_pair(cfg, pk, r, adjoint, rng)?;
        let near = near_part(cfg, pk, s, t, &x, &y, adjoint)?;
        sup = sup.max(near.norm() * r.powf(q));
    }
    Ok(sup)
}

/// Smoothness estimate: sup over triples with `c·d₁ ≤ d ≤ Λ` of
/// `|near(s,t,x,y) - near(σ,t,ξ,y)| / (d₁^η / d^{Q+η} + 1/d^{Q-η})`, `Q = n²d+2`.
pub fn smoothness_statistic<R: Rng + ?Sized>(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    samples: usize,
    adjoint: bool,
    rng: &mut R,
) -> Result<f64> {
    let spec = pk.spec();
    let (n, d) = (spec.n, spec.d);
    let q = homogeneous_degree(pk);
    let eta = cfg.holder_exponent;
    let mut sup: f64 = 0.0;
    let mut taken = 0;
    while taken < samples {
        let r = resolvable_radius(pk, cfg.lambda_cut, rng);
        let (s, x, t, y) = draw_pair(cfg, pk, r, adjoint, rng)?;
        let r1 = r / cfg.separation * rng.random::<f64>().max(1e-6);
        let (tau1, z1) = sample_on_sphere(rng, n, d, r1);
        let sigma = s + tau1;
        if !(0.0..=cfg.horizon).contains(&sigma) {
            continue;
        }
        taken += 1;
        let theta = pk.solver().flow(sigma, s, &x)?;
        let xi: Vec<f64> = theta.iter().zip(&z1).map(|(a, b)| a - b).collect();
        let a = near_part(cfg, pk, s, t, &x, &y, adjoint)?;
        let b = near_part(cfg, pk, sigma, t, &xi, &y, adjoint)?;
        let majorant = r1.powf(eta) / r.powf(q + eta) + 1.0 / r.powf(q - eta);
        sup = sup.max((a - b).norm() / majorant);
    }
    Ok(sup)
}

/// `(ε, truncated integral)` over the configured levels, for `k` at `(s, x)` or for
/// the adjoint kernel.
pub fn truncation_profile(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
    adjoint: bool,
) -> Result<Vec<(f64, f64)>> {
    cfg.truncation_levels
        .iter()
        .map(|&eps| {
            let v = if adjoint {
                adjoint_truncated_integral(cfg, pk, f, s, x, eps, 0, 0)?
            } else {
                truncated_integral(cfg, pk, f, s, x, eps, 0, 0)?
            };
            Ok((eps, v))
        })
        .collect()
}

/// `|v_{k+1} - v_k|` along a truncation profile.
pub fn successive_differences(profile: &[(f64, f64)]) -> Vec<f64> {
    profile.windows(2).map(|w| (w[1].1 - w[0].1).abs()).collect()
}

/// True when the differences are non-increasing, treating values below `floor` as zero.
pub fn differences_decrease(diffs: &[f64], floor: f64) -> bool {
    let clean: Vec<f64> = diffs.iter().map(|v| if *v < floor { 0.0 } else { *v }).collect();
    clean.windows(2).all(|w| w[1] <= w[0])
}

#[derive(Debug, Clone, Serialize)]
pub struct StandardEstimateReport {
    pub samples: usize,
    pub size: f64,
    pub smoothness: f64,
    pub adjoint_size: f64,
    pub adjoint_smoothness: f64,
    pub truncated: Vec<(f64, f64)>,
    pub adjoint_truncated: Vec<(f64, f64)>,
}

impl StandardEstimateReport {
    pub fn max_truncated(&self) -> f64 {
        self.truncated
            .iter()
            .chain(&self.adjoint_truncated)
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }

    pub fn statistics(&self) -> Vec<Statistic> {
        let mut rows = vec![
            Statistic::new("size", self.size, self.samples),
            Statistic::new("smoothness", self.smoothness, self.samples),
            Statistic::new("adjoint_size", self.adjoint_size, self.samples),
            Statistic::new("adjoint_smoothness", self.adjoint_smoothness, self.samples),
            Statistic::new("max_truncated", self.max_truncated(), self.truncated.len() + self.adjoint_truncated.len()),
        ];
        for (name, prof) in [("truncated", &self.truncated), ("adjoint_truncated", &self.adjoint_truncated)] {
            for (eps, v) in prof {
                rows.push(Statistic::new(format!("{name}[eps={eps}]"), *v, 1));
            }
            for (k, v) in successive_differences(prof).iter().enumerate() {
                rows.push(Statistic::new(format!("{name}_difference[{k}]"), *v, 1));
            }
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        statistics_to_csv(&self.statistics())
    }
}

/// Runs the size, smoothness and cancellation diagnostics for `k` and its adjoint.
/// Truncated integrals use `f ≡ 1` on the strip, at `(0, 0)` for `k` and at
/// `(horizon, 0)` for the adjoint.
pub fn standard_estimate_checks<R: Rng + ?Sized>(
    cfg: &SingularKernelConfig,
    pk: &ProxyKernel,
    samples: usize,
    rng: &mut R,
) -> Result<StandardEstimateReport> {
    cfg.validate()?;
    let one = crate::field::ConstantField::new(1.0, (0.0, cfg.horizon));
    let origin = vec![0.0; pk.spec().dim()];
    Ok(StandardEstimateReport {
        samples,
        size: size_statistic(cfg, pk, samples, false, rng)?,
        smoothness: smoothness_statistic(cfg, pk, samples, false, rng)?,
        adjoint_size: size_statistic(cfg, pk, samples, true, rng)?,
        adjoint_smoothness: smoothness_statistic(cfg, pk, samples, true, rng)?,
        truncated: truncation_profile(cfg, pk, &one, 0.0, &origin, false)?,
        adjoint_truncated: truncation_profile(cfg, pk, &one, cfg.horizon, &origin, true)?,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnvelopeFit {
    /// `sup |far| / q_c` over pairs with `d ≥ δ`
    pub far_constant: f64,
    /// `sup |k|·(t-s) / q_c` over pairs with `d ≤ 4δ`
    pub singularity_constant: f64,
    pub samples: usize,
}

/// Fits the constants of the far-part envelope and of the kernel singularity bound.
pub fn envelope_fit<R: Rng + ?Sized>(cfg: &SingularKernelConfig, pk: &ProxyKernel, samples: usize, rng: &mut R) -> Result<EnvelopeFit> {
    let delta = cfg.split_radius;
    let c = cfg.envelope_c;
    let mut far_constant: f64 = 0.0;
    let mut singularity_constant: f64 = 0.0;
    for _ in 0..samples {
        let r = delta * (1.0 + 3.0 * rng.random::<f64>());
        let (s, x, t, y) = draw_pair(cfg, pk, r, false, rng)?;
        let g = pk.at(s, t, &x, &y)?;
        let (_, far) = split_kernel(cfg, pk, s, t, &x, &y)?;
        far_constant = far_constant.max(far.norm() / g.comparison_kernel(&y, c)?);

        let r = resolvable_radius(pk, 4.0 * delta, rng);
        let (s, x, t, y) = draw_pair(cfg, pk, r, false, rng)?;
        let g = pk.at(s, t, &x, &y)?;
        let k = g.hess11(&y)?;
        singularity_constant = singularity_constant.max(k.norm() * (t - s) / g.comparison_kernel(&y, c)?);
    }
    Ok(EnvelopeFit {
        far_constant,
        singularity_constant,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, GaussianBumpField, ScaledField};
    use crate::model::model_by_name;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn kernel(name: &str) -> ProxyKernel {
        ProxyKernel::new(&model_by_name(name).unwrap())
    }

    #[test]
    fn cutoff_profile() {
        assert_eq!(cutoff(0.1, 0.25), 1.0);
        assert_eq!(cutoff(0.25, 0.25), 1.0);
        assert_eq!(cutoff(0.5, 0.25), 0.0);
        assert_eq!(cutoff(0.9, 0.25), 0.0);
        assert_relative_eq!(cutoff(0.375, 0.25), 0.5, max_relative = 1e-14);
        let mut prev = 1.0;
        for k in 0..=100 {
            let v = cutoff(0.25 + 0.0025 * k as f64, 0.25);
            assert!((0.0..=1.0).contains(&v) && v <= prev);
            prev = v;
        }
        // flat ends: one-sided difference quotients vanish
        let h = 1e-6;
        assert!((cutoff(0.25 + h, 0.25) - 1.0).abs() / h < 1e-8);
        assert!(cutoff(0.5 - h, 0.25) / h < 1e-8);
    }

    #[test]
    fn heat_kernel_at_peak() {
        let pk = kernel("brownian");
        let k = kernel_value(&pk, 0.0, 1.0, &[0.0], &[0.0]).unwrap();
        assert_relative_eq!(k[(0, 0)], -1.0 / (2.0 * PI).sqrt(), max_relative = 1e-12);
        assert_eq!(kernel_value(&pk, 1.0, 1.0, &[0.0], &[0.0]).unwrap()[(0, 0)], 0.0);
        assert_eq!(kernel_value(&pk, 1.0, 0.5, &[0.0], &[0.0]).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn kernel_matches_finite_difference() {
        for name in ["kolmogorov", "nonlinear-kolmogorov"] {
            let pk = kernel(name);
            let (s, t) = (0.1, 0.5);
            let x = [0.3, -0.2];
            let y = [0.35, -0.1];
            let h = 1e-4;
            // freeze stays at (t, y): differentiate in x only
            let q = |x1: f64| pk.at(s, t, &[x1, x[1]], &y).unwrap().density(&y).unwrap();
            let fd = (q(x[0] + h) - 2.0 * q(x[0]) + q(x[0] - h)) / (h * h);
            let k = kernel_value(&pk, s, t, &x, &y).unwrap()[(0, 0)];
            assert_relative_eq!(k, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn split_reconstructs_kernel() {
        let cfg = SingularKernelConfig::default();
        let pk = kernel("nonlinear-kolmogorov");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = rng.random::<f64>() * 0.8;
            let (s, x, t, y) = draw_pair(&cfg, &pk, r, false, &mut rng).unwrap();
            let k = kernel_value(&pk, s, t, &x, &y).unwrap();
            let (near, far) = split_kernel(&cfg, &pk, s, t, &x, &y).unwrap();
            let gap = (&near + &far - &k).norm();
            assert!(gap <= 4.0 * f64::EPSILON * k.norm());
            if r <= cfg.split_radius * (1.0 - 1e-9) {
                assert_eq!(far.norm(), 0.0);
            }
            if r >= 2.0 * cfg.split_radius * (1.0 + 1e-9) {
                assert_eq!(near.norm(), 0.0);
            }
        }
    }

    #[test]
    fn truncated_integral_of_zero_and_linearity() {
        let cfg = SingularKernelConfig::default();
        let pk = kernel("kolmogorov");
        let zero = ConstantField::new(0.0, (0.0, 1.0));
        assert_eq!(truncated_integral(&cfg, &pk, &zero, 0.0, &[0.0, 0.0], 0.2, 0, 0).unwrap(), 0.0);
        let bump = GaussianBumpField::new(1.0, vec![0.1, 0.0], vec![0.3, 0.2], (0.2, 0.7)).unwrap();
        let v = truncated_integral(&cfg, &pk, &bump, 0.0, &[0.0, 0.0], 0.2, 0, 0).unwrap();
        let scaled = ScaledField {
            factor: -2.5,
            inner: bump.clone(),
        };
        let w = truncated_integral(&cfg, &pk, &scaled, 0.0, &[0.0, 0.0], 0.2, 0, 0).unwrap();
        assert_relative_eq!(w, -2.5 * v, max_relative = 1e-12);
        assert!(v.abs() > 1e-3);
    }

    #[test]
    fn cancellation_on_heat_model() {
        let cfg = SingularKernelConfig::default();
        let pk = kernel("brownian");
        let one = ConstantField::new(1.0, (0.0, 1.0));
        let forward = truncation_profile(&cfg, &pk, &one, 0.0, &[0.3], false).unwrap();
        let backward = truncation_profile(&cfg, &pk, &one, 1.0, &[0.3], true).unwrap();
        for (_, v) in forward.iter().chain(&backward) {
            assert!(v.abs() < 1e-10, "{v}");
        }
        assert!(differences_decrease(&successive_differences(&forward), 1e-12));
    }

    #[test]
    fn exact_metric_truncation_keeps_a_constant_defect() {
        let cfg = SingularKernelConfig::default();
        let pk = kernel("brownian");
        let one = ConstantField::new(1.0, (0.0, 1.0));
        // ∫₀¹ 2(1-√v) φ_v(1-√v) / v dv, independent of ε by scaling
        let rule = legendre(16);
        let mut exact = 0.0;
        for (a, b) in dyadic_towards_zero(1.0, 40) {
            exact += rule.integrate(a, b, |v| {
                let r = 1.0 - v.sqrt();
                2.0 * r * (-(r * r) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt() / v
            });
        }
        for eps in [0.4, 0.2, 0.1] {
            let v = metric_truncated_integral_scalar(&cfg, &pk, &one, 0.0, &[0.0], eps).unwrap();
            assert_relative_eq!(v, exact, max_relative = 1e-6);
        }
        assert!(exact > 0.1);
        assert!(metric_truncated_integral_scalar(&cfg, &kernel("kolmogorov"), &one, 0.0, &[0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn adjoint_statistics_match_on_symmetric_kernel() {
        let cfg = SingularKernelConfig::default();
        let pk = kernel("brownian");
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let direct = size_statistic(&cfg, &pk, 2000, false, &mut a).unwrap();
        let adjoint = size_statistic(&cfg, &pk, 2000, true, &mut b).unwrap();
        assert_relative_eq!(direct, adjoint, max_relative = 1e-9);
        let mut a = ChaCha8Rng::seed_from_u64(10);
        let mut b = ChaCha8Rng::seed_from_u64(10);
        let direct = smoothness_statistic(&cfg, &pk, 2000, false, &mut a).unwrap();
        let adjoint = smoothness_statistic(&cfg, &pk, 2000, true, &mut b).unwrap();
        assert!(direct.is_finite() && adjoint.is_finite());
        assert!(direct / adjoint < 3.0 && adjoint / direct < 3.0);
    }

    #[test]
    fn size_statistic_is_stable() {
        let cfg = SingularKernelConfig::default();
        let pk = kernel("kolmogorov");
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let small = size_statistic(&cfg, &pk, 1000, false, &mut rng).unwrap();
        let large = size_statistic(&cfg, &pk, 10000, false, &mut rng).unwrap();
        assert!(small > 0.0 && large / small < 2.0 && small / large < 2.0);
    }

    #[test]
    fn envelopes_are_finite() {
        let cfg = SingularKernelConfig::default();
        let pk = kernel("nonlinear-kolmogorov");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let small = envelope_fit(&cfg, &pk, 1000, &mut rng).unwrap();
        let large = envelope_fit(&cfg, &pk, 5000, &mut rng).unwrap();
        assert!(small.far_constant.is_finite() && small.singularity_constant.is_finite());
        assert!(large.far_constant < 2.0 * small.far_constant.max(1e-300) || large.far_constant < 1e-6);
        assert!(large.singularity_constant < 2.0 * small.singularity_constant);
    }

    #[test]
    fn cz_ratio_zero_and_small_grid() {
        let mut cfg = SingularKernelConfig::default();
        cfg.diagonal_levels = 12;
        let pk = kernel("kolmogorov");
        let grid = StripGrid::uniform((0.3, 0.6), 3, &[(-0.5, 0.5), (-0.3, 0.3)], 5);
        let zero = ConstantField::new(0.0, (0.0, 1.0));
        assert_eq!(cz_ratio(&cfg, &pk, &zero, 2.0, &grid, 8).unwrap().ratio, 0.0);
        let bump = GaussianBumpField::homogeneous(1.0, 0.55, vec![0.0, 0.0], 1, 0.4).unwrap();
        let out = cz_ratio(&cfg, &pk, &bump, 2.0, &grid, 8).unwrap();
        assert!(out.ratio.is_finite() && out.ratio > 0.0);
        assert!(out.max_relative_change < cfg.refinement_tolerance);
    }
}
