//! The frozen Green operator `G̃`, the remainder `R = (L - L̃)G̃` with its
//! pieces `N` and `Rᵢ`, truncated Neumann inversion on a grid, and the backward
//! Kolmogorov residual of the proxy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calderon::{green_hessian, SingularKernelConfig};
use crate::error::{Error, Result};
use crate::field::{GaussianBumpField, GridField, SpaceTimeField};
use crate::kernel::{FrozenGaussian, ProxyKernel};
use crate::metric::StripGrid;
use crate::model::ChainSpec;
use crate::quadrature::{dyadic_towards_zero, legendre};
use crate::spatial::{clip_panels, integrate_forward, relative_change, split_panels};
use crate::stats::linear_fit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreenConfig {
    pub horizon: f64,
    pub legendre_order: usize,
    pub hermite_order: usize,
    /// dyadic time levels towards `t = s`
    pub diagonal_levels: usize,
    pub refinement_tolerance: f64,
    pub neumann_depth: usize,
    /// exponent of the `L^p` norms
    pub exponent: f64,
}

impl Default for GreenConfig {
    fn default() -> Self {
        GreenConfig {
            horizon: 1.0,
            legendre_order: 8,
            hermite_order: 20,
            diagonal_levels: 12,
            refinement_tolerance: 1e-3,
            neumann_depth: 3,
            exponent: 2.0,
        }
    }
}

impl GreenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.horizon > 0.0 && self.horizon <= 1.0) {
            return bad("horizon must lie in (0, 1]");
        }
        if self.legendre_order < 2 || self.hermite_order < 2 {
            return bad("quadrature orders must be at least 2");
        }
        if !(self.refinement_tolerance > 0.0) {
            return bad("refinement_tolerance must be positive");
        }
        if !(self.exponent > 1.0) {
            return bad("exponent must exceed 1");
        }
        Ok(())
    }

    fn singular(&self) -> SingularKernelConfig {
        SingularKernelConfig {
            horizon: self.horizon,
            legendre_order: self.legendre_order,
            hermite_order: self.hermite_order,
            diagonal_levels: self.diagonal_levels,
            refinement_tolerance: self.refinement_tolerance,
            ..SingularKernelConfig::default()
        }
    }
}

/// Integrand hook: receives the frozen Gaussian for the node, `t`, `y`, and writes
/// the per-component values multiplying `f(t, y)`.
type Integrand<'a> = dyn Fn(&FrozenGaussian, f64, &[f64], &mut [f64]) -> Result<()> + 'a;

fn panel_sum(
    cfg: &GreenConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
    panels: &[(f64, f64)],
    space_order: usize,
    width: usize,
    integrand: &Integrand,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rule = legendre(cfg.legendre_order);
    let mut value = vec![0.0; width];
    let mut absolute = vec![0.0; width];
    let mut buf = vec![0.0; width];
    for &(a, b) in panels {
        for (u, wt) in rule.on(a, b) {
            let t = s + u;
            let profile = f.spatial_profile(t);
            integrate_forward(pk, s, t, x, profile.as_ref(), space_order, |g, y, wy| {
                let fv = f.value(t, y);
                if fv == 0.0 {
                    return Ok(());
                }
                integrand(g, t, y, &mut buf)?;
                for k in 0..width {
                    let c = wt * wy * fv * buf[k];
                    value[k] += c;
                    absolute[k] += c.abs();
                }
                Ok(())
            })?;
        }
    }
    Ok((value, absolute))
}

/// Coarse and refined values of one integral, with the absolute integral used to
/// scale the refinement change.
#[derive(Debug, Clone)]
struct Refined {
    coarse: Vec<f64>,
    fine: Vec<f64>,
    absolute: Vec<f64>,
}

impl Refined {
    fn zero(width: usize) -> Self {
        Refined {
            coarse: vec![0.0; width],
            fine: vec![0.0; width],
            absolute: vec![0.0; width],
        }
    }

    fn checked(self, tolerance: f64) -> Result<Vec<f64>> {
        let worst = (0..self.fine.len())
            .map(|k| relative_change(self.coarse[k], self.fine[k], self.absolute[k]))
            .fold(0.0, f64::max);
        if worst > tolerance {
            return Err(Error::Accuracy {
                relative_change: worst,
                tolerance,
            });
        }
        Ok(self.fine)
    }
}

/// `∫_s^T ∫ (integrand)·f dy dt` at two refinement levels.
fn operator_integral(
    cfg: &GreenConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
    width: usize,
    integrand: &Integrand,
) -> Result<Refined> {
    pk.spec().check_point(x)?;
    if f.is_zero() || s >= cfg.horizon {
        return Ok(Refined::zero(width));
    }
    let (a, b) = f.time_support();
    let panels = clip_panels(&dyadic_towards_zero(cfg.horizon - s, cfg.diagonal_levels), a - s, b - s);
    if panels.is_empty() {
        return Ok(Refined::zero(width));
    }
    let (coarse, _) = panel_sum(cfg, pk, f, s, x, &panels, cfg.hermite_order, width, integrand)?;
    let (fine, absolute) = panel_sum(cfg, pk, f, s, x, &split_panels(&panels, 2), cfg.hermite_order + 4, width, integrand)?;
    Ok(Refined { coarse, fine, absolute })
}

/// `G̃f(s, x) = ∫_s^T ∫ q̃(s, t, x, y) f(t, y) dy dt`.
pub fn green(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64]) -> Result<f64> {
    Ok(green_refined(cfg, pk, f, s, x)?.checked(cfg.refinement_tolerance)?[0])
}

fn green_refined(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64]) -> Result<Refined> {
    let integrand = |g: &FrozenGaussian, _t: f64, y: &[f64], out: &mut [f64]| {
        out[0] = g.density(y)?;
        Ok(())
    };
    operator_integral(cfg, pk, f, s, x, 1, &integrand)
}


/// `θ_{s,t}(y)` with block `b` (0-based) replaced by the same block of `x`.
fn hybrid(theta: &[f64], x: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut z = theta.to_vec();
    z[b * d..(b + 1) * d].copy_from_slice(&x[b * d..(b + 1) * d]);
    z
}

/// `(F - F^{t,y})(s, x)`: block `i` compares `F_i` at `x` with `F_i` at the
/// characteristic point whose transmitting block is taken from `x`.
fn drift_gap(spec: &ChainSpec, s: f64, x: &[f64], theta: &[f64]) -> DVector<f64> {
    let (n, d) = (spec.n, spec.d);
    let fx = spec.drift(s, x);
    let mut out = DVector::zeros(n * d);
    for i in 0..n {
        let frozen = if i == 0 {
            spec.drift(s, theta)
        } else {
            spec.drift(s, &hybrid(theta, x, i - 1, d))
        };
        for k in 0..d {
            out[i * d + k] = fx[i * d + k] - frozen[i * d + k];
        }
    }
    out
}

/// `F_i^{t,y}(s, x) - F_i(s, θ) - D_{x_{i-1}} F_i(s, θ)(x - θ)_{i-1}` for block `i ≥ 1`
/// (0-based), the second-order remainder in the transmitting variable.
fn transmission_remainder(spec: &ChainSpec, s: f64, x: &[f64], theta: &[f64], i: usize) -> DVector<f64> {
    let d = spec.d;
    let fz = spec.drift(s, &hybrid(theta, x, i - 1, d));
    let ft = spec.drift(s, theta);
    let jac = spec.transmission_block(s, theta, i);
    let gap = DVector::from_iterator(d, (0..d).map(|k| x[(i - 1) * d + k] - theta[(i - 1) * d + k]));
    let lin = jac * gap;
    DVector::from_fn(d, |k, _| fz[i * d + k] - ft[i * d + k] - lin[k])
}

fn check_block(spec: &ChainSpec, i: usize) -> Result<()> {
    if i < 2 || i > spec.n {
        return Err(Error::Usage(format!("transmission block {i} outside 2..={}", spec.n)));
    }
    Ok(())
}

/// `Nf(s, x) = Σᵢ ∫∫ ⟨(F - F^{t,y})(s, x)ᵢ, D_{xᵢ} q̃⟩ f`.
pub fn perturbation_n(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64]) -> Result<f64> {
    Ok(perturbation_n_refined(cfg, pk, f, s, x)?.checked(cfg.refinement_tolerance)?[0])
}

fn perturbation_n_refined(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64]) -> Result<Refined> {
    let spec = pk.spec();
    let integrand = |g: &FrozenGaussian, _t: f64, y: &[f64], out: &mut [f64]| {
        let gap = drift_gap(spec, s, x, g.characteristic_at_start().as_slice());
        out[0] = gap.dot(&g.derivatives(y)?.gradient);
        Ok(())
    };
    operator_integral(cfg, pk, f, s, x, 1, &integrand)
}


/// `Rᵢf(s, x) = ∫∫ q̃ f {F_i^{t,y}(s,x) - F_i(s,θ) - D_{x_{i-1}}F_i(s,θ)(x-θ)_{i-1}}`,
/// a vector in block `i` (1-based, `2 ≤ i ≤ n`).
pub fn perturbation_ri(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64], i: usize) -> Result<DVector<f64>> {
    let spec = pk.spec();
    check_block(spec, i)?;
    let integrand = |g: &FrozenGaussian, _t: f64, y: &[f64], out: &mut [f64]| {
        let r = transmission_remainder(spec, s, x, g.characteristic_at_start().as_slice(), i - 1);
        let q = g.density(y)?;
        for k in 0..spec.d {
            out[k] = q * r[k];
        }
        Ok(())
    };
    Ok(DVector::from_vec(operator_integral(cfg, pk, f, s, x, spec.d, &integrand)?.checked(cfg.refinement_tolerance)?))
}

/// `D_{xᵢ}·Rᵢf(s, x)`; the bracket does not depend on `xᵢ`, so the derivative
/// falls on `q̃` only.
pub fn perturbation_div_ri(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64], i: usize) -> Result<f64> {
    Ok(perturbation_div_ri_refined(cfg, pk, f, s, x, i)?.checked(cfg.refinement_tolerance)?[0])
}

fn perturbation_div_ri_refined(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64], i: usize) -> Result<Refined> {
    let spec = pk.spec();
    check_block(spec, i)?;
    let d = spec.d;
    let integrand = |g: &FrozenGaussian, _t: f64, y: &[f64], out: &mut [f64]| {
        let r = transmission_remainder(spec, s, x, g.characteristic_at_start().as_slice(), i - 1);
        let grad = g.derivatives(y)?.gradient;
        out[0] = (0..d).map(|k| r[k] * grad[(i - 1) * d + k]).sum();
        Ok(())
    };
    operator_integral(cfg, pk, f, s, x, 1, &integrand)
}


/// `Rf(s, x) = ∫∫ (L_s - L̃_s^{t,y}) q̃(s, t, x, y) f(t, y) dy dt`, from the drift
/// difference against `∇q̃` and `½ tr((a(s,x) - ς(s)) D²_{x₁} q̃)`.
pub fn remainder_r(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64]) -> Result<f64> {
    Ok(remainder_r_refined(cfg, pk, f, s, x)?.checked(cfg.refinement_tolerance)?[0])
}

fn remainder_r_refined(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64]) -> Result<Refined> {
    let spec = pk.spec();
    let fx = spec.drift(s, x);
    let xv = DVector::from_column_slice(x);
    let gap_a = spec.diffusion(s, x) - spec.frozen_diffusion(s);
    let diffusion_gap = gap_a.iter().any(|v| *v != 0.0);
    let integrand = |g: &FrozenGaussian, _t: f64, y: &[f64], out: &mut [f64]| {
        let th = g.characteristic_at_start();
        let lin = spec.drift(s, th.as_slice()) + spec.transmission_matrix(s, th.as_slice()) * (&xv - th);
        let der = g.derivatives(y)?;
        let mut v = (&fx - lin).dot(&der.gradient);
        if diffusion_gap {
            v += 0.5 * (&gap_a * &der.hessian11).trace();
        }
        out[0] = v;
        Ok(())
    };
    operator_integral(cfg, pk, f, s, x, 1, &integrand)
}


/// The pieces of `Rf(s, x)`: `(Nf, [D_{xᵢ}·Rᵢf]_{i=2..n}, ½ tr((a - ς) D²_{x₁}G̃f))`.
pub fn remainder_decomposition(
    cfg: &GreenConfig,
    pk: &ProxyKernel,
    f: &dyn SpaceTimeField,
    s: f64,
    x: &[f64],
) -> Result<(f64, Vec<f64>, f64)> {
    let spec = pk.spec();
    let n_term = perturbation_n(cfg, pk, f, s, x)?;
    let r_terms = (2..=spec.n)
        .map(|i| perturbation_div_ri(cfg, pk, f, s, x, i))
        .collect::<Result<Vec<_>>>()?;
    let gap_a = spec.diffusion(s, x) - spec.frozen_diffusion(s);
    let diffusion = if gap_a.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        let (h, _) = green_hessian(&cfg.singular(), pk, f, s, x, cfg.hermite_order)?;
        0.5 * (&gap_a * h).trace()
    };
    Ok((n_term, r_terms, diffusion))
}

/// Operators that can be tabulated on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Green,
    N,
    /// `D_{xᵢ}·Rᵢ`, block index 1-based
    DivR(usize),
    Remainder,
}

fn apply_refined(cfg: &GreenConfig, pk: &ProxyKernel, op: Operator, f: &dyn SpaceTimeField, s: f64, x: &[f64]) -> Result<Refined> {
    match op {
        Operator::Green => green_refined(cfg, pk, f, s, x),
        Operator::N => perturbation_n_refined(cfg, pk, f, s, x),
        Operator::DivR(i) => perturbation_div_ri_refined(cfg, pk, f, s, x, i),
        Operator::Remainder => remainder_r_refined(cfg, pk, f, s, x),
    }
}

pub fn apply(cfg: &GreenConfig, pk: &ProxyKernel, op: Operator, f: &dyn SpaceTimeField, s: f64, x: &[f64]) -> Result<f64> {
    Ok(apply_refined(cfg, pk, op, f, s, x)?.checked(cfg.refinement_tolerance)?[0])
}

/// `op f` at every node of `grid` (zero at `s ≥ horizon`).
///
/// The refinement check is made on the whole table: the largest change between
/// the two levels must stay below the tolerance times the largest refined value.
/// Tabulated inputs are only piecewise multilinear, so node values near zero
/// cannot be resolved to a fixed relative accuracy, while the grid norms can.
pub fn apply_on_grid(cfg: &GreenConfig, pk: &ProxyKernel, op: Operator, f: &dyn SpaceTimeField, grid: &StripGrid) -> Result<GridField> {
    let mut out = GridField::zeros(grid.times.clone(), grid.axes.clone());
    let mut change: f64 = 0.0;
    for (k, (s, x)) in out.nodes().into_iter().enumerate() {
        let r = apply_refined(cfg, pk, op, f, s, &x)?;
        change = change.max((r.coarse[0] - r.fine[0]).abs());
        out.values[k] = r.fine[0];
    }
    let scale = out.max_abs();
    if scale > 0.0 && change > cfg.refinement_tolerance * scale {
        return Err(Error::Accuracy {
            relative_change: change / scale,
            tolerance: cfg.refinement_tolerance,
        });
    }
    Ok(out)
}

/// `‖op f‖_p / ‖f‖_p`, both as Riemann sums on `grid`.
pub fn operator_ratio(cfg: &GreenConfig, pk: &ProxyKernel, op: Operator, f: &dyn SpaceTimeField, grid: &StripGrid) -> Result<f64> {
    let input = GridField::sample(f, grid.times.clone(), grid.axes.clone()).lp_norm(cfg.exponent);
    if input == 0.0 {
        return Ok(0.0);
    }
    Ok(apply_on_grid(cfg, pk, op, f, grid)?.lp_norm(cfg.exponent) / input)
}

/// Truncated Neumann series `Σ_{k≤m} R^k f` on a grid.
#[derive(Debug, Clone)]
pub struct NeumannSeries {
    /// `R^k f` for `k = 1..=m`, tabulated on the grid
    pub terms: Vec<GridField>,
    /// `Σ_{k=1..m} R^k f` on the grid
    pub correction: GridField,
    /// `‖(I - R)(Σ_{k≤j} R^k f) - f‖_p = ‖R^{j+1} f‖_p` for `j = 0..=m`
    pub residuals: Vec<f64>,
    /// `‖R^{k+1} f‖_p / ‖R^k f‖_p` for `k = 0..=m`
    pub ratios: Vec<f64>,
    pub input_norm: f64,
}

impl NeumannSeries {
    pub fn depth(&self) -> usize {
        self.terms.len()
    }

    /// Largest observed contraction ratio, the empirical `‖R‖`.
    pub fn norm_estimate(&self) -> f64 {
        self.ratios.iter().cloned().fold(0.0, f64::max)
    }
}

/// `‖R g‖ / ‖g‖`, refusing ratios of at least one.
pub fn contraction_ratio(before: f64, after: f64) -> Result<f64> {
    let ratio = if before > 0.0 { after / before } else { 0.0 };
    if ratio >= 1.0 {
        return Err(Error::DivergentSeries { norm: ratio });
    }
    Ok(ratio)
}

/// Iterates `g_{k+1} = R g_k` on the grid starting from `g_0 = f` (evaluated exactly)
/// and stops with a divergent-series error as soon as a step fails to contract.
pub fn neumann_apply(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, grid: &StripGrid, depth: usize) -> Result<NeumannSeries> {
    cfg.validate()?;
    let p = cfg.exponent;
    let input_norm = GridField::sample(f, grid.times.clone(), grid.axes.clone()).lp_norm(p);
    let mut correction = GridField::zeros(grid.times.clone(), grid.axes.clone());
    let mut terms = Vec::with_capacity(depth);
    let mut residuals = Vec::with_capacity(depth + 1);
    let mut ratios = Vec::with_capacity(depth + 1);
    let mut prev_norm = input_norm;
    let mut next = apply_on_grid(cfg, pk, Operator::Remainder, f, grid)?;
    for k in 0..=depth {
        let norm = next.lp_norm(p);
        ratios.push(contraction_ratio(prev_norm, norm)?);
        residuals.push(norm);
        if k == depth {
            break;
        }
        for (c, v) in correction.values.iter_mut().zip(&next.values) {
            *c += v;
        }
        prev_norm = norm;
        let following = if norm == 0.0 {
            GridField::zeros(grid.times.clone(), grid.axes.clone())
        } else {
            apply_on_grid(cfg, pk, Operator::Remainder, &next, grid)?
        };
        terms.push(std::mem::replace(&mut next, following));
    }
    Ok(NeumannSeries {
        terms,
        correction,
        residuals,
        ratios,
        input_norm,
    })
}

/// `G̃(Σ_{k≤m} R^k f)(s, x)`: `G̃f` plus `G̃` of the tabulated correction.
pub fn green_full(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, series: &NeumannSeries, s: f64, x: &[f64]) -> Result<f64> {
    let base = green(cfg, pk, f, s, x)?;
    if series.terms.is_empty() || series.correction.is_zero() {
        return Ok(base);
    }
    Ok(base + green(cfg, pk, &series.correction, s, x)?)
}

fn generator_residual(spec: &ChainSpec, g: &FrozenGaussian, y: &[f64], ds: f64) -> Result<f64> {
    let (s, _) = g.span();
    let th = g.characteristic_at_start();
    let x = g.start();
    let lin = spec.drift(s, th.as_slice()) + spec.transmission_matrix(s, th.as_slice()) * (x - th);
    let der = g.derivatives(y)?;
    Ok(ds + lin.dot(&der.gradient) + 0.5 * (spec.frozen_diffusion(s) * &der.hessian11).trace())
}

/// `|(∂_s + L̃_s^{t,y}) q̃(s, t, x, y)|·(t - s)^{n²d/2}`, with `∂_s` by central
/// differences of step `h`; fails when halving `h` does not shrink a residual that
/// sits above rounding level.
pub fn backward_pde_residual(pk: &ProxyKernel, s: f64, t: f64, x: &[f64], y: &[f64], h: f64) -> Result<f64> {
    let (r, noise) = fd_residual(pk, s, t, x, y, h)?;
    if r > noise {
        let (half, _) = fd_residual(pk, s, t, x, y, 0.5 * h)?;
        if half > 0.5 * r && half > noise {
            return Err(Error::StepSize { ratio: half / r });
        }
    }
    Ok(r)
}

/// Normalized residual and its rounding-noise floor.
fn fd_residual(pk: &ProxyKernel, s: f64, t: f64, x: &[f64], y: &[f64], h: f64) -> Result<(f64, f64)> {
    if !(h > 0.0) || s + h >= t {
        return Err(Error::Domain(format!("step {h} must be positive and below t - s")));
    }
    let spec = pk.spec();
    let scale = (t - s).powf((spec.n * spec.n * spec.d) as f64 / 2.0);
    let up = pk.at(s + h, t, x, y)?.density(y)?;
    let down = pk.at(s - h, t, x, y)?.density(y)?;
    let ds = (up - down) / (2.0 * h);
    let g = pk.at(s, t, x, y)?;
    let r = generator_residual(spec, &g, y, ds)?;
    let noise = 1e3 * f64::EPSILON * (up.abs() + down.abs()) / h * scale;
    Ok((r.abs() * scale, noise))
}

/// Observed order `log₂(r(h)/r(h/2))` of the finite-difference residual.
pub fn residual_order(pk: &ProxyKernel, s: f64, t: f64, x: &[f64], y: &[f64], h: f64) -> Result<f64> {
    let (a, _) = fd_residual(pk, s, t, x, y, h)?;
    let (b, _) = fd_residual(pk, s, t, x, y, 0.5 * h)?;
    Ok((a / b).log2())
}

/// The same residual with the analytic time derivative.
pub fn backward_pde_residual_analytic(pk: &ProxyKernel, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let spec = pk.spec();
    let g = pk.at(s, t, x, y)?;
    let ds = g.time_derivative(spec, y)?;
    let scale = (t - s).powf((spec.n * spec.n * spec.d) as f64 / 2.0);
    Ok(generator_residual(spec, &g, y, ds)?.abs() * scale)
}

/// `-(∂_s + L_s) G̃f(s, x)` by central differences of step `h` in `s` and `x`.
pub fn green_generator(cfg: &GreenConfig, pk: &ProxyKernel, f: &dyn SpaceTimeField, s: f64, x: &[f64], h: f64) -> Result<f64> {
    let spec = pk.spec();
    let dim = spec.dim();
    let d = spec.d;
    let at = |s: f64, x: &[f64]| green(cfg, pk, f, s, x);
    let center = at(s, x)?;
    let ds = (at(s + h, x)? - at(s - h, x)?) / (2.0 * h);
    let drift = spec.drift(s, x);
    let a = spec.diffusion(s, x);
    let shifted = |k: usize, v: f64| {
        let mut z = x.to_vec();
        z[k] += v;
        z
    };
    let mut grad = vec![0.0; dim];
    for (k, g) in grad.iter_mut().enumerate() {
        *g = (at(s, &shifted(k, h))? - at(s, &shifted(k, -h))?) / (2.0 * h);
    }
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            hess[(i, j)] = if i == j {
                (at(s, &shifted(i, h))? - 2.0 * center + at(s, &shifted(i, -h))?) / (h * h)
            } else {
                let mut z = x.to_vec();
                let mut corner = |si: f64, sj: f64| -> Result<f64> {
                    z.copy_from_slice(x);
                    z[i] += si * h;
                    z[j] += sj * h;
                    at(s, &z)
                };
                (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * h * h)
            };
        }
    }
    let transport: f64 = drift.iter().zip(&grad).map(|(a, b)| a * b).sum();
    Ok(-(ds + transport + 0.5 * (a * hess).trace()))
}

/// Fitted exponent of `|G̃f(0, 0)| / ‖f‖_p` against the horizon, for bumps dilated
/// with the horizon (`λ² = T/2`, time window centered at `T/2`); returns
/// `(fitted, 1 - (2 + n²d)/(2p))`.
pub fn pointwise_bound_exponent(cfg: &GreenConfig, pk: &ProxyKernel, p: f64, horizons: &[f64]) -> Result<(f64, f64)> {
    let spec = pk.spec();
    if horizons.len() < 2 {
        return Err(Error::InsufficientData("need at least two horizons".into()));
    }
    let origin = vec![0.0; spec.dim()];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &horizon in horizons {
        let local = GreenConfig {
            horizon,
            ..cfg.clone()
        };
        let bump = GaussianBumpField::homogeneous(1.0, 0.5 * horizon, origin.clone(), spec.d, (0.5 * horizon).sqrt())?;
        let value = green(&local, pk, &bump, 0.0, &origin)?;
        let norm = bump.lp_norm(p).expect("bump norms are closed form");
        xs.push(horizon.ln());
        ys.push((value.abs() / norm).ln());
    }
    let expected = 1.0 - (2.0 + (spec.n * spec.n * spec.d) as f64) / (2.0 * p);
    Ok((linear_fit(&xs, &ys).slope, expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, ScaledField};
    use crate::model::{model_by_name, nonlinear_kolmogorov_modulated};
    use approx::assert_relative_eq;

    fn kernel(name: &str) -> ProxyKernel {
        ProxyKernel::new(&model_by_name(name).unwrap())
    }

    fn coarse(spec: &ChainSpec) -> ProxyKernel {
        ProxyKernel::with_solver(crate::flow::FlowSolver::with_steps(spec, 32))
    }

    fn light() -> GreenConfig {
        GreenConfig {
            hermite_order: 8,
            legendre_order: 4,
            diagonal_levels: 5,
            refinement_tolerance: 1e-2,
            ..GreenConfig::default()
        }
    }

    #[test]
    fn green_of_one_is_remaining_time() {
        let cfg = GreenConfig::default();
        let pk = kernel("kolmogorov");
        let one = ConstantField::new(1.0, (0.0, 1.0));
        for (s, x) in [(0.0, [0.0, 0.0]), (0.3, [1.0, -0.5]), (0.9, [-2.0, 3.0])] {
            assert_relative_eq!(green(&cfg, &pk, &one, s, &x).unwrap(), 1.0 - s, max_relative = 1e-6);
        }
        let zero = ConstantField::new(0.0, (0.0, 1.0));
        assert_eq!(green(&cfg, &pk, &zero, 0.0, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn kolmogorov_perturbations_vanish() {
        let cfg = GreenConfig::default();
        let pk = kernel("kolmogorov");
        let bump = GaussianBumpField::new(1.0, vec![0.2, -0.1], vec![0.3, 0.2], (0.2, 0.8)).unwrap();
        let x = [0.1, 0.3];
        assert!(perturbation_n(&cfg, &pk, &bump, 0.1, &x).unwrap().abs() < 1e-8);
        assert!(perturbation_ri(&cfg, &pk, &bump, 0.1, &x, 2).unwrap().norm() < 1e-8);
        assert!(remainder_r(&cfg, &pk, &bump, 0.1, &x).unwrap().abs() < 1e-8);
        assert!(perturbation_ri(&cfg, &pk, &bump, 0.1, &x, 1).is_err());
    }

    #[test]
    fn decomposition_identity_on_modulated_model() {
        let cfg = light();
        let pk = coarse(&nonlinear_kolmogorov_modulated(0.2).unwrap());
        let bump = GaussianBumpField::new(1.0, vec![0.2, 0.0], vec![0.5, 0.5], (0.3, 0.8)).unwrap();
        let x = [0.4, -0.2];
        let r = remainder_r(&cfg, &pk, &bump, 0.1, &x).unwrap();
        let (n, ri, diff) = remainder_decomposition(&cfg, &pk, &bump, 0.1, &x).unwrap();
        assert!(r.abs() > 1e-6);
        assert_relative_eq!(r, n + ri.iter().sum::<f64>() + diff, max_relative = 1e-2);
    }

    #[test]
    fn div_ri_matches_derivative_of_ri() {
        let cfg = light();
        let pk = coarse(&model_by_name("nonlinear-kolmogorov").unwrap());
        let bump = GaussianBumpField::new(1.0, vec![0.0, 0.0], vec![0.5, 0.5], (0.3, 0.8)).unwrap();
        let x = [0.5, 0.1];
        let h = 1e-3;
        let ri = |x2: f64| perturbation_ri(&cfg, &pk, &bump, 0.1, &[x[0], x2], 2).unwrap()[0];
        let fd = (ri(x[1] + h) - ri(x[1] - h)) / (2.0 * h);
        let div = perturbation_div_ri(&cfg, &pk, &bump, 0.1, &x, 2).unwrap();
        assert!(div.abs() > 1e-6);
        assert_relative_eq!(div, fd, max_relative = 2e-2);
    }

    #[test]
    fn operators_are_linear() {
        let cfg = light();
        let pk = coarse(&model_by_name("nonlinear-kolmogorov").unwrap());
        let bump = GaussianBumpField::new(1.0, vec![0.0, 0.0], vec![0.5, 0.5], (0.3, 0.8)).unwrap();
        let scaled = ScaledField {
            factor: 3.0,
            inner: bump.clone(),
        };
        for op in [Operator::Green, Operator::N, Operator::DivR(2), Operator::Remainder] {
            let a = apply(&cfg, &pk, op, &bump, 0.1, &[0.2, 0.1]).unwrap();
            let b = apply(&cfg, &pk, op, &scaled, 0.1, &[0.2, 0.1]).unwrap();
            assert_relative_eq!(b, 3.0 * a, max_relative = 1e-12);
        }
    }

    #[test]
    fn heat_kernel_solves_backward_equation() {
        let pk = kernel("brownian");
        assert!(backward_pde_residual_analytic(&pk, 0.2, 0.9, &[0.3], &[-0.1]).unwrap() < 1e-8);
    }

    #[test]
    fn kolmogorov_backward_residual() {
        let pk = kernel("kolmogorov");
        let (s, t, x, y) = (0.2, 0.7, [0.3, -0.2], [0.4, 0.0]);
        assert!(backward_pde_residual(&pk, s, t, &x, &y, 1e-5).unwrap() <= 1e-4);
        let order = residual_order(&pk, s, t, &x, &y, 2e-2).unwrap();
        assert!((order - 2.0).abs() < 0.1, "{order}");
        assert!(backward_pde_residual_analytic(&pk, s, t, &x, &y).unwrap() < 1e-10);
    }

    #[test]
    fn neumann_is_trivial_without_remainder() {
        let cfg = light();
        let pk = kernel("kolmogorov");
        let bump = GaussianBumpField::new(1.0, vec![0.0, 0.0], vec![0.4, 0.4], (0.4, 0.8)).unwrap();
        let grid = StripGrid::uniform((0.0, 0.8), 3, &[(-1.0, 1.0), (-1.0, 1.0)], 3);
        let series = neumann_apply(&cfg, &pk, &bump, &grid, 2).unwrap();
        assert!(series.residuals.iter().all(|r| *r == 0.0));
        let base = green(&cfg, &pk, &bump, 0.1, &[0.1, 0.0]).unwrap();
        assert_eq!(green_full(&cfg, &pk, &bump, &series, 0.1, &[0.1, 0.0]).unwrap(), base);
    }

    #[test]
    fn contraction_gate() {
        assert_eq!(contraction_ratio(2.0, 1.0).unwrap(), 0.5);
        assert_eq!(contraction_ratio(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(contraction_ratio(1.0, 1.5), Err(Error::DivergentSeries { norm }) if norm == 1.5));
    }

    #[test]
    fn neumann_residual_contracts_on_modulated_model() {
        // 8-point Hermite resolves the tabulated iterate to a few percent only
        let cfg = GreenConfig {
            refinement_tolerance: 5e-2,
            ..light()
        };
        let pk = coarse(&nonlinear_kolmogorov_modulated(0.3).unwrap());
        let bump = GaussianBumpField::new(1.0, vec![0.0, 0.0], vec![0.5, 0.5], (0.3, 0.6)).unwrap();
        let grid = StripGrid::uniform((0.0, 0.6), 3, &[(-1.5, 1.5), (-1.5, 1.5)], 4);
        let series = neumann_apply(&cfg, &pk, &bump, &grid, 1).unwrap();
        assert_eq!(series.depth(), 1);
        assert!(series.residuals[1] < series.residuals[0]);
        assert!(series.norm_estimate() < 1.0);
    }

    #[test]
    fn pointwise_exponent_on_kolmogorov() {
        let cfg = GreenConfig::default();
        let pk = kernel("kolmogorov");
        let (fitted, expected) = pointwise_bound_exponent(&cfg, &pk, 4.0, &[0.2, 0.4, 0.8]).unwrap();
        assert!((fitted - expected).abs() <= 0.1 * expected.abs(), "{fitted} vs {expected}");
    }
}
