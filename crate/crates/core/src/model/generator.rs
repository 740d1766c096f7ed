//! The generator `⟨F, ∇φ⟩ + ½ tr(a D²_{x₁}φ)` applied to test functions.

use nalgebra::DMatrix;

use super::ChainSpec;
use crate::error::{Error, Result};

/// A scalar field `φ(t, x)`. Derivative hooks return `false` when no
/// analytic form is available, in which case central differences are used.
pub trait TestFunction: Send + Sync {
    fn value(&self, t: f64, x: &[f64]) -> f64;

    fn gradient(&self, _t: f64, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Row-major `d×d` Hessian with respect to the first block.
    fn hessian_first_block(&self, _t: f64, _x: &[f64], _d: usize, _out: &mut [f64]) -> bool {
        false
    }

    fn time_derivative(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// Finite-difference steps, relative to `1 + |x|`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorOptions {
    pub gradient_step: f64,
    pub hessian_step: f64,
    pub force_finite_differences: bool,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            gradient_step: 1e-5,
            hessian_step: 1e-4,
            force_finite_differences: false,
        }
    }
}

fn fd_gradient(phi: &dyn TestFunction, t: f64, x: &[f64], h: f64, out: &mut [f64]) {
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let fp = phi.value(t, &xp);
        xp[k] = x[k] - h;
        let fm = phi.value(t, &xp);
        xp[k] = x[k];
        out[k] = (fp - fm) / (2.0 * h);
    }
}

fn fd_hessian11(phi: &dyn TestFunction, t: f64, x: &[f64], d: usize, h: f64, out: &mut [f64]) {
    let mut xp = x.to_vec();
    let f0 = phi.value(t, x);
    for i in 0..d {
        for j in i..d {
            let v = if i == j {
                xp[i] = x[i] + h;
                let fp = phi.value(t, &xp);
                xp[i] = x[i] - h;
                let fm = phi.value(t, &xp);
                xp[i] = x[i];
                (fp - 2.0 * f0 + fm) / (h * h)
            } else {
                let mut acc = 0.0;
                for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                    xp[i] = x[i] + si * h;
                    xp[j] = x[j] + sj * h;
                    acc += w * phi.value(t, &xp);
                }
                xp[i] = x[i];
                xp[j] = x[j];
                acc / (4.0 * h * h)
            };
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
}

/// Gradient (all blocks) and first-block Hessian of `φ(t, ·)` at `x`.
pub(crate) fn derivatives(
    phi: &dyn TestFunction,
    t: f64,
    x: &[f64],
    d: usize,
    opts: &GeneratorOptions,
    grad: &mut [f64],
    hess: &mut [f64],
) -> Result<()> {
    let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if opts.force_finite_differences || !phi.gradient(t, x, grad) {
        fd_gradient(phi, t, x, opts.gradient_step * scale, grad);
    }
    if opts.force_finite_differences || !phi.hessian_first_block(t, x, d, hess) {
        fd_hessian11(phi, t, x, d, opts.hessian_step * scale, hess);
    }
    if grad.iter().chain(hess.iter()).any(|v| !v.is_finite()) {
        return Err(Error::ModelEvaluation {
            what: "test function derivatives",
            t,
        });
    }
    Ok(())
}

/// `⟨F(t,x), ∇φ(x)⟩ + ½ tr(a(t,x) D²_{x₁}φ(x))`.
pub fn apply_generator(spec: &ChainSpec, phi: &dyn TestFunction, t: f64, x: &[f64]) -> Result<f64> {
    apply_generator_with(spec, phi, t, x, &GeneratorOptions::default())
}

pub fn apply_generator_with(
    spec: &ChainSpec,
    phi: &dyn TestFunction,
    t: f64,
    x: &[f64],
    opts: &GeneratorOptions,
) -> Result<f64> {
    spec.check_point(x)?;
    let d = spec.d;
    let mut grad = vec![0.0; spec.dim()];
    let mut hess = vec![0.0; d * d];
    derivatives(phi, t, x, d, opts, &mut grad, &mut hess)?;
    let f = spec.drift(t, x);
    let a = spec.diffusion(t, x);
    let v = generator_from_parts(f.as_slice(), &a, &grad, &hess, d);
    if !v.is_finite() {
        return Err(Error::ModelEvaluation { what: "generator", t });
    }
    Ok(v)
}

#[inline]
pub(crate) fn generator_from_parts(f: &[f64], a: &DMatrix<f64>, grad: &[f64], hess: &[f64], d: usize) -> f64 {
    let mut v: f64 = f.iter().zip(grad).map(|(f, g)| f * g).sum();
    let mut tr = 0.0;
    for i in 0..d {
        for j in 0..d {
            tr += a[(i, j)] * hess[j * d + i];
        }
    }
    v += 0.5 * tr;
    v
}

/// `(∂_t + L_t)φ(t, x)`; the time derivative falls back to a central difference.
pub fn apply_parabolic_generator(spec: &ChainSpec, phi: &dyn TestFunction, t: f64, x: &[f64]) -> Result<f64> {
    let space = apply_generator(spec, phi, t, x)?;
    let dt = match phi.time_derivative(t, x) {
        Some(v) => v,
        None => {
            let h = 1e-5 * (1.0 + t.abs());
            (phi.value(t + h, x) - phi.value(t - h, x)) / (2.0 * h)
        }
    };
    Ok(space + dt)
}

/// `amplitude · (1 + rate·t) · exp(-½ Σ ((x_k - c_k)/w_k)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBump {
    pub center: Vec<f64>,
    pub widths: Vec<f64>,
    pub amplitude: f64,
    pub rate: f64,
}

impl GaussianBump {
    pub fn new(center: Vec<f64>, widths: Vec<f64>) -> Self {
        GaussianBump {
            center,
            widths,
            amplitude: 1.0,
            rate: 0.0,
        }
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    #[inline]
    fn spatial(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((x, c), w) in x.iter().zip(&self.center).zip(&self.widths) {
            let z = (x - c) / w;
            q += z * z;
        }
        (-0.5 * q).exp()
    }
}

impl TestFunction for GaussianBump {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.amplitude * (1.0 + self.rate * t) * self.spatial(x)
    }

    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        let v = self.value(t, x);
        for k in 0..x.len() {
            let w2 = self.widths[k] * self.widths[k];
            out[k] = -(x[k] - self.center[k]) / w2 * v;
        }
        true
    }

    fn hessian_first_block(&self, t: f64, x: &[f64], d: usize, out: &mut [f64]) -> bool {
        let v = self.value(t, x);
        for i in 0..d {
            let gi = -(x[i] - self.center[i]) / (self.widths[i] * self.widths[i]);
            for j in 0..d {
                let gj = -(x[j] - self.center[j]) / (self.widths[j] * self.widths[j]);
                let diag = if i == j { -1.0 / (self.widths[i] * self.widths[i]) } else { 0.0 };
                out[i * d + j] = (gi * gj + diag) * v;
            }
        }
        true
    }

    fn time_derivative(&self, _t: f64, x: &[f64]) -> Option<f64> {
        Some(self.amplitude * self.rate * self.spatial(x))
    }
}

/// `c + τ·t + ⟨l, x⟩ + ½ ⟨Q x, x⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub constant: f64,
    pub time: f64,
    pub linear: Vec<f64>,
    pub quadratic: DMatrix<f64>,
}

impl Quadratic {
    pub fn constant(dim: usize, c: f64) -> Self {
        Quadratic {
            constant: c,
            time: 0.0,
            linear: vec![0.0; dim],
            quadratic: DMatrix::zeros(dim, dim),
        }
    }

    pub fn coordinate(dim: usize, k: usize) -> Self {
        let mut q = Quadratic::constant(dim, 0.0);
        q.linear[k] = 1.0;
        q
    }
}

impl TestFunction for Quadratic {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        let mut v = self.constant + self.time * t;
        for (k, xk) in x.iter().enumerate() {
            v += self.linear[k] * xk;
            for (l, xl) in x.iter().enumerate() {
                v += 0.5 * self.quadratic[(k, l)] * xk * xl;
            }
        }
        v
    }

    fn gradient(&self, _t: f64, x: &[f64], out: &mut [f64]) -> bool {
        for k in 0..x.len() {
            let mut g = self.linear[k];
            for (l, xl) in x.iter().enumerate() {
                g += 0.5 * (self.quadratic[(k, l)] + self.quadratic[(l, k)]) * xl;
            }
            out[k] = g;
        }
        true
    }

    fn hessian_first_block(&self, _t: f64, _x: &[f64], d: usize, out: &mut [f64]) -> bool {
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = 0.5 * (self.quadratic[(i, j)] + self.quadratic[(j, i)]);
            }
        }
        true
    }

    fn time_derivative(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        Some(self.time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_by_name, ChainSpec, DiffusionDescriptor, ModelDescriptor};
    use proptest::prelude::*;

    fn brownian_with(a: f64) -> ChainSpec {
        ChainSpec::from_descriptor(&ModelDescriptor {
            name: None,
            n: 1,
            d: 1,
            drift: vec![vec![vec![]]],
            diffusion: DiffusionDescriptor {
                base: vec![vec![a]],
                modulation: None,
            },
            lipschitz: None,
            holder: None,
            ellipticity: None,
            nondegeneracy_margin: None,
        })
        .unwrap()
    }

    #[test]
    fn constant_field_is_annihilated() {
        let spec = model_by_name("nonlinear-kolmogorov").unwrap();
        let phi = Quadratic::constant(2, 3.5);
        assert_eq!(apply_generator(&spec, &phi, 0.2, &[0.4, -1.0]).unwrap(), 0.0);
    }

    #[test]
    fn linear_drift_pairing() {
        let spec = model_by_name("kolmogorov").unwrap();
        let phi = Quadratic::coordinate(2, 1);
        let v = apply_generator(&spec, &phi, 0.0, &[0.7, 2.0]).unwrap();
        assert_eq!(v, 0.7);
    }

    #[test]
    fn half_trace_term() {
        let spec = brownian_with(2.0);
        let mut phi = Quadratic::constant(1, 0.0);
        phi.quadratic[(0, 0)] = 2.0;
        let v = apply_generator(&spec, &phi, 0.0, &[1.3]).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn generator_is_linear(alpha in -3.0f64..3.0, x1 in -2.0f64..2.0, x2 in -2.0f64..2.0) {
            let spec = model_by_name("nonlinear-kolmogorov").unwrap();
            let a = GaussianBump::new(vec![0.2, -0.1], vec![0.8, 1.1]);
            let b = Quadratic::coordinate(2, 1);
            struct Combo<'a>(f64, &'a GaussianBump, &'a Quadratic);
            impl TestFunction for Combo<'_> {
                fn value(&self, t: f64, x: &[f64]) -> f64 {
                    self.0 * self.1.value(t, x) + self.2.value(t, x)
                }
            }
            let combo = Combo(alpha, &a, &b);
            let x = [x1, x2];
            let lhs = apply_generator(&spec, &combo, 0.0, &x).unwrap();
            let rhs = alpha * apply_generator(&spec, &a, 0.0, &x).unwrap() + apply_generator(&spec, &b, 0.0, &x).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-6 * (1.0 + rhs.abs()));
        }

        #[test]
        fn finite_differences_match_analytic(x1 in -2.0f64..2.0, x2 in -2.0f64..2.0) {
            let spec = model_by_name("nonlinear-kolmogorov").unwrap();
            let phi = GaussianBump::new(vec![0.3, 0.1], vec![0.9, 1.2]);
            let x = [x1, x2];
            let exact = apply_generator(&spec, &phi, 0.0, &x).unwrap();
            let opts = GeneratorOptions { force_finite_differences: true, ..Default::default() };
            let fd = apply_generator_with(&spec, &phi, 0.0, &x, &opts).unwrap();
            prop_assert!((exact - fd).abs() < 1e-6, "{} vs {}", exact, fd);
        }
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let spec = model_by_name("nonlinear-kolmogorov").unwrap();
        let phi = GaussianBump::new(vec![0.3, 0.1], vec![0.9, 1.2]);
        let x = [0.5, -0.4];
        let exact = apply_generator(&spec, &phi, 0.0, &x).unwrap();
        let err = |h: f64| {
            let opts = GeneratorOptions {
                gradient_step: h,
                hessian_step: h,
                force_finite_differences: true,
            };
            (apply_generator_with(&spec, &phi, 0.0, &x, &opts).unwrap() - exact).abs()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }
}
