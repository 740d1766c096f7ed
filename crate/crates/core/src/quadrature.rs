//! Quadrature rules: Gauss–Legendre panels in time, tensor Gauss–Hermite in
//! whitened space coordinates, dyadic panel layouts.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::hermite::GaussHermite;
use gauss_quad::legendre::GaussLegendre;
use nalgebra::DMatrix;

/// Gauss–Legendre nodes and weights on the reference interval [-1, 1].
#[derive(Debug, Clone)]
pub struct LegendreRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl LegendreRule {
    pub fn new(order: usize) -> Self {
        let order = NonZeroUsize::new(order.max(1)).unwrap();
        let rule = GaussLegendre::new(order);
        let (nodes, weights) = rule.as_node_weight_pairs().iter().copied().unzip();
        LegendreRule { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.on(a, b).map(|(u, w)| w * f(u)).sum()
    }
}

/// Tensor-product Gauss–Hermite rule for the standard Gaussian weight
/// `exp(-|z|^2/2)` in `dim` dimensions.
///
/// Each node carries the combined weight `w * exp(|z|^2/2)` so that
/// `Σ weight * g(z)` approximates the plain Lebesgue integral of `g`.
#[derive(Debug, Clone)]
pub struct HermiteGrid {
    dim: usize,
    points: Vec<f64>,
    lebesgue_weights: Vec<f64>,
    gaussian_weights: Vec<f64>,
}

impl HermiteGrid {
    pub fn new(order: usize, dim: usize) -> Self {
        let rule = GaussHermite::new(NonZeroUsize::new(order.max(1)).unwrap());
        // physicists' rule for e^{-x^2}; rescale to e^{-z^2/2}
        let one_d: Vec<(f64, f64)> = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (x * std::f64::consts::SQRT_2, w * std::f64::consts::SQRT_2))
            .collect();
        let m = one_d.len();
        let total = m.pow(dim as u32);
        let mut points = Vec::with_capacity(total * dim);
        let mut lebesgue_weights = Vec::with_capacity(total);
        let mut gaussian_weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            let mut w = 1.0;
            let mut r2 = 0.0;
            for &k in &idx {
                let (z, wk) = one_d[k];
                points.push(z);
                w *= wk;
                r2 += z * z;
            }
            gaussian_weights.push(w);
            lebesgue_weights.push(w * (0.5 * r2).exp());
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < m {
                    break;
                }
                *slot = 0;
            }
        }
        HermiteGrid {
            dim,
            points,
            lebesgue_weights,
            gaussian_weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.lebesgue_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lebesgue_weights.is_empty()
    }

    /// `(z, weight for ∫ g dz, weight for ∫ g(z) e^{-|z|²/2} dz)`.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64, f64)> + '_ {
        self.points
            .chunks_exact(self.dim.max(1))
            .zip(self.lebesgue_weights.iter().zip(&self.gaussian_weights))
            .map(|(z, (&wl, &wg))| (z, wl, wg))
    }

    /// Integrates `g(y)` over ℝ^dim with the change of variables `y = center + map·z`.
    pub fn integrate_mapped(
        &self,
        center: &[f64],
        map: &DMatrix<f64>,
        mut g: impl FnMut(&[f64]) -> f64,
    ) -> f64 {
        let jac = map.determinant().abs();
        let mut y = vec![0.0; self.dim];
        let mut acc = 0.0;
        for (z, wl, _) in self.iter() {
            map_point(center, map, z, &mut y);
            acc += wl * g(&y);
        }
        jac * acc
    }
}

pub(crate) fn map_point(center: &[f64], map: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    let dim = center.len();
    for i in 0..dim {
        let mut v = center[i];
        for j in 0..dim {
            v += map[(i, j)] * z[j];
        }
        out[i] = v;
    }
}

type RuleCache<T> = OnceLock<Mutex<HashMap<(usize, usize), Arc<T>>>>;

static HERMITE_CACHE: RuleCache<HermiteGrid> = OnceLock::new();
static LEGENDRE_CACHE: RuleCache<LegendreRule> = OnceLock::new();

/// Shared tensor Hermite grid of the given order and dimension.
pub fn hermite_grid(order: usize, dim: usize) -> Arc<HermiteGrid> {
    let cache = HERMITE_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((order, dim))
        .or_insert_with(|| Arc::new(HermiteGrid::new(order, dim)))
        .clone()
}

/// Shared Gauss–Legendre rule of the given order.
pub fn legendre(order: usize) -> Arc<LegendreRule> {
    let cache = LEGENDRE_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((order, 0))
        .or_insert_with(|| Arc::new(LegendreRule::new(order)))
        .clone()
}

/// Panels `[lo·2^k, lo·2^{k+1}] ∩ [lo, hi]` covering `[lo, hi]`, `lo > 0`.
pub fn dyadic_panels(lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if !(hi > lo) || lo <= 0.0 {
        return out;
    }
    let mut a = lo;
    while a < hi {
        let b = (2.0 * a).min(hi);
        // avoid a sliver panel at the top
        let b = if hi - b < 1e-3 * (b - a) { hi } else { b };
        out.push((a, b));
        a = b;
    }
    out
}

/// Dyadic panels in the gap `u ∈ [0, len]` refining geometrically towards 0,
/// with the innermost panel `[0, len·2^{-levels}]`.
pub fn dyadic_towards_zero(len: f64, levels: usize) -> Vec<(f64, f64)> {
    if len <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(levels + 1);
    let mut b = len;
    for _ in 0..levels {
        let a = 0.5 * b;
        out.push((a, b));
        b = a;
    }
    out.push((0.0, b));
    out.reverse();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = LegendreRule::new(8);
        let v = rule.integrate(0.0, 2.0, |u| u.powi(15));
        assert_relative_eq!(v, 2f64.powi(16) / 16.0, max_relative = 1e-13);
    }

    #[test]
    fn hermite_grid_normalizes_gaussian() {
        let grid = HermiteGrid::new(20, 2);
        let total: f64 = grid.iter().map(|(_, _, wg)| wg).sum();
        assert_relative_eq!(total, 2.0 * std::f64::consts::PI, max_relative = 1e-13);
        let second: f64 = grid.iter().map(|(z, _, wg)| wg * z[0] * z[0]).sum();
        assert_relative_eq!(second, 2.0 * std::f64::consts::PI, max_relative = 1e-12);
    }

    #[test]
    fn mapped_integral_of_gaussian_density() {
        let grid = HermiteGrid::new(12, 2);
        let map = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.2, 0.1]);
        let cov = &map * map.transpose();
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        let c = [1.0, -2.0];
        let v = grid.integrate_mapped(&c, &map, |y| {
            let d0 = y[0] - c[0];
            let d1 = y[1] - c[1];
            let q = inv[(0, 0)] * d0 * d0 + 2.0 * inv[(0, 1)] * d0 * d1 + inv[(1, 1)] * d1 * d1;
            (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
        });
        assert_relative_eq!(v, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn dyadic_panels_cover_interval() {
        let p = dyadic_panels(0.01, 1.0);
        assert_eq!(p.first().unwrap().0, 0.01);
        assert_eq!(p.last().unwrap().1, 1.0);
        for w in p.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        let z = dyadic_towards_zero(1.0, 5);
        assert_eq!(z.len(), 6);
        assert_eq!(z[0], (0.0, 1.0 / 32.0));
    }
}
