//! Space integrals against frozen kernels by whitened Gauss–Hermite rules, and
//! the time panels shared by the singular and Green integrals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{FrozenGaussian, ProxyKernel};
use crate::quadrature::{hermite_grid, map_point};

/// Nodes `y` and weights for `∫ g(y) dy`, where `g` behaves like the Gaussian
/// `N(center, W Wᵀ)` times (optionally) a Gaussian profile `(c, widths)`.
pub(crate) fn gaussian_nodes(
    center: &DVector<f64>,
    w: &DMatrix<f64>,
    profile: Option<&(Vec<f64>, Vec<f64>)>,
    order: usize,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let dim = center.len();
    let (mid, map) = match profile {
        None => (center.clone(), w.clone()),
        Some((c, widths)) => {
            // combine both Gaussians in the whitened coordinates of the first one
            let dinv2 = DVector::from_iterator(dim, widths.iter().map(|v| 1.0 / (v * v)));
            let a = w.transpose() * DMatrix::from_diagonal(&dinv2) * w;
            let p = DMatrix::identity(dim, dim) + a;
            let gap = DVector::from_iterator(dim, (0..dim).map(|k| dinv2[k] * (c[k] - center[k])));
            let b = w.transpose() * gap;
            let chol = p.cholesky().ok_or(Error::Conditioning {
                smallest_eigenvalue: f64::NAN,
            })?;
            let zc = chol.solve(&b);
            let u_inv_t = chol
                .l()
                .transpose()
                .try_inverse()
                .ok_or(Error::Conditioning { smallest_eigenvalue: 0.0 })?;
            (center + w * zc, w * u_inv_t)
        }
    };
    let jac = map.determinant().abs();
    let grid = hermite_grid(order, dim);
    let mut out = Vec::with_capacity(grid.len());
    for (z, wl, _) in grid.iter() {
        let mut y = vec![0.0; dim];
        map_point(mid.as_slice(), &map, z, &mut y);
        out.push((y, jac * wl));
    }
    Ok(out)
}

/// Visits the nodes of `∫ · dy` against `q̃(s, t, x, y)` (freeze `(t, y)`), handing
/// each node the frozen Gaussian that belongs to it.
pub(crate) fn integrate_forward(
    pk: &ProxyKernel,
    s: f64,
    t: f64,
    x: &[f64],
    profile: Option<&(Vec<f64>, Vec<f64>)>,
    order: usize,
    mut visit: impl FnMut(&FrozenGaussian, &[f64], f64) -> Result<()>,
) -> Result<()> {
    let theta = pk.solver().flow(t, s, x)?;
    let reference = pk.at(s, t, x, theta.as_slice())?;
    let nodes = gaussian_nodes(reference.mean(), &reference.whitening_map(), profile, order)?;
    let invariant = pk.is_freeze_invariant();
    for (y, w) in &nodes {
        if invariant {
            visit(&reference, y, *w)?;
        } else {
            let g = pk.at(s, t, x, y)?;
            visit(&g, y, *w)?;
        }
    }
    Ok(())
}

/// Visits the nodes of `∫ · dy` against `q̃(t, s, y, x)` with `t < s`, i.e. over the
/// starting point, with the freeze fixed at `(s, x)`.
pub(crate) fn integrate_backward(
    pk: &ProxyKernel,
    t: f64,
    s: f64,
    x: &[f64],
    profile: Option<&(Vec<f64>, Vec<f64>)>,
    order: usize,
    mut visit: impl FnMut(&FrozenGaussian, &[f64], f64) -> Result<()>,
) -> Result<()> {
    let theta = pk.solver().flow(t, s, x)?;
    let reference = pk.at(t, s, theta.as_slice(), x)?;
    let rinv = reference
        .resolvent()
        .clone()
        .try_inverse()
        .ok_or(Error::Conditioning { smallest_eigenvalue: 0.0 })?;
    let map = rinv * reference.whitening_map();
    let center = reference.characteristic_at_start().clone();
    for (y, w) in gaussian_nodes(&center, &map, profile, order)? {
        let g = reference.restarted(&y);
        visit(&g, &y, w)?;
    }
    Ok(())
}

/// Cuts panels to `[lo, hi]`, dropping empty pieces.
pub(crate) fn clip_panels(panels: &[(f64, f64)], lo: f64, hi: f64) -> Vec<(f64, f64)> {
    panels
        .iter()
        .filter_map(|&(a, b)| {
            let (a, b) = (a.max(lo), b.min(hi));
            // slivers left by rounding collapse once shifted back to absolute time
            (b - a > 1e-13).then_some((a, b))
        })
        .collect()
}

/// Splits every panel into `parts` equal pieces.
pub(crate) fn split_panels(panels: &[(f64, f64)], parts: usize) -> Vec<(f64, f64)> {
    let parts = parts.max(1);
    let mut out = Vec::with_capacity(panels.len() * parts);
    for &(a, b) in panels {
        let h = (b - a) / parts as f64;
        for k in 0..parts {
            let hi = if k + 1 == parts { b } else { a + (k + 1) as f64 * h };
            out.push((a + k as f64 * h, hi));
        }
    }
    out
}

/// Relative change between two refinement levels, measured against the larger of
/// the refined value and a fraction of the absolute integral.
pub(crate) fn relative_change(coarse: f64, fine: f64, absolute: f64) -> f64 {
    let scale = fine.abs().max(1e-3 * absolute);
    if scale == 0.0 {
        0.0
    } else {
        (coarse - fine).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_by_name;
    use approx::assert_relative_eq;

    #[test]
    fn steered_nodes_integrate_gaussian_products() {
        let spec = model_by_name("nonlinear-kolmogorov").unwrap();
        let pk = ProxyKernel::new(&spec);
        let g = pk.frozen(0.1, 0.6, &[0.2, 0.4], 0.6, &[0.0, 0.5]).unwrap();
        let (c, w) = (vec![0.3, -0.1], vec![0.2, 0.05]);
        // ∫ q(y) e^{-½|D⁻¹(y-c)|²} dy = 2π w₁w₂ N(c; mean, K + D²)
        let cov = g.covariance() + DMatrix::from_diagonal(&DVector::from_iterator(2, w.iter().map(|v| v * v)));
        let r = DVector::from_column_slice(&c) - g.mean();
        let quad = (r.transpose() * cov.clone().try_inverse().unwrap() * &r)[(0, 0)];
        let exact = w[0] * w[1] * (-0.5 * quad).exp() / cov.determinant().sqrt();
        let bump = |y: &[f64]| (-0.5 * (((y[0] - c[0]) / w[0]).powi(2) + ((y[1] - c[1]) / w[1]).powi(2))).exp();
        let profile = (c.clone(), w.clone());
        let nodes = gaussian_nodes(g.mean(), &g.whitening_map(), Some(&profile), 12).unwrap();
        let steered: f64 = nodes.iter().map(|(y, wy)| wy * g.density(y).unwrap() * bump(y)).sum();
        assert_relative_eq!(steered, exact, max_relative = 1e-10);
        let nodes = gaussian_nodes(g.mean(), &g.whitening_map(), None, 20).unwrap();
        let mass: f64 = nodes.iter().map(|(y, wy)| wy * g.density(y).unwrap()).sum();
        assert_relative_eq!(mass, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn backward_nodes_integrate_start_density() {
        let spec = model_by_name("kolmogorov").unwrap();
        let pk = ProxyKernel::new(&spec);
        // ∫ q̃(t, s, y, x) dy = 1/|det R| = 1 on kolmogorov
        let mut acc = 0.0;
        integrate_backward(&pk, 0.2, 0.7, &[0.4, -0.3], None, 12, |g, _y, w| {
            acc += w * g.density(&[0.4, -0.3])?;
            Ok(())
        })
        .unwrap();
        assert_relative_eq!(acc, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn panel_helpers() {
        let p = clip_panels(&[(0.0, 1.0), (1.0, 2.0), (2.0, 4.0)], 0.5, 2.5);
        assert_eq!(p, vec![(0.5, 1.0), (1.0, 2.0), (2.0, 2.5)]);
        assert!(clip_panels(&[(0.0, 0.9)], 0.9 - 1e-16, 1.0).is_empty());
        let q = split_panels(&[(0.0, 1.0)], 4);
        assert_eq!(q.len(), 4);
        assert_eq!(q[3].1, 1.0);
        assert_eq!(relative_change(1.0, 1.0, 5.0), 0.0);
    }
}
