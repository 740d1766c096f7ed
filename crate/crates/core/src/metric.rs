//! Anisotropic homogeneous norm, quasi-distances along characteristics,
//! metric balls, greedy coverings and crown sets.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::FlowSolver;
use crate::model::{ChainSpec, SpaceTimePoint};
use crate::stats::wilson_interval;

/// `|t|^{1/2} + Σ_i |x_i|^{1/(2i-1)}` with Euclidean block norms.
pub fn rho(t: f64, x: &[f64], n: usize, d: usize) -> f64 {
    let mut acc = t.abs().sqrt();
    for i in 0..n {
        let b = &x[i * d..(i + 1) * d];
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc += norm.powf(1.0 / (2 * i + 1) as f64);
    }
    acc
}

/// A random point `(τ, z)` with `ρ(τ, z) = radius`; the time sign is drawn at random.
pub fn sample_on_sphere<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize, radius: f64) -> (f64, Vec<f64>) {
    // uniform weights on the simplex split the radius between time and blocks
    let e: Vec<f64> = (0..=n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    let w: Vec<f64> = e.iter().map(|v| v / total).collect();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let tau = sign * (w[0] * radius).powi(2);
    let mut z = vec![0.0; n * d];
    for i in 0..n {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let mag = (w[i + 1] * radius).powi(2 * i as i32 + 1);
        for k in 0..d {
            z[i * d + k] = mag * dir[k] / norm;
        }
    }
    (tau, z)
}

/// Flow solver, horizon and locality radius for quasi-distance computations.
#[derive(Debug, Clone)]
pub struct QuasiMetricContext {
    solver: FlowSolver,
    pub horizon: f64,
    pub lambda_cut: f64,
}

impl QuasiMetricContext {
    pub fn new(spec: &ChainSpec, horizon: f64, lambda_cut: f64) -> Result<Self> {
        if !(lambda_cut > 0.0 && lambda_cut <= 1.0) {
            return Err(Error::Domain(format!("locality radius {lambda_cut} outside (0, 1]")));
        }
        if !(horizon > 0.0 && horizon <= 1.0) {
            return Err(Error::Domain(format!("horizon {horizon} outside (0, 1]")));
        }
        Ok(QuasiMetricContext {
            solver: FlowSolver::new(spec).with_horizon(horizon),
            horizon,
            lambda_cut,
        })
    }

    pub fn solver(&self) -> &FlowSolver {
        &self.solver
    }

    pub fn spec(&self) -> &ChainSpec {
        self.solver.spec()
    }

    fn check_strip(&self, p: &SpaceTimePoint) -> Result<()> {
        if p.s.abs() > self.horizon * (1.0 + 1e-12) {
            return Err(Error::Domain(format!("time {} outside the strip [-{h}, {h}]", p.s, h = self.horizon)));
        }
        self.spec().check_point(&p.x)
    }

    /// `d(p, q) = ρ(t - s, θ_{t,s}(x) - y)`.
    pub fn dist(&self, p: &SpaceTimePoint, q: &SpaceTimePoint) -> Result<f64> {
        self.check_strip(p)?;
        self.check_strip(q)?;
        let th = self.solver.flow(q.s, p.s, &p.x)?;
        let z: Vec<f64> = th.iter().zip(&q.x).map(|(a, b)| a - b).collect();
        let spec = self.spec();
        Ok(rho(q.s - p.s, &z, spec.n, spec.d))
    }

    /// `d*(p, q) = d(q, p)`.
    pub fn dist_star(&self, p: &SpaceTimePoint, q: &SpaceTimePoint) -> Result<f64> {
        self.dist(q, p)
    }

    /// Point at quasi-distance exactly `ρ(τ, z)` from `p`: `(s + τ, θ_{s+τ,s}(x) - z)`.
    pub fn displaced(&self, p: &SpaceTimePoint, tau: f64, z: &[f64]) -> Result<SpaceTimePoint> {
        let th = self.solver.flow(p.s + tau, p.s, &p.x)?;
        Ok(SpaceTimePoint::new(p.s + tau, th.iter().zip(z).map(|(a, b)| a - b).collect::<Vec<_>>()))
    }

    /// True iff `t ∈ [t_lo, t_hi]` and `|θ_{s₀,t}(y) - x₀| ≤ R`.
    pub fn crown_membership(&self, point: &SpaceTimePoint, s0: f64, x0: &[f64], t_lo: f64, t_hi: f64, radius: f64) -> Result<bool> {
        if !(s0 <= t_lo && t_lo < t_hi && t_hi <= self.horizon) {
            return Err(Error::Usage(format!(
                "crown needs s0 <= t_lo < t_hi <= T, got {s0}, {t_lo}, {t_hi}"
            )));
        }
        if point.s < t_lo || point.s > t_hi {
            return Ok(false);
        }
        let back = self.solver.flow(s0, point.s, &point.x)?;
        let dist = back.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        Ok(dist <= radius)
    }
}

/// `B((s, x), δ) = {(t, y) : d((s, x), (t, y)) ≤ δ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiBall {
    pub center: SpaceTimePoint,
    pub radius: f64,
}

impl QuasiBall {
    pub fn new(center: SpaceTimePoint, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Domain(format!("ball radius must be positive, got {radius}")));
        }
        Ok(QuasiBall { center, radius })
    }

    pub fn contains(&self, ctx: &QuasiMetricContext, p: &SpaceTimePoint) -> Result<bool> {
        Ok(ctx.dist(&self.center, p)? <= self.radius)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VolumeEstimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub hits: usize,
    pub samples: usize,
    pub box_volume: f64,
}

/// Axis-aligned box `(t range, per-coordinate ranges)` containing the ball.
pub fn enclosing_box(ctx: &QuasiMetricContext, ball: &QuasiBall) -> Result<((f64, f64), Vec<(f64, f64)>)> {
    let spec = ctx.spec();
    let (n, d) = (spec.n, spec.d);
    let delta = ball.radius;
    let c = &ball.center;
    let t_range = (c.s - delta * delta, c.s + delta * delta);
    let inflate = (spec.lipschitz * delta * delta).exp();
    let mut lo = vec![f64::INFINITY; n * d];
    let mut hi = vec![f64::NEG_INFINITY; n * d];
    let probes = 33;
    for k in 0..probes {
        let t = t_range.0 + (t_range.1 - t_range.0) * k as f64 / (probes - 1) as f64;
        let th = ctx.solver.flow(t, c.s, &c.x)?;
        for j in 0..n * d {
            lo[j] = lo[j].min(th[j]);
            hi[j] = hi[j].max(th[j]);
        }
    }
    let ranges = (0..n * d)
        .map(|j| {
            let i = j / d;
            let pad = delta.powi(2 * i as i32 + 1) * inflate + 0.01 * (hi[j] - lo[j]);
            (lo[j] - pad, hi[j] + pad)
        })
        .collect();
    Ok((t_range, ranges))
}

/// Monte Carlo volume of a ball with a Wilson 95% interval.
///
/// Draws are uniform on the box `|t - s| ≤ δ²`, `|θ_{t,s}(x)_i - y_i| ≤ δ^{2i-1}` sheared
/// along the flow. At fixed `t` the shear is a translation, so the box volume is
/// `2δ² Π (2δ^{2i-1})^d` and the box holds the ball exactly.
pub fn ball_volume<R: Rng + ?Sized>(ctx: &QuasiMetricContext, ball: &QuasiBall, mc_budget: usize, rng: &mut R) -> Result<VolumeEstimate> {
    if mc_budget == 0 {
        return Err(Error::Usage("volume estimate needs at least one sample".into()));
    }
    let spec = ctx.spec();
    let (n, d) = (spec.n, spec.d);
    let delta = ball.radius;
    let c = &ball.center;
    let half: Vec<f64> = (0..n * d).map(|j| delta.powi(2 * (j / d) as i32 + 1)).collect();
    let box_volume = 2.0 * delta * delta * half.iter().map(|h| 2.0 * h).product::<f64>();
    let mut hits = 0usize;
    let mut y = vec![0.0; n * d];
    for _ in 0..mc_budget {
        let t = c.s + delta * delta * rng.random_range(-1.0..1.0);
        let th = ctx.solver.flow(t, c.s, &c.x)?;
        for j in 0..n * d {
            y[j] = th[j] + half[j] * rng.random_range(-1.0..1.0);
        }
        if ball.contains(ctx, &SpaceTimePoint::new(t, y.clone()))? {
            hits += 1;
        }
    }
    let (lo, hi) = wilson_interval(hits, mc_budget, 1.96);
    Ok(VolumeEstimate {
        value: box_volume * hits as f64 / mc_budget as f64,
        ci_low: box_volume * lo,
        ci_high: box_volume * hi,
        hits,
        samples: mc_budget,
        box_volume,
    })
}

/// Volume of the unit ball `{ρ(t, x) ≤ 1}` for `n = d = 1`: `4/3`.
pub const UNIT_BALL_VOLUME_SCALAR: f64 = 4.0 / 3.0;

#[derive(Debug, Clone, Serialize)]
pub struct DoublingProfile {
    pub radii: Vec<f64>,
    pub volumes: Vec<f64>,
    /// slope of log-volume between consecutive radii
    pub local_slopes: Vec<f64>,
    pub expected_slope: f64,
    /// largest radius up to which every local slope is within the tolerance
    pub largest_radius: Option<f64>,
}

/// Volumes at increasing radii and the largest radius at which the doubling slope holds.
pub fn doubling_profile<R: Rng + ?Sized>(
    ctx: &QuasiMetricContext,
    center: &SpaceTimePoint,
    radii: &[f64],
    mc_budget: usize,
    tolerance: f64,
    rng: &mut R,
) -> Result<DoublingProfile> {
    let spec = ctx.spec();
    let expected = (spec.n * spec.n * spec.d + 2) as f64;
    let mut radii = radii.to_vec();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut volumes = Vec::with_capacity(radii.len());
    for &r in &radii {
        volumes.push(ball_volume(ctx, &QuasiBall::new(center.clone(), r)?, mc_budget, rng)?.value);
    }
    let local_slopes: Vec<f64> = (1..radii.len())
        .map(|k| (volumes[k] / volumes[k - 1]).ln() / (radii[k] / radii[k - 1]).ln())
        .collect();
    let mut largest = None;
    for (k, s) in local_slopes.iter().enumerate() {
        if (s - expected).abs() <= tolerance * expected {
            largest = Some(radii[k + 1]);
        } else {
            break;
        }
    }
    Ok(DoublingProfile {
        radii,
        volumes,
        local_slopes,
        expected_slope: expected,
        largest_radius: largest,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct QuasiConstants {
    pub c_sym: f64,
    pub c_tri: f64,
    pub pairs: usize,
    pub triples: usize,
}

/// Smallest quasi-distance resolved to 1% in double precision.
///
/// A round trip through the flow leaves a displacement of order `ε |x|` in every
/// block, and the last block enters `ρ` through its `1/(2n-1)` root.
pub fn resolvable_radius(n: usize, state_scale: f64) -> f64 {
    100.0 * (f64::EPSILON * state_scale.max(1.0)).powf(1.0 / (2 * n - 1) as f64)
}

/// Empirical symmetry and triangle constants over points within the locality radius.
///
/// Pairs are built constructively: `q = (s + τ, θ_{s+τ,s}(x) - z)` with `ρ(τ, z)`
/// uniform in `[resolvable_radius, Λ_cut]`, so `d(p, q) ≤ Λ_cut` holds by construction.
pub fn quasi_constants<R: Rng + ?Sized>(ctx: &QuasiMetricContext, sample_budget: usize, rng: &mut R) -> Result<QuasiConstants> {
    let spec = ctx.spec();
    let (n, d) = (spec.n, spec.d);
    let lam = ctx.lambda_cut;
    let mut c_sym: f64 = 0.0;
    let mut c_tri: f64 = 0.0;
    let mut pairs = 0;
    let mut triples = 0;
    let horizon = ctx.horizon;
    let floor = resolvable_radius(n, 2.0 * (n * d) as f64);
    if !(lam > floor) {
        return Err(Error::Domain(format!("locality radius {lam} below the resolvable floor {floor:.2e}")));
    }
    let draw = |rng: &mut R, s: f64| -> (f64, Vec<f64>) {
        // time displacements leaving the strip are redrawn
        loop {
            let r = floor + (lam - floor) * rng.random::<f64>();
            let (tau, z) = sample_on_sphere(rng, n, d, r);
            if (s + tau).abs() <= horizon {
                return (tau, z);
            }
        }
    };
    for _ in 0..sample_budget {
        let s = rng.random_range(-0.5 * horizon..0.5 * horizon);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = SpaceTimePoint::new(s, x);
        let (tau, z) = draw(rng, s);
        let q = ctx.displaced(&p, tau, &z)?;
        let dpq = ctx.dist(&p, &q)?;
        if dpq > 0.0 {
            c_sym = c_sym.max(ctx.dist(&q, &p)? / dpq);
            pairs += 1;
        }
        // intermediate point within the same radius of p
        let (tau2, z2) = draw(rng, s);
        let m = ctx.displaced(&p, tau2, &z2)?;
        let dpm = ctx.dist(&p, &m)?;
        let dmq = ctx.dist(&m, &q)?;
        if dpm + dmq > 0.0 && dmq <= lam {
            c_tri = c_tri.max(dpq / (dpm + dmq));
            triples += 1;
        }
    }
    Ok(QuasiConstants {
        c_sym,
        c_tri,
        pairs,
        triples,
    })
}

/// Uniform grid on `[t₀, t₁] × Π_k [a_k, b_k]` used as a discretized strip.
#[derive(Debug, Clone)]
pub struct StripGrid {
    pub times: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
}

fn linspace(a: f64, b: f64, m: usize) -> Vec<f64> {
    if m <= 1 {
        return vec![0.5 * (a + b)];
    }
    (0..m).map(|k| a + (b - a) * k as f64 / (m - 1) as f64).collect()
}

impl StripGrid {
    pub fn uniform(time: (f64, f64), time_points: usize, space: &[(f64, f64)], space_points: usize) -> Self {
        StripGrid {
            times: linspace(time.0, time.1, time_points),
            axes: space.iter().map(|&(a, b)| linspace(a, b, space_points)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len() * self.axes.iter().map(|a| a.len()).product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn step(v: &[f64]) -> f64 {
        if v.len() < 2 {
            0.0
        } else {
            (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64
        }
    }

    /// `ρ`-diameter of one grid cell.
    pub fn cell_diameter(&self, n: usize, d: usize) -> f64 {
        let steps: Vec<f64> = self.axes.iter().map(|a| Self::step(a)).collect();
        rho(Self::step(&self.times), &steps, n, d)
    }

    /// Spatial points in lexicographic order.
    pub fn space_points(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for axis in &self.axes {
            let mut next = Vec::with_capacity(out.len() * axis.len());
            for p in &out {
                for &v in axis {
                    let mut q = p.clone();
                    q.push(v);
                    next.push(q);
                }
            }
            out = next;
        }
        out
    }

    pub fn points(&self) -> Vec<SpaceTimePoint> {
        let space = self.space_points();
        let mut out = Vec::with_capacity(self.len());
        for &t in &self.times {
            for x in &space {
                out.push(SpaceTimePoint::new(t, x.clone()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Covering {
    pub centers: Vec<(f64, Vec<f64>)>,
    pub radius: f64,
    pub max_overlap: usize,
    pub all_covered: bool,
}

impl Covering {
    /// CSV rows `time, coordinates…, radius`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (t, x) in &self.centers {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(self.radius.to_string());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Distances `d(c, p)` from one center to every grid point.
fn distances_from(ctx: &QuasiMetricContext, grid: &StripGrid, space: &[Vec<f64>], c: &SpaceTimePoint) -> Result<Vec<f64>> {
    let spec = ctx.spec();
    let (n, d) = (spec.n, spec.d);
    let mut out = Vec::with_capacity(grid.times.len() * space.len());
    let mut z = vec![0.0; n * d];
    for &t in &grid.times {
        let th = ctx.solver.flow(t, c.s, &c.x)?;
        for x in space {
            for j in 0..n * d {
                z[j] = th[j] - x[j];
            }
            out.push(rho(t - c.s, &z, n, d));
        }
    }
    Ok(out)
}

/// Greedy farthest-point covering of the grid by balls of radius `δ`, with the
/// maximal multiplicity of the `K`-dilated balls.
pub fn covering(ctx: &QuasiMetricContext, grid: &StripGrid, delta: f64, k: f64) -> Result<Covering> {
    let spec = ctx.spec();
    if grid.axes.len() != spec.dim() {
        return Err(Error::Shape(format!("grid has {} axes, model has {}", grid.axes.len(), spec.dim())));
    }
    if !(delta > 0.0) || !(k > 1.0) {
        return Err(Error::Domain(format!("covering needs δ > 0 and K > 1, got δ={delta}, K={k}")));
    }
    let cell = grid.cell_diameter(spec.n, spec.d);
    if cell > delta / 4.0 {
        return Err(Error::Resolution { cell, limit: delta / 4.0 });
    }
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Usage("empty grid".into()));
    }
    let space = grid.space_points();
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut center_dists: Vec<Vec<f64>> = Vec::new();
    let mut centers = Vec::new();
    let mut next = 0usize;
    loop {
        let c = &points[next];
        let dists = distances_from(ctx, grid, &space, c)?;
        for (m, dv) in nearest.iter_mut().zip(&dists) {
            *m = m.min(*dv);
        }
        centers.push((c.s, c.x.clone()));
        center_dists.push(dists);
        let (idx, far) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if far <= delta {
            break;
        }
        next = idx;
    }
    let mut max_overlap = 0;
    for j in 0..points.len() {
        let count = center_dists.iter().filter(|dv| dv[j] <= k * delta).count();
        max_overlap = max_overlap.max(count);
    }
    let all_covered = nearest.iter().all(|&v| v <= delta);
    Ok(Covering {
        centers,
        radius: delta,
        max_overlap,
        all_covered,
    })
}

/// `|𝕋_w⁻¹(θ_{v,u}(x) - y)| / |𝕋_w⁻¹(x - θ_{u,v}(y))|`.
pub fn scaled_flow_ratio(solver: &FlowSolver, u: f64, v: f64, w: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let spec = solver.spec();
    let scale = crate::linalg::ScaleMatrix::new(w, spec.n, spec.d)?;
    let fwd = solver.flow(v, u, x)?;
    let back = solver.flow(u, v, y)?;
    let dim = spec.dim();
    let a = DVector::from_fn(dim, |k, _| (fwd[k] - y[k]) / scale.entry(k));
    let b = DVector::from_fn(dim, |k, _| (x[k] - back[k]) / scale.entry(k));
    let nb = b.norm();
    if !(nb > 0.0) {
        return Err(Error::Domain("ratio undefined when x is on the characteristic of y".into()));
    }
    Ok(a.norm() / nb)
}
