//! Path simulation of chain SDEs (Euler–Maruyama and a piecewise-frozen exact
//! Gaussian scheme) and the Monte Carlo diagnostics built on it: martingale
//! residuals, occupation times, deviation tails, tube excursions and anisotropic
//! density histograms with two-sided envelope checks.

use std::sync::Arc;
use std::thread;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::SpaceTimeField;
use crate::flow::FlowSolver;
use crate::linalg::{cholesky, expm_nilpotent, scale_matrix, sym_sqrt};
use crate::model::generator::{derivatives, generator_from_parts};
use crate::model::{ChainSpec, GeneratorOptions, TestFunction};
use crate::quadrature::{legendre, LegendreRule};
use crate::stats::{linear_fit, wilson_interval, Accumulator, LinearFit, MeanEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    Euler,
    PiecewiseFrozen,
}

/// Which grid states an ensemble keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    All,
    Final,
    /// every `k`-th step, plus the first and the last one
    Every(usize),
}

/// Start point, time grid, ensemble size and seed of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationPlan {
    pub start_time: f64,
    pub start: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub record: Record,
}

impl SimulationPlan {
    pub fn new(start_time: f64, start: Vec<f64>, horizon: f64, steps: usize, paths: usize, seed: u64) -> Self {
        SimulationPlan {
            start_time,
            start,
            horizon,
            steps,
            paths,
            seed,
            record: Record::All,
        }
    }

    pub fn recording(mut self, record: Record) -> Self {
        self.record = record;
        self
    }

    pub fn step_size(&self) -> f64 {
        (self.horizon - self.start_time) / self.steps as f64
    }

    /// Time of grid step `k`; the last one is exactly the horizon.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            self.start_time + k as f64 * self.step_size()
        }
    }

    /// Grid step of time `t`, if `t` is a grid time.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let u = (t - self.start_time) / self.step_size();
        let k = u.round();
        if k < 0.0 || k > self.steps as f64 || (u - k).abs() > 1e-9 {
            return Err(Error::Usage(format!("time {t} is not on the simulation grid")));
        }
        Ok(k as usize)
    }

    fn recorded_steps(&self) -> Vec<usize> {
        match self.record {
            Record::All => (0..=self.steps).collect(),
            Record::Final => vec![self.steps],
            Record::Every(k) => {
                let k = k.max(1);
                let mut v: Vec<usize> = (0..=self.steps).step_by(k).collect();
                if *v.last().unwrap() != self.steps {
                    v.push(self.steps);
                }
                v
            }
        }
    }

    fn validate(&self, spec: &ChainSpec) -> Result<()> {
        if self.steps == 0 || self.paths == 0 {
            return Err(Error::Usage("step count and path count must be positive".into()));
        }
        if !(self.horizon > self.start_time) {
            return Err(Error::DegenerateInterval(self.start_time));
        }
        spec.check_point(&self.start)
    }
}

/// Simulated trajectories, kept at the recorded grid times.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub model: String,
    pub scheme: Scheme,
    pub start_time: f64,
    pub start: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
    pub seed: u64,
    pub times: Vec<f64>,
    pub dim: usize,
    paths: usize,
    /// row-major over `(path, recorded time, coordinate)`
    states: Vec<f64>,
}

impl PathEnsemble {
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let at = (path * self.times.len() + k) * self.dim;
        &self.states[at..at + self.dim]
    }

    /// Index of `t` among the recorded times.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&u| (u - t).abs() <= 1e-12 * (1.0 + t.abs()))
            .ok_or_else(|| Error::Usage(format!("time {t} was not recorded")))
    }

    /// Rows `path, t, x…`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((0..self.dim).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for p in 0..self.paths {
            for (k, t) in self.times.iter().enumerate() {
                let mut row = vec![p.to_string(), t.to_string()];
                row.extend(self.state(p, k).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

trait Stepper {
    fn step(&mut self, t: f64, h: f64, x: &mut [f64], rng: &mut ChaCha8Rng) -> Result<()>;
}

struct EulerStep<'a> {
    spec: &'a ChainSpec,
    drift: Vec<f64>,
    noise: Vec<f64>,
    root: Option<DMatrix<f64>>,
}

impl<'a> EulerStep<'a> {
    fn new(spec: &'a ChainSpec) -> Self {
        EulerStep {
            spec,
            drift: vec![0.0; spec.dim()],
            noise: vec![0.0; spec.d],
            root: spec.constant_diffusion().map(sym_sqrt),
        }
    }
}

impl Stepper for EulerStep<'_> {
    fn step(&mut self, t: f64, h: f64, x: &mut [f64], rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.spec.d;
        self.spec.drift_into(t, x, &mut self.drift);
        let local;
        let sigma = match &self.root {
            Some(r) => r,
            None => {
                local = sym_sqrt(&self.spec.diffusion(t, x));
                &local
            }
        };
        for z in self.noise.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        for (xk, fk) in x.iter_mut().zip(&self.drift) {
            *xk += h * fk;
        }
        let sq = h.sqrt();
        for i in 0..d {
            let mut v = 0.0;
            for j in 0..d {
                v += sigma[(i, j)] * self.noise[j];
            }
            x[i] += sq * v;
        }
        Ok(())
    }
}

/// Exact step of the linear SDE with drift `F(t, x) + A(t, x)(· - x)` and
/// diffusion `a(t, x)`, all frozen at the start of the step.
struct FrozenStep<'a> {
    spec: &'a ChainSpec,
    rule: Arc<LegendreRule>,
    constant: bool,
    /// `(h, ∫₀ʰ e^{Ar} dr, covariance factor)` for constant coefficients
    cache: Option<(f64, DMatrix<f64>, DMatrix<f64>)>,
    drift: Vec<f64>,
    z: DVector<f64>,
}

impl<'a> FrozenStep<'a> {
    fn new(spec: &'a ChainSpec) -> Self {
        FrozenStep {
            spec,
            rule: legendre(spec.n + 1),
            constant: spec.constant_transmission().is_some() && spec.constant_diffusion().is_some(),
            cache: None,
            drift: vec![0.0; spec.dim()],
            z: DVector::zeros(spec.dim()),
        }
    }

    /// `(∫₀ʰ e^{Ar} dr, L)` with `L Lᵀ = ∫₀ʰ e^{Ar} B a Bᵀ e^{Aᵀr} dr`; the
    /// transmission matrix is nilpotent, so the rule is exact.
    fn moments(&self, t: f64, x: &[f64], h: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (n, d) = (self.spec.n, self.spec.d);
        let dim = n * d;
        let a = self.spec.transmission_matrix(t, x);
        let mut bab = DMatrix::zeros(dim, dim);
        bab.view_mut((0, 0), (d, d)).copy_from(&self.spec.diffusion(t, x));
        let mut e = DMatrix::zeros(dim, dim);
        let mut k = DMatrix::zeros(dim, dim);
        for (r, w) in self.rule.on(0.0, h) {
            let m = expm_nilpotent(&a, r);
            k += &m * &bab * m.transpose() * w;
            e += m * w;
        }
        // factor in the block-scaled coordinates, where the covariance is O(1)
        let scale = scale_matrix(h, n, d)?;
        let inv = scale.inverse_matrix();
        let scaled = &inv * &k * &inv * h;
        let chol = cholesky(&(0.5 * (&scaled + scaled.transpose())))?;
        Ok((e, scale.matrix() * chol.l() / h.sqrt()))
    }
}

impl Stepper for FrozenStep<'_> {
    fn step(&mut self, t: f64, h: f64, x: &mut [f64], rng: &mut ChaCha8Rng) -> Result<()> {
        let fresh;
        let (e, l) = match &self.cache {
            Some((hc, e, l)) if self.constant && (hc - h).abs() <= 1e-14 * h => (e, l),
            _ => {
                let m = self.moments(t, x, h)?;
                if self.constant {
                    self.cache = Some((h, m.0, m.1));
                    let c = self.cache.as_ref().unwrap();
                    (&c.1, &c.2)
                } else {
                    fresh = m;
                    (&fresh.0, &fresh.1)
                }
            }
        };
        self.spec.drift_into(t, x, &mut self.drift);
        for z in self.z.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        let shift = e * DVector::from_column_slice(&self.drift) + l * &self.z;
        for (xk, v) in x.iter_mut().zip(shift.iter()) {
            *xk += v;
        }
        Ok(())
    }
}

/// Per-path consumer of the simulated grid states.
pub trait PathObserver {
    type Output: Send;
    fn visit(&mut self, step: usize, t: f64, x: &[f64]) -> Result<()>;
    fn finish(self) -> Self::Output;
}

fn run_path<O: PathObserver>(plan: &SimulationPlan, stepper: &mut dyn Stepper, path: usize, x: &mut [f64], mut obs: O) -> Result<O::Output> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(path as u64);
    x.copy_from_slice(&plan.start);
    obs.visit(0, plan.start_time, x)?;
    for k in 0..plan.steps {
        let (t, next) = (plan.time(k), plan.time(k + 1));
        stepper.step(t, next - t, x, &mut rng)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::PathDivergence { path, step: k + 1 });
        }
        obs.visit(k + 1, next, x)?;
    }
    Ok(obs.finish())
}

/// Simulates every path of `plan` and hands its states to a fresh observer.
/// Path `p` draws from stream `p` of the seeded generator, so results do not
/// depend on how paths are spread over worker threads; outputs come back in
/// path order.
pub fn simulate_observed<O, M>(spec: &ChainSpec, plan: &SimulationPlan, scheme: Scheme, make: M) -> Result<Vec<O::Output>>
where
    O: PathObserver,
    M: Fn(usize) -> O + Sync,
{
    plan.validate(spec)?;
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(plan.paths);
    let chunk = plan.paths.div_ceil(workers);
    let run = |lo: usize, hi: usize| -> Result<Vec<O::Output>> {
        let mut stepper: Box<dyn Stepper> = match scheme {
            Scheme::Euler => Box::new(EulerStep::new(spec)),
            Scheme::PiecewiseFrozen => Box::new(FrozenStep::new(spec)),
        };
        let mut x = vec![0.0; spec.dim()];
        (lo..hi).map(|p| run_path(plan, stepper.as_mut(), p, &mut x, make(p))).collect()
    };
    if workers <= 1 {
        return run(0, plan.paths);
    }
    thread::scope(|scope| {
        let run = &run;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * chunk).min(plan.paths);
                let hi = ((w + 1) * chunk).min(plan.paths);
                scope.spawn(move || run(lo, hi))
            })
            .collect();
        let mut all = Vec::with_capacity(plan.paths);
        for h in handles {
            all.extend(h.join().expect("simulation worker panicked")?);
        }
        Ok(all)
    })
}

struct Recorder<'a> {
    keep: &'a [bool],
    states: Vec<f64>,
}

impl PathObserver for Recorder<'_> {
    type Output = Vec<f64>;

    fn visit(&mut self, step: usize, _t: f64, x: &[f64]) -> Result<()> {
        if self.keep[step] {
            self.states.extend_from_slice(x);
        }
        Ok(())
    }

    fn finish(self) -> Vec<f64> {
        self.states
    }
}

pub fn simulate(spec: &ChainSpec, plan: &SimulationPlan, scheme: Scheme) -> Result<PathEnsemble> {
    let steps = plan.recorded_steps();
    let mut keep = vec![false; plan.steps + 1];
    for &k in &steps {
        keep[k] = true;
    }
    let per_path = simulate_observed(spec, plan, scheme, |_| Recorder {
        keep: &keep,
        states: Vec::with_capacity(steps.len() * spec.dim()),
    })?;
    Ok(PathEnsemble {
        model: spec.name.clone(),
        scheme,
        start_time: plan.start_time,
        start: plan.start.clone(),
        horizon: plan.horizon,
        steps: plan.steps,
        seed: plan.seed,
        times: steps.iter().map(|&k| plan.time(k)).collect(),
        dim: spec.dim(),
        paths: plan.paths,
        states: per_path.concat(),
    })
}

/// Euler–Maruyama: drift on every block, `√a` applied to the first block only.
pub fn euler_simulate(spec: &ChainSpec, plan: &SimulationPlan) -> Result<PathEnsemble> {
    simulate(spec, plan, Scheme::Euler)
}

/// On each step the coefficients are frozen at the step start (diffusion
/// `a(t_k, X_{t_k})`, drift linearized about `X_{t_k}`) and the step is drawn
/// exactly from the resulting Gaussian.
pub fn piecewise_frozen_simulate(spec: &ChainSpec, plan: &SimulationPlan) -> Result<PathEnsemble> {
    simulate(spec, plan, Scheme::PiecewiseFrozen)
}

/// Evaluates `(∂_t + L_t)φ` with drift and diffusion supplied by the caller.
struct GeneratorBuffers {
    opts: GeneratorOptions,
    grad: Vec<f64>,
    hess: Vec<f64>,
    drift: Vec<f64>,
}

impl GeneratorBuffers {
    fn new(spec: &ChainSpec) -> Self {
        GeneratorBuffers {
            opts: GeneratorOptions::default(),
            grad: vec![0.0; spec.dim()],
            hess: vec![0.0; spec.d * spec.d],
            drift: vec![0.0; spec.dim()],
        }
    }

    fn parabolic(&mut self, spec: &ChainSpec, phi: &dyn TestFunction, t: f64, x: &[f64], a: &DMatrix<f64>) -> Result<f64> {
        derivatives(phi, t, x, spec.d, &self.opts, &mut self.grad, &mut self.hess)?;
        let dt = match phi.time_derivative(t, x) {
            Some(v) => v,
            None => {
                let h = 1e-5 * (1.0 + t.abs());
                (phi.value(t + h, x) - phi.value(t - h, x)) / (2.0 * h)
            }
        };
        let v = generator_from_parts(&self.drift, a, &self.grad, &self.hess, spec.d) + dt;
        if !v.is_finite() {
            return Err(Error::ModelEvaluation { what: "generator", t });
        }
        Ok(v)
    }
}

/// `φ(t, X_t) - φ(s, x) - ∫_s^t (∂_u + L_u)φ(u, X_u) du` averaged over the
/// paths at each checkpoint, the time integral by the trapezoid rule on the
/// recorded grid.
pub fn martingale_residual(spec: &ChainSpec, phi: &dyn TestFunction, ensemble: &PathEnsemble, times: &[f64]) -> Result<Vec<MeanEstimate>> {
    let marks = times.iter().map(|&t| ensemble.time_index(t)).collect::<Result<Vec<_>>>()?;
    let mut acc = vec![Accumulator::default(); marks.len()];
    let mut buf = GeneratorBuffers::new(spec);
    let mut values = vec![0.0; ensemble.times.len()];
    for p in 0..ensemble.paths() {
        let phi0 = phi.value(ensemble.start_time, &ensemble.start);
        let mut integral = 0.0;
        let mut prev = 0.0;
        for (k, &t) in ensemble.times.iter().enumerate() {
            let x = ensemble.state(p, k);
            spec.drift_into(t, x, &mut buf.drift);
            let g = buf.parabolic(spec, phi, t, x, &spec.diffusion(t, x))?;
            if k > 0 {
                integral += 0.5 * (ensemble.times[k] - ensemble.times[k - 1]) * (prev + g);
            }
            prev = g;
            values[k] = phi.value(t, x) - phi0 - integral;
        }
        for (a, &k) in acc.iter_mut().zip(&marks) {
            a.push(values[k]);
        }
    }
    Ok(acc.iter().map(|a| a.estimate()).collect())
}

struct MartingaleObserver<'a> {
    spec: &'a ChainSpec,
    phis: &'a [&'a dyn TestFunction],
    marks: &'a [usize],
    buf: GeneratorBuffers,
    start: Vec<f64>,
    integral: Vec<f64>,
    prev: Vec<f64>,
    prev_t: f64,
    /// `[checkpoint][function]`
    out: Vec<f64>,
}

impl PathObserver for MartingaleObserver<'_> {
    type Output = Vec<f64>;

    fn visit(&mut self, step: usize, t: f64, x: &[f64]) -> Result<()> {
        let spec = self.spec;
        spec.drift_into(t, x, &mut self.buf.drift);
        let a = spec.diffusion(t, x);
        let h = t - self.prev_t;
        for (j, phi) in self.phis.iter().enumerate() {
            let g = self.buf.parabolic(spec, *phi, t, x, &a)?;
            if step == 0 {
                self.start[j] = phi.value(t, x);
            } else {
                self.integral[j] += 0.5 * h * (self.prev[j] + g);
            }
            self.prev[j] = g;
        }
        self.prev_t = t;
        for (c, _) in self.marks.iter().enumerate().filter(|(_, &m)| m == step) {
            for (j, phi) in self.phis.iter().enumerate() {
                self.out[c * self.phis.len() + j] = phi.value(t, x) - self.start[j] - self.integral[j];
            }
        }
        Ok(())
    }

    fn finish(self) -> Vec<f64> {
        self.out
    }
}

/// Martingale residuals of several test functions at several checkpoints,
/// accumulated along the full step grid without storing paths. Returns
/// `[function][checkpoint]`.
pub fn martingale_study(
    spec: &ChainSpec,
    phis: &[&dyn TestFunction],
    plan: &SimulationPlan,
    scheme: Scheme,
    checkpoints: &[f64],
) -> Result<Vec<Vec<MeanEstimate>>> {
    let marks = checkpoints.iter().map(|&t| plan.step_of(t)).collect::<Result<Vec<_>>>()?;
    let m = phis.len();
    let per_path = simulate_observed(spec, plan, scheme, |_| MartingaleObserver {
        spec,
        phis,
        marks: &marks,
        buf: GeneratorBuffers::new(spec),
        start: vec![0.0; m],
        integral: vec![0.0; m],
        prev: vec![0.0; m],
        prev_t: plan.start_time,
        out: vec![0.0; m * marks.len()],
    })?;
    let mut acc = vec![vec![Accumulator::default(); marks.len()]; m];
    for row in &per_path {
        for c in 0..marks.len() {
            for j in 0..m {
                acc[j][c].push(row[c * m + j]);
            }
        }
    }
    Ok(acc.iter().map(|r| r.iter().map(|a| a.estimate()).collect()).collect())
}

/// `E ∫_s^T f(t, X_t) dt`, the time integral by the trapezoid rule on the
/// recorded grid.
pub fn occupation_estimate(f: &dyn SpaceTimeField, ensemble: &PathEnsemble) -> MeanEstimate {
    let mut acc = Accumulator::default();
    for p in 0..ensemble.paths() {
        let mut total = 0.0;
        let mut prev = 0.0;
        for (k, &t) in ensemble.times.iter().enumerate() {
            let v = f.value(t, ensemble.state(p, k));
            if k > 0 {
                total += 0.5 * (t - ensemble.times[k - 1]) * (prev + v);
            }
            prev = v;
        }
        acc.push(total);
    }
    acc.estimate()
}

/// Affine majorant `C(1 + |x|)‖f‖_p` of occupation estimates over start points.
#[derive(Debug, Clone, Serialize)]
pub struct KrylovFit {
    pub distances: Vec<f64>,
    pub estimates: Vec<MeanEstimate>,
    pub lp_norm: f64,
    /// smallest `C` whose majorant covers every upper confidence bound
    pub constant: f64,
    /// majorant minus upper confidence bound, per start point
    pub margins: Vec<f64>,
    /// least-squares line of the normalized upper bounds against `|x|`
    pub line: LinearFit,
    /// the last secant slope exceeds the first one beyond the noise
    pub superlinear: bool,
}

impl KrylovFit {
    pub fn passes(&self) -> bool {
        self.constant.is_finite() && self.margins.iter().all(|m| *m >= 0.0) && !self.superlinear
    }
}

/// Fits the Krylov majorant to estimates taken at start points of norm `distances`
/// (sorted increasingly), using upper bounds `|mean| + 3 SE`.
pub fn krylov_fit(distances: &[f64], estimates: &[MeanEstimate], lp_norm: f64) -> Result<KrylovFit> {
    if distances.len() != estimates.len() || distances.len() < 3 {
        return Err(Error::Usage("Krylov fit needs at least three start points".into()));
    }
    if !(lp_norm > 0.0) {
        return Err(Error::Domain("the field norm must be positive".into()));
    }
    let upper: Vec<f64> = estimates.iter().map(|e| (e.mean.abs() + 3.0 * e.std_error) / lp_norm).collect();
    let constant = distances
        .iter()
        .zip(&upper)
        .map(|(r, u)| u / (1.0 + r))
        .fold(0.0, f64::max);
    let margins = distances.iter().zip(&upper).map(|(r, u)| (constant * (1.0 + r) - u) * lp_norm).collect();
    let line = linear_fit(distances, &upper);
    let secant = |i: usize| (upper[i + 1] - upper[i]) / (distances[i + 1] - distances[i]);
    let k = distances.len() - 2;
    let noise = 3.0 * (estimates[k].std_error + estimates[k + 1].std_error) / (lp_norm * (distances[k + 1] - distances[k]));
    let superlinear = secant(k) > secant(0).max(0.0) + noise;
    Ok(KrylovFit {
        distances: distances.to_vec(),
        estimates: estimates.to_vec(),
        lp_norm,
        constant,
        margins,
        line,
        superlinear,
    })
}

/// Characteristic `θ_{t,s₀}(x₀)` at the recorded times of the ensemble.
fn reference_curve(spec: &ChainSpec, ensemble: &PathEnsemble, x0: &[f64]) -> Result<Vec<DVector<f64>>> {
    let solver = FlowSolver::new(spec);
    ensemble.times.iter().map(|&t| solver.flow(t, ensemble.start_time, x0)).collect()
}

fn distance(x: &[f64], y: &DVector<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `sup_k |X_{t_k} - θ_{t_k,s}(x)|` per path over the recorded grid.
pub fn sup_deviations(spec: &ChainSpec, ensemble: &PathEnsemble) -> Result<Vec<f64>> {
    let curve = reference_curve(spec, ensemble, &ensemble.start)?;
    Ok((0..ensemble.paths())
        .map(|p| (0..curve.len()).map(|k| distance(ensemble.state(p, k), &curve[k])).fold(0.0, f64::max))
        .collect())
}

/// Smallest `C ≥ 1` with `g(C) ≥ target`, for `g` increasing.
fn smallest_constant(g: impl Fn(f64) -> f64, target: f64) -> f64 {
    if g(1.0) >= target {
        return 1.0;
    }
    let mut hi = 2.0;
    while g(hi) < target {
        hi *= 2.0;
        if hi > 1e15 {
            return f64::INFINITY;
        }
    }
    let mut lo = hi / 2.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Empirical `P[sup_t |X_t - θ_{t,s}(x)| ≥ δ]` over a grid of `δ` with the
/// Gaussian-type majorant `C·exp(-δ²/(C·T·v))`, where `v` is the variance scale
/// read off the regression of `ln P` on `δ²`.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationTail {
    pub deltas: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Wilson 95% intervals
    pub intervals: Vec<(f64, f64)>,
    pub sample_size: usize,
    /// `ln P` against `δ²` over the points with `0 < P < 1`
    pub fit: Option<LinearFit>,
    pub variance_scale: f64,
    pub constant: f64,
    pub bounds: Vec<f64>,
}

impl DeviationTail {
    pub fn within_bound(&self) -> bool {
        self.constant.is_finite() && self.probabilities.iter().zip(&self.bounds).all(|(p, b)| p <= b)
    }

    /// Slopes of `ln P` against `δ²` between consecutive informative points.
    pub fn local_slopes(&self) -> Vec<f64> {
        let pts: Vec<(f64, f64)> = self
            .deltas
            .iter()
            .zip(&self.probabilities)
            .filter(|(_, p)| **p > 0.0 && **p < 1.0)
            .map(|(d, p)| (d * d, p.ln()))
            .collect();
        pts.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect()
    }

    /// Fitted slope negative and every local slope within `tol` (relative) of it.
    pub fn slope_consistent(&self, tol: f64) -> bool {
        match self.fit {
            Some(f) if f.slope < 0.0 => {
                let s = self.local_slopes();
                !s.is_empty() && s.iter().all(|v| ((v - f.slope) / f.slope).abs() <= tol)
            }
            _ => false,
        }
    }
}

pub fn deviation_tail(spec: &ChainSpec, ensemble: &PathEnsemble, deltas: &[f64]) -> Result<DeviationTail> {
    if deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::Domain("deviation levels must be nonnegative".into()));
    }
    let sups = sup_deviations(spec, ensemble)?;
    let n = sups.len();
    let mut probabilities = Vec::with_capacity(deltas.len());
    let mut intervals = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let hits = sups.iter().filter(|s| **s >= d).count();
        probabilities.push(hits as f64 / n as f64);
        intervals.push(wilson_interval(hits, n, 1.96));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = deltas
        .iter()
        .zip(&probabilities)
        .filter(|(_, p)| **p > 0.0 && **p < 1.0)
        .map(|(d, p)| (d * d, p.ln()))
        .unzip();
    let span = ensemble.horizon - ensemble.start_time;
    let fit = (xs.len() >= 2).then(|| linear_fit(&xs, &ys));
    let (variance_scale, constant, bounds) = match fit {
        Some(f) if f.slope < 0.0 => {
            let v = -1.0 / (span * f.slope);
            let c = deltas
                .iter()
                .zip(&probabilities)
                .filter(|(_, p)| **p > 0.0)
                .map(|(d, p)| {
                    let a = d * d / (span * v);
                    smallest_constant(|c| c.ln() - a / c, p.ln())
                })
                .fold(1.0, f64::max);
            let bounds = deltas.iter().map(|d| c * (-d * d / (c * span * v)).exp()).collect();
            (v, c, bounds)
        }
        _ => (f64::NAN, f64::NAN, vec![f64::NAN; deltas.len()]),
    };
    Ok(DeviationTail {
        deltas: deltas.to_vec(),
        probabilities,
        intervals,
        sample_size: n,
        fit,
        variance_scale,
        constant,
        bounds,
    })
}

/// Mean number of passages `τ_{2k} ≤ T` of `|X_t - θ_{t,s₀}(x₀)|` to the outer
/// level after alternately returning to the inner one, with `s₀` the ensemble
/// start time. Hitting times are the first recorded times at or beyond a level;
/// a path that starts outside the outer level first has to come back to it.
pub fn tube_excursions(spec: &ChainSpec, ensemble: &PathEnsemble, x0: &[f64], inner: f64, outer: f64) -> Result<MeanEstimate> {
    if !(inner > 0.0 && inner < outer) {
        return Err(Error::Domain(format!("tube radii must satisfy 0 < {inner} < {outer}")));
    }
    spec.check_point(x0)?;
    let curve = reference_curve(spec, ensemble, x0)?;
    let mut acc = Accumulator::default();
    for p in 0..ensemble.paths() {
        let mut count = 0usize;
        let first = distance(ensemble.state(p, 0), &curve[0]);
        let mut from_above = first > outer;
        let mut waiting_outer = true;
        for (k, c) in curve.iter().enumerate() {
            let dev = distance(ensemble.state(p, k), c);
            if waiting_outer {
                let hit = if from_above { dev <= outer } else { dev >= outer };
                if hit {
                    count += 1;
                    waiting_outer = false;
                    from_above = false;
                }
            }
            if !waiting_outer && dev <= inner {
                waiting_outer = true;
            }
        }
        acc.push(count as f64);
    }
    Ok(acc.estimate())
}

/// Anisotropic bin layout: block-`i` widths `width_factor·(t - s)^{(2i-1)/2}`
/// over `±half_extent·(t - s)^{(2i-1)/2}` around the flow of the start point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Binning {
    pub width_factor: f64,
    pub half_extent: f64,
}

impl Default for Binning {
    fn default() -> Self {
        Binning {
            width_factor: 0.6,
            half_extent: 6.0,
        }
    }
}

/// Tensor histogram of the ensemble at one time slice. Samples beyond the
/// layout are counted in `outside`, so `Σ counts + outside = total`.
#[derive(Debug, Clone, Serialize)]
pub struct DensityHistogram {
    pub time: f64,
    pub elapsed: f64,
    pub center: Vec<f64>,
    pub widths: Vec<f64>,
    pub edges: Vec<Vec<f64>>,
    /// row-major over the coordinates
    pub counts: Vec<usize>,
    pub outside: usize,
    pub total: usize,
}

impl DensityHistogram {
    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.edges.len()];
        for a in (0..self.edges.len()).rev() {
            let m = self.edges[a].len() - 1;
            idx[a] = k % m;
            k /= m;
        }
        idx
    }

    /// Lower and upper corners of bin `k`.
    pub fn bin_bounds(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let idx = self.multi_index(k);
        let lo = idx.iter().zip(&self.edges).map(|(&i, e)| e[i]).collect();
        let hi = idx.iter().zip(&self.edges).map(|(&i, e)| e[i + 1]).collect();
        (lo, hi)
    }

    pub fn bin_center(&self, k: usize) -> Vec<f64> {
        let (lo, hi) = self.bin_bounds(k);
        lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn bin_volume(&self) -> f64 {
        self.widths.iter().product()
    }

    /// Empirical density on bin `k`.
    pub fn density(&self, k: usize) -> f64 {
        self.counts[k] as f64 / (self.total as f64 * self.bin_volume())
    }

    /// Probability of every bin under `density`, by a tensor Gauss–Legendre rule
    /// of `order` points per axis.
    pub fn probabilities(&self, density: impl Fn(&[f64]) -> Result<f64>, order: usize) -> Result<Vec<f64>> {
        let rule = legendre(order);
        let dim = self.edges.len();
        let mut out = Vec::with_capacity(self.bin_count());
        let mut y = vec![0.0; dim];
        for k in 0..self.bin_count() {
            let (lo, hi) = self.bin_bounds(k);
            let axes: Vec<Vec<(f64, f64)>> = (0..dim).map(|a| rule.on(lo[a], hi[a]).collect()).collect();
            let mut total = 0.0;
            let mut idx = vec![0usize; dim];
            'outer: loop {
                let mut w = 1.0;
                for a in 0..dim {
                    let (u, wu) = axes[a][idx[a]];
                    y[a] = u;
                    w *= wu;
                }
                total += w * density(&y)?;
                for a in (0..dim).rev() {
                    idx[a] += 1;
                    if idx[a] < order {
                        continue 'outer;
                    }
                    idx[a] = 0;
                }
                break;
            }
            out.push(total);
        }
        Ok(out)
    }

    /// `L¹` distance between the empirical bin law and `density`, the mass
    /// outside the layout counted as one extra bin.
    pub fn l1_distance(&self, density: impl Fn(&[f64]) -> Result<f64>, order: usize) -> Result<f64> {
        let probs = self.probabilities(density, order)?;
        let n = self.total as f64;
        let inside: f64 = probs.iter().sum();
        let mut dist: f64 = self.counts.iter().zip(&probs).map(|(&c, p)| (c as f64 / n - p).abs()).sum();
        dist += (self.outside as f64 / n - (1.0 - inside)).abs();
        Ok(dist)
    }

    /// Rows `bin, center…, count, density`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["bin".to_string()];
        header.extend((0..self.edges.len()).map(|k| format!("y{k}")));
        header.extend(["count".to_string(), "density".to_string()]);
        w.write_record(&header)?;
        for k in 0..self.bin_count() {
            let mut row = vec![k.to_string()];
            row.extend(self.bin_center(k).iter().map(|v| v.to_string()));
            row.push(self.counts[k].to_string());
            row.push(self.density(k).to_string());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Histogram of the ensemble at recorded time `t`, centered on `θ_{t,s}(x)`.
pub fn density_estimate(spec: &ChainSpec, ensemble: &PathEnsemble, t: f64, binning: &Binning) -> Result<DensityHistogram> {
    if ensemble.paths() == 0 {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    if !(binning.width_factor > 0.0 && binning.half_extent > 0.0) {
        return Err(Error::Domain("bin width and extent must be positive".into()));
    }
    let k = ensemble.time_index(t)?;
    let elapsed = t - ensemble.start_time;
    if !(elapsed > 0.0) {
        return Err(Error::DegenerateInterval(t));
    }
    let center = FlowSolver::new(spec).flow(t, ensemble.start_time, &ensemble.start)?;
    let per_axis = 2 * (binning.half_extent / binning.width_factor).ceil() as usize + 1;
    let mut widths = Vec::with_capacity(spec.dim());
    let mut edges = Vec::with_capacity(spec.dim());
    for a in 0..spec.dim() {
        let block = (a / spec.d + 1) as f64;
        let w = binning.width_factor * elapsed.powf(block - 0.5);
        let lo = center[a] - 0.5 * per_axis as f64 * w;
        edges.push((0..=per_axis).map(|j| lo + j as f64 * w).collect::<Vec<_>>());
        widths.push(w);
    }
    let mut counts = vec![0usize; per_axis.pow(spec.dim() as u32)];
    let mut outside = 0;
    for p in 0..ensemble.paths() {
        let y = ensemble.state(p, k);
        let mut flat = 0usize;
        let mut inside = true;
        for a in 0..y.len() {
            let j = ((y[a] - edges[a][0]) / widths[a]).floor();
            if !(j >= 0.0 && j < per_axis as f64) {
                inside = false;
                break;
            }
            flat = flat * per_axis + j as usize;
        }
        if inside {
            counts[flat] += 1;
        } else {
            outside += 1;
        }
    }
    Ok(DensityHistogram {
        time: t,
        elapsed,
        center: center.iter().cloned().collect(),
        widths,
        edges,
        counts,
        outside,
        total: ensemble.paths(),
    })
}

/// Bins need this many samples to enter the envelope check.
pub const QUALIFIED_BIN_COUNT: usize = 50;
/// Fraction of qualified bins the envelopes must sandwich.
pub const ENVELOPE_COVERAGE: f64 = 0.99;

/// Two-sided multi-scale Gaussian envelopes around an empirical density:
/// `C_low⁻¹ Δ^{-n²d/2} exp(-C_low e) ≤ p ≤ C_up Δ^{-n²d/2} exp(-e/C_up)` with
/// `e = Δ|𝕋_Δ⁻¹(θ_{t,s}(x) - y)|²`.
#[derive(Debug, Clone, Serialize)]
pub struct AronsonReport {
    pub lower_constant: f64,
    pub upper_constant: f64,
    pub qualified_bins: usize,
    pub covered_bins: usize,
    pub coverage: f64,
}

impl AronsonReport {
    pub fn passes(&self) -> bool {
        self.lower_constant.is_finite() && self.upper_constant.is_finite() && self.coverage >= ENVELOPE_COVERAGE
    }
}

/// Fits both envelope constants on the bins holding at least
/// [`QUALIFIED_BIN_COUNT`] samples: each constant is the quantile of the
/// per-bin requirements that leaves at most half of the allowed misses to it.
pub fn aronson_check(spec: &ChainSpec, hist: &DensityHistogram) -> Result<AronsonReport> {
    let (n, d) = (spec.n, spec.d);
    let delta = hist.elapsed;
    let scale = scale_matrix(delta, n, d)?;
    let log_scale = -0.5 * (n * n * d) as f64 * delta.ln();
    let mut bins = Vec::new();
    for k in 0..hist.bin_count() {
        if hist.counts[k] < QUALIFIED_BIN_COUNT {
            continue;
        }
        let y = hist.bin_center(k);
        let e = delta
            * (0..y.len())
                .map(|a| ((hist.center[a] - y[a]) / scale.entry(a)).powi(2))
                .sum::<f64>();
        bins.push((hist.density(k).ln() - log_scale, e));
    }
    if bins.is_empty() {
        return Err(Error::InsufficientData(format!("no bin holds {QUALIFIED_BIN_COUNT} samples")));
    }
    let mut low: Vec<f64> = bins.iter().map(|&(lq, e)| smallest_constant(|c| c.ln() + c * e, -lq)).collect();
    let mut up: Vec<f64> = bins.iter().map(|&(lq, e)| smallest_constant(|c| c.ln() - e / c, lq)).collect();
    let quantile = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let level = 1.0 - 0.5 * (1.0 - ENVELOPE_COVERAGE);
        let idx = ((level * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
        v[idx]
    };
    let lower_constant = quantile(&mut low);
    let upper_constant = quantile(&mut up);
    let covered_bins = bins
        .iter()
        .filter(|&&(lq, e)| {
            let (cl, cu) = (lower_constant, upper_constant);
            -cl.ln() - cl * e <= lq + 1e-12 && lq <= cu.ln() - e / cu + 1e-12
        })
        .count();
    Ok(AronsonReport {
        lower_constant,
        upper_constant,
        qualified_bins: bins.len(),
        covered_bins,
        coverage: covered_bins as f64 / bins.len() as f64,
    })
}
