//! Deterministic flows of the drift ODE, resolvents of the system linearized
//! along a frozen characteristic, and the associated affine flow.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{expm, expm_nilpotent, is_nilpotent, ScaleMatrix};
use crate::model::ChainSpec;
use crate::quadrature::legendre;

const OVERFLOW_GUARD: f64 = 1e150;

/// Row-major dense product `out = a · b` for square `dim×dim` matrices.
#[inline]
pub(crate) fn matmul(dim: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += a[i * dim + k] * b[k * dim + j];
            }
            out[i * dim + j] = acc;
        }
    }
}

#[inline]
pub(crate) fn matvec(dim: usize, a: &[f64], v: &[f64], out: &mut [f64]) {
    for i in 0..dim {
        let mut acc = 0.0;
        for k in 0..dim {
            acc += a[i * dim + k] * v[k];
        }
        out[i] = acc;
    }
}

fn to_flat(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = m[(i, j)];
        }
    }
    out
}

fn from_flat(dim: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(dim, dim, v)
}

#[derive(Debug, Clone)]
struct AffineFlow {
    /// `[[A, b], [0, 0]]`
    augmented: DMatrix<f64>,
    nilpotent: bool,
}

/// Fixed-step RK4 integrator for `dθ/dv = F(v, θ)`, with closed forms for affine drifts.
#[derive(Debug, Clone)]
pub struct FlowSolver {
    spec: ChainSpec,
    steps_per_unit: usize,
    horizon: f64,
    affine: Option<AffineFlow>,
    transmission: Option<(Vec<f64>, DMatrix<f64>)>,
}

impl FlowSolver {
    pub fn new(spec: &ChainSpec) -> Self {
        FlowSolver::with_steps(spec, 256)
    }

    pub fn with_steps(spec: &ChainSpec, steps_per_unit: usize) -> Self {
        let dim = spec.dim();
        let affine = spec.affine().map(|(a, b)| {
            let mut aug = DMatrix::zeros(dim + 1, dim + 1);
            aug.view_mut((0, 0), (dim, dim)).copy_from(a);
            aug.view_mut((0, dim), (dim, 1)).copy_from(b);
            AffineFlow {
                nilpotent: is_nilpotent(&aug),
                augmented: aug,
            }
        });
        let transmission = spec.constant_transmission().map(|s| (to_flat(s), s.clone()));
        FlowSolver {
            spec: spec.clone(),
            steps_per_unit: steps_per_unit.max(1),
            horizon: 1.0,
            affine,
            transmission,
        }
    }

    /// Largest admissible `|t - s|` is twice this horizon.
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps_per_unit(&self) -> usize {
        self.steps_per_unit
    }

    pub fn is_affine(&self) -> bool {
        self.affine.is_some()
    }

    pub(crate) fn steps_for(&self, span: f64) -> usize {
        ((span.abs() * self.steps_per_unit as f64).ceil() as usize).max(1)
    }

    fn check_span(&self, t: f64, s: f64) -> Result<()> {
        if !(t.is_finite() && s.is_finite()) {
            return Err(Error::Domain("non-finite time".into()));
        }
        if (t - s).abs() > 2.0 * self.horizon * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "flow span |{t} - {s}| exceeds twice the horizon {}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Affine flow map `x ↦ E x + c` over `[s, t]`, when the drift is affine.
    pub(crate) fn affine_map(&self, t: f64, s: f64) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let aff = self.affine.as_ref()?;
        let dim = self.spec.dim();
        let e = expm(&aff.augmented, t - s, aff.nilpotent);
        Some((
            e.view((0, 0), (dim, dim)).into_owned(),
            e.view((0, dim), (dim, 1)).column(0).into_owned(),
        ))
    }

    /// `θ_{t,s}(x)`: solution at time `t` of the drift ODE started from `x` at time `s`.
    pub fn flow(&self, t: f64, s: f64, x: &[f64]) -> Result<DVector<f64>> {
        self.spec.check_point(x)?;
        self.check_span(t, s)?;
        let mut out = DVector::from_column_slice(x);
        if t == s {
            return Ok(out);
        }
        if let Some((e, c)) = self.affine_map(t, s) {
            out = e * out + c;
        } else {
            self.rk4_in_place(t, s, out.as_mut_slice())?;
        }
        if out.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD) {
            return Err(Error::Divergence { from: s, to: t });
        }
        Ok(out)
    }

    /// In-place RK4 integration of the drift ODE from `s` to `t`.
    pub(crate) fn rk4_in_place(&self, t: f64, s: f64, x: &mut [f64]) -> Result<()> {
        let dim = x.len();
        let steps = self.steps_for(t - s);
        let h = (t - s) / steps as f64;
        let mut k1 = vec![0.0; dim];
        let mut k2 = vec![0.0; dim];
        let mut k3 = vec![0.0; dim];
        let mut k4 = vec![0.0; dim];
        let mut tmp = vec![0.0; dim];
        for step in 0..steps {
            let u = s + step as f64 * h;
            self.spec.drift_into(u, x, &mut k1);
            for i in 0..dim {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            self.spec.drift_into(u + 0.5 * h, &tmp, &mut k2);
            for i in 0..dim {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            self.spec.drift_into(u + 0.5 * h, &tmp, &mut k3);
            for i in 0..dim {
                tmp[i] = x[i] + h * k3[i];
            }
            self.spec.drift_into(u + h, &tmp, &mut k4);
            let mut big = false;
            for i in 0..dim {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                big |= !x[i].is_finite() || x[i].abs() > OVERFLOW_GUARD;
            }
            if big {
                return Err(Error::Divergence { from: s, to: t });
            }
        }
        Ok(())
    }

    /// `θ_{t,s}(x)` at every time of the ascending grid `times` (all `≥ s`).
    pub fn flow_along(&self, s: f64, x: &[f64], times: &[f64]) -> Result<Vec<DVector<f64>>> {
        let mut out = Vec::with_capacity(times.len());
        let mut cur = DVector::from_column_slice(x);
        let mut tc = s;
        for &t in times {
            cur = self.flow(t, tc, cur.as_slice())?;
            tc = t;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Resolvent of the system linearized along the characteristic through `(T, y)`.
    pub fn resolvent(&self, freeze_time: f64, y: &[f64], t: f64, s: f64) -> Result<DMatrix<f64>> {
        let lin = LinearizedFlow::new(self, freeze_time, y, t.min(s).min(freeze_time), t.max(s).max(freeze_time))?;
        lin.resolvent(t, s)
    }

    /// `𝕋_{t-s}⁻¹ R̃(u, s) 𝕋_{t-s}` for the freeze `(T, y)`.
    pub fn scaled_resolvent(&self, freeze_time: f64, y: &[f64], s: f64, t: f64, u: f64) -> Result<DMatrix<f64>> {
        if t == s {
            return Err(Error::DegenerateInterval(s));
        }
        let lo = s.min(t).min(u).min(freeze_time);
        let hi = s.max(t).max(u).max(freeze_time);
        let lin = LinearizedFlow::new(self, freeze_time, y, lo, hi)?;
        let r = lin.resolvent(u, s)?;
        let scale = ScaleMatrix::new((t - s).abs(), self.spec.n, self.spec.d)?;
        let dim = self.spec.dim();
        Ok(DMatrix::from_fn(dim, dim, |i, j| r[(i, j)] * scale.entry(j) / scale.entry(i)))
    }
}

/// The drift linearized along `u ↦ θ_{u,T}(y)` on a time window containing `T`.
///
/// Stores `θ_u`, `R̃(T, u)` and `R̃(u, T)` on the RK4 grid with their time
/// derivatives, and evaluates in between by cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct LinearizedFlow {
    spec: ChainSpec,
    freeze_time: f64,
    freeze_point: Vec<f64>,
    lo: f64,
    hi: f64,
    dim: usize,
    steps_per_unit: usize,
    constant: Option<DMatrix<f64>>,
    nodes: Vec<f64>,
    /// per node: θ, F(θ), Φ = R̃(T,u), Φ', Ψ = R̃(u,T), Ψ'
    theta: Vec<f64>,
    dtheta: Vec<f64>,
    phi: Vec<f64>,
    dphi: Vec<f64>,
    psi: Vec<f64>,
    dpsi: Vec<f64>,
}

struct Derivs<'a> {
    spec: &'a ChainSpec,
    dim: usize,
    df: DMatrix<f64>,
    dflat: Vec<f64>,
}

impl Derivs<'_> {
    /// Right-hand sides at `(u, θ, Φ, Ψ)`.
    fn eval(&mut self, u: f64, th: &[f64], ph: &[f64], ps: &[f64], dth: &mut [f64], dph: &mut [f64], dps: &mut [f64]) {
        let dim = self.dim;
        self.spec.drift_into(u, th, dth);
        self.spec.transmission_into(u, th, &mut self.df);
        for i in 0..dim {
            for j in 0..dim {
                self.dflat[i * dim + j] = self.df[(i, j)];
            }
        }
        matmul(dim, ph, &self.dflat, dph);
        for v in dph.iter_mut() {
            *v = -*v;
        }
        matmul(dim, &self.dflat, ps, dps);
    }
}

impl LinearizedFlow {
    /// Linearization along the characteristic through `(freeze_time, y)` on `[lo, hi] ∋ freeze_time`.
    pub fn new(solver: &FlowSolver, freeze_time: f64, y: &[f64], lo: f64, hi: f64) -> Result<Self> {
        let spec = solver.spec();
        spec.check_point(y)?;
        if !(lo <= freeze_time && freeze_time <= hi) {
            return Err(Error::Usage(format!(
                "freeze time {freeze_time} outside the window [{lo}, {hi}]"
            )));
        }
        solver.check_span(lo, hi)?;
        let dim = spec.dim();
        let mut lin = LinearizedFlow {
            spec: spec.clone(),
            freeze_time,
            freeze_point: y.to_vec(),
            lo,
            hi,
            dim,
            steps_per_unit: solver.steps_per_unit,
            constant: solver.transmission.as_ref().map(|(_, s)| s.clone()),
            nodes: Vec::new(),
            theta: Vec::new(),
            dtheta: Vec::new(),
            phi: Vec::new(),
            dphi: Vec::new(),
            psi: Vec::new(),
            dpsi: Vec::new(),
        };
        if lin.constant.is_some() && solver.is_affine() {
            // everything is available in closed form
            return Ok(lin);
        }
        lin.integrate(solver)?;
        Ok(lin)
    }

    fn integrate(&mut self, solver: &FlowSolver) -> Result<()> {
        let dim = self.dim;
        let dd = dim * dim;
        let mut ident = vec![0.0; dd];
        for i in 0..dim {
            ident[i * dim + i] = 1.0;
        }
        let mut der = Derivs {
            spec: &self.spec,
            dim,
            df: DMatrix::zeros(dim, dim),
            dflat: vec![0.0; dd],
        };
        // two sweeps away from the freeze time; lower sweep stored reversed
        let mut sides: Vec<Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>> = Vec::new();
        for target in [self.lo, self.hi] {
            let mut side = Vec::new();
            let span = target - self.freeze_time;
            let steps = if span == 0.0 { 0 } else { solver.steps_for(span) };
            let h = if steps == 0 { 0.0 } else { span / steps as f64 };
            let mut th = self.freeze_point.clone();
            let mut ph = ident.clone();
            let mut ps = ident.clone();
            let mut dth = vec![0.0; dim];
            let mut dph = vec![0.0; dd];
            let mut dps = vec![0.0; dd];
            let mut u = self.freeze_time;
            der.eval(u, &th, &ph, &ps, &mut dth, &mut dph, &mut dps);
            side.push((u, th.clone(), dth.clone(), ph.clone(), dph.clone(), ps.clone(), dps.clone()));
            let mut k = [
                (vec![0.0; dim], vec![0.0; dd], vec![0.0; dd]),
                (vec![0.0; dim], vec![0.0; dd], vec![0.0; dd]),
                (vec![0.0; dim], vec![0.0; dd], vec![0.0; dd]),
                (vec![0.0; dim], vec![0.0; dd], vec![0.0; dd]),
            ];
            let mut tth = vec![0.0; dim];
            let mut tph = vec![0.0; dd];
            let mut tps = vec![0.0; dd];
            for step in 0..steps {
                let u0 = self.freeze_time + step as f64 * h;
                k[0].0.copy_from_slice(&dth);
                k[0].1.copy_from_slice(&dph);
                k[0].2.copy_from_slice(&dps);
                for stage in 1..4 {
                    let c = if stage == 3 { 1.0 } else { 0.5 };
                    {
                        let prev = &k[stage - 1];
                        for i in 0..dim {
                            tth[i] = th[i] + c * h * prev.0[i];
                        }
                        for i in 0..dd {
                            tph[i] = ph[i] + c * h * prev.1[i];
                            tps[i] = ps[i] + c * h * prev.2[i];
                        }
                    }
                    let (a, b) = k.split_at_mut(stage);
                    let _ = a;
                    let cur = &mut b[0];
                    der.eval(u0 + c * h, &tth, &tph, &tps, &mut cur.0, &mut cur.1, &mut cur.2);
                }
                let mut bad = false;
                for i in 0..dim {
                    th[i] += h / 6.0 * (k[0].0[i] + 2.0 * k[1].0[i] + 2.0 * k[2].0[i] + k[3].0[i]);
                    bad |= !th[i].is_finite() || th[i].abs() > OVERFLOW_GUARD;
                }
                for i in 0..dd {
                    ph[i] += h / 6.0 * (k[0].1[i] + 2.0 * k[1].1[i] + 2.0 * k[2].1[i] + k[3].1[i]);
                    ps[i] += h / 6.0 * (k[0].2[i] + 2.0 * k[1].2[i] + 2.0 * k[2].2[i] + k[3].2[i]);
                    bad |= !ph[i].is_finite() || !ps[i].is_finite();
                }
                if bad {
                    return Err(Error::Divergence {
                        from: self.freeze_time,
                        to: target,
                    });
                }
                u = if step + 1 == steps { target } else { u0 + h };
                der.eval(u, &th, &ph, &ps, &mut dth, &mut dph, &mut dps);
                if dth.iter().chain(dph.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::ModelEvaluation {
                        what: "drift gradient along the characteristic",
                        t: u,
                    });
                }
                side.push((u, th.clone(), dth.clone(), ph.clone(), dph.clone(), ps.clone(), dps.clone()));
            }
            sides.push(side);
        }
        let mut lower = sides.remove(0);
        lower.reverse();
        let upper = sides.remove(0);
        // the freeze node appears in both sweeps
        for entry in lower.into_iter().chain(upper.into_iter().skip(1)) {
            self.nodes.push(entry.0);
            self.theta.extend(entry.1);
            self.dtheta.extend(entry.2);
            self.phi.extend(entry.3);
            self.dphi.extend(entry.4);
            self.psi.extend(entry.5);
            self.dpsi.extend(entry.6);
        }
        Ok(())
    }

    pub fn freeze_time(&self) -> f64 {
        self.freeze_time
    }

    pub fn freeze_point(&self) -> &[f64] {
        &self.freeze_point
    }

    pub fn window(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub(crate) fn is_closed_form(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_time(&self, u: f64) -> Result<()> {
        let tol = 1e-12 * (1.0 + self.hi.abs().max(self.lo.abs()));
        if u < self.lo - tol || u > self.hi + tol {
            return Err(Error::Usage(format!(
                "time {u} outside the linearization window [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Index `k` with `nodes[k] ≤ u ≤ nodes[k+1]`.
    fn locate(&self, u: f64) -> usize {
        let m = self.nodes.len();
        if m < 2 {
            return 0;
        }
        match self.nodes.binary_search_by(|v| v.partial_cmp(&u).unwrap()) {
            Ok(k) => k.min(m - 2),
            Err(k) => k.saturating_sub(1).min(m - 2),
        }
    }

    fn hermite(&self, u: f64, vals: &[f64], ders: &[f64], width: usize, out: &mut [f64]) {
        let k = self.locate(u);
        if self.nodes.len() == 1 {
            out.copy_from_slice(&vals[..width]);
            return;
        }
        let (u0, u1) = (self.nodes[k], self.nodes[k + 1]);
        let h = u1 - u0;
        let s = ((u - u0) / h).clamp(0.0, 1.0);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (a, b) = (&vals[k * width..(k + 1) * width], &vals[(k + 1) * width..(k + 2) * width]);
        let (da, db) = (&ders[k * width..(k + 1) * width], &ders[(k + 1) * width..(k + 2) * width]);
        for i in 0..width {
            out[i] = h00 * a[i] + h10 * h * da[i] + h01 * b[i] + h11 * h * db[i];
        }
    }

    /// `θ_{u,T}(y)` written into `out`.
    pub(crate) fn theta_into(&self, u: f64, out: &mut [f64]) -> Result<()> {
        self.check_time(u)?;
        if self.is_closed_form() {
            let solver = FlowSolver::with_steps(&self.spec, self.steps_per_unit);
            let (e, c) = solver.affine_map(u, self.freeze_time).expect("closed form requires an affine drift");
            let y = DVector::from_column_slice(&self.freeze_point);
            let v = e * y + c;
            out.copy_from_slice(v.as_slice());
            return Ok(());
        }
        self.hermite(u, &self.theta, &self.dtheta, self.dim, out);
        Ok(())
    }

    pub fn theta(&self, u: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        self.theta_into(u, out.as_mut_slice())?;
        Ok(out)
    }

    /// `R̃(T, u)` (row-major) into `out`.
    pub(crate) fn phi_into(&self, u: f64, out: &mut [f64]) -> Result<()> {
        self.check_time(u)?;
        if let (true, Some(s)) = (self.is_closed_form(), &self.constant) {
            out.copy_from_slice(&to_flat(&expm_nilpotent(s, self.freeze_time - u)));
            return Ok(());
        }
        self.hermite(u, &self.phi, &self.dphi, self.dim * self.dim, out);
        Ok(())
    }

    /// `R̃(u, T)` (row-major) into `out`.
    pub(crate) fn psi_into(&self, u: f64, out: &mut [f64]) -> Result<()> {
        self.check_time(u)?;
        if let (true, Some(s)) = (self.is_closed_form(), &self.constant) {
            out.copy_from_slice(&to_flat(&expm_nilpotent(s, u - self.freeze_time)));
            return Ok(());
        }
        self.hermite(u, &self.psi, &self.dpsi, self.dim * self.dim, out);
        Ok(())
    }

    /// `R̃(t, s) = R̃(t, T) R̃(T, s)`.
    pub fn resolvent(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let dim = self.dim;
        if let (true, Some(m)) = (self.is_closed_form(), &self.constant) {
            self.check_time(t)?;
            self.check_time(s)?;
            return Ok(expm_nilpotent(m, t - s));
        }
        let mut ps = vec![0.0; dim * dim];
        let mut ph = vec![0.0; dim * dim];
        let mut out = vec![0.0; dim * dim];
        self.psi_into(t, &mut ps)?;
        self.phi_into(s, &mut ph)?;
        matmul(dim, &ps, &ph, &mut out);
        Ok(from_flat(dim, &out))
    }

    /// Time panels on `[a, b]` aligned with the integration grid.
    pub(crate) fn panels(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        if self.is_closed_form() {
            if self.spec.constant_frozen().is_some() {
                return vec![(a, b)];
            }
            let steps = ((b - a) * self.steps_per_unit as f64).ceil().max(1.0) as usize;
            let h = (b - a) / steps as f64;
            return (0..steps).map(|k| (a + k as f64 * h, if k + 1 == steps { b } else { a + (k + 1) as f64 * h })).collect();
        }
        let mut cuts = vec![a];
        for &u in &self.nodes {
            if u > a && u < b {
                cuts.push(u);
            }
        }
        cuts.push(b);
        cuts.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[0], w[1])).collect()
    }

    /// `m̃(s, t) = ∫_s^t R̃(t, u) (F(u, θ_u) - DF(u, θ_u) θ_u) du` by Gauss–Legendre (order 16 per panel).
    pub fn shift(&self, s: f64, t: f64) -> Result<DVector<f64>> {
        self.check_time(s)?;
        self.check_time(t)?;
        let dim = self.dim;
        let rule = legendre(16);
        let mut acc = DVector::zeros(dim);
        if s == t {
            return Ok(acc);
        }
        let sign = if t >= s { 1.0 } else { -1.0 };
        let mut th = vec![0.0; dim];
        let mut f = vec![0.0; dim];
        let mut df = DMatrix::zeros(dim, dim);
        let psi_t = {
            let mut p = vec![0.0; dim * dim];
            if !self.is_closed_form() {
                self.psi_into(t, &mut p)?;
            }
            p
        };
        let mut ph = vec![0.0; dim * dim];
        let mut r = vec![0.0; dim * dim];
        let mut g = vec![0.0; dim];
        let mut rg = vec![0.0; dim];
        for (a, b) in self.panels(s, t) {
            for (u, w) in rule.on(a, b) {
                self.theta_into(u, &mut th)?;
                self.spec.drift_into(u, &th, &mut f);
                self.spec.transmission_into(u, &th, &mut df);
                for i in 0..dim {
                    let mut v = f[i];
                    for j in 0..dim {
                        v -= df[(i, j)] * th[j];
                    }
                    g[i] = v;
                }
                if let (true, Some(m)) = (self.is_closed_form(), &self.constant) {
                    r.copy_from_slice(&to_flat(&expm_nilpotent(m, t - u)));
                } else {
                    self.phi_into(u, &mut ph)?;
                    matmul(dim, &psi_t, &ph, &mut r);
                }
                matvec(dim, &r, &g, &mut rg);
                for i in 0..dim {
                    acc[i] += sign * w * rg[i];
                }
            }
        }
        Ok(acc)
    }

    /// `θ̃_{t,s}(x) = R̃(t, s) x + m̃(s, t)`.
    pub fn linearized_flow(&self, t: f64, s: f64, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::Usage(format!(
                "point has {} coordinates, linearization expects {}",
                x.len(),
                self.dim
            )));
        }
        let r = self.resolvent(t, s)?;
        Ok(r * DVector::from_column_slice(x) + self.shift(s, t)?)
    }

    /// `θ_t + R̃(t, s)(x - θ_s)`, the same affine map written through the characteristic.
    pub fn linearized_flow_through_characteristic(&self, t: f64, s: f64, x: &[f64]) -> Result<DVector<f64>> {
        let r = self.resolvent(t, s)?;
        let th_s = self.theta(s)?;
        let th_t = self.theta(t)?;
        Ok(th_t + r * (DVector::from_column_slice(x) - th_s))
    }
}

/// One sample of the linearization-error diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizationSample {
    /// `ρ(t - s, y - θ_{t,s}(x))`
    pub rho: f64,
    /// `|ρ 𝕋_{ρ⁻²}(θ_{t,s}(x) - θ̃^{t,y}_{t,s}(x))|`
    pub error: f64,
    /// `|x̃| = |ρ 𝕋_{ρ⁻²}(y - θ_{t,s}(x))|`
    pub rescaled_gap: f64,
    /// `error / ((ρ^η + (t - s)) |x̃|)`
    pub ratio: f64,
}

/// Linearization error of the flow around the characteristic through `(t, y)`, rescaled to the unit sphere.
pub fn linearization_error(solver: &FlowSolver, s: f64, t: f64, x: &[f64], y: &[f64], eta: f64) -> Result<LinearizationSample> {
    let spec = solver.spec();
    let (n, d) = (spec.n, spec.d);
    if !(s < t) {
        return Err(Error::Domain(format!("linearization error needs s < t, got s={s}, t={t}")));
    }
    let fwd = solver.flow(t, s, x)?;
    let lin = LinearizedFlow::new(solver, t, y, s, t)?;
    let approx = lin.linearized_flow_through_characteristic(t, s, x)?;
    let gap: Vec<f64> = (0..n * d).map(|k| y[k] - fwd[k]).collect();
    let rho = crate::metric::rho(t - s, &gap, n, d);
    if !(rho > 0.0) {
        return Err(Error::Domain("linearization error undefined at zero distance".into()));
    }
    let scale = ScaleMatrix::new(rho.powi(-2), n, d)?;
    let mut err = 0.0;
    let mut xt = 0.0;
    for k in 0..n * d {
        err += (rho * scale.entry(k) * (fwd[k] - approx[k])).powi(2);
        xt += (rho * scale.entry(k) * gap[k]).powi(2);
    }
    let (error, rescaled_gap) = (err.sqrt(), xt.sqrt());
    let ratio = if rescaled_gap > 0.0 {
        error / ((rho.powf(eta) + (t - s)) * rescaled_gap)
    } else {
        0.0
    };
    Ok(LinearizationSample {
        rho,
        error,
        rescaled_gap,
        ratio,
    })
}

/// Smallest `ρ` at which the rescaled flow difference is resolved in double precision.
///
/// The last block is scaled by `ρ^{2-2n}` and the ratio divides by another `ρ`, so a
/// roundoff of `ε` in the flows shows up as `ε ρ^{1-2n}` in the ratio. This is the `ρ`
/// where that reaches `1e-6`.
pub fn resolvable_rho(n: usize) -> f64 {
    (f64::EPSILON / 1e-6).powf(1.0 / (2 * n - 1) as f64)
}

/// Linearization-error ratios over `samples` random configurations with `ρ ≤ rho_cut`.
///
/// Configurations are built on the quasi-metric sphere: `y = θ_{t,s}(x) + z` with
/// `ρ(t - s, z)` uniform in `[resolvable_rho(n), rho_cut]` and `t > s`.
pub fn linearization_study<R: rand::Rng + ?Sized>(
    solver: &FlowSolver,
    samples: usize,
    rho_cut: f64,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<LinearizationSample>> {
    let spec = solver.spec();
    let (n, d) = (spec.n, spec.d);
    let floor = resolvable_rho(n);
    if !(rho_cut > floor) {
        return Err(Error::Domain(format!("rho cut {rho_cut} below the resolvable floor {floor:.2e}")));
    }
    let mut out = Vec::with_capacity(samples);
    while out.len() < samples {
        let r = floor + (rho_cut - floor) * (1.0 - rng.random::<f64>());
        let (tau, z) = crate::metric::sample_on_sphere(rng, n, d, r);
        let delta = tau.abs();
        if delta < 1e-12 {
            continue;
        }
        let s = rng.random_range(0.0..(solver.horizon() - delta).max(0.0));
        let t = s + delta;
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fwd = solver.flow(t, s, &x)?;
        let y: Vec<f64> = (0..n * d).map(|k| fwd[k] + z[k]).collect();
        let sample = linearization_error(solver, s, t, &x, &y, eta)?;
        if sample.rescaled_gap > 0.0 {
            out.push(sample);
        }
    }
    Ok(out)
}
