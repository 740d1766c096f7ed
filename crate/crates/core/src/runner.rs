//! Suite orchestration: runs the configured checks and collects report rows.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calderon::{size_statistic, successive_differences, truncation_profile, SingularKernelConfig};
use crate::config::{Budgets, ExperimentConfig, Suite};
use crate::error::{Error, Result};
use crate::field::{ConstantField, GaussianBumpField, SpaceTimeField};
use crate::flow::{linearization_study, resolvable_rho, FlowSolver, LinearizedFlow};
use crate::kernel::{chapman_kolmogorov_error, ProxyKernel};
use crate::metric::{doubling_profile, quasi_constants, QuasiMetricContext, StripGrid};
use crate::model::{ChainSpec, GaussianBump, SpaceTimePoint, TestFunction};
use crate::montecarlo::{
    density_estimate, euler_simulate, krylov_fit, martingale_study, occupation_estimate, piecewise_frozen_simulate, Binning, Record, Scheme,
    SimulationPlan,
};
use crate::parametrix::{backward_pde_residual, green, neumann_apply, remainder_r, GreenConfig};
use crate::quadrature::hermite_grid;
use crate::report::{write_reports, ReportRow};
use crate::stats::linear_fit;

/// Everything a check needs, built once per run.
pub struct CheckContext {
    pub spec: ChainSpec,
    pub horizon: f64,
    pub budgets: Budgets,
    pub seed: u64,
    pub pk: ProxyKernel,
}

impl CheckContext {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.model.build()?;
        let solver = FlowSolver::with_steps(&spec, cfg.budgets.flow_steps_per_unit).with_horizon(cfg.horizon);
        Ok(CheckContext {
            pk: ProxyKernel::with_solver(solver),
            spec,
            horizon: cfg.horizon,
            budgets: cfg.budgets.clone(),
            seed: cfg.seed,
        })
    }

    fn solver(&self) -> &FlowSolver {
        self.pk.solver()
    }

    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn row(&self, suite: Suite, check: &str, statistic: &str, value: f64, bound: f64) -> ReportRow {
        ReportRow::new(suite.name(), check, statistic, value, bound, self.seed)
    }

    fn green_config(&self) -> GreenConfig {
        GreenConfig {
            horizon: self.horizon,
            hermite_order: self.budgets.hermite_order,
            legendre_order: self.budgets.legendre_order,
            diagonal_levels: 6,
            refinement_tolerance: 5e-2,
            neumann_depth: self.budgets.neumann_depth,
            ..GreenConfig::default()
        }
    }

    fn singular_config(&self) -> SingularKernelConfig {
        SingularKernelConfig {
            horizon: self.horizon,
            ..SingularKernelConfig::default()
        }
    }

    fn random_point<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

type Check = fn(&CheckContext, &mut ChaCha8Rng) -> Result<Vec<ReportRow>>;

fn checks(suite: Suite) -> &'static [(&'static str, Check)] {
    match suite {
        Suite::Flows => &[
            ("resolvent_determinant", resolvent_determinant),
            ("pullback", pullback),
            ("linearization_ratio", linearization_ratio),
        ],
        Suite::Kernel => &[
            ("normalization", normalization),
            ("chapman_kolmogorov", chapman_kolmogorov),
            ("backward_residual", backward_residual),
            ("scaling_exponents", scaling_exponents),
        ],
        Suite::Metric => &[("doubling_slope", doubling_slope), ("quasi_constants", quasi_metric_constants)],
        Suite::Calderon => &[("size_estimate", size_estimate), ("cancellation", cancellation)],
        Suite::Parametrix => &[("green_of_one", green_of_one), ("remainder", remainder)],
        Suite::Montecarlo => &[
            ("martingale", martingale),
            ("frozen_density", frozen_density),
            ("krylov", krylov),
        ],
    }
}

/// Stable per-check stream so that one check's draws never shift another's.
fn stream_id(suite: Suite, check: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in suite.name().bytes().chain([b'/']).chain(check.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn check_rng(seed: u64, suite: Suite, check: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(suite, check));
    rng
}

/// Runs one suite; a check that errors becomes a single failed row.
pub fn run_suite(ctx: &CheckContext, suite: Suite, record_timing: bool) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (name, check) in checks(suite) {
        let start = Instant::now();
        let mut rng = check_rng(ctx.seed, suite, name);
        let mut produced = match check(ctx, &mut rng) {
            Ok(r) => r,
            Err(e) => vec![ReportRow::failure(suite.name(), name, &e, ctx.seed)],
        };
        if record_timing {
            let secs = start.elapsed().as_secs_f64();
            for r in &mut produced {
                r.wall_time = Some(secs);
            }
        }
        rows.extend(produced);
    }
    rows
}

/// Runs every configured suite in order.
pub fn run_checks(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let ctx = CheckContext::new(cfg)?;
    Ok(cfg.checks.iter().flat_map(|&s| run_suite(&ctx, s, cfg.record_timing)).collect())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<ReportRow>,
    pub failed: usize,
}

impl RunOutcome {
    pub fn success(&self) -> bool {
        self.failed == 0
    }
}

/// Runs the checks and writes `report.csv` and `summary.txt` into `out_dir`
/// (falling back to the config's output directory, then `./report`).
pub fn run(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let rows = run_checks(cfg)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| "report".into());
    write_reports(&dir, &cfg.model.label(), &rows)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    Ok(RunOutcome { rows, failed })
}

fn resolvent_determinant(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let t = ctx.horizon;
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let y = ctx.random_point(rng);
        let s = rng.random_range(0.0..t);
        worst = worst.max((ctx.solver().resolvent(t, &y, t, s)?.determinant() - 1.0).abs());
    }
    Ok(vec![ctx.row(Suite::Flows, "resolvent_determinant", "max |det R - 1|", worst, 1e-8).with_samples(8)])
}

fn pullback(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let t = ctx.horizon;
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let y = ctx.random_point(rng);
        let s = rng.random_range(0.0..t);
        let lin = LinearizedFlow::new(ctx.solver(), t, &y, 0.0, t)?;
        let x = ctx.solver().flow(s, t, &y)?;
        let back = lin.linearized_flow(t, s, x.as_slice())?;
        let err = back.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Ok(vec![ctx.row(Suite::Flows, "pullback", "max |linearized flow of pulled-back point - y|", worst, 1e-6).with_samples(8)])
}

fn linearization_ratio(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let cut = 0.5;
    if resolvable_rho(ctx.spec.n) >= cut {
        return Err(Error::Usage(format!("chain of {} blocks is not resolvable below rho = {cut}", ctx.spec.n)));
    }
    let samples = linearization_study(ctx.solver(), ctx.budgets.samples, cut, 1.0, rng)?;
    let c = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    Ok(vec![ctx.row(Suite::Flows, "linearization_ratio", "max error / ((rho + (t-s)) |x~|)", c, 1.0).with_samples(samples.len())])
}

fn normalization(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let grid = hermite_grid(4, ctx.dim());
    let t_max = ctx.horizon;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let s = rng.random_range(0.0..0.8 * t_max);
        let t = rng.random_range(s + 0.01 * t_max..t_max);
        let x = ctx.random_point(rng);
        let y = ctx.random_point(rng);
        let g = ctx.pk.at(s, t, &x, &y)?;
        let mass = grid.integrate_mapped(g.mean().as_slice(), &g.whitening_map(), |z| g.density(z).unwrap_or(f64::NAN));
        worst = worst.max((mass - 1.0).abs());
    }
    Ok(vec![ctx.row(Suite::Kernel, "normalization", "max |mass - 1|", worst, 1e-8).with_samples(20)])
}

fn chapman_kolmogorov(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    if !ctx.pk.is_freeze_invariant() {
        // the proxy only composes when it does not depend on the freeze point
        return Ok(Vec::new());
    }
    let t = ctx.horizon;
    let x = ctx.random_point(rng);
    let center = ctx.solver().flow(t, 0.0, &x)?;
    let ys: Vec<Vec<f64>> = (0..41)
        .map(|k| {
            let u = -1.0 + 0.05 * k as f64;
            center.iter().enumerate().map(|(j, c)| c + u / (1 + j) as f64).collect()
        })
        .collect();
    let err = chapman_kolmogorov_error(&ctx.pk, 0.0, 0.5 * t, t, &x, &ys, 6)?;
    Ok(vec![ctx.row(Suite::Kernel, "chapman_kolmogorov", "max composition error / peak", err, 1e-6).with_samples(ys.len())])
}

fn backward_residual(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let t_max = ctx.horizon;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let s = rng.random_range(0.0..0.5 * t_max);
        let t = rng.random_range(s + 0.25 * t_max..t_max);
        let x = ctx.random_point(rng);
        let y = ctx.solver().flow(t, s, &x)?.iter().map(|v| v + 0.1).collect::<Vec<_>>();
        worst = worst.max(backward_pde_residual(&ctx.pk, s, t, &x, &y, 1e-5)?);
    }
    Ok(vec![ctx.row(Suite::Kernel, "backward_residual", "max normalized residual at h = 1e-5", worst, 1e-4).with_samples(5)])
}

fn scaling_exponents(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let x = ctx.random_point(rng);
    let n = ctx.spec.n;
    let (mut ld, mut lmin, mut lmax) = (Vec::new(), Vec::new(), Vec::new());
    let top = ctx.horizon.log10();
    for k in 0..=16 {
        let delta = 10f64.powf(-4.0 + (top + 4.0) * k as f64 / 16.0);
        let g = ctx.pk.frozen(0.0, delta, &x, delta, &x)?;
        let (lo, hi) = g.covariance_spectrum();
        ld.push(delta.ln());
        lmin.push(lo.ln());
        lmax.push(hi.ln());
    }
    let expected = (2 * n - 1) as f64;
    let smin = linear_fit(&ld, &lmin).slope;
    let smax = linear_fit(&ld, &lmax).slope;
    Ok(vec![
        ctx.row(Suite::Kernel, "scaling_exponents", "relative error of smallest-eigenvalue slope", ((smin - expected) / expected).abs(), 0.02),
        ctx.row(Suite::Kernel, "scaling_exponents", "relative error of largest-eigenvalue slope", (smax - 1.0).abs(), 0.02),
    ])
}

fn doubling_slope(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let qctx = QuasiMetricContext::new(&ctx.spec, ctx.horizon, 0.5)?;
    let center = SpaceTimePoint::new(0.0, ctx.random_point(rng));
    let radii = [0.05, 0.1, 0.2, 0.4];
    let prof = doubling_profile(&qctx, &center, &radii, ctx.budgets.volume_samples, 0.03, rng)?;
    let fit = linear_fit(
        &prof.radii.iter().map(|r| r.ln()).collect::<Vec<_>>(),
        &prof.volumes.iter().map(|v| v.ln()).collect::<Vec<_>>(),
    );
    let rel = (fit.slope - prof.expected_slope).abs() / prof.expected_slope;
    Ok(vec![ctx
        .row(Suite::Metric, "doubling_slope", "relative error of log-volume slope", rel, 0.03)
        .with_samples(ctx.budgets.volume_samples)])
}

fn quasi_metric_constants(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let qctx = QuasiMetricContext::new(&ctx.spec, ctx.horizon, 0.5)?;
    let c = quasi_constants(&qctx, ctx.budgets.samples, rng)?;
    // finite constants are what the geometry needs; 10 flags a broken metric
    Ok(vec![
        ctx.row(Suite::Metric, "quasi_constants", "symmetry constant", c.c_sym, 10.0).with_samples(c.pairs),
        ctx.row(Suite::Metric, "quasi_constants", "triangle constant", c.c_tri, 10.0).with_samples(c.triples),
    ])
}

fn size_estimate(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let cfg = ctx.singular_config();
    let half = (ctx.budgets.samples / 2).max(1);
    let a = size_statistic(&cfg, &ctx.pk, half, false, rng)?;
    let b = size_statistic(&cfg, &ctx.pk, half, false, rng)?;
    let factor = (a / b).max(b / a);
    Ok(vec![ctx
        .row(Suite::Calderon, "size_estimate", "spread of size statistic over two halves", factor, 2.0)
        .with_samples(2 * half)])
}

fn cancellation(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let cfg = ctx.singular_config();
    let one = ConstantField::new(1.0, (0.0, cfg.horizon));
    let x = ctx.random_point(rng);
    let profile = truncation_profile(&cfg, &ctx.pk, &one, 0.0, &x, false)?;
    let worst = profile.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let diffs = successive_differences(&profile);
    // differences under the quadrature floor are rounding noise
    let growth = diffs.windows(2).map(|w| if w[1] < 1e-8 { 0.0 } else { w[1] - w[0] }).fold(0.0, f64::max);
    Ok(vec![
        ctx.row(Suite::Calderon, "cancellation", "largest |truncated integral of 1|", worst, 1e-3),
        ctx.row(Suite::Calderon, "cancellation", "largest growth of successive truncation differences", growth, 0.0),
    ])
}

fn green_of_one(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let cfg = ctx.green_config();
    let one = ConstantField::new(1.0, (0.0, ctx.horizon));
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let s = rng.random_range(0.0..0.9 * ctx.horizon);
        let x = ctx.random_point(rng);
        worst = worst.max((green(&cfg, &ctx.pk, &one, s, &x)? - (ctx.horizon - s)).abs());
    }
    Ok(vec![ctx.row(Suite::Parametrix, "green_of_one", "max |G1 - (T - s)|", worst, 1e-6).with_samples(4)])
}

fn operator_grid(ctx: &CheckContext, t_hi: f64) -> StripGrid {
    let space = vec![(-1.5, 1.5); ctx.dim()];
    StripGrid::uniform((0.0, t_hi), ctx.budgets.time_points, &space, ctx.budgets.grid_points)
}

fn remainder(ctx: &CheckContext, _rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let cfg = ctx.green_config();
    let t = ctx.horizon;
    let bump = GaussianBumpField::new(1.0, vec![0.0; ctx.dim()], vec![0.5; ctx.dim()], (0.3 * t, 0.8 * t))?;
    if ctx.spec.affine().is_some() && ctx.spec.constant_diffusion().is_some() {
        // the proxy is exact, so the remainder vanishes identically
        let grid = operator_grid(ctx, 0.9 * t);
        let mut worst: f64 = 0.0;
        for p in grid.points() {
            worst = worst.max(remainder_r(&cfg, &ctx.pk, &bump, p.s, &p.x)?.abs());
        }
        let sup = bump.sup_norm().unwrap_or(1.0);
        return Ok(vec![ctx
            .row(Suite::Parametrix, "remainder", "max |Rf| / sup |f|", worst / sup, 1e-8)
            .with_samples(grid.len())]);
    }
    let grid = operator_grid(ctx, 0.8 * t);
    // deeper tabulated iterates only resolve to several percent on a coarse grid
    let cfg = GreenConfig {
        refinement_tolerance: 1e-1,
        ..cfg
    };
    let series = neumann_apply(&cfg, &ctx.pk, &bump, &grid, ctx.budgets.neumann_depth)?;
    let worst_ratio = series.ratios.iter().cloned().fold(0.0, f64::max);
    Ok(vec![
        ctx.row(Suite::Parametrix, "remainder", "largest contraction ratio of the Neumann residual", worst_ratio, 1.0)
            .with_samples(grid.len()),
        ctx.row(Suite::Parametrix, "remainder", "estimated operator norm", series.norm_estimate(), 1.0).with_samples(grid.len()),
    ])
}

fn martingale(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let dim = ctx.dim();
    let bumps = [
        GaussianBump::new(vec![0.0; dim], vec![0.6; dim]),
        GaussianBump::new(vec![0.3; dim], vec![0.4; dim]).with_rate(1.0),
        GaussianBump::new(vec![-0.3; dim], vec![0.8; dim]),
    ];
    let phis: Vec<&dyn TestFunction> = bumps.iter().map(|b| b as &dyn TestFunction).collect();
    let t = ctx.horizon;
    let plan = SimulationPlan::new(0.0, vec![0.1; dim], t, ctx.budgets.steps, ctx.budgets.paths, rng.random());
    let res = martingale_study(&ctx.spec, &phis, &plan, Scheme::Euler, &[0.25 * t, 0.5 * t, t])?;
    let worst = res
        .iter()
        .flatten()
        .map(|e| e.mean.abs() / e.std_error.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(vec![ctx
        .row(Suite::Montecarlo, "martingale", "largest |residual| / standard error", worst, 3.0)
        .with_samples(ctx.budgets.paths)])
}

fn frozen_density(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    if ctx.dim() > 2 {
        // tensor histograms are too sparse past two dimensions
        return Ok(Vec::new());
    }
    let t = 0.5 * ctx.horizon;
    let x = ctx.random_point(rng);
    let plan = SimulationPlan::new(0.0, x.clone(), t, 1, ctx.budgets.paths, rng.random()).recording(Record::Final);
    let ens = piecewise_frozen_simulate(&ctx.spec, &plan)?;
    let hist = density_estimate(&ctx.spec, &ens, t, &Binning::default())?;
    let theta = ctx.solver().flow(t, 0.0, &x)?;
    let g = ctx.pk.at(0.0, t, &x, theta.as_slice())?;
    let l1 = hist.l1_distance(|y| g.density(y), 6)?;
    Ok(vec![ctx
        .row(Suite::Montecarlo, "frozen_density", "L1 distance of one-step histogram to the proxy", l1, 0.05)
        .with_samples(ctx.budgets.paths)])
}

fn krylov(ctx: &CheckContext, rng: &mut ChaCha8Rng) -> Result<Vec<ReportRow>> {
    let dim = ctx.dim();
    let t = ctx.horizon;
    let f = GaussianBumpField::new(1.0, vec![0.0; dim], vec![0.5; dim], (0.0, t))?;
    let distances = [0.0, 2.0, 4.0, 8.0];
    let mut estimates = Vec::new();
    for &r in &distances {
        let mut x = vec![0.0; dim];
        x[0] = r;
        let plan = SimulationPlan::new(0.0, x, t, ctx.budgets.steps, ctx.budgets.paths, rng.random());
        estimates.push(occupation_estimate(&f, &euler_simulate(&ctx.spec, &plan)?));
    }
    let norm = f.lp_norm(4.0).ok_or_else(|| Error::Usage("bump has no finite L4 norm".into()))?;
    let fit = krylov_fit(&distances, &estimates, norm)?;
    let violations = fit.margins.iter().filter(|m| **m < 0.0).count() + fit.superlinear as usize;
    Ok(vec![ctx
        .row(Suite::Montecarlo, "krylov", "majorant violations", violations as f64, 0.0)
        .with_samples(ctx.budgets.paths * distances.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelChoice;

    fn small(model: &str, checks: Vec<Suite>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(ModelChoice::Named(model.into()), 0.5, checks);
        cfg.budgets.samples = 500;
        cfg.budgets.paths = 2_000;
        cfg.budgets.steps = 32;
        cfg.budgets.volume_samples = 20_000;
        cfg
    }

    #[test]
    fn empty_run_is_success() {
        let rows = run_checks(&small("kolmogorov", vec![])).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn kernel_suite_passes_on_kolmogorov() {
        let rows = run_checks(&small("kolmogorov", vec![Suite::Kernel])).unwrap();
        assert!(rows.len() >= 4);
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn flows_suite_passes_on_nonlinear_model() {
        let rows = run_checks(&small("nonlinear-kolmogorov", vec![Suite::Flows])).unwrap();
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        assert_ne!(stream_id(Suite::Flows, "pullback"), stream_id(Suite::Kernel, "pullback"));
        assert_eq!(stream_id(Suite::Flows, "pullback"), stream_id(Suite::Flows, "pullback"));
    }

    #[test]
    fn suite_order_does_not_change_rows() {
        let a = run_checks(&small("kolmogorov", vec![Suite::Flows, Suite::Kernel])).unwrap();
        let b = run_checks(&small("kolmogorov", vec![Suite::Kernel, Suite::Flows])).unwrap();
        let kernel = |rows: &[ReportRow]| rows.iter().filter(|r| r.suite == "kernel").cloned().collect::<Vec<_>>();
        assert_eq!(kernel(&a), kernel(&b));
    }
}
