//! Scalar space-time fields `f(t, y)` fed to the integral operators.

use std::fmt;

use crate::error::{Error, Result};

pub trait SpaceTimeField: Send + Sync + fmt::Debug {
    fn value(&self, t: f64, y: &[f64]) -> f64;

    /// Closed time interval outside which the field vanishes.
    fn time_support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    /// `‖f‖_∞` when known in closed form.
    fn sup_norm(&self) -> Option<f64> {
        None
    }

    /// `‖f‖_{L^p}` over space-time when known in closed form.
    fn lp_norm(&self, _p: f64) -> Option<f64> {
        None
    }

    fn is_zero(&self) -> bool {
        false
    }

    /// Gaussian `(center, widths)` the field is concentrated on at time `t`, used to
    /// steer the spatial quadrature towards narrow features.
    fn spatial_profile(&self, _t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

/// `c·𝟙_{[a, b]}(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub value: f64,
    pub support: (f64, f64),
}

impl ConstantField {
    pub fn new(value: f64, support: (f64, f64)) -> Self {
        ConstantField { value, support }
    }
}

impl SpaceTimeField for ConstantField {
    fn value(&self, t: f64, _y: &[f64]) -> f64 {
        if t >= self.support.0 && t <= self.support.1 {
            self.value
        } else {
            0.0
        }
    }

    fn time_support(&self) -> (f64, f64) {
        self.support
    }

    fn sup_norm(&self) -> Option<f64> {
        Some(self.value.abs())
    }

    fn is_zero(&self) -> bool {
        self.value == 0.0
    }
}

/// `A·𝟙_{[a, b]}(t)·exp(-½ Σ_k ((y_k - c_k)/w_k)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBumpField {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub widths: Vec<f64>,
    pub support: (f64, f64),
}

impl GaussianBumpField {
    pub fn new(amplitude: f64, center: Vec<f64>, widths: Vec<f64>, support: (f64, f64)) -> Result<Self> {
        if center.len() != widths.len() {
            return Err(Error::Shape("bump center and widths differ in length".into()));
        }
        if widths.iter().any(|w| !(*w > 0.0)) || !(support.1 > support.0) {
            return Err(Error::Domain("bump widths and time window must be positive".into()));
        }
        Ok(GaussianBumpField {
            amplitude,
            center,
            widths,
            support,
        })
    }

    /// Bump adapted to the chain scaling: time window of length `λ²` around `t_c`,
    /// block-`i` widths `λ^{2i-1}`.
    pub fn homogeneous(amplitude: f64, t_c: f64, center: Vec<f64>, d: usize, lambda: f64) -> Result<Self> {
        let widths = (0..center.len()).map(|k| lambda.powi(2 * (k / d) as i32 + 1)).collect();
        let half = 0.5 * lambda * lambda;
        GaussianBumpField::new(amplitude, center, widths, (t_c - half, t_c + half))
    }
}

impl SpaceTimeField for GaussianBumpField {
    fn value(&self, t: f64, y: &[f64]) -> f64 {
        if t < self.support.0 || t > self.support.1 {
            return 0.0;
        }
        let mut e = 0.0;
        for k in 0..self.center.len() {
            let u = (y[k] - self.center[k]) / self.widths[k];
            e += u * u;
        }
        self.amplitude * (-0.5 * e).exp()
    }

    fn time_support(&self) -> (f64, f64) {
        self.support
    }

    fn sup_norm(&self) -> Option<f64> {
        Some(self.amplitude.abs())
    }

    fn lp_norm(&self, p: f64) -> Option<f64> {
        let space: f64 = self.widths.iter().map(|w| w * (2.0 * std::f64::consts::PI / p).sqrt()).product();
        Some(self.amplitude.abs() * ((self.support.1 - self.support.0) * space).powf(1.0 / p))
    }

    fn is_zero(&self) -> bool {
        self.amplitude == 0.0
    }

    fn spatial_profile(&self, _t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.center.clone(), self.widths.clone()))
    }
}

/// `α·f`.
#[derive(Debug, Clone)]
pub struct ScaledField<F> {
    pub factor: f64,
    pub inner: F,
}

impl<F: SpaceTimeField> SpaceTimeField for ScaledField<F> {
    fn value(&self, t: f64, y: &[f64]) -> f64 {
        self.factor * self.inner.value(t, y)
    }

    fn time_support(&self) -> (f64, f64) {
        self.inner.time_support()
    }

    fn sup_norm(&self) -> Option<f64> {
        self.inner.sup_norm().map(|v| v * self.factor.abs())
    }

    fn lp_norm(&self, p: f64) -> Option<f64> {
        self.inner.lp_norm(p).map(|v| v * self.factor.abs())
    }

    fn is_zero(&self) -> bool {
        self.factor == 0.0 || self.inner.is_zero()
    }

    fn spatial_profile(&self, t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        self.inner.spatial_profile(t)
    }
}

/// Values on a tensor grid in `(t, y)`, multilinearly interpolated and zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub times: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    /// row-major over `(time, axis 0, axis 1, …)`
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(times: Vec<f64>, axes: Vec<Vec<f64>>) -> Self {
        let len = times.len() * axes.iter().map(|a| a.len()).product::<usize>();
        GridField {
            times,
            axes,
            values: vec![0.0; len],
        }
    }

    /// Samples `f` at every grid node.
    pub fn sample(f: &dyn SpaceTimeField, times: Vec<f64>, axes: Vec<Vec<f64>>) -> Self {
        let mut g = GridField::zeros(times, axes);
        let nodes = g.nodes();
        for (k, (t, y)) in nodes.iter().enumerate() {
            g.values[k] = f.value(*t, y);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Grid nodes in storage order.
    pub fn nodes(&self) -> Vec<(f64, Vec<f64>)> {
        let mut space: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &self.axes {
            space = space
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        let mut out = Vec::with_capacity(self.len());
        for &t in &self.times {
            for y in &space {
                out.push((t, y.clone()));
            }
        }
        out
    }

    /// Volume element of one cell (uniform grids).
    pub fn cell_volume(&self) -> f64 {
        let step = |v: &Vec<f64>| if v.len() < 2 { 1.0 } else { (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64 };
        step(&self.times) * self.axes.iter().map(step).product::<f64>()
    }

    /// Discrete `L^p` norm (Riemann sum over the nodes).
    pub fn lp_norm(&self, p: f64) -> f64 {
        (self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * self.cell_volume()).powf(1.0 / p)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn locate(axis: &[f64], v: f64) -> Option<(usize, f64)> {
        let m = axis.len();
        if m == 0 || v < axis[0] || v > axis[m - 1] {
            return None;
        }
        if m == 1 {
            return Some((0, 0.0));
        }
        let k = match axis.binary_search_by(|a| a.partial_cmp(&v).unwrap()) {
            Ok(k) => k.min(m - 2),
            Err(k) => (k - 1).min(m - 2),
        };
        Some((k, (v - axis[k]) / (axis[k + 1] - axis[k])))
    }

    /// CSV rows `t, y…, value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for ((t, y), v) in self.nodes().iter().zip(&self.values) {
            let mut row = vec![t.to_string()];
            row.extend(y.iter().map(|c| c.to_string()));
            row.push(v.to_string());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

impl SpaceTimeField for GridField {
    fn value(&self, t: f64, y: &[f64]) -> f64 {
        let mut locs = Vec::with_capacity(1 + self.axes.len());
        match Self::locate(&self.times, t) {
            Some(l) => locs.push(l),
            None => return 0.0,
        }
        for (axis, &v) in self.axes.iter().zip(y) {
            match Self::locate(axis, v) {
                Some(l) => locs.push(l),
                None => return 0.0,
            }
        }
        let mut sizes = vec![self.times.len()];
        sizes.extend(self.axes.iter().map(|a| a.len()));
        let dims = locs.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << dims) {
            let mut w = 1.0;
            let mut idx = 0;
            for k in 0..dims {
                let (i0, frac) = locs[k];
                let up = (corner >> k) & 1 == 1;
                let i = if up { (i0 + 1).min(sizes[k] - 1) } else { i0 };
                w *= if up { frac } else { 1.0 - frac };
                idx = idx * sizes[k] + i;
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }

    fn time_support(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    fn sup_norm(&self) -> Option<f64> {
        Some(self.max_abs())
    }

    fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}
