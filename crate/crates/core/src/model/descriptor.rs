//! Serializable polynomial/trigonometric model descriptors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Coefficients;
use crate::error::{Error, Result};

/// Variable a factor depends on: `"t"` for time, or `[block, component]`
/// (both 1-based) for a space coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Var {
    Named(String),
    Coord([usize; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Factor {
    Pow {
        var: Var,
        exp: u32,
    },
    Sin {
        var: Var,
        #[serde(default = "one")]
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
    Cos {
        var: Var,
        #[serde(default = "one")]
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// `coef · Π factors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coef: f64,
    #[serde(default)]
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn constant(c: f64) -> Self {
        Term { coef: c, factors: vec![] }
    }

    pub fn coord(coef: f64, block: usize, comp: usize) -> Self {
        Term {
            coef,
            factors: vec![Factor::Pow {
                var: Var::Coord([block, comp]),
                exp: 1,
            }],
        }
    }

    pub fn sin(coef: f64, block: usize, comp: usize, freq: f64) -> Self {
        Term {
            coef,
            factors: vec![Factor::Sin {
                var: Var::Coord([block, comp]),
                freq,
                phase: 0.0,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modulation {
    pub amplitude: f64,
    #[serde(default = "one")]
    pub freq: f64,
    #[serde(default)]
    pub phase: f64,
    /// 1-based component of the first block driving the modulation.
    #[serde(default = "one_usize")]
    pub component: usize,
}

fn one_usize() -> usize {
    1
}

/// `a(t,x) = base · (1 + amplitude·sin(freq·x_{1,c} + phase))`, frozen value `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionDescriptor {
    pub base: Vec<Vec<f64>>,
    #[serde(default)]
    pub modulation: Option<Modulation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    #[serde(default)]
    pub name: Option<String>,
    pub n: usize,
    pub d: usize,
    /// `drift[block][component]` is a sum of terms.
    pub drift: Vec<Vec<Vec<Term>>>,
    pub diffusion: DiffusionDescriptor,
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub holder: Option<f64>,
    #[serde(default)]
    pub ellipticity: Option<f64>,
    #[serde(default)]
    pub nondegeneracy_margin: Option<f64>,
}

const TIME: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
enum Kind {
    Pow(u32),
    Sin(f64, f64),
    Cos(f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct CFactor {
    var: usize,
    kind: Kind,
}

impl CFactor {
    #[inline]
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let v = if self.var == TIME { t } else { x[self.var] };
        match self.kind {
            Kind::Pow(e) => v.powi(e as i32),
            Kind::Sin(f, p) => (f * v + p).sin(),
            Kind::Cos(f, p) => (f * v + p).cos(),
        }
    }

    #[inline]
    fn deriv(&self, t: f64, x: &[f64]) -> f64 {
        let v = if self.var == TIME { t } else { x[self.var] };
        match self.kind {
            Kind::Pow(0) => 0.0,
            Kind::Pow(e) => e as f64 * v.powi(e as i32 - 1),
            Kind::Sin(f, p) => f * (f * v + p).cos(),
            Kind::Cos(f, p) => -f * (f * v + p).sin(),
        }
    }
}

#[derive(Debug, Clone)]
struct CTerm {
    coef: f64,
    factors: Vec<CFactor>,
}

impl CTerm {
    #[inline]
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let mut v = self.coef;
        for f in &self.factors {
            v *= f.eval(t, x);
        }
        v
    }

    fn partial(&self, t: f64, x: &[f64], k: usize) -> f64 {
        let mut total = 0.0;
        for (j, fj) in self.factors.iter().enumerate() {
            if fj.var != k {
                continue;
            }
            let mut v = self.coef * fj.deriv(t, x);
            for (l, fl) in self.factors.iter().enumerate() {
                if l != j {
                    v *= fl.eval(t, x);
                }
            }
            total += v;
        }
        total
    }
}

/// Coefficients compiled from a [`ModelDescriptor`].
#[derive(Debug, Clone)]
pub struct DescriptorModel {
    n: usize,
    d: usize,
    /// one entry per coordinate of the state
    drift: Vec<Vec<CTerm>>,
    base: DMatrix<f64>,
    modulation: Option<Modulation>,
    affine: Option<(DMatrix<f64>, DVector<f64>)>,
    transmission: Option<DMatrix<f64>>,
}

impl DescriptorModel {
    pub fn compile(desc: &ModelDescriptor) -> Result<Self> {
        let (n, d) = (desc.n, desc.d);
        if n == 0 || d == 0 {
            return Err(Error::Shape("n and d must be positive".into()));
        }
        if desc.drift.len() != n {
            return Err(Error::Shape(format!(
                "drift has {} blocks, expected n = {n}",
                desc.drift.len()
            )));
        }
        let mut drift = Vec::with_capacity(n * d);
        for (b, block) in desc.drift.iter().enumerate() {
            if block.len() != d {
                return Err(Error::Shape(format!(
                    "drift block {} has {} components, expected d = {d}",
                    b + 1,
                    block.len()
                )));
            }
            for terms in block {
                let mut compiled = Vec::with_capacity(terms.len());
                for term in terms {
                    let mut factors = Vec::with_capacity(term.factors.len());
                    for f in &term.factors {
                        let (var, kind) = match f {
                            Factor::Pow { var, exp } => (var, Kind::Pow(*exp)),
                            Factor::Sin { var, freq, phase } => (var, Kind::Sin(*freq, *phase)),
                            Factor::Cos { var, freq, phase } => (var, Kind::Cos(*freq, *phase)),
                        };
                        let idx = resolve_var(var, n, d)?;
                        if idx != TIME {
                            let src = idx / d;
                            // block b may only read blocks b-1, ..., n-1 (0-based)
                            if b >= 1 && src + 1 < b {
                                return Err(Error::Shape(format!(
                                    "drift block {} depends on block {}, violating the chain structure",
                                    b + 1,
                                    src + 1
                                )));
                            }
                        }
                        factors.push(CFactor { var: idx, kind });
                    }
                    compiled.push(CTerm {
                        coef: term.coef,
                        factors,
                    });
                }
                drift.push(compiled);
            }
        }
        let base = &desc.diffusion.base;
        if base.len() != d || base.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("diffusion base must be {d}x{d}")));
        }
        let base = DMatrix::from_fn(d, d, |i, j| base[i][j]);
        if let Some(m) = &desc.diffusion.modulation {
            if m.component == 0 || m.component > d {
                return Err(Error::Shape(format!(
                    "modulation component {} outside 1..={d}",
                    m.component
                )));
            }
            if !(m.amplitude.abs() < 1.0) {
                return Err(Error::Domain(format!(
                    "modulation amplitude {} must lie in (-1, 1)",
                    m.amplitude
                )));
            }
        }
        let mut model = DescriptorModel {
            n,
            d,
            drift,
            base,
            modulation: desc.diffusion.modulation.clone(),
            affine: None,
            transmission: None,
        };
        model.affine = model.detect_affine();
        model.transmission = model.detect_constant_transmission();
        Ok(model)
    }

    fn detect_affine(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let dim = self.n * self.d;
        let mut a = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for (row, terms) in self.drift.iter().enumerate() {
            for term in terms {
                let mut var = None;
                for f in &term.factors {
                    match f.kind {
                        Kind::Pow(0) => {}
                        Kind::Pow(1) if f.var != TIME && var.is_none() => var = Some(f.var),
                        _ => return None,
                    }
                }
                match var {
                    None => b[row] += term.coef,
                    Some(k) => a[(row, k)] += term.coef,
                }
            }
        }
        Some((a, b))
    }

    /// Subdiagonal blocks are constant when every term of block i is either
    /// free of block i-1, or linear in a single block i-1 coordinate with a
    /// coefficient that depends on nothing else.
    fn detect_constant_transmission(&self) -> Option<DMatrix<f64>> {
        let (n, d) = (self.n, self.d);
        let mut s = DMatrix::zeros(n * d, n * d);
        for row in d..n * d {
            let b = row / d;
            let lo = (b - 1) * d;
            let hi = b * d;
            for term in &self.drift[row] {
                let touching: Vec<&CFactor> = term
                    .factors
                    .iter()
                    .filter(|f| f.var != TIME && f.var >= lo && f.var < hi)
                    .collect();
                if touching.is_empty() {
                    continue;
                }
                let nontrivial: Vec<&CFactor> = term
                    .factors
                    .iter()
                    .filter(|f| !matches!(f.kind, Kind::Pow(0)))
                    .collect();
                if nontrivial.len() != 1 {
                    return None;
                }
                let f = nontrivial[0];
                match f.kind {
                    Kind::Pow(1) => s[(row, f.var)] += term.coef,
                    _ => return None,
                }
            }
        }
        Some(s)
    }

    fn modulation_factor(&self, x: &[f64]) -> f64 {
        match &self.modulation {
            None => 1.0,
            Some(m) => 1.0 + m.amplitude * (m.freq * x[m.component - 1] + m.phase).sin(),
        }
    }
}

fn resolve_var(var: &Var, n: usize, d: usize) -> Result<usize> {
    match var {
        Var::Named(s) if s == "t" => Ok(TIME),
        Var::Named(s) => Err(Error::Shape(format!(
            "unknown variable {s:?}; use \"t\" or [block, component]"
        ))),
        Var::Coord([b, c]) => {
            if *b == 0 || *b > n || *c == 0 || *c > d {
                Err(Error::Shape(format!(
                    "coordinate [{b}, {c}] outside blocks 1..={n}, components 1..={d}"
                )))
            } else {
                Ok((b - 1) * d + (c - 1))
            }
        }
    }
}

impl Coefficients for DescriptorModel {
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (o, terms) in out.iter_mut().zip(&self.drift) {
            *o = terms.iter().map(|term| term.eval(t, x)).sum();
        }
    }

    fn transmission(&self, t: f64, x: &[f64], block: usize, out: &mut [f64]) {
        let d = self.d;
        for r in 0..d {
            let row = block * d + r;
            for c in 0..d {
                let col = (block - 1) * d + c;
                out[r * d + c] = self.drift[row].iter().map(|term| term.partial(t, x, col)).sum();
            }
        }
    }

    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let m = self.modulation_factor(x);
        let d = self.d;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.base[(i, j)] * m;
            }
        }
    }

    fn frozen_diffusion(&self, _t: f64, out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.base[(i, j)];
            }
        }
    }

    fn affine_drift(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        self.affine.clone()
    }

    fn constant_transmission(&self) -> Option<DMatrix<f64>> {
        self.transmission.clone()
    }

    fn constant_diffusion(&self) -> Option<DMatrix<f64>> {
        if self.modulation.is_none() {
            Some(self.base.clone())
        } else {
            None
        }
    }

    fn constant_frozen_diffusion(&self) -> Option<DMatrix<f64>> {
        Some(self.base.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kolmogorov_like(extra: Vec<Term>) -> ModelDescriptor {
        let mut block2 = vec![Term::coord(1.0, 1, 1)];
        block2.extend(extra);
        ModelDescriptor {
            name: None,
            n: 2,
            d: 1,
            drift: vec![vec![vec![]], vec![block2]],
            diffusion: DiffusionDescriptor {
                base: vec![vec![1.0]],
                modulation: None,
            },
            lipschitz: None,
            holder: None,
            ellipticity: None,
            nondegeneracy_margin: None,
        }
    }

    #[test]
    fn affine_detection() {
        let m = DescriptorModel::compile(&kolmogorov_like(vec![])).unwrap();
        let (a, b) = m.affine_drift().unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(b, DVector::zeros(2));
        assert_eq!(m.constant_transmission().unwrap(), a);
        let m = DescriptorModel::compile(&kolmogorov_like(vec![Term::sin(0.25, 1, 1, 1.0)])).unwrap();
        assert!(m.affine_drift().is_none());
        assert!(m.constant_transmission().is_none());
    }

    #[test]
    fn rejects_chain_violations() {
        let mut desc = ModelDescriptor {
            name: None,
            n: 3,
            d: 1,
            drift: vec![vec![vec![]], vec![vec![Term::coord(1.0, 1, 1)]], vec![vec![Term::coord(1.0, 1, 1)]]],
            diffusion: DiffusionDescriptor {
                base: vec![vec![1.0]],
                modulation: None,
            },
            lipschitz: None,
            holder: None,
            ellipticity: None,
            nondegeneracy_margin: None,
        };
        assert!(matches!(DescriptorModel::compile(&desc), Err(Error::Shape(_))));
        desc.drift[2] = vec![vec![Term::coord(1.0, 2, 1), Term::coord(0.5, 3, 1)]];
        assert!(DescriptorModel::compile(&desc).is_ok());
        desc.drift.pop();
        assert!(matches!(DescriptorModel::compile(&desc), Err(Error::Shape(_))));
    }

    #[test]
    fn product_rule_partials() {
        let desc = kolmogorov_like(vec![Term {
            coef: 2.0,
            factors: vec![
                Factor::Pow {
                    var: Var::Coord([1, 1]),
                    exp: 2,
                },
                Factor::Cos {
                    var: Var::Coord([1, 1]),
                    freq: 3.0,
                    phase: 0.1,
                },
            ],
        }]);
        let m = DescriptorModel::compile(&desc).unwrap();
        let x = [0.7, -0.2];
        let mut g = [0.0];
        m.transmission(0.0, &x, 1, &mut g);
        let h = 1e-6;
        let mut fp = [0.0; 2];
        let mut fm = [0.0; 2];
        m.drift(0.0, &[x[0] + h, x[1]], &mut fp);
        m.drift(0.0, &[x[0] - h, x[1]], &mut fm);
        let fd = (fp[1] - fm[1]) / (2.0 * h);
        assert!((g[0] - fd).abs() < 1e-8, "{} vs {}", g[0], fd);
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"n":2,"d":1,"drift":[[[]],[[{"coef":1.0,"factors":[{"pow":{"var":[1,1],"exp":1}}]},
            {"coef":0.25,"factors":[{"sin":{"var":[1,1]}}]}]]],"diffusion":{"base":[[1.0]]}}"#;
        let desc: ModelDescriptor = serde_json::from_str(text).unwrap();
        let m = DescriptorModel::compile(&desc).unwrap();
        let mut out = [0.0; 2];
        m.drift(0.0, &[1.0, 0.0], &mut out);
        assert!((out[1] - (1.0 + 0.25 * 1f64.sin())).abs() < 1e-15);
    }
}
