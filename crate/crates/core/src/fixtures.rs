//! Built-in analytic manifolds with closed-form evaluators.
//!
//! The constants quoted in tests were derived symbolically by
//! `scripts/derive_fixtures.py`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::affine::AffineImmersion;
use crate::error::{GeometryError, Result};
use crate::gcr::ExtrinsicData;
use crate::grid::{Chart, Field};
use crate::hessian::{ConvexPotential, HessePotential};
use crate::linalg::write_matrix;
use crate::structures::{idx3, StatisticalStructure};

/// Names accepted by [`Fixture::by_name`], e.g. `euclidean(3)`, `sphere2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureName {
    Euclidean(usize),
    ExpPotential(usize),
    Sphere2,
    Paraboloid(usize),
    ConeCodim2,
    Gaussian1d,
}

impl FixtureName {
    pub const ALL: [&'static str; 6] = ["euclidean(n)", "exp_potential(n)", "sphere2", "paraboloid(n)", "cone_codim2", "gaussian1d"];
}

impl fmt::Display for FixtureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FixtureName::Euclidean(n) => write!(f, "euclidean({n})"),
            FixtureName::ExpPotential(n) => write!(f, "exp_potential({n})"),
            FixtureName::Sphere2 => write!(f, "sphere2"),
            FixtureName::Paraboloid(n) => write!(f, "paraboloid({n})"),
            FixtureName::ConeCodim2 => write!(f, "cone_codim2"),
            FixtureName::Gaussian1d => write!(f, "gaussian1d"),
        }
    }
}

impl FromStr for FixtureName {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let unknown = || GeometryError::UnknownFixture(s.to_string());
        let (head, dim) = match s.find('(') {
            Some(open) => {
                let inner = s[open + 1..].strip_suffix(')').ok_or_else(unknown)?;
                let n: usize = inner.trim().parse().map_err(|_| unknown())?;
                if n == 0 {
                    return Err(unknown());
                }
                (&s[..open], Some(n))
            }
            None => (s, None),
        };
        let name = match (head, dim) {
            ("euclidean", d) => FixtureName::Euclidean(d.unwrap_or(2)),
            ("exp_potential", d) => FixtureName::ExpPotential(d.unwrap_or(2)),
            ("paraboloid", d) => FixtureName::Paraboloid(d.unwrap_or(2)),
            ("sphere2", None) => FixtureName::Sphere2,
            ("cone_codim2", None) => FixtureName::ConeCodim2,
            ("gaussian1d", None) => FixtureName::Gaussian1d,
            _ => return Err(unknown()),
        };
        Ok(name)
    }
}

/// An analytic test manifold on its default coordinate box.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    name: FixtureName,
    ranges: Vec<(f64, f64)>,
}

impl Fixture {
    pub fn new(name: FixtureName) -> Self {
        let ranges = match name {
            FixtureName::Euclidean(n) | FixtureName::Paraboloid(n) => vec![(-1.0, 1.0); n],
            FixtureName::ExpPotential(n) => vec![(-0.3, 0.3); n],
            FixtureName::Sphere2 => vec![(PI / 4.0, 3.0 * PI / 4.0), (0.0, PI / 2.0)],
            FixtureName::ConeCodim2 => vec![(-0.5, 0.5); 2],
            FixtureName::Gaussian1d => vec![(-0.5, 0.5), (-2.0, -1.0)],
        };
        Self { name, ranges }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn name(&self) -> FixtureName {
        self.name
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    /// Default box with `points` per axis.
    pub fn chart(&self, points: usize) -> Result<Chart> {
        Chart::uniform(self.ranges.clone(), points)
    }

    fn lacks(&self, what: &'static str) -> GeometryError {
        GeometryError::FixtureLacks { fixture: self.name.to_string(), what }
    }

    /// `g_ij(x)`.
    pub fn metric(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        match self.name {
            FixtureName::Euclidean(_) | FixtureName::Paraboloid(_) => DMatrix::identity(n, n),
            FixtureName::ExpPotential(_) | FixtureName::ConeCodim2 => DMatrix::from_fn(n, n, |i, j| if i == j { x[i].exp() } else { 0.0 }),
            FixtureName::Sphere2 => DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, x[0].sin().powi(2)]),
            FixtureName::Gaussian1d => Gaussian1d.hessian(x),
        }
    }

    /// `∂_axis g_ij(x)`.
    pub fn metric_derivative(&self, x: &[f64], axis: usize) -> DMatrix<f64> {
        let n = self.dim();
        match self.name {
            FixtureName::Euclidean(_) | FixtureName::Paraboloid(_) => DMatrix::zeros(n, n),
            FixtureName::ExpPotential(_) | FixtureName::ConeCodim2 => {
                DMatrix::from_fn(n, n, |i, j| if i == j && i == axis { x[i].exp() } else { 0.0 })
            }
            FixtureName::Sphere2 => {
                let mut m = DMatrix::zeros(2, 2);
                if axis == 0 {
                    m[(1, 1)] = 2.0 * x[0].sin() * x[0].cos();
                }
                m
            }
            FixtureName::Gaussian1d => {
                let (t1, t2) = (x[0], x[1]);
                if axis == 0 {
                    let c = 1.0 / (2.0 * t2 * t2);
                    DMatrix::from_row_slice(2, 2, &[0.0, c, c, -t1 / t2.powi(3)])
                } else {
                    let b = -t1 / t2.powi(3);
                    DMatrix::from_row_slice(2, 2, &[1.0 / (2.0 * t2 * t2), b, b, (1.5 * t1 * t1 - t2) / t2.powi(4)])
                }
            }
        }
    }

    /// `Γ_ij^k(x)` flattened as `(i n + j) n + k`.
    pub fn connection(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n * n * n];
        if let FixtureName::Sphere2 = self.name {
            let (s, c) = x[0].sin_cos();
            out[idx3(2, 1, 1, 0)] = -s * c;
            out[idx3(2, 0, 1, 1)] = c / s;
            out[idx3(2, 1, 0, 1)] = c / s;
        }
        out
    }

    /// `(g, ∇)` sampled on `chart`.
    pub fn structure(&self, chart: &Chart) -> Result<StatisticalStructure> {
        self.check_chart(chart)?;
        let n = self.dim();
        let g = Field::from_fn(chart, &[n, n], |x, out| write_matrix(out, &self.metric(x)));
        let gamma = Field::from_fn(chart, &[n, n, n], |x, out| out.copy_from_slice(&self.connection(x)));
        StatisticalStructure::new(g, gamma)
    }

    /// Extrinsic data: unit normal data for `euclidean` (zero) and `sphere2`
    /// (`h = h* = g`, `τ = 0`); the flat Hessian fixtures carry `r = 0`.
    pub fn extrinsic(&self, chart: &Chart) -> Result<ExtrinsicData> {
        self.check_chart(chart)?;
        match self.name {
            FixtureName::Euclidean(_) => Ok(ExtrinsicData::zeros(chart, 1)),
            FixtureName::Sphere2 => {
                let h = Field::from_fn(chart, &[1, 2, 2], |x, out| write_matrix(out, &self.metric(x)));
                ExtrinsicData::new(h.clone(), h, Field::zeros(chart, &[1, 1, 2]))
            }
            FixtureName::ExpPotential(_) | FixtureName::Gaussian1d | FixtureName::Paraboloid(_) | FixtureName::ConeCodim2 => {
                Ok(ExtrinsicData::empty(chart))
            }
        }
    }

    /// Analytic convex potential of the Hessian fixtures.
    pub fn potential(&self) -> Result<Arc<dyn ConvexPotential>> {
        match self.name {
            FixtureName::Euclidean(n) => Ok(Arc::new(Quadratic(n))),
            FixtureName::ExpPotential(n) => Ok(Arc::new(ExpSum(n))),
            FixtureName::Gaussian1d => Ok(Arc::new(Gaussian1d)),
            _ => Err(self.lacks("a convex potential")),
        }
    }

    pub fn hesse_potential(&self, chart: &Chart) -> Result<HessePotential> {
        self.check_chart(chart)?;
        HessePotential::from_analytic(chart, self.potential()?)
    }

    /// Position `f(x)` of the affine fixtures.
    pub fn affine_position(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.name {
            FixtureName::Paraboloid(_) => {
                let mut v = x.to_vec();
                v.push(0.5 * x.iter().map(|t| t * t).sum::<f64>());
                Ok(v)
            }
            FixtureName::Sphere2 => {
                let (st, ct) = x[0].sin_cos();
                let (sp, cp) = x[1].sin_cos();
                Ok(vec![st * cp, st * sp, ct])
            }
            FixtureName::ConeCodim2 => Ok(vec![x[0], x[1], x[0].exp() + x[1].exp(), 1.0]),
            _ => Err(self.lacks("an affine immersion")),
        }
    }

    /// Transverse field `ξ(x)`: `−e_{n+1}` for the paraboloid, the outward
    /// radial field for the sphere, `−e_3 + f/4` for the lifted graph.
    pub fn affine_transversal(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.name {
            FixtureName::Paraboloid(n) => {
                let mut v = vec![0.0; n + 1];
                v[n] = -1.0;
                Ok(v)
            }
            FixtureName::Sphere2 => self.affine_position(x),
            FixtureName::ConeCodim2 => {
                let f = self.affine_position(x)?;
                Ok(vec![0.25 * f[0], 0.25 * f[1], -1.0 + 0.25 * f[2], 0.25 * f[3]])
            }
            _ => Err(self.lacks("an affine immersion")),
        }
    }

    /// Closed-form conormal map `φ(x)`.
    pub fn affine_conormal(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.name {
            FixtureName::Paraboloid(_) => {
                let mut v = x.to_vec();
                v.push(-1.0);
                Ok(v)
            }
            FixtureName::Sphere2 => self.affine_position(x),
            FixtureName::ConeCodim2 => {
                let (ex, ey) = (x[0].exp(), x[1].exp());
                Ok(vec![ex, ey, -1.0, ex + ey - x[0] * ex - x[1] * ey])
            }
            _ => Err(self.lacks("an affine immersion")),
        }
    }

    pub fn affine(&self, chart: &Chart) -> Result<AffineImmersion> {
        self.check_chart(chart)?;
        let big_n = self.affine_position(&chart.point_coords(0))?.len();
        let f = Field::from_fn(chart, &[big_n], |x, out| out.copy_from_slice(&self.affine_position(x).expect("checked")));
        let xi = Field::from_fn(chart, &[big_n], |x, out| out.copy_from_slice(&self.affine_transversal(x).expect("checked")));
        AffineImmersion::new(f, xi)
    }

    fn check_chart(&self, chart: &Chart) -> Result<()> {
        if chart.dim() != self.dim() {
            return Err(GeometryError::ShapeMismatch(format!(
                "fixture {} is {}-dimensional, chart is {}-dimensional",
                self.name,
                self.dim(),
                chart.dim()
            )));
        }
        Ok(())
    }
}

/// `ψ = ½|ξ|²`.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic(pub usize);

impl ConvexPotential for Quadratic {
    fn dim(&self) -> usize {
        self.0
    }
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn hessian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.0, self.0)
    }
    fn conjugate_value(&self, eta: &[f64]) -> Option<f64> {
        Some(self.value(eta))
    }
    fn conjugate_gradient(&self, eta: &[f64]) -> Option<Vec<f64>> {
        Some(eta.to_vec())
    }
    fn conjugate_hessian(&self, _eta: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(self.0, self.0))
    }
}

/// `ψ = Σ e^{ξ^i}`, `ψ* = Σ (η_i log η_i − η_i)`.
#[derive(Debug, Clone, Copy)]
pub struct ExpSum(pub usize);

impl ConvexPotential for ExpSum {
    fn dim(&self) -> usize {
        self.0
    }
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v.exp()).sum()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.exp()).collect()
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.0, self.0, |i, j| if i == j { x[i].exp() } else { 0.0 })
    }
    fn conjugate_value(&self, eta: &[f64]) -> Option<f64> {
        eta.iter().all(|e| *e > 0.0).then(|| eta.iter().map(|e| e * e.ln() - e).sum())
    }
    fn conjugate_gradient(&self, eta: &[f64]) -> Option<Vec<f64>> {
        eta.iter().all(|e| *e > 0.0).then(|| eta.iter().map(|e| e.ln()).collect())
    }
    fn conjugate_hessian(&self, eta: &[f64]) -> Option<DMatrix<f64>> {
        eta.iter()
            .all(|e| *e > 0.0)
            .then(|| DMatrix::from_fn(self.0, self.0, |i, j| if i == j { 1.0 / eta[i] } else { 0.0 }))
    }
}

/// Log-partition of the univariate normal family in natural parameters
/// `(θ₁, θ₂) = (μ/σ², −1/(2σ²))`: `ψ = −θ₁²/(4θ₂) − ½ log(−2θ₂)`.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian1d;

impl ConvexPotential for Gaussian1d {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64]) -> f64 {
        let (t1, t2) = (x[0], x[1]);
        -t1 * t1 / (4.0 * t2) - 0.5 * (-2.0 * t2).ln()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (t1, t2) = (x[0], x[1]);
        vec![-t1 / (2.0 * t2), (t1 * t1 - 2.0 * t2) / (4.0 * t2 * t2)]
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let (t1, t2) = (x[0], x[1]);
        let off = t1 / (2.0 * t2 * t2);
        DMatrix::from_row_slice(2, 2, &[-1.0 / (2.0 * t2), off, off, (t2 - t1 * t1) / (2.0 * t2.powi(3))])
    }
    fn conjugate_value(&self, eta: &[f64]) -> Option<f64> {
        let s = eta[1] - eta[0] * eta[0];
        (s > 0.0).then(|| -0.5 * (1.0 + s.ln()))
    }
    fn conjugate_gradient(&self, eta: &[f64]) -> Option<Vec<f64>> {
        let s = eta[1] - eta[0] * eta[0];
        (s > 0.0).then(|| vec![eta[0] / s, -0.5 / s])
    }
    fn conjugate_hessian(&self, eta: &[f64]) -> Option<DMatrix<f64>> {
        let s = eta[1] - eta[0] * eta[0];
        let s2 = s * s;
        (s > 0.0).then(|| {
            DMatrix::from_row_slice(2, 2, &[(eta[0] * eta[0] + eta[1]) / s2, -eta[0] / s2, -eta[0] / s2, 0.5 / s2])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in ["euclidean(3)", "exp_potential(2)", "sphere2", "paraboloid(1)", "cone_codim2", "gaussian1d"] {
            assert_eq!(s.parse::<FixtureName>().unwrap().to_string(), s);
        }
        assert_eq!("euclidean".parse::<FixtureName>().unwrap(), FixtureName::Euclidean(2));
        assert!(matches!("torus".parse::<FixtureName>(), Err(GeometryError::UnknownFixture(_))));
        assert!("sphere2(3)".parse::<FixtureName>().is_err());
        assert!("euclidean(0)".parse::<FixtureName>().is_err());
    }

    #[test]
    fn gaussian_sample_point() {
        let x = [0.2, -1.0];
        let g = Gaussian1d;
        assert!((g.value(&x) - -0.33657359027997265).abs() < 1e-15);
        let eta = g.gradient(&x);
        assert!((eta[0] - 0.1).abs() < 1e-15 && (eta[1] - 0.51).abs() < 1e-15);
        let h = g.hessian(&x);
        assert!((h - DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.52])).amax() < 1e-15);
        assert!((g.conjugate_value(&eta).unwrap() - -0.15342640972002735).abs() < 1e-15);
        let back = g.conjugate_gradient(&eta).unwrap();
        assert!((back[0] - 0.2).abs() < 1e-14 && (back[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn exp_conjugate_at_one() {
        assert_eq!(ExpSum(1).conjugate_value(&[1.0]), Some(-1.0));
        assert_eq!(ExpSum(1).conjugate_value(&[-1.0]), None);
    }

    #[test]
    fn sphere_connection_values() {
        let fx = Fixture::new(FixtureName::Sphere2);
        let th = PI / 3.0;
        let c = fx.connection(&[th, 0.1]);
        assert!((c[idx3(2, 1, 1, 0)] + th.sin() * th.cos()).abs() < 1e-15);
        assert!((c[idx3(2, 0, 1, 1)] - 1.0 / th.tan()).abs() < 1e-15);
    }

    #[test]
    fn missing_data_is_reported() {
        let fx = Fixture::new(FixtureName::Sphere2);
        assert!(matches!(fx.potential(), Err(GeometryError::FixtureLacks { .. })));
        let eu = Fixture::new(FixtureName::Euclidean(2));
        assert!(eu.affine(&eu.chart(5).unwrap()).is_err());
    }
}
