//! Hessian (flat statistical) structures: convex potentials in affine
//! coordinates, their Hessian metrics, and the Legendre transform to the dual
//! affine coordinates.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};
use crate::grid::{d1, partial, second_partial, Chart, LagrangeInterpolator, Field};
use crate::linalg::{matrix_at, max_abs, min_eigenvalue, write_matrix};
use crate::structures::{riemann, StatisticalStructure};

/// Points per axis of the rectangular η-grid used by the interpolated
/// Legendre diagnostics.
pub const REGRID_POINTS: usize = 17;

/// A convex potential with closed-form derivatives, optionally with its
/// Legendre conjugate.
pub trait ConvexPotential: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;

    fn conjugate_value(&self, _eta: &[f64]) -> Option<f64> {
        None
    }
    /// The inverse of the gradient map, `∂ψ*/∂η`.
    fn conjugate_gradient(&self, _eta: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn conjugate_hessian(&self, _eta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// A sampled potential `ψ` over affine coordinates `ξ`.
#[derive(Debug, Clone)]
pub struct HessePotential {
    psi: Field,
    analytic: Option<Arc<dyn ConvexPotential>>,
}

impl HessePotential {
    pub fn from_field(psi: Field) -> Result<Self> {
        if !psi.value_shape().is_empty() {
            return Err(GeometryError::ShapeMismatch(format!("potential must be scalar, got {:?}", psi.value_shape())));
        }
        Ok(Self { psi, analytic: None })
    }

    pub fn from_analytic(chart: &Chart, potential: Arc<dyn ConvexPotential>) -> Result<Self> {
        if potential.dim() != chart.dim() {
            return Err(GeometryError::ShapeMismatch(format!(
                "{}-dimensional potential on a {}-dimensional chart",
                potential.dim(),
                chart.dim()
            )));
        }
        let psi = Field::scalar(chart, |x| potential.value(x));
        Ok(Self { psi, analytic: Some(potential) })
    }

    pub fn chart(&self) -> &Chart {
        self.psi.chart()
    }

    pub fn psi(&self) -> &Field {
        &self.psi
    }

    pub fn analytic(&self) -> Option<&Arc<dyn ConvexPotential>> {
        self.analytic.as_ref()
    }

    /// Finite-difference Hessian `∂²ψ/∂ξ^i∂ξ^j`, value shape `[n, n]`.
    pub fn sampled_hessian(&self) -> Field {
        let n = self.chart().dim();
        let mut parts = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                parts.push(second_partial(&self.psi, i, j).expect("axes in range"));
            }
        }
        Field::from_index_fn(self.chart(), &[n, n], |p, out| {
            for (slot, part) in out.iter_mut().zip(&parts) {
                *slot = part.at(p)[0];
            }
        })
    }
}

/// `g = ∂²ψ`, `Γ = 0` in the affine coordinates. Rejects potentials whose
/// Hessian is not positive definite, reporting the first offending point.
pub fn hessian_metric(p: &HessePotential) -> Result<StatisticalStructure> {
    let chart = p.chart();
    let n = chart.dim();
    let g = p.sampled_hessian();
    let scale = g.max_abs().max(1.0);
    for q in 0..chart.len() {
        let e = min_eigenvalue(&matrix_at(&g, q, 0, n, n));
        if !(e > 1e-10 * scale) {
            return Err(GeometryError::NotPositiveDefinite { point: chart.multi_index(q), min_eigenvalue: e });
        }
    }
    StatisticalStructure::new(g, Field::zeros(chart, &[n, n, n]))
}

/// Max-norm of the curvature of a torsion-free connection.
pub fn flatness_residual(gamma: &Field) -> f64 {
    riemann(gamma).max_abs()
}

/// Dual coordinates and conjugate potential, reported at the image points
/// `η(ξ_p)` of the grid.
#[derive(Debug, Clone)]
pub struct LegendreTransform {
    /// `η_A = ∂ψ/∂ξ^A` at every grid point.
    pub eta: Field,
    /// `ψ* = ξ^A η_A − ψ` at every grid point (i.e. at the scattered `η_p`).
    pub psi_star: Field,
    pub diagnostics: LegendreDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendreDiagnostics {
    /// `max |∂ψ*/∂η − ξ|` by finite differences on a rectangular η-grid,
    /// with `ψ*` re-gridded by interpolation.
    pub regrid_gradient_residual: f64,
    /// `max |(∂²ψ*/∂η²)(∂²ψ/∂ξ²) − I|` on the re-gridded η-grid.
    pub regrid_inverse_hessian_residual: f64,
    /// Coordinate ranges of the re-gridded η-chart.
    pub regrid_ranges: Vec<(f64, f64)>,
    /// `max |∂ψ*/∂η(η_p) − ξ_p|` with the analytic conjugate.
    pub analytic_gradient_residual: Option<f64>,
    /// `max |(∂²ψ*/∂η²)(η_p) · H_p − I|` with the analytic conjugate Hessian and
    /// the finite-difference Hessian `H_p` of the sampled potential.
    pub inverse_hessian_residual: Option<f64>,
    /// As above with the analytic Hessian of `ψ`.
    pub analytic_inverse_hessian_residual: Option<f64>,
    /// `max |ψ*_p − ψ*(η_p)|` against the analytic conjugate.
    pub conjugate_value_residual: Option<f64>,
    /// Legendre transform of the analytic conjugate compared with `ψ`, up to
    /// an additive constant.
    pub double_legendre_residual: Option<f64>,
    /// `max |η_FD − η_analytic|` when an analytic gradient exists.
    pub eta_fd_residual: Option<f64>,
}

/// Legendre transform of `(ξ, ψ)` with its consistency diagnostics.
///
/// `η` uses the analytic gradient when the potential provides one and finite
/// differences otherwise. Injectivity of `ξ ↦ η` is certified locally by the
/// positive-definite Hessian and globally on the chart by strict monotonicity
/// of `η_A` along every grid line of axis `A`.
pub fn legendre_transform(p: &HessePotential) -> Result<LegendreTransform> {
    let chart = p.chart();
    let n = chart.dim();
    let structure = hessian_metric(p)?;
    let hess = structure.g().clone();
    let parts: Vec<Field> = (0..n).map(|a| d1(p.psi(), a)).collect();
    let eta_fd = Field::from_index_fn(chart, &[n], |q, out| {
        for (slot, part) in out.iter_mut().zip(&parts) {
            *slot = part.at(q)[0];
        }
    });
    let eta = match p.analytic() {
        Some(an) => Field::from_fn(chart, &[n], |x, out| out.copy_from_slice(&an.gradient(x))),
        None => eta_fd.clone(),
    };
    check_monotone(&eta)?;

    let psi_star = Field::from_index_fn(chart, &[], |q, out| {
        let x = chart.point_coords(q);
        out[0] = x.iter().zip(eta.at(q)).map(|(a, b)| a * b).sum::<f64>() - p.psi().at(q)[0];
    });

    let regrid = regrid_diagnostics(p, &eta, &hess)?;

    let mut diagnostics = LegendreDiagnostics {
        regrid_gradient_residual: regrid.gradient_residual,
        regrid_inverse_hessian_residual: regrid.inverse_hessian_residual,
        regrid_ranges: regrid.ranges,
        analytic_gradient_residual: None,
        inverse_hessian_residual: None,
        analytic_inverse_hessian_residual: None,
        conjugate_value_residual: None,
        double_legendre_residual: None,
        eta_fd_residual: None,
    };

    if let Some(an) = p.analytic() {
        diagnostics.eta_fd_residual = Some(eta.max_abs_diff(&eta_fd)?);
        let mut grad_res: Option<f64> = Some(0.0);
        let mut inv_res: Option<f64> = Some(0.0);
        let mut inv_an: Option<f64> = Some(0.0);
        let mut val_res: Option<f64> = Some(0.0);
        let mut diffs: Option<Vec<f64>> = Some(Vec::with_capacity(chart.len()));
        let identity = DMatrix::<f64>::identity(n, n);
        for q in 0..chart.len() {
            let x = chart.point_coords(q);
            let e = eta.at(q);
            grad_res = match (grad_res, an.conjugate_gradient(e)) {
                (Some(r), Some(xi)) => Some(xi.iter().zip(&x).fold(r, |m, (a, b)| m.max((a - b).abs()))),
                _ => None,
            };
            let hs = an.conjugate_hessian(e);
            inv_res = match (inv_res, &hs) {
                (Some(r), Some(hs)) => Some(r.max(max_abs(&(hs * matrix_at(&hess, q, 0, n, n) - &identity)))),
                _ => None,
            };
            inv_an = match (inv_an, &hs) {
                (Some(r), Some(hs)) => Some(r.max(max_abs(&(hs * an.hessian(&x) - &identity)))),
                _ => None,
            };
            let cv = an.conjugate_value(e);
            val_res = match (val_res, cv) {
                (Some(r), Some(v)) => Some(r.max((psi_star.at(q)[0] - v).abs())),
                _ => None,
            };
            diffs = match (diffs, cv, an.conjugate_gradient(e)) {
                (Some(mut d), Some(v), Some(xi)) => {
                    let double = e.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>() - v;
                    d.push(double - an.value(&x));
                    Some(d)
                }
                _ => None,
            };
        }
        diagnostics.analytic_gradient_residual = grad_res;
        diagnostics.inverse_hessian_residual = inv_res;
        diagnostics.analytic_inverse_hessian_residual = inv_an;
        diagnostics.conjugate_value_residual = val_res;
        diagnostics.double_legendre_residual = diffs.map(|d| {
            let c = d[chart.flat_index(&chart.center())];
            d.iter().fold(0.0_f64, |m, v| m.max((v - c).abs()))
        });
    }

    Ok(LegendreTransform { eta, psi_star, diagnostics })
}

fn check_monotone(eta: &Field) -> Result<()> {
    let chart = eta.chart();
    let n = chart.dim();
    for axis in 0..n {
        let s = chart.stride(axis);
        let m = chart.shape()[axis];
        for start in chart.line_starts(axis) {
            for i in 0..m - 1 {
                let (a, b) = (eta.at(start + i * s)[axis], eta.at(start + (i + 1) * s)[axis]);
                if !(b > a) {
                    return Err(GeometryError::NotInjective(format!(
                        "eta_{axis} not increasing between grid points {:?} and {:?}",
                        chart.multi_index(start + i * s),
                        chart.multi_index(start + (i + 1) * s)
                    )));
                }
            }
        }
    }
    Ok(())
}

struct Regrid {
    gradient_residual: f64,
    inverse_hessian_residual: f64,
    ranges: Vec<(f64, f64)>,
}

/// Solves `η(ξ) = target` by Newton's method on the interpolated gradient map,
/// staying at least one cell inside the chart.
fn invert_gradient(
    eta: &LagrangeInterpolator<'_>,
    hess: &LagrangeInterpolator<'_>,
    chart: &Chart,
    start: &[f64],
    target: &[f64],
) -> Option<Vec<f64>> {
    let n = chart.dim();
    let mut x = start.to_vec();
    let scale = target.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for _ in 0..100 {
        let e = eta.eval(&x)?;
        let r = DVector::from_iterator(n, e.iter().zip(target).map(|(a, b)| a - b));
        if r.amax() <= 1e-14 * scale {
            return Some(x);
        }
        let h = DMatrix::from_row_slice(n, n, &hess.eval(&x)?);
        let step = h.lu().solve(&r)?;
        for (axis, xa) in x.iter_mut().enumerate() {
            *xa -= step[axis];
            let (lo, hi) = chart.ranges()[axis];
            let margin = chart.spacing()[axis];
            if !(*xa >= lo + margin && *xa <= hi - margin) {
                return None;
            }
        }
    }
    let e = eta.eval(&x)?;
    let err = e.iter().zip(target).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    (err <= 1e-11 * scale).then_some(x)
}

fn regrid_diagnostics(p: &HessePotential, eta: &Field, hess: &Field) -> Result<Regrid> {
    let chart = p.chart();
    let n = chart.dim();
    let psi_i = LagrangeInterpolator::quintic(p.psi());
    let eta_i = LagrangeInterpolator::quintic(eta);
    let hess_i = LagrangeInterpolator::quintic(hess);
    let center_p = chart.flat_index(&chart.center());
    let x_c = chart.point_coords(center_p);
    let eta_c = eta.at(center_p).to_vec();
    let mut half: Vec<f64> = (0..n)
        .map(|a| {
            let (lo, hi) = (0..chart.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                let v = eta.at(q)[a];
                (lo.min(v), hi.max(v))
            });
            0.25 * (hi - lo)
        })
        .collect();

    for _ in 0..8 {
        let ranges: Vec<(f64, f64)> = (0..n).map(|a| (eta_c[a] - half[a], eta_c[a] + half[a])).collect();
        let eta_chart = Chart::uniform(ranges.clone(), REGRID_POINTS)?;
        let mut xi = Field::zeros(&eta_chart, &[n]);
        let mut ok = true;
        for q in 0..eta_chart.len() {
            let target = eta_chart.point_coords(q);
            match invert_gradient(&eta_i, &hess_i, chart, &x_c, &target) {
                Some(x) => xi.at_mut(q).copy_from_slice(&x),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            half.iter_mut().for_each(|h| *h *= 0.5);
            continue;
        }
        let psi_star = Field::from_index_fn(&eta_chart, &[], |q, out| {
            let target = eta_chart.point_coords(q);
            let x = xi.at(q);
            let psi = psi_i.eval(x).expect("inside chart")[0];
            out[0] = x.iter().zip(&target).map(|(a, b)| a * b).sum::<f64>() - psi;
        });
        let mut gradient_residual: f64 = 0.0;
        for a in 0..n {
            let d = partial(&psi_star, a)?;
            for q in 0..eta_chart.len() {
                gradient_residual = gradient_residual.max((d.at(q)[0] - xi.at(q)[a]).abs());
            }
        }
        let mut second = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                second.push(second_partial(&psi_star, a, b)?);
            }
        }
        let identity = DMatrix::<f64>::identity(n, n);
        let mut inverse_hessian_residual: f64 = 0.0;
        for q in 0..eta_chart.len() {
            let mut hs = DMatrix::zeros(n, n);
            for a in 0..n {
                for b in 0..n {
                    hs[(a, b)] = second[a * n + b].at(q)[0];
                }
            }
            let h = DMatrix::from_row_slice(n, n, &hess_i.eval(xi.at(q)).expect("inside chart"));
            inverse_hessian_residual = inverse_hessian_residual.max(max_abs(&(hs * h - &identity)));
        }
        return Ok(Regrid { gradient_residual, inverse_hessian_residual, ranges });
    }
    Err(GeometryError::NotInjective("could not invert the gradient map on any η-box around the chart center".into()))
}

/// Samples the Hessian of an analytic potential, value shape `[n, n]`.
pub fn analytic_hessian_field(chart: &Chart, potential: &dyn ConvexPotential) -> Field {
    let n = chart.dim();
    Field::from_fn(chart, &[n, n], |x, out| write_matrix(out, &potential.hessian(x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Quadratic;

    impl ConvexPotential for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> f64 {
            0.5 * x[0] * x[0]
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0]]
        }
        fn hessian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
        fn conjugate_value(&self, eta: &[f64]) -> Option<f64> {
            Some(0.5 * eta[0] * eta[0])
        }
        fn conjugate_gradient(&self, eta: &[f64]) -> Option<Vec<f64>> {
            Some(vec![eta[0]])
        }
        fn conjugate_hessian(&self, _eta: &[f64]) -> Option<DMatrix<f64>> {
            Some(DMatrix::identity(1, 1))
        }
    }

    #[test]
    fn quadratic_is_self_dual() {
        let chart = Chart::uniform(vec![(-1.0, 1.0)], 17).unwrap();
        let p = HessePotential::from_analytic(&chart, Arc::new(Quadratic)).unwrap();
        let g = hessian_metric(&p).unwrap();
        assert!(g.g().map(|v| v - 1.0).max_abs() < 1e-12);
        let lt = legendre_transform(&p).unwrap();
        for q in 0..chart.len() {
            let x = chart.point_coords(q)[0];
            assert!((lt.eta.at(q)[0] - x).abs() < 1e-14);
            assert!((lt.psi_star.at(q)[0] - 0.5 * x * x).abs() < 1e-14);
        }
        assert!(lt.diagnostics.regrid_gradient_residual < 1e-10);
    }

    #[test]
    fn numeric_exp_transform() {
        let chart = Chart::uniform(vec![(-0.5, 0.5)], 33).unwrap();
        let p = HessePotential::from_field(Field::scalar(&chart, |x| x[0].exp())).unwrap();
        let lt = legendre_transform(&p).unwrap();
        let mid = chart.flat_index(&[16]);
        assert!((lt.eta.at(mid)[0] - 1.0).abs() < 1e-7);
        assert!((lt.psi_star.at(mid)[0] + 1.0).abs() < 1e-7);
        assert!(lt.diagnostics.regrid_gradient_residual < 1e-4, "{:?}", lt.diagnostics);
        assert!(lt.diagnostics.analytic_gradient_residual.is_none());
    }

    #[test]
    fn degenerate_quartic_is_rejected() {
        let chart = Chart::uniform(vec![(-1.0, 1.0)], 17).unwrap();
        let p = HessePotential::from_field(Field::scalar(&chart, |x| x[0].powi(4))).unwrap();
        match hessian_metric(&p) {
            Err(GeometryError::NotPositiveDefinite { point, .. }) => assert_eq!(point, vec![8]),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn non_monotone_gradient_is_not_injective() {
        let chart = Chart::uniform(vec![(-1.0, 1.0)], 9).unwrap();
        let eta = Field::from_fn(&chart, &[1], |x, out| out[0] = x[0] * x[0]);
        assert!(matches!(check_monotone(&eta), Err(GeometryError::NotInjective(_))));
    }

    #[test]
    fn flat_connection_has_zero_residual() {
        let chart = Chart::uniform(vec![(0.0, 1.0); 2], 9).unwrap();
        assert_eq!(flatness_residual(&Field::zeros(&chart, &[2, 2, 2])), 0.0);
    }
}
