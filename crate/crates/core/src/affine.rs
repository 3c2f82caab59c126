//! Affine immersions of codimension one and two: decomposition of the flat
//! derivative into `(∇, g, S, τ)` (plus `k, μ` in codimension two), the
//! conormal map, and the resulting Lauritzen pair.
//!
//! Conventions: `D_X f_*Y = f_*(∇_X Y) − g(X,Y) ξ [− k(X,Y) η]` and
//! `D_X ξ = f_*(S X) + τ(X) ξ [+ μ(X) η]`, where in codimension two the second
//! transverse field `η` is the position vector `f` itself.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};
use crate::grid::{d1, Chart, Field};
use crate::lauritzen::{jacobian, verify_lauritzen, LauritzenPair, LauritzenReport};
use crate::linalg::{condition_number, min_eigenvalue, matrix_at};
use crate::structures::{idx3, AxiomReport, StatisticalStructure};

/// Frames with a larger condition number are treated as non-transverse.
pub const MAX_TRANSVERSAL_CONDITION: f64 = 1e12;

/// Default bound on `max |τ|` for the equiaffine condition.
pub const DEFAULT_EQUIAFFINE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineImmersion {
    f: Field,
    xi: Field,
    codim: usize,
}

impl AffineImmersion {
    /// `f` and `ξ` with value shape `[n + codim]`, `codim ∈ {1, 2}`.
    pub fn new(f: Field, xi: Field) -> Result<Self> {
        let n = f.chart().dim();
        let big_n = f.value_shape().first().copied().unwrap_or(0);
        if f.value_shape() != [big_n] || xi.value_shape() != [big_n] || !(big_n == n + 1 || big_n == n + 2) {
            return Err(GeometryError::ShapeMismatch(format!(
                "affine immersion of a {n}-manifold needs f, xi of shape [{}] or [{}], got {:?} and {:?}",
                n + 1,
                n + 2,
                f.value_shape(),
                xi.value_shape()
            )));
        }
        if f.chart() != xi.chart() {
            return Err(GeometryError::ShapeMismatch("f and xi live on different charts".into()));
        }
        Ok(Self { f, xi, codim: big_n - n })
    }

    pub fn chart(&self) -> &Chart {
        self.f.chart()
    }

    pub fn codim(&self) -> usize {
        self.codim
    }

    pub fn f(&self) -> &Field {
        &self.f
    }

    pub fn xi(&self) -> &Field {
        &self.xi
    }

    /// Columns `∂_1 f, …, ∂_n f, ξ[, η]` at every point, after checking
    /// transversality.
    fn frames(&self) -> Result<(Vec<DMatrix<f64>>, f64)> {
        let chart = self.chart();
        let n = chart.dim();
        let big_n = n + self.codim;
        let jac = jacobian(&self.f);
        let mut frames = Vec::with_capacity(chart.len());
        let mut worst: f64 = 1.0;
        for p in 0..chart.len() {
            let mut fr = DMatrix::zeros(big_n, big_n);
            let j = jac.at(p);
            for k in 0..n {
                for a in 0..big_n {
                    fr[(a, k)] = j[k * big_n + a];
                }
            }
            for a in 0..big_n {
                fr[(a, n)] = self.xi.at(p)[a];
            }
            if self.codim == 2 {
                let pos = self.f.at(p);
                if pos.iter().all(|v| *v == 0.0) {
                    return Err(GeometryError::NotTransverse {
                        point: chart.multi_index(p),
                        reason: "position vector vanishes (chart passes through the origin)".into(),
                    });
                }
                for a in 0..big_n {
                    fr[(a, n + 1)] = pos[a];
                }
            }
            let cond = condition_number(&fr);
            if !(cond <= MAX_TRANSVERSAL_CONDITION) {
                return Err(GeometryError::NotTransverse {
                    point: chart.multi_index(p),
                    reason: format!("frame (df, xi{}) has condition number {cond:e}", if self.codim == 2 { ", eta" } else { "" }),
                });
            }
            worst = worst.max(cond);
            frames.push(fr);
        }
        Ok((frames, worst))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineDecomposition {
    pub codim: usize,
    /// `Γ_ij^k`, `[n, n, n]`.
    pub gamma: Field,
    /// Affine second fundamental form, `[n, n]`.
    pub g: Field,
    /// Affine shape operator `S_i^k` (row `i` is `S(∂_i)`), `[n, n]`.
    pub s: Field,
    /// `[n]`.
    pub tau: Field,
    /// Codimension two only, `[n, n]`.
    pub k: Option<Field>,
    /// Codimension two only, `[n]`.
    pub mu: Option<Field>,
    /// `max |∂_i∂_j f − Γ_ij^k ∂_k f + g_ij ξ [+ k_ij η]|`.
    pub reconstruction_residual: f64,
    pub max_condition: f64,
}

impl AffineDecomposition {
    pub fn structure(&self) -> Result<StatisticalStructure> {
        StatisticalStructure::new(self.g.clone(), self.gamma.clone())
    }
}

/// Per-point solves of `∂_i∂_j f` and `∂_i ξ` in the frame `(∂f, ξ[, η])`.
pub fn decompose(im: &AffineImmersion) -> Result<AffineDecomposition> {
    let chart = im.chart();
    let n = chart.dim();
    let codim = im.codim;
    let (frames, max_condition) = im.frames()?;
    let df: Vec<Field> = (0..n).map(|a| d1(&im.f, a)).collect();
    let ddf: Vec<Vec<Field>> = (0..n).map(|i| (0..n).map(|j| d1(&df[j], i)).collect()).collect();
    let dxi: Vec<Field> = (0..n).map(|a| d1(&im.xi, a)).collect();

    let mut gamma = Field::zeros(chart, &[n, n, n]);
    let mut g = Field::zeros(chart, &[n, n]);
    let mut s = Field::zeros(chart, &[n, n]);
    let mut tau = Field::zeros(chart, &[n]);
    let mut k = Field::zeros(chart, &[n, n]);
    let mut mu = Field::zeros(chart, &[n]);
    let mut recon: f64 = 0.0;
    for (p, fr) in frames.iter().enumerate() {
        let lu = fr.clone().lu();
        let singular = || GeometryError::NotTransverse { point: chart.multi_index(p), reason: "singular frame".into() };
        for i in 0..n {
            for j in 0..n {
                let rhs = DVector::from_column_slice(ddf[i][j].at(p));
                let c = lu.solve(&rhs).ok_or_else(singular)?;
                for l in 0..n {
                    gamma.at_mut(p)[idx3(n, i, j, l)] = c[l];
                }
                g.at_mut(p)[i * n + j] = -c[n];
                if codim == 2 {
                    k.at_mut(p)[i * n + j] = -c[n + 1];
                }
                recon = recon.max((fr * &c - &rhs).amax());
            }
            let rhs = DVector::from_column_slice(dxi[i].at(p));
            let c = lu.solve(&rhs).ok_or_else(singular)?;
            for l in 0..n {
                s.at_mut(p)[i * n + l] = c[l];
            }
            tau.at_mut(p)[i] = c[n];
            if codim == 2 {
                mu.at_mut(p)[i] = c[n + 1];
            }
        }
    }
    Ok(AffineDecomposition {
        codim,
        gamma,
        g,
        s,
        tau,
        k: (codim == 2).then_some(k),
        mu: (codim == 2).then_some(mu),
        reconstruction_residual: recon,
        max_condition,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineReport {
    pub max_tau: f64,
    pub max_mu: Option<f64>,
    pub min_g_eigenvalue: f64,
    pub g_positive_definite: bool,
    /// `max |g_ij − g_ji|`.
    pub g_asymmetry: f64,
    pub axioms: AxiomReport,
}

impl AffineReport {
    pub fn is_statistical(&self, tau_tolerance: f64, axiom_tolerance: f64) -> bool {
        self.max_tau <= tau_tolerance && self.g_positive_definite && self.axioms.passes(axiom_tolerance)
    }
}

/// Equiaffinity, positivity of `g`, and the statistical axioms of `(g, ∇)`.
pub fn check_statistical_affine(d: &AffineDecomposition) -> Result<AffineReport> {
    let chart = d.g.chart();
    let n = chart.dim();
    let mut min_eig = f64::INFINITY;
    let mut asym: f64 = 0.0;
    for p in 0..chart.len() {
        let m = matrix_at(&d.g, p, 0, n, n);
        min_eig = min_eig.min(min_eigenvalue(&m));
        asym = asym.max((&m - m.transpose()).amax());
    }
    Ok(AffineReport {
        max_tau: d.tau.max_abs(),
        max_mu: d.mu.as_ref().map(Field::max_abs),
        min_g_eigenvalue: min_eig,
        g_positive_definite: min_eig > 0.0,
        g_asymmetry: asym,
        axioms: d.structure()?.check_statistical()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conormal {
    /// `φ`, `[n + codim]`.
    pub phi: Field,
    pub diagnostics: ConormalDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConormalDiagnostics {
    /// `max |φ · ∂_i f|`.
    pub tangent_residual: f64,
    /// `max |φ · ξ − 1|`.
    pub xi_residual: f64,
    /// `max |φ · η|` (codimension two).
    pub eta_residual: Option<f64>,
    /// `max |ξ · ∂_i φ|`.
    pub xi_dphi_residual: f64,
    /// `max |η · ∂_i φ|` (codimension two).
    pub eta_dphi_residual: Option<f64>,
    /// Smallest singular-value ratio of `∂φ`.
    pub rank_ratio: f64,
}

/// Solves `φ · ∂_i f = 0`, `φ · ξ = 1` [, `φ · η = 0`] per point.
pub fn conormal_map(im: &AffineImmersion) -> Result<Conormal> {
    let chart = im.chart();
    let n = chart.dim();
    let big_n = n + im.codim;
    let (frames, _) = im.frames()?;
    let mut phi = Field::zeros(chart, &[big_n]);
    let mut rhs = DVector::zeros(big_n);
    rhs[n] = 1.0;
    let mut tangent: f64 = 0.0;
    let mut xi_res: f64 = 0.0;
    let mut eta_res: f64 = 0.0;
    for (p, fr) in frames.iter().enumerate() {
        let sol = fr
            .transpose()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GeometryError::NotTransverse { point: chart.multi_index(p), reason: "singular frame".into() })?;
        let check = fr.transpose() * &sol;
        for k in 0..n {
            tangent = tangent.max(check[k].abs());
        }
        xi_res = xi_res.max((check[n] - 1.0).abs());
        if im.codim == 2 {
            eta_res = eta_res.max(check[n + 1].abs());
        }
        phi.at_mut(p).copy_from_slice(sol.as_slice());
    }
    let jphi = jacobian(&phi);
    let mut xi_dphi: f64 = 0.0;
    let mut eta_dphi: f64 = 0.0;
    let mut rank_ratio = f64::INFINITY;
    for p in 0..chart.len() {
        let jp = matrix_at(&jphi, p, 0, n, big_n);
        let xi = DVector::from_column_slice(im.xi.at(p));
        xi_dphi = xi_dphi.max((&jp * &xi).amax());
        if im.codim == 2 {
            let eta = DVector::from_column_slice(im.f.at(p));
            eta_dphi = eta_dphi.max((&jp * &eta).amax());
        }
        rank_ratio = rank_ratio.min(crate::linalg::singular_value_ratio(&jp));
    }
    let two = im.codim == 2;
    Ok(Conormal {
        phi,
        diagnostics: ConormalDiagnostics {
            tangent_residual: tangent,
            xi_residual: xi_res,
            eta_residual: two.then_some(eta_res),
            xi_dphi_residual: xi_dphi,
            eta_dphi_residual: two.then_some(eta_dphi),
            rank_ratio,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLauritzen {
    pub pair: LauritzenPair,
    pub decomposition: AffineDecomposition,
    pub affine: AffineReport,
    pub conormal: ConormalDiagnostics,
    pub verification: LauritzenReport,
}

/// The pair `(f, φ)` of an equiaffine immersion with positive definite `g`,
/// verified against the decomposed `(g, ∇)`.
pub fn affine_to_lauritzen(im: &AffineImmersion, tau_tolerance: f64) -> Result<AffineLauritzen> {
    let decomposition = decompose(im)?;
    let affine = check_statistical_affine(&decomposition)?;
    if !(affine.max_tau <= tau_tolerance) {
        return Err(GeometryError::NotEquiaffine { max_tau: affine.max_tau, tolerance: tau_tolerance });
    }
    if !affine.g_positive_definite {
        return Err(GeometryError::IndefiniteAffineMetric { min_eigenvalue: affine.min_g_eigenvalue });
    }
    let conormal = conormal_map(im)?;
    let pair = LauritzenPair::new(im.f.clone(), conormal.phi)?;
    pair.certify_immersion()?;
    let verification = verify_lauritzen(&pair, &decomposition.structure()?)?;
    Ok(AffineLauritzen { pair, decomposition, affine, conormal: conormal.diagnostics, verification })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paraboloid(m: usize) -> AffineImmersion {
        let chart = Chart::uniform(vec![(-1.0, 1.0); 2], m).unwrap();
        let f = Field::from_fn(&chart, &[3], |x, out| {
            out[0] = x[0];
            out[1] = x[1];
            out[2] = 0.5 * (x[0] * x[0] + x[1] * x[1]);
        });
        let xi = Field::from_fn(&chart, &[3], |_, out| out[2] = -1.0);
        AffineImmersion::new(f, xi).unwrap()
    }

    #[test]
    fn paraboloid_decomposes_exactly() {
        let d = decompose(&paraboloid(9)).unwrap();
        assert!(d.gamma.max_abs() < 1e-10);
        assert!(d.g.max_abs_diff(&Field::from_fn(d.g.chart(), &[2, 2], |_, o| {
            o[0] = 1.0;
            o[3] = 1.0
        }))
        .unwrap()
            < 1e-10);
        assert!(d.s.max_abs() < 1e-12 && d.tau.max_abs() < 1e-12);
        assert!(d.reconstruction_residual < 1e-10);
    }

    #[test]
    fn paraboloid_conormal() {
        let im = paraboloid(9);
        let c = conormal_map(&im).unwrap();
        let chart = im.chart();
        for p in 0..chart.len() {
            let x = chart.point_coords(p);
            assert!((c.phi.at(p)[0] - x[0]).abs() < 1e-12);
            assert!((c.phi.at(p)[2] + 1.0).abs() < 1e-12);
        }
        let al = affine_to_lauritzen(&im, DEFAULT_EQUIAFFINE_TOLERANCE).unwrap();
        assert!(al.verification.passes(1e-8), "{:?}", al.verification);
    }

    #[test]
    fn tangent_xi_is_not_transverse() {
        let chart = Chart::uniform(vec![(-1.0, 1.0); 2], 5).unwrap();
        let f = Field::from_fn(&chart, &[3], |x, out| {
            out[0] = x[0];
            out[1] = x[1];
        });
        let xi = Field::from_fn(&chart, &[3], |x, out| {
            out[0] = 1.0;
            out[2] = if x[0] > 0.9 { 0.0 } else { 1.0 };
        });
        let im = AffineImmersion::new(f, xi).unwrap();
        match decompose(&im) {
            Err(GeometryError::NotTransverse { point, .. }) => assert_eq!(point[0], 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tilted_xi_breaks_equiaffinity() {
        let im = paraboloid(9);
        let xi = Field::from_fn(im.chart(), &[3], |x, out| {
            out[0] = 0.1 * x[0];
            out[2] = -1.0 - 0.2 * x[0];
        });
        let tilted = AffineImmersion::new(im.f().clone(), xi).unwrap();
        let d = decompose(&tilted).unwrap();
        let r = check_statistical_affine(&d).unwrap();
        assert!(r.max_tau > 1e-2, "{r:?}");
        assert!(matches!(affine_to_lauritzen(&tilted, 1e-6), Err(GeometryError::NotEquiaffine { .. })));
    }

    #[test]
    fn codim_two_through_origin_is_rejected() {
        let chart = Chart::uniform(vec![(-1.0, 1.0)], 5).unwrap();
        let f = Field::from_fn(&chart, &[3], |x, out| {
            out[0] = x[0];
            out[1] = x[0] * x[0];
        });
        let xi = Field::from_fn(&chart, &[3], |_, out| out[2] = 1.0);
        let im = AffineImmersion::new(f, xi).unwrap();
        assert!(matches!(decompose(&im), Err(GeometryError::NotTransverse { point, .. }) if point == vec![2]));
    }
}
