//! Statistical structures `(g, ∇)` on a chart: axiom checks, the dual and
//! α-connections, curvature in the Ricci-identity convention, and the duality
//! between the curvatures of `∇` and `∇*`.
//!
//! Connections are stored as `Γ_ij^k` (lower, lower, upper) with value shape
//! `[n, n, n]`, meaning `∇_{∂_i} ∂_j = Γ_ij^k ∂_k`. All-lower forms
//! `Γ_ijk = g_kl Γ_ij^l` are derived on demand.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};
use crate::grid::{d1, Chart, Field};
use crate::linalg::{matrix_at, min_eigenvalue, write_matrix};

/// Default tolerance for the torsion and `∇g` symmetry residuals.
pub const DEFAULT_AXIOM_TOLERANCE: f64 = 1e-6;

#[inline]
pub(crate) fn idx3(n: usize, i: usize, j: usize, k: usize) -> usize {
    (i * n + j) * n + k
}

#[inline]
pub(crate) fn idx4(n: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * n + j) * n + k) * n + l
}

/// Metric `g_ij` (value shape `[n, n]`) and connection `Γ_ij^k` on one chart.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticalStructure {
    g: Field,
    gamma: Field,
}

/// Outcome of [`StatisticalStructure::check_statistical`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    /// `max |Γ_ij^k − Γ_ji^k|`.
    pub torsion_residual: f64,
    /// `max |∇_i g_jk − ∇_j g_ik|`.
    pub nabla_g_residual: f64,
    pub min_metric_eigenvalue: f64,
    /// Grid point where the metric's smallest eigenvalue is attained.
    pub worst_metric_point: Vec<usize>,
    /// Whether a Cholesky factorization succeeded at every grid point.
    pub metric_positive_definite: bool,
}

impl AxiomReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.metric_positive_definite && self.torsion_residual <= tolerance && self.nabla_g_residual <= tolerance
    }
}

/// Curvature `R_ij^k_l` together with `R_ijkl = g_km R_ij^m_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureField {
    pub r: Field,
    pub r_low: Field,
}

impl StatisticalStructure {
    pub fn new(g: Field, gamma: Field) -> Result<Self> {
        let n = g.chart().dim();
        if g.value_shape() != [n, n] {
            return Err(GeometryError::ShapeMismatch(format!("metric needs value shape [{n}, {n}], got {:?}", g.value_shape())));
        }
        if gamma.value_shape() != [n, n, n] {
            return Err(GeometryError::ShapeMismatch(format!(
                "connection needs value shape [{n}, {n}, {n}], got {:?}",
                gamma.value_shape()
            )));
        }
        if g.chart() != gamma.chart() {
            return Err(GeometryError::ShapeMismatch("metric and connection live on different charts".into()));
        }
        Ok(Self { g, gamma })
    }

    /// Same metric, different connection.
    pub fn with_connection(&self, gamma: Field) -> Result<Self> {
        Self::new(self.g.clone(), gamma)
    }

    pub fn chart(&self) -> &Chart {
        self.g.chart()
    }

    pub fn dim(&self) -> usize {
        self.chart().dim()
    }

    pub fn g(&self) -> &Field {
        &self.g
    }

    pub fn gamma(&self) -> &Field {
        &self.gamma
    }

    pub fn metric_at(&self, p: usize) -> DMatrix<f64> {
        let n = self.dim();
        matrix_at(&self.g, p, 0, n, n)
    }

    /// Torsion, `∇g` symmetry and metric positivity.
    pub fn check_statistical(&self) -> Result<AxiomReport> {
        let n = self.dim();
        let chart = self.chart();
        let dg: Vec<Field> = (0..n).map(|a| d1(&self.g, a)).collect();
        let mut torsion: f64 = 0.0;
        let mut nabla: f64 = 0.0;
        let mut min_eig = f64::INFINITY;
        let mut worst = chart.center();
        let mut all_pd = true;
        let mut cov = vec![0.0; n * n * n];
        for p in 0..chart.len() {
            let g = self.g.at(p);
            let gam = self.gamma.at(p);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        torsion = torsion.max((gam[idx3(n, i, j, k)] - gam[idx3(n, j, i, k)]).abs());
                        let mut v = dg[i].at(p)[j * n + k];
                        for l in 0..n {
                            v -= gam[idx3(n, i, j, l)] * g[l * n + k] + gam[idx3(n, i, k, l)] * g[j * n + l];
                        }
                        cov[idx3(n, i, j, k)] = v;
                    }
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    for k in 0..n {
                        nabla = nabla.max((cov[idx3(n, i, j, k)] - cov[idx3(n, j, i, k)]).abs());
                    }
                }
            }
            let m = self.metric_at(p);
            if Cholesky::new(m.clone()).is_none() {
                all_pd = false;
            }
            let e = min_eigenvalue(&m);
            if e < min_eig {
                min_eig = e;
                worst = chart.multi_index(p);
            }
        }
        Ok(AxiomReport {
            torsion_residual: torsion,
            nabla_g_residual: nabla,
            min_metric_eigenvalue: min_eig,
            worst_metric_point: worst,
            metric_positive_definite: all_pd && min_eig > 0.0,
        })
    }

    /// `g^ij` at every grid point.
    pub fn metric_inverse(&self) -> Result<Field> {
        let n = self.dim();
        let chart = self.chart();
        let mut inv = Field::zeros(chart, &[n, n]);
        for p in 0..chart.len() {
            let m = self.metric_at(p).try_inverse().ok_or_else(|| GeometryError::SingularMetric { point: chart.multi_index(p) })?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::SingularMetric { point: chart.multi_index(p) });
            }
            write_matrix(inv.at_mut(p), &m);
        }
        Ok(inv)
    }

    /// `Γ_ijk = g_kl Γ_ij^l`.
    pub fn lowered_connection(&self) -> Field {
        lower_last(&self.gamma, &self.g)
    }

    /// Coefficients of `∇*`, defined by `∂_i g_jk = Γ_ijk + Γ*_ikj`.
    pub fn dual_connection(&self) -> Result<Field> {
        let n = self.dim();
        let ginv = self.metric_inverse()?;
        let low = self.lowered_connection();
        let dg: Vec<Field> = (0..n).map(|a| d1(&self.g, a)).collect();
        let dual = Field::from_index_fn(self.chart(), &[n, n, n], |p, out| {
            let gi = ginv.at(p);
            let lo = low.at(p);
            let mut star = vec![0.0; n * n * n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        star[idx3(n, i, j, k)] = dg[i].at(p)[j * n + k] - lo[idx3(n, i, k, j)];
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    for m in 0..n {
                        out[idx3(n, i, j, m)] = (0..n).map(|k| gi[m * n + k] * star[idx3(n, i, j, k)]).sum();
                    }
                }
            }
        });
        finite(dual, "dual_connection")
    }

    /// The dual statistical structure `(g, ∇*)`.
    pub fn dual(&self) -> Result<Self> {
        self.with_connection(self.dual_connection()?)
    }

    /// `Γ^(α) = (1+α)/2 Γ + (1−α)/2 Γ*`.
    pub fn alpha_connection(&self, alpha: f64) -> Result<Field> {
        let star = self.dual_connection()?;
        self.gamma.combine(0.5 * (1.0 + alpha), &star, 0.5 * (1.0 - alpha))
    }

    /// Christoffel symbols of `g`, computed directly from metric derivatives.
    pub fn levi_civita(&self) -> Result<Field> {
        let n = self.dim();
        let ginv = self.metric_inverse()?;
        let dg: Vec<Field> = (0..n).map(|a| d1(&self.g, a)).collect();
        let lc = Field::from_index_fn(self.chart(), &[n, n, n], |p, out| {
            let gi = ginv.at(p);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let mut v = 0.0;
                        for l in 0..n {
                            let first = dg[i].at(p)[j * n + l] + dg[j].at(p)[i * n + l] - dg[l].at(p)[i * n + j];
                            v += gi[k * n + l] * first;
                        }
                        out[idx3(n, i, j, k)] = 0.5 * v;
                    }
                }
            }
        });
        finite(lc, "levi_civita")
    }

    pub fn curvature(&self) -> CurvatureField {
        curvature(&self.gamma, &self.g)
    }

    /// `max |R_ijkl + R*_ijlk|`, the curvature duality between `∇` and `∇*`.
    pub fn curvature_duality_residual(&self) -> Result<f64> {
        let r = self.curvature().r_low;
        let r_star = curvature(&self.dual_connection()?, &self.g).r_low;
        Ok(duality_gap(&r, &r_star))
    }

    /// The same residual with both curvatures lowered pointwise from
    /// `R_ij^k_l`. Limited by truncation error rather than roundoff.
    pub fn pointwise_curvature_duality_residual(&self) -> Result<f64> {
        let r = lower_curvature(&riemann(&self.gamma), &self.g);
        let r_star = lower_curvature(&riemann(&self.dual_connection()?), &self.g);
        Ok(duality_gap(&r, &r_star))
    }
}

fn duality_gap(r: &Field, r_star: &Field) -> f64 {
    let n = r.chart().dim();
    let mut worst: f64 = 0.0;
    for p in 0..r.chart().len() {
        let (a, b) = (r.at(p), r_star.at(p));
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        worst = worst.max((a[idx4(n, i, j, k, l)] + b[idx4(n, i, j, l, k)]).abs());
                    }
                }
            }
        }
    }
    worst
}

pub(crate) fn finite(field: Field, op: &'static str) -> Result<Field> {
    if field.is_finite() {
        Ok(field)
    } else {
        Err(GeometryError::NonFinite(op))
    }
}

/// Lowers the last index of a `[n, n, n]` connection with `g`.
pub(crate) fn lower_last(gamma: &Field, g: &Field) -> Field {
    let n = g.chart().dim();
    Field::from_index_fn(g.chart(), &[n, n, n], |p, out| {
        let (gam, gm) = (gamma.at(p), g.at(p));
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out[idx3(n, i, j, k)] = (0..n).map(|l| gm[k * n + l] * gam[idx3(n, i, j, l)]).sum();
                }
            }
        }
    })
}

/// `R_ij^k_l = ∂_i Γ_jl^k − ∂_j Γ_il^k + Γ_im^k Γ_jl^m − Γ_jm^k Γ_il^m`, the
/// convention of `(∇_i∇_j − ∇_j∇_i) X^k = R_ij^k_l X^l`.
///
/// Only `i < j` is evaluated; the other half is filled by negation so the
/// antisymmetry in `(i, j)` is exact.
pub fn riemann(gamma: &Field) -> Field {
    let n = gamma.chart().dim();
    let dgam: Vec<Field> = (0..n).map(|a| d1(gamma, a)).collect();
    Field::from_index_fn(gamma.chart(), &[n, n, n, n], |p, out| {
        let gam = gamma.at(p);
        for i in 0..n {
            for j in i + 1..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut v = dgam[i].at(p)[idx3(n, j, l, k)] - dgam[j].at(p)[idx3(n, i, l, k)];
                        for m in 0..n {
                            v += gam[idx3(n, i, m, k)] * gam[idx3(n, j, l, m)] - gam[idx3(n, j, m, k)] * gam[idx3(n, i, l, m)];
                        }
                        out[idx4(n, i, j, k, l)] = v;
                        out[idx4(n, j, i, k, l)] = -v;
                    }
                }
            }
        }
    })
}

/// Curvature of `gamma` with respect to the metric `g`.
///
/// `r_low` is evaluated from the lowered connection,
/// `R_ijkl = ∂_i Γ_jlk − ∂_j Γ_ilk − Γ_jl^m Γ°_ikm + Γ_il^m Γ°_jkm` with
/// `Γ°_ikm = ∂_i g_km − Γ_imk`, which equals `g_km R_ij^m_l` in the continuum.
/// In this form the curvature duality between `∇` and `∇*` holds on the grid up
/// to roundoff, since difference operators along different axes commute.
pub fn curvature(gamma: &Field, g: &Field) -> CurvatureField {
    let n = g.chart().dim();
    let r = riemann(gamma);
    let low = lower_last(gamma, g);
    let dlow: Vec<Field> = (0..n).map(|a| d1(&low, a)).collect();
    let dg: Vec<Field> = (0..n).map(|a| d1(g, a)).collect();
    let r_low = Field::from_index_fn(g.chart(), &[n, n, n, n], |p, out| {
        let (gam, lo) = (gamma.at(p), low.at(p));
        let partner = |i: usize, k: usize, m: usize| dg[i].at(p)[k * n + m] - lo[idx3(n, i, m, k)];
        for i in 0..n {
            for j in i + 1..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut v = dlow[i].at(p)[idx3(n, j, l, k)] - dlow[j].at(p)[idx3(n, i, l, k)];
                        for m in 0..n {
                            v += gam[idx3(n, i, l, m)] * partner(j, k, m) - gam[idx3(n, j, l, m)] * partner(i, k, m);
                        }
                        out[idx4(n, i, j, k, l)] = v;
                        out[idx4(n, j, i, k, l)] = -v;
                    }
                }
            }
        }
    });
    CurvatureField { r, r_low }
}

/// `g_km R_ij^m_l`, lowering the raised curvature pointwise.
pub fn lower_curvature(r: &Field, g: &Field) -> Field {
    let n = g.chart().dim();
    Field::from_index_fn(g.chart(), &[n, n, n, n], |p, out| {
        let (rr, gm) = (r.at(p), g.at(p));
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        out[idx4(n, i, j, k, l)] = (0..n).map(|m| gm[k * n + m] * rr[idx4(n, i, j, m, l)]).sum();
                    }
                }
            }
        }
    })
}
