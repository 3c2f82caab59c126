//! Lauritzen pairs `(f, φ)`: maps into a vector space `V` and its dual whose
//! natural pairing reproduces a statistical structure,
//! `g_ij = ∂_i f^A ∂_j φ_A` and `Γ_ijk = ∂_i ∂_j f^A ∂_k φ_A`.

use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};
use crate::grid::{d1, Chart, Field};
use crate::linalg::{matrix_at, singular_value_ratio};
use crate::structures::{idx3, StatisticalStructure};

/// Minimum `σ_min / σ_max` of the Jacobian of `f` for it to count as an
/// immersion.
pub const RANK_THRESHOLD: f64 = 1e-8;

/// A pair of maps `f: M → V`, `φ: M → V*` sampled on one chart.
#[derive(Debug, Clone, PartialEq)]
pub struct LauritzenPair {
    f: Field,
    phi: Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LauritzenReport {
    /// `max |g_ij − ∂_i f · ∂_j φ|`.
    pub metric_residual: f64,
    /// `max |Γ_ijk − ∂_i∂_j f · ∂_k φ|`.
    pub connection_residual: f64,
    pub metric_rms: f64,
    pub connection_rms: f64,
    /// `max |⟨∂_i f, ∂_j φ⟩ − ⟨∂_j f, ∂_i φ⟩|`.
    pub pairing_asymmetry: f64,
}

impl LauritzenReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.metric_residual <= tolerance && self.connection_residual <= tolerance
    }
}

impl LauritzenPair {
    pub fn new(f: Field, phi: Field) -> Result<Self> {
        let ambient = f.value_shape().first().copied().unwrap_or(0);
        if f.value_shape() != [ambient] || phi.value_shape() != [ambient] || ambient == 0 {
            return Err(GeometryError::ShapeMismatch(format!(
                "pair components have shapes {:?} and {:?}",
                f.value_shape(),
                phi.value_shape()
            )));
        }
        if f.chart() != phi.chart() {
            return Err(GeometryError::ShapeMismatch("f and phi live on different charts".into()));
        }
        Ok(Self { f, phi })
    }

    pub fn chart(&self) -> &Chart {
        self.f.chart()
    }

    /// Dimension `N` of `V`.
    pub fn ambient_dim(&self) -> usize {
        self.f.value_shape()[0]
    }

    pub fn f(&self) -> &Field {
        &self.f
    }

    pub fn phi(&self) -> &Field {
        &self.phi
    }

    pub fn into_parts(self) -> (Field, Field) {
        (self.f, self.phi)
    }

    /// Smallest singular-value ratio of `∂f` over the chart; errors at the
    /// first point below [`RANK_THRESHOLD`].
    pub fn certify_immersion(&self) -> Result<f64> {
        let chart = self.chart();
        let (n, big_n) = (chart.dim(), self.ambient_dim());
        let jac = jacobian(&self.f);
        let mut worst = f64::INFINITY;
        for p in 0..chart.len() {
            let ratio = singular_value_ratio(&matrix_at(&jac, p, 0, n, big_n));
            if !(ratio > RANK_THRESHOLD) || n > big_n {
                return Err(GeometryError::RankDeficient { point: chart.multi_index(p), ratio });
            }
            worst = worst.min(ratio);
        }
        Ok(worst)
    }

    /// Induced metric `⟨∂_i f, ∂_j φ⟩`, value shape `[n, n]`.
    pub fn pairing_metric(&self) -> Field {
        let n = self.chart().dim();
        let (jf, jp) = (jacobian(&self.f), jacobian(&self.phi));
        let big_n = self.ambient_dim();
        Field::from_index_fn(self.chart(), &[n, n], |p, out| {
            let (a, b) = (jf.at(p), jp.at(p));
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = (0..big_n).map(|c| a[i * big_n + c] * b[j * big_n + c]).sum();
                }
            }
        })
    }

    /// Induced lowered connection `⟨∂_i∂_j f, ∂_k φ⟩`, value shape `[n, n, n]`.
    pub fn pairing_connection(&self) -> Field {
        let n = self.chart().dim();
        let big_n = self.ambient_dim();
        let df: Vec<Field> = (0..n).map(|a| d1(&self.f, a)).collect();
        let ddf: Vec<Vec<Field>> = (0..n).map(|i| (0..n).map(|j| d1(&df[j], i)).collect()).collect();
        let jp = jacobian(&self.phi);
        Field::from_index_fn(self.chart(), &[n, n, n], |p, out| {
            let b = jp.at(p);
            for i in 0..n {
                for j in 0..n {
                    let a = ddf[i][j].at(p);
                    for k in 0..n {
                        out[idx3(n, i, j, k)] = (0..big_n).map(|c| a[c] * b[k * big_n + c]).sum();
                    }
                }
            }
        })
    }
}

/// `∂_i F^A`, value shape `[n, N]`.
pub(crate) fn jacobian(f: &Field) -> Field {
    let chart = f.chart();
    let n = chart.dim();
    let big_n = f.components();
    let parts: Vec<Field> = (0..n).map(|a| d1(f, a)).collect();
    Field::from_index_fn(chart, &[n, big_n], |p, out| {
        for (i, part) in parts.iter().enumerate() {
            out[i * big_n..(i + 1) * big_n].copy_from_slice(part.at(p));
        }
    })
}

/// Residuals of the defining equations of a Lauritzen pair against `(g, Γ)`.
pub fn verify_lauritzen(p: &LauritzenPair, s: &StatisticalStructure) -> Result<LauritzenReport> {
    if p.chart() != s.chart() {
        return Err(GeometryError::ShapeMismatch("pair and structure live on different charts".into()));
    }
    let n = s.dim();
    let metric = p.pairing_metric();
    let conn = p.pairing_connection();
    let metric_err = s.g().sub(&metric)?;
    let conn_err = s.lowered_connection().sub(&conn)?;
    let mut asym: f64 = 0.0;
    for q in 0..p.chart().len() {
        let m = metric.at(q);
        for i in 0..n {
            for j in i + 1..n {
                asym = asym.max((m[i * n + j] - m[j * n + i]).abs());
            }
        }
    }
    Ok(LauritzenReport {
        metric_residual: metric_err.max_abs(),
        connection_residual: conn_err.max_abs(),
        metric_rms: metric_err.rms(),
        connection_rms: conn_err.rms(),
        pairing_asymmetry: asym,
    })
}

/// `(f, φ) ↦ (φ, f)`, a pair for the dual structure `(g, ∇*)`.
pub fn dual_pair(p: &LauritzenPair) -> LauritzenPair {
    LauritzenPair { f: p.phi.clone(), phi: p.f.clone() }
}

/// The doubled pair for `Γ^(α)`:
/// `F = (f, (1−α)/2 φ)` into `V ⊕ V*` and `Φ = ((1+α)/2 φ, f)` into `V* ⊕ V`.
pub fn alpha_pair(p: &LauritzenPair, alpha: f64) -> LauritzenPair {
    let f = p.f.concat(&p.phi.scaled(0.5 * (1.0 - alpha))).expect("same chart");
    let phi = p.phi.scaled(0.5 * (1.0 + alpha)).concat(&p.f).expect("same chart");
    LauritzenPair { f, phi }
}

/// [`alpha_pair`] after checking that `p` verifies against `s` within
/// `tolerance`; the result is certified to be an immersion.
pub fn alpha_pair_checked(p: &LauritzenPair, s: &StatisticalStructure, alpha: f64, tolerance: f64) -> Result<LauritzenPair> {
    let report = verify_lauritzen(p, s)?;
    if !report.passes(tolerance) {
        return Err(GeometryError::VerificationFailed {
            metric: report.metric_residual,
            connection: report.connection_residual,
            tolerance,
        });
    }
    let doubled = alpha_pair(p, alpha);
    doubled.certify_immersion()?;
    Ok(doubled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_pair(m: usize) -> (LauritzenPair, StatisticalStructure) {
        let chart = Chart::uniform(vec![(-0.3, 0.3); 2], m).unwrap();
        let f = Field::from_fn(&chart, &[2], |x, out| out.copy_from_slice(x));
        let phi = Field::from_fn(&chart, &[2], |x, out| {
            out[0] = x[0].exp();
            out[1] = x[1].exp();
        });
        let g = Field::from_fn(&chart, &[2, 2], |x, out| {
            out[0] = x[0].exp();
            out[3] = x[1].exp();
        });
        let s = StatisticalStructure::new(g, Field::zeros(&chart, &[2, 2, 2])).unwrap();
        (LauritzenPair::new(f, phi).unwrap(), s)
    }

    #[test]
    fn hessian_pair_verifies() {
        let (p, s) = exp_pair(33);
        let r = verify_lauritzen(&p, &s).unwrap();
        assert!(r.passes(1e-5), "{r:?}");
        let d = verify_lauritzen(&dual_pair(&p), &s.dual().unwrap()).unwrap();
        assert!(d.passes(1e-5), "{d:?}");
    }

    #[test]
    fn scaled_phi_fails_by_max_g() {
        let (p, s) = exp_pair(33);
        let bad = LauritzenPair::new(p.f().clone(), p.phi().scaled(2.0)).unwrap();
        let r = verify_lauritzen(&bad, &s).unwrap();
        assert!((r.metric_residual - s.g().max_abs()).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn dual_pair_is_an_involution() {
        let (p, _) = exp_pair(9);
        assert_eq!(dual_pair(&dual_pair(&p)), p);
    }

    #[test]
    fn alpha_endpoint_pads_the_pair() {
        let (p, s) = exp_pair(17);
        let one = alpha_pair(&p, 1.0);
        assert_eq!(one.ambient_dim(), 4);
        assert!(one.f().component(2).max_abs() == 0.0);
        let r = verify_lauritzen(&one, &s).unwrap();
        assert!(r.passes(1e-5));
        for alpha in [-1.0, 0.0, 0.5] {
            let target = s.with_connection(s.alpha_connection(alpha).unwrap()).unwrap();
            let r = verify_lauritzen(&alpha_pair_checked(&p, &s, alpha, 1e-5).unwrap(), &target).unwrap();
            assert!(r.passes(1e-5), "alpha {alpha}: {r:?}");
        }
    }

    #[test]
    fn constant_map_is_rank_deficient() {
        let chart = Chart::uniform(vec![(0.0, 1.0); 2], 5).unwrap();
        let f = Field::from_fn(&chart, &[3], |x, out| {
            out[0] = x[0];
            out[1] = 2.0 * x[0];
        });
        let p = LauritzenPair::new(f.clone(), f).unwrap();
        assert!(matches!(p.certify_immersion(), Err(GeometryError::RankDeficient { .. })));
    }
}
