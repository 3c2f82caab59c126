//! Extrinsic data on a statistical manifold, the Gauss–Codazzi–Ricci
//! residuals, and the induced connection pair on `E = TM ⊕ R^r`.
//!
//! Normal indices are identified with their duals through the standard basis
//! of `R^r`, so `λ^a` and `λ_a` are stored the same way.

use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};
use crate::grid::{d1, Chart, Field, Residual};
use crate::structures::{idx3, idx4, StatisticalStructure};

/// Second fundamental forms `h^a_ij`, `h*_aij` and the normal connection
/// `τ^a_bi` of an `r`-dimensional normal bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrinsicData {
    r: usize,
    h: Field,
    h_star: Field,
    tau: Field,
}

const SYMMETRY_TOLERANCE: f64 = 1e-12;

impl ExtrinsicData {
    pub fn new(h: Field, h_star: Field, tau: Field) -> Result<Self> {
        let chart = h.chart().clone();
        let n = chart.dim();
        let r = h.value_shape().first().copied().unwrap_or(0);
        if h.value_shape() != [r, n, n] || h_star.value_shape() != [r, n, n] || tau.value_shape() != [r, r, n] {
            return Err(GeometryError::ShapeMismatch(format!(
                "extrinsic data shapes h {:?}, h* {:?}, tau {:?} for n = {n}",
                h.value_shape(),
                h_star.value_shape(),
                tau.value_shape()
            )));
        }
        if h_star.chart() != &chart || tau.chart() != &chart {
            return Err(GeometryError::ShapeMismatch("extrinsic fields live on different charts".into()));
        }
        for (name, f) in [("h", &h), ("h*", &h_star)] {
            for p in 0..chart.len() {
                let v = f.at(p);
                for a in 0..r {
                    for i in 0..n {
                        for j in i + 1..n {
                            let (x, y) = (v[idx3(n, a, i, j)], v[idx3(n, a, j, i)]);
                            if (x - y).abs() > SYMMETRY_TOLERANCE * x.abs().max(y.abs()).max(1.0) {
                                return Err(GeometryError::ShapeMismatch(format!(
                                    "{name} is not symmetric at grid point {:?}",
                                    chart.multi_index(p)
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(Self { r, h, h_star, tau })
    }

    /// `r = 0`: no normal directions.
    pub fn empty(chart: &Chart) -> Self {
        let n = chart.dim();
        Self { r: 0, h: Field::zeros(chart, &[0, n, n]), h_star: Field::zeros(chart, &[0, n, n]), tau: Field::zeros(chart, &[0, 0, n]) }
    }

    /// All-zero data of codimension `r`.
    pub fn zeros(chart: &Chart, r: usize) -> Self {
        let n = chart.dim();
        Self { r, h: Field::zeros(chart, &[r, n, n]), h_star: Field::zeros(chart, &[r, n, n]), tau: Field::zeros(chart, &[r, r, n]) }
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn chart(&self) -> &Chart {
        self.h.chart()
    }

    pub fn h(&self) -> &Field {
        &self.h
    }

    pub fn h_star(&self) -> &Field {
        &self.h_star
    }

    pub fn tau(&self) -> &Field {
        &self.tau
    }

    pub fn with_h(&self, h: Field) -> Result<Self> {
        Self::new(h, self.h_star.clone(), self.tau.clone())
    }

    pub fn with_h_star(&self, h_star: Field) -> Result<Self> {
        Self::new(self.h.clone(), h_star, self.tau.clone())
    }
}

fn check_compatible(s: &StatisticalStructure, e: &ExtrinsicData) -> Result<()> {
    if s.chart() != e.chart() {
        return Err(GeometryError::ShapeMismatch("structure and extrinsic data live on different charts".into()));
    }
    Ok(())
}

/// Pointwise residual fields of the Gauss–Codazzi–Ricci equations.
#[derive(Debug, Clone, PartialEq)]
pub struct GcrFields {
    /// `[n, n, n, n]`, indices `(i, j, k, l)`.
    pub gauss: Field,
    /// `[r, n, n, n]`, indices `(a, i, j, l)`.
    pub codazzi_h: Field,
    /// `[r, n, n, n]`, indices `(a, i, j, k)` with `k` raised.
    pub codazzi_hstar: Field,
    /// `[r, r, n, n]`, indices `(a, b, i, j)`.
    pub ricci: Field,
    /// Lowered Codazzi equation for `h*` written with `∇*`, `(a, i, j, k)`.
    pub codazzi_hstar_dual_form: Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcrReport {
    pub gauss: Residual,
    pub codazzi_h: Residual,
    pub codazzi_hstar: Residual,
    pub ricci: Residual,
    /// `max |g_kl C^l − C*_k|` between the `∇` and `∇*` forms of the Codazzi
    /// equation for `h*`.
    pub codazzi_hstar_cross_check: f64,
}

impl GcrReport {
    pub fn max(&self) -> f64 {
        self.gauss.max.max(self.codazzi_h.max).max(self.codazzi_hstar.max).max(self.ricci.max)
    }

    pub fn sum(&self) -> f64 {
        self.gauss.max + self.codazzi_h.max + self.codazzi_hstar.max + self.ricci.max
    }
}

/// Residual fields of the four Gauss–Codazzi–Ricci equations.
///
/// Covariant derivatives act through `Γ` on tangent indices and trivially on
/// normal ones. Derivatives of `h*` are taken on the lowered form and raised
/// afterwards, `∇_i h*_aj^k = g^kl (∂_i h*_ajl − Γ*_il^m h*_ajm) − Γ_ij^m h*_am^k`.
pub fn gcr_fields(s: &StatisticalStructure, e: &ExtrinsicData) -> Result<GcrFields> {
    check_compatible(s, e)?;
    let chart = s.chart();
    let (n, r) = (s.dim(), e.r());
    let ginv = s.metric_inverse()?;
    let gamma_star = s.dual_connection()?;
    let r_low = s.curvature().r_low;
    let dh: Vec<Field> = (0..n).map(|a| d1(e.h(), a)).collect();
    let dhs: Vec<Field> = (0..n).map(|a| d1(e.h_star(), a)).collect();
    let dtau: Vec<Field> = (0..n).map(|a| d1(e.tau(), a)).collect();

    let mut gauss = Field::zeros(chart, &[n, n, n, n]);
    let mut codazzi_h = Field::zeros(chart, &[r, n, n, n]);
    let mut codazzi_hstar = Field::zeros(chart, &[r, n, n, n]);
    let mut codazzi_dual = Field::zeros(chart, &[r, n, n, n]);
    let mut ricci = Field::zeros(chart, &[r, r, n, n]);

    // (a, i, j): index into [r, n, n]; (a, b, i): index into [r, r, n].
    let rnn = |a: usize, i: usize, j: usize| (a * n + i) * n + j;
    let rrn = |a: usize, b: usize, i: usize| (a * r + b) * n + i;

    for p in 0..chart.len() {
        let gam = s.gamma().at(p);
        let gst = gamma_star.at(p);
        let gi = ginv.at(p);
        let h = e.h().at(p);
        let hs = e.h_star().at(p);
        let tau = e.tau().at(p);

        // h*_ai^k
        let mut hs_up = vec![0.0; r * n * n];
        for a in 0..r {
            for i in 0..n {
                for k in 0..n {
                    hs_up[rnn(a, i, k)] = (0..n).map(|l| gi[k * n + l] * hs[rnn(a, i, l)]).sum();
                }
            }
        }

        let out = gauss.at_mut(p);
        let rl = r_low.at(p);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut v = rl[idx4(n, i, j, k, l)];
                        for a in 0..r {
                            v -= hs[rnn(a, i, k)] * h[rnn(a, j, l)] - hs[rnn(a, j, k)] * h[rnn(a, i, l)];
                        }
                        out[idx4(n, i, j, k, l)] = v;
                    }
                }
            }
        }

        // ∇_i h^a_jl
        let mut nabla_h = vec![0.0; n * r * n * n];
        // ∇*_i h*_ajk (lowered) and ∇_i h*_aj^k
        let mut nabla_star_hs = vec![0.0; n * r * n * n];
        let mut nabla_hs_up = vec![0.0; n * r * n * n];
        let at = |i: usize, a: usize, j: usize, k: usize| ((i * r + a) * n + j) * n + k;
        for i in 0..n {
            let (dhi, dhsi) = (dh[i].at(p), dhs[i].at(p));
            for a in 0..r {
                for j in 0..n {
                    for l in 0..n {
                        let mut v = dhi[rnn(a, j, l)];
                        let mut w = dhsi[rnn(a, j, l)];
                        let mut u = dhsi[rnn(a, j, l)];
                        for m in 0..n {
                            v -= gam[idx3(n, i, j, m)] * h[rnn(a, m, l)] + gam[idx3(n, i, l, m)] * h[rnn(a, j, m)];
                            w -= gst[idx3(n, i, j, m)] * hs[rnn(a, m, l)] + gst[idx3(n, i, l, m)] * hs[rnn(a, j, m)];
                            u -= gst[idx3(n, i, l, m)] * hs[rnn(a, j, m)];
                        }
                        nabla_h[at(i, a, j, l)] = v;
                        nabla_star_hs[at(i, a, j, l)] = w;
                        // lowered ∂_i h*_ajl − Γ*_il^m h*_ajm, raised below
                        nabla_hs_up[at(i, a, j, l)] = u;
                    }
                }
            }
        }
        for i in 0..n {
            for a in 0..r {
                for j in 0..n {
                    let lowered: Vec<f64> = (0..n).map(|l| nabla_hs_up[at(i, a, j, l)]).collect();
                    for k in 0..n {
                        let mut v: f64 = (0..n).map(|l| gi[k * n + l] * lowered[l]).sum();
                        for m in 0..n {
                            v -= gam[idx3(n, i, j, m)] * hs_up[rnn(a, m, k)];
                        }
                        nabla_hs_up[at(i, a, j, k)] = v;
                    }
                }
            }
        }

        let ch = codazzi_h.at_mut(p);
        for a in 0..r {
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        let mut v = nabla_h[at(i, a, j, l)] - nabla_h[at(j, a, i, l)];
                        for b in 0..r {
                            v += tau[rrn(a, b, i)] * h[rnn(b, j, l)] - tau[rrn(a, b, j)] * h[rnn(b, i, l)];
                        }
                        ch[((a * n + i) * n + j) * n + l] = v;
                    }
                }
            }
        }

        let chs = codazzi_hstar.at_mut(p);
        for a in 0..r {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let mut v = nabla_hs_up[at(i, a, j, k)] - nabla_hs_up[at(j, a, i, k)];
                        for b in 0..r {
                            v += hs_up[rnn(b, i, k)] * tau[rrn(b, a, j)] - hs_up[rnn(b, j, k)] * tau[rrn(b, a, i)];
                        }
                        chs[((a * n + i) * n + j) * n + k] = v;
                    }
                }
            }
        }

        let cd = codazzi_dual.at_mut(p);
        for a in 0..r {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let mut v = nabla_star_hs[at(i, a, j, k)] - nabla_star_hs[at(j, a, i, k)];
                        for b in 0..r {
                            v += hs[rnn(b, k, i)] * tau[rrn(b, a, j)] - hs[rnn(b, k, j)] * tau[rrn(b, a, i)];
                        }
                        cd[((a * n + i) * n + j) * n + k] = v;
                    }
                }
            }
        }

        let ri = ricci.at_mut(p);
        for a in 0..r {
            for b in 0..r {
                for i in 0..n {
                    for j in 0..n {
                        let mut v = dtau[i].at(p)[rrn(a, b, j)] - dtau[j].at(p)[rrn(a, b, i)];
                        for m in 0..n {
                            v -= gam[idx3(n, i, j, m)] * tau[rrn(a, b, m)] - gam[idx3(n, j, i, m)] * tau[rrn(a, b, m)];
                        }
                        for c in 0..r {
                            v += tau[rrn(a, c, i)] * tau[rrn(c, b, j)] - tau[rrn(a, c, j)] * tau[rrn(c, b, i)];
                        }
                        for l in 0..n {
                            v += -h[rnn(a, i, l)] * hs_up[rnn(b, j, l)] + h[rnn(a, j, l)] * hs_up[rnn(b, i, l)];
                        }
                        ri[((a * r + b) * n + i) * n + j] = v;
                    }
                }
            }
        }
    }

    Ok(GcrFields { gauss, codazzi_h, codazzi_hstar, ricci, codazzi_hstar_dual_form: codazzi_dual })
}

/// Max/RMS norms of the Gauss–Codazzi–Ricci residuals.
pub fn gcr_residuals(s: &StatisticalStructure, e: &ExtrinsicData) -> Result<GcrReport> {
    let fields = gcr_fields(s, e)?;
    let chart = s.chart();
    let (n, r) = (s.dim(), e.r());
    let mut cross: f64 = 0.0;
    for p in 0..chart.len() {
        let g = s.g().at(p);
        let (up, low) = (fields.codazzi_hstar.at(p), fields.codazzi_hstar_dual_form.at(p));
        for a in 0..r {
            for i in 0..n {
                for j in 0..n {
                    let base = (a * n + i) * n + j;
                    for k in 0..n {
                        let lowered: f64 = (0..n).map(|l| g[k * n + l] * up[base * n + l]).sum();
                        cross = cross.max((lowered - low[base * n + k]).abs());
                    }
                }
            }
        }
    }
    Ok(GcrReport {
        gauss: Residual::of(&fields.gauss),
        codazzi_h: Residual::of(&fields.codazzi_h),
        codazzi_hstar: Residual::of(&fields.codazzi_hstar),
        ricci: Residual::of(&fields.ricci),
        codazzi_hstar_cross_check: cross,
    })
}

/// Connection matrices of `∇̄` and `∇̄*` on `E = TM ⊕ R^r` in the product
/// frame `(∂_j, ν_a)`, with `∇̄_i s = ∂_i s + A_i s`, and the fiber metric
/// `G = g ⊕ δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleConnection {
    /// `[n, n+r, n+r]`.
    pub a: Field,
    /// `[n, n+r, n+r]`.
    pub a_star: Field,
    /// `[n+r, n+r]`.
    pub fiber_metric: Field,
    n: usize,
    r: usize,
}

impl BundleConnection {
    pub fn chart(&self) -> &Chart {
        self.a.chart()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn codim(&self) -> usize {
        self.r
    }

    /// Rank `n + r` of the bundle.
    pub fn rank(&self) -> usize {
        self.n + self.r
    }

    /// `max |∂_i G − A_iᵀ G − G A*_i|`.
    pub fn duality_residual(&self) -> f64 {
        let m = self.rank();
        let n = self.n;
        let dg: Vec<Field> = (0..n).map(|a| d1(&self.fiber_metric, a)).collect();
        let mut worst: f64 = 0.0;
        for p in 0..self.chart().len() {
            let g = self.fiber_metric.at(p);
            for i in 0..n {
                let a = &self.a.at(p)[i * m * m..(i + 1) * m * m];
                let s = &self.a_star.at(p)[i * m * m..(i + 1) * m * m];
                for k in 0..m {
                    for l in 0..m {
                        let mut v = dg[i].at(p)[k * m + l];
                        for q in 0..m {
                            v -= a[q * m + k] * g[q * m + l] + g[k * m + q] * s[q * m + l];
                        }
                        worst = worst.max(v.abs());
                    }
                }
            }
        }
        worst
    }
}

/// Builds `(∇̄, ∇̄*)` from a statistical structure and extrinsic data:
///
/// `A_i = [[Γ_ik^j, h*_bi^j], [−h^a_ik, τ^a_bi]]`,
/// `A*_i = [[Γ*_ik^j, h^b_i^j], [−h*_aik, −τ^b_ai]]`.
pub fn bundle_connection(s: &StatisticalStructure, e: &ExtrinsicData) -> Result<BundleConnection> {
    check_compatible(s, e)?;
    let chart = s.chart();
    let (n, r) = (s.dim(), e.r());
    let m = n + r;
    let ginv = s.metric_inverse()?;
    let gamma_star = s.dual_connection()?;
    let rnn = |a: usize, i: usize, j: usize| (a * n + i) * n + j;
    let rrn = |a: usize, b: usize, i: usize| (a * r + b) * n + i;
    let mut a_field = Field::zeros(chart, &[n, m, m]);
    let mut s_field = Field::zeros(chart, &[n, m, m]);
    let mut fiber = Field::zeros(chart, &[m, m]);
    for p in 0..chart.len() {
        let (gam, gst, gi, g) = (s.gamma().at(p), gamma_star.at(p), ginv.at(p), s.g().at(p));
        let (h, hs, tau) = (e.h().at(p), e.h_star().at(p), e.tau().at(p));
        let a_out = a_field.at_mut(p);
        for i in 0..n {
            let blk = &mut a_out[i * m * m..(i + 1) * m * m];
            for j in 0..n {
                for k in 0..n {
                    blk[j * m + k] = gam[idx3(n, i, k, j)];
                }
                for b in 0..r {
                    blk[j * m + n + b] = (0..n).map(|l| gi[j * n + l] * hs[rnn(b, i, l)]).sum();
                }
            }
            for a in 0..r {
                for k in 0..n {
                    blk[(n + a) * m + k] = -h[rnn(a, i, k)];
                }
                for b in 0..r {
                    blk[(n + a) * m + n + b] = tau[rrn(a, b, i)];
                }
            }
        }
        let s_out = s_field.at_mut(p);
        for i in 0..n {
            let blk = &mut s_out[i * m * m..(i + 1) * m * m];
            for j in 0..n {
                for k in 0..n {
                    blk[j * m + k] = gst[idx3(n, i, k, j)];
                }
                for b in 0..r {
                    blk[j * m + n + b] = (0..n).map(|l| gi[j * n + l] * h[rnn(b, i, l)]).sum();
                }
            }
            for a in 0..r {
                for k in 0..n {
                    blk[(n + a) * m + k] = -hs[rnn(a, i, k)];
                }
                for b in 0..r {
                    blk[(n + a) * m + n + b] = -tau[rrn(b, a, i)];
                }
            }
        }
        let f = fiber.at_mut(p);
        for j in 0..n {
            for k in 0..n {
                f[j * m + k] = g[j * n + k];
            }
        }
        for a in 0..r {
            f[(n + a) * m + n + a] = 1.0;
        }
    }
    Ok(BundleConnection { a: a_field, a_star: s_field, fiber_metric: fiber, n, r })
}

/// `F_ij = ∂_i A_j − ∂_j A_i + [A_i, A_j]`, value shape `[n, n, m, m]`.
pub fn curvature_of(a: &Field, n: usize, m: usize) -> Field {
    let da: Vec<Field> = (0..n).map(|ax| d1(a, ax)).collect();
    Field::from_index_fn(a.chart(), &[n, n, m, m], |p, out| {
        let av = a.at(p);
        let mat = |i: usize, k: usize, l: usize| av[(i * m + k) * m + l];
        for i in 0..n {
            for j in i + 1..n {
                for k in 0..m {
                    for l in 0..m {
                        let mut v = da[i].at(p)[(j * m + k) * m + l] - da[j].at(p)[(i * m + k) * m + l];
                        for q in 0..m {
                            v += mat(i, k, q) * mat(j, q, l) - mat(j, k, q) * mat(i, q, l);
                        }
                        out[((i * n + j) * m + k) * m + l] = v;
                        out[((j * n + i) * m + k) * m + l] = -v;
                    }
                }
            }
        }
    })
}

/// Curvature of `∇̄`.
pub fn bundle_curvature(c: &BundleConnection) -> Field {
    curvature_of(&c.a, c.n, c.rank())
}

/// Curvature of `∇̄*`.
pub fn dual_bundle_curvature(c: &BundleConnection) -> Field {
    curvature_of(&c.a_star, c.n, c.rank())
}

/// `max |G_KM F_ij^M_L + G_LM F*_ij^M_K|`.
pub fn bundle_curvature_duality_residual(c: &BundleConnection) -> f64 {
    let (n, m) = (c.n, c.rank());
    let f = bundle_curvature(c);
    let fs = dual_bundle_curvature(c);
    let mut worst: f64 = 0.0;
    for p in 0..c.chart().len() {
        let g = c.fiber_metric.at(p);
        let (fv, sv) = (f.at(p), fs.at(p));
        for i in 0..n {
            for j in 0..n {
                let base = (i * n + j) * m * m;
                for k in 0..m {
                    for l in 0..m {
                        let lhs: f64 = (0..m).map(|q| g[k * m + q] * fv[base + q * m + l]).sum();
                        let rhs: f64 = (0..m).map(|q| g[l * m + q] * sv[base + q * m + k]).sum();
                        worst = worst.max((lhs + rhs).abs());
                    }
                }
            }
        }
    }
    worst
}
