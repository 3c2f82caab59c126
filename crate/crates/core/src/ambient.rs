//! From a Lauritzen pair to an explicit Hessian potential on a tube around
//! `f(M)` in `V`, and back to the induced statistical structure.
//!
//! Tube coordinates are `(x, t)` with `ι(x, t) = f(x) + t^a ν_a(x)`; the
//! potential is `ψ(x, t) = ψ₀(x) + t^a ⟨φ, ν_a⟩(x) + C Σ (t^a)²`. All
//! `ξ`-derivatives go through the chain rule on the `(x, t)` grid.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};
use crate::grid::{closedness_residual, d1, potential_from_closed_form, sweep_edges, Chart, Field, SweepOrder};
use crate::lauritzen::{jacobian, LauritzenPair};
use crate::linalg::{condition_number, matrix_at, min_eigenvalue, write_matrix};
use crate::structures::{idx3, StatisticalStructure};

pub const DEFAULT_CLOSEDNESS_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_NORMAL_POINTS: usize = 5;
pub const C_CAP: f64 = (1u64 << 30) as f64;
/// Margin as a fraction of the smallest eigenvalue of `g` on `M`.
pub const DEFAULT_MARGIN_FRACTION: f64 = 0.05;
pub const MAX_TUBE_CONDITION: f64 = 1e8;
/// Limit on `points × N²` of the tube Hessian.
pub const MAX_TUBE_ENTRIES: usize = 1 << 25;

/// `ω = ⟨df, φ⟩` and its potential.
#[derive(Debug, Clone, PartialEq)]
pub struct Pullback {
    /// `ω_i`, value shape `[n]`.
    pub omega: Field,
    pub psi0: Field,
    pub base: Vec<usize>,
    pub closedness: f64,
    /// `max |⟨∂_i f, ∂_j φ⟩ − ⟨∂_j f, ∂_i φ⟩|`, equal to `dω` in the continuum.
    pub metric_asymmetry: f64,
}

/// `ψ₀` with `dψ₀ = ⟨df, φ⟩`, vanishing at the chart center.
pub fn pullback_potential(p: &LauritzenPair, tolerance: f64) -> Result<Pullback> {
    let chart = p.chart();
    let (n, big_n) = (chart.dim(), p.ambient_dim());
    let jf = jacobian(p.f());
    let omega = Field::from_index_fn(chart, &[n], |q, out| {
        let (a, phi) = (jf.at(q), p.phi().at(q));
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..big_n).map(|c| a[i * big_n + c] * phi[c]).sum();
        }
    });
    let closedness = closedness_residual(&omega)?;
    let metric = p.pairing_metric();
    let mut metric_asymmetry: f64 = 0.0;
    for q in 0..chart.len() {
        let m = metric.at(q);
        for i in 0..n {
            for j in i + 1..n {
                metric_asymmetry = metric_asymmetry.max((m[i * n + j] - m[j * n + i]).abs());
            }
        }
    }
    if !(closedness <= tolerance) {
        return Err(GeometryError::NotClosed { residual: closedness, tolerance });
    }
    let base = chart.center();
    let psi0 = potential_from_closed_form(&omega, &base)?;
    Ok(Pullback { omega, psi0, base, closedness, metric_asymmetry })
}

/// Base chart of `M` times a normal box `[−ε, ε]^r`.
#[derive(Debug, Clone, PartialEq)]
pub struct TubularChart {
    base: Chart,
    tube: Chart,
    /// `ν_a`, value shape `[r, N]` on the base chart.
    normal_frame: Field,
    epsilon: f64,
    codim: usize,
}

impl TubularChart {
    /// Euclidean-orthonormal complement of the tangent planes, carried along
    /// the sweep tree so that neighbouring frames stay aligned.
    pub fn new(p: &LauritzenPair, epsilon: f64, normal_points: usize) -> Result<Self> {
        p.certify_immersion()?;
        let base = p.chart().clone();
        let (n, big_n) = (base.dim(), p.ambient_dim());
        let r = big_n - n;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(GeometryError::InvalidChart(format!("tube half-width must be positive, got {epsilon}")));
        }
        let entries = |m: usize| (m as f64).powi(r as i32) * (base.len() * big_n * big_n) as f64;
        if entries(normal_points) > MAX_TUBE_ENTRIES as f64 {
            return Err(GeometryError::TubeTooLarge { entries: entries(normal_points) as usize, limit: MAX_TUBE_ENTRIES });
        }
        let mut ranges = base.ranges().to_vec();
        let mut shape = base.shape().to_vec();
        for _ in 0..r {
            ranges.push((-epsilon, epsilon));
            shape.push(normal_points);
        }
        let tube = Chart::new(ranges, shape)?;
        let normal_frame = normal_frame(p.f(), r)?;
        Ok(Self { base, tube, normal_frame, epsilon, codim: r })
    }

    pub fn base(&self) -> &Chart {
        &self.base
    }

    /// The `(x, t)` grid.
    pub fn tube(&self) -> &Chart {
        &self.tube
    }

    pub fn normal_frame(&self) -> &Field {
        &self.normal_frame
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn codim(&self) -> usize {
        self.codim
    }

    /// Number of tube points above each base point.
    fn fibre_len(&self) -> usize {
        self.tube.len() / self.base.len()
    }

    /// `(base point, t)` of a tube point.
    fn split(&self, q: usize) -> (usize, Vec<f64>) {
        let fl = self.fibre_len();
        let x = self.tube.point_coords(q);
        (q / fl, x[self.base.dim()..].to_vec())
    }
}

fn tangent_projector(jac: &DMatrix<f64>, q: usize, chart: &Chart) -> Result<DMatrix<f64>> {
    let big_n = jac.ncols();
    let gram = (jac * jac.transpose()).cholesky().ok_or_else(|| GeometryError::RankDeficient { point: chart.multi_index(q), ratio: 0.0 })?;
    Ok(DMatrix::identity(big_n, big_n) - jac.transpose() * gram.solve(jac))
}

/// Gram-Schmidt of `candidates` in order; `None` if one collapses.
fn orthonormalize(candidates: Vec<DVector<f64>>) -> Option<Vec<DVector<f64>>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(candidates.len());
    for mut v in candidates {
        for u in &out {
            v -= u * u.dot(&v);
        }
        let norm = v.norm();
        if !(norm > 0.5) {
            return None;
        }
        out.push(v / norm);
    }
    Some(out)
}

fn normal_frame(f: &Field, r: usize) -> Result<Field> {
    let chart = f.chart();
    let (n, big_n) = (chart.dim(), f.components());
    let jf = jacobian(f);
    let mut nu = Field::zeros(chart, &[r, big_n]);
    if r == 0 {
        return Ok(nu);
    }
    let base = chart.center();
    let b = chart.flat_index(&base);
    let proj = tangent_projector(&matrix_at(&jf, b, 0, n, big_n), b, chart)?;
    // Pivoted Gram-Schmidt on projected coordinate axes.
    let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(r);
    for _ in 0..r {
        let best = (0..big_n)
            .map(|k| {
                let mut v = proj.column(k).into_owned();
                for u in &chosen {
                    v -= u * u.dot(&v);
                }
                v
            })
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .expect("ambient dimension is positive");
        let norm = best.norm();
        chosen.push(best / norm);
    }
    for (a, v) in chosen.iter().enumerate() {
        nu.at_mut(b)[a * big_n..(a + 1) * big_n].copy_from_slice(v.as_slice());
    }
    for edge in sweep_edges(chart, &base, &SweepOrder::Forward.axes(n)) {
        let proj = tangent_projector(&matrix_at(&jf, edge.to, 0, n, big_n), edge.to, chart)?;
        let prev = nu.at(edge.from);
        let candidates = (0..r).map(|a| &proj * DVector::from_row_slice(&prev[a * big_n..(a + 1) * big_n])).collect();
        let frame = orthonormalize(candidates).ok_or_else(|| GeometryError::NotTransverse {
            point: chart.multi_index(edge.to),
            reason: "normal frame collapses between neighbouring points".into(),
        })?;
        for (a, v) in frame.iter().enumerate() {
            nu.at_mut(edge.to)[a * big_n..(a + 1) * big_n].copy_from_slice(v.as_slice());
        }
    }
    Ok(nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbientOptions {
    pub epsilon: f64,
    /// Defaults to [`DEFAULT_MARGIN_FRACTION`] times the smallest eigenvalue
    /// of the pairing metric.
    pub margin: Option<f64>,
    pub normal_points: usize,
    pub c_cap: f64,
}

impl Default for AmbientOptions {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, margin: None, normal_points: DEFAULT_NORMAL_POINTS, c_cap: C_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbientDiagnostics {
    pub margin: f64,
    /// `(C, min eigenvalue over the tube)` for every value tried.
    pub c_history: Vec<(f64, f64)>,
    pub min_hessian_eigenvalue: f64,
    /// `max |ψ(x, 0) − ψ₀(x)|`.
    pub restriction_residual: f64,
    /// `max |∂ψ/∂ξ − φ|` on `M`.
    pub gradient_residual: f64,
    /// `max |G(∂_i f, ∂_j f) − ⟨∂_i f, ∂_j φ⟩|` on `M`.
    pub tangential_residual: f64,
    pub min_separation: f64,
    pub separation_threshold: f64,
    pub max_jacobian_condition: f64,
}

/// `ψ = ψ₀ + t^a⟨φ, ν_a⟩ + CΣ(t^a)²` on a tube with positive-definite
/// `ξ`-Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientPotential {
    pub tube: TubularChart,
    pub psi0: Field,
    pub c: f64,
    /// On the tube chart.
    pub psi_prime: Field,
    /// `ξ`-Hessian `[N, N]` on the tube chart.
    pub hessian: Field,
    pub diagnostics: AmbientDiagnostics,
    /// The `ξ`-Hessian is `k0 + C k1`.
    k0: Field,
    k1: Field,
}

impl AmbientPotential {
    /// `ξ`-Hessian for another `C`.
    pub fn hessian_with(&self, c: f64) -> Field {
        self.k0.combine(1.0, &self.k1, c).expect("same tube")
    }

    /// `ξ`-Hessian on `M` (`t = 0`) for the given `C`, on the base chart.
    pub fn manifold_hessian(&self, c: f64) -> Field {
        let base = self.tube.base();
        let fl = self.tube.fibre_len();
        let mid = self.tube.tube.flat_index(&self.tube.tube.center()) % fl;
        let big_n = self.k0.value_shape()[0];
        Field::from_index_fn(base, &[big_n, big_n], |p, out| {
            let q = p * fl + mid;
            for ((o, a), b) in out.iter_mut().zip(self.k0.at(q)).zip(self.k1.at(q)) {
                *o = a + c * b;
            }
        })
    }

    /// Smallest eigenvalue of the `ξ`-Hessian for `C`, per tube point.
    pub fn min_eigenvalues_with(&self, c: f64) -> Vec<f64> {
        let big_n = self.k0.value_shape()[0];
        (0..self.k0.chart().len())
            .map(|q| min_eigenvalue(&(matrix_at(&self.k0, q, 0, big_n, big_n) + matrix_at(&self.k1, q, 0, big_n, big_n) * c)))
            .collect()
    }
}

/// Chain-rule pieces of the tube Hessian per tube point.
struct TubeKernels {
    k0: Field,
    k1: Field,
    positions: Field,
    max_condition: f64,
    gradient_residual: f64,
    tangential_residual: f64,
}

fn tube_kernels(tube: &TubularChart, p: &LauritzenPair, psi0: &Field) -> Result<TubeKernels> {
    let base = tube.base();
    let (n, r) = (base.dim(), tube.codim());
    let big_n = n + r;
    let f = p.f();
    let phi = p.phi();
    let nu = tube.normal_frame();
    let s = Field::from_index_fn(base, &[r], |q, out| {
        let (v, ph) = (nu.at(q), phi.at(q));
        for (a, o) in out.iter_mut().enumerate() {
            *o = (0..big_n).map(|c| v[a * big_n + c] * ph[c]).sum();
        }
    });
    let df: Vec<Field> = (0..n).map(|i| d1(f, i)).collect();
    let ddf: Vec<Vec<Field>> = (0..n).map(|i| (0..n).map(|j| d1(&df[j], i)).collect()).collect();
    let dnu: Vec<Field> = (0..n).map(|i| d1(nu, i)).collect();
    let ddnu: Vec<Vec<Field>> = (0..n).map(|i| (0..n).map(|j| d1(&dnu[j], i)).collect()).collect();
    let ds: Vec<Field> = (0..n).map(|i| d1(&s, i)).collect();
    let dds: Vec<Vec<Field>> = (0..n).map(|i| (0..n).map(|j| d1(&ds[j], i)).collect()).collect();
    let dpsi: Vec<Field> = (0..n).map(|i| d1(psi0, i)).collect();
    let ddpsi: Vec<Vec<Field>> = (0..n).map(|i| (0..n).map(|j| d1(&dpsi[j], i)).collect()).collect();
    let pair_metric = p.pairing_metric();

    let chart = tube.tube();
    let mut k0 = Field::zeros(chart, &[big_n, big_n]);
    let mut k1 = Field::zeros(chart, &[big_n, big_n]);
    let mut positions = Field::zeros(chart, &[big_n]);
    let mut max_condition: f64 = 0.0;
    let mut gradient_residual: f64 = 0.0;
    let mut tangential_residual: f64 = 0.0;

    for q in 0..chart.len() {
        let (b, t) = tube.split(q);
        let at_manifold = t.iter().all(|v| *v == 0.0);
        let nu_b = nu.at(b);
        // ∂ι/∂y, columns (∂_i, ∂_a).
        let mut jac = DMatrix::zeros(big_n, big_n);
        let mut pos = f.at(b).to_vec();
        for (a, ta) in t.iter().enumerate() {
            for c in 0..big_n {
                pos[c] += ta * nu_b[a * big_n + c];
            }
        }
        for i in 0..n {
            for c in 0..big_n {
                jac[(c, i)] = df[i].at(b)[c] + (0..r).map(|a| t[a] * dnu[i].at(b)[a * big_n + c]).sum::<f64>();
            }
        }
        for a in 0..r {
            for c in 0..big_n {
                jac[(c, n + a)] = nu_b[a * big_n + c];
            }
        }
        let cond = condition_number(&jac);
        if !(cond <= MAX_TUBE_CONDITION) {
            return Err(GeometryError::TubeNotInjective(format!(
                "Jacobian of the tube map is singular at tube point {:?} (condition {cond:e})",
                chart.multi_index(q)
            )));
        }
        max_condition = max_condition.max(cond);
        let jinv = jac.clone().try_inverse().ok_or_else(|| GeometryError::TubeNotInjective("singular tube Jacobian".into()))?;
        let jinv_t = jinv.transpose();

        // ∂ψ/∂y split as g0 + C g1, second derivatives as h0 + C h1.
        let mut g0 = DVector::zeros(big_n);
        let mut g1 = DVector::zeros(big_n);
        let mut h0 = DMatrix::zeros(big_n, big_n);
        let mut h1 = DMatrix::zeros(big_n, big_n);
        for i in 0..n {
            g0[i] = dpsi[i].at(b)[0] + (0..r).map(|a| t[a] * ds[i].at(b)[a]).sum::<f64>();
            for j in 0..n {
                h0[(i, j)] = ddpsi[i][j].at(b)[0] + (0..r).map(|a| t[a] * dds[i][j].at(b)[a]).sum::<f64>();
            }
            for a in 0..r {
                h0[(i, n + a)] = ds[i].at(b)[a];
                h0[(n + a, i)] = ds[i].at(b)[a];
            }
        }
        for a in 0..r {
            g0[n + a] = s.at(b)[a];
            g1[n + a] = 2.0 * t[a];
            h1[(n + a, n + a)] = 2.0;
        }
        let u0 = &jinv_t * &g0;
        let u1 = &jinv_t * &g1;
        // Subtract ∂²ι · ∂ψ/∂ξ.
        for i in 0..n {
            for j in 0..n {
                let second = |c: usize| ddf[i][j].at(b)[c] + (0..r).map(|a| t[a] * ddnu[i][j].at(b)[a * big_n + c]).sum::<f64>();
                let (mut c0, mut c1) = (0.0, 0.0);
                for c in 0..big_n {
                    let v = second(c);
                    c0 += v * u0[c];
                    c1 += v * u1[c];
                }
                h0[(i, j)] -= c0;
                h1[(i, j)] -= c1;
            }
            for a in 0..r {
                let (mut c0, mut c1) = (0.0, 0.0);
                for c in 0..big_n {
                    let v = dnu[i].at(b)[a * big_n + c];
                    c0 += v * u0[c];
                    c1 += v * u1[c];
                }
                h0[(i, n + a)] -= c0;
                h0[(n + a, i)] -= c0;
                h1[(i, n + a)] -= c1;
                h1[(n + a, i)] -= c1;
            }
        }
        if at_manifold {
            let phi_b = phi.at(b);
            for c in 0..big_n {
                gradient_residual = gradient_residual.max((u0[c] - phi_b[c]).abs());
            }
            let pm = pair_metric.at(b);
            for i in 0..n {
                for j in 0..n {
                    let sym = 0.5 * (pm[i * n + j] + pm[j * n + i]);
                    tangential_residual = tangential_residual.max((h0[(i, j)] - sym).abs());
                }
            }
        }
        let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
        write_matrix(k0.at_mut(q), &sym(&jinv_t * h0 * &jinv));
        write_matrix(k1.at_mut(q), &sym(&jinv_t * h1 * &jinv));
        positions.at_mut(q).copy_from_slice(&pos);
    }
    Ok(TubeKernels { k0, k1, positions, max_condition, gradient_residual, tangential_residual })
}

/// Smallest distance between distinct tube points and the certification
/// threshold (half the smallest distance between grid neighbours).
fn separation(tube: &Chart, positions: &Field) -> Result<(f64, f64)> {
    let big_n = positions.components();
    let mut neighbour = f64::INFINITY;
    for q in 0..tube.len() {
        for axis in 0..tube.dim() {
            if tube.axis_index(q, axis) + 1 < tube.shape()[axis] {
                neighbour = neighbour.min(distance(positions.at(q), positions.at(q + tube.stride(axis))));
            }
        }
    }
    let threshold = 0.5 * neighbour;
    if !(threshold > 0.0) {
        return Err(GeometryError::TubeNotInjective("coincident neighbouring tube points".into()));
    }
    let key = |x: &[f64]| -> Vec<i64> { x.iter().map(|v| (v / threshold).floor() as i64).collect() };
    let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for q in 0..tube.len() {
        cells.entry(key(positions.at(q))).or_default().push(q);
    }
    let mut closest = f64::INFINITY;
    let offsets = 3usize.pow(big_n as u32);
    for q in 0..tube.len() {
        let home = key(positions.at(q));
        for code in 0..offsets {
            let mut cell = home.clone();
            let mut rest = code;
            for c in cell.iter_mut() {
                *c += (rest % 3) as i64 - 1;
                rest /= 3;
            }
            if let Some(members) = cells.get(&cell) {
                for &other in members.iter().filter(|&&o| o > q) {
                    closest = closest.min(distance(positions.at(q), positions.at(other)));
                }
            }
        }
    }
    Ok((closest, threshold))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Builds the tube, certifies injectivity, and doubles `C` from 1 until the
/// `ξ`-Hessian clears the margin on the whole tube.
pub fn extend_potential(p: &LauritzenPair, pullback: &Pullback, opts: &AmbientOptions) -> Result<AmbientPotential> {
    if pullback.psi0.chart() != p.chart() {
        return Err(GeometryError::ShapeMismatch("potential and pair live on different charts".into()));
    }
    let tube = TubularChart::new(p, opts.epsilon, opts.normal_points)?;
    let n = tube.base().dim();
    let kernels = tube_kernels(&tube, p, &pullback.psi0)?;
    let (min_separation, separation_threshold) = separation(tube.tube(), &kernels.positions)?;
    if !(min_separation > separation_threshold) {
        return Err(GeometryError::TubeNotInjective(format!(
            "points {min_separation:e} apart, below the threshold {separation_threshold:e}"
        )));
    }
    let margin = match opts.margin {
        Some(m) => m,
        None => {
            let pm = p.pairing_metric();
            let lowest = (0..pm.chart().len()).map(|q| min_eigenvalue(&matrix_at(&pm, q, 0, n, n))).fold(f64::INFINITY, f64::min);
            DEFAULT_MARGIN_FRACTION * lowest
        }
    };
    let mut potential = AmbientPotential {
        psi_prime: Field::zeros(tube.tube(), &[]),
        hessian: kernels.k0.clone(),
        tube,
        psi0: pullback.psi0.clone(),
        c: 0.0,
        diagnostics: AmbientDiagnostics {
            margin,
            c_history: Vec::new(),
            min_hessian_eigenvalue: f64::NAN,
            restriction_residual: 0.0,
            gradient_residual: kernels.gradient_residual,
            tangential_residual: kernels.tangential_residual,
            min_separation,
            separation_threshold,
            max_jacobian_condition: kernels.max_condition,
        },
        k0: kernels.k0,
        k1: kernels.k1,
    };
    let mut c = if potential.tube.codim() == 0 { 0.0 } else { 1.0 };
    loop {
        let lowest = potential.min_eigenvalues_with(c).into_iter().fold(f64::INFINITY, f64::min);
        potential.diagnostics.c_history.push((c, lowest));
        if lowest > margin {
            potential.diagnostics.min_hessian_eigenvalue = lowest;
            break;
        }
        if potential.tube.codim() == 0 {
            return Err(GeometryError::NotPositiveDefinite { point: Vec::new(), min_eigenvalue: lowest });
        }
        c *= 2.0;
        if c > opts.c_cap {
            return Err(GeometryError::ConvexificationCapReached { cap: opts.c_cap });
        }
    }
    potential.c = c;
    potential.hessian = potential.hessian_with(c);
    let tube = &potential.tube;
    let (phi, nu, big_n) = (p.phi(), tube.normal_frame(), p.ambient_dim());
    let mut restriction: f64 = 0.0;
    potential.psi_prime = Field::from_index_fn(tube.tube(), &[], |q, out| {
        let (b, t) = tube.split(q);
        let mut v = pullback.psi0.at(b)[0];
        for (a, ta) in t.iter().enumerate() {
            let s: f64 = (0..big_n).map(|k| nu.at(b)[a * big_n + k] * phi.at(b)[k]).sum();
            v += ta * s + c * ta * ta;
        }
        if t.iter().all(|x| *x == 0.0) {
            restriction = restriction.max((v - pullback.psi0.at(b)[0]).abs());
        }
        out[0] = v;
    });
    potential.diagnostics.restriction_residual = restriction;
    Ok(potential)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedReport {
    /// `max |g̃ − g|`.
    pub metric_residual: f64,
    /// `max |Γ̃_ijk − Γ_ijk|`.
    pub connection_residual: f64,
}

/// `g̃_ij = G(∂_i f, ∂_j f)` and `Γ̃_ijk = G(∂_i∂_j f, ∂_k f)` with `G` the
/// `ξ`-Hessian on `M`, compared against `s`.
pub fn induced_structure(a: &AmbientPotential, p: &LauritzenPair, s: &StatisticalStructure) -> Result<(StatisticalStructure, InducedReport)> {
    let chart = p.chart();
    if chart != s.chart() || chart != a.tube.base() {
        return Err(GeometryError::ShapeMismatch("ambient potential, pair and structure live on different charts".into()));
    }
    let (n, big_n) = (chart.dim(), p.ambient_dim());
    let big_g = a.manifold_hessian(a.c);
    let df: Vec<Field> = (0..n).map(|i| d1(p.f(), i)).collect();
    let ddf: Vec<Vec<Field>> = (0..n).map(|i| (0..n).map(|j| d1(&df[j], i)).collect()).collect();
    let form = |q: usize, u: &[f64], v: &[f64]| -> f64 {
        let gm = big_g.at(q);
        (0..big_n).map(|x| (0..big_n).map(|y| u[x] * gm[x * big_n + y] * v[y]).sum::<f64>()).sum()
    };
    let g = Field::from_index_fn(chart, &[n, n], |q, out| {
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = form(q, df[i].at(q), df[j].at(q));
            }
        }
    });
    let low = Field::from_index_fn(chart, &[n, n, n], |q, out| {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out[idx3(n, i, j, k)] = form(q, ddf[i][j].at(q), df[k].at(q));
                }
            }
        }
    });
    let report = InducedReport {
        metric_residual: g.max_abs_diff(s.g())?,
        connection_residual: low.max_abs_diff(&s.lowered_connection())?,
    };
    let mut gamma = Field::zeros(chart, &[n, n, n]);
    for q in 0..chart.len() {
        let inv = matrix_at(&g, q, 0, n, n)
            .try_inverse()
            .ok_or_else(|| GeometryError::SingularMetric { point: chart.multi_index(q) })?;
        let l = low.at(q).to_vec();
        let out = gamma.at_mut(q);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out[idx3(n, i, j, k)] = (0..n).map(|m| inv[(k, m)] * l[idx3(n, i, j, m)]).sum();
                }
            }
        }
    }
    Ok((StatisticalStructure::new(g, gamma)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_pair(pad: bool) -> LauritzenPair {
        let chart = Chart::uniform(vec![(-1.0, 1.0); 2], 17).unwrap();
        let dim = if pad { 3 } else { 2 };
        let f = Field::from_fn(&chart, &[dim], |x, out| out[..2].copy_from_slice(x));
        LauritzenPair::new(f.clone(), f).unwrap()
    }

    #[test]
    fn identity_pullback_is_half_square() {
        let p = identity_pair(false);
        let pb = pullback_potential(&p, 1e-8).unwrap();
        let chart = p.chart();
        for q in 0..chart.len() {
            let x = chart.point_coords(q);
            assert!((pb.psi0.at(q)[0] - 0.5 * (x[0] * x[0] + x[1] * x[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_pullback_recovers_potential() {
        let chart = Chart::uniform(vec![(-0.5, 0.5)], 33).unwrap();
        let f = Field::from_fn(&chart, &[1], |x, out| out[0] = x[0]);
        let phi = Field::from_fn(&chart, &[1], |x, out| out[0] = x[0].exp());
        let pb = pullback_potential(&LauritzenPair::new(f, phi).unwrap(), 1e-8).unwrap();
        for q in 0..chart.len() {
            let x = chart.point_coords(q)[0];
            assert!((pb.psi0.at(q)[0] - (x.exp() - 1.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn non_dual_pair_is_rejected() {
        let chart = Chart::uniform(vec![(-1.0, 1.0); 2], 17).unwrap();
        let f = Field::from_fn(&chart, &[2], |x, out| out.copy_from_slice(x));
        let phi = Field::from_fn(&chart, &[2], |x, out| {
            out[0] = x[1];
            out[1] = -x[0];
        });
        let err = pullback_potential(&LauritzenPair::new(f, phi).unwrap(), 0.1).unwrap_err();
        assert!(matches!(err, GeometryError::NotClosed { residual, .. } if residual > 0.1));
    }

    #[test]
    fn identity_pair_needs_no_constant() {
        let p = identity_pair(false);
        let pb = pullback_potential(&p, 1e-8).unwrap();
        let a = extend_potential(&p, &pb, &AmbientOptions::default()).unwrap();
        assert_eq!(a.c, 0.0);
        let id = DMatrix::<f64>::identity(2, 2);
        for q in 0..a.hessian.chart().len() {
            assert!((matrix_at(&a.hessian, q, 0, 2, 2) - &id).amax() < 1e-12);
        }
        let s = StatisticalStructure::new(Field::from_fn(p.chart(), &[2, 2], |_, o| write_matrix(o, &id)), Field::zeros(p.chart(), &[2, 2, 2])).unwrap();
        let (_, rep) = induced_structure(&a, &p, &s).unwrap();
        assert!(rep.metric_residual < 1e-12 && rep.connection_residual < 1e-12, "{rep:?}");
    }

    #[test]
    fn padded_identity_pair() {
        let p = identity_pair(true);
        let pb = pullback_potential(&p, 1e-8).unwrap();
        let opts = AmbientOptions { epsilon: 0.2, margin: Some(0.5), ..AmbientOptions::default() };
        let a = extend_potential(&p, &pb, &opts).unwrap();
        assert_eq!(a.c, 1.0);
        assert!((a.diagnostics.min_hessian_eigenvalue - 1.0).abs() < 1e-12);
        let q = 7;
        let h = matrix_at(&a.hessian_with(4.0), q, 0, 3, 3);
        assert!((h[(2, 2)] - 8.0).abs() < 1e-12 && (h[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(a.diagnostics.restriction_residual == 0.0);
        assert!(a.diagnostics.gradient_residual < 1e-12);
    }
}
