//! Reconstruction of a Lauritzen pair from a statistical structure and
//! extrinsic data satisfying the Gauss–Codazzi–Ricci equations: transport
//! dual parallel frames of the flat bundle `TM ⊕ R^r`, read off the closed
//! forms `θ`, `θ*`, and integrate them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};
use crate::gcr::{bundle_connection, bundle_curvature, gcr_residuals, BundleConnection, ExtrinsicData, GcrReport};
use crate::grid::{closedness_residual, midpoint_stencil, potential_with_order, sweep_edges, Chart, Field, SweepOrder};
use crate::lauritzen::{verify_lauritzen, LauritzenPair, LauritzenReport};
use crate::linalg::{condition_number, matrix_at, max_abs, write_matrix};
use crate::structures::StatisticalStructure;

/// Default ceiling on the GCR residual before any transport is attempted.
pub const DEFAULT_INTEGRABILITY_TOLERANCE: f64 = 1e-3;

/// Frames with a condition number above this are rejected.
pub const MAX_FRAME_CONDITION: f64 = 1e8;

/// Parallel frames `(e_A)` of `∇̄` and `(e*_A)` of `∇̄*`, stored as matrices
/// whose columns are the frame vectors in the product frame `(∂_j, ν_a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameField {
    /// `[m, m]` with `m = n + r`.
    pub e: Field,
    /// `[m, m]`.
    pub e_star: Field,
    pub base: Vec<usize>,
    pub base_frame: DMatrix<f64>,
    pub base_frame_star: DMatrix<f64>,
    pub diagnostics: FrameDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    /// `max |P − I|` over unit faces, `P` the transport around the face.
    pub holonomy: f64,
    pub dual_holonomy: f64,
    /// `max |G(e_A, e*_B) − δ_AB|` over the chart.
    pub pairing_deviation: f64,
    /// Largest condition number of `E` and `E*` over the chart.
    pub max_condition: f64,
}

/// `G^{-1} B^{-T}`: the basis with `G(b_A, b*_B) = δ_AB`.
pub fn dual_base_frame(base_frame: &DMatrix<f64>, fiber_metric: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let singular = || GeometryError::SingularFrame { point: Vec::new(), condition: f64::INFINITY };
    let m = base_frame.nrows();
    if base_frame.ncols() != m || fiber_metric.shape() != (m, m) {
        return Err(GeometryError::ShapeMismatch(format!(
            "base frame {:?} and fiber metric {:?}",
            base_frame.shape(),
            fiber_metric.shape()
        )));
    }
    let cond = condition_number(base_frame);
    if !(cond <= MAX_FRAME_CONDITION) {
        return Err(GeometryError::SingularFrame { point: Vec::new(), condition: cond });
    }
    let b_inv_t = base_frame.clone().try_inverse().ok_or_else(singular)?.transpose();
    fiber_metric.clone().lu().solve(&b_inv_t).ok_or_else(singular)
}

/// Connection block `A_axis` at grid point `p`.
fn block(a: &Field, p: usize, axis: usize, m: usize) -> DMatrix<f64> {
    matrix_at(a, p, axis * m * m, m, m)
}

/// Classical four-stage propagator of `∂e = −A e` over one lattice edge.
///
/// `A` at the half step comes from the cubic midpoint stencil of the edge's
/// grid line.
fn step_propagator(a: &Field, m: usize, from: usize, axis: usize, forward: bool) -> DMatrix<f64> {
    let chart = a.chart();
    let s = chart.stride(axis);
    let len = chart.shape()[axis];
    let to = if forward { from + s } else { from - s };
    let lower = if forward { from } else { to };
    let i = chart.axis_index(lower, axis);
    let line_start = lower - i * s;
    let (start, w) = midpoint_stencil(i, len);
    let mut mid = DMatrix::zeros(m, m);
    for (k, wk) in w.iter().enumerate() {
        mid += block(a, line_start + (start + k) * s, axis, m) * *wk;
    }
    let h = if forward { chart.spacing()[axis] } else { -chart.spacing()[axis] };
    let m0 = -block(a, from, axis, m);
    let mh = -mid;
    let m1 = -block(a, to, axis, m);
    let id = DMatrix::<f64>::identity(m, m);
    let k1 = m0.clone();
    let k2 = &mh * (&id + &k1 * (0.5 * h));
    let k3 = &mh * (&id + &k2 * (0.5 * h));
    let k4 = &m1 * (&id + &k3 * h);
    id + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Transports `base_value` along the staircase sweep tree rooted at `base`.
pub fn transport(a: &Field, base: &[usize], base_value: &DMatrix<f64>, order: SweepOrder) -> Result<Field> {
    let chart = a.chart();
    let m = base_value.nrows();
    if a.value_shape() != [chart.dim(), m, m] {
        return Err(GeometryError::ShapeMismatch(format!(
            "connection shape {:?} does not match a {m}x{m} frame",
            a.value_shape()
        )));
    }
    if !chart.contains(base) {
        return Err(GeometryError::PathLeavesChart { step: 0 });
    }
    let mut out = Field::zeros(chart, &[m, m]);
    write_matrix(out.at_mut(chart.flat_index(base)), base_value);
    for edge in sweep_edges(chart, base, &order.axes(chart.dim())) {
        let prop = step_propagator(a, m, edge.from, edge.axis, edge.forward);
        let next = prop * matrix_at(&out, edge.from, 0, m, m);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::SingularFrame { point: chart.multi_index(edge.to), condition: f64::INFINITY });
        }
        write_matrix(out.at_mut(edge.to), &next);
    }
    Ok(out)
}

/// `max |P − I|` over all unit faces, `P` the transport once around the face.
pub fn plaquette_holonomy(a: &Field, m: usize) -> f64 {
    let chart = a.chart();
    let n = chart.dim();
    let id = DMatrix::<f64>::identity(m, m);
    let mut worst: f64 = 0.0;
    for p in 0..chart.len() {
        for ax in 0..n {
            if chart.axis_index(p, ax) + 1 >= chart.shape()[ax] {
                continue;
            }
            for bx in ax + 1..n {
                if chart.axis_index(p, bx) + 1 >= chart.shape()[bx] {
                    continue;
                }
                let (sa, sb) = (chart.stride(ax), chart.stride(bx));
                let loop_ = step_propagator(a, m, p + sb, bx, false)
                    * step_propagator(a, m, p + sa + sb, ax, false)
                    * step_propagator(a, m, p + sa, bx, true)
                    * step_propagator(a, m, p, ax, true);
                worst = worst.max(max_abs(&(loop_ - &id)));
            }
        }
    }
    worst
}

/// Parallel frames of `∇̄` and `∇̄*` with `e(base) = base_frame` and the dual
/// frame fixed by [`dual_base_frame`] at the base point.
///
/// Refuses to transport when the bundle curvature exceeds
/// `integrability_tolerance`.
pub fn parallel_frame(
    c: &BundleConnection,
    base: &[usize],
    base_frame: &DMatrix<f64>,
    integrability_tolerance: f64,
    order: SweepOrder,
) -> Result<FrameField> {
    let chart = c.chart();
    let m = c.rank();
    if base_frame.shape() != (m, m) {
        return Err(GeometryError::ShapeMismatch(format!("base frame {:?} for a rank-{m} bundle", base_frame.shape())));
    }
    if !chart.contains(base) {
        return Err(GeometryError::PathLeavesChart { step: 0 });
    }
    let flatness = bundle_curvature(c).max_abs();
    if !(flatness <= integrability_tolerance) {
        return Err(GeometryError::IntegrabilityExceeded { residual: flatness, tolerance: integrability_tolerance });
    }
    let g_base = matrix_at(&c.fiber_metric, chart.flat_index(base), 0, m, m);
    let base_star = dual_base_frame(base_frame, &g_base)?;
    let e = transport(&c.a, base, base_frame, order)?;
    let e_star = transport(&c.a_star, base, &base_star, order)?;

    let id = DMatrix::<f64>::identity(m, m);
    let mut pairing: f64 = 0.0;
    let mut max_condition: f64 = 1.0;
    for p in 0..chart.len() {
        let (ep, sp) = (matrix_at(&e, p, 0, m, m), matrix_at(&e_star, p, 0, m, m));
        let gp = matrix_at(&c.fiber_metric, p, 0, m, m);
        pairing = pairing.max(max_abs(&(ep.transpose() * gp * &sp - &id)));
        max_condition = max_condition.max(condition_number(&ep)).max(condition_number(&sp));
    }
    let diagnostics = FrameDiagnostics {
        holonomy: plaquette_holonomy(&c.a, m),
        dual_holonomy: plaquette_holonomy(&c.a_star, m),
        pairing_deviation: pairing,
        max_condition,
    };
    Ok(FrameField { e, e_star, base: base.to_vec(), base_frame: base_frame.clone(), base_frame_star: base_star, diagnostics })
}

/// Coordinates of `(∂_i, 0)` in a frame field: solves `E θ_i = (δ_i, 0)`
/// per point. Value shape `[m, n]` (`θ^A_i`).
pub fn frame_coordinates(frame: &Field, n: usize) -> Result<Field> {
    let chart = frame.chart();
    let m = frame.value_shape()[0];
    let rhs = DMatrix::<f64>::identity(m, m).columns(0, n).into_owned();
    let mut out = Field::zeros(chart, &[m, n]);
    for p in 0..chart.len() {
        let e = matrix_at(frame, p, 0, m, m);
        let cond = condition_number(&e);
        if !(cond <= MAX_FRAME_CONDITION) {
            return Err(GeometryError::SingularFrame { point: chart.multi_index(p), condition: cond });
        }
        let sol = e
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GeometryError::SingularFrame { point: chart.multi_index(p), condition: cond })?;
        write_matrix(out.at_mut(p), &sol);
    }
    Ok(out)
}

/// The forms `θ` and `θ*`, value shape `[m, n]` each.
pub fn theta_form(frames: &FrameField) -> Result<(Field, Field)> {
    let n = frames.e.chart().dim();
    Ok((frame_coordinates(&frames.e, n)?, frame_coordinates(&frames.e_star, n)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BonnetOptions {
    /// Defaults to the chart center.
    pub base: Option<Vec<usize>>,
    /// Defaults to the identity in the product frame.
    pub base_frame: Option<DMatrix<f64>>,
    pub integrability_tolerance: f64,
    pub order: SweepOrder,
}

impl Default for BonnetOptions {
    fn default() -> Self {
        Self { base: None, base_frame: None, integrability_tolerance: DEFAULT_INTEGRABILITY_TOLERANCE, order: SweepOrder::Forward }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonnetDiagnostics {
    pub gcr: GcrReport,
    pub bundle_curvature: f64,
    pub frames: FrameDiagnostics,
    pub theta_closedness: f64,
    pub theta_star_closedness: f64,
    /// `max |f − f'|, |φ − φ'|` between the two sweep orders.
    pub path_discrepancy: f64,
    pub verification: LauritzenReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BonnetEmbedding {
    pub pair: LauritzenPair,
    pub theta: Field,
    pub theta_star: Field,
    pub frames: FrameField,
    pub diagnostics: BonnetDiagnostics,
}

/// Builds `(f, φ)` with `f(base) = φ(base) = 0` realizing `(g, ∇)` with the
/// given extrinsic data. The verification report is attached, not enforced.
pub fn bonnet_embed(s: &StatisticalStructure, e: &ExtrinsicData, opts: &BonnetOptions) -> Result<BonnetEmbedding> {
    let chart = s.chart();
    let gcr = gcr_residuals(s, e)?;
    if !(gcr.max() <= opts.integrability_tolerance) {
        return Err(GeometryError::IntegrabilityExceeded { residual: gcr.max(), tolerance: opts.integrability_tolerance });
    }
    let c = bundle_connection(s, e)?;
    let m = c.rank();
    let base = opts.base.clone().unwrap_or_else(|| chart.center());
    let base_frame = opts.base_frame.clone().unwrap_or_else(|| DMatrix::identity(m, m));
    let frames = parallel_frame(&c, &base, &base_frame, opts.integrability_tolerance, opts.order)?;
    let bundle_curv = bundle_curvature(&c).max_abs();
    let (theta, theta_star) = theta_form(&frames)?;
    let f = potential_with_order(&theta, &base, opts.order)?;
    let phi = potential_with_order(&theta_star, &base, opts.order)?;
    let other = match opts.order {
        SweepOrder::Forward => SweepOrder::Reverse,
        SweepOrder::Reverse => SweepOrder::Forward,
    };
    let path_discrepancy = potential_with_order(&theta, &base, other)?
        .max_abs_diff(&f)?
        .max(potential_with_order(&theta_star, &base, other)?.max_abs_diff(&phi)?);
    let pair = LauritzenPair::new(f, phi)?;
    let verification = verify_lauritzen(&pair, s)?;
    let diagnostics = BonnetDiagnostics {
        gcr,
        bundle_curvature: bundle_curv,
        frames: frames.diagnostics.clone(),
        theta_closedness: closedness_residual(&theta)?,
        theta_star_closedness: closedness_residual(&theta_star)?,
        path_discrepancy,
        verification,
    };
    Ok(BonnetEmbedding { pair, theta, theta_star, frames, diagnostics })
}

/// Least-squares sphere through the points of a `[3]`-valued field; returns
/// `max | |f − c|² − R² |`.
pub fn sphere_fit_residual(f: &Field) -> Result<f64> {
    let d = f.components();
    if f.value_shape() != [d] || d == 0 {
        return Err(GeometryError::ShapeMismatch(format!("sphere fit needs a vector field, got {:?}", f.value_shape())));
    }
    let len = f.chart().len();
    let mut a = DMatrix::zeros(len, d + 1);
    let mut b = DVector::zeros(len);
    for p in 0..len {
        let x = f.at(p);
        for k in 0..d {
            a[(p, k)] = 2.0 * x[k];
        }
        a[(p, d)] = 1.0;
        b[p] = x.iter().map(|v| v * v).sum();
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| GeometryError::ShapeMismatch(format!("sphere fit failed: {e}")))?;
    let center: Vec<f64> = (0..d).map(|k| sol[k]).collect();
    let radius2 = sol[d] + center.iter().map(|c| c * c).sum::<f64>();
    let mut worst: f64 = 0.0;
    for p in 0..len {
        let r2: f64 = f.at(p).iter().zip(&center).map(|(x, c)| (x - c) * (x - c)).sum();
        worst = worst.max((r2 - radius2).abs());
    }
    Ok(worst)
}

/// Default base point of a chart.
pub fn default_base(chart: &Chart) -> Vec<usize> {
    chart.center()
}
