//! Rectangular charts, tensor fields sampled on them, fourth-order finite
//! differences, and lattice path integration.
//!
//! Grid points are stored in row-major multi-index order (the last axis varies
//! fastest). A [`Field`] stores all components of one grid point contiguously,
//! with the components themselves in row-major order over the field's value
//! shape: a connection with value shape `[n, n, n]` keeps `Γ_ij^k` at offset
//! `(i * n + j) * n + k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};

/// Smallest number of points per axis: the width of the fourth-order stencil.
pub const MIN_POINTS: usize = 5;

/// A rectangular coordinate grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    ranges: Vec<(f64, f64)>,
    shape: Vec<usize>,
    spacing: Vec<f64>,
}

impl Chart {
    pub fn new(ranges: Vec<(f64, f64)>, shape: Vec<usize>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(GeometryError::InvalidChart("chart needs at least one axis".into()));
        }
        if ranges.len() != shape.len() {
            return Err(GeometryError::InvalidChart(format!(
                "{} ranges but {} axis sizes",
                ranges.len(),
                shape.len()
            )));
        }
        let mut spacing = Vec::with_capacity(shape.len());
        for (axis, (&(lo, hi), &count)) in ranges.iter().zip(&shape).enumerate() {
            if count < MIN_POINTS {
                return Err(GeometryError::TooFewPoints { axis, points: count, min: MIN_POINTS });
            }
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(GeometryError::InvalidChart(format!(
                    "axis {axis} has an empty or non-finite range [{lo}, {hi}]"
                )));
            }
            spacing.push((hi - lo) / (count - 1) as f64);
        }
        Ok(Self { ranges, shape, spacing })
    }

    /// Same number of points on every axis.
    pub fn uniform(ranges: Vec<(f64, f64)>, points: usize) -> Result<Self> {
        let shape = vec![points; ranges.len()];
        Self::new(ranges, shape)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &m)| acc * m + i)
    }

    pub fn multi_index(&self, mut p: usize) -> Vec<usize> {
        let mut index = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            index[axis] = p % self.shape[axis];
            p /= self.shape[axis];
        }
        index
    }

    /// Index of point `p` along one axis.
    pub fn axis_index(&self, p: usize, axis: usize) -> usize {
        (p / self.stride(axis)) % self.shape[axis]
    }

    pub fn contains(&self, index: &[usize]) -> bool {
        index.len() == self.dim() && index.iter().zip(&self.shape).all(|(&i, &m)| i < m)
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        self.ranges[axis].0 + i as f64 * self.spacing[axis]
    }

    pub fn coords(&self, index: &[usize]) -> Vec<f64> {
        index.iter().enumerate().map(|(axis, &i)| self.coordinate(axis, i)).collect()
    }

    pub fn point_coords(&self, p: usize) -> Vec<f64> {
        self.coords(&self.multi_index(p))
    }

    /// Multi-index of the grid point nearest the chart center.
    pub fn center(&self) -> Vec<usize> {
        self.shape.iter().map(|&m| (m - 1) / 2).collect()
    }

    /// Euclidean length of the chart's coordinate diagonal.
    pub fn diameter(&self) -> f64 {
        self.ranges.iter().map(|(lo, hi)| (hi - lo).powi(2)).sum::<f64>().sqrt()
    }

    /// Flat indices of the points with index 0 along `axis`, one per grid line.
    pub(crate) fn line_starts(&self, axis: usize) -> impl Iterator<Item = usize> + '_ {
        let s = self.stride(axis);
        let m = self.shape[axis];
        (0..self.len()).filter(move |p| (p / s).is_multiple_of(m))
    }
}

/// Real tensor components sampled at every point of a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    chart: Chart,
    value_shape: Vec<usize>,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(chart: &Chart, value_shape: &[usize]) -> Self {
        let comps: usize = value_shape.iter().product();
        Self { chart: chart.clone(), value_shape: value_shape.to_vec(), data: vec![0.0; comps * chart.len()] }
    }

    pub fn from_data(chart: &Chart, value_shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let comps: usize = value_shape.iter().product();
        if data.len() != comps * chart.len() {
            return Err(GeometryError::ShapeMismatch(format!(
                "expected {} values ({} points x {} components), got {}",
                comps * chart.len(),
                chart.len(),
                comps,
                data.len()
            )));
        }
        Ok(Self { chart: chart.clone(), value_shape: value_shape.to_vec(), data })
    }

    /// Samples `f(coords, out)` at every grid point.
    pub fn from_fn(chart: &Chart, value_shape: &[usize], mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut field = Self::zeros(chart, value_shape);
        let comps = field.components();
        for p in 0..chart.len() {
            let x = chart.point_coords(p);
            f(&x, &mut field.data[p * comps..(p + 1) * comps]);
        }
        field
    }

    /// Fills every grid point from `f(flat_index, out)`.
    pub fn from_index_fn(chart: &Chart, value_shape: &[usize], mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut field = Self::zeros(chart, value_shape);
        let comps = field.components();
        for p in 0..chart.len() {
            f(p, &mut field.data[p * comps..(p + 1) * comps]);
        }
        field
    }

    pub fn scalar(chart: &Chart, f: impl Fn(&[f64]) -> f64) -> Self {
        Self::from_fn(chart, &[], |x, out| out[0] = f(x))
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn value_shape(&self) -> &[usize] {
        &self.value_shape
    }

    /// Number of components per grid point.
    pub fn components(&self) -> usize {
        self.value_shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, p: usize) -> &[f64] {
        let c = self.components();
        &self.data[p * c..(p + 1) * c]
    }

    pub fn at_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.components();
        &mut self.data[p * c..(p + 1) * c]
    }

    /// Scalar field holding one component.
    pub fn component(&self, c: usize) -> Field {
        let comps = self.components();
        let data = (0..self.chart.len()).map(|p| self.data[p * comps + c]).collect();
        Field { chart: self.chart.clone(), value_shape: Vec::new(), data }
    }

    /// Same data viewed with another value shape of equal size.
    pub fn reshaped(mut self, value_shape: &[usize]) -> Result<Self> {
        if value_shape.iter().product::<usize>() != self.components() {
            return Err(GeometryError::ShapeMismatch(format!(
                "cannot view {:?} as {:?}",
                self.value_shape, value_shape
            )));
        }
        self.value_shape = value_shape.to_vec();
        Ok(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { chart: self.chart.clone(), value_shape: self.value_shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn check_compatible(&self, other: &Field) -> Result<()> {
        if self.chart != other.chart || self.value_shape != other.value_shape {
            return Err(GeometryError::ShapeMismatch(format!(
                "fields differ in chart or value shape ({:?} vs {:?})",
                self.value_shape, other.value_shape
            )));
        }
        Ok(())
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        self.check_compatible(other)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Field { chart: self.chart.clone(), value_shape: self.value_shape.clone(), data })
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.combine(1.0, other, -1.0)
    }

    pub fn scaled(&self, a: f64) -> Field {
        self.map(|v| a * v)
    }

    /// Max absolute difference between two compatible fields.
    pub fn max_abs_diff(&self, other: &Field) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (x, y)| m.max((x - y).abs())))
    }

    /// Concatenates the components of `self` and `other` pointwise; both must
    /// have rank-1 value shapes.
    pub fn concat(&self, other: &Field) -> Result<Field> {
        if self.chart != other.chart || self.value_shape.len() != 1 || other.value_shape.len() != 1 {
            return Err(GeometryError::ShapeMismatch("concat needs vector fields on one chart".into()));
        }
        let (a, b) = (self.components(), other.components());
        Ok(Field::from_index_fn(&self.chart, &[a + b], |p, out| {
            out[..a].copy_from_slice(self.at(p));
            out[a..].copy_from_slice(other.at(p));
        }))
    }
}

/// Residual summary used by every check: max-norm and root mean square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Residual {
    pub max: f64,
    pub rms: f64,
}

impl Residual {
    pub fn of(field: &Field) -> Self {
        Self { max: field.max_abs(), rms: field.rms() }
    }
}

// Fourth-order first-derivative stencils. The two boundary layers use seven-point
// one-sided closures that are exact on quartics and reproduce the centered
// stencil on x^5 and x^6, so the truncation error varies smoothly across the
// boundary layers. Axes with fewer than seven points use five-point closures.
const D1_INTERIOR: [f64; 5] = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
const D1_EDGE0: [f64; 7] = [-7.0 / 3.0, 16.0 / 3.0, -71.0 / 12.0, 14.0 / 3.0, -7.0 / 3.0, 2.0 / 3.0, -1.0 / 12.0];
const D1_EDGE1: [f64; 7] = [-1.0 / 12.0, -7.0 / 4.0, 43.0 / 12.0, -3.0, 7.0 / 4.0, -7.0 / 12.0, 1.0 / 12.0];
const D1_EDGE0_SHORT: [f64; 5] = [-25.0 / 12.0, 48.0 / 12.0, -36.0 / 12.0, 16.0 / 12.0, -3.0 / 12.0];
const D1_EDGE1_SHORT: [f64; 5] = [-3.0 / 12.0, -10.0 / 12.0, 18.0 / 12.0, -6.0 / 12.0, 1.0 / 12.0];

#[derive(Clone, Copy)]
struct Stencil {
    start: usize,
    len: usize,
    weights: [f64; 7],
}

impl Stencil {
    fn new(start: usize, w: &[f64]) -> Self {
        let mut weights = [0.0; 7];
        weights[..w.len()].copy_from_slice(w);
        Self { start, len: w.len(), weights }
    }

    fn mirrored(m: usize, w: &[f64], sign: f64) -> Self {
        let mut weights = [0.0; 7];
        for (k, &v) in w.iter().rev().enumerate() {
            weights[k] = sign * v;
        }
        Self { start: m - w.len(), len: w.len(), weights }
    }
}

fn d1_stencil(i: usize, m: usize) -> Stencil {
    let (e0, e1): (&[f64], &[f64]) = if m >= 7 { (&D1_EDGE0, &D1_EDGE1) } else { (&D1_EDGE0_SHORT, &D1_EDGE1_SHORT) };
    match i {
        0 => Stencil::new(0, e0),
        1 => Stencil::new(0, e1),
        _ if i == m - 1 => Stencil::mirrored(m, e0, -1.0),
        _ if i == m - 2 => Stencil::mirrored(m, e1, -1.0),
        _ => Stencil::new(i - 2, &D1_INTERIOR),
    }
}

/// Four-point weights of the cubic through the nodes around segment
/// `[i, i + 1]`, evaluated by `interior` and the left closure; the right
/// closure mirrors the left one.
fn segment_stencil(i: usize, m: usize, interior: [f64; 4], left: [f64; 4]) -> (usize, [f64; 4]) {
    if i == 0 {
        (0, left)
    } else if i + 2 >= m {
        let mut w = left;
        w.reverse();
        (m - 4, w)
    } else {
        (i - 1, interior)
    }
}

/// Weights for the midpoint value of segment `[i, i + 1]`.
pub(crate) fn midpoint_stencil(i: usize, m: usize) -> (usize, [f64; 4]) {
    segment_stencil(i, m, [-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0], [5.0 / 16.0, 15.0 / 16.0, -5.0 / 16.0, 1.0 / 16.0])
}

/// Weights (per unit spacing) for the integral over segment `[i, i + 1]`:
/// Simpson's rule with a cubic midpoint value.
pub(crate) fn segment_quadrature_stencil(i: usize, m: usize) -> (usize, [f64; 4]) {
    segment_stencil(i, m, [-1.0 / 24.0, 13.0 / 24.0, 13.0 / 24.0, -1.0 / 24.0], [9.0 / 24.0, 19.0 / 24.0, -5.0 / 24.0, 1.0 / 24.0])
}

/// Derivative along `axis`; the caller guarantees the axis is valid.
pub(crate) fn d1(field: &Field, axis: usize) -> Field {
    let chart = field.chart();
    assert!(axis < chart.dim(), "axis {axis} out of range");
    let m = chart.shape()[axis];
    let s = chart.stride(axis);
    let h = chart.spacing()[axis];
    let nc = field.components();
    let stencils: Vec<Stencil> = (0..m).map(|i| d1_stencil(i, m)).collect();
    let src = field.data();
    let mut out = Field::zeros(chart, field.value_shape());
    let dst = out.data_mut();
    for start in chart.line_starts(axis) {
        for (i, st) in stencils.iter().enumerate() {
            let p = start + i * s;
            for c in 0..nc {
                let mut acc = 0.0;
                for k in 0..st.len {
                    acc += st.weights[k] * src[(start + (st.start + k) * s) * nc + c];
                }
                dst[p * nc + c] = acc / h;
            }
        }
    }
    out
}

/// Componentwise partial derivative along `axis`.
///
/// Interior points use the centered five-point stencil; the two layers nearest
/// each boundary use one-sided closures. Exact on polynomials of degree four.
pub fn partial(field: &Field, axis: usize) -> Result<Field> {
    let dim = field.chart().dim();
    if axis >= dim {
        return Err(GeometryError::AxisOutOfRange { axis, dim });
    }
    Ok(d1(field, axis))
}

/// `∂_i ∂_j` as the composition of two first derivatives.
pub fn second_partial(field: &Field, axis_i: usize, axis_j: usize) -> Result<Field> {
    partial(&partial(field, axis_j)?, axis_i)
}

/// All first derivatives stacked as a trailing axis: value shape `[.., n]`.
pub fn gradient(field: &Field) -> Field {
    let chart = field.chart();
    let n = chart.dim();
    let parts: Vec<Field> = (0..n).map(|a| d1(field, a)).collect();
    let mut shape = field.value_shape().to_vec();
    shape.push(n);
    let nc = field.components();
    Field::from_index_fn(chart, &shape, |p, out| {
        for (a, part) in parts.iter().enumerate() {
            for (c, v) in part.at(p).iter().enumerate() {
                out[c * n + a] = *v;
            }
        }
        debug_assert_eq!(out.len(), nc * n);
    })
}

/// One unit move on the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub axis: usize,
    pub forward: bool,
}

impl Step {
    pub fn forward(axis: usize) -> Self {
        Self { axis, forward: true }
    }

    pub fn backward(axis: usize) -> Self {
        Self { axis, forward: false }
    }

    pub fn reversed(self) -> Self {
        Self { axis: self.axis, forward: !self.forward }
    }
}

/// A base grid point followed by unit lattice moves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticePath {
    pub base: Vec<usize>,
    pub steps: Vec<Step>,
}

impl LatticePath {
    pub fn new(base: Vec<usize>, steps: Vec<Step>) -> Self {
        Self { base, steps }
    }

    /// Axis-by-axis path from `from` to `to`, visiting the axes in `axis_order`.
    pub fn staircase(from: &[usize], to: &[usize], axis_order: &[usize]) -> Self {
        let mut steps = Vec::new();
        for &axis in axis_order {
            let (a, b) = (from[axis], to[axis]);
            let step = if b >= a { Step::forward(axis) } else { Step::backward(axis) };
            steps.extend(std::iter::repeat_n(step, a.abs_diff(b)));
        }
        Self { base: from.to_vec(), steps }
    }

    /// The end point of the path (without bounds checks).
    pub fn end(&self) -> Vec<usize> {
        let mut idx: Vec<isize> = self.base.iter().map(|&i| i as isize).collect();
        for st in &self.steps {
            idx[st.axis] += if st.forward { 1 } else { -1 };
        }
        idx.into_iter().map(|i| i.max(0) as usize).collect()
    }

    /// The same curve traversed backwards.
    pub fn reversed(&self) -> Self {
        Self { base: self.end(), steps: self.steps.iter().rev().map(|s| s.reversed()).collect() }
    }
}

fn one_form_layout(one_form: &Field) -> Result<(usize, usize)> {
    let n = one_form.chart().dim();
    match one_form.value_shape() {
        [k] if *k == n => Ok((1, n)),
        [lead, k] if *k == n => Ok((*lead, n)),
        other => Err(GeometryError::ShapeMismatch(format!(
            "one-form needs value shape [{n}] or [N, {n}], got {other:?}"
        ))),
    }
}

/// Integral of every leading component of the one-form over the lattice edge
/// from `lower` to `lower + e_axis`.
fn edge_integral(one_form: &Field, lower: usize, axis: usize, lead: usize, out: &mut [f64]) {
    let chart = one_form.chart();
    let n = chart.dim();
    let m = chart.shape()[axis];
    let s = chart.stride(axis);
    let h = chart.spacing()[axis];
    let i = chart.axis_index(lower, axis);
    let line_start = lower - i * s;
    let (start, w) = segment_quadrature_stencil(i, m);
    let nc = one_form.components();
    let data = one_form.data();
    for (c, slot) in out.iter_mut().enumerate().take(lead) {
        let mut acc = 0.0;
        for (k, wk) in w.iter().enumerate() {
            acc += wk * data[(line_start + (start + k) * s) * nc + c * n + axis];
        }
        *slot = acc * h;
    }
}

/// Integrates a one-form (value shape `[n]` or `[N, n]`) along a lattice path,
/// returning one value per leading component.
///
/// Every unit step is integrated with Simpson's rule on the cubic through the
/// four nearest nodes of its grid line. Step contributions are accumulated per
/// undirected edge and summed in a fixed edge order, so a path and its reversal
/// give exactly opposite values.
pub fn path_integrate(one_form: &Field, path: &LatticePath) -> Result<Vec<f64>> {
    let (lead, _) = one_form_layout(one_form)?;
    let chart = one_form.chart();
    if !chart.contains(&path.base) {
        return Err(GeometryError::PathLeavesChart { step: 0 });
    }
    let mut idx = path.base.clone();
    let mut edges: BTreeMap<(usize, usize), i64> = BTreeMap::new();
    for (k, st) in path.steps.iter().enumerate() {
        if st.axis >= chart.dim() {
            return Err(GeometryError::AxisOutOfRange { axis: st.axis, dim: chart.dim() });
        }
        let here = chart.flat_index(&idx);
        if st.forward {
            if idx[st.axis] + 1 >= chart.shape()[st.axis] {
                return Err(GeometryError::PathLeavesChart { step: k + 1 });
            }
            *edges.entry((here, st.axis)).or_default() += 1;
            idx[st.axis] += 1;
        } else {
            if idx[st.axis] == 0 {
                return Err(GeometryError::PathLeavesChart { step: k + 1 });
            }
            idx[st.axis] -= 1;
            *edges.entry((chart.flat_index(&idx), st.axis)).or_default() -= 1;
        }
    }
    let mut total = vec![0.0; lead];
    let mut buf = vec![0.0; lead];
    for (&(lower, axis), &count) in &edges {
        if count == 0 {
            continue;
        }
        edge_integral(one_form, lower, axis, lead, &mut buf);
        for (t, v) in total.iter_mut().zip(&buf) {
            *t += count as f64 * v;
        }
    }
    Ok(total)
}

/// One edge of the spanning tree used by staircase sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepEdge {
    pub from: usize,
    pub to: usize,
    pub axis: usize,
    pub forward: bool,
}

/// Order in which a staircase sweep visits the axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    /// Axis 0 first, then axis 1, ...
    #[default]
    Forward,
    /// Last axis first.
    Reverse,
}

impl SweepOrder {
    pub fn axes(self, dim: usize) -> Vec<usize> {
        match self {
            SweepOrder::Forward => (0..dim).collect(),
            SweepOrder::Reverse => (0..dim).rev().collect(),
        }
    }
}

/// Edges of the staircase spanning tree rooted at `base`, listed so that every
/// edge's `from` point is reached before the edge itself.
///
/// Stage `k` walks along `axis_order[k]` out of every point already reached
/// whose remaining coordinates still equal the base's. The tree path to any
/// point is therefore the staircase path with the given axis order.
pub fn sweep_edges(chart: &Chart, base: &[usize], axis_order: &[usize]) -> Vec<SweepEdge> {
    let mut edges = Vec::with_capacity(chart.len());
    for (k, &axis) in axis_order.iter().enumerate() {
        let fixed = &axis_order[k..];
        let s = chart.stride(axis);
        let m = chart.shape()[axis];
        for seed in 0..chart.len() {
            if !fixed.iter().all(|&a| chart.axis_index(seed, a) == base[a]) {
                continue;
            }
            let i0 = base[axis];
            for i in i0..m - 1 {
                let from = seed + (i - i0) * s;
                edges.push(SweepEdge { from, to: from + s, axis, forward: true });
            }
            for i in (1..=i0).rev() {
                let from = seed - (i0 - i) * s;
                edges.push(SweepEdge { from, to: from - s, axis, forward: false });
            }
        }
    }
    edges
}

/// Potential of a (nearly) closed one-form, vanishing at `base`, integrated
/// along staircase paths sweeping axis 0 first.
pub fn potential_from_closed_form(one_form: &Field, base: &[usize]) -> Result<Field> {
    potential_with_order(one_form, base, SweepOrder::Forward)
}

/// As [`potential_from_closed_form`] with an explicit sweep order. Comparing
/// the two orders exposes path dependence of a non-closed form.
pub fn potential_with_order(one_form: &Field, base: &[usize], order: SweepOrder) -> Result<Field> {
    let (lead, _) = one_form_layout(one_form)?;
    let chart = one_form.chart();
    if !chart.contains(base) {
        return Err(GeometryError::PathLeavesChart { step: 0 });
    }
    let shape: Vec<usize> = if one_form.value_shape().len() == 1 { Vec::new() } else { vec![lead] };
    let mut potential = Field::zeros(chart, &shape);
    let mut buf = vec![0.0; lead];
    for edge in sweep_edges(chart, base, &order.axes(chart.dim())) {
        let lower = if edge.forward { edge.from } else { edge.to };
        edge_integral(one_form, lower, edge.axis, lead, &mut buf);
        let sign = if edge.forward { 1.0 } else { -1.0 };
        for c in 0..lead {
            let v = potential.at(edge.from)[c] + sign * buf[c];
            potential.at_mut(edge.to)[c] = v;
        }
    }
    Ok(potential)
}

/// `max |∂_i ω_j − ∂_j ω_i|` over the grid, index pairs and leading components.
pub fn closedness_residual(one_form: &Field) -> Result<f64> {
    let (lead, n) = one_form_layout(one_form)?;
    let parts: Vec<Field> = (0..n).map(|a| d1(one_form, a)).collect();
    let mut worst: f64 = 0.0;
    for p in 0..one_form.chart().len() {
        for c in 0..lead {
            for i in 0..n {
                for j in i + 1..n {
                    let v = parts[i].at(p)[c * n + j] - parts[j].at(p)[c * n + i];
                    worst = worst.max(v.abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Tensor-product Lagrange interpolation of a field at arbitrary coordinates
/// inside its chart, on 4-point (cubic) or 6-point (quintic) stencils.
#[derive(Debug, Clone, Copy)]
pub struct LagrangeInterpolator<'a> {
    field: &'a Field,
    points: usize,
}

impl<'a> LagrangeInterpolator<'a> {
    pub fn cubic(field: &'a Field) -> Self {
        Self { field, points: 4 }
    }

    /// Falls back to cubic on axes with fewer than six points.
    pub fn quintic(field: &'a Field) -> Self {
        Self { field, points: 6 }
    }

    /// Components at `x`, or `None` outside the chart.
    pub fn eval(&self, x: &[f64]) -> Option<Vec<f64>> {
        let chart = self.field.chart();
        let n = chart.dim();
        if x.len() != n {
            return None;
        }
        let mut starts = Vec::with_capacity(n);
        let mut weights: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (axis, &xa) in x.iter().enumerate() {
            let (lo, hi) = chart.ranges()[axis];
            let tol = 1e-12 * (hi - lo);
            if !(xa >= lo - tol && xa <= hi + tol) {
                return None;
            }
            let m = chart.shape()[axis];
            let k = if m >= self.points { self.points } else { 4 };
            let u = (xa - lo) / chart.spacing()[axis];
            let cell = (u.floor().max(0.0) as usize).min(m - 2);
            let start = cell.saturating_sub(k / 2 - 1).min(m - k);
            let t = u - start as f64;
            let w: Vec<f64> = (0..k)
                .map(|j| {
                    (0..k)
                        .filter(|&l| l != j)
                        .fold(1.0, |v, l| v * (t - l as f64) / (j as f64 - l as f64))
                })
                .collect();
            starts.push(start);
            weights.push(w);
        }
        let nc = self.field.components();
        let mut out = vec![0.0; nc];
        let mut offs = vec![0usize; n];
        loop {
            let mut w = 1.0;
            let mut idx = Vec::with_capacity(n);
            for axis in 0..n {
                w *= weights[axis][offs[axis]];
                idx.push(starts[axis] + offs[axis]);
            }
            let vals = self.field.at(chart.flat_index(&idx));
            for (o, v) in out.iter_mut().zip(vals) {
                *o += w * v;
            }
            // odometer over the stencil corners
            let mut axis = n;
            loop {
                if axis == 0 {
                    return Some(out);
                }
                axis -= 1;
                offs[axis] += 1;
                if offs[axis] < weights[axis].len() {
                    break;
                }
                offs[axis] = 0;
            }
        }
    }
}

/// Observed convergence order from errors at spacings `h` and `h / ratio`.
pub fn measured_order(coarse_error: f64, fine_error: f64, ratio: f64) -> f64 {
    (coarse_error / fine_error).ln() / ratio.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn line(lo: f64, hi: f64, n: usize) -> Chart {
        Chart::new(vec![(lo, hi)], vec![n]).unwrap()
    }

    fn square(n: usize) -> Chart {
        Chart::uniform(vec![(0.0, 1.0), (0.0, 1.0)], n).unwrap()
    }

    #[test]
    fn rejects_degenerate_axes() {
        assert_eq!(
            Chart::new(vec![(0.0, 1.0)], vec![4]),
            Err(GeometryError::TooFewPoints { axis: 0, points: 4, min: 5 })
        );
        assert!(Chart::new(vec![(1.0, 1.0)], vec![9]).is_err());
        assert!(Chart::new(vec![(0.0, 1.0)], vec![9, 9]).is_err());
    }

    #[test]
    fn index_round_trip() {
        let chart = Chart::new(vec![(0.0, 1.0), (0.0, 2.0), (0.0, 3.0)], vec![5, 6, 7]).unwrap();
        for p in 0..chart.len() {
            assert_eq!(chart.flat_index(&chart.multi_index(p)), p);
        }
        assert_eq!(chart.stride(0), 42);
        assert_eq!(chart.axis_index(chart.flat_index(&[3, 4, 5]), 1), 4);
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let f = Field::scalar(&square(9), |_| 3.5);
        for axis in 0..2 {
            assert!(partial(&f, axis).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_is_differentiated_exactly() {
        let chart = line(0.0, 1.0, 9);
        let f = Field::scalar(&chart, |x| x[0].powi(3));
        let df = partial(&f, 0).unwrap();
        let exact = Field::scalar(&chart, |x| 3.0 * x[0] * x[0]);
        assert!(df.max_abs_diff(&exact).unwrap() <= 1e-10);
    }

    #[test]
    fn quartic_exact_on_five_point_axis() {
        let chart = line(-1.0, 1.0, 5);
        let f = Field::scalar(&chart, |x| x[0].powi(4) - x[0]);
        let df = partial(&f, 0).unwrap();
        let exact = Field::scalar(&chart, |x| 4.0 * x[0].powi(3) - 1.0);
        assert!(df.max_abs_diff(&exact).unwrap() <= 1e-12);
    }

    #[test]
    fn axis_out_of_range() {
        let f = Field::scalar(&square(5), |x| x[0]);
        assert_eq!(partial(&f, 2), Err(GeometryError::AxisOutOfRange { axis: 2, dim: 2 }));
    }

    #[test]
    fn sine_converges_at_fourth_order() {
        let err = |n: usize| {
            let chart = line(0.0, PI, n);
            let df = partial(&Field::scalar(&chart, |x| x[0].sin()), 0).unwrap();
            df.max_abs_diff(&Field::scalar(&chart, |x| x[0].cos())).unwrap()
        };
        let order = measured_order(err(17), err(33), 2.0);
        assert!(order >= 3.5, "order {order}");
    }

    #[test]
    fn mixed_and_pure_second_derivatives() {
        let chart = square(9);
        let xy = Field::scalar(&chart, |x| x[0] * x[1]);
        let d01 = second_partial(&xy, 0, 1).unwrap();
        assert!(d01.map(|v| v - 1.0).max_abs() <= 1e-9);
        let sq = Field::scalar(&chart, |x| x[0] * x[0]);
        assert!(second_partial(&sq, 0, 0).unwrap().map(|v| v - 2.0).max_abs() <= 1e-9);

        let chart = line(0.0, 1.0, 33);
        let e = Field::scalar(&chart, |x| x[0].exp());
        let d2 = second_partial(&e, 0, 0).unwrap();
        assert!(d2.max_abs_diff(&e).unwrap() <= 1e-5);
    }

    #[test]
    fn constant_form_over_one_step() {
        let chart = line(0.0, 1.0, 11);
        let c = 2.5;
        let form = Field::from_fn(&chart, &[1], |_, out| out[0] = c);
        let v = path_integrate(&form, &LatticePath::new(vec![3], vec![Step::forward(0)])).unwrap();
        assert!((v[0] - c * 0.1).abs() < 1e-14);
    }

    #[test]
    fn exact_form_over_plaquette_vanishes() {
        let chart = square(9);
        let form = Field::from_fn(&chart, &[2], |x, out| {
            out[0] = x[1];
            out[1] = x[0];
        });
        for base in [[0, 0], [3, 5], [7, 7]] {
            let path = LatticePath::new(
                base.to_vec(),
                vec![Step::forward(0), Step::forward(1), Step::backward(0), Step::backward(1)],
            );
            assert!(path_integrate(&form, &path).unwrap()[0].abs() <= 1e-12);
        }
    }

    #[test]
    fn antiderivative_along_full_axis() {
        let chart = line(0.0, 1.0, 17);
        let form = Field::from_fn(&chart, &[1], |x, out| out[0] = 2.0 * x[0]);
        let path = LatticePath::staircase(&[0], &[16], &[0]);
        assert!((path_integrate(&form, &path).unwrap()[0] - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn path_leaving_chart_is_rejected() {
        let chart = line(0.0, 1.0, 5);
        let form = Field::zeros(&chart, &[1]);
        let path = LatticePath::new(vec![4], vec![Step::forward(0)]);
        assert_eq!(path_integrate(&form, &path), Err(GeometryError::PathLeavesChart { step: 1 }));
    }

    #[test]
    fn potential_of_dx_is_x() {
        let chart = square(9);
        let form = Field::from_fn(&chart, &[2], |_, out| out[0] = 1.0);
        let pot = potential_from_closed_form(&form, &[0, 0]).unwrap();
        assert!(pot.max_abs_diff(&Field::scalar(&chart, |x| x[0])).unwrap() < 1e-13);
    }

    #[test]
    fn potential_of_exact_product_form() {
        let chart = square(17);
        let form = Field::from_fn(&chart, &[2], |x, out| {
            out[0] = x[1];
            out[1] = x[0];
        });
        let base = [4, 11];
        let b = chart.coords(&base);
        let pot = potential_from_closed_form(&form, &base).unwrap();
        let exact = Field::scalar(&chart, |x| x[0] * x[1] - b[0] * b[1]);
        assert!(pot.max_abs_diff(&exact).unwrap() <= 1e-8);
    }

    #[test]
    fn non_closed_form_is_path_dependent_by_the_enclosed_area() {
        // ω = y dx: the two staircases from (0,0) to (x,y) differ by ∮ω = -x·y.
        let chart = square(17);
        let form = Field::from_fn(&chart, &[2], |x, out| out[0] = x[1]);
        let fwd = potential_with_order(&form, &[0, 0], SweepOrder::Forward).unwrap();
        let rev = potential_with_order(&form, &[0, 0], SweepOrder::Reverse).unwrap();
        let gap = rev.sub(&fwd).unwrap();
        let area = Field::scalar(&chart, |x| x[0] * x[1]);
        assert!(gap.max_abs_diff(&area).unwrap() <= 1e-10);
        assert!((closedness_residual(&form).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn closedness_of_exact_differential() {
        let chart = square(33);
        let f = Field::scalar(&chart, |x| x[0].sin() * x[1].cos());
        let form = gradient(&f);
        assert!(closedness_residual(&form).unwrap() <= 1e-6);
        assert_eq!(closedness_residual(&Field::zeros(&chart, &[2])).unwrap(), 0.0);
    }

    #[test]
    fn interpolation_reproduces_cubics() {
        let chart = square(9);
        let f = Field::scalar(&chart, |x| x[0].powi(3) - 2.0 * x[0] * x[1] * x[1] + x[1]);
        let interp = LagrangeInterpolator::cubic(&f);
        for x in [[0.03, 0.97], [0.5, 0.5], [0.91, 0.12], [0.0, 1.0]] {
            let v = interp.eval(&x).unwrap()[0];
            let exact = x[0].powi(3) - 2.0 * x[0] * x[1] * x[1] + x[1];
            assert!((v - exact).abs() < 1e-12);
        }
        assert!(interp.eval(&[1.5, 0.5]).is_none());
    }

    #[test]
    fn quintic_interpolation_reproduces_quintics() {
        let chart = Chart::new(vec![(0.0, 1.0); 2], vec![11, 5]).unwrap();
        let p = |x: &[f64]| x[0].powi(5) - 3.0 * x[0].powi(4) * x[1] + x[1].powi(3);
        let f = Field::scalar(&chart, p);
        let interp = LagrangeInterpolator::quintic(&f);
        for x in [[0.03, 0.97], [0.5, 0.5], [0.91, 0.12], [1.0, 0.0]] {
            assert!((interp.eval(&x).unwrap()[0] - p(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_tree_reaches_every_point_once() {
        let chart = Chart::new(vec![(0.0, 1.0); 3], vec![5, 6, 7]).unwrap();
        let base = [2, 0, 6];
        for order in [SweepOrder::Forward, SweepOrder::Reverse] {
            let edges = sweep_edges(&chart, &base, &order.axes(3));
            assert_eq!(edges.len(), chart.len() - 1);
            let mut seen = vec![false; chart.len()];
            seen[chart.flat_index(&base)] = true;
            for e in edges {
                assert!(seen[e.from]);
                assert!(!seen[e.to]);
                seen[e.to] = true;
            }
        }
    }
}
