//! Spec-driven runs: one subcommand per construction, a JSON report of named
//! checks, and CSV component tables.
//!
//! Numerical failures become failed checks in the report (exit 1); malformed
//! specs and unreadable inputs are [`RunError`]s (exit 2).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine::{affine_to_lauritzen, check_statistical_affine, decompose, AffineImmersion};
use crate::ambient::{extend_potential, induced_structure, pullback_potential, AmbientOptions};
use crate::bonnet::{bonnet_embed, BonnetOptions};
use crate::error::GeometryError;
use crate::fixtures::{Fixture, FixtureName};
use crate::gcr::{bundle_connection, bundle_curvature, bundle_curvature_duality_residual, gcr_residuals, ExtrinsicData};
use crate::grid::{measured_order, Chart, Field};
use crate::hessian::{flatness_residual, hessian_metric, legendre_transform};
use crate::lauritzen::{alpha_pair_checked, verify_lauritzen, LauritzenPair};
use crate::structures::StatisticalStructure;

pub const DEFAULT_RESOLUTION: usize = 33;
/// Legendre checks through interpolated re-grids.
pub const INTERPOLATED_TOLERANCE: f64 = 1e-4;
/// Legendre checks against analytic conjugates.
pub const ANALYTIC_TOLERANCE: f64 = 1e-7;
pub const INVERSE_HESSIAN_TOLERANCE: f64 = 1e-5;
pub const DUAL_FLATNESS_TOLERANCE: f64 = 1e-5;
pub const RESTRICTION_TOLERANCE: f64 = 1e-10;
/// Residuals below this are roundoff; no order is fitted to them.
pub const ROUNDOFF_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run spec: {0}")]
    Spec(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        2
    }
}

fn spec_err(msg: impl Into<String>) -> RunError {
    RunError::Spec(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CheckStructure,
    CheckGcr,
    Embed,
    Ambient,
    Affine,
    Legendre,
    AlphaEmbed,
    Convergence,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::CheckStructure,
        Command::CheckGcr,
        Command::Embed,
        Command::Ambient,
        Command::Affine,
        Command::Legendre,
        Command::AlphaEmbed,
        Command::Convergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::CheckStructure => "check-structure",
            Command::CheckGcr => "check-gcr",
            Command::Embed => "embed",
            Command::Ambient => "ambient",
            Command::Affine => "affine",
            Command::Legendre => "legendre",
            Command::AlphaEmbed => "alpha-embed",
            Command::Convergence => "convergence",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, RunError> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| spec_err(format!("unknown command `{s}`")))
    }
}

/// CSV inputs; relative paths are resolved against the spec file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub g: Option<PathBuf>,
    pub gamma: Option<PathBuf>,
    pub h: Option<PathBuf>,
    pub hstar: Option<PathBuf>,
    pub tau: Option<PathBuf>,
    pub f: Option<PathBuf>,
    pub xi: Option<PathBuf>,
    pub phi: Option<PathBuf>,
}

impl DataFiles {
    fn resolve(&mut self, dir: &Path) {
        for slot in [&mut self.g, &mut self.gamma, &mut self.h, &mut self.hstar, &mut self.tau, &mut self.f, &mut self.xi, &mut self.phi] {
            if let Some(p) = slot.as_mut() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub ranges: Option<Vec<(f64, f64)>>,
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Structure axioms and pointwise identities.
    pub axiom: f64,
    /// Gauss-Codazzi-Ricci residuals; also the integrability gate of `embed`.
    pub gcr: f64,
    /// Lauritzen and induced-structure residuals.
    pub embed: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { axiom: 1e-6, gcr: 1e-3, embed: 5e-3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gauge {
    pub base_point: Option<Vec<usize>>,
    /// Rows of the base frame matrix.
    pub base_frame: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    pub alpha: f64,
    pub epsilon: f64,
    pub margin: Option<f64>,
    /// Equiaffine tolerance on `τ`.
    pub tau: f64,
    pub resolutions: Vec<usize>,
    /// Smallest acceptable fitted order in `convergence`.
    pub min_order: Option<f64>,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epsilon: crate::ambient::DEFAULT_EPSILON,
            margin: None,
            tau: crate::affine::DEFAULT_EQUIAFFINE_TOLERANCE,
            resolutions: vec![17, 33, 65],
            min_order: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub command: Command,
    #[serde(default)]
    pub fixture: Option<String>,
    #[serde(default)]
    pub data: Option<DataFiles>,
    #[serde(default)]
    pub chart: ChartSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub gauge: Gauge,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunSpec {
    pub fn for_fixture(command: Command, fixture: &str) -> Self {
        Self {
            command,
            fixture: Some(fixture.to_string()),
            data: None,
            chart: ChartSpec::default(),
            tolerances: Tolerances::default(),
            gauge: Gauge::default(),
            params: Params::default(),
            out_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| spec_err(e.to_string()))
    }

    /// Reads a spec file; relative data paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        let mut spec = Self::from_json(&text)?;
        if let (Some(data), Some(dir)) = (spec.data.as_mut(), path.parent()) {
            data.resolve(dir);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        match (&self.fixture, &self.data) {
            (Some(_), Some(_)) => return Err(spec_err("give either a fixture or data files, not both")),
            (None, None) => return Err(spec_err("no input: give a fixture or data files")),
            _ => {}
        }
        if let Some(name) = &self.fixture {
            name.parse::<FixtureName>().map_err(|e| spec_err(e.to_string()))?;
        }
        let t = &self.tolerances;
        for (name, v) in [("axiom", t.axiom), ("gcr", t.gcr), ("embed", t.embed), ("tau", self.params.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(spec_err(format!("tolerance `{name}` must be positive, got {v}")));
            }
        }
        if !(self.params.epsilon > 0.0 && self.params.epsilon.is_finite()) {
            return Err(spec_err("epsilon must be positive"));
        }
        if let Some(m) = self.params.margin {
            if !(m > 0.0) {
                return Err(spec_err("margin must be positive"));
            }
        }
        if self.data.is_some() && (self.chart.ranges.is_none() || self.chart.resolution.is_none()) {
            return Err(spec_err("data input needs chart.ranges and chart.resolution"));
        }
        if self.command == Command::Convergence {
            if self.data.is_some() {
                return Err(spec_err("convergence needs a fixture"));
            }
            let r = &self.params.resolutions;
            if r.len() < 2 || r.windows(2).any(|w| w[1] <= w[0]) {
                return Err(spec_err("convergence needs at least two increasing resolutions"));
            }
        }
        if self.command == Command::Legendre && self.data.is_some() {
            return Err(spec_err("legendre needs a fixture with a convex potential"));
        }
        if let Some(frame) = &self.gauge.base_frame {
            let m = frame.len();
            if m == 0 || frame.iter().any(|row| row.len() != m) {
                return Err(spec_err("gauge.base_frame must be a non-empty square matrix"));
            }
        }
        Ok(())
    }
}

/// Acceptance bound of a check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    Above(f64),
}

impl Bound {
    fn holds(self, v: f64) -> bool {
        match self {
            Bound::AtMost(t) => v <= t,
            Bound::AtLeast(t) => v >= t,
            Bound::Above(t) => v > t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rms: Option<f64>,
    /// `None` for informational values.
    pub bound: Option<Bound>,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    pub fn bounded(name: &str, value: f64, bound: Bound) -> Self {
        Self { name: name.into(), value, rms: None, bound: Some(bound), passed: bound.holds(value), note: None }
    }

    pub fn info(name: &str, value: f64) -> Self {
        Self { name: name.into(), value, rms: None, bound: None, passed: true, note: None }
    }

    fn failure(name: &str, error: &GeometryError) -> Self {
        Self { name: name.into(), value: f64::NAN, rms: None, bound: None, passed: false, note: Some(error.to_string()) }
    }

    fn with_rms(mut self, rms: f64) -> Self {
        self.rms = Some(rms);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub resolution: usize,
    pub residual: f64,
    /// Order against the previous row.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub check: String,
    pub rows: Vec<ConvergenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: Command,
    pub input: RunSpec,
    pub checks: Vec<Check>,
    pub convergence: Vec<ConvergenceTable>,
    pub passed: bool,
    /// First failing check.
    pub failed: Option<String>,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub stages: Vec<Stage>,
}

/// A field exported as `<file>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub prefix: String,
    pub field: Field,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: Report,
    pub timings: Timings,
    pub tables: Vec<Table>,
}

impl RunOutput {
    /// Writes `report.json`, `timings.json`, component tables and, for
    /// convergence runs, `convergence.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), RunError> {
        let io = |path: &Path, e: &dyn fmt::Display| RunError::Io { path: path.to_path_buf(), message: e.to_string() };
        fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        let report = dir.join("report.json");
        fs::write(&report, self.report.to_json()).map_err(|e| io(&report, &e))?;
        let timings = dir.join("timings.json");
        let text = serde_json::to_string_pretty(&self.timings).expect("timings serialize") + "\n";
        fs::write(&timings, text).map_err(|e| io(&timings, &e))?;
        for t in &self.tables {
            write_field_csv(&dir.join(format!("{}.csv", t.file)), &t.prefix, &t.field)?;
        }
        if !self.report.convergence.is_empty() {
            let path = dir.join("convergence.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, &e))?;
            w.write_record(["check", "resolution", "residual", "order"]).map_err(|e| io(&path, &e))?;
            for table in &self.report.convergence {
                for row in &table.rows {
                    let order = row.order.map(|o| format!("{o:e}")).unwrap_or_default();
                    w.write_record([table.check.clone(), row.resolution.to_string(), format!("{:e}", row.residual), order])
                        .map_err(|e| io(&path, &e))?;
                }
            }
            w.flush().map_err(|e| io(&path, &e))?;
        }
        Ok(())
    }
}

fn index_names(shape: &[usize]) -> Vec<String> {
    let total: usize = shape.iter().product();
    let dotted = shape.iter().any(|&e| e > 10);
    (0..total)
        .map(|mut flat| {
            let mut idx = vec![0; shape.len()];
            for (slot, &e) in idx.iter_mut().zip(shape).rev() {
                *slot = flat % e;
                flat /= e;
            }
            let parts: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            parts.join(if dotted { "." } else { "" })
        })
        .collect()
}

/// One row per grid point in row-major order; header `prefix_<indices>`.
pub fn write_field_csv(path: &Path, prefix: &str, field: &Field) -> Result<(), RunError> {
    let io = |e: &dyn fmt::Display| RunError::Io { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    let header: Vec<String> = if field.value_shape().is_empty() {
        vec![prefix.to_string()]
    } else {
        index_names(field.value_shape()).into_iter().map(|s| format!("{prefix}_{s}")).collect()
    };
    w.write_record(&header).map_err(|e| io(&e))?;
    for p in 0..field.chart().len() {
        w.write_record(field.at(p).iter().map(|v| format!("{v:e}"))).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

/// Reads a table written by [`write_field_csv`]; the value shape comes from
/// the header's index strings.
pub fn read_field_csv(path: &Path, chart: &Chart) -> Result<Field, RunError> {
    let io = |e: &dyn fmt::Display| RunError::Io { path: path.to_path_buf(), message: e.to_string() };
    let bad = |msg: String| spec_err(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| io(&e))?;
    let header: Vec<String> = r.headers().map_err(|e| io(&e))?.iter().map(|s| s.trim().to_string()).collect();
    let indices: Vec<Vec<usize>> = if header.len() == 1 && !header[0].contains('_') {
        vec![Vec::new()]
    } else {
        header
            .iter()
            .map(|name| {
                let (_, idx) = name.rsplit_once('_').ok_or_else(|| bad(format!("column `{name}` has no index string")))?;
                let parts: Vec<&str> = if idx.contains('.') { idx.split('.').collect() } else { idx.split("").filter(|s| !s.is_empty()).collect() };
                parts.iter().map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad index string in `{name}`")))).collect()
            })
            .collect::<Result<_, _>>()?
    };
    let rank = indices[0].len();
    if indices.iter().any(|i| i.len() != rank) {
        return Err(bad("columns have index strings of different lengths".into()));
    }
    let shape: Vec<usize> = (0..rank).map(|k| indices.iter().map(|i| i[k] + 1).max().unwrap_or(1)).collect();
    let expected: Vec<String> = if rank == 0 { vec![String::new()] } else { index_names(&shape) };
    let got: Vec<String> = indices
        .iter()
        .map(|i| {
            let parts: Vec<String> = i.iter().map(|v| v.to_string()).collect();
            parts.join(if shape.iter().any(|&e| e > 10) { "." } else { "" })
        })
        .collect();
    if got != expected {
        return Err(bad("columns are not in row-major index order".into()));
    }
    let mut data = Vec::with_capacity(chart.len() * header.len());
    for (row_no, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io(&e))?;
        if rec.len() != header.len() {
            return Err(bad(format!("row {} has {} columns, expected {}", row_no + 1, rec.len(), header.len())));
        }
        for v in rec.iter() {
            data.push(v.trim().parse::<f64>().map_err(|_| bad(format!("row {}: `{v}` is not a number", row_no + 1)))?);
        }
    }
    if data.len() != chart.len() * header.len() {
        return Err(bad(format!("{} rows, chart has {} points", data.len() / header.len().max(1), chart.len())));
    }
    Field::from_data(chart, &shape, data).map_err(|e| bad(e.to_string()))
}

enum Source {
    Fixture(Fixture),
    Data(DataFiles),
}

struct Ctx<'a> {
    spec: &'a RunSpec,
    source: Source,
    chart: Chart,
    checks: Vec<Check>,
    convergence: Vec<ConvergenceTable>,
    tables: Vec<Table>,
    stages: Vec<Stage>,
}

/// Outcome of a stage: `Err(())` means a failed check has been recorded.
type Step<T> = std::result::Result<T, ()>;

impl<'a> Ctx<'a> {
    fn new(spec: &'a RunSpec) -> Result<Self, RunError> {
        let (source, ranges, default_res) = match (&spec.fixture, &spec.data) {
            (Some(name), _) => {
                let fx = Fixture::by_name(name).map_err(|e| spec_err(e.to_string()))?;
                let ranges = fx.ranges().to_vec();
                (Source::Fixture(fx), ranges, DEFAULT_RESOLUTION)
            }
            (None, Some(d)) => (Source::Data(d.clone()), Vec::new(), 0),
            (None, None) => return Err(spec_err("no input")),
        };
        let ranges = spec.chart.ranges.clone().unwrap_or(ranges);
        if let Source::Fixture(fx) = &source {
            if ranges.len() != fx.dim() {
                return Err(spec_err(format!("fixture {} needs {} ranges, got {}", fx.name(), fx.dim(), ranges.len())));
            }
        }
        let res = spec.chart.resolution.unwrap_or(default_res);
        let chart = Chart::uniform(ranges, res).map_err(|e| spec_err(e.to_string()))?;
        Ok(Self { spec, source, chart, checks: Vec::new(), convergence: Vec::new(), tables: Vec::new(), stages: Vec::new() })
    }

    fn fixture(&self) -> Option<&Fixture> {
        match &self.source {
            Source::Fixture(f) => Some(f),
            Source::Data(_) => None,
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Self) -> crate::Result<T>) -> Step<T> {
        let start = Instant::now();
        let out = f(self);
        self.stages.push(Stage { name: name.into(), seconds: start.elapsed().as_secs_f64() });
        out.map_err(|e| self.checks.push(Check::failure(name, &e)))
    }

    fn push(&mut self, c: Check) {
        self.checks.push(c);
    }

    fn table(&mut self, file: &str, prefix: &str, field: &Field) {
        self.tables.push(Table { file: file.into(), prefix: prefix.into(), field: field.clone() });
    }

    fn data_field(&self, pick: impl Fn(&DataFiles) -> &Option<PathBuf>, what: &str) -> Result<Option<Field>, RunError> {
        match &self.source {
            Source::Data(d) => pick(d).as_ref().map(|p| read_field_csv(p, &self.chart)).transpose().map_err(|e| match e {
                RunError::Spec(m) => spec_err(format!("{what}: {m}")),
                other => other,
            }),
            Source::Fixture(_) => Ok(None),
        }
    }

    fn structure(&mut self) -> Result<Step<StatisticalStructure>, RunError> {
        if let Source::Fixture(_) = self.source {
            return Ok(self.stage("load structure", |c| c.fixture().expect("fixture").structure(&c.chart)));
        }
        let g = self.data_field(|d| &d.g, "g")?.ok_or_else(|| spec_err("data.g is required"))?;
        let gamma = self.data_field(|d| &d.gamma, "gamma")?.ok_or_else(|| spec_err("data.gamma is required"))?;
        Ok(self.stage("load structure", |_| StatisticalStructure::new(g, gamma)))
    }

    fn extrinsic(&mut self) -> Result<Step<ExtrinsicData>, RunError> {
        if let Source::Fixture(_) = self.source {
            return Ok(self.stage("load extrinsic data", |c| c.fixture().expect("fixture").extrinsic(&c.chart)));
        }
        let h = self.data_field(|d| &d.h, "h")?;
        let hs = self.data_field(|d| &d.hstar, "hstar")?;
        let tau = self.data_field(|d| &d.tau, "tau")?;
        Ok(match (h, hs) {
            (None, None) => Ok(ExtrinsicData::empty(&self.chart)),
            (Some(h), Some(hs)) => {
                let r = h.value_shape().first().copied().unwrap_or(0);
                let n = self.chart.dim();
                let tau = tau.unwrap_or_else(|| Field::zeros(&self.chart, &[r, r, n]));
                self.stage("load extrinsic data", |_| ExtrinsicData::new(h, hs, tau))
            }
            _ => return Err(spec_err("data.h and data.hstar must be given together")),
        })
    }

    fn immersion(&mut self) -> Result<Step<AffineImmersion>, RunError> {
        if let Source::Fixture(_) = self.source {
            return Ok(self.stage("load immersion", |c| c.fixture().expect("fixture").affine(&c.chart)));
        }
        let f = self.data_field(|d| &d.f, "f")?.ok_or_else(|| spec_err("data.f is required"))?;
        let xi = self.data_field(|d| &d.xi, "xi")?.ok_or_else(|| spec_err("data.xi is required"))?;
        Ok(self.stage("load immersion", |_| AffineImmersion::new(f, xi)))
    }

    fn bonnet_options(&self) -> BonnetOptions {
        BonnetOptions {
            base: self.spec.gauge.base_point.clone(),
            base_frame: self.spec.gauge.base_frame.as_ref().map(|rows| {
                let m = rows.len();
                DMatrix::from_row_slice(m, m, &rows.concat())
            }),
            integrability_tolerance: self.spec.tolerances.gcr,
            ..BonnetOptions::default()
        }
    }

    fn finish(self, start: Instant) -> RunOutput {
        let failed = self.checks.iter().find(|c| !c.passed).map(|c| c.name.clone());
        let report = Report {
            command: self.spec.command,
            input: self.spec.clone(),
            checks: self.checks,
            convergence: self.convergence,
            passed: failed.is_none(),
            failed,
        };
        RunOutput { report, timings: Timings { total_seconds: start.elapsed().as_secs_f64(), stages: self.stages }, tables: self.tables }
    }
}

/// Runs one subcommand.
pub fn run(spec: &RunSpec) -> Result<RunOutput, RunError> {
    spec.validate()?;
    let start = Instant::now();
    let mut ctx = Ctx::new(spec)?;
    match spec.command {
        Command::CheckStructure => check_structure(&mut ctx)?,
        Command::CheckGcr => check_gcr(&mut ctx)?,
        Command::Embed => {
            embed(&mut ctx)?;
        }
        Command::Ambient => ambient(&mut ctx)?,
        Command::Affine => affine(&mut ctx)?,
        Command::Legendre => legendre(&mut ctx),
        Command::AlphaEmbed => alpha_embed(&mut ctx)?,
        Command::Convergence => convergence(&mut ctx),
    }
    Ok(ctx.finish(start))
}

fn check_structure(ctx: &mut Ctx<'_>) -> Result<(), RunError> {
    let Ok(s) = ctx.structure()? else { return Ok(()) };
    let axiom = ctx.spec.tolerances.axiom;
    let Ok(rep) = ctx.stage("check_statistical", |_| s.check_statistical()) else { return Ok(()) };
    ctx.push(Check::bounded("torsion", rep.torsion_residual, Bound::AtMost(axiom)));
    ctx.push(Check::bounded("nabla_g_symmetry", rep.nabla_g_residual, Bound::AtMost(axiom)));
    ctx.push(Check::bounded("min_metric_eigenvalue", rep.min_metric_eigenvalue, Bound::Above(0.0)));
    let Ok((involution, duality, pointwise)) = ctx.stage("duality", |_| {
        let dd = s.dual()?.dual()?;
        Ok((dd.gamma().max_abs_diff(s.gamma())?, s.curvature_duality_residual()?, s.pointwise_curvature_duality_residual()?))
    }) else {
        return Ok(());
    };
    ctx.push(Check::bounded("dual_involution", involution, Bound::AtMost(axiom)));
    ctx.push(Check::bounded("curvature_duality", duality, Bound::AtMost(axiom)));
    ctx.push(Check::info("pointwise_curvature_duality", pointwise));
    ctx.table("g", "g", s.g());
    ctx.table("gamma", "gamma", s.gamma());
    Ok(())
}

fn check_gcr(ctx: &mut Ctx<'_>) -> Result<(), RunError> {
    let Ok(s) = ctx.structure()? else { return Ok(()) };
    let Ok(e) = ctx.extrinsic()? else { return Ok(()) };
    let tol = ctx.spec.tolerances.gcr;
    let Ok(rep) = ctx.stage("gcr_residuals", |_| gcr_residuals(&s, &e)) else { return Ok(()) };
    for (name, r) in [("gauss", rep.gauss), ("codazzi_h", rep.codazzi_h), ("codazzi_hstar", rep.codazzi_hstar), ("ricci", rep.ricci)] {
        ctx.push(Check::bounded(name, r.max, Bound::AtMost(tol)).with_rms(r.rms));
    }
    ctx.push(Check::info("codazzi_hstar_cross_check", rep.codazzi_hstar_cross_check));
    let Ok((curv, duality, curv_duality)) = ctx.stage("bundle_connection", |_| {
        let c = bundle_connection(&s, &e)?;
        Ok((bundle_curvature(&c).max_abs(), c.duality_residual(), bundle_curvature_duality_residual(&c)))
    }) else {
        return Ok(());
    };
    ctx.push(Check::bounded("bundle_curvature", curv, Bound::AtMost(tol)));
    ctx.push(Check::info("bundle_connection_duality", duality));
    ctx.push(Check::info("bundle_curvature_duality", curv_duality));
    Ok(())
}

/// Bonnet pipeline; returns the structure and pair for downstream stages.
fn embed(ctx: &mut Ctx<'_>) -> Result<Option<(StatisticalStructure, LauritzenPair)>, RunError> {
    let Ok(s) = ctx.structure()? else { return Ok(None) };
    let Ok(e) = ctx.extrinsic()? else { return Ok(None) };
    let opts = ctx.bonnet_options();
    let Ok(b) = ctx.stage("bonnet_embed", |_| bonnet_embed(&s, &e, &opts)) else { return Ok(None) };
    let d = &b.diagnostics;
    let tol = ctx.spec.tolerances.embed;
    ctx.push(Check::info("gcr_max", d.gcr.max()));
    ctx.push(Check::info("bundle_curvature", d.bundle_curvature));
    ctx.push(Check::info("plaquette_holonomy", d.frames.holonomy));
    ctx.push(Check::info("dual_plaquette_holonomy", d.frames.dual_holonomy));
    ctx.push(Check::info("pairing_deviation", d.frames.pairing_deviation));
    ctx.push(Check::info("frame_condition", d.frames.max_condition));
    ctx.push(Check::info("theta_closedness", d.theta_closedness));
    ctx.push(Check::info("theta_star_closedness", d.theta_star_closedness));
    ctx.push(Check::info("path_discrepancy", d.path_discrepancy));
    ctx.push(Check::bounded("lauritzen_metric", d.verification.metric_residual, Bound::AtMost(tol)).with_rms(d.verification.metric_rms));
    ctx.push(
        Check::bounded("lauritzen_connection", d.verification.connection_residual, Bound::AtMost(tol)).with_rms(d.verification.connection_rms),
    );
    ctx.table("f", "f", b.pair.f());
    ctx.table("phi", "phi", b.pair.phi());
    Ok(Some((s, b.pair)))
}

/// Pullback, tube extension and induced structure of `pair` against `target`.
fn ambient_stages(ctx: &mut Ctx<'_>, pair: &LauritzenPair, target: &StatisticalStructure) {
    let closed_tol = ctx.spec.tolerances.gcr;
    let embed_tol = ctx.spec.tolerances.embed;
    let Ok(pb) = ctx.stage("pullback_potential", |_| pullback_potential(pair, closed_tol)) else { return };
    ctx.push(Check::bounded("pullback_closedness", pb.closedness, Bound::AtMost(closed_tol)));
    let opts = AmbientOptions { epsilon: ctx.spec.params.epsilon, margin: ctx.spec.params.margin, ..AmbientOptions::default() };
    let Ok(a) = ctx.stage("extend_potential", |_| extend_potential(pair, &pb, &opts)) else { return };
    let d = &a.diagnostics;
    ctx.push(Check::info("convexification_constant", a.c));
    ctx.push(Check::bounded("min_hessian_eigenvalue", d.min_hessian_eigenvalue, Bound::Above(d.margin)));
    ctx.push(Check::bounded("restriction", d.restriction_residual, Bound::AtMost(RESTRICTION_TOLERANCE)));
    ctx.push(Check::bounded("gradient_condition", d.gradient_residual, Bound::AtMost(embed_tol)));
    ctx.push(Check::info("tangential_hessian", d.tangential_residual));
    ctx.push(Check::bounded("tube_separation", d.min_separation, Bound::Above(d.separation_threshold)));
    let Ok((_, rep)) = ctx.stage("induced_structure", |_| induced_structure(&a, pair, target)) else { return };
    ctx.push(Check::bounded("induced_metric", rep.metric_residual, Bound::AtMost(embed_tol)));
    ctx.push(Check::bounded("induced_connection", rep.connection_residual, Bound::AtMost(embed_tol)));
    ctx.table("psi0", "psi0", &a.psi0);
}

fn ambient(ctx: &mut Ctx<'_>) -> Result<(), RunError> {
    if let Some((s, pair)) = embed(ctx)? {
        ambient_stages(ctx, &pair, &s);
    }
    Ok(())
}

fn affine(ctx: &mut Ctx<'_>) -> Result<(), RunError> {
    let Ok(im) = ctx.immersion()? else { return Ok(()) };
    let axiom = ctx.spec.tolerances.axiom;
    let embed_tol = ctx.spec.tolerances.embed;
    let tau_tol = ctx.spec.params.tau;
    let Ok(d) = ctx.stage("decompose", |_| decompose(&im)) else { return Ok(()) };
    ctx.push(Check::info("codimension", d.codim as f64));
    ctx.push(Check::bounded("reconstruction", d.reconstruction_residual, Bound::AtMost(axiom)));
    let Ok(rep) = ctx.stage("check_statistical_affine", |_| check_statistical_affine(&d)) else { return Ok(()) };
    ctx.push(Check::bounded("tau", rep.max_tau, Bound::AtMost(tau_tol)));
    if let Some(mu) = rep.max_mu {
        ctx.push(Check::info("mu", mu));
    }
    ctx.push(Check::bounded("min_affine_metric_eigenvalue", rep.min_g_eigenvalue, Bound::Above(0.0)));
    ctx.push(Check::bounded("affine_metric_symmetry", rep.g_asymmetry, Bound::AtMost(axiom)));
    ctx.push(Check::bounded("torsion", rep.axioms.torsion_residual, Bound::AtMost(axiom)));
    ctx.push(Check::bounded("nabla_g_symmetry", rep.axioms.nabla_g_residual, Bound::AtMost(axiom)));
    let Ok(al) = ctx.stage("affine_to_lauritzen", |_| affine_to_lauritzen(&im, tau_tol)) else { return Ok(()) };
    let c = &al.conormal;
    ctx.push(Check::bounded("conormal_tangent", c.tangent_residual, Bound::AtMost(axiom)));
    ctx.push(Check::bounded("conormal_xi", c.xi_residual, Bound::AtMost(axiom)));
    if let Some(v) = c.eta_residual {
        ctx.push(Check::bounded("conormal_eta", v, Bound::AtMost(axiom)));
    }
    ctx.push(Check::info("conormal_xi_dphi", c.xi_dphi_residual));
    if let Some(v) = c.eta_dphi_residual {
        ctx.push(Check::info("conormal_eta_dphi", v));
    }
    let v = &al.verification;
    ctx.push(Check::bounded("lauritzen_metric", v.metric_residual, Bound::AtMost(embed_tol)).with_rms(v.metric_rms));
    ctx.push(Check::bounded("lauritzen_connection", v.connection_residual, Bound::AtMost(embed_tol)).with_rms(v.connection_rms));
    if let Some(fx) = ctx.fixture() {
        let chart = ctx.chart.clone();
        let mut worst: f64 = 0.0;
        let mut available = true;
        for p in 0..chart.len() {
            match fx.affine_conormal(&chart.point_coords(p)) {
                Ok(exact) => {
                    worst = exact.iter().zip(al.pair.phi().at(p)).fold(worst, |m, (a, b)| m.max((a - b).abs()));
                }
                Err(_) => available = false,
            }
        }
        if available {
            ctx.push(Check::info("conormal_vs_analytic", worst));
        }
    }
    ctx.table("f", "f", al.pair.f());
    ctx.table("phi", "phi", al.pair.phi());
    Ok(())
}

fn legendre(ctx: &mut Ctx<'_>) {
    let Ok(hp) = ctx.stage("load potential", |c| c.fixture().expect("validated").hesse_potential(&c.chart)) else { return };
    let Ok(lt) = ctx.stage("legendre_transform", |_| legendre_transform(&hp)) else { return };
    let d = &lt.diagnostics;
    ctx.push(Check::bounded("gradient_interpolated", d.regrid_gradient_residual, Bound::AtMost(INTERPOLATED_TOLERANCE)));
    ctx.push(Check::bounded("inverse_hessian_interpolated", d.regrid_inverse_hessian_residual, Bound::AtMost(INTERPOLATED_TOLERANCE)));
    let optional = [
        ("gradient_analytic", d.analytic_gradient_residual, Some(ANALYTIC_TOLERANCE)),
        ("inverse_hessian", d.inverse_hessian_residual, Some(INVERSE_HESSIAN_TOLERANCE)),
        ("inverse_hessian_analytic", d.analytic_inverse_hessian_residual, Some(ANALYTIC_TOLERANCE)),
        ("conjugate_value", d.conjugate_value_residual, Some(ANALYTIC_TOLERANCE)),
        ("double_legendre", d.double_legendre_residual, Some(ANALYTIC_TOLERANCE)),
        ("eta_finite_difference", d.eta_fd_residual, None),
    ];
    for (name, value, tol) in optional {
        if let Some(v) = value {
            ctx.push(match tol {
                Some(t) => Check::bounded(name, v, Bound::AtMost(t)),
                None => Check::info(name, v),
            });
        }
    }
    let Ok((flat, dual_flat)) = ctx.stage("flatness", |_| {
        let s = hessian_metric(&hp)?;
        Ok((flatness_residual(s.gamma()), flatness_residual(&s.dual_connection()?)))
    }) else {
        return;
    };
    ctx.push(Check::bounded("flatness", flat, Bound::AtMost(ANALYTIC_TOLERANCE)));
    ctx.push(Check::bounded("dual_flatness", dual_flat, Bound::AtMost(DUAL_FLATNESS_TOLERANCE)));
    let eta = lt.eta.clone();
    let psi_star = lt.psi_star.clone();
    ctx.table("eta", "eta", &eta);
    ctx.table("psi_star", "psi_star", &psi_star);
}

/// The natural Lauritzen pair of the input with the structure it realizes:
/// dual coordinates for Hessian fixtures, the conormal pair for affine
/// fixtures, the Bonnet pair otherwise.
fn pair_source(ctx: &mut Ctx<'_>) -> Result<Option<(StatisticalStructure, LauritzenPair)>, RunError> {
    let name = ctx.fixture().map(|f| f.name());
    match name {
        Some(FixtureName::Euclidean(_) | FixtureName::ExpPotential(_) | FixtureName::Gaussian1d) => {
            let Ok(s) = ctx.structure()? else { return Ok(None) };
            let Ok(pair) = ctx.stage("dual coordinates", |c| {
                let fx = c.fixture().expect("fixture");
                let psi = fx.potential()?;
                let n = fx.dim();
                let f = Field::from_fn(&c.chart, &[n], |x, out| out.copy_from_slice(x));
                let phi = Field::from_fn(&c.chart, &[n], |x, out| out.copy_from_slice(&psi.gradient(x)));
                LauritzenPair::new(f, phi)
            }) else {
                return Ok(None);
            };
            Ok(Some((s, pair)))
        }
        Some(FixtureName::Paraboloid(_) | FixtureName::ConeCodim2) => {
            let Ok(im) = ctx.immersion()? else { return Ok(None) };
            let tau = ctx.spec.params.tau;
            let Ok(out) = ctx.stage("affine_to_lauritzen", |_| {
                let al = affine_to_lauritzen(&im, tau)?;
                Ok((al.decomposition.structure()?, al.pair))
            }) else {
                return Ok(None);
            };
            Ok(Some(out))
        }
        Some(FixtureName::Sphere2) => embed(ctx),
        None => {
            let f = ctx.data_field(|d| &d.f, "f")?;
            let phi = ctx.data_field(|d| &d.phi, "phi")?;
            match (f, phi) {
                (Some(f), Some(phi)) => {
                    let Ok(s) = ctx.structure()? else { return Ok(None) };
                    let Ok(pair) = ctx.stage("load pair", |_| LauritzenPair::new(f, phi)) else { return Ok(None) };
                    Ok(Some((s, pair)))
                }
                (None, None) => embed(ctx),
                _ => Err(spec_err("data.f and data.phi must be given together")),
            }
        }
    }
}

fn alpha_embed(ctx: &mut Ctx<'_>) -> Result<(), RunError> {
    let Some((s, pair)) = pair_source(ctx)? else { return Ok(()) };
    let alpha = ctx.spec.params.alpha;
    let tol = ctx.spec.tolerances.embed;
    let Ok(base) = ctx.stage("verify_lauritzen", |_| verify_lauritzen(&pair, &s)) else { return Ok(()) };
    ctx.push(Check::bounded("source_lauritzen_metric", base.metric_residual, Bound::AtMost(tol)));
    ctx.push(Check::bounded("source_lauritzen_connection", base.connection_residual, Bound::AtMost(tol)));
    let Ok(target) = ctx.stage("alpha_connection", |_| s.with_connection(s.alpha_connection(alpha)?)) else { return Ok(()) };
    let Ok(doubled) = ctx.stage("alpha_pair", |_| alpha_pair_checked(&pair, &s, alpha, tol)) else { return Ok(()) };
    let Ok(rep) = ctx.stage("verify_alpha_pair", |_| verify_lauritzen(&doubled, &target)) else { return Ok(()) };
    ctx.push(Check::bounded("alpha_lauritzen_metric", rep.metric_residual, Bound::AtMost(tol)).with_rms(rep.metric_rms));
    ctx.push(Check::bounded("alpha_lauritzen_connection", rep.connection_residual, Bound::AtMost(tol)).with_rms(rep.connection_rms));
    ctx.table("f", "f", doubled.f());
    ctx.table("phi", "phi", doubled.phi());
    ambient_stages(ctx, &doubled, &target);
    Ok(())
}

/// Named residuals of one fixture at one resolution. The integrability gate
/// is off here: coarse grids are measured, not rejected.
fn ladder_point(fx: &Fixture, chart: &Chart) -> crate::Result<Vec<(&'static str, f64)>> {
    let s = fx.structure(chart)?;
    let axioms = s.check_statistical()?;
    let mut out = vec![("torsion", axioms.torsion_residual), ("nabla_g_symmetry", axioms.nabla_g_residual)];
    out.push(("pointwise_curvature_duality", s.pointwise_curvature_duality_residual()?));
    let e = fx.extrinsic(chart)?;
    if e.r() > 0 {
        let rep = gcr_residuals(&s, &e)?;
        out.push(("gcr_max", rep.max()));
        let b = bonnet_embed(&s, &e, &BonnetOptions { integrability_tolerance: f64::INFINITY, ..BonnetOptions::default() })?;
        let d = &b.diagnostics;
        out.push(("bundle_curvature", d.bundle_curvature));
        out.push(("plaquette_holonomy", d.frames.holonomy));
        out.push(("theta_closedness", d.theta_closedness));
        out.push(("lauritzen_metric", d.verification.metric_residual));
        out.push(("lauritzen_connection", d.verification.connection_residual));
    }
    if fx.potential().is_ok() {
        let lt = legendre_transform(&fx.hesse_potential(chart)?)?;
        if let Some(v) = lt.diagnostics.inverse_hessian_residual {
            out.push(("inverse_hessian", v));
        }
    }
    if fx.affine_position(&chart.point_coords(0)).is_ok() && e.r() == 0 {
        let al = affine_to_lauritzen(&fx.affine(chart)?, crate::affine::DEFAULT_EQUIAFFINE_TOLERANCE)?;
        out.push(("lauritzen_metric", al.verification.metric_residual));
        out.push(("lauritzen_connection", al.verification.connection_residual));
    }
    Ok(out)
}

fn convergence(ctx: &mut Ctx<'_>) {
    let resolutions = ctx.spec.params.resolutions.clone();
    let mut series: Vec<ConvergenceTable> = Vec::new();
    for &m in &resolutions {
        let Ok(points) = ctx.stage(&format!("resolution {m}"), |c| {
            let fx = c.fixture().expect("validated");
            let chart = Chart::uniform(c.chart.ranges().to_vec(), m)?;
            ladder_point(fx, &chart)
        }) else {
            return;
        };
        for (name, value) in points {
            let table = match series.iter_mut().position(|t| t.check == name) {
                Some(i) => &mut series[i],
                None => {
                    series.push(ConvergenceTable { check: name.into(), rows: Vec::new() });
                    series.last_mut().expect("just pushed")
                }
            };
            let order = table.rows.last().and_then(|prev| {
                (prev.residual > ROUNDOFF_FLOOR && value > ROUNDOFF_FLOOR)
                    .then(|| measured_order(prev.residual, value, (m - 1) as f64 / (prev.resolution - 1) as f64))
            });
            table.rows.push(ConvergenceRow { resolution: m, residual: value, order });
        }
    }
    for table in &series {
        let last = table.rows.last().expect("non-empty");
        ctx.push(Check::info(&table.check, last.residual));
        if let (Some(min), Some(order)) = (ctx.spec.params.min_order, last.order) {
            ctx.push(Check::bounded(&format!("order_{}", table.check), order, Bound::AtLeast(min)));
        }
    }
    ctx.convergence = series;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commands_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("bogus".parse::<Command>().is_err());
    }

    #[test]
    fn spec_defaults_and_validation() {
        let spec = RunSpec::from_json(r#"{"command": "check-gcr", "fixture": "euclidean"}"#).unwrap();
        assert_eq!(spec.tolerances, Tolerances::default());
        spec.validate().unwrap();
        assert!(RunSpec::from_json(r#"{"command": "check-gcr", "fixture": "euclidean", "colour": 1}"#).is_err());
        let mut bad = spec.clone();
        bad.tolerances.axiom = -1.0;
        assert!(matches!(bad.validate(), Err(RunError::Spec(_))));
        let mut both = spec.clone();
        both.data = Some(DataFiles::default());
        assert!(both.validate().is_err());
        let mut unknown = spec;
        unknown.fixture = Some("torus".into());
        assert!(unknown.validate().is_err());
    }

    #[test]
    fn euclidean_gcr_is_zero() {
        let out = run(&RunSpec::for_fixture(Command::CheckGcr, "euclidean")).unwrap();
        assert!(out.report.passed, "{:?}", out.report);
        for name in ["gauss", "codazzi_h", "codazzi_hstar", "ricci", "bundle_curvature"] {
            assert!(out.report.check(name).unwrap().value <= 1e-12);
        }
    }

    #[test]
    fn index_strings() {
        assert_eq!(index_names(&[2, 2]), ["00", "01", "10", "11"]);
        assert_eq!(index_names(&[11])[10], "10");
        assert_eq!(index_names(&[]), [""]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let chart = Chart::uniform(vec![(0.0, 1.0); 2], 5).unwrap();
        let f = Field::from_fn(&chart, &[2, 3], |x, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = x[0] * k as f64 + x[1].sin() / 3.0;
            }
        });
        let path = dir.path().join("t.csv");
        write_field_csv(&path, "t", &f).unwrap();
        assert_eq!(read_field_csv(&path, &chart).unwrap(), f);
        let scalar = Field::scalar(&chart, |x| x[0] - x[1]);
        write_field_csv(&path, "psi", &scalar).unwrap();
        assert_eq!(read_field_csv(&path, &chart).unwrap(), scalar);
        let other = Chart::uniform(vec![(0.0, 1.0); 2], 6).unwrap();
        assert!(matches!(read_field_csv(&path, &other), Err(RunError::Spec(_))));
    }
}
