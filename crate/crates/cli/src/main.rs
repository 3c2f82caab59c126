//! `bonnet`: run checks and embeddings on fixtures or CSV data.

use std::path::PathBuf;
use std::process::ExitCode;

use bonnet_core::report::{run, Bound, Command, RunError, RunOutput, RunSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bonnet", version, about = "Statistical manifold checks and embeddings into flat statistical manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Torsion, metric compatibility, positivity and curvature duality.
    CheckStructure(Overrides),
    /// Gauss-Codazzi-Ricci residuals and the bundle curvature.
    CheckGcr(Overrides),
    /// Bonnet-type construction of a Lauritzen pair.
    Embed(Overrides),
    /// `embed` followed by the convex ambient potential.
    Ambient(Overrides),
    /// Affine fundamental equations and the conormal Lauritzen pair.
    Affine(Overrides),
    /// Legendre transform of a Hessian fixture.
    Legendre(Overrides),
    /// Doubled pair realizing the alpha-connection, then the ambient potential.
    AlphaEmbed(Overrides),
    /// Residual ladders over several resolutions with fitted orders.
    Convergence(Overrides),
    /// Run a JSON spec file; flags override its fields.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Default)]
struct Overrides {
    /// Fixture name, e.g. `sphere2` or `exp_potential(3)`.
    #[arg(long)]
    fixture: Option<String>,
    /// Points per axis.
    #[arg(long)]
    res: Option<usize>,
    /// Axis range `lo,hi`; repeat once per axis.
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    range: Vec<(f64, f64)>,
    /// Primary tolerance of the subcommand (axiom, gcr or embed).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    axiom_tol: Option<f64>,
    #[arg(long)]
    gcr_tol: Option<f64>,
    #[arg(long)]
    embed_tol: Option<f64>,
    /// Base grid index, comma separated.
    #[arg(long, value_delimiter = ',')]
    base_point: Option<Vec<usize>>,
    /// Base frame rows separated by `;`, entries by `,`.
    #[arg(long, value_parser = parse_matrix, allow_hyphen_values = true)]
    base_frame: Option<Vec<Vec<f64>>>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Equiaffine tolerance on tau.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    resolutions: Option<Vec<usize>>,
    #[arg(long)]
    min_order: Option<f64>,
    /// Output directory for report.json, timings.json and CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print report.json to stdout instead of the summary.
    #[arg(long)]
    json: bool,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad number `{lo}`"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad number `{hi}`"))?;
    Ok((lo, hi))
}

fn parse_matrix(s: &str) -> Result<Vec<Vec<f64>>, String> {
    s.split(';')
        .map(|row| row.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad number `{v}`"))).collect())
        .collect()
}

impl Overrides {
    fn apply(&self, spec: &mut RunSpec) {
        if let Some(f) = &self.fixture {
            spec.fixture = Some(f.clone());
            spec.data = None;
        }
        if let Some(r) = self.res {
            spec.chart.resolution = Some(r);
        }
        if !self.range.is_empty() {
            spec.chart.ranges = Some(self.range.clone());
        }
        let t = &mut spec.tolerances;
        if let Some(v) = self.tol {
            match spec.command {
                Command::CheckStructure => t.axiom = v,
                Command::CheckGcr | Command::Convergence => t.gcr = v,
                _ => t.embed = v,
            }
        }
        for (slot, v) in [(&mut t.axiom, self.axiom_tol), (&mut t.gcr, self.gcr_tol), (&mut t.embed, self.embed_tol)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(b) = &self.base_point {
            spec.gauge.base_point = Some(b.clone());
        }
        if let Some(b) = &self.base_frame {
            spec.gauge.base_frame = Some(b.clone());
        }
        let p = &mut spec.params;
        p.alpha = self.alpha.unwrap_or(p.alpha);
        p.epsilon = self.epsilon.unwrap_or(p.epsilon);
        p.margin = self.margin.or(p.margin);
        p.tau = self.tau.unwrap_or(p.tau);
        p.min_order = self.min_order.or(p.min_order);
        if let Some(r) = &self.resolutions {
            p.resolutions = r.clone();
        }
        if let Some(o) = &self.out {
            spec.out_dir = Some(o.clone());
        }
    }
}

fn build(cmd: Cmd) -> Result<(RunSpec, bool), RunError> {
    let (command, o) = match cmd {
        Cmd::Run { spec, overrides } => {
            let mut s = RunSpec::load(&spec)?;
            overrides.apply(&mut s);
            return Ok((s, overrides.json));
        }
        Cmd::CheckStructure(o) => (Command::CheckStructure, o),
        Cmd::CheckGcr(o) => (Command::CheckGcr, o),
        Cmd::Embed(o) => (Command::Embed, o),
        Cmd::Ambient(o) => (Command::Ambient, o),
        Cmd::Affine(o) => (Command::Affine, o),
        Cmd::Legendre(o) => (Command::Legendre, o),
        Cmd::AlphaEmbed(o) => (Command::AlphaEmbed, o),
        Cmd::Convergence(o) => (Command::Convergence, o),
    };
    let fixture = o.fixture.clone().ok_or_else(|| RunError::Spec("--fixture is required (or use `run --spec`)".into()))?;
    let mut spec = RunSpec::for_fixture(command, &fixture);
    o.apply(&mut spec);
    Ok((spec, o.json))
}

fn print_summary(out: &RunOutput) {
    let r = &out.report;
    for c in &r.checks {
        let status = match (c.passed, c.bound) {
            (false, _) => "FAIL",
            (true, None) => "info",
            (true, Some(_)) => "PASS",
        };
        let bound = match c.bound {
            Some(Bound::AtMost(t)) => format!(" <= {t:.1e}"),
            Some(Bound::AtLeast(t)) => format!(" >= {t:.3}"),
            Some(Bound::Above(t)) => format!(" > {t:.3e}"),
            None => String::new(),
        };
        match &c.note {
            Some(n) => println!("{status} {:<32} {n}", c.name),
            None => println!("{status} {:<32} {:.3e}{bound}", c.name, c.value),
        }
    }
    for t in &r.convergence {
        for row in &t.rows {
            let order = row.order.map(|o| format!("{o:.2}")).unwrap_or_else(|| "-".into());
            println!("conv {:<32} m={:<4} {:.3e} order {order}", t.check, row.resolution, row.residual);
        }
    }
    match &r.failed {
        None => println!("{}: PASS", r.command),
        Some(name) => println!("{}: FAIL ({name})", r.command),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build(cli.command).and_then(|(spec, json)| {
        let out = run(&spec)?;
        if let Some(dir) = &spec.out_dir {
            out.write(dir)?;
        }
        Ok((out, json))
    });
    match result {
        Ok((out, json)) => {
            if json {
                print!("{}", out.report.to_json());
            } else {
                print_summary(&out);
            }
            ExitCode::from(out.report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
