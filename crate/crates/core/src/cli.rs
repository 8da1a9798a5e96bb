//! Batch verification harness: scenario files in, JSON/CSV reports out.

use crate::graded_forms::{FormError, FormField, SampledField};
use crate::grassmann_anomaly::{self as ga, GrassmannFamily};
use crate::lattice_spec::{
    self as ls, DiracFamily, DirectionEntry, FamilyDescriptor, PotentialEntry, Radial, ToeplitzOp, Weight,
};
use crate::superconn::{self, Superconnection};
use crate::symbol_calc::{self, ClassicalSymbol};
use crate::{CMat, Cplx};
use clap::{Parser, ValueEnum};
use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

// ------------------------------------------------------------------ scenario schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FamilySource {
    Inline(FamilyDescriptor),
    /// Path to a family descriptor, relative to the scenario file.
    Path(PathBuf),
}

fn default_tol() -> f64 {
    1e-8
}
fn default_depth() -> usize {
    8
}
fn default_j() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckKind {
    /// `tr^{Q1}(A) - tr^{Q2}(A)` against `-res(A(log Q1/q1 - log Q2/q2))`.
    WeightChange {
        operator: ToeplitzOp,
        q1: Weight,
        q2: Weight,
        #[serde(default = "default_depth")]
        depth: usize,
        #[serde(default)]
        expected: Option<f64>,
    },
    /// `tr^Q(A)` against `-(1/q) res(A log Q)` for differential `A`.
    TrqRes {
        operator: ToeplitzOp,
        weight: Weight,
        #[serde(default = "default_depth")]
        depth: usize,
    },
    /// `tr^Q([A,B])` against `-(1/q) res(A [B, log Q])`.
    Cyclicity {
        a: ToeplitzOp,
        b: ToeplitzOp,
        weight: Weight,
        #[serde(default = "default_depth")]
        depth: usize,
    },
    /// `tr^Q(A)`: ζ route against the heat route (or `expected`).
    WeightedTrace {
        operator: ToeplitzOp,
        weight: Weight,
        #[serde(default)]
        expected: Option<f64>,
    },
    /// `res(Q^s)` from symbols against `q·Res_{z=-s} TR(Q^{-z})`.
    ResidueCross {
        weight: Weight,
        s: f64,
        #[serde(default = "default_depth")]
        depth: usize,
        #[serde(default)]
        expected: Option<f64>,
    },
    /// Wodzicki residue of an operator or of a symbol file.
    Residue {
        #[serde(default)]
        operator: Option<ToeplitzOp>,
        #[serde(default)]
        symbol: Option<PathBuf>,
        #[serde(default = "default_depth")]
        depth: usize,
        #[serde(default)]
        expected: Option<f64>,
    },
    /// `η(D_a)`: Hurwitz closed form against the erfc-sum fit.
    Eta { a: f64 },
    /// `‖d str(𝔸^{2j})‖` on a circle family under `h`-halving.
    ChernClosedness {
        family: FamilySource,
        lambda: f64,
        b: Vec<f64>,
        #[serde(default = "default_j")]
        j: usize,
        h: f64,
    },
    /// Getzler rescaling identity at `t`.
    Getzler {
        family: FamilySource,
        lambda: f64,
        b: Vec<f64>,
        #[serde(default = "default_j")]
        j: usize,
        t: f64,
    },
    /// `‖d tr(F(dF)^{2j})‖` for a spectral window under `h`-halving.
    GrassmannClosedness {
        family: FamilySource,
        window: [f64; 2],
        b: Vec<f64>,
        #[serde(default = "default_j")]
        j: usize,
        h: f64,
    },
    /// `tr(F(dF)²) = 8 tr(P(dP)²)` for a window.
    HsIdentity {
        family: FamilySource,
        window: [f64; 2],
        b: Vec<f64>,
    },
    /// Additivity, `F`/`P` relation and orthogonal triple at `λ < λ' < λ''`.
    Cocycle {
        family: FamilySource,
        lambdas: [f64; 3],
        b: Vec<f64>,
    },
    /// `tr(P[[P,X],[P,Y]]) = -tr([X,Y]P)` with `X = iH_x`, `Y = iH_y`.
    Gauge {
        family: FamilySource,
        window: [f64; 2],
        b: Vec<f64>,
        x: Vec<PotentialEntry>,
        y: Vec<PotentialEntry>,
    },
    /// `dω^Q_{2j}` unchanged when `F` is edited at one lattice site.
    Locality {
        family: FamilySource,
        lambda: f64,
        b: Vec<f64>,
        #[serde(default = "default_j")]
        j: usize,
        weight: Weight,
        site: [i64; 2],
        value: f64,
        h: f64,
    },
    /// `dη̃/da ÷ sres` constant over a twist grid.
    Transgression {
        lambda: f64,
        grid: Vec<f64>,
        h: f64,
        #[serde(default = "default_depth")]
        depth: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(flatten)]
    pub kind: CheckKind,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub checks: Vec<Check>,
    /// Refinement levels for `h` ladders (`h, h/2, …`).
    #[serde(default)]
    pub refine: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Suite {
    TraceDefects,
    Chern,
    Grassmann,
    Transgression,
    Residue,
    Eta,
    WeightedTrace,
}

impl Suite {
    pub fn label(self) -> &'static str {
        match self {
            Suite::TraceDefects => "trace-defects",
            Suite::Chern => "chern",
            Suite::Grassmann => "grassmann",
            Suite::Transgression => "transgression",
            Suite::Residue => "residue",
            Suite::Eta => "eta",
            Suite::WeightedTrace => "weighted-trace",
        }
    }
}

impl CheckKind {
    pub fn suites(&self) -> &'static [Suite] {
        use CheckKind::*;
        match self {
            WeightChange { .. } | TrqRes { .. } | Cyclicity { .. } => &[Suite::TraceDefects],
            WeightedTrace { .. } => &[Suite::TraceDefects, Suite::WeightedTrace],
            ResidueCross { .. } => &[Suite::TraceDefects, Suite::Residue],
            Residue { .. } => &[Suite::Residue],
            Eta { .. } => &[Suite::Eta],
            ChernClosedness { .. } | Getzler { .. } => &[Suite::Chern],
            GrassmannClosedness { .. } | HsIdentity { .. } | Cocycle { .. } | Gauge { .. } | Locality { .. } => {
                &[Suite::Grassmann]
            }
            Transgression { .. } => &[Suite::Transgression],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl Scenario {
    pub fn from_json(s: &str, origin: &str) -> Result<Self, CliError> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| CliError::Parse { path: origin.into(), source: e })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for c in &self.checks {
            if !(c.tol > 0.0) {
                return Err(CliError::Invalid(format!("{}: tolerance must be positive", c.name)));
            }
            let h = match &c.kind {
                CheckKind::ChernClosedness { h, .. }
                | CheckKind::GrassmannClosedness { h, .. }
                | CheckKind::Locality { h, .. }
                | CheckKind::Transgression { h, .. } => Some(*h),
                _ => None,
            };
            if let Some(h) = h {
                if !(h > 0.0) {
                    return Err(CliError::Invalid(format!("{}: step must be positive", c.name)));
                }
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub lhs: Option<f64>,
    pub lhs_im: Option<f64>,
    pub rhs: Option<f64>,
    pub rhs_im: Option<f64>,
    pub abs_diff: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    /// Observed orders between successive refinement levels.
    pub trend: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub scenario: String,
    pub passed: usize,
    pub failed: usize,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.failed == 0
    }
}

/// Round to 15 significant digits.
pub fn sig15(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if !x.is_finite() {
        return x;
    }
    format!("{x:.14e}").parse().unwrap_or(x)
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then(|| sig15(x))
}

fn row(name: &str, lhs: Cplx, rhs: Cplx, tol: f64) -> Row {
    let d = (lhs - rhs).norm();
    Row {
        name: name.into(),
        lhs: finite(lhs.re),
        lhs_im: finite(lhs.im),
        rhs: finite(rhs.re),
        rhs_im: finite(rhs.im),
        abs_diff: finite(d),
        tolerance: sig15(tol),
        pass: d <= tol,
        trend: String::new(),
        note: String::new(),
    }
}

fn real(x: f64) -> Cplx {
    Cplx::new(x, 0.0)
}

fn failed_row(name: &str, tol: f64, note: String) -> Row {
    Row {
        name: name.into(),
        lhs: None,
        lhs_im: None,
        rhs: None,
        rhs_im: None,
        abs_diff: None,
        tolerance: sig15(tol),
        pass: false,
        trend: String::new(),
        note,
    }
}

fn trend(values: &[f64]) -> (String, f64) {
    let orders: Vec<f64> = values
        .windows(2)
        .map(|w| if w[1] == 0.0 { f64::INFINITY } else { (w[0] / w[1]).log2() })
        .collect();
    let s = orders
        .iter()
        .map(|o| if o.is_finite() { format!("{o:.3}") } else { "exact".into() })
        .collect::<Vec<_>>()
        .join(";");
    (s, orders.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Ladder row: pass if the finest value is within `tol` or every observed
/// order is at least 1.9.
fn ladder_row(name: &str, values: &[f64], tol: f64) -> Row {
    let last = *values.last().unwrap_or(&0.0);
    let mut r = row(name, real(last), Cplx::zero(), tol);
    let (t, min_order) = trend(values);
    r.trend = t;
    r.pass = last <= tol || (values.len() > 1 && min_order >= 1.9);
    r
}

// ------------------------------------------------------------------ evaluation

type Eval = Result<Vec<Row>, String>;

struct Ctx<'a> {
    base: &'a Path,
    levels: usize,
}

impl Ctx<'_> {
    fn family(&self, src: &FamilySource) -> Result<DiracFamily, String> {
        match src {
            FamilySource::Inline(d) => DiracFamily::from_descriptor(d).map_err(|e| e.to_string()),
            FamilySource::Path(p) => {
                let path = self.base.join(p);
                let s = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                DiracFamily::from_json(&s).map_err(|e| format!("{}: {e}", path.display()))
            }
        }
    }

    fn ladder(&self, h: f64) -> Vec<f64> {
        (0..=self.levels).map(|k| h / 2f64.powi(k as i32)).collect()
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn hermitian_from(fam: &DiracFamily, entries: &[PotentialEntry]) -> Result<CMat, String> {
    let d = FamilyDescriptor {
        m: fam.m,
        a: 0.0,
        n: fam.n_cut,
        potential: vec![],
        lambda_grid: vec![],
        directions: vec![DirectionEntry { da: 0.0, potential: entries.to_vec() }],
        chirality: vec![],
    };
    Ok(DiracFamily::from_descriptor(&d).map_err(s)?.matrix_derivative(0))
}

fn evaluate(check: &Check, ctx: &Ctx) -> Eval {
    use CheckKind::*;
    let (name, tol) = (check.name.as_str(), check.tol);
    let with_expected = |mut rows: Vec<Row>, lhs: Cplx, expected: Option<f64>| {
        if let Some(e) = expected {
            rows.push(row(&format!("{name}.expected"), lhs, real(e), tol));
        }
        rows
    };
    match &check.kind {
        WeightChange { operator, q1, q2, depth, expected } => {
            let (l, r) = ls::weight_change_defect(operator, q1, q2, *depth).map_err(s)?;
            let mut main = row(name, l, r, tol);
            main.note = "lhs: zeta route; rhs: residue of log-weight difference".into();
            Ok(with_expected(vec![main], l, *expected))
        }
        TrqRes { operator, weight, depth } => {
            let (l, r) = ls::trq_res_check(operator, weight, *depth).map_err(s)?;
            Ok(vec![row(name, l, r, tol)])
        }
        Cyclicity { a, b, weight, depth } => {
            let (l, r) = ls::cyclicity_defect(a, b, weight, *depth).map_err(s)?;
            Ok(vec![row(name, l, r, tol)])
        }
        WeightedTrace { operator, weight, expected } => {
            let zeta = ls::weighted_trace(operator, weight).map_err(s)?;
            let mut rows = vec![];
            if operator.is_differential() {
                let (heat, fit) = ls::weighted_trace_heat(operator, weight).map_err(s)?;
                let mut r = row(name, zeta, heat, tol);
                r.note = format!("lhs: zeta route; rhs: heat fit (residual {:.3e})", fit.residual);
                rows.push(r);
            }
            if let Some(e) = expected {
                rows.push(row(&format!("{name}.expected"), zeta, real(*e), tol));
            } else if rows.is_empty() {
                let mut r = row(name, zeta, zeta, tol);
                r.note = "zeta route only".into();
                rows.push(r);
            }
            Ok(rows)
        }
        ResidueCross { weight, s: sp, depth, expected } => {
            let op = ToeplitzOp::radial(Radial::Bracket { shift: weight.b, c: weight.c, s: *sp });
            let sym = symbol_calc::wodzicki_residue(&op.to_symbol(*depth).map_err(s)?).map_err(s)?;
            let germ = ls::canonical_trace_germ(&ToeplitzOp::radial(Radial::one()), weight, real(-*sp)).map_err(s)?;
            let zeta = germ.residue() * weight.order();
            let mut r = row(name, sym, zeta, tol);
            r.note = "lhs: symbol residue; rhs: q times zeta-function residue".into();
            Ok(with_expected(vec![r], sym, *expected))
        }
        Residue { operator, symbol, depth, expected } => {
            let sym: ClassicalSymbol = match (operator, symbol) {
                (Some(op), None) => op.to_symbol(*depth).map_err(s)?,
                (None, Some(p)) => {
                    let path = ctx.base.join(p);
                    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                    ClassicalSymbol::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?
                }
                _ => return Err("give exactly one of operator, symbol".into()),
            };
            let res = symbol_calc::wodzicki_residue(&sym).map_err(s)?;
            let mut r = row(name, res, expected.map_or(res, real), tol);
            r.note = "symbol residue".into();
            Ok(vec![r])
        }
        Eta { a } => {
            let rep = ls::eta_invariant(*a).map_err(s)?;
            let mut r = row(name, real(rep.closed_form), real(rep.numeric), tol);
            r.note = format!(
                "lhs: Hurwitz zeta(0,a)-zeta(0,1-a); rhs: erfc-sum fit over {} samples (residual {:.3e}); closed form 1-2a = {}",
                rep.samples.len(),
                rep.fit_residual,
                sig15(1.0 - 2.0 * (a - a.floor()))
            );
            Ok(vec![r])
        }
        ChernClosedness { family, lambda, b, j, h } => {
            let sc = Superconnection::from_family(ctx.family(family)?, *lambda);
            let jj = *j;
            let vals = ctx
                .ladder(*h)
                .into_iter()
                .map(|hk| {
                    let me = sc.clone();
                    let field = SampledField::unbounded(
                        sc.p(),
                        hk,
                        Arc::new(move |x: &[f64]| me.chern_form(x, jj).map_err(|e| FormError::Field(e.to_string()))),
                    );
                    field.d_at(b).map(|f| f.max_abs()).map_err(s)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(vec![ladder_row(name, &vals, tol)])
        }
        Getzler { family, lambda, b, j, t } => {
            let sc = Superconnection::from_family(ctx.family(family)?, *lambda);
            let (l, r) = sc.rescale_identity_check(b, *j, *t).map_err(s)?;
            let mut out = row(name, real(l.max_abs()), real(r.max_abs()), tol);
            out.abs_diff = finite(l.sub(&r).map_err(s)?.max_abs());
            out.pass = out.abs_diff.is_some_and(|d| d <= tol);
            out.note = "lhs/rhs: largest coefficient of each side; diff: degree-wise".into();
            Ok(vec![out])
        }
        GrassmannClosedness { family, window, b, j, h } => {
            let g = GrassmannFamily::window(ctx.family(family)?, window[0], window[1]).map_err(s)?;
            let vals = ctx
                .ladder(*h)
                .into_iter()
                .map(|hk| ga::closedness_defect(&g, b, *j, hk).map_err(s))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(vec![ladder_row(name, &vals, tol)])
        }
        HsIdentity { family, window, b } => {
            let g = GrassmannFamily::window(ctx.family(family)?, window[0], window[1]).map_err(s)?;
            let (l, r) = ga::hs_identity_check(&g, b).map_err(s)?;
            let mut out = row(name, real(l.max_abs()), real(r.max_abs()), tol);
            out.abs_diff = finite(l.sub(&r).map_err(s)?.max_abs());
            out.pass = out.abs_diff.is_some_and(|d| d <= tol);
            Ok(vec![out])
        }
        Cocycle { family, lambdas, b } => {
            let rep = ga::cocycle_check(&ctx.family(family)?, b, lambdas[0], lambdas[1], lambdas[2]).map_err(s)?;
            let mut rows: Vec<Row> = [
                ("additivity", rep.additivity),
                ("fp_trace", rep.fp_trace),
                ("fp_window", rep.fp_window),
                ("triple", rep.triple),
            ]
            .iter()
            .map(|(k, v)| row(&format!("{name}.{k}"), real(*v), Cplx::zero(), tol))
            .collect();
            for r in &mut rows {
                r.note = format!("window ranks {:?}", rep.ranks);
            }
            Ok(rows)
        }
        Gauge { family, window, b, x, y } => {
            let fam = ctx.family(family)?;
            let i = Cplx::new(0.0, 1.0);
            let xm = hermitian_from(&fam, x)? * i;
            let ym = hermitian_from(&fam, y)? * i;
            let g = GrassmannFamily::window(fam, window[0], window[1]).map_err(s)?;
            let p = g.projector(b).map_err(s)?;
            let (w2, dw1) = ga::gauge_orbit_trivialization(&p, &xm, &ym);
            Ok(vec![row(name, w2, dw1, tol)])
        }
        Locality { family, lambda, b, j, weight, site, value, h } => {
            let fam = ctx.family(family)?;
            let n = fam.dim();
            if site[0].unsigned_abs() as usize > fam.n_cut || site[1] < 0 || site[1] as usize >= fam.m {
                return Err(format!("site {site:?} outside the lattice"));
            }
            let idx = fam.index(site[0], site[1] as usize);
            let mut k = CMat::zeros(n, n);
            k[(idx, idx)] = real(*value);
            let depth = default_depth();
            let base = ga::defect_check(&fam, *lambda, b, *j, weight, depth, *h, None).map_err(s)?;
            let pert = ga::defect_check(&fam, *lambda, b, *j, weight, depth, *h, Some(&k)).map_err(s)?;
            let mut out = row(name, real(pert.lattice.max_abs()), real(base.lattice.max_abs()), tol);
            out.abs_diff = finite(pert.lattice.sub(&base.lattice).map_err(s)?.max_abs());
            out.pass = out.abs_diff.is_some_and(|d| d <= tol);
            out.note = format!("ord dF = {}", sig15(base.df_order));
            Ok(vec![out])
        }
        Transgression { lambda, grid, h, depth } => {
            let rep = superconn::transgression_check(*lambda, grid, *h, *depth).map_err(s)?;
            let hi = rep.rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
            let lo = rep.rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
            let mut out = row(name, real(hi), real(lo), tol);
            out.note = format!("constant {} over {} twists", sig15(rep.constant), rep.rows.len());
            Ok(vec![out])
        }
    }
}

/// Run every check of `scenario` that belongs to `suite`; rows sorted by name.
pub fn run_suite(scenario: &Scenario, suite: Suite, base: &Path, refine: Option<usize>) -> Report {
    let ctx = Ctx { base, levels: refine.or(scenario.refine).unwrap_or(3) };
    let mut rows: Vec<Row> = scenario
        .checks
        .par_iter()
        .filter(|c| c.kind.suites().contains(&suite))
        .flat_map_iter(|c| match evaluate(c, &ctx) {
            Ok(rows) => rows,
            Err(e) => vec![failed_row(&c.name, c.tol, format!("error: {e}"))],
        })
        .collect();
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    let passed = rows.iter().filter(|r| r.pass).count();
    Report { suite: suite.label().into(), scenario: scenario.name.clone(), passed, failed: rows.len() - passed, rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

pub fn emit(report: &Report, format: Format) -> Result<String, CliError> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(report).expect("report serializes") + "\n"),
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
            w.write_record(["name", "lhs", "lhs_im", "rhs", "rhs_im", "abs_diff", "tolerance", "pass", "trend", "note"])?;
            for r in &report.rows {
                w.serialize(r)?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv is utf-8"))
        }
    }
}

// ------------------------------------------------------------------ command line

#[derive(Debug, Parser)]
#[command(name = "spectrace", about = "Regularized traces, residues and anomaly cocycles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Scenario file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Refinement levels for step-size ladders.
    #[arg(long)]
    pub refine: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VerifyWhat {
    TraceDefects,
    Chern,
    Grassmann,
    Transgression,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ComputeWhat {
    Residue,
    Eta,
    WeightedTrace,
}

#[derive(Debug, clap::Subcommand)]
pub enum Command {
    /// Run a verification suite from a scenario file.
    Verify {
        what: VerifyWhat,
        #[command(flatten)]
        common: Common,
    },
    /// Compute quantities, from flags or a scenario file.
    Compute {
        what: ComputeWhat,
        /// Twist(s) for `eta`.
        #[arg(long)]
        a: Vec<f64>,
        /// Symbol file for `residue`.
        #[arg(long)]
        symbol: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn load(config: &Option<PathBuf>) -> Result<(Scenario, PathBuf), CliError> {
    match config {
        None => Ok((Scenario::default(), PathBuf::from("."))),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(p.display().to_string(), e))?;
            let sc = Scenario::from_json(&text, &p.display().to_string())?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((sc, base))
        }
    }
}

fn execute(cli: Cli) -> Result<(Report, Common), CliError> {
    match cli.command {
        Command::Verify { what, common } => {
            let suite = match what {
                VerifyWhat::TraceDefects => Suite::TraceDefects,
                VerifyWhat::Chern => Suite::Chern,
                VerifyWhat::Grassmann => Suite::Grassmann,
                VerifyWhat::Transgression => Suite::Transgression,
            };
            let (sc, base) = load(&common.config)?;
            Ok((run_suite(&sc, suite, &base, common.refine), common))
        }
        Command::Compute { what, a, symbol, tol, common } => {
            let (mut sc, base) = load(&common.config)?;
            let suite = match what {
                ComputeWhat::Residue => Suite::Residue,
                ComputeWhat::Eta => Suite::Eta,
                ComputeWhat::WeightedTrace => Suite::WeightedTrace,
            };
            if matches!(what, ComputeWhat::Eta) {
                for x in &a {
                    sc.checks.push(Check { name: format!("eta(a={x})"), tol, kind: CheckKind::Eta { a: *x } });
                }
            }
            if let (ComputeWhat::Residue, Some(p)) = (what, symbol) {
                let p = std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p);
                sc.checks.push(Check {
                    name: format!("res({})", p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()),
                    tol,
                    kind: CheckKind::Residue { operator: None, symbol: Some(p), depth: default_depth(), expected: None },
                });
            }
            Ok((run_suite(&sc, suite, &base, common.refine), common))
        }
    }
}

/// Entry point; returns the process exit status (0 all pass, 1 a check
/// failed, 2 usage/parse/io error).
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (report, common) = match execute(cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let text = match emit(&report, common.format) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match common.out {
        Some(p) => {
            if let Err(e) = std::fs::write(&p, text) {
                eprintln!("error: {}: {e}", p.display());
                return 2;
            }
        }
        None => print!("{text}"),
    }
    if report.all_pass() {
        0
    } else {
        1
    }
}
