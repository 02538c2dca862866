//! Config ingestion and the experiment drivers behind the command line.
//!
//! A config is a flat list of `section.key = value` lines; `#` starts a
//! comment. Lists are separated by `;` (vertices, expressions) or `,`
//! (numbers). Every run produces typed rows, their CSV rendering and a JSON
//! sidecar holding the resolved config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::assembly::P1Function;
use crate::error::{Error, Result};
use crate::expr::{parse_field, ScalarFieldExpr};
use crate::geometry::{refine_uniform, round_corners, triangulate_convex, Circle, ConvexDomain, Locator, Point, TriMesh};
use crate::quadrature::QuadratureContext;
use crate::regularity::{
    coefficients, curvature_identity_check, ellipticity_check, h2_estimate_dq, h2_estimate_recovery, h2_full_norm,
    integrability_split_report, p1_scaling_report, GridSpec, IdentityCheck, ScalingReport,
};
use crate::solver::{continuation_on_mesh, continuation_partial, validate_spec, DiscreteProblem, EpsRecord, ProblemSpec};
use crate::varexp::{log_holder_modulus, sample_pairs, ExponentField};

const KEYS: &[&str] = &[
    "domain.vertices",
    "domain.disk",
    "domain.corner_radius",
    "domain.arc_segments",
    "p.expr",
    "f.expr",
    "g.expr",
    "q.expr",
    "u.exact.expr",
    "eps.start",
    "eps.stop",
    "eps.factor",
    "mesh.h",
    "mesh.refinements",
    "newton.tol",
    "newton.max_iter",
    "s.exponent",
    "mollify.delta0",
    "output.path",
    "seed",
    "sweep.p1",
    "sweep.radii",
    "identity.functions",
    "identity.quadrature",
];

/// Parsed and defaulted experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub domain: Option<ConvexDomain>,
    pub p: Option<ScalarFieldExpr>,
    pub f: Option<ScalarFieldExpr>,
    pub g: Option<ScalarFieldExpr>,
    pub q: ScalarFieldExpr,
    pub u_exact: Option<ScalarFieldExpr>,
    pub eps_start: f64,
    pub eps_stop: f64,
    pub eps_factor: f64,
    pub mesh_h: f64,
    pub mesh_refinements: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub s_exponent: f64,
    pub mollify_delta0: Option<f64>,
    pub output_path: Option<PathBuf>,
    pub seed: u64,
    pub p1_values: Vec<f64>,
    pub radii: Vec<f64>,
    pub identity_functions: Vec<ScalarFieldExpr>,
    pub identity_quadrature: usize,
    raw: BTreeMap<String, String>,
}

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {}", key, msg))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| cfg_err(key, format!("cannot parse {:?}: {}", v, e)))
}

fn num_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

fn field(key: &str, v: &str) -> Result<ScalarFieldExpr> {
    parse_field(v).map_err(|e| cfg_err(key, e))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {}", n + 1, k)));
            }
            if raw.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {}", n + 1, k)));
            }
        }
        Self::from_map(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn from_map(raw: BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| raw.get(k).map(String::as_str);
        let domain = match (get("domain.vertices"), get("domain.disk")) {
            (Some(_), Some(_)) => return Err(Error::Config("domain.vertices and domain.disk are mutually exclusive".into())),
            (Some(v), None) => {
                let mut pts = Vec::new();
                for s in v.split(';').filter(|s| !s.trim().is_empty()) {
                    let c = num_list("domain.vertices", s)?;
                    if c.len() != 2 {
                        return Err(cfg_err("domain.vertices", format!("vertex {:?} is not `x,y`", s.trim())));
                    }
                    pts.push([c[0], c[1]]);
                }
                let mut d = ConvexDomain::polygon(pts).map_err(|e| cfg_err("domain.vertices", e))?;
                if let Some(n) = get("domain.arc_segments") {
                    d = d.with_arc_segments(num("domain.arc_segments", n)?).map_err(|e| cfg_err("domain.arc_segments", e))?;
                }
                if let Some(r) = get("domain.corner_radius") {
                    let r: f64 = num("domain.corner_radius", r)?;
                    if r > 0.0 {
                        d = round_corners(&d, r).map_err(|e| cfg_err("domain.corner_radius", e))?;
                    }
                }
                Some(d)
            }
            (None, Some(v)) => {
                let c = num_list("domain.disk", v)?;
                if c.len() != 4 || c[3].fract() != 0.0 {
                    return Err(cfg_err("domain.disk", "expected `cx, cy, radius, segments`"));
                }
                Some(ConvexDomain::disk([c[0], c[1]], c[2], c[3] as usize).map_err(|e| cfg_err("domain.disk", e))?)
            }
            (None, None) => None,
        };
        let opt_field = |k: &str| get(k).map(|v| field(k, v)).transpose();
        let or = |k: &str, d: f64| get(k).map_or(Ok(d), |v| num(k, v));
        let identity_functions = match get("identity.functions") {
            Some(v) => v.split(';').filter(|s| !s.trim().is_empty()).map(|s| field("identity.functions", s)).collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(ExperimentConfig {
            domain,
            p: opt_field("p.expr")?,
            f: opt_field("f.expr")?,
            g: opt_field("g.expr")?,
            q: opt_field("q.expr")?.unwrap_or_else(|| ScalarFieldExpr::constant(4.0)),
            u_exact: opt_field("u.exact.expr")?,
            eps_start: or("eps.start", 1.0)?,
            eps_stop: or("eps.stop", 1e-6)?,
            eps_factor: or("eps.factor", 10f64.powf(-0.5))?,
            mesh_h: or("mesh.h", 0.1)?,
            mesh_refinements: get("mesh.refinements").map_or(Ok(4), |v| num("mesh.refinements", v))?,
            newton_tol: or("newton.tol", 1e-10)?,
            newton_max_iter: get("newton.max_iter").map_or(Ok(50), |v| num("newton.max_iter", v))?,
            s_exponent: or("s.exponent", 0.5)?,
            mollify_delta0: get("mollify.delta0").map(|v| num("mollify.delta0", v)).transpose()?,
            output_path: get("output.path").map(PathBuf::from),
            seed: get("seed").map_or(Ok(0), |v| num("seed", v))?,
            p1_values: get("sweep.p1").map_or(Ok(Vec::new()), |v| num_list("sweep.p1", v))?,
            radii: get("sweep.radii").map_or(Ok(Vec::new()), |v| num_list("sweep.radii", v))?,
            identity_functions,
            identity_quadrature: get("identity.quadrature").map_or(Ok(32), |v| num("identity.quadrature", v))?,
            raw,
        })
    }

    /// Keys as written, followed by the defaults that were applied.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut out = self.raw.clone();
        let defaults = [
            ("q.expr", self.q.to_string()),
            ("eps.start", self.eps_start.to_string()),
            ("eps.stop", self.eps_stop.to_string()),
            ("eps.factor", self.eps_factor.to_string()),
            ("mesh.h", self.mesh_h.to_string()),
            ("mesh.refinements", self.mesh_refinements.to_string()),
            ("newton.tol", self.newton_tol.to_string()),
            ("newton.max_iter", self.newton_max_iter.to_string()),
            ("s.exponent", self.s_exponent.to_string()),
            ("seed", self.seed.to_string()),
            ("identity.quadrature", self.identity_quadrature.to_string()),
        ];
        for (k, v) in defaults {
            out.entry(k.to_string()).or_insert(v);
        }
        out
    }

    fn require<'a, T>(&self, key: &str, v: &'a Option<T>) -> Result<&'a T> {
        v.as_ref().ok_or_else(|| Error::Config(format!("missing required key {}", key)))
    }

    pub fn domain(&self) -> Result<&ConvexDomain> {
        self.domain.as_ref().ok_or_else(|| Error::Config("missing required key domain.vertices (or domain.disk)".into()))
    }

    /// Problem with `p` from `p.expr`.
    pub fn spec(&self) -> Result<ProblemSpec> {
        let dom = self.domain()?;
        let p = ExponentField::new(self.require("p.expr", &self.p)?.clone(), dom)?;
        self.spec_with(dom.clone(), p)
    }

    /// Problem on `dom` with the given exponent; `f.expr` and `g.expr` are required.
    pub fn spec_with(&self, dom: ConvexDomain, p: ExponentField) -> Result<ProblemSpec> {
        let f = self.require("f.expr", &self.f)?.clone();
        let g = self.require("g.expr", &self.g)?.clone();
        let mut s = ProblemSpec::new(dom, p, f, g);
        s.q = self.q.clone();
        s.eps_start = self.eps_start;
        s.eps_stop = self.eps_stop;
        s.eps_factor = self.eps_factor;
        s.mesh_h = self.mesh_h;
        s.newton_tol = self.newton_tol;
        s.newton_max_iter = self.newton_max_iter;
        s.s_exponent = self.s_exponent;
        s.mollify_delta0 = self.mollify_delta0;
        s.check()?;
        Ok(s)
    }
}

/// Rayon pool sized by `PLAPX_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PLAPX_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("PLAPX_THREADS must be an integer, got {:?}", v)))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {}", e)))
}

/// Rows of one run with their CSV rendering and run metadata.
#[derive(Debug, Clone)]
pub struct Run<R> {
    pub command: &'static str,
    pub rows: Vec<R>,
    pub csv: String,
    pub summary: Value,
    pub warnings: Vec<String>,
    pub mesh: Option<Arc<TriMesh>>,
}

fn to_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

impl<R: Serialize> Run<R> {
    fn new(command: &'static str, rows: Vec<R>, summary: Value, warnings: Vec<String>, mesh: Option<Arc<TriMesh>>) -> Result<Self> {
        let csv = to_csv(&rows)?;
        Ok(Run { command, rows, csv, summary, warnings, mesh })
    }

    pub fn sidecar(&self, cfg: &ExperimentConfig) -> Value {
        json!({
            "tool": "plapx",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": cfg.resolved(),
            "rows": self.rows.len(),
            "warnings": self.warnings,
            "summary": self.summary,
        })
    }

    /// Writes the CSV to `path` and the sidecar next to it with extension `json`.
    pub fn write(&self, cfg: &ExperimentConfig, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &self.csv)?;
        let side = path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.sidecar(cfg)).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(&side, text + "\n")?;
        Ok(side)
    }
}

fn status(r: &Result<impl Sized>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => format!("failed: {}", e),
    }
}

/// One CSV row per `ε`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    pub newton_iterations: Option<usize>,
    pub final_residual: Option<f64>,
    pub energy: Option<f64>,
    pub grad_lp_norm: Option<f64>,
    pub h2_dq: Option<f64>,
    pub h2_recovery: Option<f64>,
    #[serde(rename = "meas_A1")]
    pub meas_a1: Option<f64>,
    #[serde(rename = "meas_A2")]
    pub meas_a2: Option<f64>,
    #[serde(rename = "meas_Omega1")]
    pub meas_omega1: Option<f64>,
    pub log_bound_ratio: Option<f64>,
    pub status: String,
}

impl From<&EpsRecord> for EpsRow {
    fn from(r: &EpsRecord) -> Self {
        EpsRow {
            eps: r.eps,
            newton_iterations: Some(r.newton_iterations),
            final_residual: Some(r.final_residual),
            energy: Some(r.energy),
            grad_lp_norm: Some(r.grad_lp_norm),
            h2_dq: Some(r.h2_dq),
            h2_recovery: Some(r.h2_recovery),
            meas_a1: Some(r.meas_a1),
            meas_a2: Some(r.meas_a2),
            meas_omega1: Some(r.meas_omega1),
            log_bound_ratio: Some(r.log_bound_ratio),
            status: "ok".into(),
        }
    }
}

fn failed_eps_row(eps: f64, e: &Error) -> EpsRow {
    EpsRow {
        eps,
        newton_iterations: None,
        final_residual: None,
        energy: None,
        grad_lp_norm: None,
        h2_dq: None,
        h2_recovery: None,
        meas_a1: None,
        meas_a2: None,
        meas_omega1: None,
        log_bound_ratio: None,
        status: format!("failed: {}", e),
    }
}

fn spread(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

/// `max/min - 1` of `h2` over records with `ε <= 100 ε_stop`.
fn final_decades_variation(rows: &[EpsRow], eps_stop: f64, pick: impl Fn(&EpsRow) -> Option<f64>) -> Option<f64> {
    let (lo, hi) = spread(rows.iter().filter(|r| r.eps <= 100.0 * eps_stop * (1.0 + 1e-9)).filter_map(&pick));
    (lo.is_finite() && lo > 0.0).then(|| hi / lo - 1.0)
}

fn eps_summary(rows: &[EpsRow], eps_stop: f64) -> Value {
    let (lo, hi) = spread(rows.iter().filter_map(|r| r.grad_lp_norm));
    json!({
        "grad_lp_norm_ratio": if lo > 0.0 { hi / lo } else { f64::NAN },
        "h2_dq_final_two_decades_variation": final_decades_variation(rows, eps_stop, |r| r.h2_dq),
        "h2_recovery_final_two_decades_variation": final_decades_variation(rows, eps_stop, |r| r.h2_recovery),
        "completed": rows.iter().all(|r| r.status == "ok"),
    })
}

/// Continuation over the configured schedule; a failing `ε` ends the sweep
/// with a failed row.
pub fn run_eps_sweep(cfg: &ExperimentConfig) -> Result<Run<EpsRow>> {
    let spec = cfg.spec()?;
    let warnings: Vec<String> = validate_spec(&spec)?.iter().map(|w| w.to_string()).collect();
    let mesh = Arc::new(triangulate_convex(&spec.domain, spec.mesh_h)?);
    let dp = DiscreteProblem::new(&spec, mesh.clone())?;
    let (report, err) = continuation_partial(&dp);
    let mut rows: Vec<EpsRow> = report.records.iter().map(EpsRow::from).collect();
    if let Some(e) = err {
        let eps = match &e {
            Error::AtEps { eps, .. } => *eps,
            _ => f64::NAN,
        };
        rows.push(failed_eps_row(eps, &e));
    }
    let summary = eps_summary(&rows, spec.eps_stop);
    Run::new("sweep-eps", rows, summary, warnings, Some(mesh))
}

/// Full continuation plus pointwise diagnostics at the final `ε`. Solver
/// errors are returned, not recorded.
pub fn run_solve(cfg: &ExperimentConfig) -> Result<Run<EpsRow>> {
    let spec = cfg.spec()?;
    let mut warnings: Vec<String> = validate_spec(&spec)?.iter().map(|w| w.to_string()).collect();
    let mesh = Arc::new(triangulate_convex(&spec.domain, spec.mesh_h)?);
    let report = continuation_on_mesh(&spec, mesh.clone())?;
    let u = report.final_solution()?;
    let eps = spec.eps_stop;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = spec.domain.bounding_box();
    let mut pts = Vec::new();
    while pts.len() < 500 {
        let x = [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])];
        if spec.domain.contains(x) {
            pts.push(x);
        }
    }
    let samples = coefficients(&u, &spec.p, &spec.f, eps, &pts)?;
    let ell = ellipticity_check(&samples, spec.p.p1(), spec.p.p2(), 4, &mut rng);
    let split = match integrability_split_report(&u, &spec.p, &spec.f, &spec.q, eps) {
        Ok(s) => serde_json::to_value(s).unwrap_or(Value::Null),
        Err(e) => {
            warnings.push(format!("integrability split skipped: {}", e));
            Value::Null
        }
    };
    let rows: Vec<EpsRow> = report.records.iter().map(EpsRow::from).collect();
    let mut summary = eps_summary(&rows, spec.eps_stop);
    summary["ellipticity"] = serde_json::to_value(ell).unwrap_or(Value::Null);
    summary["integrability_split"] = split;
    summary["h2_full_norm"] = json!(h2_full_norm(&u));
    summary["mesh"] = json!({ "vertices": mesh.num_vertices(), "triangles": mesh.num_triangles(), "h": mesh.h });
    Run::new("solve", rows, summary, warnings, Some(mesh))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub h: f64,
    pub vertices: usize,
    #[serde(rename = "L2_error")]
    pub l2_error: Option<f64>,
    #[serde(rename = "H1_error")]
    pub h1_error: Option<f64>,
    #[serde(rename = "L2_order")]
    pub l2_order: Option<f64>,
    #[serde(rename = "H1_order")]
    pub h1_order: Option<f64>,
    pub status: String,
}

/// `‖u_h - u‖_{L²}` and `‖∇(u_h - u)‖_{L²}` by the degree-4 rule.
pub fn errors_against(u: &P1Function, exact: &ScalarFieldExpr) -> Result<(f64, f64)> {
    let [ex, ey] = exact.gradient()?;
    let q = QuadratureContext::new(u.mesh().clone());
    let (mut l2, mut h1) = (0.0, 0.0);
    for qp in q.points() {
        let (x, y) = (qp.x[0], qp.x[1]);
        let d = u.gradient(qp.element);
        l2 += qp.weight * (u.value_in(qp.element, qp.bary) - exact.eval(x, y)?).powi(2);
        h1 += qp.weight * ((d[0] - ex.eval(x, y)?).powi(2) + (d[1] - ey.eval(x, y)?).powi(2));
    }
    Ok((l2.sqrt(), h1.sqrt()))
}

fn order(e0: Option<f64>, e1: Option<f64>, h0: f64, h1: f64) -> Option<f64> {
    match (e0, e1) {
        (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some((a / b).ln() / (h0 / h1).ln()),
        _ => None,
    }
}

/// Manufactured-solution study over `mesh.refinements` uniform refinements.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Run<ConvergenceRow>> {
    let exact = cfg.require("u.exact.expr", &cfg.u_exact)?.clone();
    let spec = cfg.spec()?;
    let warnings: Vec<String> = validate_spec(&spec)?.iter().map(|w| w.to_string()).collect();
    let mut meshes = vec![Arc::new(triangulate_convex(&spec.domain, spec.mesh_h)?)];
    for _ in 0..cfg.mesh_refinements {
        let next = refine_uniform(meshes.last().expect("nonempty"));
        meshes.push(Arc::new(next));
    }
    let pool = thread_pool()?;
    let results: Vec<Result<(f64, f64)>> = pool.install(|| {
        meshes
            .par_iter()
            .map(|m| {
                let rep = continuation_on_mesh(&spec, m.clone())?;
                errors_against(&rep.final_solution()?, &exact)
            })
            .collect()
    });
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for (level, (m, r)) in meshes.iter().zip(&results).enumerate() {
        let (l2, h1) = match r {
            Ok((a, b)) => (Some(*a), Some(*b)),
            Err(_) => (None, None),
        };
        let (l2_order, h1_order) = match rows.last() {
            Some(prev) => (order(prev.l2_error, l2, prev.h, m.h), order(prev.h1_error, h1, prev.h, m.h)),
            None => (None, None),
        };
        rows.push(ConvergenceRow { level, h: m.h, vertices: m.num_vertices(), l2_error: l2, h1_error: h1, l2_order, h1_order, status: status(r) });
    }
    let last = rows.last().expect("at least one level");
    let summary = json!({
        "final_L2_order": last.l2_order,
        "final_H1_order": last.h1_order,
        "L2_strictly_decreasing": rows.windows(2).all(|w| matches!((w[0].l2_error, w[1].l2_error), (Some(a), Some(b)) if b < a)),
    });
    Run::new("convergence", rows, summary, warnings, Some(meshes[0].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct P1Row {
    pub p1: f64,
    pub log_inv_p1_minus_1: f64,
    pub h2_recovery: Option<f64>,
    pub h2_dq: Option<f64>,
    pub h2_full: Option<f64>,
    pub newton_iterations: Option<usize>,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct P1Sweep {
    /// Fit of the recovered-gradient seminorm.
    pub recovery: Option<ScalingReport>,
    pub dq: Option<ScalingReport>,
    pub full: Option<ScalingReport>,
}

/// Constant exponents `p ≡ p1` over `sweep.p1` on one mesh, with the scaling fits.
pub fn run_p1_sweep(cfg: &ExperimentConfig) -> Result<(Run<P1Row>, P1Sweep)> {
    if cfg.p1_values.is_empty() {
        return Err(Error::Config("sweep.p1 must list at least one value".into()));
    }
    let dom = cfg.domain()?.clone();
    let mut warnings = Vec::new();
    if cfg.p.is_some() {
        warnings.push("p.expr is ignored by the p1 sweep; each member uses p constant".into());
    }
    let specs: Vec<ProblemSpec> = cfg
        .p1_values
        .iter()
        .map(|&p1| cfg.spec_with(dom.clone(), ExponentField::constant(p1)?))
        .collect::<Result<_>>()?;
    let mesh = Arc::new(triangulate_convex(&dom, cfg.mesh_h)?);
    let grid = GridSpec::centered(&dom, 0.5 * mesh.h)?;
    let pool = thread_pool()?;
    let results: Vec<Result<(f64, f64, f64, usize)>> = pool.install(|| {
        specs
            .par_iter()
            .map(|s| {
                let rep = continuation_on_mesh(s, mesh.clone())?;
                let u = rep.final_solution()?;
                let its = rep.stats.iter().map(|s| s.iterations).sum();
                Ok((h2_estimate_recovery(&u), h2_estimate_dq(&u, &dom, &grid)?.value, h2_full_norm(&u), its))
            })
            .collect()
    });
    let rows: Vec<P1Row> = cfg
        .p1_values
        .iter()
        .zip(&results)
        .map(|(&p1, r)| {
            let ok = r.as_ref().ok();
            P1Row {
                p1,
                log_inv_p1_minus_1: (1.0 / (p1 - 1.0)).ln(),
                h2_recovery: ok.map(|v| v.0),
                h2_dq: ok.map(|v| v.1),
                h2_full: ok.map(|v| v.2),
                newton_iterations: ok.map(|v| v.3),
                status: status(r),
            }
        })
        .collect();
    let good: Vec<&P1Row> = rows.iter().filter(|r| r.status == "ok").collect();
    let fit = |pick: fn(&P1Row) -> Option<f64>, name: &str, warnings: &mut Vec<String>| {
        let p: Vec<f64> = good.iter().map(|r| r.p1).collect();
        let v: Vec<f64> = good.iter().filter_map(|r| pick(r)).collect();
        match p1_scaling_report(&p, &v) {
            Ok(rep) => {
                if let Some(w) = &rep.warning {
                    warnings.push(format!("{} fit: {}", name, w));
                }
                Some(rep)
            }
            Err(e) => {
                warnings.push(format!("{} fit unavailable: {}", name, e));
                None
            }
        }
    };
    let sweep = P1Sweep {
        recovery: fit(|r| r.h2_recovery, "recovery", &mut warnings),
        dq: fit(|r| r.h2_dq, "difference quotient", &mut warnings),
        full: fit(|r| r.h2_full, "full norm", &mut warnings),
    };
    let summary = serde_json::to_value(&sweep).unwrap_or(Value::Null);
    Ok((Run::new("sweep-p1", rows, summary, warnings, Some(mesh))?, sweep))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainRow {
    pub level: usize,
    pub radius: f64,
    pub area: f64,
    pub area_deficit: f64,
    /// Area lost to exact circular arcs; `(4 - π) r²` for a square.
    pub deficit_smooth: f64,
    pub h2_recovery: Option<f64>,
    pub h2_dq: Option<f64>,
    pub h1_distance: Option<f64>,
    pub status: String,
}

/// Interior `H¹` distance between two P1 functions on the rectangle `[lo, hi]`,
/// integrated over the elements of `a` whose centroid lies in the window.
pub fn window_h1_distance(a: &P1Function, b: &P1Function, lo: Point, hi: Point) -> Result<f64> {
    let q = QuadratureContext::new(a.mesh().clone());
    let loc = Locator::new(b.mesh());
    let inside = |x: Point| x[0] >= lo[0] && x[0] <= hi[0] && x[1] >= lo[1] && x[1] <= hi[1];
    let mut s = 0.0;
    for t in 0..a.mesh().num_triangles() {
        let v = a.mesh().vertices_of(t);
        let c = [(v[0][0] + v[1][0] + v[2][0]) / 3.0, (v[0][1] + v[1][1] + v[2][1]) / 3.0];
        if !inside(c) {
            continue;
        }
        let ga = a.gradient(t);
        for qp in q.element_points(t) {
            let (tb, bb) = loc.locate(qp.x)?;
            let gb = b.gradient(tb);
            let d = a.value_in(t, qp.bary) - b.value_in(tb, bb);
            s += qp.weight * (d * d + (ga[0] - gb[0]).powi(2) + (ga[1] - gb[1]).powi(2));
        }
    }
    Ok(s.sqrt())
}

/// Smooth-corner area deficit `r² ∑ (tan(θ_i/2) - θ_i/2)` for exterior angles `θ_i`.
pub fn smooth_corner_deficit(base: &ConvexDomain, r: f64) -> f64 {
    let v = base.vertices();
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b, c) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
        let d1 = [b[0] - a[0], b[1] - a[1]];
        let d2 = [c[0] - b[0], c[1] - b[1]];
        let th = (d1[0] * d2[1] - d1[1] * d2[0]).atan2(d1[0] * d2[0] + d1[1] * d2[1]);
        s += (0.5 * th).tan() - 0.5 * th;
    }
    r * r * s
}

/// Solves on the rounded domains `Ω_m` for `r_m` in `sweep.radii`.
pub fn run_domain_sweep(cfg: &ExperimentConfig) -> Result<Run<DomainRow>> {
    if cfg.radii.is_empty() {
        return Err(Error::Config("sweep.radii must list at least one radius".into()));
    }
    let base = cfg.domain()?;
    if base.corner_radius() > 0.0 || base.circle().is_some() {
        return Err(Error::Config("the domain sweep needs a polygon without rounded corners".into()));
    }
    let p_expr = cfg.require("p.expr", &cfg.p)?.clone();
    let specs: Vec<ProblemSpec> = cfg
        .radii
        .iter()
        .map(|&r| {
            let dom = round_corners(base, r).map_err(|e| cfg_err("sweep.radii", e))?;
            let p = ExponentField::new(p_expr.clone(), &dom)?;
            cfg.spec_with(dom, p)
        })
        .collect::<Result<_>>()?;
    let grid = GridSpec::centered_fraction(base, 0.5 * cfg.mesh_h, 0.5)?;
    let lo = grid.origin;
    let hi = grid.point(grid.nx - 1, grid.ny - 1);
    let pool = thread_pool()?;
    let sols: Vec<Result<(P1Function, usize)>> = pool.install(|| {
        specs
            .par_iter()
            .map(|s| {
                let mesh = Arc::new(triangulate_convex(&s.domain, s.mesh_h)?);
                let rep = continuation_on_mesh(s, mesh)?;
                Ok((rep.final_solution()?, rep.records.len()))
            })
            .collect()
    });
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (m, (s, sol)) in specs.iter().zip(&sols).enumerate() {
        let r = cfg.radii[m];
        let area = s.domain.area();
        let (h2r, h2d, dist) = match sol {
            Ok((u, _)) => {
                let d = match (m, sols.get(m.wrapping_sub(1))) {
                    (0, _) => None,
                    (_, Some(Ok((prev, _)))) => Some(window_h1_distance(u, prev, lo, hi)?),
                    _ => None,
                };
                let dq = match h2_estimate_dq(u, &s.domain, &grid) {
                    Ok(e) => Some(e.value),
                    Err(e) => {
                        warnings.push(format!("level {}: {}", m, e));
                        None
                    }
                };
                (Some(h2_estimate_recovery(u)), dq, d)
            }
            Err(_) => (None, None, None),
        };
        rows.push(DomainRow {
            level: m,
            radius: r,
            area,
            area_deficit: base.area() - area,
            deficit_smooth: smooth_corner_deficit(base, r),
            h2_recovery: h2r,
            h2_dq: h2d,
            h1_distance: dist,
            status: status(sol),
        });
    }
    let (lo2, hi2) = spread(rows.iter().filter_map(|r| r.h2_recovery));
    let d: Vec<f64> = rows.iter().filter_map(|r| r.h1_distance).collect();
    let summary = json!({
        "h2_recovery_max_over_min": if lo2 > 0.0 { hi2 / lo2 } else { f64::NAN },
        "h1_distances_strictly_decreasing": d.len() + 1 == rows.len() && d.windows(2).all(|w| w[1] < w[0]),
        "window": { "lo": lo, "hi": hi },
    });
    Run::new("sweep-domain", rows, summary, warnings, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityRow {
    pub function: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
}

/// Default functions vanishing on the unit circle.
pub const DEFAULT_IDENTITY_FUNCTIONS: [&str; 3] =
    ["1 - x^2 - y^2", "(1 - x^2 - y^2)*exp(x)", "(1 - x^2 - y^2)*(1 + x*y + y^3)"];

/// Boundary identity on the configured disk (the unit disk by default).
pub fn run_identity_check(cfg: &ExperimentConfig) -> Result<Run<IdentityRow>> {
    let disk = match &cfg.domain {
        None => Circle { center: [0.0, 0.0], radius: 1.0 },
        Some(d) => d.circle().ok_or_else(|| Error::Config("the identity check needs domain.disk".into()))?,
    };
    let funcs = if cfg.identity_functions.is_empty() {
        DEFAULT_IDENTITY_FUNCTIONS.iter().map(|s| parse_field(s).map_err(Error::from)).collect::<Result<Vec<_>>>()?
    } else {
        cfg.identity_functions.clone()
    };
    let rows: Vec<IdentityRow> = funcs
        .iter()
        .map(|u| {
            let IdentityCheck { lhs, rhs, abs_err } = curvature_identity_check(u, disk, cfg.identity_quadrature)?;
            Ok(IdentityRow { function: u.to_string(), lhs, rhs, abs_err })
        })
        .collect::<Result<_>>()?;
    let max_err = rows.iter().fold(0.0f64, |m, r| m.max(r.abs_err));
    Run::new("check-identity", rows, json!({ "max_abs_err": max_err }), Vec::new(), None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    pub p1: f64,
    pub p2: f64,
    pub lipschitz: f64,
    pub log_holder_modulus: f64,
    pub warnings: usize,
}

/// Data hypotheses and exponent regularity, without solving.
pub fn run_validate(cfg: &ExperimentConfig) -> Result<Run<ValidationRow>> {
    let spec = cfg.spec()?;
    let warnings: Vec<String> = validate_spec(&spec)?.iter().map(|w| w.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = sample_pairs(&spec.domain, 2000, &mut rng);
    let row = ValidationRow {
        p1: spec.p.p1(),
        p2: spec.p.p2(),
        lipschitz: spec.p.lip(),
        log_holder_modulus: log_holder_modulus(&spec.p, &pairs)?,
        warnings: warnings.len(),
    };
    Run::new("validate", vec![row], json!({ "eps_schedule": spec.eps_schedule() }), warnings, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQUARE: &str = "domain.vertices = 0,0; 1,0; 1,1; 0,1\n";

    #[test]
    fn parses_keys_comments_and_defaults() {
        let cfg = ExperimentConfig::parse(&format!("{}# comment\np.expr = 2 - 0.5*x  # trailing\nf.expr = 1\ng.expr = 0\nseed = 7\n", SQUARE)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.p.as_ref().unwrap().eval(1.0, 0.0).unwrap(), 1.5);
        assert_eq!(cfg.eps_stop, 1e-6);
        let r = cfg.resolved();
        assert_eq!(r["seed"], "7");
        assert_eq!(r["mesh.refinements"], "4");
        assert!(cfg.spec().is_ok());
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let e = ExperimentConfig::parse("mesh.hh = 0.1").unwrap_err();
        assert!(e.to_string().contains("mesh.hh"));
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("seed 1").is_err());
        let e = ExperimentConfig::parse("eps.stop = abc").unwrap_err();
        assert!(e.to_string().contains("eps.stop"));
        let e = ExperimentConfig::parse("p.expr = foo(x)").unwrap_err();
        assert!(e.to_string().contains("p.expr"));
    }

    #[test]
    fn missing_required_keys_are_named() {
        let cfg = ExperimentConfig::parse(&format!("{}p.expr = 2\nf.expr = 1\n", SQUARE)).unwrap();
        assert!(cfg.spec().unwrap_err().to_string().contains("g.expr"));
        let cfg = ExperimentConfig::parse("p.expr = 2\nf.expr = 1\ng.expr = 0").unwrap();
        assert!(cfg.spec().unwrap_err().to_string().contains("domain"));
        let cfg = ExperimentConfig::parse(&format!("{}p.expr = 2\nf.expr = 1\ng.expr = 0\n", SQUARE)).unwrap();
        assert!(run_convergence(&cfg).unwrap_err().to_string().contains("u.exact.expr"));
        assert!(matches!(run_p1_sweep(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn p2_eps_sweep_has_constant_h2_and_decreasing_eps() {
        let cfg = ExperimentConfig::parse(&format!("{}p.expr = 2\nf.expr = 1\ng.expr = 0\nmesh.h = 0.2\neps.stop = 1e-4\n", SQUARE)).unwrap();
        let run = run_eps_sweep(&cfg).unwrap();
        assert_eq!(run.rows.len(), 9);
        assert!(run.rows.windows(2).all(|w| w[1].eps < w[0].eps));
        let h = run.rows[0].h2_recovery.unwrap();
        let d = run.rows[0].h2_dq.unwrap();
        for r in &run.rows {
            assert!((r.h2_recovery.unwrap() - h).abs() <= 1e-10 * h);
            assert!((r.h2_dq.unwrap() - d).abs() <= 1e-10 * d);
            assert_eq!(r.status, "ok");
        }
        let header = run.csv.lines().next().unwrap();
        assert_eq!(
            header,
            "eps,newton_iterations,final_residual,energy,grad_lp_norm,h2_dq,h2_recovery,meas_A1,meas_A2,meas_Omega1,log_bound_ratio,status"
        );
    }

    #[test]
    fn failed_levels_become_rows() {
        let cfg = ExperimentConfig::parse(&format!(
            "{}p.expr = 1.05\nf.expr = 50\ng.expr = 0\nmesh.h = 0.25\nnewton.max_iter = 1\neps.stop = 1e-2\n",
            SQUARE
        ))
        .unwrap();
        let run = run_eps_sweep(&cfg).unwrap();
        let last = run.rows.last().unwrap();
        assert!(last.status.starts_with("failed"), "{:?}", run.rows);
        assert!(last.energy.is_none());
    }

    #[test]
    fn sidecar_embeds_config() {
        let cfg = ExperimentConfig::parse("identity.quadrature = 12").unwrap();
        let run = run_identity_check(&cfg).unwrap();
        assert_eq!(run.rows.len(), 3);
        let s = run.sidecar(&cfg);
        assert_eq!(s["config"]["identity.quadrature"], "12");
        assert_eq!(s["command"], "check-identity");
        assert!((run.rows[0].lhs + 4.0 * std::f64::consts::PI).abs() < 1e-10);
    }

    #[test]
    fn smooth_deficit_of_square_is_four_minus_pi() {
        let d = smooth_corner_deficit(&ConvexDomain::unit_square(), 0.1);
        assert!((d - (4.0 - std::f64::consts::PI) * 0.01).abs() < 1e-15);
    }

    #[test]
    fn window_distance_of_equal_functions_is_zero() {
        let mesh = Arc::new(triangulate_convex(&ConvexDomain::unit_square(), 0.1).unwrap());
        let other = Arc::new(triangulate_convex(&ConvexDomain::unit_square(), 0.07).unwrap());
        let a = P1Function::interpolate_fn(mesh, |x| 2.0 * x[0] + x[1]);
        let b = P1Function::interpolate_fn(other, |x| 2.0 * x[0] + x[1]);
        assert!(window_h1_distance(&a, &b, [0.25, 0.25], [0.75, 0.75]).unwrap() < 1e-12);
        let c = P1Function::interpolate_fn(a.mesh().clone(), |x| 2.0 * x[0] + x[1] + 1.0);
        let d = window_h1_distance(&c, &b, [0.0, 0.0], [1.0, 1.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }
}
