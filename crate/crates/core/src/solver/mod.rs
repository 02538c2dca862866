//! Damped Newton for the regularized problem and continuation in `ε`.

pub mod linear;

use std::borrow::Cow;
use std::sync::Arc;

use log::{debug, warn};
use serde::Serialize;

use crate::assembly::{
    apply_dirichlet, jacobian, merit, residual, DirichletReduction, Linearization, NodeData, P1Function, P1Space,
};
use crate::error::{Error, NewtonFailure, Result};
use crate::expr::ScalarFieldExpr;
use crate::geometry::{triangulate_convex, ConvexDomain, TriMesh};
use crate::regularity::{self, GridSpec};
use crate::varexp::{luxemburg_norm_values, mollify_exponent, ExponentField};

pub use linear::linear_solve;

/// Maximal number of step halvings in the line search.
pub const MAX_HALVINGS: usize = 30;
/// Kačanov sweeps attempted after Newton stalls.
pub const KACANOV_ITERATIONS: usize = 50;

/// Everything that defines one regularized Dirichlet problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub domain: ConvexDomain,
    pub p: ExponentField,
    pub f: ScalarFieldExpr,
    pub g: ScalarFieldExpr,
    pub q: ScalarFieldExpr,
    pub eps_start: f64,
    pub eps_stop: f64,
    pub eps_factor: f64,
    pub mesh_h: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Free exponent `s ∈ (0, 1)` of the bound `ln v <= C v^{s/2}`.
    pub s_exponent: f64,
    /// When set, each level uses `p` mollified at radius `δ₀·ε` and the
    /// right-hand side masked to `{p_ε <= 2}`.
    pub mollify_delta0: Option<f64>,
}

impl ProblemSpec {
    /// Spec with the default schedule `1, 10^{-1/2}, ..., 1e-6` and `q ≡ 4`.
    pub fn new(domain: ConvexDomain, p: ExponentField, f: ScalarFieldExpr, g: ScalarFieldExpr) -> Self {
        ProblemSpec {
            domain,
            p,
            f,
            g,
            q: ScalarFieldExpr::constant(4.0),
            eps_start: 1.0,
            eps_stop: 1e-6,
            eps_factor: 10f64.powf(-0.5),
            mesh_h: 0.1,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            s_exponent: 0.5,
            mollify_delta0: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(0.0 < self.eps_stop && self.eps_stop <= self.eps_start && self.eps_start <= 1.0) {
            return bad(format!("need 0 < eps.stop <= eps.start <= 1, got {} and {}", self.eps_stop, self.eps_start));
        }
        if !(0.0 < self.eps_factor && self.eps_factor < 1.0) {
            return bad(format!("eps.factor must lie in (0, 1), got {}", self.eps_factor));
        }
        if !(self.newton_tol > 0.0) {
            return bad(format!("newton.tol must be positive, got {}", self.newton_tol));
        }
        if self.newton_max_iter == 0 {
            return bad("newton.max_iter must be positive".into());
        }
        if !(self.mesh_h > 0.0) {
            return bad(format!("mesh.h must be positive, got {}", self.mesh_h));
        }
        if !(0.0 < self.s_exponent && self.s_exponent < 1.0) {
            return bad(format!("s.exponent must lie in (0, 1), got {}", self.s_exponent));
        }
        if let Some(d) = self.mollify_delta0 {
            if !(d > 0.0) {
                return bad(format!("mollification radius factor must be positive, got {}", d));
            }
        }
        Ok(())
    }

    /// `eps_start · eps_factor^k` down to `eps_stop`, which is always the last entry.
    pub fn eps_schedule(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let e = self.eps_start * self.eps_factor.powi(k);
            if e <= self.eps_stop * (1.0 + 1e-9) {
                break;
            }
            out.push(e);
            k += 1;
        }
        out.push(self.eps_stop);
        out
    }
}

/// Data hypotheses that fail on sampled points; these are warnings, not errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SpecWarning {
    /// `f ≠ 0` somewhere `p > 2`.
    NonzeroSourceWherePAbove2 { x: f64, y: f64, p: f64, f: f64, count: usize },
    /// `q <= 2` somewhere `p <= 2`.
    IntegrabilityAtMost2 { x: f64, y: f64, p: f64, q: f64, count: usize },
}

impl std::fmt::Display for SpecWarning {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpecWarning::NonzeroSourceWherePAbove2 { x, y, p, f, count } => write!(
                fm,
                "f is nonzero where p > 2 at {} sample points (e.g. f = {} with p = {} at ({}, {})); H2 regularity is not covered",
                count, f, p, x, y
            ),
            SpecWarning::IntegrabilityAtMost2 { x, y, p, q, count } => write!(
                fm,
                "q <= 2 where p <= 2 at {} sample points (e.g. q = {} with p = {} at ({}, {}))",
                count, q, p, x, y
            ),
        }
    }
}

/// Checks the data hypotheses on a dense sample of the domain.
pub fn validate_spec(spec: &ProblemSpec) -> Result<Vec<SpecWarning>> {
    if spec.p.p1() <= 1.0 {
        return Err(Error::Hypothesis(format!("p1 = {} must exceed 1", spec.p.p1())));
    }
    spec.check()?;
    let mut f2: Option<SpecWarning> = None;
    let mut f1: Option<SpecWarning> = None;
    for x in spec.domain.sample_points(crate::varexp::EXPONENT_SAMPLES) {
        let p = spec.p.eval(x)?;
        if p > 2.0 {
            let f = spec.f.eval(x[0], x[1])?;
            if f != 0.0 {
                match &mut f2 {
                    Some(SpecWarning::NonzeroSourceWherePAbove2 { count, .. }) => *count += 1,
                    _ => f2 = Some(SpecWarning::NonzeroSourceWherePAbove2 { x: x[0], y: x[1], p, f, count: 1 }),
                }
            }
        } else {
            let q = spec.q.eval(x[0], x[1])?;
            if q <= 2.0 {
                match &mut f1 {
                    Some(SpecWarning::IntegrabilityAtMost2 { count, .. }) => *count += 1,
                    _ => f1 = Some(SpecWarning::IntegrabilityAtMost2 { x: x[0], y: x[1], p, q, count: 1 }),
                }
            }
        }
    }
    Ok(f2.into_iter().chain(f1).collect())
}

/// Statistics of one regularized solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NewtonStats {
    pub iterations: usize,
    pub final_residual: f64,
    /// `‖R‖∞` before each iteration and at the end.
    pub residual_history: Vec<f64>,
    /// `J(u) - ∫fu` at the same instants.
    pub merit_history: Vec<f64>,
    pub kacanov_iterations: usize,
    /// Steps accepted by the merit-only fallback of the line search.
    pub fallback_steps: usize,
}

/// A [`ProblemSpec`] bound to a mesh.
pub struct DiscreteProblem<'a> {
    spec: &'a ProblemSpec,
    space: P1Space,
    red: DirichletReduction,
    base: NodeData,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl<'a> DiscreteProblem<'a> {
    pub fn new(spec: &'a ProblemSpec, mesh: Arc<TriMesh>) -> Result<Self> {
        spec.check()?;
        let space = P1Space::new(mesh);
        let red = DirichletReduction::new(space.mesh(), &spec.g)?;
        let base = NodeData::sample(&space, &spec.p, &spec.f)?;
        Ok(DiscreteProblem { spec, space, red, base })
    }

    pub fn spec(&self) -> &ProblemSpec {
        self.spec
    }

    pub fn space(&self) -> &P1Space {
        &self.space
    }

    pub fn mesh_arc(&self) -> &Arc<TriMesh> {
        self.space.mesh_arc()
    }

    pub fn reduction(&self) -> &DirichletReduction {
        &self.red
    }

    /// Interpolant of `g` on the boundary, zero inside.
    pub fn lift(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.space.mesh().num_vertices()];
        self.red.impose(&mut u);
        u
    }

    /// Vertex interpolant of `g`.
    pub fn g_interpolant(&self) -> Result<Vec<f64>> {
        Ok(P1Function::interpolate(self.mesh_arc().clone(), &self.spec.g)?.into_coeffs())
    }

    /// Exponent and masked right-hand side used at level `eps`.
    pub fn data_at(&self, eps: f64) -> Result<Cow<'_, NodeData>> {
        let Some(d0) = self.spec.mollify_delta0 else {
            return Ok(Cow::Borrowed(&self.base));
        };
        let pe = mollify_exponent(&self.spec.p, d0 * eps, &self.spec.domain)?;
        let p = self.space.quadrature().sample(&pe)?;
        let f = masked_source(&self.base.f, &p);
        Ok(Cow::Owned(NodeData { p, f }))
    }

    /// Damped Newton from `u0`; boundary values are reset to the data.
    pub fn solve(&self, eps: f64, u0: &[f64]) -> Result<(Vec<f64>, NewtonStats)> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", eps)));
        }
        let data = self.data_at(eps)?;
        let mut u = u0.to_vec();
        self.red.impose(&mut u);
        let mut stats = NewtonStats::default();
        let mut history = Vec::new();
        let mut best = (f64::INFINITY, u.clone());

        match self.newton(&mut u, &data, eps, &mut stats, &mut history, &mut best)? {
            true => return Ok((u, stats)),
            false => debug!("Newton stalled at eps = {:e}; switching to Kačanov", eps),
        }
        u = best.1.clone();
        for _ in 0..KACANOV_ITERATIONS {
            u = self.kacanov_step(&u, &data, eps)?;
            stats.kacanov_iterations += 1;
            let r = inf_norm(&residual(&self.space, &u, &data, eps)?);
            history.push(r);
            if r < best.0 {
                best = (r, u.clone());
            }
            if r <= self.spec.newton_tol {
                stats.final_residual = r;
                stats.residual_history = history;
                return Ok((u, stats));
            }
        }
        u = best.1.clone();
        if self.newton(&mut u, &data, eps, &mut stats, &mut history, &mut best)? {
            return Ok((u, stats));
        }
        Err(Error::Newton(Box::new(NewtonFailure {
            iterations: stats.iterations + stats.kacanov_iterations,
            best_residual: best.0,
            best_coeffs: best.1,
            residual_history: history,
        })))
    }

    /// Returns `Ok(true)` once `‖R‖∞ <= tol`, `Ok(false)` if the iteration
    /// stalls or exhausts its budget.
    fn newton(
        &self,
        u: &mut Vec<f64>,
        data: &NodeData,
        eps: f64,
        stats: &mut NewtonStats,
        history: &mut Vec<f64>,
        best: &mut (f64, Vec<f64>),
    ) -> Result<bool> {
        let mut r = residual(&self.space, u, data, eps)?;
        let mut phi = merit(&self.space, u, data, eps);
        for _ in 0..self.spec.newton_max_iter {
            let rn = inf_norm(&r);
            history.push(rn);
            stats.residual_history.push(rn);
            stats.merit_history.push(phi);
            if rn < best.0 {
                *best = (rn, u.clone());
            }
            if rn <= self.spec.newton_tol {
                stats.final_residual = rn;
                return Ok(true);
            }
            let j = jacobian(&self.space, u, &data.p, eps, Linearization::Newton)?;
            let rhs: Vec<f64> = self.red.interior.iter().map(|&i| -r[i]).collect();
            let d = linear_solve(&j.submatrix(&self.red.interior), &rhs)?;
            let slope: f64 = -rhs.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
            let r2 = l2(&r);
            let phi_tol = 1e-12 * (1.0 + phi.abs());
            let mut fallback: Option<(Vec<f64>, Vec<f64>, f64)> = None;
            let mut accepted = None;
            let mut t = 1.0;
            for _ in 0..=MAX_HALVINGS {
                let mut ut = u.clone();
                for (k, &i) in self.red.interior.iter().enumerate() {
                    ut[i] += t * d[k];
                }
                let rt = residual(&self.space, &ut, data, eps)?;
                let pt = merit(&self.space, &ut, data, eps);
                if l2(&rt) < r2 && pt <= phi + phi_tol {
                    accepted = Some((ut, rt, pt));
                    break;
                }
                if fallback.is_none() && pt <= phi + 1e-4 * t * slope {
                    fallback = Some((ut, rt, pt));
                }
                t *= 0.5;
            }
            let step = match (accepted, fallback) {
                (Some(s), _) => s,
                (None, Some(s)) => {
                    stats.fallback_steps += 1;
                    s
                }
                (None, None) => {
                    stats.final_residual = rn;
                    return Ok(false);
                }
            };
            *u = step.0;
            r = step.1;
            phi = step.2;
            stats.iterations += 1;
        }
        let rn = inf_norm(&r);
        history.push(rn);
        stats.residual_history.push(rn);
        stats.merit_history.push(phi);
        if rn < best.0 {
            *best = (rn, u.clone());
        }
        stats.final_residual = rn;
        Ok(rn <= self.spec.newton_tol)
    }

    /// One frozen-coefficient sweep `A(u_k) u_{k+1} = F` with boundary data.
    fn kacanov_step(&self, u: &[f64], data: &NodeData, eps: f64) -> Result<Vec<f64>> {
        let a = jacobian(&self.space, u, &data.p, eps, Linearization::Kacanov)?;
        let load = self.space.load(&data.f);
        let (aii, b) = apply_dirichlet(&a, &load, &self.red);
        let x = linear_solve(&aii, &b)?;
        Ok(self.red.extend(&x, u.len()))
    }
}

/// `f` where `p <= 2`, zero elsewhere, node by node.
pub fn masked_source(f: &[f64], p: &[f64]) -> Vec<f64> {
    f.iter().zip(p).map(|(&f, &p)| if p <= 2.0 { f } else { 0.0 }).collect()
}

/// Single regularized solve on the mesh of `u0`.
pub fn solve_regularized(spec: &ProblemSpec, eps: f64, u0: &P1Function) -> Result<(P1Function, NewtonStats)> {
    let dp = DiscreteProblem::new(spec, u0.mesh().clone())?;
    let (u, stats) = dp.solve(eps, u0.coeffs())?;
    Ok((P1Function::new(u0.mesh().clone(), u)?, stats))
}

/// Per-`ε` diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsRecord {
    pub eps: f64,
    pub newton_iterations: usize,
    pub final_residual: f64,
    pub energy: f64,
    pub grad_lp_norm: f64,
    pub h2_dq: f64,
    pub h2_recovery: f64,
    pub meas_a1: f64,
    pub meas_a2: f64,
    pub meas_omega1: f64,
    /// `max ln(v)/v^{s/2}` over `{|∇u| > 1}` (0 when that set is empty).
    pub log_bound_ratio: f64,
    pub kacanov_iterations: usize,
    /// Marks the record standing in for the unregularized solution.
    pub is_final: bool,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub mesh: Arc<TriMesh>,
    pub records: Vec<EpsRecord>,
    /// Coefficients of `u_ε`, aligned with `records`.
    pub solutions: Vec<Vec<f64>>,
    pub stats: Vec<NewtonStats>,
}

impl SolveReport {
    pub fn final_solution(&self) -> Result<P1Function> {
        let c = self.solutions.last().ok_or_else(|| Error::Precondition("empty continuation".into()))?;
        P1Function::new(self.mesh.clone(), c.clone())
    }
}

/// Diagnostics of `u` at level `eps` against the node data in use.
pub fn eps_record(dp: &DiscreteProblem<'_>, eps: f64, u: &[f64], data: &NodeData, stats: &NewtonStats) -> Result<EpsRecord> {
    let space = dp.space();
    let q = space.quadrature();
    let energy = crate::assembly::energy_values(space, u, &data.p, eps);
    let grads: Vec<[f64; 2]> = (0..space.mesh().num_triangles()).map(|t| space.grad(u, t)).collect();
    let gmag: Vec<f64> = q.points().iter().map(|qp| grads[qp.element][0].hypot(grads[qp.element][1])).collect();
    let grad_lp_norm = luxemburg_norm_values(&gmag, &data.p, q)?;
    let (mut a1, mut a2, mut o1, mut ratio) = (0.0, 0.0, 0.0, 0.0f64);
    let s = dp.spec().s_exponent;
    for (qp, (&pq, &gm)) in q.points().iter().zip(data.p.iter().zip(&gmag)) {
        if pq == 2.0 {
            a1 += qp.weight;
        } else if pq < 2.0 {
            a2 += qp.weight;
        }
        if gm > 1.0 {
            o1 += qp.weight;
            let v = (gm * gm + eps).sqrt();
            ratio = ratio.max(v.ln() / v.powf(0.5 * s));
        }
    }
    let uf = P1Function::new(dp.mesh_arc().clone(), u.to_vec())?;
    let h2_recovery = regularity::h2_estimate_recovery(&uf);
    let h2_dq = match GridSpec::centered(&dp.spec().domain, 0.5 * space.mesh().h) {
        Ok(grid) => regularity::h2_estimate_dq(&uf, &dp.spec().domain, &grid)?.value,
        Err(e) => {
            warn!("no interior lattice for the difference-quotient estimate: {}", e);
            f64::NAN
        }
    };
    Ok(EpsRecord {
        eps,
        newton_iterations: stats.iterations,
        final_residual: stats.final_residual,
        energy,
        grad_lp_norm,
        h2_dq,
        h2_recovery,
        meas_a1: a1,
        meas_a2: a2,
        meas_omega1: o1,
        log_bound_ratio: ratio,
        kacanov_iterations: stats.kacanov_iterations,
        is_final: false,
    })
}

/// Continuation on a given mesh. On failure returns the records completed so
/// far together with the failing `ε` and its error.
pub fn continuation_partial(dp: &DiscreteProblem<'_>) -> (SolveReport, Option<Error>) {
    let mut report = SolveReport { mesh: dp.mesh_arc().clone(), records: Vec::new(), solutions: Vec::new(), stats: Vec::new() };
    let mut u = match dp.g_interpolant() {
        Ok(u) => u,
        Err(e) => return (report, Some(e)),
    };
    for eps in dp.spec().eps_schedule() {
        let step = dp.solve(eps, &u).and_then(|(un, stats)| {
            let data = dp.data_at(eps)?;
            let rec = eps_record(dp, eps, &un, &data, &stats)?;
            Ok((un, stats, rec))
        });
        match step {
            Ok((un, stats, rec)) => {
                debug!("eps = {:e}: {} Newton iterations, residual {:e}", eps, stats.iterations, stats.final_residual);
                u = un;
                report.records.push(rec);
                report.solutions.push(u.clone());
                report.stats.push(stats);
            }
            Err(e) => return (report, Some(Error::AtEps { eps, source: Box::new(e) })),
        }
    }
    if let Some(r) = report.records.last_mut() {
        r.is_final = true;
    }
    (report, None)
}

pub fn continuation_on_mesh(spec: &ProblemSpec, mesh: Arc<TriMesh>) -> Result<SolveReport> {
    let dp = DiscreteProblem::new(spec, mesh)?;
    match continuation_partial(&dp) {
        (report, None) => Ok(report),
        (_, Some(e)) => Err(e),
    }
}

/// Meshes the domain at `spec.mesh_h` and runs the `ε` continuation.
pub fn continuation_solve(spec: &ProblemSpec) -> Result<SolveReport> {
    spec.check()?;
    let mesh = Arc::new(triangulate_convex(&spec.domain, spec.mesh_h)?);
    continuation_on_mesh(spec, mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_field;

    fn expr(s: &str) -> ScalarFieldExpr {
        parse_field(s).unwrap()
    }

    fn square_spec(p: &str, f: &str, g: &str) -> ProblemSpec {
        let dom = ConvexDomain::unit_square();
        let p = ExponentField::new(expr(p), &dom).unwrap();
        ProblemSpec::new(dom, p, expr(f), expr(g))
    }

    #[test]
    fn schedule_is_geometric_and_ends_at_stop() {
        let s = square_spec("2", "0", "0");
        let e = s.eps_schedule();
        assert_eq!(e.len(), 13);
        assert_eq!(e[0], 1.0);
        assert_eq!(*e.last().unwrap(), 1e-6);
        assert!(e.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn spec_invariants() {
        let mut s = square_spec("2", "0", "0");
        s.eps_start = 2.0;
        assert!(s.check().is_err());
        let mut s = square_spec("2", "0", "0");
        s.eps_factor = 1.0;
        assert!(s.check().is_err());
        let mut s = square_spec("2", "0", "0");
        s.newton_tol = 0.0;
        assert!(s.check().is_err());
    }

    #[test]
    fn validate_spec_examples() {
        let mut s = square_spec("1.5", "1", "0");
        s.q = ScalarFieldExpr::constant(3.0);
        assert!(validate_spec(&s).unwrap().is_empty());
        let w = validate_spec(&square_spec("3", "1", "0")).unwrap();
        assert!(matches!(w.as_slice(), [SpecWarning::NonzeroSourceWherePAbove2 { .. }]));
        let mut s = square_spec("1.5", "1", "0");
        s.q = ScalarFieldExpr::constant(2.0);
        assert!(matches!(validate_spec(&s).unwrap().as_slice(), [SpecWarning::IntegrabilityAtMost2 { .. }]));
        assert!(matches!(ExponentField::new(expr("0.9"), &ConvexDomain::unit_square()), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn linear_problem_converges_in_one_step() {
        let mut s = square_spec("2", "2*pi^2*sin(pi*x)*sin(pi*y)", "0");
        s.mesh_h = 0.1;
        let mesh = Arc::new(triangulate_convex(&s.domain, s.mesh_h).unwrap());
        let u0 = P1Function::interpolate(mesh.clone(), &s.g).unwrap();
        let (u, st) = solve_regularized(&s, 0.3, &u0).unwrap();
        assert_eq!(st.iterations, 1);
        assert!(st.final_residual <= s.newton_tol);
        let (u2, _) = solve_regularized(&s, 1e-4, &u0).unwrap();
        for (a, b) in u.coeffs().iter().zip(u2.coeffs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_data_is_a_fixed_point_for_constant_p() {
        let s = square_spec("3", "0", "x");
        let mesh = Arc::new(triangulate_convex(&s.domain, 0.2).unwrap());
        let u0 = P1Function::interpolate(mesh, &s.g).unwrap();
        let (u, st) = solve_regularized(&s, 0.5, &u0).unwrap();
        assert!(st.iterations <= 1);
        for (a, b) in u.coeffs().iter().zip(u0.coeffs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn merit_never_increases_along_accepted_steps() {
        let mut s = square_spec("1.3 + 0.4*x", "4", "0");
        s.newton_tol = 1e-11;
        let mesh = Arc::new(triangulate_convex(&s.domain, 0.1).unwrap());
        let dp = DiscreteProblem::new(&s, mesh).unwrap();
        let (_, st) = dp.solve(1e-3, &dp.lift()).unwrap();
        for w in st.merit_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
        }
        assert!(st.final_residual <= s.newton_tol);
    }

    #[test]
    fn p2_continuation_is_inert() {
        let mut s = square_spec("2", "1 + x", "x*y");
        s.eps_stop = 1e-3;
        s.mesh_h = 0.15;
        let rep = continuation_solve(&s).unwrap();
        let first = &rep.solutions[0];
        for u in &rep.solutions {
            for (a, b) in u.iter().zip(first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let h = rep.records[0].h2_recovery;
        assert!(rep.records.iter().all(|r| (r.h2_recovery - h).abs() < 1e-10));
        assert!(rep.records.last().unwrap().is_final);
        assert!(rep.records.iter().all(|r| (r.meas_a1 - 1.0).abs() < 1e-12 && r.meas_a2 == 0.0));
    }

    #[test]
    fn unit_gradient_data_converges_to_interpolant() {
        // With |∇g| = 1 and f = 0 the flux of g is (1 + ε)^{(p-2)/2} ∇g, whose
        // divergence is O(ε): the regularized solutions approach g as ε → 0.
        let mut s = square_spec("1.5 + 0.4*x", "0", "x");
        s.mesh_h = 0.125;
        s.eps_stop = 1e-5;
        let rep = continuation_solve(&s).unwrap();
        let g = P1Function::interpolate(rep.mesh.clone(), &s.g).unwrap();
        let dist: Vec<f64> = rep.solutions.iter().map(|u| inf_norm(&u.iter().zip(g.coeffs()).map(|(a, b)| a - b).collect::<Vec<_>>())).collect();
        assert!(dist.last().unwrap() < &1e-4, "{:?}", dist);
        assert!(dist.last().unwrap() < &dist[0]);
    }

    #[test]
    fn mask_consistency() {
        let mut s = square_spec("1.6 + 0.8*x", "1 + y", "0");
        s.mollify_delta0 = Some(0.2);
        let mesh = Arc::new(triangulate_convex(&s.domain, 0.2).unwrap());
        let dp = DiscreteProblem::new(&s, mesh).unwrap();
        for eps in [1.0, 0.1] {
            let data = dp.data_at(eps).unwrap();
            let q = dp.space().quadrature();
            for (k, qp) in q.points().iter().enumerate() {
                let f = 1.0 + qp.x[1];
                let expect = if data.p[k] <= 2.0 { f } else { 0.0 };
                assert_eq!(data.f[k], expect);
            }
        }
    }
}
