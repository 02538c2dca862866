//! Variable-exponent Lebesgue space numerics.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::expr::ScalarFieldExpr;
use crate::geometry::domain::{cross, dist};
use crate::geometry::{ConvexDomain, Point};
use crate::quadrature::{gauss_legendre, Evaluable, QuadPoint, QuadratureContext};

/// Minimum number of sample points used to estimate `p1`, `p2` and `lip`.
pub const EXPONENT_SAMPLES: usize = 10_000;

/// Relative bracket width at which the Luxemburg bisection stops.
pub const LUXEMBURG_RTOL: f64 = 1e-10;

const LUXEMBURG_MAX_DOUBLINGS: usize = 200;
const LUXEMBURG_MAX_BISECTIONS: usize = 200;

#[derive(Clone)]
enum Source {
    Expr { expr: ScalarFieldExpr, grad: Option<[ScalarFieldExpr; 2]> },
    Mollified(Arc<Mollified>),
}

struct Mollified {
    base: ExponentField,
    delta: f64,
    boundary: Vec<Point>,
    stencil: Vec<(Point, f64)>,
    fd_step: f64,
}

/// An exponent `p(x)` with sampled bounds `p1 <= p <= p2` and Lipschitz
/// constant `lip`. Construction fails unless `p1 > 1`.
#[derive(Clone)]
pub struct ExponentField {
    source: Source,
    p1: f64,
    p2: f64,
    lip: f64,
}

impl fmt::Debug for ExponentField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let src = match &self.source {
            Source::Expr { expr, .. } => expr.to_string(),
            Source::Mollified(m) => format!("mollify({:?}, delta = {})", m.base, m.delta),
        };
        f.debug_struct("ExponentField").field("p", &src).field("p1", &self.p1).field("p2", &self.p2).field("lip", &self.lip).finish()
    }
}

impl ExponentField {
    /// Samples `expr` on at least [`EXPONENT_SAMPLES`] points of `dom`.
    pub fn new(expr: ScalarFieldExpr, dom: &ConvexDomain) -> Result<Self> {
        Self::from_expr(expr, dom, true)
    }

    /// As [`ExponentField::new`] but only requires `p1 >= 1`, for Lebesgue
    /// exponents that never enter the differential operator.
    pub fn new_lebesgue(expr: ScalarFieldExpr, dom: &ConvexDomain) -> Result<Self> {
        Self::from_expr(expr, dom, false)
    }

    fn from_expr(expr: ScalarFieldExpr, dom: &ConvexDomain, strict: bool) -> Result<Self> {
        let grad = expr.gradient().ok();
        let field = ExponentField { source: Source::Expr { expr, grad }, p1: 0.0, p2: 0.0, lip: 0.0 };
        field.with_sampled_bounds(dom, strict)
    }

    /// `p ≡ c` with `c > 1`.
    pub fn constant(c: f64) -> Result<Self> {
        Self::constant_checked(c, true)
    }

    /// `p ≡ c` with `c >= 1`.
    pub fn constant_lebesgue(c: f64) -> Result<Self> {
        Self::constant_checked(c, false)
    }

    fn constant_checked(c: f64, strict: bool) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::Parameter(format!("exponent must be finite, got {}", c)));
        }
        check_p1(c, strict)?;
        Ok(ExponentField { source: Source::Expr { expr: ScalarFieldExpr::constant(c), grad: None }, p1: c, p2: c, lip: 0.0 })
    }

    fn with_sampled_bounds(mut self, dom: &ConvexDomain, strict: bool) -> Result<Self> {
        if let Source::Expr { expr, .. } = &self.source {
            if let Some(c) = expr.as_constant() {
                return Self::constant_checked(c, strict);
            }
        }
        let pts = dom.sample_points(EXPONENT_SAMPLES);
        let mut p1 = f64::INFINITY;
        let mut p2 = f64::NEG_INFINITY;
        let mut lip: f64 = 0.0;
        let mut prev: Option<(Point, f64)> = None;
        for &x in &pts {
            let v = self.eval(x)?;
            p1 = p1.min(v);
            p2 = p2.max(v);
            let g = self.gradient(x)?;
            lip = lip.max(g[0].hypot(g[1]));
            if let Some((y, w)) = prev {
                let d = dist(x, y);
                if d > 0.0 {
                    lip = lip.max((v - w).abs() / d);
                }
            }
            prev = Some((x, v));
        }
        check_p1(p1, strict)?;
        self.p1 = p1;
        self.p2 = p2;
        // Small inflation covers the gap between the sampled and the true supremum.
        self.lip = match &self.source {
            Source::Mollified(m) => m.base.lip,
            Source::Expr { .. } => lip * (1.0 + 1e-3),
        };
        Ok(self)
    }

    pub fn p1(&self) -> f64 {
        self.p1
    }

    pub fn p2(&self) -> f64 {
        self.p2
    }

    pub fn lip(&self) -> f64 {
        self.lip
    }

    /// The defining expression, unless this is a mollified field.
    pub fn expr(&self) -> Option<&ScalarFieldExpr> {
        match &self.source {
            Source::Expr { expr, .. } => Some(expr),
            Source::Mollified(_) => None,
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        (self.p1 == self.p2).then_some(self.p1)
    }

    pub fn eval(&self, x: Point) -> Result<f64> {
        let v = match &self.source {
            Source::Expr { expr, .. } => expr.eval(x[0], x[1])?,
            Source::Mollified(m) => {
                let mut s = 0.0;
                for (y, w) in &m.stencil {
                    let z = project(&m.boundary, [x[0] + m.delta * y[0], x[1] + m.delta * y[1]]);
                    s += w * m.base.eval(z)?;
                }
                s
            }
        };
        if !v.is_finite() {
            return Err(Error::NonFinite { x: x[0], y: x[1], value: v });
        }
        Ok(v)
    }

    /// `∇p`: symbolic when available, central differences otherwise.
    pub fn gradient(&self, x: Point) -> Result<[f64; 2]> {
        if self.lip == 0.0 && self.p1 == self.p2 && self.p1 > 0.0 {
            return Ok([0.0, 0.0]);
        }
        match &self.source {
            // Symbolic derivatives of abs/sqrt can fail on kinks; fall back to differences there.
            Source::Expr { grad: Some(g), .. } => match (g[0].eval(x[0], x[1]), g[1].eval(x[0], x[1])) {
                (Ok(a), Ok(b)) => Ok([a, b]),
                _ => self.fd_gradient(x, 1e-6),
            },
            Source::Expr { .. } => self.fd_gradient(x, 1e-6),
            Source::Mollified(m) => self.fd_gradient(x, m.fd_step),
        }
    }

    fn fd_gradient(&self, x: Point, h: f64) -> Result<[f64; 2]> {
        let dx = (self.eval([x[0] + h, x[1]])? - self.eval([x[0] - h, x[1]])?) / (2.0 * h);
        let dy = (self.eval([x[0], x[1] + h])? - self.eval([x[0], x[1] - h])?) / (2.0 * h);
        Ok([dx, dy])
    }
}

impl Evaluable for ExponentField {
    fn eval_at(&self, q: &QuadPoint) -> Result<f64> {
        self.eval(q.x)
    }
}

fn check_p1(p1: f64, strict: bool) -> Result<()> {
    if strict && p1 <= 1.0 {
        return Err(Error::Hypothesis(format!("exponent infimum p1 = {} must exceed 1", p1)));
    }
    if p1 < 1.0 {
        return Err(Error::Hypothesis(format!("Lebesgue exponent infimum {} is below 1", p1)));
    }
    Ok(())
}

/// Nearest point of the convex polygon `poly` (identity inside).
fn project(poly: &[Point], x: Point) -> Point {
    let n = poly.len();
    if (0..n).all(|i| cross(poly[i], poly[(i + 1) % n], x) >= 0.0) {
        return x;
    }
    let mut best = poly[0];
    let mut best_d = f64::INFINITY;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let l2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = (((x[0] - a[0]) * ab[0] + (x[1] - a[1]) * ab[1]) / l2).clamp(0.0, 1.0);
        let p = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let d = dist(p, x);
        if d < best_d {
            best_d = d;
            best = p;
        }
    }
    best
}

/// Discrete unit-disk mollifier: radial Gauss nodes times equispaced angles,
/// weighted by the standard bump and normalized to sum 1.
fn bump_stencil(n_r: usize, n_theta: usize) -> Vec<(Point, f64)> {
    let (xr, wr) = gauss_legendre(n_r);
    let mut out = Vec::with_capacity(n_r * n_theta);
    for (x, w) in xr.iter().zip(&wr) {
        let r = 0.5 * (x + 1.0);
        let bump = (-1.0 / (1.0 - r * r)).exp();
        for k in 0..n_theta {
            let th = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n_theta as f64;
            out.push(([r * th.cos(), r * th.sin()], w * r * bump));
        }
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut out {
        *w /= total;
    }
    out
}

/// Smooths `p` at scale `delta` after extending it by `p ∘ projection`
/// outside `dom`. As a convex combination of translates of a `lip`-Lipschitz
/// function, the result stays within `lip·delta` of `p` on `dom` and keeps
/// Lipschitz constant `lip`.
pub fn mollify_exponent(p: &ExponentField, delta: f64, dom: &ConvexDomain) -> Result<ExponentField> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Parameter(format!("mollification radius must be positive, got {}", delta)));
    }
    if let Some(c) = p.as_constant() {
        return ExponentField::constant_checked(c, c > 1.0);
    }
    let m = Mollified {
        base: p.clone(),
        delta,
        boundary: dom.boundary_polyline(),
        stencil: bump_stencil(6, 12),
        fd_step: 1e-6 * (1.0 + dom.diameter()),
    };
    let field = ExponentField { source: Source::Mollified(Arc::new(m)), p1: 0.0, p2: 0.0, lip: 0.0 };
    field.with_sampled_bounds(dom, p.p1 > 1.0)
}

fn check_finite(q: &QuadPoint, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { x: q.x[0], y: q.x[1], value: v })
    }
}

/// `∫ |u|^{p(x)}` by quadrature.
pub fn modular<U: Evaluable + ?Sized>(u: &U, p: &ExponentField, q: &QuadratureContext) -> Result<f64> {
    let (uv, pv) = sample_pair(u, p, q)?;
    Ok(modular_values(&uv, &pv, q, 1.0))
}

fn sample_pair<U: Evaluable + ?Sized>(u: &U, p: &ExponentField, q: &QuadratureContext) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut uv = Vec::with_capacity(q.points().len());
    let mut pv = Vec::with_capacity(q.points().len());
    for qp in q.points() {
        uv.push(check_finite(qp, u.eval_at(qp)?)?);
        pv.push(check_finite(qp, p.eval_at(qp)?)?);
    }
    Ok((uv, pv))
}

/// `∫ |u/k|^{p}` from node values.
pub fn modular_values(u: &[f64], p: &[f64], q: &QuadratureContext, k: f64) -> f64 {
    q.points().iter().zip(u.iter().zip(p)).map(|(qp, (u, p))| if *u == 0.0 { 0.0 } else { qp.weight * (u.abs() / k).powf(*p) }).sum()
}

/// `inf { k > 0 : ρ(u/k) <= 1 }`.
pub fn luxemburg_norm<U: Evaluable + ?Sized>(u: &U, p: &ExponentField, q: &QuadratureContext) -> Result<f64> {
    let (uv, pv) = sample_pair(u, p, q)?;
    luxemburg_norm_values(&uv, &pv, q)
}

/// Luxemburg norm from node values of `u` and `p`; nodes with `u = 0` do not
/// contribute, so restricting to a subset is done by zeroing `u` outside it.
pub fn luxemburg_norm_values(u: &[f64], p: &[f64], q: &QuadratureContext) -> Result<f64> {
    let l1: f64 = q.points().iter().zip(u).map(|(qp, u)| qp.weight * u.abs()).sum();
    if l1 == 0.0 {
        return Ok(0.0);
    }
    let rho = |k: f64| modular_values(u, p, q, k);
    // ‖u‖₁ <= (1 + |Ω|) ‖u‖_{p(·)} for any finite measure, quadrature included.
    let mut lo = l1 / (1.0 + q.measure());
    let mut hi = 1.0;
    let mut doublings = 0;
    while !(rho(hi) < 1.0) {
        hi *= 2.0;
        doublings += 1;
        if doublings > LUXEMBURG_MAX_DOUBLINGS {
            return Err(Error::NoConvergence { what: "Luxemburg bracket expansion".into(), iterations: doublings, residual: rho(hi) });
        }
    }
    if lo >= hi {
        lo = hi * 0.5;
        while rho(lo) < 1.0 {
            lo *= 0.5;
        }
    }
    for _ in 0..LUXEMBURG_MAX_BISECTIONS {
        if hi - lo <= LUXEMBURG_RTOL * 1e-2 * hi {
            break;
        }
        let mid = (lo * hi).sqrt();
        if rho(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

/// `‖fg‖_{s} <= 2 ‖f‖_{p} ‖g‖_{q_e}` for `1/p + 1/q_e = 1/s`, finite exponents only.
pub fn holder_check<F, G>(
    f: &F,
    g: &G,
    p: &ExponentField,
    q_e: &ExponentField,
    s: &ExponentField,
    q: &QuadratureContext,
) -> Result<HolderCheck>
where
    F: Evaluable + ?Sized,
    G: Evaluable + ?Sized,
{
    let n = q.points().len();
    let (mut fv, mut gv, mut fg) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut pv, mut qv, mut sv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut worst = (0.0, [0.0, 0.0]);
    for qp in q.points() {
        let (a, b) = (check_finite(qp, f.eval_at(qp)?)?, check_finite(qp, g.eval_at(qp)?)?);
        let (pe, qe, se) = (p.eval(qp.x)?, q_e.eval(qp.x)?, s.eval(qp.x)?);
        let gap = (1.0 / pe + 1.0 / qe - 1.0 / se).abs();
        if gap > worst.0 {
            worst = (gap, qp.x);
        }
        fv.push(a);
        gv.push(b);
        fg.push(a * b);
        pv.push(pe);
        qv.push(qe);
        sv.push(se);
    }
    if worst.0 > 1e-12 {
        return Err(Error::Precondition(format!(
            "1/p + 1/q - 1/s = {:e} at ({}, {})",
            worst.0, worst.1[0], worst.1[1]
        )));
    }
    let lhs = luxemburg_norm_values(&fg, &sv, q)?;
    let rhs = 2.0 * luxemburg_norm_values(&fv, &pv, q)? * luxemburg_norm_values(&gv, &qv, q)?;
    Ok(HolderCheck { lhs, rhs, satisfied: lhs <= rhs + 1e-9 })
}

/// `N p / (N - p)` for `p < N`, `+∞` otherwise.
pub fn sobolev_conjugate(p: f64, n: usize) -> f64 {
    debug_assert!(p >= 1.0);
    let n = n as f64;
    if p < n {
        n * p / (n - p)
    } else {
        f64::INFINITY
    }
}

/// `max |p(x) - p(y)| · log(e + 1/|x - y|)` over the given pairs.
pub fn log_holder_modulus(p: &ExponentField, pairs: &[(Point, Point)]) -> Result<f64> {
    let mut m: f64 = 0.0;
    for &(x, y) in pairs {
        let d = dist(x, y);
        if d == 0.0 {
            return Err(Error::Parameter(format!("coincident sample pair at ({}, {})", x[0], x[1])));
        }
        let dp = (p.eval(x)? - p.eval(y)?).abs();
        m = m.max(dp * (std::f64::consts::E + 1.0 / d).ln());
    }
    Ok(m)
}

/// `n` random distinct pairs of points of `dom`.
pub fn sample_pairs<R: Rng>(dom: &ConvexDomain, n: usize, rng: &mut R) -> Vec<(Point, Point)> {
    let (lo, hi) = dom.bounding_box();
    let draw = |rng: &mut R| loop {
        let x = [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])];
        if dom.contains(x) {
            return x;
        }
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (a, b) = (draw(rng), draw(rng));
        if a != b {
            out.push((a, b));
        }
    }
    out
}
