//! Pointwise coefficients of the nondivergence form, H² estimators and the
//! auxiliary checks behind the regularity argument.

use std::f64::consts::PI;

use rand::Rng;
use serde::Serialize;

use crate::assembly::{GradientMagnitude, P1Function, P1Space};
use crate::error::{Error, Result};
use crate::expr::{ScalarFieldExpr, Var};
use crate::geometry::{Circle, ConvexDomain, Locator, Point, TriMesh};
use crate::quadrature::{gauss_legendre, QuadratureContext};
use crate::varexp::{luxemburg_norm, luxemburg_norm_values, ExponentField};

/// Coefficients of `-∑ a_ij ∂_ij u = a_rhs` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientSample {
    pub x: Point,
    pub p: f64,
    pub grad_u: [f64; 2],
    pub a: [[f64; 2]; 2],
    pub a_rhs: f64,
}

/// `a = I + (p-2) ∇u∇uᵀ/v²` and `a_rhs = ln(v) ∇u·∇p + f v^{2-p}` with
/// `v² = |∇u|² + ε`.
pub fn coefficient_sample(x: Point, grad_u: [f64; 2], p: f64, grad_p: [f64; 2], f: f64, eps: f64) -> Result<CoefficientSample> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {}", eps)));
    }
    let v2 = grad_u[0] * grad_u[0] + grad_u[1] * grad_u[1] + eps;
    let v = v2.sqrt();
    let c = (p - 2.0) / v2;
    let a = [
        [1.0 + c * grad_u[0] * grad_u[0], c * grad_u[0] * grad_u[1]],
        [c * grad_u[0] * grad_u[1], 1.0 + c * grad_u[1] * grad_u[1]],
    ];
    let a_rhs = v.ln() * (grad_u[0] * grad_p[0] + grad_u[1] * grad_p[1]) + f * v.powf(2.0 - p);
    Ok(CoefficientSample { x, p, grad_u, a, a_rhs })
}

/// Coefficients at `points`, with `∇u` taken from the containing element.
pub fn coefficients(u: &P1Function, p: &ExponentField, f: &ScalarFieldExpr, eps: f64, points: &[Point]) -> Result<Vec<CoefficientSample>> {
    let loc = Locator::new(u.mesh());
    points
        .iter()
        .map(|&x| {
            let (t, _) = loc.locate(x)?;
            coefficient_sample(x, u.gradient(t), p.eval(x)?, p.gradient(x)?, f.eval(x[0], x[1])?, eps)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EllipticityReport {
    /// `min (ξᵀaξ - min(1, p1-1))` over samples and unit directions.
    pub lower_margin: f64,
    /// `min (max(1, p2-1) - ξᵀaξ)` over samples and unit directions.
    pub upper_margin: f64,
    pub checks: usize,
    pub passed: bool,
}

/// Tests `min(1,p1-1)|ξ|² <= ξᵀaξ <= max(1,p2-1)|ξ|²` on `directions` random
/// unit vectors per sample.
pub fn ellipticity_check<R: Rng>(samples: &[CoefficientSample], p1: f64, p2: f64, directions: usize, rng: &mut R) -> EllipticityReport {
    let lo = (p1 - 1.0).min(1.0);
    let hi = (p2 - 1.0).max(1.0);
    let mut lower_margin = f64::INFINITY;
    let mut upper_margin = f64::INFINITY;
    let mut checks = 0;
    for s in samples {
        for _ in 0..directions {
            let th: f64 = rng.gen_range(0.0..2.0 * PI);
            let xi = [th.cos(), th.sin()];
            let q = s.a[0][0] * xi[0] * xi[0] + 2.0 * s.a[0][1] * xi[0] * xi[1] + s.a[1][1] * xi[1] * xi[1];
            lower_margin = lower_margin.min(q - lo);
            upper_margin = upper_margin.min(hi - q);
            checks += 1;
        }
    }
    let tol = 1e-12;
    EllipticityReport { lower_margin, upper_margin, checks, passed: lower_margin >= -tol && upper_margin >= -tol }
}

/// Rectangular lattice `origin + (i h, j h)`, `0 <= i < nx`, `0 <= j < ny`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub origin: Point,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// Largest square lattice centred at the centroid whose `2h`-neighbourhood
    /// lies in the domain.
    pub fn centered(dom: &ConvexDomain, h: f64) -> Result<Self> {
        Self::centered_fraction(dom, h, 1.0)
    }

    /// As [`GridSpec::centered`] with the half-width scaled by `fraction`.
    pub fn centered_fraction(dom: &ConvexDomain, h: f64, fraction: f64) -> Result<Self> {
        if !(h > 0.0) || !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Parameter(format!("bad lattice spacing {} or fraction {}", h, fraction)));
        }
        let c = dom.centroid();
        let m = 2.0 * h;
        let fits = |w: f64| {
            [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]
                .iter()
                .all(|s: &[f64; 2]| dom.signed_distance([c[0] + s[0] * (w + m), c[1] + s[1] * (w + m)]) >= 0.0)
        };
        if !fits(0.0) {
            return Err(Error::Sampling(format!("no lattice with margin {} fits around the centroid", m)));
        }
        let (mut a, mut b) = (0.0, dom.diameter());
        for _ in 0..60 {
            let mid = 0.5 * (a + b);
            if fits(mid) {
                a = mid;
            } else {
                b = mid;
            }
        }
        let w = a * fraction;
        let n = (2.0 * w / h).floor() as usize + 1;
        if n < 3 {
            return Err(Error::Sampling(format!("lattice of spacing {} has fewer than 3 points per side", h)));
        }
        let half = 0.5 * (n - 1) as f64 * h;
        Ok(GridSpec { origin: [c[0] - half, c[1] - half], h, nx: n, ny: n })
    }

    pub fn shifted(&self, d: Point) -> Self {
        GridSpec { origin: [self.origin[0] + d[0], self.origin[1] + d[1]], ..*self }
    }

    pub fn point(&self, i: usize, j: usize) -> Point {
        [self.origin[0] + i as f64 * self.h, self.origin[1] + j as f64 * self.h]
    }

    /// `(nx-1)(ny-1)h²`.
    pub fn window_area(&self) -> f64 {
        (self.nx - 1) as f64 * (self.ny - 1) as f64 * self.h * self.h
    }
}

/// Values on a [`GridSpec`], row-major in `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSampling {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl GridSampling {
    pub fn from_fn(grid: GridSpec, f: impl Fn(Point) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.nx * grid.ny);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values.push(f(grid.point(i, j)));
            }
        }
        GridSampling { grid, values }
    }

    /// Samples a P1 field; every lattice point must be at distance at least
    /// `2h` from the boundary.
    pub fn sample(mesh: &TriMesh, coeffs: &[f64], dom: &ConvexDomain, grid: GridSpec) -> Result<Self> {
        let loc = Locator::new(mesh);
        let mut values = Vec::with_capacity(grid.nx * grid.ny);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let x = grid.point(i, j);
                if dom.signed_distance(x) < 2.0 * grid.h * (1.0 - 1e-12) {
                    return Err(Error::Sampling(format!("lattice point ({}, {}) is within 2h of the boundary", x[0], x[1])));
                }
                let (t, b) = loc.locate(x)?;
                let tri = mesh.triangles[t];
                values.push(b[0] * coeffs[tri[0]] + b[1] * coeffs[tri[1]] + b[2] * coeffs[tri[2]]);
            }
        }
        Ok(GridSampling { grid, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.nx + i]
    }

    fn difference(&self, k: usize, backward: bool) -> Result<Self> {
        if k > 1 {
            return Err(Error::Parameter(format!("direction {} is not 0 or 1", k)));
        }
        let g = self.grid;
        let n = if k == 0 { g.nx } else { g.ny };
        if n < 2 {
            return Err(Error::Sampling("lattice too small for a difference quotient".into()));
        }
        let (nx, ny) = if k == 0 { (g.nx - 1, g.ny) } else { (g.nx, g.ny - 1) };
        let mut origin = g.origin;
        if backward {
            origin[k] += g.h;
        }
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (i1, j1) = if k == 0 { (i + 1, j) } else { (i, j + 1) };
                values.push((self.get(i1, j1) - self.get(i, j)) / g.h);
            }
        }
        Ok(GridSampling { grid: GridSpec { origin, h: g.h, nx, ny }, values })
    }

    /// `(F(x) - F(x - h e_k)) / h`, located at the surviving points `x`.
    pub fn backward_difference(&self, k: usize) -> Result<Self> {
        self.difference(k, true)
    }
}

/// `Δ_k^h F = (F(x + h e_k) - F(x)) / h` for order 1, `Δ_k^{-h} Δ_k^h F` for
/// order 2. The result lives on the points where all stencil values exist.
pub fn difference_quotient(g: &GridSampling, k: usize, order: u8) -> Result<GridSampling> {
    match order {
        1 => g.difference(k, false),
        2 => g.difference(k, false)?.backward_difference(k),
        _ => Err(Error::Parameter(format!("difference order {} is not 1 or 2", order))),
    }
}

/// Lumped-mass average of the element gradients at every vertex.
pub fn recovered_gradient(u: &P1Function) -> [Vec<f64>; 2] {
    let mesh = u.mesh();
    let n = mesh.num_vertices();
    let mut g = [vec![0.0; n], vec![0.0; n]];
    let mut m = vec![0.0; n];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let w = mesh.triangle_area(t) / 3.0;
        let d = u.gradient(t);
        for &i in tri {
            m[i] += w;
            g[0][i] += w * d[0];
            g[1][i] += w * d[1];
        }
    }
    for c in &mut g {
        for (x, mi) in c.iter_mut().zip(&m) {
            *x /= mi;
        }
    }
    g
}

/// `‖∇(G u)‖_{L²}` for the recovered gradient `G u`.
pub fn h2_estimate_recovery(u: &P1Function) -> f64 {
    let g = recovered_gradient(u);
    let mesh = u.mesh();
    let mut s = 0.0;
    for t in 0..mesh.num_triangles() {
        let b = mesh.basis_gradients(t);
        let tri = mesh.triangles[t];
        for c in &g {
            let mut d = [0.0; 2];
            for (k, &i) in tri.iter().enumerate() {
                d[0] += c[i] * b[k][0];
                d[1] += c[i] * b[k][1];
            }
            s += mesh.triangle_area(t) * (d[0] * d[0] + d[1] * d[1]);
        }
    }
    s.sqrt()
}

/// `(‖u‖² + ‖∇u‖² + ‖∇(G u)‖²)^{1/2}`, all in `L²`.
pub fn h2_full_norm(u: &P1Function) -> f64 {
    let space = P1Space::new(u.mesh().clone());
    let q = space.quadrature();
    let mut s = 0.0;
    for qp in q.points() {
        let v = u.value_in(qp.element, qp.bary);
        s += qp.weight * v * v;
    }
    for t in 0..u.mesh().num_triangles() {
        let d = u.gradient(t);
        s += space.area(t) * (d[0] * d[0] + d[1] * d[1]);
    }
    (s + h2_estimate_recovery(u).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DqEstimate {
    /// `(∑_{k,c} ∑_lattice h² |Δ_k^h G_c u|²)^{1/2}`.
    pub value: f64,
    pub window_area: f64,
    pub warning: Option<String>,
}

/// Difference-quotient estimate of `|u|_{H²}` on the interior lattice.
pub fn h2_estimate_dq(u: &P1Function, dom: &ConvexDomain, grid: &GridSpec) -> Result<DqEstimate> {
    let g = recovered_gradient(u);
    let mut s = 0.0;
    for c in &g {
        let samp = GridSampling::sample(u.mesh(), c, dom, *grid)?;
        for k in 0..2 {
            let d = difference_quotient(&samp, k, 1)?;
            s += d.values.iter().map(|x| x * x).sum::<f64>() * grid.h * grid.h;
        }
    }
    let warning = (u.mesh().h > 4.0 * grid.h).then(|| {
        format!("mesh size {} exceeds four lattice spacings ({}); the quotients resolve only the mesh", u.mesh().h, grid.h)
    });
    Ok(DqEstimate { value: s.sqrt(), window_area: grid.window_area(), warning })
}

/// `‖∇u‖_{L^{p(·)}}`.
pub fn lp_gradient_norm(u: &P1Function, p: &ExponentField) -> Result<f64> {
    let q = QuadratureContext::new(u.mesh().clone());
    luxemburg_norm(&GradientMagnitude(u), p, &q)
}

/// `(q̃, μ, γ)` with `1/2 = 1/q̃ + 1/μ` and `γ = μ(2-p)`.
pub fn split_exponents(p: f64, q: f64) -> (f64, f64, f64) {
    let qt = if p >= 1.0 / q + 1.5 && p < 2.0 { 1.0 / (2.0 * p - 3.0) + 1.0 } else { 0.5 * q + 1.0 };
    let mu = 2.0 * qt / (qt - 2.0);
    (qt, mu, mu * (2.0 - p))
}

/// Admissible interval `[1 + 2/q2, max(2, 2 + 8/(q1-2))]` for `γ`.
pub fn gamma_band(q1: f64, q2: f64) -> (f64, f64) {
    (1.0 + 2.0 / q2, 2.0f64.max(2.0 + 8.0 / (q1 - 2.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub q1: f64,
    pub q2: f64,
    pub band: (f64, f64),
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Quadrature points of `{p < 2}` whose `γ` falls outside the band.
    pub band_violations: usize,
    pub measure_a2: f64,
    /// `‖f v^{2-p}‖_{L²(A₂)}`.
    pub direct: f64,
    /// `‖f‖_{L^{q̃}(A₂)} ‖v^{2-p}‖_{L^{μ}(A₂)}`.
    pub split: f64,
    pub holds: bool,
}

/// Compares the right-hand side term on `A₂ = {p < 2}` directly and through
/// the variable-exponent Hölder inequality with constant 2.
pub fn integrability_split_report(
    u: &P1Function,
    p: &ExponentField,
    f: &ScalarFieldExpr,
    q: &ScalarFieldExpr,
    eps: f64,
) -> Result<SplitReport> {
    let ctx = QuadratureContext::new(u.mesh().clone());
    let pv = ctx.sample(p)?;
    let qv = ctx.sample(q)?;
    let fv = ctx.sample(f)?;
    let (q1, q2) = qv.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if q1 <= 2.0 {
        return Err(Error::Hypothesis(format!("integrability exponent must exceed 2, got inf q = {}", q1)));
    }
    let band = gamma_band(q1, q2);
    let n = pv.len();
    let (mut f_a2, mut w_a2) = (vec![0.0; n], vec![0.0; n]);
    let (mut qt_v, mut mu_v) = (vec![2.0; n], vec![2.0; n]);
    let (mut gmin, mut gmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut viol, mut meas, mut direct) = (0, 0.0, 0.0);
    for (k, qp) in ctx.points().iter().enumerate() {
        if pv[k] >= 2.0 {
            continue;
        }
        let d = u.gradient(qp.element);
        let v = (d[0] * d[0] + d[1] * d[1] + eps).sqrt();
        let w = v.powf(2.0 - pv[k]);
        let (qt, mu, gamma) = split_exponents(pv[k], qv[k]);
        gmin = gmin.min(gamma);
        gmax = gmax.max(gamma);
        if gamma < band.0 - 1e-12 || gamma > band.1 + 1e-12 {
            viol += 1;
        }
        meas += qp.weight;
        direct += qp.weight * (fv[k] * w).powi(2);
        f_a2[k] = fv[k];
        w_a2[k] = w;
        qt_v[k] = qt;
        mu_v[k] = mu;
    }
    let direct = direct.sqrt();
    let split = if meas > 0.0 { luxemburg_norm_values(&f_a2, &qt_v, &ctx)? * luxemburg_norm_values(&w_a2, &mu_v, &ctx)? } else { 0.0 };
    Ok(SplitReport {
        q1,
        q2,
        band,
        gamma_min: gmin,
        gamma_max: gmax,
        band_violations: viol,
        measure_a2: meas,
        direct,
        split,
        holds: direct <= 2.0 * split * (1.0 + 1e-9) + 1e-14,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityCheck {
    /// `∫_Ω (u_xy² - u_xx u_yy)`.
    pub lhs: f64,
    /// `-½ ∫_∂Ω (∂_ν u)² H`.
    pub rhs: f64,
    pub abs_err: f64,
}

/// Checks the boundary identity for the Hessian determinant on a disk, where
/// `H = 1/R`. `u` must vanish on the circle.
pub fn curvature_identity_check(u: &ScalarFieldExpr, disk: Circle, n_quad: usize) -> Result<IdentityCheck> {
    if n_quad < 2 {
        return Err(Error::Parameter(format!("need at least 2 quadrature points, got {}", n_quad)));
    }
    let ux = u.derivative(Var::X)?;
    let uy = u.derivative(Var::Y)?;
    let uxx = ux.derivative(Var::X)?;
    let uxy = ux.derivative(Var::Y)?;
    let uyy = uy.derivative(Var::Y)?;
    let [cx, cy] = disk.center;
    let r0 = disk.radius;
    let nth = 4 * n_quad;
    let dth = 2.0 * PI / nth as f64;
    let mut rhs = 0.0;
    for m in 0..nth {
        let th = m as f64 * dth;
        let (c, s) = (th.cos(), th.sin());
        let (x, y) = (cx + r0 * c, cy + r0 * s);
        let uv = u.eval(x, y)?;
        if uv.abs() > 1e-10 {
            return Err(Error::Precondition(format!("u = {} on the boundary at ({}, {})", uv, x, y)));
        }
        let dn = ux.eval(x, y)? * c + uy.eval(x, y)? * s;
        rhs += dn * dn * r0 * dth;
    }
    let rhs = -0.5 * rhs / r0;
    let (xr, wr) = gauss_legendre(n_quad);
    let mut lhs = 0.0;
    for (xi, wi) in xr.iter().zip(&wr) {
        let r = 0.5 * r0 * (xi + 1.0);
        for m in 0..nth {
            let th = m as f64 * dth;
            let (x, y) = (cx + r * th.cos(), cy + r * th.sin());
            let d = uxy.eval(x, y)?.powi(2) - uxx.eval(x, y)? * uyy.eval(x, y)?;
            lhs += d * r * 0.5 * r0 * wi * dth;
        }
    }
    Ok(IdentityCheck { lhs, rhs, abs_err: (lhs - rhs).abs() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    /// Least-squares slope of `log h2` against `log(1/(p1-1))`.
    pub slope: f64,
    pub intercept: f64,
    pub within_bound: bool,
    pub warning: Option<String>,
}

/// Slope limit tested by [`p1_scaling_report`].
pub const SCALING_SLOPE_BOUND: f64 = 1.5;

/// Fits `h2 ~ (p1 - 1)^{-κ}`; at least two points, fewer than four warns.
pub fn p1_scaling_report(p1s: &[f64], h2: &[f64]) -> Result<ScalingReport> {
    if p1s.len() != h2.len() || p1s.len() < 2 {
        return Err(Error::Parameter(format!("need at least two paired values, got {} and {}", p1s.len(), h2.len())));
    }
    if let Some(p) = p1s.iter().find(|&&p| !(p > 1.0)) {
        return Err(Error::Hypothesis(format!("p1 = {} must exceed 1", p)));
    }
    if let Some(v) = h2.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Parameter(format!("estimates must be positive and finite, got {}", v)));
    }
    let x: Vec<f64> = p1s.iter().map(|p| (1.0 / (p - 1.0)).ln()).collect();
    let y: Vec<f64> = h2.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let mut warning = (p1s.len() < 4).then(|| format!("only {} sweep points; the slope is indicative", p1s.len()));
    let slope = if sxx <= 1e-300 {
        warning = Some("all p1 values coincide; the sweep is degenerate and the slope is set to 0".into());
        0.0
    } else {
        sxy / sxx
    };
    Ok(ScalingReport { slope, intercept: my - slope * mx, within_bound: slope <= SCALING_SLOPE_BOUND, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_field;
    use crate::geometry::triangulate_convex;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn expr(s: &str) -> ScalarFieldExpr {
        parse_field(s).unwrap()
    }

    #[test]
    fn coefficient_examples() {
        let c = coefficient_sample([0.0; 2], [1.0, 0.0], 2.0, [0.0; 2], 0.0, 0.3).unwrap();
        assert_eq!(c.a, [[1.0, 0.0], [0.0, 1.0]]);
        let c = coefficient_sample([0.0; 2], [1.0, 0.0], 1.5, [0.0; 2], 0.0, 1e-12).unwrap();
        assert!((c.a[0][0] - 0.5).abs() < 1e-10 && c.a[1][1] == 1.0 && c.a[0][1] == 0.0);
        assert!(coefficient_sample([0.0; 2], [0.0; 2], 1.5, [0.0; 2], 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn eigenvalues_lie_between_one_and_p_minus_one(
            g0 in -20.0..20.0f64, g1 in -20.0..20.0f64, p in 1.01..5.0f64, eps in 1e-8..1.0f64,
        ) {
            let c = coefficient_sample([0.0; 2], [g0, g1], p, [0.0; 2], 0.0, eps).unwrap();
            let tr = c.a[0][0] + c.a[1][1];
            let det = c.a[0][0] * c.a[1][1] - c.a[0][1] * c.a[1][0];
            let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
            let (l1, l2) = (0.5 * tr - disc, 0.5 * tr + disc);
            let (lo, hi) = ((p - 1.0).min(1.0), (p - 1.0).max(1.0));
            prop_assert!(l1 >= lo - 1e-10 && l2 <= hi + 1e-10);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            prop_assert!(ellipticity_check(&[c], p, p, 8, &mut rng).passed);
        }
    }

    #[test]
    fn rhs_coefficient_matches_formula() {
        let g = [0.3, -0.4];
        let eps = 0.11;
        let c = coefficient_sample([0.0; 2], g, 1.7, [0.5, 2.0], 3.0, eps).unwrap();
        let v = (0.25f64 + eps).sqrt();
        let expect = v.ln() * (0.15 - 0.8) + 3.0 * v.powf(0.3);
        assert!((c.a_rhs - expect).abs() < 1e-14);
    }

    #[test]
    fn ellipticity_detects_violation() {
        let c = coefficient_sample([0.0; 2], [5.0, 0.0], 1.2, [0.0; 2], 0.0, 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(!ellipticity_check(&[c], 1.5, 2.0, 50, &mut rng).passed);
    }

    #[test]
    fn second_difference_is_composition_of_first() {
        let grid = GridSpec { origin: [0.1, 0.2], h: 0.05, nx: 11, ny: 9 };
        let g = GridSampling::from_fn(grid, |x| (3.0 * x[0]).sin() * x[1] * x[1] + x[0].powi(3));
        for k in 0..2 {
            let d2 = difference_quotient(&g, k, 2).unwrap();
            let manual = difference_quotient(&g, k, 1).unwrap().backward_difference(k).unwrap();
            assert_eq!(d2.grid, manual.grid);
            for (a, b) in d2.values.iter().zip(&manual.values) {
                assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
            }
            // centred three-point formula at the same points
            for j in 0..d2.grid.ny {
                for i in 0..d2.grid.nx {
                    let (ci, cj) = if k == 0 { (i + 1, j) } else { (i, j + 1) };
                    let (pi, pj, mi, mj) = if k == 0 { (ci + 1, cj, ci - 1, cj) } else { (ci, cj + 1, ci, cj - 1) };
                    let c = (g.get(pi, pj) - 2.0 * g.get(ci, cj) + g.get(mi, mj)) / (grid.h * grid.h);
                    assert!((d2.get(i, j) - c).abs() < 1e-9 * (1.0 + c.abs()));
                }
            }
        }
        assert!(difference_quotient(&g, 2, 1).is_err());
        assert!(difference_quotient(&g, 0, 3).is_err());
    }

    #[test]
    fn lattice_respects_margin() {
        let dom = ConvexDomain::unit_square();
        let g = GridSpec::centered(&dom, 0.05).unwrap();
        for j in 0..g.ny {
            for i in 0..g.nx {
                assert!(dom.signed_distance(g.point(i, j)) >= 0.1 - 1e-12);
            }
        }
        assert!(GridSpec::centered(&dom, 0.3).is_err());
        let mesh = triangulate_convex(&dom, 0.1).unwrap();
        let bad = GridSpec { origin: [0.01, 0.5], h: 0.05, nx: 3, ny: 1 };
        assert!(matches!(GridSampling::sample(&mesh, &vec![0.0; mesh.num_vertices()], &dom, bad), Err(Error::Sampling(_))));
    }

    fn quadratic_case(h: f64) -> (ConvexDomain, P1Function) {
        let dom = ConvexDomain::unit_square();
        let mesh = Arc::new(triangulate_convex(&dom, h).unwrap());
        let u = P1Function::interpolate_fn(mesh, |x| 0.5 * x[0] * x[0]);
        (dom, u)
    }

    #[test]
    fn estimators_on_half_x_squared() {
        let (dom, u) = quadratic_case(0.025);
        let grid = GridSpec::centered(&dom, 0.5 * u.mesh().h).unwrap();
        let dq = h2_estimate_dq(&u, &dom, &grid).unwrap();
        assert!(dq.warning.is_none());
        let a = dq.window_area.sqrt();
        assert!((dq.value - a).abs() < 0.1 * a, "{} vs {}", dq.value, a);
        let rec = h2_estimate_recovery(&u);
        assert!((rec - 1.0).abs() < 0.1, "{}", rec);
        assert!((rec - dq.value / a).abs() < 0.25);
        let inner = GridSpec::centered_fraction(&dom, grid.h, 0.9).unwrap();
        let base = h2_estimate_dq(&u, &dom, &inner).unwrap().value;
        let shifted = h2_estimate_dq(&u, &dom, &inner.shifted([0.5 * grid.h, 0.5 * grid.h])).unwrap();
        assert!((shifted.value - base).abs() < 0.15 * base);
        let coarse = GridSpec::centered(&dom, 0.2 * u.mesh().h).unwrap();
        assert!(h2_estimate_dq(&u, &dom, &coarse).unwrap().warning.is_some());
    }

    #[test]
    fn estimators_are_homogeneous() {
        let (dom, u) = quadratic_case(0.1);
        let grid = GridSpec::centered(&dom, 0.05).unwrap();
        let base = (h2_estimate_recovery(&u), h2_estimate_dq(&u, &dom, &grid).unwrap().value);
        for lam in [-3.0, 0.25, 7.5] {
            let v = u.scaled(lam);
            assert!((h2_estimate_recovery(&v) - lam.abs() * base.0).abs() < 1e-10 * (1.0 + base.0 * lam.abs()));
            let d = h2_estimate_dq(&v, &dom, &grid).unwrap().value;
            assert!((d - lam.abs() * base.1).abs() < 1e-10 * (1.0 + base.1 * lam.abs()));
        }
    }

    #[test]
    fn affine_functions_have_zero_estimates() {
        let dom = ConvexDomain::regular_polygon(6, [0.0, 0.0], 1.0).unwrap();
        let mesh = Arc::new(triangulate_convex(&dom, 0.15).unwrap());
        let u = P1Function::interpolate_fn(mesh, |x| 2.0 * x[0] - x[1] + 0.5);
        assert!(h2_estimate_recovery(&u) < 1e-12);
        let grid = GridSpec::centered(&dom, 0.075).unwrap();
        assert!(h2_estimate_dq(&u, &dom, &grid).unwrap().value < 1e-11);
    }

    #[test]
    fn full_norm_of_constant() {
        let (_, u) = quadratic_case(0.2);
        let one = P1Function::interpolate_fn(u.mesh().clone(), |_| 1.0);
        assert!((h2_full_norm(&one) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_norm_for_p2_is_l2() {
        let (_, u) = quadratic_case(0.1);
        let p = ExponentField::constant(2.0).unwrap();
        let n = lp_gradient_norm(&u, &p).unwrap();
        let l2: f64 = (0..u.mesh().num_triangles()).map(|t| { let d = u.gradient(t); u.mesh().triangle_area(t) * (d[0] * d[0] + d[1] * d[1]) }).sum::<f64>().sqrt();
        assert!((n - l2).abs() < 1e-8 * l2);
    }

    #[test]
    fn split_exponent_examples() {
        let (qt, mu, gamma) = split_exponents(1.8, 4.0);
        assert!((qt - 1.0 / 0.6 - 1.0).abs() < 1e-14);
        assert!((1.0 / qt + 1.0 / mu - 0.5).abs() < 1e-14);
        assert!((gamma - mu * 0.2).abs() < 1e-14);
        let (qt, _, _) = split_exponents(1.6, 4.0);
        assert_eq!(qt, 3.0);
        let (lo, hi) = gamma_band(4.0, 4.0);
        assert_eq!((lo, hi), (1.5, 6.0));
    }

    proptest! {
        #[test]
        fn split_exponents_conjugate(p in 1.01..1.999f64, q in 2.05..20.0f64) {
            let (qt, mu, gamma) = split_exponents(p, q);
            prop_assert!(qt > 2.0 && mu > 2.0 && gamma > 0.0);
            prop_assert!((1.0 / qt + 1.0 / mu - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn split_report_holds_on_a_smooth_field() {
        let dom = ConvexDomain::unit_square();
        let mesh = Arc::new(triangulate_convex(&dom, 0.1).unwrap());
        let u = P1Function::interpolate_fn(mesh, |x| x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]));
        let p = ExponentField::new(expr("1.8"), &dom).unwrap();
        let r = integrability_split_report(&u, &p, &expr("1 + x*y"), &expr("4"), 1e-4).unwrap();
        assert!(r.holds && r.band_violations == 0);
        assert!((r.measure_a2 - 1.0).abs() < 1e-12);
        assert!(r.direct > 0.0 && r.direct <= 2.0 * r.split);
        assert!(matches!(integrability_split_report(&u, &p, &expr("1"), &expr("2"), 1e-4), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn split_report_ignores_points_with_p_at_least_2() {
        let dom = ConvexDomain::unit_square();
        let mesh = Arc::new(triangulate_convex(&dom, 0.2).unwrap());
        let u = P1Function::interpolate_fn(mesh, |x| x[0]);
        let p = ExponentField::new(expr("2.5"), &dom).unwrap();
        let r = integrability_split_report(&u, &p, &expr("1"), &expr("4"), 1e-3).unwrap();
        assert_eq!((r.measure_a2, r.direct, r.split), (0.0, 0.0, 0.0));
        assert!(r.holds);
    }

    /// Disk integral in Cartesian form with `y = R sin φ`, Gauss in `x` and `φ`.
    fn disk_integral(f: impl Fn(f64, f64) -> f64, c: Circle, n: usize) -> f64 {
        let (x, w) = gauss_legendre(n);
        let mut s = 0.0;
        for (a, wa) in x.iter().zip(&w) {
            let phi = 0.5 * PI * a;
            let half = c.radius * phi.cos();
            let y = c.center[1] + c.radius * phi.sin();
            let dy = c.radius * phi.cos() * 0.5 * PI;
            for (b, wb) in x.iter().zip(&w) {
                let xx = c.center[0] + half * b;
                s += wa * wb * dy * half * f(xx, y);
            }
        }
        s
    }

    #[test]
    fn curvature_identity_on_paraboloid() {
        let c = Circle { center: [0.0, 0.0], radius: 1.0 };
        let r = curvature_identity_check(&expr("1 - x^2 - y^2"), c, 16).unwrap();
        assert!((r.lhs + 4.0 * PI).abs() < 1e-10 && (r.rhs + 4.0 * PI).abs() < 1e-10);
    }

    #[test]
    fn curvature_identity_against_cartesian_oracle() {
        // u = (1 - r²) e^{x} with hand-written second derivatives.
        let c = Circle { center: [0.0, 0.0], radius: 1.0 };
        let u = expr("(1 - x^2 - y^2)*exp(x)");
        let r = curvature_identity_check(&u, c, 24).unwrap();
        let uxx = |x: f64, y: f64| (1.0 - x * x - y * y - 4.0 * x - 2.0) * x.exp();
        let uyy = |x: f64, _y: f64| -2.0 * x.exp();
        let uxy = |x: f64, y: f64| -2.0 * y * x.exp();
        let oracle = disk_integral(|x, y| uxy(x, y).powi(2) - uxx(x, y) * uyy(x, y), c, 60);
        assert!((r.lhs - oracle).abs() < 1e-8, "{} vs {}", r.lhs, oracle);
        assert!(r.abs_err < 1e-8, "{:?}", r);
        assert!(matches!(curvature_identity_check(&expr("1 - x^2 - y^2 + 0.1"), c, 8), Err(Error::Precondition(_))));
    }

    #[test]
    fn scaling_fit_recovers_power_law() {
        let p1s = [1.5, 1.25, 1.1, 1.05];
        let h2: Vec<f64> = p1s.iter().map(|p: &f64| 3.0 * (p - 1.0).powf(-0.7)).collect();
        let r = p1_scaling_report(&p1s, &h2).unwrap();
        assert!((r.slope - 0.7).abs() < 1e-12 && (r.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(r.within_bound && r.warning.is_none());
        let d = p1_scaling_report(&[2.0, 2.0, 2.0, 2.0], &[1.0, 1.1, 0.9, 1.0]).unwrap();
        assert_eq!(d.slope, 0.0);
        assert!(d.warning.is_some());
        assert!(p1_scaling_report(&[1.0, 1.5], &[1.0, 1.0]).is_err());
        assert!(p1_scaling_report(&[1.5, 1.2, 1.1], &[1.0, 1.0, 1.0]).unwrap().warning.is_some());
    }
}
