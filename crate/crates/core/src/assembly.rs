//! P1 discretization of the regularized flux `(ε + |∇u|²)^{(p-2)/2} ∇u`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::ScalarFieldExpr;
use crate::geometry::{Point, TriMesh};
use crate::quadrature::{Evaluable, QuadPoint, QuadratureContext};
use crate::varexp::ExponentField;

/// Continuous piecewise-linear function given by its vertex values.
#[derive(Debug, Clone, PartialEq)]
pub struct P1Function {
    mesh: Arc<TriMesh>,
    coeffs: Vec<f64>,
}

impl P1Function {
    pub fn new(mesh: Arc<TriMesh>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != mesh.num_vertices() {
            return Err(Error::Parameter(format!(
                "{} coefficients for a mesh with {} vertices",
                coeffs.len(),
                mesh.num_vertices()
            )));
        }
        Ok(P1Function { mesh, coeffs })
    }

    pub fn zeros(mesh: Arc<TriMesh>) -> Self {
        let n = mesh.num_vertices();
        P1Function { mesh, coeffs: vec![0.0; n] }
    }

    /// Vertex interpolant of `g`.
    pub fn interpolate(mesh: Arc<TriMesh>, g: &ScalarFieldExpr) -> Result<Self> {
        let coeffs = mesh.points.iter().map(|x| g.eval(x[0], x[1])).collect::<std::result::Result<_, _>>()?;
        Ok(P1Function { mesh, coeffs })
    }

    pub fn interpolate_fn(mesh: Arc<TriMesh>, g: impl Fn(Point) -> f64) -> Self {
        let coeffs = mesh.points.iter().map(|x| g(*x)).collect();
        P1Function { mesh, coeffs }
    }

    pub fn mesh(&self) -> &Arc<TriMesh> {
        &self.mesh
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Constant gradient on triangle `t`.
    pub fn gradient(&self, t: usize) -> [f64; 2] {
        let g = self.mesh.basis_gradients(t);
        let tri = self.mesh.triangles[t];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += self.coeffs[tri[k]] * g[k][0];
            out[1] += self.coeffs[tri[k]] * g[k][1];
        }
        out
    }

    pub fn gradients(&self) -> Vec<[f64; 2]> {
        (0..self.mesh.num_triangles()).map(|t| self.gradient(t)).collect()
    }

    /// Value on triangle `t` at barycentric coordinates `b`.
    pub fn value_in(&self, t: usize, b: [f64; 3]) -> f64 {
        let tri = self.mesh.triangles[t];
        b[0] * self.coeffs[tri[0]] + b[1] * self.coeffs[tri[1]] + b[2] * self.coeffs[tri[2]]
    }

    pub fn scaled(&self, s: f64) -> Self {
        P1Function { mesh: self.mesh.clone(), coeffs: self.coeffs.iter().map(|c| s * c).collect() }
    }
}

impl Evaluable for P1Function {
    fn eval_at(&self, q: &QuadPoint) -> Result<f64> {
        Ok(self.value_in(q.element, q.bary))
    }
}

/// `|∇u|` as a piecewise-constant field.
pub struct GradientMagnitude<'a>(pub &'a P1Function);

impl Evaluable for GradientMagnitude<'_> {
    fn eval_at(&self, q: &QuadPoint) -> Result<f64> {
        let g = self.0.gradient(q.element);
        Ok(g[0].hypot(g[1]))
    }
}

/// Symmetric sparse matrix in CSR form with both triangles stored. Values at
/// `(i, j)` and `(j, i)` are written by the same operations in the same order,
/// so symmetry is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricOperator {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymmetricOperator {
    pub fn identity(n: usize) -> Self {
        SparseSymmetricOperator { n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    /// Builds from `(i, j, v)` triplets; duplicates are summed and the
    /// result is symmetrized as `(A + Aᵀ)/2`.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::Parameter(format!("entry ({}, {}) outside a {}x{} matrix", i, j, n, n)));
            }
            rows[i].push((j, 0.5 * v));
            rows[j].push((i, 0.5 * v));
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < r.len() {
                let j = r[k].0;
                let mut s = 0.0;
                while k < r.len() && r[k].0 == j {
                    s += r[k].1;
                    k += 1;
                }
                col_idx.push(j);
                values.push(s);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseSymmetricOperator { n, row_ptr, col_idx, values })
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Result<Self> {
        let n = a.len();
        let mut t = Vec::new();
        for (i, row) in a.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, &t)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, v)| v * x[j]).sum();
        }
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).all(|(&j, &v)| self.get(j, i) == v)
        })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.n]; self.n];
        for (i, row) in a.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                row[j] = v;
            }
        }
        a
    }

    /// Principal submatrix on `keep` (ascending indices).
    pub fn submatrix(&self, keep: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.n];
        for (k, &i) in keep.iter().enumerate() {
            map[i] = k;
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &i in keep {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if map[j] != usize::MAX {
                    col_idx.push(map[j]);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseSymmetricOperator { n: keep.len(), row_ptr, col_idx, values }
    }
}

/// A mesh with its quadrature table, basis gradients and the CSR pattern of
/// the P1 stiffness structure.
#[derive(Debug, Clone)]
pub struct P1Space {
    quad: QuadratureContext,
    grads: Vec<[[f64; 2]; 3]>,
    areas: Vec<f64>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// CSR slot of local entry `(a, b)` at `3a + b` for each element.
    slots: Vec<[usize; 9]>,
}

impl P1Space {
    pub fn new(mesh: Arc<TriMesh>) -> Self {
        Self::with_quadrature(QuadratureContext::new(mesh))
    }

    pub fn with_quadrature(quad: QuadratureContext) -> Self {
        let mesh = quad.mesh();
        let n = mesh.num_vertices();
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for t in &mesh.triangles {
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        adj[t[a]].push(t[b]);
                    }
                }
            }
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        for mut r in adj {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        let slots = mesh
            .triangles
            .iter()
            .map(|t| {
                let mut s = [0; 9];
                for a in 0..3 {
                    let row = &col_idx[row_ptr[t[a]]..row_ptr[t[a] + 1]];
                    for b in 0..3 {
                        s[3 * a + b] = row_ptr[t[a]] + row.binary_search(&t[b]).expect("pattern covers element");
                    }
                }
                s
            })
            .collect();
        let grads = (0..mesh.num_triangles()).map(|t| mesh.basis_gradients(t)).collect();
        let areas = (0..mesh.num_triangles()).map(|t| mesh.triangle_area(t)).collect();
        P1Space { quad, grads, areas, row_ptr, col_idx, slots }
    }

    pub fn mesh(&self) -> &TriMesh {
        self.quad.mesh()
    }

    pub fn mesh_arc(&self) -> &Arc<TriMesh> {
        self.quad.mesh_arc()
    }

    pub fn quadrature(&self) -> &QuadratureContext {
        &self.quad
    }

    pub fn basis_gradients(&self, t: usize) -> &[[f64; 2]; 3] {
        &self.grads[t]
    }

    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }

    pub fn grad(&self, u: &[f64], t: usize) -> [f64; 2] {
        let tri = self.mesh().triangles[t];
        let g = &self.grads[t];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += u[tri[k]] * g[k][0];
            out[1] += u[tri[k]] * g[k][1];
        }
        out
    }

    /// Sums element matrices into the CSR pattern in element order.
    fn scatter(&self, local: &[[f64; 9]]) -> SparseSymmetricOperator {
        let mut values = vec![0.0; self.col_idx.len()];
        for (s, k) in self.slots.iter().zip(local) {
            for e in 0..9 {
                values[s[e]] += k[e];
            }
        }
        SparseSymmetricOperator { n: self.mesh().num_vertices(), row_ptr: self.row_ptr.clone(), col_idx: self.col_idx.clone(), values }
    }

    fn scatter_vector(&self, local: &[[f64; 3]]) -> Vec<f64> {
        let mut r = vec![0.0; self.mesh().num_vertices()];
        for (t, v) in self.mesh().triangles.iter().zip(local) {
            for k in 0..3 {
                r[t[k]] += v[k];
            }
        }
        r
    }

    /// Poisson stiffness matrix `∫ ∇φ_j·∇φ_i`.
    pub fn stiffness(&self) -> SparseSymmetricOperator {
        let local: Vec<[f64; 9]> = (0..self.grads.len())
            .map(|t| {
                let g = &self.grads[t];
                let mut k = [0.0; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        k[3 * a + b] = self.areas[t] * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                    }
                }
                k
            })
            .collect();
        self.scatter(&local)
    }

    /// Load vector `∫ f φ_i` from node values of `f`.
    pub fn load(&self, f: &[f64]) -> Vec<f64> {
        let local: Vec<[f64; 3]> = (0..self.grads.len())
            .map(|t| {
                let mut r = [0.0; 3];
                for q in self.quad.element_points(t) {
                    for k in 0..3 {
                        r[k] += q.weight * f[q.index] * q.bary[k];
                    }
                }
                r
            })
            .collect();
        self.scatter_vector(&local)
    }

    /// Lumped (row-sum) mass: one third of the incident triangle areas.
    pub fn lumped_mass(&self) -> Vec<f64> {
        let local: Vec<[f64; 3]> = self.areas.iter().map(|a| [a / 3.0; 3]).collect();
        self.scatter_vector(&local)
    }
}

/// Exponent and right-hand side tabulated at the quadrature nodes.
#[derive(Debug, Clone)]
pub struct NodeData {
    pub p: Vec<f64>,
    pub f: Vec<f64>,
}

impl NodeData {
    pub fn sample<F: Evaluable + ?Sized>(space: &P1Space, p: &ExponentField, f: &F) -> Result<Self> {
        let q = space.quadrature();
        let p: Vec<f64> = q.points().par_iter().map(|qp| p.eval_at(qp)).collect::<Result<_>>()?;
        let f: Vec<f64> = q.points().par_iter().map(|qp| f.eval_at(qp)).collect::<Result<_>>()?;
        for (qp, v) in q.points().iter().zip(p.iter().chain(&f)) {
            if !v.is_finite() {
                return Err(Error::NonFinite { x: qp.x[0], y: qp.x[1], value: *v });
            }
        }
        Ok(NodeData { p, f })
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Parameter(format!("eps must be finite and >= 0, got {}", eps)));
    }
    Ok(())
}

/// `(ε + |∇u|²)^{(p-2)/2}`, with the `0·∞` limit at `v = 0` resolved to the
/// value that multiplies a zero gradient.
fn flux_factor(v2: f64, p: f64) -> f64 {
    if v2 == 0.0 {
        if p == 2.0 {
            1.0
        } else {
            0.0
        }
    } else {
        v2.powf(0.5 * (p - 2.0))
    }
}

/// `J(u) = ∫ (1/p)(|∇u|² + ε)^{p/2}` from tabulated exponents.
pub fn energy_values(space: &P1Space, u: &[f64], p: &[f64], eps: f64) -> f64 {
    (0..space.grads.len())
        .map(|t| {
            let g = space.grad(u, t);
            let v2 = g[0] * g[0] + g[1] * g[1] + eps;
            space.quad.element_points(t).iter().map(|q| q.weight * v2.powf(0.5 * p[q.index]) / p[q.index]).sum::<f64>()
        })
        .sum()
}

pub fn energy(u: &P1Function, p: &ExponentField, eps: f64, q: &QuadratureContext) -> Result<f64> {
    check_eps(eps)?;
    let space = P1Space::with_quadrature(q.clone());
    let pv = q.sample(p)?;
    Ok(energy_values(&space, u.coeffs(), &pv, eps))
}

/// `J(u) - ∫ f u`.
pub fn merit(space: &P1Space, u: &[f64], data: &NodeData, eps: f64) -> f64 {
    let lin: f64 = space.quad.points().iter().map(|q| {
        let tri = space.mesh().triangles[q.element];
        let uq = q.bary[0] * u[tri[0]] + q.bary[1] * u[tri[1]] + q.bary[2] * u[tri[2]];
        q.weight * data.f[q.index] * uq
    }).sum();
    energy_values(space, u, &data.p, eps) - lin
}

/// `R_i = ∫ v^{p-2} ∇u·∇φ_i - f φ_i` on every vertex, boundary rows zeroed.
pub fn residual(space: &P1Space, u: &[f64], data: &NodeData, eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let local: Vec<[f64; 3]> = (0..space.grads.len())
        .into_par_iter()
        .map(|t| {
            let g = space.grad(u, t);
            let v2 = g[0] * g[0] + g[1] * g[1] + eps;
            let gr = &space.grads[t];
            let mut r = [0.0; 3];
            for q in space.quad.element_points(t) {
                let s = q.weight * flux_factor(v2, data.p[q.index]);
                for k in 0..3 {
                    r[k] += s * (g[0] * gr[k][0] + g[1] * gr[k][1]) - q.weight * data.f[q.index] * q.bary[k];
                }
            }
            r
        })
        .collect();
    let mut r = space.scatter_vector(&local);
    for (ri, &b) in r.iter_mut().zip(&space.mesh().on_boundary) {
        if b {
            *ri = 0.0;
        }
    }
    Ok(r)
}

/// Residual of the regularized problem; checks that `u` carries the
/// interpolated Dirichlet data.
pub fn assemble_residual<F: Evaluable + ?Sized>(
    u: &P1Function,
    p: &ExponentField,
    f: &F,
    g: &ScalarFieldExpr,
    eps: f64,
    q: &QuadratureContext,
) -> Result<Vec<f64>> {
    let mesh = u.mesh();
    for i in mesh.boundary_vertices() {
        let x = mesh.points[i];
        let gv = g.eval(x[0], x[1])?;
        if (u.coeffs()[i] - gv).abs() > 1e-12 * (1.0 + gv.abs()) {
            return Err(Error::Precondition(format!(
                "boundary vertex {} has value {} but g = {}",
                i,
                u.coeffs()[i],
                gv
            )));
        }
    }
    let space = P1Space::with_quadrature(q.clone());
    let data = NodeData::sample(&space, p, f)?;
    residual(&space, u.coeffs(), &data, eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linearization {
    /// Exact derivative of the residual.
    Newton,
    /// Frozen coefficient `v^{p-2}` only.
    Kacanov,
}

/// `A_ij = ∫ v^{p-2}[∇φ_j·∇φ_i + (p-2)(∇u·∇φ_j)(∇u·∇φ_i)/v²]` over all vertices.
pub fn jacobian(space: &P1Space, u: &[f64], p: &[f64], eps: f64, kind: Linearization) -> Result<SparseSymmetricOperator> {
    check_eps(eps)?;
    let local: Vec<[f64; 9]> = (0..space.grads.len())
        .into_par_iter()
        .map(|t| {
            let g = space.grad(u, t);
            let gu2 = g[0] * g[0] + g[1] * g[1];
            let v2 = gu2 + eps;
            let (mut c1, mut c2) = (0.0, 0.0);
            for q in space.quad.element_points(t) {
                let pq = p[q.index];
                if v2 == 0.0 {
                    if pq < 2.0 {
                        return Err(Error::Singular { triangle: t });
                    }
                    c1 += q.weight * if pq == 2.0 { 1.0 } else { 0.0 };
                    continue;
                }
                let s = v2.powf(0.5 * (pq - 2.0));
                c1 += q.weight * s;
                c2 += q.weight * s * (pq - 2.0) / v2;
            }
            if kind == Linearization::Kacanov {
                c2 = 0.0;
            }
            let gr = &space.grads[t];
            let d = [g[0] * gr[0][0] + g[1] * gr[0][1], g[0] * gr[1][0] + g[1] * gr[1][1], g[0] * gr[2][0] + g[1] * gr[2][1]];
            let mut k = [0.0; 9];
            for a in 0..3 {
                for b in 0..3 {
                    k[3 * a + b] = c1 * (gr[a][0] * gr[b][0] + gr[a][1] * gr[b][1]) + c2 * (d[a] * d[b]);
                }
            }
            Ok(k)
        })
        .collect::<Result<_>>()?;
    Ok(space.scatter(&local))
}

pub fn assemble_jacobian(u: &P1Function, p: &ExponentField, eps: f64, q: &QuadratureContext) -> Result<SparseSymmetricOperator> {
    let space = P1Space::with_quadrature(q.clone());
    let pv = q.sample(p)?;
    jacobian(&space, u.coeffs(), &pv, eps, Linearization::Newton)
}

/// Interior/boundary split of the vertex set.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletReduction {
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
    /// Interpolated boundary values, aligned with `boundary`.
    pub values: Vec<f64>,
}

impl DirichletReduction {
    pub fn new(mesh: &TriMesh, g: &ScalarFieldExpr) -> Result<Self> {
        let interior = mesh.interior_vertices();
        let boundary = mesh.boundary_vertices();
        if boundary.is_empty() {
            return Err(Error::Precondition("mesh has no boundary vertices".into()));
        }
        let values = boundary.iter().map(|&i| g.eval(mesh.points[i][0], mesh.points[i][1])).collect::<std::result::Result<_, _>>()?;
        Ok(DirichletReduction { interior, boundary, values })
    }

    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&i| v[i]).collect()
    }

    /// Writes the boundary values into a full coefficient vector.
    pub fn impose(&self, u: &mut [f64]) {
        for (&i, &v) in self.boundary.iter().zip(&self.values) {
            u[i] = v;
        }
    }

    /// Full vector from interior values plus the boundary data.
    pub fn extend(&self, interior: &[f64], n: usize) -> Vec<f64> {
        let mut u = vec![0.0; n];
        for (&i, &v) in self.interior.iter().zip(interior) {
            u[i] = v;
        }
        self.impose(&mut u);
        u
    }
}

/// Condenses `A u = b` to the interior unknowns with `u = g` on the boundary:
/// returns `(A_II, b_I - A_IB g_B)`.
pub fn apply_dirichlet(
    a: &SparseSymmetricOperator,
    b: &[f64],
    red: &DirichletReduction,
) -> (SparseSymmetricOperator, Vec<f64>) {
    let mut lift = vec![0.0; a.dim()];
    red.impose(&mut lift);
    let al = a.matvec(&lift);
    let rhs = red.interior.iter().map(|&i| b[i] - al[i]).collect();
    (a.submatrix(&red.interior), rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_field;
    use crate::geometry::{triangulate_convex, ConvexDomain};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square_space(h: f64) -> P1Space {
        P1Space::new(Arc::new(triangulate_convex(&ConvexDomain::unit_square(), h).unwrap()))
    }

    fn expr(s: &str) -> ScalarFieldExpr {
        parse_field(s).unwrap()
    }

    fn pfield(s: &str) -> ExponentField {
        ExponentField::new(expr(s), &ConvexDomain::unit_square()).unwrap()
    }

    #[test]
    fn energy_examples() {
        let sp = square_space(0.25);
        let q = sp.quadrature();
        let m = sp.mesh_arc().clone();
        let two = ExponentField::constant(2.0).unwrap();
        let zero = P1Function::zeros(m.clone());
        assert!((energy(&zero, &two, 1.0, q).unwrap() - 0.5).abs() < 1e-13);
        let x = P1Function::interpolate(m, &expr("x")).unwrap();
        assert!((energy(&x, &two, 0.0, q).unwrap() - 0.5).abs() < 1e-13);
        let three = ExponentField::constant(3.0).unwrap();
        assert!((energy(&x, &three, 1.0, q).unwrap() - 2f64.powf(1.5) / 3.0).abs() < 1e-13);
        let p15 = ExponentField::constant(1.5).unwrap();
        assert!(energy(&zero, &p15, 0.0, q).unwrap() == 0.0);
        assert!(matches!(energy(&zero, &p15, -1.0, q), Err(Error::Parameter(_))));
    }

    #[test]
    fn linear_case_residual_is_stiffness_minus_load() {
        let sp = square_space(0.2);
        let f = expr("1 + x*y");
        let data = NodeData::sample(&sp, &ExponentField::constant(2.0).unwrap(), &f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..sp.mesh().num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = residual(&sp, &u, &data, 0.3).unwrap();
        let ku = sp.stiffness().matvec(&u);
        let l = sp.load(&data.f);
        for i in 0..u.len() {
            let expect = if sp.mesh().on_boundary[i] { 0.0 } else { ku[i] - l[i] };
            assert!((r[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_interpolant_has_zero_residual_for_constant_p() {
        let sp = square_space(0.2);
        let g = expr("0.3 - 1.7*x + 0.6*y");
        let u = P1Function::interpolate(sp.mesh_arc().clone(), &g).unwrap();
        for (pc, eps) in [(1.3, 0.0), (1.5, 1e-3), (2.0, 1.0), (3.0, 0.5), (4.5, 1e-6)] {
            let p = ExponentField::constant(pc).unwrap();
            let r = assemble_residual(&u, &p, &ScalarFieldExpr::constant(0.0), &g, eps, sp.quadrature()).unwrap();
            // Oracle: the flux is a constant vector, whose divergence vanishes, so
            // each interior row is that vector dotted with ∑ area·∇φ_i = 0.
            assert!(r.iter().all(|v| v.abs() < 1e-12), "p = {}", pc);
        }
        let wrong = P1Function::zeros(sp.mesh_arc().clone());
        let p = ExponentField::constant(2.0).unwrap();
        assert!(matches!(
            assemble_residual(&wrong, &p, &ScalarFieldExpr::constant(0.0), &g, 0.1, sp.quadrature()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn p2_jacobian_is_stiffness() {
        let sp = square_space(0.3);
        let u = P1Function::interpolate(sp.mesh_arc().clone(), &expr("sin(3*x)*y")).unwrap();
        let j = assemble_jacobian(&u, &ExponentField::constant(2.0).unwrap(), 0.2, sp.quadrature()).unwrap();
        let k = sp.stiffness();
        assert!(j.is_symmetric());
        for i in 0..k.dim() {
            let (cols, vals) = k.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                assert!((j.get(i, c) - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let sp = square_space(0.5);
        let zero = P1Function::zeros(sp.mesh_arc().clone());
        let p = ExponentField::constant(1.5).unwrap();
        assert!(matches!(assemble_jacobian(&zero, &p, 0.0, sp.quadrature()), Err(Error::Singular { .. })));
        let p = ExponentField::constant(3.0).unwrap();
        assert!(assemble_jacobian(&zero, &p, 0.0, sp.quadrature()).is_ok());
    }

    fn random_interior(sp: &P1Space, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        (0..sp.mesh().num_vertices()).map(|i| if sp.mesh().on_boundary[i] { 0.0 } else { scale * rng.gen_range(-1.0..1.0) }).collect()
    }

    #[test]
    fn energy_gradient_matches_residual() {
        let sp = square_space(0.2);
        let p = pfield("1.4 + 0.8*x*y + 0.3*sin(2*y)");
        let data = NodeData::sample(&sp, &p, &expr("cos(x) + y")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let mut u = random_interior(&sp, &mut rng, 1.0);
            for (i, x) in sp.mesh().points.iter().enumerate() {
                if sp.mesh().on_boundary[i] {
                    u[i] = x[0] - 0.5 * x[1];
                }
            }
            let d = random_interior(&sp, &mut rng, 1.0);
            let eps = 0.05;
            let t = 1e-6;
            let up: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let um: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a - t * b).collect();
            let fd = (merit(&sp, &up, &data, eps) - merit(&sp, &um, &data, eps)) / (2.0 * t);
            let r = residual(&sp, &u, &data, eps).unwrap();
            let rd: f64 = r.iter().zip(&d).map(|(a, b)| a * b).sum();
            assert!((fd - rd).abs() <= 1e-5 * rd.abs().max(1e-3), "{} vs {}", fd, rd);
        }
    }

    #[test]
    fn dirichlet_condensation() {
        let sp = square_space(0.25);
        let red = DirichletReduction::new(sp.mesh(), &ScalarFieldExpr::constant(0.0)).unwrap();
        assert!(red.values.iter().all(|&v| v == 0.0));
        let g = expr("2*x - y + 0.5");
        let red = DirichletReduction::new(sp.mesh(), &g).unwrap();
        for (&i, &v) in red.boundary.iter().zip(&red.values) {
            let x = sp.mesh().points[i];
            assert_eq!(v, 2.0 * x[0] - x[1] + 0.5);
        }
        let k = sp.stiffness();
        let (a, b) = apply_dirichlet(&k, &vec![0.0; k.dim()], &red);
        assert!(a.is_symmetric());
        assert_eq!(a.dim(), red.interior.len());
        // The affine interpolant is discrete-harmonic: A_II g_I = -A_IB g_B.
        let gi: Vec<f64> = red.interior.iter().map(|&i| g.eval(sp.mesh().points[i][0], sp.mesh().points[i][1]).unwrap()).collect();
        let agi = a.matvec(&gi);
        for (x, y) in agi.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn triplets_and_submatrix() {
        let a = SparseSymmetricOperator::from_triplets(3, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (2, 2, 3.0), (1, 1, 4.0)]).unwrap();
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(1, 0), 1.0);
        assert!(a.is_symmetric());
        let s = a.submatrix(&[1, 2]);
        assert_eq!(s.to_dense(), vec![vec![4.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(SparseSymmetricOperator::identity(2).matvec(&[3.0, 4.0]), vec![3.0, 4.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn jacobian_matches_directional_differences(seed in 0u64..1000, eps in 1e-3f64..1.0, a in 1.1f64..1.9, b in 0.0f64..2.0) {
            let sp = square_space(0.25);
            let p = pfield(&format!("{} + {}*x*y", a, b));
            let data = NodeData::sample(&sp, &p, &expr("1 - x")).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_interior(&sp, &mut rng, 2.0);
            let d = random_interior(&sp, &mut rng, 1.0);
            let t = 1e-6;
            let up: Vec<f64> = u.iter().zip(&d).map(|(x, y)| x + t * y).collect();
            let um: Vec<f64> = u.iter().zip(&d).map(|(x, y)| x - t * y).collect();
            let r0 = residual(&sp, &um, &data, eps).unwrap();
            let r1 = residual(&sp, &up, &data, eps).unwrap();
            let fd: Vec<f64> = r1.iter().zip(&r0).map(|(x, y)| (x - y) / (2.0 * t)).collect();
            let j = jacobian(&sp, &u, &data.p, eps, Linearization::Newton).unwrap();
            prop_assert!(j.is_symmetric());
            let jd = j.matvec(&d);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..fd.len() {
                if !sp.mesh().on_boundary[i] {
                    num += (fd[i] - jd[i]).powi(2);
                    den += jd[i].powi(2);
                }
            }
            prop_assert!(num.sqrt() <= 1e-5 * den.sqrt(), "rel err {}", num.sqrt() / den.sqrt());
        }

        #[test]
        fn p1_gradient_is_constant_per_element(seed in 0u64..1000) {
            let sp = square_space(0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = P1Function::new(sp.mesh_arc().clone(), (0..sp.mesh().num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            for t in 0..sp.mesh().num_triangles() {
                let g = u.gradient(t);
                let tri = sp.mesh().triangles[t];
                let v = sp.mesh().vertices_of(t);
                for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                    let du = u.coeffs()[tri[b]] - u.coeffs()[tri[a]];
                    let dx = [v[b][0] - v[a][0], v[b][1] - v[a][1]];
                    prop_assert!((g[0] * dx[0] + g[1] * dx[1] - du).abs() < 1e-12);
                }
            }
        }
    }
}
