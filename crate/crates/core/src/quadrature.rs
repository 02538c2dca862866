//! Triangle and interval quadrature, and per-element quadrature tables.

use std::sync::Arc;

use crate::error::Result;
use crate::geometry::{Point, TriMesh};

/// Quadrature rule on the reference triangle `(0,0), (1,0), (0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleRule {
    /// Barycentric coordinates of the nodes.
    pub points: Vec<[f64; 3]>,
    /// Positive weights summing to the reference area `1/2`.
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl TriangleRule {
    /// Symmetric six-point rule, exact for polynomials of degree 4.
    pub fn degree4() -> Self {
        const A1: f64 = 0.445_948_490_915_964_886_318;
        const B1: f64 = 0.108_103_018_168_070_227_36;
        const W1: f64 = 0.223_381_589_678_011_465_944;
        const A2: f64 = 0.091_576_213_509_770_743_460;
        const B2: f64 = 0.816_847_572_980_458_513_080;
        const W2: f64 = 0.109_951_743_655_321_867_389;
        let points = vec![[B1, A1, A1], [A1, B1, A1], [A1, A1, B1], [B2, A2, A2], [A2, B2, A2], [A2, A2, B2]];
        let weights = [W1, W1, W1, W2, W2, W2].iter().map(|w| 0.5 * w).collect();
        TriangleRule { points, weights, degree: 4 }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// One physical quadrature node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint {
    /// Position in [`QuadratureContext::points`].
    pub index: usize,
    pub element: usize,
    pub x: Point,
    pub bary: [f64; 3],
    /// Physical weight; the weights of an element sum to its area.
    pub weight: f64,
}

/// A mesh together with its tabulated quadrature nodes, stored element by
/// element (`element * rule.len() + k`).
#[derive(Debug, Clone)]
pub struct QuadratureContext {
    mesh: Arc<TriMesh>,
    rule: TriangleRule,
    points: Vec<QuadPoint>,
}

impl QuadratureContext {
    pub fn new(mesh: Arc<TriMesh>) -> Self {
        Self::with_rule(mesh, TriangleRule::degree4())
    }

    pub fn with_rule(mesh: Arc<TriMesh>, rule: TriangleRule) -> Self {
        let mut points = Vec::with_capacity(mesh.num_triangles() * rule.len());
        for t in 0..mesh.num_triangles() {
            let v = mesh.vertices_of(t);
            let scale = 2.0 * mesh.triangle_area(t);
            for (b, w) in rule.points.iter().zip(&rule.weights) {
                let x = [
                    b[0] * v[0][0] + b[1] * v[1][0] + b[2] * v[2][0],
                    b[0] * v[0][1] + b[1] * v[1][1] + b[2] * v[2][1],
                ];
                points.push(QuadPoint { index: points.len(), element: t, x, bary: *b, weight: w * scale });
            }
        }
        QuadratureContext { mesh, rule, points }
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<TriMesh> {
        &self.mesh
    }

    pub fn rule(&self) -> &TriangleRule {
        &self.rule
    }

    pub fn points(&self) -> &[QuadPoint] {
        &self.points
    }

    pub fn per_element(&self) -> usize {
        self.rule.len()
    }

    /// Nodes of element `t`.
    pub fn element_points(&self, t: usize) -> &[QuadPoint] {
        let n = self.rule.len();
        &self.points[t * n..(t + 1) * n]
    }

    /// Values of `field` at every node, in node order.
    pub fn sample<F: Evaluable + ?Sized>(&self, field: &F) -> Result<Vec<f64>> {
        self.points.iter().map(|q| field.eval_at(q)).collect()
    }

    /// `∑ w_q g(v_q)` over node values.
    pub fn integrate_values(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.points.len());
        self.points.iter().zip(values).map(|(q, v)| q.weight * v).sum()
    }

    pub fn integrate<F: Evaluable + ?Sized>(&self, field: &F) -> Result<f64> {
        let mut s = 0.0;
        for q in &self.points {
            s += q.weight * field.eval_at(q)?;
        }
        Ok(s)
    }

    /// Quadrature measure of the domain.
    pub fn measure(&self) -> f64 {
        self.points.iter().map(|q| q.weight).sum()
    }
}

/// Anything that can be evaluated at a quadrature node.
pub trait Evaluable: Sync {
    fn eval_at(&self, q: &QuadPoint) -> Result<f64>;
}

impl Evaluable for crate::expr::ScalarFieldExpr {
    fn eval_at(&self, q: &QuadPoint) -> Result<f64> {
        Ok(self.eval(q.x[0], q.x[1])?)
    }
}

/// Adapter for plain closures of position.
pub struct FnField<F>(pub F);

impl<F: Fn(Point) -> f64 + Sync> Evaluable for FnField<F> {
    fn eval_at(&self, q: &QuadPoint) -> Result<f64> {
        Ok((self.0)(q.x))
    }
}

/// Values tabulated at the nodes of a [`QuadratureContext`], indexed like
/// [`QuadratureContext::points`].
pub struct Tabulated<'a>(pub &'a [f64]);

impl Evaluable for Tabulated<'_> {
    fn eval_at(&self, q: &QuadPoint) -> Result<f64> {
        Ok(self.0[q.index])
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            z = 0.0;
            dp = 1.0;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n == 1 {
        w[0] = 2.0;
    }
    (x, w)
}
