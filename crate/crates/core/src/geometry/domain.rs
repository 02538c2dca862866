use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

pub(crate) fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Closed polygon area (shoelace), positive for counterclockwise order.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
}

/// A convex polygon, optionally with every corner replaced by a circular arc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexDomain {
    vertices: Vec<Point>,
    corner_radius: f64,
    arc_segments: usize,
    /// Set for inscribed polygons of a disk; the analytic boundary is the circle.
    circle: Option<Circle>,
}

/// Curvature of the boundary at a sample point. `s` is the arclength position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureSample {
    pub point: Point,
    pub s: f64,
    pub curvature: f64,
}

const DEFAULT_ARC_SEGMENTS: usize = 8;

impl ConvexDomain {
    pub fn polygon(vertices: Vec<Point>) -> Result<Self> {
        let dom = ConvexDomain { vertices, corner_radius: 0.0, arc_segments: DEFAULT_ARC_SEGMENTS, circle: None };
        dom.check()?;
        Ok(dom)
    }

    pub fn unit_square() -> Self {
        Self::polygon(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).expect("unit square")
    }

    pub fn regular_polygon(n: usize, center: Point, radius: f64) -> Result<Self> {
        if n < 3 || radius <= 0.0 {
            return Err(Error::Geometry(format!("regular polygon needs n >= 3 and radius > 0 (n = {}, r = {})", n, radius)));
        }
        let verts = (0..n)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / n as f64;
                [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
            })
            .collect();
        Self::polygon(verts)
    }

    /// Inscribed regular `segments`-gon of a disk; curvature queries use the circle.
    pub fn disk(center: Point, radius: f64, segments: usize) -> Result<Self> {
        let mut dom = Self::regular_polygon(segments, center, radius)?;
        dom.circle = Some(Circle { center, radius });
        Ok(dom)
    }

    pub fn with_arc_segments(mut self, arc_segments: usize) -> Result<Self> {
        if arc_segments < 4 {
            return Err(Error::Parameter(format!("arc_segments must be >= 4, got {}", arc_segments)));
        }
        self.arc_segments = arc_segments;
        self.check()?;
        Ok(self)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn corner_radius(&self) -> f64 {
        self.corner_radius
    }

    pub fn arc_segments(&self) -> usize {
        self.arc_segments
    }

    pub fn circle(&self) -> Option<Circle> {
        self.circle
    }

    fn check(&self) -> Result<()> {
        let v = &self.vertices;
        let n = v.len();
        if n < 3 {
            return Err(Error::Geometry(format!("polygon needs at least 3 vertices, got {}", n)));
        }
        if v.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Geometry("non-finite vertex".into()));
        }
        let scale = self.diameter_of_vertices();
        for i in 0..n {
            let (a, b, c) = (v[i], v[(i + 1) % n], v[(i + 2) % n]);
            if dist(a, b) <= 1e-14 * scale {
                return Err(Error::Geometry(format!("repeated vertex at index {}", (i + 1) % n)));
            }
            if cross(a, b, c) < -1e-14 * scale * scale {
                return Err(Error::Geometry(format!(
                    "polygon is not convex and counterclockwise at vertex {}",
                    (i + 1) % n
                )));
            }
        }
        if polygon_area(v) <= 1e-14 * scale * scale {
            return Err(Error::Geometry("polygon has non-positive area".into()));
        }
        // The turning number must be one; a convex star (pentagram) has all left turns.
        let mut turning = 0.0;
        for i in 0..n {
            let (a, b, c) = (v[i], v[(i + 1) % n], v[(i + 2) % n]);
            let d1 = [b[0] - a[0], b[1] - a[1]];
            let d2 = [c[0] - b[0], c[1] - b[1]];
            turning += (d1[0] * d2[1] - d1[1] * d2[0]).atan2(d1[0] * d2[0] + d1[1] * d2[1]);
        }
        if (turning - 2.0 * PI).abs() > 1e-6 {
            return Err(Error::Geometry("polygon winds more than once".into()));
        }
        if self.corner_radius > 0.0 {
            self.check_radius(self.corner_radius)?;
        }
        Ok(())
    }

    fn diameter_of_vertices(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.vertices {
            for b in &self.vertices {
                d = d.max(dist(*a, *b));
            }
        }
        d.max(f64::MIN_POSITIVE)
    }

    pub fn diameter(&self) -> f64 {
        self.diameter_of_vertices()
    }

    fn is_corner(&self, i: usize) -> bool {
        let n = self.vertices.len();
        let v = &self.vertices;
        let s = self.diameter_of_vertices();
        cross(v[(i + n - 1) % n], v[i], v[(i + 1) % n]) > 1e-12 * s * s
    }

    /// Distance from vertex `i` to the arc tangent points for radius `r`.
    fn tangent_offset(&self, i: usize, r: f64) -> f64 {
        let n = self.vertices.len();
        let v = &self.vertices;
        let (p, c, q) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
        let u1 = unit([p[0] - c[0], p[1] - c[1]]);
        let u2 = unit([q[0] - c[0], q[1] - c[1]]);
        let cos_a = (u1[0] * u2[0] + u1[1] * u2[1]).clamp(-1.0, 1.0);
        let half = 0.5 * cos_a.acos();
        r / half.tan()
    }

    fn check_radius(&self, r: f64) -> Result<()> {
        let n = self.vertices.len();
        let shortest = (0..n).map(|i| dist(self.vertices[i], self.vertices[(i + 1) % n])).fold(f64::INFINITY, f64::min);
        if !(r > 0.0 && r < 0.5 * shortest) {
            return Err(Error::Parameter(format!(
                "corner radius {} must lie in (0, {}) (half the shortest edge)",
                r,
                0.5 * shortest
            )));
        }
        for i in 0..n {
            let j = (i + 1) % n;
            let di = if self.is_corner(i) { self.tangent_offset(i, r) } else { 0.0 };
            let dj = if self.is_corner(j) { self.tangent_offset(j, r) } else { 0.0 };
            if di + dj >= dist(self.vertices[i], self.vertices[j]) {
                return Err(Error::Parameter(format!("corner radius {} too large for edge {}-{}", r, i, j)));
            }
        }
        Ok(())
    }

    /// Counterclockwise boundary polyline. Rounded corners contribute
    /// `arc_segments + 1` points lying on the arc.
    pub fn boundary_polyline(&self) -> Vec<Point> {
        self.boundary_pieces().into_iter().flat_map(|p| p.points).collect()
    }

    fn boundary_pieces(&self) -> Vec<Piece> {
        let n = self.vertices.len();
        let v = &self.vertices;
        if self.corner_radius <= 0.0 {
            return v.iter().map(|&p| Piece { points: vec![p], arc: None }).collect();
        }
        let r = self.corner_radius;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            if !self.is_corner(i) {
                out.push(Piece { points: vec![v[i]], arc: None });
                continue;
            }
            let (p, c, q) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
            let u1 = unit([p[0] - c[0], p[1] - c[1]]);
            let u2 = unit([q[0] - c[0], q[1] - c[1]]);
            let d = self.tangent_offset(i, r);
            let t1 = [c[0] + d * u1[0], c[1] + d * u1[1]];
            let bis = unit([u1[0] + u2[0], u1[1] + u2[1]]);
            let half = 0.5 * (u1[0] * u2[0] + u1[1] * u2[1]).clamp(-1.0, 1.0).acos();
            let off = r / half.sin();
            let center = [c[0] + off * bis[0], c[1] + off * bis[1]];
            let th1 = (t1[1] - center[1]).atan2(t1[0] - center[0]);
            let sweep = PI - 2.0 * half;
            let m = self.arc_segments;
            let pts = (0..=m)
                .map(|k| {
                    let th = th1 + sweep * k as f64 / m as f64;
                    [center[0] + r * th.cos(), center[1] + r * th.sin()]
                })
                .collect();
            out.push(Piece { points: pts, arc: Some(Circle { center, radius: r }) });
        }
        out
    }

    /// Area of the boundary polyline (the meshed region).
    pub fn area(&self) -> f64 {
        polygon_area(&self.boundary_polyline())
    }

    /// Area of the underlying exact polygon (corners not rounded).
    pub fn polygon_area(&self) -> f64 {
        polygon_area(&self.vertices)
    }

    pub fn centroid(&self) -> Point {
        let poly = self.boundary_polyline();
        let n = poly.len();
        let (mut cx, mut cy, mut a) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = poly[i];
            let q = poly[(i + 1) % n];
            let w = p[0] * q[1] - q[0] * p[1];
            a += w;
            cx += (p[0] + q[0]) * w;
            cy += (p[1] + q[1]) * w;
        }
        [cx / (3.0 * a), cy / (3.0 * a)]
    }

    /// Signed distance to the boundary polyline: positive inside.
    pub fn signed_distance(&self, x: Point) -> f64 {
        let poly = self.boundary_polyline();
        let n = poly.len();
        let mut d = f64::INFINITY;
        for i in 0..n {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            let len = dist(a, b);
            if len == 0.0 {
                continue;
            }
            d = d.min(cross(a, b, x) / len);
        }
        d
    }

    pub fn contains(&self, x: Point) -> bool {
        self.signed_distance(x) >= 0.0
    }

    /// Nearest point of the closed region to `x` (identity for interior points).
    pub fn project(&self, x: Point) -> Point {
        if self.contains(x) {
            return x;
        }
        let poly = self.boundary_polyline();
        let n = poly.len();
        let mut best = poly[0];
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let l2 = ab[0] * ab[0] + ab[1] * ab[1];
            if l2 == 0.0 {
                continue;
            }
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

    pub fn bounding_box(&self) -> (Point, Point) {
        let poly = self.boundary_polyline();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &poly {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// At least `n_min` points of the closed region: a uniform lattice clipped
    /// to the domain plus the boundary polyline vertices.
    pub fn sample_points(&self, n_min: usize) -> Vec<Point> {
        let (lo, hi) = self.bounding_box();
        let frac = (self.area() / ((hi[0] - lo[0]) * (hi[1] - lo[1]))).max(1e-3);
        let mut per_side = ((n_min as f64 / frac).sqrt().ceil() as usize).max(2);
        loop {
            let mut pts = Vec::new();
            for j in 0..per_side {
                for i in 0..per_side {
                    let x = lo[0] + (hi[0] - lo[0]) * i as f64 / (per_side - 1) as f64;
                    let y = lo[1] + (hi[1] - lo[1]) * j as f64 / (per_side - 1) as f64;
                    if self.contains([x, y]) {
                        pts.push([x, y]);
                    }
                }
            }
            if pts.len() >= n_min {
                pts.extend(self.boundary_polyline());
                return pts;
            }
            per_side = per_side * 3 / 2 + 1;
        }
    }

    /// Curvature samples along the boundary: 0 on straight pieces, 1/r on arcs.
    pub fn boundary_curvature(&self) -> Result<Vec<CurvatureSample>> {
        if let Some(c) = self.circle {
            let n = 4 * self.vertices.len();
            return Ok((0..n)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / n as f64;
                    CurvatureSample {
                        point: [c.center[0] + c.radius * t.cos(), c.center[1] + c.radius * t.sin()],
                        s: c.radius * t,
                        curvature: 1.0 / c.radius,
                    }
                })
                .collect());
        }
        if self.corner_radius <= 0.0 {
            return Err(Error::Geometry("curvature is undefined at the corners of an exact polygon".into()));
        }
        let pieces = self.boundary_pieces();
        let mut out = Vec::new();
        let mut s = 0.0;
        let np = pieces.len();
        for (i, piece) in pieces.iter().enumerate() {
            if let Some(arc) = piece.arc {
                let kappa = 1.0 / arc.radius;
                for (k, p) in piece.points.iter().enumerate() {
                    if k > 0 {
                        s += arc.radius * angle_between(arc.center, piece.points[k - 1], *p);
                    }
                    out.push(CurvatureSample { point: *p, s, curvature: kappa });
                }
            }
            let last = *piece.points.last().unwrap();
            let next = pieces[(i + 1) % np].points[0];
            let len = dist(last, next);
            out.push(CurvatureSample { point: [0.5 * (last[0] + next[0]), 0.5 * (last[1] + next[1])], s: s + 0.5 * len, curvature: 0.0 });
            s += len;
        }
        Ok(out)
    }
}

struct Piece {
    points: Vec<Point>,
    arc: Option<Circle>,
}

fn unit(v: Point) -> Point {
    let l = v[0].hypot(v[1]);
    [v[0] / l, v[1] / l]
}

fn angle_between(c: Point, a: Point, b: Point) -> f64 {
    let u = [a[0] - c[0], a[1] - c[1]];
    let v = [b[0] - c[0], b[1] - c[1]];
    (u[0] * v[1] - u[1] * v[0]).atan2(u[0] * v[0] + u[1] * v[1]).abs()
}

/// Inscribed approximant with every corner replaced by an arc of radius `r`.
pub fn round_corners(dom: &ConvexDomain, r: f64) -> Result<ConvexDomain> {
    if dom.circle.is_some() {
        return Err(Error::Parameter("rounding the corners of a disk polygon is not supported".into()));
    }
    dom.check_radius(r)?;
    let mut out = dom.clone();
    out.corner_radius = r;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact polyline area deficit for a square with n-segment quarter arcs.
    fn polyline_deficit(r: f64, n: usize) -> f64 {
        let n = n as f64;
        (4.0 - 2.0 * n * (PI / (2.0 * n)).sin()) * r * r
    }

    #[test]
    fn rejects_bad_polygons() {
        assert!(ConvexDomain::polygon(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
        // clockwise
        assert!(ConvexDomain::polygon(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]).is_err());
        // non-convex
        assert!(ConvexDomain::polygon(vec![[0.0, 0.0], [2.0, 0.0], [1.0, 0.2], [2.0, 2.0], [0.0, 2.0]]).is_err());
        // collinear only
        assert!(ConvexDomain::polygon(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).is_err());
        // pentagram: every turn is a left turn but it winds twice
        let star: Vec<Point> =
            (0..5).map(|k| { let t = 2.0 * PI * (2 * k) as f64 / 5.0; [t.cos(), t.sin()] }).collect();
        assert!(ConvexDomain::polygon(star).is_err());
    }

    #[test]
    fn rounded_square_area_deficit() {
        let sq = ConvexDomain::unit_square();
        for &r in &[0.2, 0.1, 0.05] {
            let d = round_corners(&sq, r).unwrap();
            let deficit = 1.0 - d.area();
            assert!((deficit - polyline_deficit(r, 8)).abs() < 1e-13);
            let model = (4.0 - PI) * r * r;
            let resolution = polyline_deficit(r, 8) - model;
            assert!((deficit - model).abs() <= resolution + 1e-14);
        }
    }

    #[test]
    fn nested_rounding_sequence() {
        let sq = ConvexDomain::unit_square();
        let mut prev = 0.0;
        for m in 2..8 {
            let d = round_corners(&sq, 1.0 / 2f64.powi(m)).unwrap();
            let a = d.area();
            assert!(a > prev);
            prev = a;
            let poly = d.boundary_polyline();
            let n = poly.len();
            for i in 0..n {
                assert!(cross(poly[i], poly[(i + 1) % n], poly[(i + 2) % n]) >= -1e-15);
            }
            for p in &poly {
                assert!(sq.signed_distance(*p) >= -1e-15);
            }
        }
        assert!(1.0 - prev < 1e-3);
    }

    #[test]
    fn radius_limits() {
        let sq = ConvexDomain::unit_square();
        assert!(round_corners(&sq, 0.5).is_err());
        assert!(round_corners(&sq, 0.0).is_err());
        assert!(round_corners(&sq, -0.1).is_err());
        let tri = ConvexDomain::polygon(vec![[0.0, 0.0], [1.0, 0.0], [0.5, 0.9]]).unwrap();
        // tangent offset r*sqrt(3) per 60-degree corner
        assert!(round_corners(&tri, 0.3).is_err());
        assert!(round_corners(&tri, 0.2).is_ok());
    }

    #[test]
    fn curvature_samples() {
        let disk = ConvexDomain::disk([0.0, 0.0], 1.0, 64).unwrap();
        let h = disk.boundary_curvature().unwrap();
        assert!(h.iter().all(|s| s.curvature == 1.0));

        let sq = round_corners(&ConvexDomain::unit_square(), 0.1).unwrap();
        let h = sq.boundary_curvature().unwrap();
        assert!(h.iter().all(|s| s.curvature == 0.0 || s.curvature == 10.0));
        assert!(h.iter().any(|s| s.curvature == 0.0));
        assert!(h.iter().any(|s| s.curvature == 10.0));
        let total = h.last().unwrap().s;
        assert!(total > 0.0 && total < 4.0);

        assert!(ConvexDomain::unit_square().boundary_curvature().is_err());
    }

    #[test]
    fn hexagon_area() {
        let hex = ConvexDomain::regular_polygon(6, [0.0, 0.0], 1.0).unwrap();
        assert!((hex.area() - 1.5 * 3f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn projection_and_distance() {
        let sq = ConvexDomain::unit_square();
        assert_eq!(sq.project([1.5, 0.5]), [1.0, 0.5]);
        assert_eq!(sq.project([-1.0, -1.0]), [0.0, 0.0]);
        assert!((sq.signed_distance([0.5, 0.25]) - 0.25).abs() < 1e-15);
        assert!(sq.signed_distance([2.0, 0.5]) < 0.0);
        let c = sq.centroid();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
    }
}
