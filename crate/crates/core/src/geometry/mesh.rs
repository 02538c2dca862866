use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::domain::{cross, dist, Point};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub normal: Point,
}

/// Conforming triangulation. Triangles are counterclockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub points: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub on_boundary: Vec<bool>,
    pub boundary_edges: Vec<BoundaryEdge>,
    /// Longest edge over all triangles.
    pub h: f64,
}

impl TriMesh {
    /// Builds a mesh from points and triangles, deriving the boundary from
    /// edges that belong to exactly one triangle.
    pub fn from_parts(points: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                if a >= points.len() || b >= points.len() {
                    return Err(Error::Geometry(format!("triangle index out of range: {:?}", t)));
                }
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let mut on_boundary = vec![false; points.len()];
        let mut boundary_edges = Vec::new();
        for t in &triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                if edge_count[&(a.min(b), a.max(b))] == 1 {
                    on_boundary[a] = true;
                    on_boundary[b] = true;
                    boundary_edges.push(BoundaryEdge { vertices: [a, b], normal: outward_normal(points[a], points[b]) });
                }
            }
        }
        let mut m = TriMesh { points, triangles, on_boundary, boundary_edges, h: 0.0 };
        m.h = m.max_edge();
        Ok(m)
    }

    pub fn num_vertices(&self) -> usize {
        self.points.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn boundary_vertices(&self) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| self.on_boundary[i]).collect()
    }

    pub fn interior_vertices(&self) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| !self.on_boundary[i]).collect()
    }

    pub fn vertices_of(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.points[a], self.points[b], self.points[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.vertices_of(t);
        0.5 * cross(a, b, c)
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    fn max_edge(&self) -> f64 {
        let mut h: f64 = 0.0;
        for t in 0..self.triangles.len() {
            let p = self.vertices_of(t);
            for k in 0..3 {
                h = h.max(dist(p[k], p[(k + 1) % 3]));
            }
        }
        h
    }

    /// Smallest interior angle over all triangles, in degrees.
    pub fn min_angle_deg(&self) -> f64 {
        (0..self.triangles.len()).map(|t| min_angle(self.vertices_of(t))).fold(f64::INFINITY, f64::min).to_degrees()
    }

    /// Gradients of the three barycentric basis functions (constant per triangle).
    pub fn basis_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.vertices_of(t);
        let det = cross(a, b, c);
        [
            [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
            [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
            [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
        ]
    }

    /// Triangles incident to each vertex.
    pub fn vertex_triangles(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.points.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                out[v].push(t);
            }
        }
        out
    }

    /// Checks orientation, conformity, and boundary bookkeeping.
    pub fn validate(&self) -> Result<()> {
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.triangle_area(t) <= 0.0 {
                return Err(Error::Geometry(format!("triangle {} is not positively oriented", t)));
            }
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        if let Some((e, c)) = edge_count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::Geometry(format!("edge {:?} shared by {} triangles", e, c)));
        }
        let n_boundary = edge_count.values().filter(|&&c| c == 1).count();
        if n_boundary != self.boundary_edges.len() {
            return Err(Error::Geometry(format!(
                "{} single-triangle edges but {} recorded boundary edges",
                n_boundary,
                self.boundary_edges.len()
            )));
        }
        for e in &self.boundary_edges {
            let [a, b] = e.vertices;
            if edge_count.get(&(a.min(b), a.max(b))) != Some(&1) {
                return Err(Error::Geometry(format!("boundary edge {:?} is interior", e.vertices)));
            }
            if !self.on_boundary[a] || !self.on_boundary[b] {
                return Err(Error::Geometry(format!("boundary edge {:?} has unflagged vertex", e.vertices)));
            }
        }
        Ok(())
    }
}

pub(crate) fn outward_normal(a: Point, b: Point) -> Point {
    let l = dist(a, b);
    [(b[1] - a[1]) / l, -(b[0] - a[0]) / l]
}

pub(crate) fn min_angle(p: [Point; 3]) -> f64 {
    let mut m = f64::INFINITY;
    for k in 0..3 {
        let o = p[k];
        let a = p[(k + 1) % 3];
        let b = p[(k + 2) % 3];
        let u = [a[0] - o[0], a[1] - o[1]];
        let v = [b[0] - o[0], b[1] - o[1]];
        let ang = (u[0] * v[1] - u[1] * v[0]).abs().atan2(u[0] * v[0] + u[1] * v[1]);
        m = m.min(ang);
    }
    m
}

/// Splits every triangle into four congruent children through edge midpoints.
pub fn refine_uniform(m: &TriMesh) -> TriMesh {
    let mut points = m.points.clone();
    let mut on_boundary = m.on_boundary.clone();
    let mut mid: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * m.triangles.len() / 2 + 1);
    let boundary_set: HashMap<(usize, usize), Point> =
        m.boundary_edges.iter().map(|e| ((e.vertices[0], e.vertices[1]), e.normal)).collect();

    let mut midpoint = |a: usize, b: usize, points: &mut Vec<Point>, on_boundary: &mut Vec<bool>| -> usize {
        let key = (a.min(b), a.max(b));
        *mid.entry(key).or_insert_with(|| {
            let (pa, pb) = (points[a], points[b]);
            points.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            on_boundary.push(boundary_set.contains_key(&(a, b)) || boundary_set.contains_key(&(b, a)));
            points.len() - 1
        })
    };

    let mut triangles = Vec::with_capacity(4 * m.triangles.len());
    for &[a, b, c] in &m.triangles {
        let ab = midpoint(a, b, &mut points, &mut on_boundary);
        let bc = midpoint(b, c, &mut points, &mut on_boundary);
        let ca = midpoint(c, a, &mut points, &mut on_boundary);
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }

    let mut boundary_edges = Vec::with_capacity(2 * m.boundary_edges.len());
    for e in &m.boundary_edges {
        let [a, b] = e.vertices;
        let mm = mid[&(a.min(b), a.max(b))];
        boundary_edges.push(BoundaryEdge { vertices: [a, mm], normal: e.normal });
        boundary_edges.push(BoundaryEdge { vertices: [mm, b], normal: e.normal });
    }
    let mut out = TriMesh { points, triangles, on_boundary, boundary_edges, h: 0.0 };
    out.h = out.max_edge();
    out
}

/// Plain-text mesh: `$vertices N`, `x y flag` lines, `$triangles M`, `i j k` lines.
pub fn write_mesh(m: &TriMesh) -> String {
    let mut s = String::with_capacity(64 * (m.points.len() + m.triangles.len()));
    writeln!(s, "$vertices {}", m.points.len()).unwrap();
    for (p, &b) in m.points.iter().zip(&m.on_boundary) {
        writeln!(s, "{:.16e} {:.16e} {}", p[0], p[1], b as u8).unwrap();
    }
    writeln!(s, "$triangles {}", m.triangles.len()).unwrap();
    for t in &m.triangles {
        writeln!(s, "{} {} {}", t[0], t[1], t[2]).unwrap();
    }
    s
}

pub fn read_mesh(text: &str) -> Result<TriMesh> {
    let bad = |line: usize, msg: &str| Error::Geometry(format!("mesh file line {}: {}", line + 1, msg));
    let mut lines = text.lines().enumerate();
    let count = |lines: &mut dyn Iterator<Item = (usize, &str)>, tag: &str| -> Result<usize> {
        let (i, l) = lines.next().ok_or_else(|| Error::Geometry(format!("missing `{}` header", tag)))?;
        let rest = l.strip_prefix(tag).ok_or_else(|| bad(i, &format!("expected `{}`", tag)))?;
        rest.trim().parse().map_err(|_| bad(i, "bad count"))
    };
    let nv = count(&mut lines, "$vertices")?;
    let mut points = Vec::with_capacity(nv);
    let mut flags = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (i, l) = lines.next().ok_or_else(|| Error::Geometry("truncated vertex block".into()))?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 3 {
            return Err(bad(i, "expected `x y flag`"));
        }
        let x: f64 = f[0].parse().map_err(|_| bad(i, "bad x"))?;
        let y: f64 = f[1].parse().map_err(|_| bad(i, "bad y"))?;
        let flag = match f[2] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(i, "flag must be 0 or 1")),
        };
        points.push([x, y]);
        flags.push(flag);
    }
    let nt = count(&mut lines, "$triangles")?;
    let mut tris = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (i, l) = lines.next().ok_or_else(|| Error::Geometry("truncated triangle block".into()))?;
        let f: Vec<usize> = l.split_whitespace().map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad(i, "bad index"))?;
        if f.len() != 3 {
            return Err(bad(i, "expected `i j k`"));
        }
        tris.push([f[0], f[1], f[2]]);
    }
    let mut m = TriMesh::from_parts(points, tris)?;
    // Flags in the file are authoritative (they may mark extra boundary vertices).
    for (b, f) in m.on_boundary.iter_mut().zip(flags) {
        *b = *b || f;
    }
    Ok(m)
}

/// Bucket grid for point-in-triangle queries.
pub struct Locator<'m> {
    mesh: &'m TriMesh,
    lo: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'m> Locator<'m> {
    pub fn new(mesh: &'m TriMesh) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &mesh.points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let w = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-300);
        let n = ((mesh.triangles.len() as f64).sqrt().ceil() as usize).clamp(1, 2048);
        let cell = w / n as f64 * (1.0 + 1e-12);
        let nx = (((hi[0] - lo[0]) / cell).floor() as usize + 1).max(1);
        let ny = (((hi[1] - lo[1]) / cell).floor() as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        for t in 0..mesh.triangles.len() {
            let v = mesh.vertices_of(t);
            let (mut tlo, mut thi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &v {
                for k in 0..2 {
                    tlo[k] = tlo[k].min(p[k]);
                    thi[k] = thi[k].max(p[k]);
                }
            }
            let i0 = ((tlo[0] - lo[0]) / cell).floor() as usize;
            let i1 = (((thi[0] - lo[0]) / cell).floor() as usize).min(nx - 1);
            let j0 = ((tlo[1] - lo[1]) / cell).floor() as usize;
            let j1 = (((thi[1] - lo[1]) / cell).floor() as usize).min(ny - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t);
                }
            }
        }
        Locator { mesh, lo, cell, nx, ny, buckets }
    }

    /// Containing triangle and barycentric coordinates. Points within a
    /// relative 1e-9 of the mesh are snapped to the nearest triangle.
    pub fn locate(&self, x: Point) -> Result<(usize, [f64; 3])> {
        let fi = ((x[0] - self.lo[0]) / self.cell).floor();
        let fj = ((x[1] - self.lo[1]) / self.cell).floor();
        let tol = 1e-9;
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                let i = fi as i64 + di;
                let j = fj as i64 + dj;
                if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
                    continue;
                }
                for &t in &self.buckets[j as usize * self.nx + i as usize] {
                    let b = barycentric(self.mesh.vertices_of(t), x);
                    let worst = b[0].min(b[1]).min(b[2]);
                    if worst >= 0.0 && di == 0 && dj == 0 {
                        return Ok((t, b));
                    }
                    if best.map_or(true, |(_, _, w)| worst > w) {
                        best = Some((t, b, worst));
                    }
                }
            }
        }
        match best {
            Some((t, b, w)) if w >= -tol => Ok((t, b)),
            _ => Err(Error::Location { x: x[0], y: x[1] }),
        }
    }
}

pub fn barycentric(v: [Point; 3], x: Point) -> [f64; 3] {
    let det = cross(v[0], v[1], v[2]);
    let l0 = cross(x, v[1], v[2]) / det;
    let l1 = cross(v[0], x, v[2]) / det;
    [l0, l1, 1.0 - l0 - l1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangle_square() -> TriMesh {
        TriMesh::from_parts(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], vec![[0, 1, 2], [0, 2, 3]]).unwrap()
    }

    #[test]
    fn from_parts_boundary() {
        let m = two_triangle_square();
        m.validate().unwrap();
        assert_eq!(m.boundary_edges.len(), 4);
        assert!(m.on_boundary.iter().all(|&b| b));
        assert!((m.h - 2f64.sqrt()).abs() < 1e-15);
        for e in &m.boundary_edges {
            let [a, b] = e.vertices;
            let mid = [0.5 * (m.points[a][0] + m.points[b][0]), 0.5 * (m.points[a][1] + m.points[b][1])];
            // normal points away from the centre
            assert!((mid[0] - 0.5) * e.normal[0] + (mid[1] - 0.5) * e.normal[1] > 0.0);
        }
    }

    #[test]
    fn refinement_counts_and_h() {
        let m = two_triangle_square();
        let r = refine_uniform(&m);
        r.validate().unwrap();
        assert_eq!(r.num_triangles(), 8);
        assert_eq!(r.num_vertices(), 9);
        assert!((r.h - m.h / 2.0).abs() < 1e-12);
        assert_eq!(r.boundary_vertices().len(), 8);
        assert_eq!(r.interior_vertices(), vec![r.points.iter().position(|p| *p == [0.5, 0.5]).unwrap()]);
        let rr = refine_uniform(&r);
        assert_eq!(rr.num_triangles(), 32);
        assert!((rr.area() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mesh_text_round_trip() {
        let m = refine_uniform(&two_triangle_square());
        let text = write_mesh(&m);
        assert!(text.starts_with("$vertices 9\n"));
        assert!(text.contains("$triangles 8\n"));
        let first = text.lines().nth(1).unwrap();
        assert_eq!(first, "0.0000000000000000e0 0.0000000000000000e0 1");
        let back = read_mesh(&text).unwrap();
        assert_eq!(back.points, m.points);
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.on_boundary, m.on_boundary);
        assert_eq!(write_mesh(&back), text);
    }

    #[test]
    fn read_rejects_garbage() {
        assert!(read_mesh("").is_err());
        assert!(read_mesh("$vertices 1\n0 0\n$triangles 0\n").is_err());
        assert!(read_mesh("$vertices 1\n0 0 2\n$triangles 0\n").is_err());
        assert!(read_mesh("$vertices 3\n0 0 1\n1 0 1\n0 1 1\n$triangles 1\n0 1 7\n").is_err());
    }

    #[test]
    fn locator_finds_points() {
        let m = refine_uniform(&refine_uniform(&two_triangle_square()));
        let loc = Locator::new(&m);
        for &x in &[[0.1, 0.2], [0.99, 0.01], [0.5, 0.5], [0.0, 0.0], [1.0, 1.0]] {
            let (t, b) = loc.locate(x).unwrap();
            let v = m.vertices_of(t);
            let y = [
                b[0] * v[0][0] + b[1] * v[1][0] + b[2] * v[2][0],
                b[0] * v[0][1] + b[1] * v[1][1] + b[2] * v[2][1],
            ];
            assert!((y[0] - x[0]).abs() < 1e-14 && (y[1] - x[1]).abs() < 1e-14);
        }
        assert!(matches!(loc.locate([1.5, 0.5]), Err(Error::Location { .. })));
    }

    #[test]
    fn basis_gradients_sum_to_zero() {
        let m = two_triangle_square();
        for t in 0..2 {
            let g = m.basis_gradients(t);
            assert!((g[0][0] + g[1][0] + g[2][0]).abs() < 1e-15);
            assert!((g[0][1] + g[1][1] + g[2][1]).abs() < 1e-15);
        }
    }
}
