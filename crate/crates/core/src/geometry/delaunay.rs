//! Incremental Delaunay triangulation of a convex point cloud with
//! encroachment-aware quality refinement.
//!
//! Every boundary segment is a convex-hull edge, so hull edges are present in
//! every triangulation of the vertex set and no constrained machinery is needed.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::geometry::domain::{cross, dist, ConvexDomain, Point};
use crate::geometry::mesh::{min_angle, outward_normal, BoundaryEdge, TriMesh};

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
struct Tri {
    v: [usize; 3],
    /// `nb[k]` is the neighbour across the edge opposite `v[k]`.
    nb: [usize; 3],
}

impl Tri {
    fn edge(&self, k: usize) -> (usize, usize) {
        (self.v[(k + 1) % 3], self.v[(k + 2) % 3])
    }
}

struct Triangulation {
    pts: Vec<Point>,
    boundary: Vec<bool>,
    tris: Vec<Tri>,
    scale: f64,
    last: usize,
    stamp: Vec<u32>,
    generation: u32,
}

enum Located {
    Inside(usize),
    /// Outside the hull, beyond hull edge `k` of triangle `t`.
    Outside(usize, usize),
}

fn incircle(a: Point, b: Point, c: Point, d: Point) -> (f64, f64) {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let al = adx * adx + ady * ady;
    let bl = bdx * bdx + bdy * bdy;
    let cl = cdx * cdx + cdy * cdy;
    let det = al * (bdx * cdy - cdx * bdy) + bl * (cdx * ady - adx * cdy) + cl * (adx * bdy - bdx * ady);
    let perm = al * ((bdx * cdy).abs() + (cdx * bdy).abs())
        + bl * ((cdx * ady).abs() + (adx * cdy).abs())
        + cl * ((adx * bdy).abs() + (bdx * ady).abs());
    (det, perm)
}

fn circumcenter(a: Point, b: Point, c: Point) -> Point {
    let (bx, by) = (b[0] - a[0], b[1] - a[1]);
    let (cx, cy) = (c[0] - a[0], c[1] - a[1]);
    let d = 2.0 * (bx * cy - by * cx);
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    [a[0] + (cy * b2 - by * c2) / d, a[1] + (bx * c2 - cx * b2) / d]
}

impl Triangulation {
    /// Fan over the strictly convex hull vertices, flipped to Delaunay.
    fn from_hull(hull: &[Point]) -> Result<Self> {
        let scale = {
            let mut d: f64 = 0.0;
            for a in hull {
                for b in hull {
                    d = d.max(dist(*a, *b));
                }
            }
            d
        };
        let n = hull.len();
        let corners: Vec<usize> = (0..n)
            .filter(|&i| cross(hull[(i + n - 1) % n], hull[i], hull[(i + 1) % n]) > 1e-12 * scale * scale)
            .collect();
        if corners.len() < 3 {
            return Err(Error::Geometry("degenerate boundary polygon".into()));
        }
        let mut tr = Triangulation {
            pts: corners.iter().map(|&i| hull[i]).collect(),
            boundary: vec![true; corners.len()],
            tris: Vec::new(),
            scale,
            last: 0,
            stamp: Vec::new(),
            generation: 0,
        };
        let m = corners.len();
        for i in 1..m - 1 {
            tr.tris.push(Tri { v: [0, i, i + 1], nb: [NONE; 3] });
        }
        for i in 0..tr.tris.len() {
            // edge opposite v[0] = (i+1, i+2) is the hull; opposite v[1] leads to i+1, opposite v[2] to i-1
            if i + 1 < tr.tris.len() {
                tr.tris[i].nb[1] = i + 1;
            }
            if i > 0 {
                tr.tris[i].nb[2] = i - 1;
            }
        }
        tr.lawson_all();
        for (i, p) in hull.iter().enumerate() {
            if !corners.contains(&i) {
                tr.insert(*p, true)?;
            }
        }
        Ok(tr)
    }

    fn p(&self, i: usize) -> Point {
        self.pts[i]
    }

    fn in_circle(&self, t: usize, d: Point) -> bool {
        let [a, b, c] = self.tris[t].v;
        let (det, perm) = incircle(self.p(a), self.p(b), self.p(c), d);
        det > 1e-12 * perm
    }

    fn lawson_all(&mut self) {
        loop {
            let mut changed = false;
            let mut t = 0;
            while t < self.tris.len() {
                let mut flipped = false;
                for k in 0..3 {
                    let n = self.tris[t].nb[k];
                    if n == NONE {
                        continue;
                    }
                    let far = self.opposite_vertex(n, t);
                    if self.in_circle(t, self.p(far)) {
                        let a = self.tris[t].v[k];
                        let (b, c) = self.tris[t].edge(k);
                        self.rebuild(&[t, n], &[[a, b, far], [a, far, c]]);
                        changed = true;
                        flipped = true;
                        break;
                    }
                }
                if !flipped {
                    t += 1;
                }
            }
            if !changed {
                return;
            }
        }
    }

    fn opposite_vertex(&self, n: usize, t: usize) -> usize {
        let k = self.tris[n].nb.iter().position(|&x| x == t).expect("adjacency is symmetric");
        self.tris[n].v[k]
    }

    /// Replaces `removed` triangles by `new` ones covering the same region and
    /// restores adjacency. Returns the indices of the new triangles.
    fn rebuild(&mut self, removed: &[usize], new: &[[usize; 3]]) -> Vec<usize> {
        let mut outer: Vec<((usize, usize), usize)> = Vec::new();
        for &r in removed {
            for k in 0..3 {
                let n = self.tris[r].nb[k];
                if n == NONE || !removed.contains(&n) {
                    outer.push((self.tris[r].edge(k), n));
                }
            }
        }
        let mut idx = Vec::with_capacity(new.len());
        for (j, _) in new.iter().enumerate() {
            if j < removed.len() {
                idx.push(removed[j]);
            } else {
                self.tris.push(Tri { v: [0; 3], nb: [NONE; 3] });
                idx.push(self.tris.len() - 1);
            }
        }
        debug_assert!(new.len() >= removed.len());
        for (j, v) in new.iter().enumerate() {
            self.tris[idx[j]] = Tri { v: *v, nb: [NONE; 3] };
        }
        for (j, v) in new.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (v[(k + 1) % 3], v[(k + 2) % 3]);
                let mut nb = NONE;
                for (jj, w) in new.iter().enumerate() {
                    if jj != j && (0..3).any(|kk| (w[(kk + 1) % 3], w[(kk + 2) % 3]) == (b, a)) {
                        nb = idx[jj];
                        break;
                    }
                }
                if nb == NONE {
                    if let Some(&(_, o)) = outer.iter().find(|(e, _)| *e == (a, b)) {
                        nb = o;
                        if o != NONE {
                            let ot = &mut self.tris[o];
                            for kk in 0..3 {
                                let (c, d) = (ot.v[(kk + 1) % 3], ot.v[(kk + 2) % 3]);
                                if (c, d) == (b, a) {
                                    ot.nb[kk] = idx[j];
                                }
                            }
                        }
                    }
                }
                self.tris[idx[j]].nb[k] = nb;
            }
        }
        if let Some(&t) = idx.first() {
            self.last = t;
        }
        idx
    }

    fn locate(&self, x: Point) -> Located {
        let tol = 1e-13 * self.scale;
        let mut t = self.last.min(self.tris.len() - 1);
        let mut steps = 0;
        let cap = 4 * self.tris.len() + 16;
        'walk: loop {
            for k in 0..3 {
                let (a, b) = self.tris[t].edge(k);
                let (pa, pb) = (self.p(a), self.p(b));
                if cross(pa, pb, x) < -tol * dist(pa, pb) {
                    let n = self.tris[t].nb[k];
                    if n == NONE {
                        return Located::Outside(t, k);
                    }
                    t = n;
                    steps += 1;
                    if steps > cap {
                        break 'walk;
                    }
                    continue 'walk;
                }
            }
            return Located::Inside(t);
        }
        // Walk cycled (only possible with near-degenerate input): scan everything.
        let mut best = (0, f64::NEG_INFINITY);
        for t in 0..self.tris.len() {
            let w = (0..3)
                .map(|k| {
                    let (a, b) = self.tris[t].edge(k);
                    cross(self.p(a), self.p(b), x) / dist(self.p(a), self.p(b))
                })
                .fold(f64::INFINITY, f64::min);
            if w > best.1 {
                best = (t, w);
            }
        }
        Located::Inside(best.0)
    }

    fn next_generation(&mut self) -> u32 {
        if self.stamp.len() < self.tris.len() {
            self.stamp.resize(self.tris.len(), 0);
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
        self.generation
    }

    /// Bowyer-Watson cavity of `x` grown from `seed`. Returns the cavity and
    /// its boundary edges `(a, b, outer)` with `(a, b)` counterclockwise.
    fn cavity(&mut self, seed: usize, x: Point) -> Result<(Vec<usize>, Vec<(usize, usize, usize)>)> {
        let tol = 1e-12 * self.scale;
        let mut cavity = vec![seed];
        let mut excluded: Vec<usize> = Vec::new();
        loop {
            // grow
            let gen = self.next_generation();
            for &c in &cavity {
                self.stamp[c] = gen;
            }
            let mut i = 0;
            while i < cavity.len() {
                let c = cavity[i];
                for k in 0..3 {
                    let n = self.tris[c].nb[k];
                    if n != NONE && self.stamp[n] != gen && !excluded.contains(&n) && self.in_circle(n, x) {
                        self.stamp[n] = gen;
                        cavity.push(n);
                    }
                }
                i += 1;
            }
            // boundary and star-shape check
            let mut edges = Vec::new();
            let mut offender = None;
            for &c in &cavity {
                for k in 0..3 {
                    let n = self.tris[c].nb[k];
                    if n != NONE && self.stamp[n] == gen {
                        continue;
                    }
                    let (a, b) = self.tris[c].edge(k);
                    let (pa, pb) = (self.p(a), self.p(b));
                    let len = dist(pa, pb);
                    let o = cross(pa, pb, x) / len;
                    if o > tol {
                        edges.push((a, b, n));
                    } else if n == NONE && o.abs() <= tol {
                        // x lies on this hull edge; the edge is split, not kept
                        let t = ((x[0] - pa[0]) * (pb[0] - pa[0]) + (x[1] - pa[1]) * (pb[1] - pa[1])) / (len * len);
                        if !(t > 0.0 && t < 1.0) {
                            return Err(Error::Geometry(format!("point {:?} duplicates a hull vertex", x)));
                        }
                    } else if c == seed {
                        if n != NONE && o.abs() <= tol {
                            // x on an interior edge of the seed: the neighbour must join
                            offender = Some((n, true));
                        } else {
                            return Err(Error::Geometry(format!("cannot insert point {:?}", x)));
                        }
                    } else {
                        offender = Some((c, false));
                    }
                    if offender.is_some() {
                        break;
                    }
                }
                if offender.is_some() {
                    break;
                }
            }
            match offender {
                None => return Ok((cavity, edges)),
                Some((n, true)) => {
                    if cavity.contains(&n) {
                        return Err(Error::Geometry(format!("cannot insert point {:?}", x)));
                    }
                    cavity.push(n);
                }
                Some((c, false)) => {
                    excluded.push(c);
                    cavity = vec![seed];
                }
            }
        }
    }

    fn insert_at(&mut self, seed: usize, x: Point, on_boundary: bool) -> Result<(usize, Vec<usize>)> {
        let (cavity, edges) = self.cavity(seed, x)?;
        for &c in &cavity {
            for &v in &self.tris[c].v {
                if dist(self.pts[v], x) <= 1e-12 * self.scale {
                    return Err(Error::Geometry(format!("point {:?} duplicates vertex {}", x, v)));
                }
            }
        }
        let id = self.pts.len();
        self.pts.push(x);
        self.boundary.push(on_boundary);
        let new: Vec<[usize; 3]> = edges.iter().map(|&(a, b, _)| [a, b, id]).collect();
        let idx = self.rebuild(&cavity, &new);
        Ok((id, idx))
    }

    fn insert(&mut self, x: Point, on_boundary: bool) -> Result<Vec<usize>> {
        match self.locate(x) {
            Located::Inside(t) => Ok(self.insert_at(t, x, on_boundary)?.1),
            Located::Outside(..) => Err(Error::Geometry(format!("point {:?} lies outside the domain", x))),
        }
    }

    fn split_hull_edge(&mut self, t: usize, k: usize) -> Result<Vec<usize>> {
        let (a, b) = self.tris[t].edge(k);
        let (pa, pb) = (self.p(a), self.p(b));
        let m = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
        Ok(self.insert_at(t, m, true)?.1)
    }

    fn encroached_hull_edge(&self, t: usize) -> Option<usize> {
        let tri = &self.tris[t];
        (0..3).find(|&k| {
            if tri.nb[k] != NONE {
                return false;
            }
            let (a, b) = tri.edge(k);
            encroaches(self.p(a), self.p(b), self.p(tri.v[k]))
        })
    }

    fn is_bad(&self, t: usize, min_angle_rad: f64, h_max: f64) -> bool {
        let [a, b, c] = self.tris[t].v;
        let p = [self.p(a), self.p(b), self.p(c)];
        let longest = dist(p[0], p[1]).max(dist(p[1], p[2])).max(dist(p[2], p[0]));
        longest > h_max || min_angle(p) < min_angle_rad
    }

    fn refine(&mut self, min_angle_rad: f64, h_max: f64, max_points: usize) -> Result<()> {
        let mut queue: VecDeque<usize> = (0..self.tris.len()).collect();
        loop {
            while let Some(t) = queue.pop_front() {
                if self.pts.len() > max_points {
                    return Err(Error::Geometry(format!("mesh refinement exceeded {} vertices", max_points)));
                }
                if let Some(k) = self.encroached_hull_edge(t) {
                    let new = self.split_hull_edge(t, k)?;
                    queue.extend(new);
                    continue;
                }
                if !self.is_bad(t, min_angle_rad, h_max) {
                    continue;
                }
                let [a, b, c] = self.tris[t].v;
                let cc = circumcenter(self.p(a), self.p(b), self.p(c));
                self.last = t;
                match self.locate(cc) {
                    Located::Outside(ot, ok) => {
                        let new = self.split_hull_edge(ot, ok)?;
                        queue.extend(new);
                        queue.push_back(t);
                    }
                    Located::Inside(seed) => {
                        let (cavity, edges) = self.cavity(seed, cc)?;
                        let mut split = None;
                        'scan: for &cv in &cavity {
                            for k in 0..3 {
                                if self.tris[cv].nb[k] == NONE {
                                    let (ea, eb) = self.tris[cv].edge(k);
                                    if encroaches(self.p(ea), self.p(eb), cc) {
                                        split = Some((cv, k));
                                        break 'scan;
                                    }
                                }
                            }
                        }
                        let _ = edges;
                        if let Some((cv, k)) = split {
                            let new = self.split_hull_edge(cv, k)?;
                            queue.extend(new);
                            queue.push_back(t);
                        } else {
                            let (_, new) = self.insert_at(seed, cc, false)?;
                            queue.extend(new);
                        }
                    }
                }
            }
            let remaining: Vec<usize> = (0..self.tris.len())
                .filter(|&t| self.encroached_hull_edge(t).is_some() || self.is_bad(t, min_angle_rad, h_max))
                .collect();
            if remaining.is_empty() {
                return Ok(());
            }
            queue.extend(remaining);
        }
    }

    fn into_mesh(self) -> TriMesh {
        let triangles: Vec<[usize; 3]> = self.tris.iter().map(|t| t.v).collect();
        let mut boundary_edges = Vec::new();
        for t in &self.tris {
            for k in 0..3 {
                if t.nb[k] == NONE {
                    let (a, b) = t.edge(k);
                    boundary_edges.push(BoundaryEdge { vertices: [a, b], normal: outward_normal(self.pts[a], self.pts[b]) });
                }
            }
        }
        let mut h: f64 = 0.0;
        for t in &triangles {
            for k in 0..3 {
                h = h.max(dist(self.pts[t[k]], self.pts[t[(k + 1) % 3]]));
            }
        }
        TriMesh { points: self.pts, triangles, on_boundary: self.boundary, boundary_edges, h }
    }
}

fn encroaches(a: Point, b: Point, x: Point) -> bool {
    let d = (a[0] - x[0]) * (b[0] - x[0]) + (a[1] - x[1]) * (b[1] - x[1]);
    let l2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    d < -1e-12 * l2
}

/// Lattice and boundary spacing relative to the target edge length.
pub const LATTICE_SPACING: f64 = 0.8;

/// Minimum angle enforced by refinement; the mesh contract requires 20 degrees.
pub const REFINE_MIN_ANGLE_DEG: f64 = 24.0;

/// Conforming triangulation of a convex domain with longest edge `<= h_target`.
///
/// Boundary polyline vertices are kept, boundary edges are subdivided to
/// spacing below `h_target`, the interior is seeded with a hexagonal lattice
/// anchored at the origin, and remaining poor or oversized triangles are
/// refined by circumcentre insertion with segment splitting.
pub fn triangulate_convex(dom: &ConvexDomain, h_target: f64) -> Result<TriMesh> {
    if !(h_target > 0.0) || !h_target.is_finite() {
        return Err(Error::Parameter(format!("h_target must be positive, got {}", h_target)));
    }
    let poly = dom.boundary_polyline();
    // A point inserted into a lattice of spacing s creates edges up to 1.16 s;
    // these must stay below h_target or refinement sweeps the whole lattice.
    let s = LATTICE_SPACING * h_target;
    let mut tr = Triangulation::from_hull(&poly)?;

    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let pieces = (dist(a, b) / s).ceil() as usize;
        for k in 1..pieces {
            let t = k as f64 / pieces as f64;
            tr.insert([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], true)?;
        }
    }

    let (lo, hi) = dom.bounding_box();
    let dy = s * 3f64.sqrt() / 2.0;
    let j0 = (lo[1] / dy).floor() as i64;
    let j1 = (hi[1] / dy).ceil() as i64;
    let i0 = (lo[0] / s).floor() as i64 - 1;
    let i1 = (hi[0] / s).ceil() as i64 + 1;
    for j in j0..=j1 {
        let shift = if j.rem_euclid(2) == 1 { 0.5 * s } else { 0.0 };
        for i in i0..=i1 {
            let x = [i as f64 * s + shift, j as f64 * dy];
            if dom.signed_distance(x) >= 0.55 * s {
                tr.insert(x, false)?;
            }
        }
    }

    let area = dom.area();
    let max_points = (40.0 * area / (h_target * h_target)) as usize + 200 * poly.len() + 10_000;
    tr.refine(REFINE_MIN_ANGLE_DEG.to_radians(), h_target, max_points)?;
    let mesh = tr.into_mesh();
    mesh.validate()?;
    Ok(mesh)
}
