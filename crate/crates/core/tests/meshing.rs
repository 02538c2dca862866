use std::collections::BTreeSet;

use proptest::prelude::*;

use plapx::geometry::{read_mesh, round_corners, triangulate_convex, write_mesh, ConvexDomain, TriMesh};

fn triangles_inside(m: &TriMesh, lo: f64, hi: f64) -> BTreeSet<[[u64; 2]; 3]> {
    m.triangles
        .iter()
        .filter_map(|t| {
            let mut v = t.map(|i| m.points[i]);
            if v.iter().any(|x| x[0] < lo || x[0] > hi || x[1] < lo || x[1] > hi) {
                return None;
            }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Some(v.map(|x| x.map(f64::to_bits)))
        })
        .collect()
}

#[test]
fn interior_lattice_is_shared_across_corner_radii() {
    let base = ConvexDomain::unit_square();
    let reference = triangles_inside(&triangulate_convex(&base, 0.05).unwrap(), 0.3, 0.7);
    assert!(!reference.is_empty());
    for r in [0.2, 0.1, 0.05] {
        let m = triangulate_convex(&round_corners(&base, r).unwrap(), 0.05).unwrap();
        assert_eq!(triangles_inside(&m, 0.3, 0.7), reference, "r = {}", r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn meshes_cover_the_domain(n in 3usize..9, radius in 0.3f64..2.0, h_frac in 0.08f64..0.4) {
        let dom = ConvexDomain::regular_polygon(n, [0.1, -0.2], radius).unwrap();
        let m = triangulate_convex(&dom, h_frac * radius).unwrap();
        m.validate().unwrap();
        prop_assert!((m.area() - dom.area()).abs() <= 1e-10 * dom.area());
        prop_assert!(m.min_angle_deg() > 20.0);
        let depth = m.points.iter().map(|&x| dom.signed_distance(x)).fold(f64::INFINITY, f64::min);
        prop_assert!(depth >= -1e-12, "vertex outside by {:e}", -depth);
    }

    #[test]
    fn rounded_domains_lose_area_monotonically(r1 in 0.01f64..0.2, r2 in 0.01f64..0.2) {
        let base = ConvexDomain::unit_square();
        let (a1, a2) = (round_corners(&base, r1).unwrap().area(), round_corners(&base, r2).unwrap().area());
        prop_assert!(a1 < 1.0 && a2 < 1.0);
        prop_assert_eq!(r1 < r2, a1 > a2);
    }

    #[test]
    fn mesh_text_round_trips(h in 0.1f64..0.5) {
        let m = triangulate_convex(&ConvexDomain::unit_square(), h).unwrap();
        let back = read_mesh(&write_mesh(&m)).unwrap();
        prop_assert_eq!(back.points, m.points);
        prop_assert_eq!(back.triangles, m.triangles);
    }
}
