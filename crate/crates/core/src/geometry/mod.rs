//! Convex domains, triangular meshes and the mesher.

pub mod delaunay;
pub mod domain;
pub mod mesh;

pub use delaunay::triangulate_convex;
pub use domain::{round_corners, Circle, ConvexDomain, CurvatureSample, Point};
pub use mesh::{read_mesh, refine_uniform, write_mesh, BoundaryEdge, Locator, TriMesh};
