use std::collections::HashMap;

use super::{Mesh, MeshError, Result};
use crate::geom::{self, Point3};

/// Level 7 already has 163842 vertices; anything beyond is a mistake.
pub const MAX_ICOSPHERE_LEVEL: u32 = 7;

/// Unit sphere from repeated midpoint subdivision of a regular icosahedron.
///
/// Midpoints are deduplicated by the index pair of the edge they split, so
/// the result is watertight without any coordinate comparisons.
pub fn make_icosphere(level: u32) -> Result<Mesh> {
    if level > MAX_ICOSPHERE_LEVEL {
        return Err(MeshError::LevelTooLarge(level));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&p| geom::normalize(p, 0.0).expect("nonzero"))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::with_capacity(faces.len() * 3 / 2);
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoints.entry(key).or_insert_with(|| {
                    let m = geom::scale(geom::add(vertices[a], vertices[b]), 0.5);
                    vertices.push(geom::normalize(m, 0.0).expect("midpoint off origin"));
                    vertices.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    Mesh::new(vertices, faces)
}

/// `n x n` vertex grid over the unit square in the z = 0 plane, two
/// counter-clockwise triangles per cell (normals along +z).
pub fn make_grid_square(n: usize) -> Result<Mesh> {
    if n < 2 {
        return Err(MeshError::EmptyMesh);
    }
    let step = 1.0 / (n - 1) as f64;
    let mut vertices = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            vertices.push([i as f64 * step, j as f64 * step, 0.0]);
        }
    }
    let id = |i: usize, j: usize| j * n + i;
    let mut faces = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    Mesh::new(vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::euler_characteristic;

    #[test]
    fn icosahedron_counts() {
        let m = make_icosphere(0).unwrap();
        assert_eq!((m.vertex_count(), m.edge_count(), m.face_count()), (12, 30, 20));
    }

    #[test]
    fn level_four_template() {
        let m = make_icosphere(4).unwrap();
        assert_eq!(m.vertex_count(), 2562);
        assert_eq!(m.face_count(), 5120);
        assert_eq!(m.edge_count(), 7680);
        assert_eq!(euler_characteristic(&m), 2);
        assert!(m.is_closed());
        for v in m.vertices() {
            assert!((geom::norm(*v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn faces_point_outward() {
        let m = make_icosphere(2).unwrap();
        for (f, n) in m.faces().iter().zip(m.face_normals()) {
            let c = m.vertices()[f[0]];
            assert!(geom::dot(*n, c) > 0.0);
        }
    }

    #[test]
    fn level_guard() {
        assert!(matches!(make_icosphere(8), Err(MeshError::LevelTooLarge(8))));
    }

    #[test]
    fn grid_counts() {
        let g = make_grid_square(3).unwrap();
        assert_eq!((g.vertex_count(), g.face_count()), (9, 8));
        let g2 = make_grid_square(2).unwrap();
        assert_eq!((g2.vertex_count(), g2.face_count()), (4, 2));
        assert_eq!(euler_characteristic(&g2), 1);
        assert_eq!(euler_characteristic(&g), 1);
        assert!(g.face_normals().iter().all(|n| (n[2] - 1.0).abs() < 1e-15));
    }
}
