//! Indexed triangle meshes, point clouds and the topology queries the
//! reconstruction pipeline relies on.
//!
//! A [`Mesh`] is immutable once built. Derived data (edges, face adjacency,
//! normals, areas) is computed eagerly in the constructor, so a mesh can be
//! shared across threads freely. Operations that change geometry or
//! connectivity return a new mesh.

mod boundary;
mod icosphere;
pub mod io;
mod prune;
mod sample;

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::geom::{self, Point3};

pub use boundary::{extract_boundary_loops, BoundaryLoop, BoundaryLoops};
pub use icosphere::{make_grid_square, make_icosphere, MAX_ICOSPHERE_LEVEL};
pub use prune::{prune_faces, VertexRemap};
pub use sample::{sample_barycentric, sample_per_face, sample_surface, SurfaceSample};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("face {0} repeats a vertex index")]
    DegenerateFace(usize),
    #[error("edge ({0}, {1}) is shared by more than two faces")]
    NonManifoldEdge(usize, usize),
    #[error("icosphere level {0} exceeds the maximum of {MAX_ICOSPHERE_LEVEL}")]
    LevelTooLarge(u32),
    #[error("mesh has zero total surface area")]
    DegenerateGeometry,
    #[error("operation would leave a mesh without faces")]
    EmptyMesh,
    #[error("mask has {mask} entries but the mesh has {faces} faces")]
    MaskLength { mask: usize, faces: usize },
    #[error("expected {expected} vertex positions, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("point cloud attribute `{0}` has the wrong length")]
    CloudLength(&'static str),
    #[error("point cloud normal {0} is not unit length")]
    NonUnitNormal(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MeshError>;

/// Undirected edge, stored with `a < b`.
pub type Edge = [usize; 2];

/// Connectivity shared between meshes that differ only in vertex positions.
#[derive(Debug)]
pub struct Topology {
    faces: Vec<[usize; 3]>,
    vertex_count: usize,
    edges: Vec<Edge>,
    /// Incident faces per edge; the second slot is `None` on boundary edges.
    edge_faces: Vec<(usize, Option<usize>)>,
    vertex_neighbors: Vec<Vec<usize>>,
}

impl Topology {
    fn build(vertex_count: usize, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mut slots: HashMap<Edge, (usize, Option<usize>)> = HashMap::with_capacity(faces.len() * 2);
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx >= vertex_count {
                    return Err(MeshError::IndexOutOfRange {
                        face: fi,
                        index: idx,
                        count: vertex_count,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace(fi));
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                match slots.get_mut(&key) {
                    None => {
                        slots.insert(key, (fi, None));
                    }
                    Some(slot) if slot.1.is_none() => slot.1 = Some(fi),
                    Some(_) => return Err(MeshError::NonManifoldEdge(key[0], key[1])),
                }
            }
        }
        let mut pairs: Vec<(Edge, (usize, Option<usize>))> = slots.into_iter().collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let (edges, edge_faces): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();

        let mut vertex_neighbors = vec![Vec::new(); vertex_count];
        for e in &edges {
            vertex_neighbors[e[0]].push(e[1]);
            vertex_neighbors[e[1]].push(e[0]);
        }
        for n in &mut vertex_neighbors {
            n.sort_unstable();
        }
        Ok(Self {
            faces,
            vertex_count,
            edges,
            edge_faces,
            vertex_neighbors,
        })
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_faces(&self) -> &[(usize, Option<usize>)] {
        &self.edge_faces
    }

    /// Face pairs across every interior (two-face) edge, in edge order.
    pub fn interior_face_pairs(&self) -> Vec<[usize; 2]> {
        self.edge_faces
            .iter()
            .filter_map(|&(f0, f1)| f1.map(|f1| [f0, f1]))
            .collect()
    }

    pub fn boundary_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges
            .iter()
            .zip(&self.edge_faces)
            .filter(|(_, ef)| ef.1.is_none())
            .map(|(e, _)| *e)
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point3>,
    topology: Arc<Topology>,
    face_normals: Vec<Point3>,
    face_areas: Vec<f64>,
}

impl Mesh {
    /// Builds a mesh, rejecting out-of-range indices, degenerate index
    /// triples and edges shared by more than two faces.
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let topology = Topology::build(vertices.len(), faces)?;
        Ok(Self::from_parts(vertices, Arc::new(topology)))
    }

    fn from_parts(vertices: Vec<Point3>, topology: Arc<Topology>) -> Self {
        let mut face_normals = Vec::with_capacity(topology.faces.len());
        let mut face_areas = Vec::with_capacity(topology.faces.len());
        for f in &topology.faces {
            let n = geom::cross(
                geom::sub(vertices[f[1]], vertices[f[0]]),
                geom::sub(vertices[f[2]], vertices[f[0]]),
            );
            let len = geom::norm(n);
            face_areas.push(0.5 * len);
            face_normals.push(if len > 0.0 { geom::scale(n, 1.0 / len) } else { [0.0; 3] });
        }
        Self {
            vertices,
            topology,
            face_normals,
            face_areas,
        }
    }

    /// Mesh over an existing connectivity.
    pub fn from_topology(vertices: Vec<Point3>, topology: Arc<Topology>) -> Result<Self> {
        if vertices.len() != topology.vertex_count {
            return Err(MeshError::VertexCount {
                expected: topology.vertex_count,
                got: vertices.len(),
            });
        }
        Ok(Self::from_parts(vertices, topology))
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Point3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(MeshError::VertexCount {
                expected: self.vertices.len(),
                got: vertices.len(),
            });
        }
        Ok(Self::from_parts(vertices, Arc::clone(&self.topology)))
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.topology.faces
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn edges(&self) -> &[Edge] {
        &self.topology.edges
    }

    pub fn face_normals(&self) -> &[Point3] {
        &self.face_normals
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    pub fn vertex_neighbors(&self, v: usize) -> &[usize] {
        &self.topology.vertex_neighbors[v]
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.topology.faces.len()
    }

    pub fn edge_count(&self) -> usize {
        self.topology.edges.len()
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas.iter().sum()
    }

    pub fn is_closed(&self) -> bool {
        self.topology.edge_faces.iter().all(|ef| ef.1.is_some())
    }

    /// Drops faces whose area is below `min_area`, compacting vertices.
    /// Used only when exporting a finished reconstruction.
    pub fn without_degenerate_faces(&self, min_area: f64) -> Result<(Mesh, VertexRemap)> {
        let mask: Vec<bool> = self.face_areas.iter().map(|&a| a < min_area).collect();
        prune_faces(self, &mask)
    }
}

/// V - E + F.
pub fn euler_characteristic(mesh: &Mesh) -> i64 {
    mesh.vertex_count() as i64 - mesh.edge_count() as i64 + mesh.face_count() as i64
}

/// Points with optional normals, source faces and per-point scalars.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub normals: Option<Vec<Point3>>,
    pub source_face: Option<Vec<usize>>,
    pub scalars: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point3>) -> Self {
        Self {
            points,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that attribute lists match in length and normals are unit.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(MeshError::CloudLength("normals"));
            }
            for (i, nrm) in normals.iter().enumerate() {
                if (geom::norm(*nrm) - 1.0).abs() > 1e-9 {
                    return Err(MeshError::NonUnitNormal(i));
                }
            }
        }
        if self.source_face.as_ref().is_some_and(|s| s.len() != n) {
            return Err(MeshError::CloudLength("source_face"));
        }
        if self.scalars.as_ref().is_some_and(|s| s.len() != n) {
            return Err(MeshError::CloudLength("scalars"));
        }
        Ok(())
    }

    /// Subset by index, carrying every present attribute along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
            source_face: self
                .source_face
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
            scalars: self.scalars.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_faces() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(matches!(
            Mesh::new(v.clone(), vec![[0, 1, 3]]),
            Err(MeshError::IndexOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            Mesh::new(v.clone(), vec![[0, 1, 1]]),
            Err(MeshError::DegenerateFace(0))
        ));
        let mut v4 = v;
        v4.push([0.0, 0.0, 1.0]);
        v4.push([0.0, 0.0, -1.0]);
        // three faces on edge (0, 1)
        let r = Mesh::new(v4, vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]]);
        assert!(matches!(r, Err(MeshError::NonManifoldEdge(0, 1))));
    }

    #[test]
    fn tetrahedron_counts() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let m = Mesh::new(v, vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]).unwrap();
        assert_eq!(m.edge_count(), 6);
        assert_eq!(euler_characteristic(&m), 2);
        assert!(m.is_closed());
        assert_eq!(m.topology().interior_face_pairs().len(), 6);
    }

    #[test]
    fn cloud_validation() {
        let mut c = PointCloud::from_points(vec![[0.0; 3]; 2]);
        c.normals = Some(vec![[1.0, 0.0, 0.0]]);
        assert!(matches!(c.validate(), Err(MeshError::CloudLength("normals"))));
        c.normals = Some(vec![[1.0, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        assert!(matches!(c.validate(), Err(MeshError::NonUnitNormal(1))));
    }
}
