use std::collections::BTreeMap;

use super::Mesh;

/// A closed cycle of boundary edges.
///
/// Entry `i` is adjacent along the boundary to entries `i - 1` and `i + 1`
/// (cyclically). A vertex at a pinch may occur more than once, each
/// occurrence with its own neighbor pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryLoop {
    pub vertices: Vec<usize>,
}

impl BoundaryLoop {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// The two boundary neighbors `N(x)` of the entry at `i`.
    pub fn neighbors(&self, i: usize) -> [usize; 2] {
        let n = self.vertices.len();
        [self.vertices[(i + n - 1) % n], self.vertices[(i + 1) % n]]
    }

    /// `(vertex, [prev, next])` for every entry.
    pub fn entries(&self) -> impl Iterator<Item = (usize, [usize; 2])> + '_ {
        (0..self.len()).map(|i| (self.vertices[i], self.neighbors(i)))
    }

    pub fn edges(&self) -> impl Iterator<Item = [usize; 2]> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            [a.min(b), a.max(b)]
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BoundaryLoops {
    pub loops: Vec<BoundaryLoop>,
    /// Vertices with more than two incident boundary edges.
    pub pinches: Vec<usize>,
}

impl BoundaryLoops {
    /// Flattened `(vertex, neighbors)` triples over all loops.
    pub fn entries(&self) -> Vec<(usize, [usize; 2])> {
        self.loops.iter().flat_map(|l| l.entries()).collect()
    }

    pub fn vertex_entry_count(&self) -> usize {
        self.loops.iter().map(|l| l.len()).sum()
    }
}

/// Partitions the single-face edges of `mesh` into closed loops.
///
/// At a pinch vertex the boundary neighbors are sorted ascending and paired
/// consecutively; a walk arriving from one member of a pair leaves through
/// the other. Walks start from the smallest unvisited edge, so the output is
/// a pure function of the connectivity.
pub fn extract_boundary_loops(mesh: &Mesh) -> BoundaryLoops {
    let mut adjacency: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in mesh.topology().boundary_edges() {
        adjacency.entry(e[0]).or_default().push(e[1]);
        adjacency.entry(e[1]).or_default().push(e[0]);
    }
    if adjacency.is_empty() {
        return BoundaryLoops::default();
    }
    let mut pinches = Vec::new();
    for (&v, nbrs) in adjacency.iter_mut() {
        nbrs.sort_unstable();
        if nbrs.len() > 2 {
            pinches.push(v);
        }
    }
    let partner = |v: usize, from: usize| -> usize {
        let nbrs = &adjacency[&v];
        let pos = nbrs.iter().position(|&n| n == from).expect("edge present");
        // Vertex boundary degree is always even in an edge-manifold mesh.
        let mate = pos ^ 1;
        nbrs.get(mate).copied().unwrap_or(nbrs[pos])
    };

    let mut edges: Vec<[usize; 2]> = mesh.topology().boundary_edges().collect();
    edges.sort_unstable();
    let mut visited: BTreeMap<[usize; 2], bool> = edges.iter().map(|&e| (e, false)).collect();
    let mut loops = Vec::new();
    for start in edges {
        if visited[&start] {
            continue;
        }
        let mut verts = vec![start[0]];
        let (mut prev, mut cur) = (start[0], start[1]);
        *visited.get_mut(&start).expect("edge") = true;
        loop {
            let next = partner(cur, prev);
            let key = [cur.min(next), cur.max(next)];
            let seen = visited.get_mut(&key).expect("boundary edge");
            if *seen {
                // Only the starting edge can close the walk.
                debug_assert_eq!(key, start);
                break;
            }
            *seen = true;
            verts.push(cur);
            prev = cur;
            cur = next;
        }
        loops.push(BoundaryLoop { vertices: verts });
    }
    BoundaryLoops { loops, pinches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_grid_square, make_icosphere, prune_faces};

    #[test]
    fn closed_mesh_has_no_loops() {
        let m = make_icosphere(4).unwrap();
        assert!(extract_boundary_loops(&m).loops.is_empty());
    }

    #[test]
    fn grid_perimeter() {
        let l = extract_boundary_loops(&make_grid_square(4).unwrap());
        assert_eq!(l.loops.len(), 1);
        assert_eq!(l.loops[0].len(), 12);
        let l3 = extract_boundary_loops(&make_grid_square(3).unwrap());
        assert_eq!(l3.loops[0].len(), 8);
        assert!(l3.pinches.is_empty());
    }

    #[test]
    fn consecutive_entries_share_boundary_edges() {
        let g = make_grid_square(5).unwrap();
        let l = &extract_boundary_loops(&g).loops[0];
        let boundary: Vec<_> = g.topology().boundary_edges().collect();
        for e in l.edges() {
            assert!(boundary.contains(&e));
        }
    }

    #[test]
    fn pinch_splits_into_two_loops() {
        // Two triangles sharing only vertex 0.
        let v = vec![
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
            [-1.0, -1.0, 0.0],
        ];
        let m = crate::mesh::Mesh::new(v, vec![[0, 1, 2], [0, 3, 4]]).unwrap();
        let l = extract_boundary_loops(&m);
        assert_eq!(l.pinches, vec![0]);
        // neighbors of 0 sorted: 1,2,3,4 -> pairs (1,2) and (3,4)
        assert_eq!(l.loops.len(), 2);
        assert!(l.loops.iter().all(|lp| lp.len() == 3));
    }

    #[test]
    fn pinch_pairing_can_join_fans() {
        // Fans {0,1,3} and {0,2,4}: sorted neighbors 1,2,3,4 pair (1,2),(3,4),
        // which stitches both triangles into one figure-eight walk.
        let v = vec![
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [-1.0, -1.0, 0.0],
        ];
        let m = crate::mesh::Mesh::new(v, vec![[0, 1, 3], [0, 2, 4]]).unwrap();
        let l = extract_boundary_loops(&m);
        assert_eq!(l.loops.len(), 1);
        assert_eq!(l.loops[0].len(), 6);
        assert_eq!(l.loops[0].vertices.iter().filter(|&&v| v == 0).count(), 2);
    }

    #[test]
    fn pruned_center_quad() {
        let g = make_grid_square(3).unwrap();
        // drop the corner cell; its corner vertex is orphaned and the loop cuts the corner
        let mut mask = vec![false; 8];
        mask[0] = true;
        mask[1] = true;
        let (p, _) = prune_faces(&g, &mask).unwrap();
        let l = extract_boundary_loops(&p);
        assert_eq!(l.loops.len(), 1);
        assert_eq!(l.loops[0].len(), 8);
    }
}
