use super::{Mesh, MeshError, Result};

/// Old vertex index to new index; `None` for vertices that were deleted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexRemap {
    pub old_to_new: Vec<Option<usize>>,
    /// For each new vertex, the index it had before pruning.
    pub new_to_old: Vec<usize>,
}

impl VertexRemap {
    pub fn identity(n: usize) -> Self {
        Self {
            old_to_new: (0..n).map(Some).collect(),
            new_to_old: (0..n).collect(),
        }
    }

    /// Remap of `self` followed by `next`.
    pub fn then(&self, next: &VertexRemap) -> VertexRemap {
        let old_to_new = self
            .old_to_new
            .iter()
            .map(|m| m.and_then(|mid| next.old_to_new[mid]))
            .collect();
        let new_to_old = next.new_to_old.iter().map(|&mid| self.new_to_old[mid]).collect();
        VertexRemap { old_to_new, new_to_old }
    }
}

/// Removes the faces flagged in `remove_mask`, then deletes vertices no
/// remaining face references. Surviving vertices keep their relative order.
pub fn prune_faces(mesh: &Mesh, remove_mask: &[bool]) -> Result<(Mesh, VertexRemap)> {
    if remove_mask.len() != mesh.face_count() {
        return Err(MeshError::MaskLength {
            mask: remove_mask.len(),
            faces: mesh.face_count(),
        });
    }
    if !remove_mask.iter().any(|&r| r) {
        return Ok((mesh.clone(), VertexRemap::identity(mesh.vertex_count())));
    }
    let kept: Vec<[usize; 3]> = mesh
        .faces()
        .iter()
        .zip(remove_mask)
        .filter(|(_, &r)| !r)
        .map(|(f, _)| *f)
        .collect();
    if kept.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    let mut used = vec![false; mesh.vertex_count()];
    for f in &kept {
        for &v in f {
            used[v] = true;
        }
    }
    let mut old_to_new = vec![None; mesh.vertex_count()];
    let mut new_to_old = Vec::new();
    for (old, &u) in used.iter().enumerate() {
        if u {
            old_to_new[old] = Some(new_to_old.len());
            new_to_old.push(old);
        }
    }
    let vertices = new_to_old.iter().map(|&o| mesh.vertices()[o]).collect();
    let faces = kept
        .iter()
        .map(|f| f.map(|v| old_to_new[v].expect("referenced vertex kept")))
        .collect();
    let pruned = Mesh::new(vertices, faces)?;
    Ok((pruned, VertexRemap { old_to_new, new_to_old }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{euler_characteristic, extract_boundary_loops, make_grid_square, make_icosphere};

    #[test]
    fn one_face_opens_triangular_hole() {
        let m = make_icosphere(0).unwrap();
        let mut mask = vec![false; 20];
        mask[7] = true;
        let (p, remap) = prune_faces(&m, &mask).unwrap();
        assert_eq!(p.face_count(), 19);
        assert_eq!(euler_characteristic(&p), 1);
        assert_eq!(remap.new_to_old.len(), 12);
        let loops = extract_boundary_loops(&p);
        assert_eq!(loops.loops.len(), 1);
        assert_eq!(loops.loops[0].len(), 3);
    }

    #[test]
    fn all_false_is_identity() {
        let m = make_grid_square(4).unwrap();
        let (p, remap) = prune_faces(&m, &vec![false; m.face_count()]).unwrap();
        assert_eq!(p.faces(), m.faces());
        assert_eq!(p.vertices(), m.vertices());
        assert_eq!(remap, VertexRemap::identity(m.vertex_count()));
    }

    #[test]
    fn removing_everything_fails() {
        let m = make_grid_square(2).unwrap();
        assert!(matches!(prune_faces(&m, &[true, true]), Err(MeshError::EmptyMesh)));
        assert!(matches!(prune_faces(&m, &[true]), Err(MeshError::MaskLength { .. })));
    }

    #[test]
    fn orphans_are_compacted() {
        // corner triangle of a 2x2-cell grid; removing it orphans nothing,
        // removing the whole corner quad orphans vertex 0
        let m = make_grid_square(3).unwrap();
        let mut mask = vec![false; 8];
        mask[0] = true;
        mask[1] = true;
        let (p, remap) = prune_faces(&m, &mask).unwrap();
        assert_eq!(p.vertex_count(), 8);
        assert_eq!(remap.old_to_new[0], None);
        assert_eq!(remap.old_to_new[1], Some(0));
        for (new, &old) in remap.new_to_old.iter().enumerate() {
            assert_eq!(p.vertices()[new], m.vertices()[old]);
        }
    }

    #[test]
    fn remap_composition() {
        let m = make_icosphere(1).unwrap();
        let mut mask = vec![false; m.face_count()];
        mask[3] = true;
        let (p1, r1) = prune_faces(&m, &mask).unwrap();
        let mut mask2 = vec![false; p1.face_count()];
        mask2[0] = true;
        mask2[10] = true;
        let (p2, r2) = prune_faces(&p1, &mask2).unwrap();
        let r = r1.then(&r2);
        for (new, &old) in r.new_to_old.iter().enumerate() {
            assert_eq!(p2.vertices()[new], m.vertices()[old]);
            assert_eq!(r.old_to_new[old], Some(new));
        }
    }
}
