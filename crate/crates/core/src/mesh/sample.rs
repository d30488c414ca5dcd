use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mesh, MeshError, PointCloud, Result};
use crate::geom::Point3;

/// A surface location expressed as a face plus barycentric weights, so the
/// same sample can be re-evaluated on deformed copies of the mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub face: usize,
    pub weights: [f64; 3],
}

impl SurfaceSample {
    pub fn position(&self, mesh: &Mesh) -> Point3 {
        let f = mesh.faces()[self.face];
        let v = mesh.vertices();
        let mut p = [0.0; 3];
        for (k, &w) in self.weights.iter().enumerate() {
            for d in 0..3 {
                p[d] += w * v[f[k]][d];
            }
        }
        p
    }
}

fn uniform_barycentric(rng: &mut impl Rng) -> [f64; 3] {
    let r1: f64 = rng.gen();
    let r2: f64 = rng.gen();
    let s = r1.sqrt();
    [1.0 - s, s * (1.0 - r2), s * r2]
}

/// Area-weighted face choice with uniform barycentric placement.
pub fn sample_barycentric(mesh: &Mesh, count: usize, seed: u64) -> Result<Vec<SurfaceSample>> {
    let mut cdf = Vec::with_capacity(mesh.face_count());
    let mut acc = 0.0;
    for &a in mesh.face_areas() {
        acc += a;
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(MeshError::DegenerateGeometry);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = cdf.len() - 1;
    Ok((0..count)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            // first face whose cumulative area exceeds u; zero-area faces are never chosen
            let face = cdf.partition_point(|&c| c <= u).min(last);
            SurfaceSample {
                face,
                weights: uniform_barycentric(&mut rng),
            }
        })
        .collect())
}

/// `per_face` uniform samples on every face, grouped by face.
pub fn sample_per_face(mesh: &Mesh, per_face: usize, seed: u64) -> Vec<SurfaceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(mesh.face_count() * per_face);
    for face in 0..mesh.face_count() {
        for _ in 0..per_face {
            out.push(SurfaceSample {
                face,
                weights: uniform_barycentric(&mut rng),
            });
        }
    }
    out
}

/// Samples `count` points on the surface with their source faces and face normals.
pub fn sample_surface(mesh: &Mesh, count: usize, seed: u64) -> Result<PointCloud> {
    let samples = sample_barycentric(mesh, count, seed)?;
    Ok(PointCloud {
        points: samples.iter().map(|s| s.position(mesh)).collect(),
        normals: Some(samples.iter().map(|s| mesh.face_normals()[s.face]).collect()),
        source_face: Some(samples.iter().map(|s| s.face).collect()),
        scalars: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_faces() -> Mesh {
        // areas 1 and 3
        let v = vec![
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [10.0, 0.0, 0.0],
            [16.0, 0.0, 0.0],
            [10.0, 1.0, 0.0],
        ];
        Mesh::new(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap()
    }

    #[test]
    fn points_inside_triangle() {
        let m = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let c = sample_surface(&m, 1000, 3).unwrap();
        for p in &c.points {
            let (b1, b2) = (p[0], p[1]);
            let b0 = 1.0 - b1 - b2;
            assert!(b0 >= -1e-15 && b1 >= 0.0 && b2 >= 0.0);
            assert_eq!(p[2], 0.0);
        }
        c.validate().unwrap();
    }

    #[test]
    fn area_weighting() {
        let m = two_faces();
        assert_eq!(m.face_areas(), &[1.0, 3.0]);
        for seed in [0, 1, 99] {
            let s = sample_barycentric(&m, 100_000, seed).unwrap();
            let share = s.iter().filter(|s| s.face == 1).count() as f64 / 1e5;
            assert!((0.745..=0.755).contains(&share), "share {share}");
        }
    }

    #[test]
    fn deterministic() {
        let m = two_faces();
        assert_eq!(sample_surface(&m, 500, 7).unwrap(), sample_surface(&m, 500, 7).unwrap());
        assert_ne!(sample_surface(&m, 500, 7).unwrap(), sample_surface(&m, 500, 8).unwrap());
    }

    #[test]
    fn zero_area_is_rejected() {
        let m = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(sample_surface(&m, 10, 0), Err(MeshError::DegenerateGeometry)));
    }
}
