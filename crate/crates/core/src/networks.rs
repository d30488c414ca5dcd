//! The learned components: vertex deformation, per-point error estimation,
//! in-plane boundary refinement and the point-cloud encoder.
//!
//! Each component has a graph form (`*_var`) used during training and a
//! plain form that evaluates the same graph on constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BoundMlp, MlpParams, Tape, Tensor, Value};
use crate::losses::{MeshVar, COINCIDENT_EPS};
use crate::mesh::{prune_faces, sample_per_face, BoundaryLoops, Mesh, PointCloud, VertexRemap};
use crate::{Error, Result};

/// Latent shape code conditioning every network.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFeature(Vec<f64>);

impl ShapeFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("shape feature"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("shape feature has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `[1 x F]` row.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::row_vector(self.0.clone())
    }
}

/// Estimated error per face, in length units.
#[derive(Debug, Clone, PartialEq)]
pub struct PerFaceError(pub Vec<f64>);

impl PerFaceError {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Widths of all four networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    /// Hidden widths of the per-point encoder; its last layer maps to `feature_dim`.
    pub encoder_hidden: Vec<usize>,
    pub deform_hidden: Vec<usize>,
    pub error_hidden: Vec<usize>,
    pub refine_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        let head = vec![1024, 512, 256, 128];
        Self {
            feature_dim: 1024,
            encoder_hidden: vec![64, 128],
            deform_hidden: head.clone(),
            error_hidden: head.clone(),
            refine_hidden: head,
        }
    }
}

fn dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain([out])
        .collect()
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let all = [
            &self.encoder_hidden,
            &self.deform_hidden,
            &self.error_hidden,
            &self.refine_hidden,
        ];
        if self.feature_dim == 0 || all.iter().any(|h| h.contains(&0)) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        dims(3, &self.encoder_hidden, self.feature_dim)
    }

    /// `[3 + F, hidden.., 3]`.
    pub fn deform_dims(&self) -> Vec<usize> {
        dims(3 + self.feature_dim, &self.deform_hidden, 3)
    }

    /// `[3 + F, hidden.., 1]`.
    pub fn error_dims(&self) -> Vec<usize> {
        dims(3 + self.feature_dim, &self.error_hidden, 1)
    }

    /// `[3 + F, hidden.., 2]`: two in-plane coefficients.
    pub fn refine_dims(&self) -> Vec<usize> {
        dims(3 + self.feature_dim, &self.refine_hidden, 2)
    }

    pub fn init_encoder(&self, rng: &mut impl Rng) -> MlpParams {
        MlpParams::init(&self.encoder_dims(), Activation::Relu, Activation::Relu, rng)
    }

    pub fn init_deform(&self, rng: &mut impl Rng) -> MlpParams {
        MlpParams::init(&self.deform_dims(), Activation::Relu, Activation::Tanh, rng)
    }

    pub fn init_error(&self, rng: &mut impl Rng) -> MlpParams {
        MlpParams::init(&self.error_dims(), Activation::Relu, Activation::None, rng)
    }

    pub fn init_refine(&self, rng: &mut impl Rng) -> MlpParams {
        MlpParams::init(&self.refine_dims(), Activation::Relu, Activation::Tanh, rng)
    }
}

fn check_layout(params: &MlpParams, expected_in: usize, expected_out: usize, what: &str) -> Result<()> {
    if params.in_dim() != expected_in || params.out_dim() != expected_out {
        return Err(Error::Config(format!(
            "{what} network maps {} -> {}, expected {expected_in} -> {expected_out}",
            params.in_dim(),
            params.out_dim()
        )));
    }
    Ok(())
}

/// Offsets every vertex by `MLP(concat(vertex, feature))`.
pub fn deform_var<'t>(mesh: &MeshVar<'t>, feature: &Value<'t>, net: &BoundMlp<'t>) -> Result<MeshVar<'t>> {
    let offsets = net.forward_conditioned(mesh.positions, *feature)?;
    mesh.displaced(&offsets)
}

/// Raw (unclamped) error predictions `[n x 1]` for the given points.
pub fn error_var<'t>(points: &Value<'t>, feature: &Value<'t>, net: &BoundMlp<'t>) -> Result<Value<'t>> {
    Ok(net.forward_conditioned(*points, *feature)?)
}

/// Shared per-point MLP followed by a coordinatewise max over points.
pub fn encode_var<'t>(points: &Value<'t>, net: &BoundMlp<'t>) -> Result<Value<'t>> {
    if points.rows() == 0 {
        return Err(Error::Empty("encoder input"));
    }
    Ok(net.forward(*points)?.max_over_rows()?.0)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefineDiagnostics {
    /// Boundary vertices whose two edge directions do not span a plane;
    /// they move along the single available direction.
    pub degenerate_plane: Vec<usize>,
    /// Vertices at boundary pinches; only their first loop entry is refined.
    pub pinches: Vec<usize>,
}

/// Length of `u1 x u2` below which the edge plane is treated as degenerate.
const PLANE_EPS: f64 = 1e-9;

fn unit_dirs<'t>(d: &Value<'t>) -> Result<(Value<'t>, Vec<bool>)> {
    let len = d.norm_rows();
    let short: Vec<bool> = len.value().data().iter().map(|&l| l < COINCIDENT_EPS).collect();
    let mut u = d.div(&len.clamp_min(COINCIDENT_EPS))?;
    if short.iter().any(|&s| s) {
        let mask = Tensor::column(short.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect());
        u = u.mul(&d.tape().constant(mask))?;
    }
    Ok((u, short))
}

/// Moves each boundary vertex x by `a u1 + b u2`, where `u_i` is the unit
/// direction from its i-th boundary neighbour to x and `(a, b)` come from
/// the network. Interior vertices are untouched.
pub fn refine_var<'t>(
    mesh: &MeshVar<'t>,
    loops: &BoundaryLoops,
    feature: &Value<'t>,
    net: &BoundMlp<'t>,
) -> Result<(MeshVar<'t>, RefineDiagnostics)> {
    let mut diag = RefineDiagnostics {
        pinches: loops.pinches.clone(),
        ..Default::default()
    };
    let n = mesh.positions.rows();
    let mut slot = vec![0usize; n];
    let mut entries = Vec::new();
    for (v, nb) in loops.entries() {
        if slot[v] == 0 {
            entries.push((v, nb));
            slot[v] = entries.len();
        }
    }
    if entries.is_empty() {
        return Ok((mesh.clone(), diag));
    }
    let pos = &mesh.positions;
    let xs: Vec<usize> = entries.iter().map(|e| e.0).collect();
    let x = pos.gather(&xs)?;
    let (u1, s1) = unit_dirs(&x.sub(&pos.gather(&entries.iter().map(|e| e.1[0]).collect::<Vec<_>>())?)?)?;
    let (u2, s2) = unit_dirs(&x.sub(&pos.gather(&entries.iter().map(|e| e.1[1]).collect::<Vec<_>>())?)?)?;
    let spans = u1.cross_rows(&u2)?.norm_rows();
    for (i, &v) in xs.iter().enumerate() {
        if s1[i] || s2[i] || spans.value().data()[i] < PLANE_EPS {
            diag.degenerate_plane.push(v);
        }
    }
    let coeff = net.forward_conditioned(x, *feature)?;
    let disp = u1
        .mul(&coeff.slice_cols(0, 1)?)?
        .add(&u2.mul(&coeff.slice_cols(1, 1)?)?)?;
    // row 0 is a zero displacement for interior vertices
    let tape = pos.tape();
    let padded = tape.concat_rows(&[tape.constant(Tensor::zeros(1, 3)), disp])?;
    let full = padded.gather(&slot)?;
    Ok((mesh.displaced(&full)?, diag))
}

/// Plain deformation of `mesh`; connectivity is shared with the input.
pub fn deform(mesh: &Mesh, feature: &ShapeFeature, params: &MlpParams) -> Result<Mesh> {
    check_layout(params, 3 + feature.dim(), 3, "deform")?;
    let tape = Tape::new();
    let f = tape.constant(feature.to_tensor());
    deform_var(&MeshVar::constant(&tape, mesh), &f, &params.bind(&tape, false))?.to_mesh()
}

/// Mean raw prediction per face over `samples_per_face` uniform samples,
/// clamped to be non-negative.
pub fn estimate_errors(
    mesh: &Mesh,
    feature: &ShapeFeature,
    params: &MlpParams,
    samples_per_face: usize,
    seed: u64,
) -> Result<PerFaceError> {
    check_layout(params, 3 + feature.dim(), 1, "error")?;
    if samples_per_face == 0 {
        return Err(Error::Config("samples_per_face must be at least 1".into()));
    }
    let samples = sample_per_face(mesh, samples_per_face, seed);
    let tape = Tape::new();
    let pts = MeshVar::constant(&tape, mesh).sample_points(&samples)?;
    let pred = error_var(&pts, &tape.constant(feature.to_tensor()), &params.bind(&tape, false))?;
    Ok(face_means(pred.value().data(), samples_per_face))
}

/// Per-face mean of grouped predictions, clamped at zero.
pub(crate) fn face_means(pred: &[f64], per_face: usize) -> PerFaceError {
    PerFaceError(
        pred.chunks(per_face)
            .map(|c| (c.iter().sum::<f64>() / per_face as f64).max(0.0))
            .collect(),
    )
}

/// Removes faces whose estimated error exceeds `tau`.
pub fn prune_by_threshold(mesh: &Mesh, errors: &PerFaceError, tau: f64) -> Result<(Mesh, VertexRemap)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("pruning threshold must be positive, got {tau}")));
    }
    let mask: Vec<bool> = errors.values().iter().map(|&e| e > tau).collect();
    Ok(prune_faces(mesh, &mask)?)
}

/// Plain boundary refinement.
pub fn refine_boundary(
    mesh: &Mesh,
    loops: &BoundaryLoops,
    feature: &ShapeFeature,
    params: &MlpParams,
) -> Result<(Mesh, RefineDiagnostics)> {
    check_layout(params, 3 + feature.dim(), 2, "refine")?;
    let tape = Tape::new();
    let f = tape.constant(feature.to_tensor());
    let (out, diag) = refine_var(&MeshVar::constant(&tape, mesh), loops, &f, &params.bind(&tape, false))?;
    Ok((out.to_mesh()?, diag))
}

/// Permutation-invariant feature of a point cloud.
pub fn encode_pointcloud(cloud: &PointCloud, params: &MlpParams) -> Result<ShapeFeature> {
    check_layout(params, 3, params.out_dim(), "encoder")?;
    let tape = Tape::new();
    let pts = tape.constant(Tensor::from_points(&cloud.points));
    let f = encode_var(&pts, &params.bind(&tape, false))?;
    ShapeFeature::new(f.value().data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{cross, dot, norm, sub};
    use crate::mesh::{extract_boundary_loops, make_grid_square, make_icosphere, sample_per_face};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Architecture {
        Architecture {
            feature_dim: 8,
            encoder_hidden: vec![6, 7],
            deform_hidden: vec![9, 5],
            error_hidden: vec![9, 5],
            refine_hidden: vec![9, 5],
        }
    }

    fn feature(rng: &mut ChaCha8Rng, n: usize) -> ShapeFeature {
        ShapeFeature::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mlp_row(params: &MlpParams, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        for l in &params.layers {
            let mut out = Vec::with_capacity(l.weight.rows());
            for o in 0..l.weight.rows() {
                let mut s = l.bias.get(0, o);
                for (i, x) in h.iter().enumerate() {
                    s += l.weight.get(o, i) * x;
                }
                out.push(match l.activation {
                    Activation::Relu => s.max(0.0),
                    Activation::Tanh => s.tanh(),
                    Activation::None => s,
                });
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_head_deform_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = small();
        let mut p = a.init_deform(&mut rng);
        p.zero_output_layer();
        let m = make_icosphere(1).unwrap();
        let out = deform(&m, &feature(&mut rng, 8), &p).unwrap();
        assert_eq!(out.vertices(), m.vertices());
        assert_eq!(out.faces(), m.faces());
    }

    #[test]
    fn deform_matches_per_vertex_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = small();
        let p = a.init_deform(&mut rng);
        let f = feature(&mut rng, 8);
        let m = make_icosphere(1).unwrap();
        let shifted = m
            .with_vertices(m.vertices().iter().map(|v| [v[0] + 0.5, v[1], v[2]]).collect())
            .unwrap();
        for mesh in [&m, &shifted] {
            let out = deform(mesh, &f, &p).unwrap();
            assert_eq!(out.faces(), mesh.faces());
            for (v, o) in mesh.vertices().iter().zip(out.vertices()) {
                let mut input = v.to_vec();
                input.extend_from_slice(f.values());
                let off = mlp_row(&p, &input);
                for d in 0..3 {
                    assert!((o[d] - (v[d] + off[d])).abs() < 1e-12);
                }
            }
        }
        assert!(deform(&m, &feature(&mut rng, 7), &p).is_err());
    }

    fn constant_error_net(a: &Architecture, c: f64, rng: &mut ChaCha8Rng) -> MlpParams {
        let mut p = a.init_error(rng);
        p.zero_output_layer();
        p.layers.last_mut().unwrap().bias.set(0, 0, c);
        p
    }

    #[test]
    fn constant_error_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = small();
        let m = make_icosphere(1).unwrap();
        let f = feature(&mut rng, 8);
        let e = estimate_errors(&m, &f, &constant_error_net(&a, 0.3, &mut rng), 4, 1).unwrap();
        assert!(e.values().iter().all(|&x| (x - 0.3).abs() < 1e-15));
        let e = estimate_errors(&m, &f, &constant_error_net(&a, -1.0, &mut rng), 4, 1).unwrap();
        assert!(e.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn estimate_errors_matches_per_point_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = small();
        let p = a.init_error(&mut rng);
        let m = make_icosphere(1).unwrap();
        let f = feature(&mut rng, 8);
        let e = estimate_errors(&m, &f, &p, 10, 77).unwrap();
        let samples = sample_per_face(&m, 10, 77);
        for face in 0..m.face_count() {
            let mean: f64 = samples[face * 10..face * 10 + 10]
                .iter()
                .map(|s| {
                    let mut input = s.position(&m).to_vec();
                    input.extend_from_slice(f.values());
                    mlp_row(&p, &input)[0]
                })
                .sum::<f64>()
                / 10.0;
            assert!((e.values()[face] - mean.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_pruning() {
        let m = make_icosphere(0).unwrap();
        let zero = PerFaceError(vec![0.0; 20]);
        assert_eq!(prune_by_threshold(&m, &zero, 0.1).unwrap().0.faces(), m.faces());
        let mut one = vec![0.01; 20];
        one[7] = 0.2;
        let (p, _) = prune_by_threshold(&m, &PerFaceError(one), 0.1).unwrap();
        assert_eq!(p.face_count(), 19);
        let all = PerFaceError(vec![0.06; 20]);
        assert!(matches!(
            prune_by_threshold(&m, &all, 0.05),
            Err(Error::Mesh(crate::MeshError::EmptyMesh))
        ));
    }

    #[test]
    fn refine_moves_only_boundary_in_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = small();
        let p = a.init_refine(&mut rng);
        let g = make_grid_square(5).unwrap();
        // lift the grid out of plane so edge planes differ per vertex
        let g = g
            .with_vertices(
                g.vertices()
                    .iter()
                    .map(|v| [v[0], v[1], 0.3 * (3.0 * v[0]).sin() * v[1]])
                    .collect(),
            )
            .unwrap();
        let loops = extract_boundary_loops(&g);
        let f = feature(&mut rng, 8);
        let (out, diag) = refine_boundary(&g, &loops, &f, &p).unwrap();
        assert_eq!(out.faces(), g.faces());
        let on_boundary: std::collections::HashSet<usize> = loops.entries().iter().map(|e| e.0).collect();
        let mut moved = 0;
        for (v, (a0, b0)) in g.vertices().iter().zip(out.vertices()).enumerate() {
            if !on_boundary.contains(&v) {
                assert_eq!(a0, b0);
                continue;
            }
            let d = sub(*b0, *a0);
            moved += (norm(d) > 0.0) as usize;
            let e = loops.entries().into_iter().find(|e| e.0 == v).unwrap();
            let u1 = sub(*a0, g.vertices()[e.1[0]]);
            let u2 = sub(*a0, g.vertices()[e.1[1]]);
            let n = cross(u1, u2);
            if norm(n) > 1e-9 && norm(d) > 0.0 {
                assert!(dot(d, n).abs() / (norm(n) * norm(d)) < 1e-9);
            } else {
                assert!(diag.degenerate_plane.contains(&v));
            }
        }
        assert!(moved > 0);
        let mut z = p.clone();
        z.zero_output_layer();
        assert_eq!(refine_boundary(&g, &loops, &f, &z).unwrap().0.vertices(), g.vertices());
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = small();
        let p = a.init_encoder(&mut rng);
        let pts: Vec<[f64; 3]> = (0..40).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let f = encode_pointcloud(&PointCloud::from_points(pts.clone()), &p).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(encode_pointcloud(&PointCloud::from_points(rev), &p).unwrap(), f);
        let single = encode_pointcloud(&PointCloud::from_points(vec![pts[0]]), &p).unwrap();
        let repeated = encode_pointcloud(&PointCloud::from_points(vec![pts[0]; 9]), &p).unwrap();
        assert_eq!(single, repeated);
        for (c, &v) in f.values().iter().enumerate() {
            let oracle = pts.iter().map(|q| mlp_row(&p, q)[c]).fold(f64::NEG_INFINITY, f64::max);
            assert!((v - oracle).abs() < 1e-12);
        }
    }
}
