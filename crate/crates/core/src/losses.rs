//! Differentiable objectives: Chamfer distance, the boundary zigzag
//! energy, error regression, and the normal/smoothness/edge regularizers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Value};
use crate::geom::Point3;
use crate::mesh::Topology;
use crate::mesh::{prune_faces, BoundaryLoops, Mesh, PointCloud, SurfaceSample, VertexRemap};
use crate::spatial::nearest_all;
use crate::{Error, Result};

/// Lengths below this are treated as zero when normalizing directions.
pub const COINCIDENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Error regression.
    pub lambda1: f64,
    /// Boundary energy.
    pub lambda2: f64,
    /// Normal consistency.
    pub lambda3: f64,
    /// Smoothness.
    pub lambda4: f64,
    /// Edge length.
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 1e-2,
            lambda4: 2e-7,
            lambda5: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {all:?}"
            )))
        }
    }
}

/// Mesh whose vertex positions live on a tape.
#[derive(Clone)]
pub struct MeshVar<'t> {
    pub positions: Value<'t>,
    topology: Arc<Topology>,
}

impl<'t> MeshVar<'t> {
    pub fn new(positions: Value<'t>, topology: Arc<Topology>) -> Result<Self> {
        if positions.shape() != [topology.vertex_count(), 3] {
            return Err(Error::Length {
                what: "vertex positions",
                expected: topology.vertex_count(),
                got: positions.rows(),
            });
        }
        Ok(Self { positions, topology })
    }

    pub fn constant(tape: &'t Tape, mesh: &Mesh) -> Self {
        Self {
            positions: tape.constant(Tensor::from_points(mesh.vertices())),
            topology: Arc::clone(mesh.topology()),
        }
    }

    pub fn leaf(tape: &'t Tape, mesh: &Mesh) -> Self {
        Self {
            positions: tape.leaf(Tensor::from_points(mesh.vertices())),
            topology: Arc::clone(mesh.topology()),
        }
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        self.topology.faces()
    }

    /// Snapshot of the current positions as a plain mesh.
    pub fn to_mesh(&self) -> Result<Mesh> {
        Ok(Mesh::from_topology(
            self.positions.value().to_points(),
            Arc::clone(&self.topology),
        )?)
    }

    /// Same connectivity, positions moved by `offsets` (`[V x 3]`).
    pub fn displaced(&self, offsets: &Value<'t>) -> Result<Self> {
        Self::new(self.positions.add(offsets)?, Arc::clone(&self.topology))
    }

    fn corner(&self, k: usize) -> Result<Value<'t>> {
        let idx: Vec<usize> = self.faces().iter().map(|f| f[k]).collect();
        Ok(self.positions.gather(&idx)?)
    }

    /// Unit face normals, `[F x 3]`.
    pub fn face_normals(&self) -> Result<Value<'t>> {
        let (a, b, c) = (self.corner(0)?, self.corner(1)?, self.corner(2)?);
        let n = b.sub(&a)?.cross_rows(&c.sub(&a)?)?;
        Ok(n.div(&n.norm_rows().clamp_min(COINCIDENT_EPS))?)
    }

    /// Positions of barycentric samples, differentiable in the vertices.
    pub fn sample_points(&self, samples: &[SurfaceSample]) -> Result<Value<'t>> {
        if samples.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        let tape = self.positions.tape();
        let mut acc: Option<Value<'t>> = None;
        for k in 0..3 {
            let idx: Vec<usize> = samples.iter().map(|s| self.faces()[s.face][k]).collect();
            let w = tape.constant(Tensor::column(samples.iter().map(|s| s.weights[k]).collect()));
            let term = self.positions.gather(&idx)?.mul(&w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        Ok(acc.expect("three corners"))
    }

    /// Current sample positions with their source faces, for neighbour queries.
    pub fn sample_cloud(&self, samples: &[SurfaceSample], points: &Value<'t>) -> PointCloud {
        PointCloud {
            points: points.value().to_points(),
            normals: None,
            source_face: Some(samples.iter().map(|s| s.face).collect()),
            scalars: None,
        }
    }

    /// Drops the masked faces, carrying surviving positions through a gather
    /// so gradients still reach the original vertices.
    pub fn prune(&self, remove_mask: &[bool]) -> Result<(MeshVar<'t>, VertexRemap)> {
        let (pruned, remap) = prune_faces(&self.to_mesh()?, remove_mask)?;
        if Arc::ptr_eq(pruned.topology(), &self.topology) {
            return Ok((self.clone(), remap));
        }
        let positions = self.positions.gather(&remap.new_to_old)?;
        Ok((MeshVar::new(positions, Arc::clone(pruned.topology()))?, remap))
    }
}

fn check_cloud(v: &Value<'_>, what: &'static str) -> Result<()> {
    if v.rows() == 0 {
        return Err(Error::Empty(what));
    }
    if v.cols() != 3 {
        return Err(Error::Length {
            what,
            expected: 3,
            got: v.cols(),
        });
    }
    Ok(())
}

/// `sum over x in P of min over y in Q of |x - y|^2`.
///
/// Neighbours are found outside the graph (kd-tree, lowest index on ties);
/// the gradient is that of the gathered squared differences, which is the
/// subgradient of the min that picks the lowest-index nearest point.
pub fn chamfer_directional<'t>(p: &Value<'t>, q: &Value<'t>) -> Result<Value<'t>> {
    check_cloud(p, "point set P")?;
    check_cloud(q, "point set Q")?;
    let nn = nearest_all(&q.value().to_points(), &p.value().to_points());
    let idx: Vec<usize> = nn.iter().map(|n| n.index).collect();
    Ok(p.sub(&q.gather(&idx)?)?.square().sum_rows().sum())
}

/// Symmetric Chamfer distance with summed squared distances.
pub fn chamfer<'t>(p: &Value<'t>, q: &Value<'t>) -> Result<Value<'t>> {
    Ok(chamfer_directional(p, q)?.add(&chamfer_directional(q, p)?)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BoundaryDiagnostics {
    /// Boundary vertices with a neighbour closer than [`COINCIDENT_EPS`];
    /// that neighbour's direction was taken as zero.
    pub coincident: Vec<usize>,
    /// Vertices with more than two boundary edges.
    pub pinches: Vec<usize>,
}

fn unit_rows<'t>(d: &Value<'t>) -> Result<(Value<'t>, Vec<bool>)> {
    let len = d.norm_rows();
    let short: Vec<bool> = len.value().data().iter().map(|&l| l < COINCIDENT_EPS).collect();
    let u = d.div(&len.clamp_min(COINCIDENT_EPS))?;
    if !short.iter().any(|&s| s) {
        return Ok((u, short));
    }
    let mask = Tensor::column(short.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect());
    Ok((u.mul(&d.tape().constant(mask))?, short))
}

/// Per-entry zigzag terms `[k x 1]` and the entries with a coincident neighbour.
fn entry_terms<'t>(positions: &Value<'t>, entries: &[(usize, [usize; 2])]) -> Result<(Value<'t>, Vec<bool>)> {
    let xs: Vec<usize> = entries.iter().map(|e| e.0).collect();
    let n1: Vec<usize> = entries.iter().map(|e| e.1[0]).collect();
    let n2: Vec<usize> = entries.iter().map(|e| e.1[1]).collect();
    let x = positions.gather(&xs)?;
    let (u1, s1) = unit_rows(&x.sub(&positions.gather(&n1)?)?)?;
    let (u2, s2) = unit_rows(&x.sub(&positions.gather(&n2)?)?)?;
    let flags = s1.iter().zip(&s2).map(|(a, b)| *a || *b).collect();
    Ok((u1.add(&u2)?.norm_rows(), flags))
}

/// Zigzag energy: for every boundary vertex x with boundary neighbours
/// p1, p2, the norm of `(x - p1)/|x - p1| + (x - p2)/|x - p2|`, summed.
pub fn boundary_energy<'t>(positions: &Value<'t>, loops: &BoundaryLoops) -> Result<(Value<'t>, BoundaryDiagnostics)> {
    let entries = loops.entries();
    let mut diag = BoundaryDiagnostics {
        coincident: Vec::new(),
        pinches: loops.pinches.clone(),
    };
    if entries.is_empty() {
        return Ok((positions.tape().scalar(0.0), diag));
    }
    let (terms, flags) = entry_terms(positions, &entries)?;
    for (e, &f) in entries.iter().zip(&flags) {
        if f && !diag.coincident.contains(&e.0) {
            diag.coincident.push(e.0);
        }
    }
    Ok((terms.sum(), diag))
}

/// Quadratic error regression: `sum |f(x) - e_x|^2`.
pub fn error_regression_loss<'t>(predicted: &Value<'t>, target: &[f64]) -> Result<Value<'t>> {
    if predicted.shape() != [target.len(), 1] {
        return Err(Error::Length {
            what: "error targets",
            expected: predicted.rows(),
            got: target.len(),
        });
    }
    let t = predicted.tape().constant(Tensor::column(target.to_vec()));
    Ok(predicted.sub(&t)?.square().sum())
}

/// Mean of `1 - |<n_face(x), n_gt(nearest(x))>|` over the samples.
pub fn normal_loss<'t>(mesh: &MeshVar<'t>, samples: &PointCloud, gt: &PointCloud) -> Result<Value<'t>> {
    let gt_normals = gt.normals.as_ref().ok_or(Error::MissingAttribute("normals"))?;
    let faces = samples
        .source_face
        .as_ref()
        .ok_or(Error::MissingAttribute("source_face"))?;
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth cloud"));
    }
    let nn = nearest_all(&gt.points, &samples.points);
    let matched: Vec<Point3> = nn.iter().map(|n| gt_normals[n.index]).collect();
    let target = mesh.positions.tape().constant(Tensor::from_points(&matched));
    let dots = mesh.face_normals()?.gather(faces)?.dot_rows(&target)?;
    Ok(dots.abs().neg().shift(1.0).mean()?)
}

/// Mean over interior edges of `(cos t + 1)^2`, with `cos t = -<n1, n2>`
/// so that two coplanar, consistently oriented faces contribute zero.
pub fn smoothness_loss<'t>(mesh: &MeshVar<'t>) -> Result<Value<'t>> {
    let pairs = mesh.topology().interior_face_pairs();
    if pairs.is_empty() {
        return Err(Error::NoInteriorEdges);
    }
    let n = mesh.face_normals()?;
    let a: Vec<usize> = pairs.iter().map(|p| p[0]).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p[1]).collect();
    let dot = n.gather(&a)?.dot_rows(&n.gather(&b)?)?;
    Ok(dot.neg().shift(1.0).square().mean()?)
}

/// Mean squared edge length.
pub fn edge_loss<'t>(mesh: &MeshVar<'t>) -> Result<Value<'t>> {
    let edges = mesh.topology().edges();
    if edges.is_empty() {
        return Err(Error::Empty("edge set"));
    }
    let a: Vec<usize> = edges.iter().map(|e| e[0]).collect();
    let b: Vec<usize> = edges.iter().map(|e| e[1]).collect();
    let d = mesh.positions.gather(&a)?.sub(&mesh.positions.gather(&b)?)?;
    Ok(d.square().sum_rows().mean()?)
}

/// Individual objective terms; absent terms count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms<'t> {
    pub cd: Option<Value<'t>>,
    pub error: Option<Value<'t>>,
    pub bound: Option<Value<'t>>,
    pub normal: Option<Value<'t>>,
    pub smooth: Option<Value<'t>>,
    pub edge: Option<Value<'t>>,
}

/// Plain numbers for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cd: f64,
    pub error: f64,
    pub bound: f64,
    pub normal: f64,
    pub smooth: f64,
    pub edge: f64,
    pub total: f64,
}

impl LossValues {
    pub fn add_assign(&mut self, o: &LossValues) {
        self.cd += o.cd;
        self.error += o.error;
        self.bound += o.bound;
        self.normal += o.normal;
        self.smooth += o.smooth;
        self.edge += o.edge;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossValues {
        LossValues {
            cd: self.cd * s,
            error: self.error * s,
            bound: self.bound * s,
            normal: self.normal * s,
            smooth: self.smooth * s,
            edge: self.edge * s,
            total: self.total * s,
        }
    }
}

impl<'t> LossTerms<'t> {
    fn weighted(&self, w: &LossWeights) -> [(f64, Option<Value<'t>>); 6] {
        [
            (1.0, self.cd),
            (w.lambda1, self.error),
            (w.lambda2, self.bound),
            (w.lambda3, self.normal),
            (w.lambda4, self.smooth),
            (w.lambda5, self.edge),
        ]
    }

    pub fn values(&self, total: &Value<'t>) -> LossValues {
        let v = |t: Option<Value<'t>>| t.map_or(0.0, |t| t.item());
        LossValues {
            cd: v(self.cd),
            error: v(self.error),
            bound: v(self.bound),
            normal: v(self.normal),
            smooth: v(self.smooth),
            edge: v(self.edge),
            total: total.item(),
        }
    }
}

/// `L_cd + l1 L_error + l2 L_bound + l3 L_normal + l4 L_smooth + l5 L_edge`.
pub fn total_loss<'t>(tape: &'t Tape, terms: &LossTerms<'t>, weights: &LossWeights) -> Result<Value<'t>> {
    weights.validate()?;
    let mut acc = tape.scalar(0.0);
    for (w, term) in terms.weighted(weights) {
        let Some(t) = term else { continue };
        if t.shape() != [1, 1] {
            return Err(Error::Length {
                what: "loss component",
                expected: 1,
                got: t.rows() * t.cols(),
            });
        }
        acc = acc.add(&t.scale(w))?;
    }
    Ok(acc)
}
