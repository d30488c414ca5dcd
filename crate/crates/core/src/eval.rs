//! Reconstruction metrics and rigid alignment.
//!
//! Reported Chamfer distance averages squared nearest-neighbour distances per
//! direction and sums the two directions; EMD is the mean Euclidean distance
//! of an optimal bijection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ShapeRecord;
use crate::geom::{derive_seed, dist2, Point3};
use crate::mesh::{sample_surface, Mesh, PointCloud};
use crate::pipeline::{reconstruct, Model, ModelInput};
use crate::spatial::{nearest_all, KdTree};
use crate::{Error, Result};

/// Largest point count solved exactly; bigger clouds are subsampled.
pub const EMD_MAX_POINTS: usize = 2048;

/// Mean squared nearest-neighbour distance `pred -> gt` and `gt -> pred`.
pub fn directional_distances(pred: &[Point3], gt: &[Point3]) -> Result<(f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let mean = |nn: Vec<crate::spatial::Neighbor>| nn.iter().map(|n| n.dist2).sum::<f64>() / nn.len() as f64;
    Ok((mean(nearest_all(gt, pred)), mean(nearest_all(pred, gt))))
}

/// Chamfer distance between `n` samples of `predicted` and `gt`.
pub fn cd_metric(predicted: &Mesh, gt: &PointCloud, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    if predicted.face_count() == 0 {
        return Err(Error::Mesh(crate::MeshError::EmptyMesh));
    }
    let pts = sample_surface(predicted, n, seed)?.points;
    let (a, b) = directional_distances(&pts, &gt.points)?;
    Ok(a + b)
}

fn subsample(points: &[Point3], n: usize, seed: u64) -> Vec<Point3> {
    if points.len() <= n {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, points.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Minimum-cost perfect matching of a square cost matrix (row-major), as
/// `row -> column`. Shortest augmenting paths with dual potentials.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // 1-based, column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    assign
}

/// Earth mover's distance: mean Euclidean distance under the optimal
/// bijection. Clouds above [`EMD_MAX_POINTS`] are subsampled with `seed`.
pub fn emd_exact(p: &[Point3], q: &[Point3], seed: u64) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let p = subsample(p, EMD_MAX_POINTS, derive_seed(seed, 1));
    let q = subsample(q, EMD_MAX_POINTS, derive_seed(seed, 2));
    if p.len() != q.len() {
        return Err(Error::Length {
            what: "EMD point sets",
            expected: p.len(),
            got: q.len(),
        });
    }
    let n = p.len();
    let cost: Vec<f64> = p
        .iter()
        .flat_map(|&a| q.iter().map(move |&b| dist2(a, b).sqrt()))
        .collect();
    let assign = solve_assignment(&cost, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    fn from_nalgebra(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = r[(i, j)];
            }
        }
        Self {
            rotation,
            translation: [t[0], t[1], t[2]],
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub aligned: PointCloud,
    /// Mean squared correspondence distance before each fit, then after the last.
    pub errors: Vec<f64>,
    pub iterations: usize,
    /// The correspondence covariance was rank deficient; the identity was returned.
    pub degenerate: bool,
}

fn vec3(p: Point3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn centroid(points: &[Point3]) -> Vector3<f64> {
    points.iter().map(|&p| vec3(p)).sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares proper rotation and translation taking `src[i]` to `dst[i]`.
/// `None` when the covariance has rank below two.
pub fn fit_rigid(src: &[Point3], dst: &[Point3]) -> Option<RigidTransform> {
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (vec3(*s) - cs) * (vec3(*d) - cd).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return None;
    }
    let (u, vt) = (svd.u?, svd.v_t?);
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = cd - r * cs;
    Some(RigidTransform::from_nalgebra(&r, &t))
}

fn non_collinear(points: &[Point3]) -> bool {
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for &p in points {
        let d = vec3(p) - c;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] > 0.0 && ev[1] > 1e-12 * ev[0]
}

/// Iterative closest point without scaling. Stops when the mean squared
/// correspondence distance improves by less than `tol` or after `max_iters` fits.
pub fn icp_align(source: &PointCloud, target: &PointCloud, max_iters: usize, tol: f64) -> Result<IcpResult> {
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::Config("alignment needs at least 3 points per cloud".into()));
    }
    if !non_collinear(&source.points) || !non_collinear(&target.points) {
        return Err(Error::Config("alignment needs non-collinear points".into()));
    }
    let tree = KdTree::new(&target.points);
    let mut transform = RigidTransform::identity();
    let mut current = source.points.clone();
    let mut errors = Vec::new();
    let mut iterations = 0;
    let mut degenerate = false;
    loop {
        let nn = crate::spatial::nearest_all_with(&tree, &current);
        let err = nn.iter().map(|n| n.dist2).sum::<f64>() / nn.len() as f64;
        if let Some(&prev) = errors.last() {
            if prev - err < tol {
                errors.push(err);
                break;
            }
        }
        errors.push(err);
        if iterations == max_iters || err == 0.0 {
            break;
        }
        let matched: Vec<Point3> = nn.iter().map(|n| target.points[n.index]).collect();
        let Some(next) = fit_rigid(&source.points, &matched) else {
            log::warn!("icp: degenerate correspondence covariance, returning the identity");
            degenerate = true;
            transform = RigidTransform::identity();
            current = source.points.clone();
            break;
        };
        iterations += 1;
        current = source.points.iter().map(|&p| next.apply(p)).collect();
        transform = next;
    }
    Ok(IcpResult {
        transform,
        aligned: PointCloud {
            points: current,
            ..source.clone()
        },
        errors,
        iterations,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Points sampled on each output mesh.
    pub points: usize,
    /// Points per cloud entering the exact EMD.
    pub emd_points: usize,
    pub icp: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            points: 10_000,
            emd_points: EMD_MAX_POINTS,
            icp: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub id: String,
    pub category: String,
    pub cd: f64,
    pub emd: f64,
    pub points: usize,
    pub icp: bool,
    /// A pruning stage removed every face; metrics use its input mesh.
    pub stage_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub count: usize,
    pub cd: f64,
    pub emd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub shapes: Vec<ShapeMetrics>,
    pub categories: Vec<CategoryMetrics>,
    pub mean_cd: f64,
    pub mean_emd: f64,
}

impl MetricReport {
    pub fn from_shapes(shapes: Vec<ShapeMetrics>) -> Self {
        let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
        for s in &shapes {
            let g = groups.entry(&s.category).or_default();
            g.0 += 1;
            g.1 += s.cd;
            g.2 += s.emd;
        }
        let categories = groups
            .into_iter()
            .map(|(c, (n, cd, emd))| CategoryMetrics {
                category: c.to_string(),
                count: n,
                cd: cd / n as f64,
                emd: emd / n as f64,
            })
            .collect();
        let n = shapes.len().max(1) as f64;
        Self {
            mean_cd: shapes.iter().map(|s| s.cd).sum::<f64>() / n,
            mean_emd: shapes.iter().map(|s| s.emd).sum::<f64>() / n,
            categories,
            shapes,
        }
    }

    /// `shape_id,category,cd,emd` with CD in units of 1e-3 and EMD in 1e-2.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["shape_id", "category", "cd", "emd"])?;
        for s in &self.shapes {
            out.write_record([
                s.id.clone(),
                s.category.clone(),
                format!("{:.6}", s.cd * 1e3),
                format!("{:.6}", s.emd * 1e2),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per category plus the mean, CD x1e-3 and EMD x1e-2.
    pub fn table(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(
            t,
            "{:<18} {:>6} {:>12} {:>12}",
            "category", "shapes", "CD (1e-3)", "EMD (1e-2)"
        );
        for c in &self.categories {
            let _ = writeln!(
                t,
                "{:<18} {:>6} {:>12.3} {:>12.3}",
                c.category,
                c.count,
                c.cd * 1e3,
                c.emd * 1e2
            );
        }
        let _ = writeln!(
            t,
            "{:<18} {:>6} {:>12.3} {:>12.3}",
            "mean",
            self.shapes.len(),
            self.mean_cd * 1e3,
            self.mean_emd * 1e2
        );
        t
    }
}

/// Metrics of one predicted mesh against its ground truth.
pub fn shape_metrics(mesh: &Mesh, gt: &PointCloud, options: &EvalOptions, seed: u64) -> Result<(f64, f64)> {
    let mut pred = sample_surface(mesh, options.points, derive_seed(seed, 1))?;
    if options.icp {
        pred = icp_align(&pred, gt, 50, 1e-10)?.aligned;
    }
    let (a, b) = directional_distances(&pred.points, &gt.points)?;
    let n = options.emd_points.min(EMD_MAX_POINTS).min(pred.len()).min(gt.len());
    let emd = emd_exact(
        &subsample(&pred.points, n, derive_seed(seed, 2)),
        &subsample(&gt.points, n, derive_seed(seed, 3)),
        derive_seed(seed, 4),
    )?;
    Ok((a + b, emd))
}

/// Reconstructs each shape from its encoder cloud and measures it.
pub fn evaluate_model(model: &Model, shapes: &[&ShapeRecord], options: &EvalOptions) -> Result<MetricReport> {
    if shapes.is_empty() {
        return Err(Error::Empty("shape set"));
    }
    let template = model.template()?;
    let rows = shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = derive_seed(options.seed, i as u64);
            let (mesh, stage_failure) = match reconstruct(ModelInput::Cloud(&s.encoder), model, &template, seed) {
                Ok(r) => (r.output, false),
                Err(Error::StageFailure { last_valid, .. }) => (*last_valid, true),
                Err(e) => return Err(e),
            };
            let (cd, emd) = shape_metrics(&mesh, &s.gt, options, seed)?;
            Ok(ShapeMetrics {
                id: s.id.clone(),
                category: s.spec.family().name().to_string(),
                cd,
                emd,
                points: options.points,
                icp: options.icp,
                stage_failure,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_shapes(rows))
}
