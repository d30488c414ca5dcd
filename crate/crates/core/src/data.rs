//! Synthetic shape families of genus 0 and genus >= 1, and on-disk datasets.
//!
//! A dataset directory looks like
//!
//! ```text
//! manifest.json
//! meshes/<id>.obj
//! clouds/<id>.gt.bin          ground-truth points
//! clouds/<id>.gt_normals.bin  their unit normals
//! clouds/<id>.enc.bin         encoder input points
//! ```
//!
//! Cloud files use the point format of [`crate::mesh::io`].

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{derive_seed, dist2, Point3};
use crate::mesh::io::{load_obj, load_points_bin, save_obj, save_points_bin};
use crate::mesh::{euler_characteristic, make_icosphere, sample_surface, Mesh, PointCloud};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ellipsoid,
    Torus,
    BoxWithHole,
    PlateWithHoles,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Ellipsoid,
        Family::Torus,
        Family::BoxWithHole,
        Family::PlateWithHoles,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Ellipsoid => "ellipsoid",
            Family::Torus => "torus",
            Family::BoxWithHole => "box_with_hole",
            Family::PlateWithHoles => "plate_with_holes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipsoid {
        radii: [f64; 3],
    },
    Torus {
        major: f64,
        minor: f64,
    },
    /// Rectangular block with one rectangular through-hole along z.
    /// `hole` is the hole's footprint as a fraction of `size` in x and y.
    BoxWithHole {
        size: [f64; 3],
        hole: [f64; 2],
    },
    /// Thin plate with `holes` square through-holes in a row along x.
    /// `hole` is the hole side as a fraction of the plate's y extent.
    PlateWithHoles {
        size: [f64; 3],
        holes: usize,
        hole: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn family(&self) -> Family {
        match self.kind {
            ShapeKind::Ellipsoid { .. } => Family::Ellipsoid,
            ShapeKind::Torus { .. } => Family::Torus,
            ShapeKind::BoxWithHole { .. } => Family::BoxWithHole,
            ShapeKind::PlateWithHoles { .. } => Family::PlateWithHoles,
        }
    }

    pub fn genus(&self) -> usize {
        match self.kind {
            ShapeKind::Ellipsoid { .. } => 0,
            ShapeKind::Torus { .. } | ShapeKind::BoxWithHole { .. } => 1,
            ShapeKind::PlateWithHoles { holes, .. } => holes,
        }
    }

    /// Random parameters for `family`, drawn from `seed`.
    pub fn random(family: Family, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = match family {
            Family::Ellipsoid => ShapeKind::Ellipsoid {
                radii: [
                    rng.gen_range(0.5..1.0),
                    rng.gen_range(0.5..1.0),
                    rng.gen_range(0.5..1.0),
                ],
            },
            Family::Torus => ShapeKind::Torus {
                major: 1.0,
                minor: rng.gen_range(0.25..0.4),
            },
            Family::BoxWithHole => ShapeKind::BoxWithHole {
                size: [
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(0.3..0.6),
                ],
                hole: [rng.gen_range(0.35..0.55), rng.gen_range(0.35..0.55)],
            },
            Family::PlateWithHoles => ShapeKind::PlateWithHoles {
                size: [
                    rng.gen_range(1.3..1.6),
                    rng.gen_range(0.6..0.8),
                    rng.gen_range(0.12..0.2),
                ],
                holes: 2,
                hole: rng.gen_range(0.4..0.55),
            },
        };
        Self { kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let frac = |x: f64| x.is_finite() && x > 0.0 && x < 1.0;
        let ok = match &self.kind {
            ShapeKind::Ellipsoid { radii } => radii.iter().all(|&r| pos(r)),
            ShapeKind::Torus { major, minor } => pos(*minor) && minor < major,
            ShapeKind::BoxWithHole { size, hole } => size.iter().all(|&s| pos(s)) && hole.iter().all(|&h| frac(h)),
            ShapeKind::PlateWithHoles { size, holes, hole } => {
                size.iter().all(|&s| pos(s)) && *holes >= 1 && frac(*hole) && {
                    // holes plus the solid bars between and around them must fit
                    let side = hole * size[1];
                    side * *holes as f64 + side * 0.25 * (*holes as f64 + 1.0) <= size[0]
                }
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shape parameters: {:?}", self.kind)))
        }
    }
}

/// Breakpoints `0 = b0 < b1 < ... < bn = len`, each interval split into
/// pieces no longer than `step`.
fn refine_breaks(coarse: &[f64], step: f64) -> (Vec<f64>, Vec<usize>) {
    let mut fine = vec![coarse[0]];
    let mut owner = Vec::new();
    for (k, w) in coarse.windows(2).enumerate() {
        let n = ((w[1] - w[0]) / step).ceil().max(1.0) as usize;
        for i in 1..=n {
            fine.push(w[0] + (w[1] - w[0]) * i as f64 / n as f64);
            owner.push(k);
        }
    }
    (fine, owner)
}

/// Closed surface of a slab `[0, xs.last] x [0, ys.last] x [0, h]` with the
/// coarse cells flagged in `hole` removed all the way through.
fn extruded_slab(xs: &[f64], ys: &[f64], hole: &dyn Fn(usize, usize) -> bool, h: f64, step: f64) -> Result<Mesh> {
    let (fx, ox) = refine_breaks(xs, step);
    let (fy, oy) = refine_breaks(ys, step);
    let nz = (h / step).ceil().max(1.0) as usize;
    let (nx, ny) = (fx.len() - 1, fy.len() - 1);
    let solid = |i: isize, j: isize| {
        i >= 0 && j >= 0 && (i as usize) < nx && (j as usize) < ny && !hole(ox[i as usize], oy[j as usize])
    };
    let mut index: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut vertices: Vec<Point3> = Vec::new();
    let mut vid = |i: usize, j: usize, k: usize| {
        *index.entry((i, j, k)).or_insert_with(|| {
            vertices.push([fx[i], fy[j], h * k as f64 / nz as f64]);
            vertices.len() - 1
        })
    };
    let mut faces = Vec::new();
    let quad = |faces: &mut Vec<[usize; 3]>, q: [usize; 4]| {
        faces.push([q[0], q[1], q[2]]);
        faces.push([q[0], q[2], q[3]]);
    };
    for i in 0..nx {
        for j in 0..ny {
            if !solid(i as isize, j as isize) {
                continue;
            }
            let top = [
                vid(i, j, nz),
                vid(i + 1, j, nz),
                vid(i + 1, j + 1, nz),
                vid(i, j + 1, nz),
            ];
            quad(&mut faces, top);
            let bottom = [vid(i, j, 0), vid(i, j + 1, 0), vid(i + 1, j + 1, 0), vid(i + 1, j, 0)];
            quad(&mut faces, bottom);
        }
    }
    // walls along x-directed cell edges (constant y)
    for j in 0..=ny {
        for i in 0..nx {
            let (above, below) = (solid(i as isize, j as isize), solid(i as isize, j as isize - 1));
            if above == below {
                continue;
            }
            for k in 0..nz {
                let q = [vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j, k + 1), vid(i, j, k + 1)];
                // (+x) x (+z) = -y, outward when the solid lies above
                quad(&mut faces, if above { q } else { [q[0], q[3], q[2], q[1]] });
            }
        }
    }
    // walls along y-directed cell edges (constant x)
    for i in 0..=nx {
        for j in 0..ny {
            let (right, left) = (solid(i as isize, j as isize), solid(i as isize - 1, j as isize));
            if right == left {
                continue;
            }
            for k in 0..nz {
                let q = [vid(i, j, k), vid(i, j + 1, k), vid(i, j + 1, k + 1), vid(i, j, k + 1)];
                // (+y) x (+z) = +x, outward when the solid lies left
                quad(&mut faces, if left { q } else { [q[0], q[3], q[2], q[1]] });
            }
        }
    }
    Ok(Mesh::new(vertices, faces)?)
}

fn torus(major: f64, minor: f64, nu: usize, nv: usize) -> Result<Mesh> {
    let mut vertices = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = std::f64::consts::TAU * i as f64 / nu as f64;
        for j in 0..nv {
            let v = std::f64::consts::TAU * j as f64 / nv as f64;
            let r = major + minor * v.cos();
            vertices.push([r * u.cos(), r * u.sin(), minor * v.sin()]);
        }
    }
    let id = |i: usize, j: usize| (i % nu) * nv + (j % nv);
    let mut faces = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Ok(Mesh::new(vertices, faces)?)
}

/// Centers the bounding box at the origin and scales the farthest vertex to radius 1.
pub fn normalize_to_unit_sphere(mesh: &Mesh) -> Result<Mesh> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in mesh.vertices() {
        for d in 0..3 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let r = mesh.vertices().iter().map(|&v| dist2(v, c)).fold(0.0, f64::max).sqrt();
    if !(r > 0.0) {
        return Err(Error::Mesh(crate::MeshError::DegenerateGeometry));
    }
    let moved = mesh
        .vertices()
        .iter()
        .map(|v| [(v[0] - c[0]) / r, (v[1] - c[1]) / r, (v[2] - c[2]) / r])
        .collect();
    Ok(mesh.with_vertices(moved)?)
}

/// Closed manifold mesh for `spec`, normalized to the unit sphere.
/// `resolution` (at least 1) controls the tessellation density.
pub fn generate_shape(spec: &ShapeSpec, resolution: u32) -> Result<Mesh> {
    spec.validate()?;
    if resolution == 0 {
        return Err(Error::Config("resolution must be at least 1".into()));
    }
    let res = resolution as f64;
    let step = 1.0 / (2.0 * res);
    let raw = match &spec.kind {
        ShapeKind::Ellipsoid { radii } => {
            let s = make_icosphere(resolution.min(6))?;
            let v = s
                .vertices()
                .iter()
                .map(|p| [p[0] * radii[0], p[1] * radii[1], p[2] * radii[2]])
                .collect();
            s.with_vertices(v)?
        }
        ShapeKind::Torus { major, minor } => torus(*major, *minor, 8 * resolution as usize, 4 * resolution as usize)?,
        ShapeKind::BoxWithHole { size, hole } => {
            let bx = [
                0.0,
                size[0] * (1.0 - hole[0]) / 2.0,
                size[0] * (1.0 + hole[0]) / 2.0,
                size[0],
            ];
            let by = [
                0.0,
                size[1] * (1.0 - hole[1]) / 2.0,
                size[1] * (1.0 + hole[1]) / 2.0,
                size[1],
            ];
            extruded_slab(&bx, &by, &|i, j| i == 1 && j == 1, size[2], step)?
        }
        ShapeKind::PlateWithHoles { size, holes, hole } => {
            let side = hole * size[1];
            let bar = (size[0] - side * *holes as f64) / (*holes as f64 + 1.0);
            let mut bx = vec![0.0];
            for _ in 0..*holes {
                let last = *bx.last().expect("non-empty");
                bx.push(last + bar);
                bx.push(last + bar + side);
            }
            bx.push(size[0]);
            let by = [0.0, (size[1] - side) / 2.0, (size[1] + side) / 2.0, size[1]];
            extruded_slab(&bx, &by, &|i, j| i % 2 == 1 && j == 1, size[2], step)?
        }
    };
    let mesh = normalize_to_unit_sphere(&raw)?;
    let expected = 2 - 2 * spec.genus() as i64;
    if euler_characteristic(&mesh) != expected || !mesh.is_closed() {
        return Err(Error::Config(format!(
            "generated {:?} has Euler characteristic {}, expected {expected}",
            spec.family(),
            euler_characteristic(&mesh)
        )));
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

/// Fractions of each family in a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMix {
    pub ellipsoid: f64,
    pub torus: f64,
    pub box_with_hole: f64,
    pub plate_with_holes: f64,
}

impl Default for FamilyMix {
    fn default() -> Self {
        Self {
            ellipsoid: 0.4,
            torus: 0.2,
            box_with_hole: 0.2,
            plate_with_holes: 0.2,
        }
    }
}

impl FamilyMix {
    fn weights(&self) -> [f64; 4] {
        [self.ellipsoid, self.torus, self.box_with_hole, self.plate_with_holes]
    }

    /// Shape counts per family summing to `count` (largest remainder, ties to
    /// the earlier family).
    pub fn counts(&self, count: usize) -> Result<[usize; 4]> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || !(total > 0.0) {
            return Err(Error::Config(format!("invalid family mix {w:?}")));
        }
        let exact: Vec<f64> = w.iter().map(|x| x / total * count as f64).collect();
        let mut counts = [0usize; 4];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let missing = count - counts.iter().sum::<usize>();
        for &k in order.iter().take(missing) {
            counts[k] += 1;
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub gt_points: usize,
    pub encoder_points: usize,
    pub resolution: u32,
    pub mix: FamilyMix,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            gt_points: 10_000,
            encoder_points: 2_500,
            resolution: 4,
            mix: FamilyMix::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShapeRecord {
    pub id: String,
    pub spec: ShapeSpec,
    pub split: Split,
    pub mesh: Mesh,
    /// Ground-truth surface samples with unit normals.
    pub gt: PointCloud,
    /// Random subset of `gt` fed to the encoder.
    pub encoder: PointCloud,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub options: DatasetOptions,
    pub shapes: Vec<ShapeRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ShapeRecord> {
        self.shapes.iter().filter(|s| s.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

fn split_sizes(n: usize) -> (usize, usize) {
    let test = (0.2 * n as f64).round() as usize;
    let val = ((0.1 * n as f64).round() as usize).min(n - test);
    (val, test)
}

/// Generates `count` shapes with ground-truth and encoder clouds. The 70/10/20
/// train/val/test split is stratified by family.
pub fn make_dataset(count: usize, options: &DatasetOptions, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one shape".into()));
    }
    if options.gt_points == 0 || options.encoder_points == 0 || options.encoder_points > options.gt_points {
        return Err(Error::Config(format!(
            "need 0 < encoder_points ({}) <= gt_points ({})",
            options.encoder_points, options.gt_points
        )));
    }
    let counts = options.mix.counts(count)?;
    let mut plan: Vec<(Family, Split)> = Vec::with_capacity(count);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5911));
    for (family, &n) in Family::ALL.iter().zip(&counts) {
        let (val, test) = split_sizes(n);
        let mut splits: Vec<Split> = std::iter::repeat_n(Split::Test, test)
            .chain(std::iter::repeat_n(Split::Val, val))
            .chain(std::iter::repeat_n(Split::Train, n - val - test))
            .collect();
        splits.shuffle(&mut rng);
        plan.extend(splits.into_iter().map(|s| (*family, s)));
    }
    plan.shuffle(&mut rng);
    let shapes = plan
        .par_iter()
        .enumerate()
        .map(|(i, &(family, split))| {
            let shape_seed = derive_seed(seed, i as u64);
            let spec = ShapeSpec::random(family, shape_seed);
            let mesh = generate_shape(&spec, options.resolution)?;
            let gt = sample_surface(&mesh, options.gt_points, derive_seed(shape_seed, 1))?;
            let mut idx: Vec<usize> = (0..gt.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(shape_seed, 2)));
            idx.truncate(options.encoder_points);
            let encoder = PointCloud::from_points(gt.select(&idx).points);
            let gt = PointCloud {
                source_face: None,
                ..gt
            };
            Ok(ShapeRecord {
                id: format!("{:04}_{}", i, family.name()),
                spec,
                split,
                mesh,
                gt,
                encoder,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed,
        options: *options,
        shapes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    spec: ShapeSpec,
    split: Split,
    mesh: PathBuf,
    gt: PathBuf,
    gt_normals: PathBuf,
    encoder: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    options: DatasetOptions,
    shapes: Vec<ManifestEntry>,
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("meshes"))?;
    fs::create_dir_all(dir.join("clouds"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.shapes {
        let e = ManifestEntry {
            id: s.id.clone(),
            spec: s.spec.clone(),
            split: s.split,
            mesh: PathBuf::from(format!("meshes/{}.obj", s.id)),
            gt: PathBuf::from(format!("clouds/{}.gt.bin", s.id)),
            gt_normals: PathBuf::from(format!("clouds/{}.gt_normals.bin", s.id)),
            encoder: PathBuf::from(format!("clouds/{}.enc.bin", s.id)),
        };
        save_obj(&s.mesh, dir.join(&e.mesh))?;
        save_points_bin(&s.gt.points, dir.join(&e.gt))?;
        let normals = s.gt.normals.as_ref().ok_or(Error::MissingAttribute("normals"))?;
        save_points_bin(normals, dir.join(&e.gt_normals))?;
        save_points_bin(&s.encoder.points, dir.join(&e.encoder))?;
        entries.push(e);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: dataset.seed,
        options: dataset.options,
        shapes: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let shapes = manifest
        .shapes
        .into_iter()
        .map(|e| {
            let gt = PointCloud {
                points: load_points_bin(dir.join(&e.gt))?,
                normals: Some(load_points_bin(dir.join(&e.gt_normals))?),
                ..Default::default()
            };
            gt.validate()?;
            Ok(ShapeRecord {
                mesh: load_obj(dir.join(&e.mesh))?,
                encoder: PointCloud::from_points(load_points_bin(dir.join(&e.encoder))?),
                id: e.id,
                spec: e.spec,
                split: e.split,
                gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed: manifest.seed,
        options: manifest.options,
        shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::extract_boundary_loops;

    fn oriented(mesh: &Mesh) -> bool {
        let mut directed = std::collections::HashSet::new();
        for f in mesh.faces() {
            for k in 0..3 {
                if !directed.insert((f[k], f[(k + 1) % 3])) {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn family_euler_characteristics() {
        let t = ShapeSpec {
            kind: ShapeKind::Torus { major: 1.0, minor: 0.3 },
            seed: 0,
        };
        let e = ShapeSpec {
            kind: ShapeKind::Ellipsoid { radii: [1.0, 0.7, 0.5] },
            seed: 0,
        };
        let p = ShapeSpec {
            kind: ShapeKind::PlateWithHoles {
                size: [1.5, 0.7, 0.15],
                holes: 2,
                hole: 0.5,
            },
            seed: 0,
        };
        let b = ShapeSpec {
            kind: ShapeKind::BoxWithHole {
                size: [1.0, 1.0, 0.5],
                hole: [0.4, 0.4],
            },
            seed: 0,
        };
        for (spec, chi) in [(t, 0), (e, 2), (p, -2), (b, 0)] {
            let m = generate_shape(&spec, 3).unwrap();
            assert_eq!(euler_characteristic(&m), chi, "{:?}", spec.family());
            assert!(m.is_closed());
            assert!(oriented(&m));
            assert!(extract_boundary_loops(&m).loops.is_empty());
            let r = m.vertices().iter().map(|v| crate::geom::norm(*v)).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outward_orientation() {
        for family in Family::ALL {
            let m = generate_shape(&ShapeSpec::random(family, 11), 2).unwrap();
            // signed volume of a closed outward surface is positive
            let vol: f64 = m
                .faces()
                .iter()
                .map(|f| {
                    let v = m.vertices();
                    crate::geom::dot(v[f[0]], crate::geom::cross(v[f[1]], v[f[2]])) / 6.0
                })
                .sum();
            assert!(vol > 0.0, "{family:?}");
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let bad = ShapeSpec {
            kind: ShapeKind::Torus { major: 0.2, minor: 0.3 },
            seed: 0,
        };
        assert!(generate_shape(&bad, 2).is_err());
        let crowded = ShapeSpec {
            kind: ShapeKind::PlateWithHoles {
                size: [1.0, 1.0, 0.1],
                holes: 5,
                hole: 0.5,
            },
            seed: 0,
        };
        assert!(generate_shape(&crowded, 2).is_err());
    }

    #[test]
    fn mix_counts_sum() {
        let m = FamilyMix::default();
        assert_eq!(m.counts(64).unwrap(), [25, 13, 13, 13]);
        assert_eq!(m.counts(10).unwrap(), [4, 2, 2, 2]);
        assert_eq!(m.counts(1).unwrap().iter().sum::<usize>(), 1);
    }

    fn small_options() -> DatasetOptions {
        DatasetOptions {
            gt_points: 400,
            encoder_points: 100,
            resolution: 2,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_is_deterministic_and_split() {
        let a = make_dataset(10, &small_options(), 7).unwrap();
        let b = make_dataset(10, &small_options(), 7).unwrap();
        assert_eq!(a.len(), 10);
        for (x, y) in a.shapes.iter().zip(&b.shapes) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.gt, y.gt);
            assert_eq!(x.encoder, y.encoder);
            assert_eq!(x.gt.len(), 400);
            assert_eq!(x.encoder.len(), 100);
            for p in &x.encoder.points {
                assert!(x.gt.points.contains(p));
            }
        }
        let n = |s| a.split(s).len();
        assert_eq!(n(Split::Train) + n(Split::Val) + n(Split::Test), 10);
        assert!(n(Split::Test) >= 1 && n(Split::Train) >= 6);
    }

    #[test]
    fn default_gt_cloud_size() {
        let d = make_dataset(1, &DatasetOptions::default(), 3).unwrap();
        assert_eq!(d.shapes[0].gt.len(), 10_000);
        assert_eq!(d.shapes[0].encoder.len(), 2_500);
        d.shapes[0].gt.validate().unwrap();
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = make_dataset(4, &small_options(), 1).unwrap();
        save_dataset(&a, dir.path()).unwrap();
        let b = load_dataset(dir.path()).unwrap();
        assert_eq!(b.len(), 4);
        for (x, y) in a.shapes.iter().zip(&b.shapes) {
            assert_eq!(x.spec, y.spec);
            assert_eq!(x.split, y.split);
            assert_eq!(x.gt.points, y.gt.points);
            assert_eq!(x.gt.normals, y.gt.normals);
            assert_eq!(x.encoder.points, y.encoder.points);
            assert_eq!(x.mesh.faces(), y.mesh.faces());
        }
    }
}
