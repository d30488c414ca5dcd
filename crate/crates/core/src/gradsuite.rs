//! Finite-difference checks of every loss and every network composition on
//! random small instances.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, Activation, BoundMlp, GradCheckReport, MlpParams, Tape, Tensor, Value};
use crate::geom::derive_seed;
use crate::losses::{
    boundary_energy, chamfer, edge_loss, error_regression_loss, normal_loss, smoothness_loss, total_loss, LossTerms,
    LossWeights, MeshVar,
};
use crate::mesh::{
    extract_boundary_loops, make_icosphere, prune_faces, sample_barycentric, BoundaryLoop, BoundaryLoops, Mesh,
    PointCloud, SurfaceSample, Topology,
};
use crate::networks::{deform_var, encode_var, error_var, refine_var, Architecture};
use crate::{Error, Result};

/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_nonsmooth: usize,
}

impl CaseReport {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE && self.checked > 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passes(&self) -> bool {
        self.cases.iter().all(CaseReport::passes)
    }
}

type Instance = (
    Vec<Tensor>,
    Box<dyn for<'t> Fn(&'t Tape, &[Value<'t>]) -> Result<Value<'t>>>,
);

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lim: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect()).expect("sized")
}

fn jittered(mesh: &Mesh, rng: &mut ChaCha8Rng, amount: f64) -> Tensor {
    let pts: Vec<[f64; 3]> = mesh
        .vertices()
        .iter()
        .map(|p| p.map(|c| c + rng.gen_range(-amount..amount)))
        .collect();
    Tensor::from_points(&pts)
}

fn unit_normals(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    while points.len() < n {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let len = crate::geom::norm(v);
        if len < 0.1 {
            continue;
        }
        points.push(v.map(|c| c * 1.2));
        normals.push(v.map(|c| c / len));
    }
    PointCloud {
        points,
        normals: Some(normals),
        ..Default::default()
    }
}

/// Parameters as a flat list of tensors: weight, bias per layer.
fn flatten(params: &MlpParams) -> Vec<Tensor> {
    params
        .layers
        .iter()
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .collect()
}

fn rebind<'t>(vals: &[Value<'t>], acts: &[Activation]) -> Result<BoundMlp<'t>> {
    let w = vals.iter().step_by(2).copied().collect();
    let b = vals.iter().skip(1).step_by(2).copied().collect();
    Ok(BoundMlp::from_values(w, b, acts.to_vec())?)
}

fn activations(p: &MlpParams) -> Vec<Activation> {
    p.layers.iter().map(|l| l.activation).collect()
}

/// Random small net with non-zero biases so relu units sit away from their kinks.
fn random_net(init: MlpParams, rng: &mut ChaCha8Rng) -> MlpParams {
    let mut p = init;
    for l in &mut p.layers {
        for b in l.bias.data_mut() {
            *b = rng.gen_range(-0.3..0.3);
        }
    }
    p
}

fn tiny_arch(rng: &mut ChaCha8Rng) -> Architecture {
    let w = |rng: &mut ChaCha8Rng| rng.gen_range(4..8);
    Architecture {
        feature_dim: rng.gen_range(3..6),
        encoder_hidden: vec![w(rng)],
        deform_hidden: vec![w(rng), w(rng)],
        error_hidden: vec![w(rng), w(rng)],
        refine_hidden: vec![w(rng), w(rng)],
    }
}

fn mesh_var<'t>(pos: Value<'t>, topo: &Arc<Topology>) -> Result<MeshVar<'t>> {
    MeshVar::new(pos, Arc::clone(topo))
}

/// Icosphere level 1 with a small patch removed, so it has one boundary loop.
fn open_sphere() -> Mesh {
    let s = make_icosphere(1).expect("small level");
    let mut mask = vec![false; s.face_count()];
    mask[0] = true;
    mask[1] = true;
    prune_faces(&s, &mask).expect("non-empty").0
}

fn case_chamfer(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (rng.gen_range(1..13), rng.gen_range(1..13));
    (
        vec![rand_tensor(rng, n, 3, 1.0), rand_tensor(rng, m, 3, 1.0)],
        Box::new(|_, v| chamfer(&v[0], &v[1])),
    )
}

fn case_boundary(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.gen_range(3..10);
    let pts: Vec<[f64; 3]> = (0..k)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / k as f64;
            let r = 1.0 + rng.gen_range(-0.3..0.3);
            [r * a.cos(), r * a.sin(), rng.gen_range(-0.2..0.2)]
        })
        .collect();
    let loops = BoundaryLoops {
        loops: vec![BoundaryLoop {
            vertices: (0..k).collect(),
        }],
        pinches: Vec::new(),
    };
    (
        vec![Tensor::from_points(&pts)],
        Box::new(move |_, v| Ok(boundary_energy(&v[0], &loops)?.0)),
    )
}

fn case_error_regression(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..30);
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();
    (
        vec![rand_tensor(rng, n, 1, 1.0)],
        Box::new(move |_, v| error_regression_loss(&v[0], &target)),
    )
}

fn case_normal(rng: &mut ChaCha8Rng) -> Instance {
    let base = make_icosphere(0).expect("level 0");
    let topo = Arc::clone(base.topology());
    let samples = sample_barycentric(&base, 30, rng.gen()).expect("area");
    let gt = unit_normals(rng, 40);
    (
        vec![jittered(&base, rng, 0.1)],
        Box::new(move |_, v| {
            let m = mesh_var(v[0], &topo)?;
            let pts = m.sample_points(&samples)?;
            normal_loss(&m, &m.sample_cloud(&samples, &pts), &gt)
        }),
    )
}

fn case_smooth(rng: &mut ChaCha8Rng) -> Instance {
    let base = if rng.gen_bool(0.5) {
        make_icosphere(0).expect("level 0")
    } else {
        open_sphere()
    };
    let topo = Arc::clone(base.topology());
    (
        vec![jittered(&base, rng, 0.1)],
        Box::new(move |_, v| smoothness_loss(&mesh_var(v[0], &topo)?)),
    )
}

fn case_edge(rng: &mut ChaCha8Rng) -> Instance {
    let base = open_sphere();
    let topo = Arc::clone(base.topology());
    (
        vec![jittered(&base, rng, 0.1)],
        Box::new(move |_, v| edge_loss(&mesh_var(v[0], &topo)?)),
    )
}

fn case_total(rng: &mut ChaCha8Rng) -> Instance {
    let base = open_sphere();
    let topo = Arc::clone(base.topology());
    let loops = extract_boundary_loops(&base);
    let samples = sample_barycentric(&base, 25, rng.gen()).expect("area");
    let gt = unit_normals(rng, 30);
    let n = rng.gen_range(1..10);
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();
    let weights = LossWeights {
        lambda4: 0.3,
        ..Default::default()
    };
    (
        vec![jittered(&base, rng, 0.05), rand_tensor(rng, n, 1, 1.0)],
        Box::new(move |tape, v| {
            let m = mesh_var(v[0], &topo)?;
            let pts = m.sample_points(&samples)?;
            let cloud = m.sample_cloud(&samples, &pts);
            let terms = LossTerms {
                cd: Some(chamfer(&pts, &tape.constant(Tensor::from_points(&gt.points)))?),
                error: Some(error_regression_loss(&v[1], &target)?),
                bound: Some(boundary_energy(&m.positions, &loops)?.0),
                normal: Some(normal_loss(&m, &cloud, &gt)?),
                smooth: Some(smoothness_loss(&m)?),
                edge: Some(edge_loss(&m)?),
            };
            total_loss(tape, &terms, &weights)
        }),
    )
}

fn case_mlp(rng: &mut ChaCha8Rng) -> Instance {
    let dims: Vec<usize> = (0..5).map(|_| rng.gen_range(2..7)).collect();
    let params = random_net(MlpParams::init(&dims, Activation::Relu, Activation::Tanh, rng), rng);
    let acts = activations(&params);
    let rows = rng.gen_range(1..6);
    let coeff = rand_tensor(rng, rows, dims[4], 1.0);
    let mut inputs = vec![rand_tensor(rng, rows, dims[0], 1.0)];
    inputs.extend(flatten(&params));
    (
        inputs,
        Box::new(move |tape, v| {
            let net = rebind(&v[1..], &acts)?;
            Ok(net.forward(v[0])?.mul(&tape.constant(coeff.clone()))?.sum())
        }),
    )
}

fn case_deform(rng: &mut ChaCha8Rng) -> Instance {
    let arch = tiny_arch(rng);
    let params = random_net(arch.init_deform(rng), rng);
    let acts = activations(&params);
    let base = make_icosphere(0).expect("level 0");
    let samples: Vec<SurfaceSample> = sample_barycentric(&base, 20, rng.gen()).expect("area");
    let target = Tensor::from_points(&unit_normals(rng, 15).points);
    let mut inputs = vec![rand_tensor(rng, 1, arch.feature_dim, 1.0)];
    inputs.extend(flatten(&params));
    (
        inputs,
        Box::new(move |tape, v| {
            let net = rebind(&v[1..], &acts)?;
            let m = deform_var(&MeshVar::constant(tape, &base), &v[0], &net)?;
            chamfer(&m.sample_points(&samples)?, &tape.constant(target.clone()))
        }),
    )
}

fn case_error_net(rng: &mut ChaCha8Rng) -> Instance {
    let arch = tiny_arch(rng);
    let params = random_net(arch.init_error(rng), rng);
    let acts = activations(&params);
    let n = rng.gen_range(1..12);
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.3)).collect();
    let mut inputs = vec![rand_tensor(rng, n, 3, 1.0), rand_tensor(rng, 1, arch.feature_dim, 1.0)];
    inputs.extend(flatten(&params));
    (
        inputs,
        Box::new(move |_, v| {
            let net = rebind(&v[2..], &acts)?;
            error_regression_loss(&error_var(&v[0], &v[1], &net)?, &target)
        }),
    )
}

fn case_refine(rng: &mut ChaCha8Rng) -> Instance {
    let arch = tiny_arch(rng);
    let params = random_net(arch.init_refine(rng), rng);
    let acts = activations(&params);
    let base = open_sphere();
    let topo = Arc::clone(base.topology());
    let loops = extract_boundary_loops(&base);
    let mut inputs = vec![jittered(&base, rng, 0.05), rand_tensor(rng, 1, arch.feature_dim, 1.0)];
    inputs.extend(flatten(&params));
    (
        inputs,
        Box::new(move |_, v| {
            let net = rebind(&v[2..], &acts)?;
            let (out, _) = refine_var(&mesh_var(v[0], &topo)?, &loops, &v[1], &net)?;
            Ok(boundary_energy(&out.positions, &loops)?.0.add(&edge_loss(&out)?)?)
        }),
    )
}

fn case_encoder(rng: &mut ChaCha8Rng) -> Instance {
    let arch = tiny_arch(rng);
    let params = random_net(arch.init_encoder(rng), rng);
    let acts = activations(&params);
    let n = rng.gen_range(1..15);
    let coeff = rand_tensor(rng, 1, arch.feature_dim, 1.0);
    let mut inputs = vec![rand_tensor(rng, n, 3, 1.0)];
    inputs.extend(flatten(&params));
    (
        inputs,
        Box::new(move |tape, v| {
            let net = rebind(&v[1..], &acts)?;
            Ok(encode_var(&v[0], &net)?.mul(&tape.constant(coeff.clone()))?.sum())
        }),
    )
}

fn case_autoencoder(rng: &mut ChaCha8Rng) -> Instance {
    let arch = tiny_arch(rng);
    let enc = random_net(arch.init_encoder(rng), rng);
    let dec = random_net(arch.init_deform(rng), rng);
    let (ea, da) = (activations(&enc), activations(&dec));
    let split = 1 + 2 * enc.layers.len();
    let base = make_icosphere(0).expect("level 0");
    let n = rng.gen_range(2..10);
    let cloud = rand_tensor(rng, n, 3, 1.0);
    let mut inputs = vec![cloud.clone()];
    inputs.extend(flatten(&enc));
    inputs.extend(flatten(&dec));
    (
        inputs,
        Box::new(move |tape, v| {
            let f = encode_var(&v[0], &rebind(&v[1..split], &ea)?)?;
            let m = deform_var(&MeshVar::constant(tape, &base), &f, &rebind(&v[split..], &da)?)?;
            chamfer(&m.positions, &v[0])
        }),
    )
}

type CaseFn = fn(&mut ChaCha8Rng) -> Instance;

pub const CASES: [(&str, CaseFn); 13] = [
    ("chamfer", case_chamfer),
    ("boundary_energy", case_boundary),
    ("error_regression", case_error_regression),
    ("normal_loss", case_normal),
    ("smoothness_loss", case_smooth),
    ("edge_loss", case_edge),
    ("total_loss", case_total),
    ("mlp", case_mlp),
    ("deform_chamfer", case_deform),
    ("error_net_regression", case_error_net),
    ("refine_boundary_energy", case_refine),
    ("encoder", case_encoder),
    ("encoder_deform_chamfer", case_autoencoder),
];

/// Runs every case on `instances` random instances.
pub fn run_gradient_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut cases = Vec::with_capacity(CASES.len());
    for (k, (name, make)) in CASES.iter().enumerate() {
        let mut report = CaseReport {
            name,
            instances,
            max_rel_error: 0.0,
            checked: 0,
            skipped_nonsmooth: 0,
        };
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (k as u64) << 32 | i as u64));
            let (inputs, f) = make(&mut rng);
            let r: GradCheckReport = grad_check::<_, Error>(|t, v| f(t, v), &inputs, GRAD_STEP)?;
            report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
            report.checked += r.checked;
            report.skipped_nonsmooth += r.skipped_nonsmooth;
        }
        cases.push(report);
    }
    Ok(SuiteReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_instances() {
        let r = run_gradient_suite(3, 11).unwrap();
        for c in &r.cases {
            assert!(c.passes(), "{c:?}");
        }
    }
}
