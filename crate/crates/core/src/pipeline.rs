//! The progressive reconstruction pipeline and its staged training.
//!
//! ```text
//! template -> deform1 -> M1 -> prune(error1, tau1) -> M1'
//!          -> deform2 -> M2 -> prune(error2, tau2) -> M2' -> refine -> output
//! ```
//!
//! The deform-only variant skips both pruning steps and the refinement.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundMlp, Checkpoint, MlpParams, OptimState, Tape, Tensor, Value};
use crate::data::ShapeRecord;
use crate::eval::directional_distances;
use crate::geom::derive_seed;
use crate::losses::{
    boundary_energy, chamfer, edge_loss, error_regression_loss, normal_loss, smoothness_loss, total_loss, LossTerms,
    LossValues, LossWeights, MeshVar,
};
use crate::mesh::{extract_boundary_loops, make_icosphere, sample_barycentric, sample_surface, Mesh, PointCloud};
use crate::networks::{
    deform, deform_var, encode_pointcloud, encode_var, error_var, estimate_errors, prune_by_threshold, refine_boundary,
    refine_var, Architecture, PerFaceError, RefineDiagnostics, ShapeFeature,
};
use crate::spatial::{nearest_all, KdTree};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Deform1,
    Error1,
    Deform2,
    Error2,
    Refine,
}

impl StageId {
    pub const ALL: [StageId; 5] = [
        StageId::Deform1,
        StageId::Error1,
        StageId::Deform2,
        StageId::Error2,
        StageId::Refine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageId::Deform1 => "deform1",
            StageId::Error1 => "error1",
            StageId::Deform2 => "deform2",
            StageId::Error2 => "error2",
            StageId::Refine => "refine",
        }
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageId::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Both deformation stages, no pruning and no refinement.
    DeformOnly,
}

impl Variant {
    /// Stages in training order.
    pub fn stages(self) -> &'static [StageId] {
        match self {
            Variant::Full => &StageId::ALL,
            Variant::DeformOnly => &[StageId::Deform1, StageId::Deform2],
        }
    }
}

/// Settings of one deform/prune subnet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub tau: f64,
    pub samples_per_face: usize,
    #[serde(default)]
    pub weights: Option<LossWeights>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.samples_per_face == 0 {
            return Err(Error::Config("samples_per_face must be at least 1".into()));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        Ok(())
    }
}

fn default_stages() -> [StageConfig; 2] {
    [
        StageConfig {
            tau: 0.1,
            samples_per_face: 10,
            weights: None,
        },
        StageConfig {
            tau: 0.05,
            samples_per_face: 10,
            weights: None,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub drop_to: f64,
    pub drop_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            drop_to: 1e-4,
            drop_epoch: 60,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.drop_epoch {
            self.initial
        } else {
            self.drop_to
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Points sampled on the predicted mesh for the Chamfer loss.
    pub cd_samples_pred: usize,
    /// Ground-truth points drawn per step for the Chamfer loss.
    pub cd_samples_gt: usize,
    /// Area-weighted samples used to train the error networks.
    pub error_samples: usize,
    pub weights: LossWeights,
    pub stages: [StageConfig; 2],
    pub template_level: u32,
    pub architecture: Architecture,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_stage: 100,
            finetune_epochs: 50,
            finetune_lr: 1e-4,
            batch_size: 8,
            lr: LrSchedule::default(),
            seed: 0,
            cd_samples_pred: 2500,
            cd_samples_gt: 2500,
            error_samples: 2000,
            weights: LossWeights::default(),
            stages: default_stages(),
            template_level: 4,
            architecture: Architecture::default(),
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("cd_samples_pred", self.cd_samples_pred),
            ("cd_samples_gt", self.cd_samples_gt),
            ("error_samples", self.error_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let lrs = [self.lr.initial, self.lr.drop_to, self.finetune_lr];
        if lrs.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config(format!("learning rates must be positive: {lrs:?}")));
        }
        if self.lr.drop_epoch > self.epochs_per_stage {
            return Err(Error::Config(format!(
                "lr drop epoch {} is beyond epochs_per_stage {}",
                self.lr.drop_epoch, self.epochs_per_stage
            )));
        }
        if self.template_level > 6 {
            return Err(Error::Config(format!(
                "template level {} is too large",
                self.template_level
            )));
        }
        self.weights.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        self.architecture.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Parameters of every network plus the inference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub architecture: Architecture,
    pub variant: Variant,
    pub encoder: MlpParams,
    pub deform1: MlpParams,
    pub error1: MlpParams,
    pub deform2: MlpParams,
    pub error2: MlpParams,
    pub refine: MlpParams,
    pub stages: [StageConfig; 2],
    pub template_level: u32,
    /// Stages trained so far, in order.
    pub trained: Vec<StageId>,
}

const NETS: [&str; 6] = ["encoder", "deform1", "error1", "deform2", "error2", "refine"];

impl Model {
    pub fn new(
        architecture: Architecture,
        variant: Variant,
        stages: [StageConfig; 2],
        template_level: u32,
        seed: u64,
    ) -> Result<Self> {
        architecture.validate()?;
        for s in &stages {
            s.validate()?;
        }
        let rng = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(seed, k));
        Ok(Self {
            encoder: architecture.init_encoder(&mut rng(1)),
            deform1: architecture.init_deform(&mut rng(2)),
            error1: architecture.init_error(&mut rng(3)),
            deform2: architecture.init_deform(&mut rng(4)),
            error2: architecture.init_error(&mut rng(5)),
            refine: architecture.init_refine(&mut rng(6)),
            architecture,
            variant,
            stages,
            template_level,
            trained: Vec::new(),
        })
    }

    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Self::new(
            config.architecture.clone(),
            config.variant,
            config.stages,
            config.template_level,
            derive_seed(config.seed, 0x1417),
        )
    }

    pub fn template(&self) -> Result<Mesh> {
        Ok(make_icosphere(self.template_level)?)
    }

    fn nets(&self) -> [&MlpParams; 6] {
        [
            &self.encoder,
            &self.deform1,
            &self.error1,
            &self.deform2,
            &self.error2,
            &self.refine,
        ]
    }

    /// Networks updated when training `stage`, in a fixed order.
    fn stage_nets(stage: StageId) -> &'static [usize] {
        match stage {
            StageId::Deform1 => &[0, 1],
            StageId::Error1 => &[2],
            StageId::Deform2 => &[3],
            StageId::Error2 => &[4],
            StageId::Refine => &[5],
        }
    }

    fn net_mut(&mut self, k: usize) -> &mut MlpParams {
        match k {
            0 => &mut self.encoder,
            1 => &mut self.deform1,
            2 => &mut self.error1,
            3 => &mut self.deform2,
            4 => &mut self.error2,
            _ => &mut self.refine,
        }
    }

    fn variant_nets(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .variant
            .stages()
            .iter()
            .flat_map(|s| Self::stage_nets(*s).iter().copied())
            .collect();
        ks.sort_unstable();
        ks
    }

    /// Checksums of the six networks.
    pub fn checksums(&self) -> [u64; 6] {
        self.nets().map(|n| n.checksum())
    }

    /// Zeroes the output layer of every head, making the pipeline the identity.
    pub fn zero_heads(&mut self) {
        for k in 1..6 {
            self.net_mut(k).zero_output_layer();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for (name, net) in NETS.iter().zip(self.nets()) {
            c.push_mlp(name, net);
        }
        c.push_scalar(
            "meta.variant",
            match self.variant {
                Variant::Full => 0.0,
                Variant::DeformOnly => 1.0,
            },
        );
        c.push_scalar("meta.template_level", self.template_level as f64);
        for (i, s) in self.stages.iter().enumerate() {
            c.push_scalar(format!("stage{}.tau", i + 1), s.tau);
            c.push_scalar(format!("stage{}.samples_per_face", i + 1), s.samples_per_face as f64);
            if let Some(w) = &s.weights {
                c.push(
                    format!("stage{}.weights", i + 1),
                    vec![5],
                    vec![w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5],
                );
            }
        }
        c.push(
            "meta.trained",
            vec![self.trained.len()],
            self.trained
                .iter()
                .map(|s| StageId::ALL.iter().position(|x| x == s).expect("known stage") as f64)
                .collect(),
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let encoder = c.mlp("encoder")?;
        let [deform1, error1, deform2, error2, refine] =
            ["deform1", "error1", "deform2", "error2", "refine"].map(|n| c.mlp(n));
        let (deform1, error1, deform2, error2, refine) = (deform1?, error1?, deform2?, error2?, refine?);
        let hidden = |m: &MlpParams| {
            let d = m.dims();
            d[1..d.len() - 1].to_vec()
        };
        let architecture = Architecture {
            feature_dim: encoder.out_dim(),
            encoder_hidden: hidden(&encoder),
            deform_hidden: hidden(&deform1),
            error_hidden: hidden(&error1),
            refine_hidden: hidden(&refine),
        };
        architecture.validate()?;
        let layouts = [
            (&encoder, architecture.encoder_dims()),
            (&deform1, architecture.deform_dims()),
            (&deform2, architecture.deform_dims()),
            (&error1, architecture.error_dims()),
            (&error2, architecture.error_dims()),
            (&refine, architecture.refine_dims()),
        ];
        for (net, dims) in layouts {
            if net.dims() != dims {
                return Err(Error::Format(format!(
                    "inconsistent network layout {:?}, expected {dims:?}",
                    net.dims()
                )));
            }
        }
        let variant = match c.scalar("meta.variant")? {
            0.0 => Variant::Full,
            1.0 => Variant::DeformOnly,
            v => return Err(Error::Format(format!("unknown variant code {v}"))),
        };
        let mut stages = default_stages();
        for (i, s) in stages.iter_mut().enumerate() {
            s.tau = c.scalar(&format!("stage{}.tau", i + 1))?;
            s.samples_per_face = c.scalar(&format!("stage{}.samples_per_face", i + 1))? as usize;
            s.weights = match c.get(&format!("stage{}.weights", i + 1)) {
                Some(a) if a.data.len() == 5 => Some(LossWeights {
                    lambda1: a.data[0],
                    lambda2: a.data[1],
                    lambda3: a.data[2],
                    lambda4: a.data[3],
                    lambda5: a.data[4],
                }),
                Some(_) => return Err(Error::Format("stage weights need 5 values".into())),
                None => None,
            };
            s.validate()?;
        }
        let trained = c
            .get("meta.trained")
            .map(|a| {
                a.data
                    .iter()
                    .map(|&k| {
                        StageId::ALL
                            .get(k as usize)
                            .copied()
                            .ok_or_else(|| Error::Format(format!("unknown stage code {k}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();
        Ok(Self {
            architecture,
            variant,
            encoder,
            deform1,
            error1,
            deform2,
            error2,
            refine,
            stages,
            template_level: c.scalar("meta.template_level")? as u32,
            trained,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.to_checkpoint().write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(&Checkpoint::read(f)?)
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<ShapeFeature> {
        encode_pointcloud(cloud, &self.encoder)
    }
}

/// What the pipeline starts from.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Cloud(&'a PointCloud),
    Feature(&'a ShapeFeature),
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub feature: ShapeFeature,
    pub m1: Mesh,
    pub errors1: Option<PerFaceError>,
    pub m1_pruned: Mesh,
    pub m2: Mesh,
    pub errors2: Option<PerFaceError>,
    pub m2_pruned: Mesh,
    pub output: Mesh,
    pub refine: RefineDiagnostics,
}

impl Reconstruction {
    /// Named intermediates in pipeline order, excluding the output.
    pub fn stages(&self) -> [(&'static str, &Mesh); 4] {
        [
            ("stage1", &self.m1),
            ("stage1_pruned", &self.m1_pruned),
            ("stage2", &self.m2),
            ("stage2_pruned", &self.m2_pruned),
        ]
    }
}

fn prune_stage(mesh: &Mesh, errors: &PerFaceError, tau: f64, stage: usize) -> Result<Mesh> {
    if errors.values().iter().all(|&e| e > tau) {
        return Err(Error::StageFailure {
            stage,
            last_valid: Box::new(mesh.clone()),
        });
    }
    Ok(prune_by_threshold(mesh, errors, tau)?.0)
}

/// Runs the pipeline. `seed` drives the per-face error sampling.
pub fn reconstruct(input: ModelInput<'_>, model: &Model, template: &Mesh, seed: u64) -> Result<Reconstruction> {
    if template.face_count() == 0 || !template.is_closed() {
        return Err(Error::Config("template must be a closed, non-empty mesh".into()));
    }
    let feature = match input {
        ModelInput::Cloud(c) => model.encode(c)?,
        ModelInput::Feature(f) => f.clone(),
    };
    let m1 = deform(template, &feature, &model.deform1)?;
    if model.variant == Variant::DeformOnly {
        let m2 = deform(&m1, &feature, &model.deform2)?;
        return Ok(Reconstruction {
            feature,
            m1_pruned: m1.clone(),
            m1,
            errors1: None,
            m2_pruned: m2.clone(),
            output: m2.clone(),
            m2,
            errors2: None,
            refine: RefineDiagnostics::default(),
        });
    }
    let [s1, s2] = model.stages;
    let errors1 = estimate_errors(&m1, &feature, &model.error1, s1.samples_per_face, derive_seed(seed, 1))?;
    let m1_pruned = prune_stage(&m1, &errors1, s1.tau, 1)?;
    let m2 = deform(&m1_pruned, &feature, &model.deform2)?;
    let errors2 = estimate_errors(&m2, &feature, &model.error2, s2.samples_per_face, derive_seed(seed, 2))?;
    let m2_pruned = prune_stage(&m2, &errors2, s2.tau, 2)?;
    let loops = extract_boundary_loops(&m2_pruned);
    let (output, refine) = refine_boundary(&m2_pruned, &loops, &feature, &model.refine)?;
    Ok(Reconstruction {
        feature,
        m1,
        errors1: Some(errors1),
        m1_pruned,
        m2,
        errors2: Some(errors2),
        m2_pruned,
        output,
        refine,
    })
}

/// Unsquared distance from each sample to its nearest ground-truth point.
pub fn ground_truth_errors(samples: &PointCloud, gt: &PointCloud) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth cloud"));
    }
    Ok(nearest_all(&gt.points, &samples.points)
        .iter()
        .map(|n| n.dist2.sqrt())
        .collect())
}

/// Mean loss components of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: String,
    #[serde(flatten)]
    pub losses: LossValues,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    epoch: usize,
    stage: &'a str,
    cd: f64,
    error: f64,
    bound: f64,
    normal: f64,
    smooth: f64,
    edge: f64,
    total: f64,
}

/// Writes `epoch,stage,cd,error,bound,normal,smooth,edge,total` rows.
pub fn write_loss_csv(logs: &[EpochLog], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for l in logs {
        let v = &l.losses;
        out.serialize(CsvRow {
            epoch: l.epoch,
            stage: &l.stage,
            cd: v.cd,
            error: v.error,
            bound: v.bound,
            normal: v.normal,
            smooth: v.smooth,
            edge: v.edge,
            total: v.total,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Frozen-stage outputs for one training shape.
struct ShapeCache {
    feature: ShapeFeature,
    /// Mesh fed to the stage being trained.
    input: Option<Mesh>,
}

fn check_shapes(shapes: &[&ShapeRecord]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for s in shapes {
        if s.gt.normals.is_none() {
            return Err(Error::MissingAttribute("normals"));
        }
    }
    Ok(())
}

fn ensure_order(model: &Model, stage: StageId) -> Result<()> {
    let order = model.variant.stages();
    let pos = order.iter().position(|s| *s == stage).ok_or_else(|| {
        Error::Config(format!(
            "stage `{stage}` is not part of the {:?} variant",
            model.variant
        ))
    })?;
    for prev in &order[..pos] {
        if !model.trained.contains(prev) {
            return Err(Error::StageOrder {
                requested: stage.name(),
                stage: prev.name(),
            });
        }
    }
    Ok(())
}

fn prune_for_training(
    model: &Model,
    mesh: &Mesh,
    feature: &ShapeFeature,
    which: usize,
    seed: u64,
) -> Result<Option<Mesh>> {
    if model.variant == Variant::DeformOnly {
        return Ok(Some(mesh.clone()));
    }
    let (net, cfg) = if which == 1 {
        (&model.error1, model.stages[0])
    } else {
        (&model.error2, model.stages[1])
    };
    let errors = estimate_errors(mesh, feature, net, cfg.samples_per_face, seed)?;
    match prune_stage(mesh, &errors, cfg.tau, which) {
        Ok(m) => Ok(Some(m)),
        Err(Error::StageFailure { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Input mesh of `stage` produced by the frozen earlier stages.
fn frozen_input(
    model: &Model,
    stage: StageId,
    template: &Mesh,
    feature: &ShapeFeature,
    seed: u64,
) -> Result<Option<Mesh>> {
    if stage == StageId::Deform1 {
        return Ok(Some(template.clone()));
    }
    let m1 = deform(template, feature, &model.deform1)?;
    if stage == StageId::Error1 {
        return Ok(Some(m1));
    }
    let Some(m1p) = prune_for_training(model, &m1, feature, 1, derive_seed(seed, 1))? else {
        return Ok(None);
    };
    if stage == StageId::Deform2 {
        return Ok(Some(m1p));
    }
    let m2 = deform(&m1p, feature, &model.deform2)?;
    if stage == StageId::Error2 {
        return Ok(Some(m2));
    }
    prune_for_training(model, &m2, feature, 2, derive_seed(seed, 2))
}

fn gt_subset(gt: &PointCloud, n: usize, seed: u64) -> Vec<[f64; 3]> {
    if n >= gt.len() {
        return gt.points.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, gt.len(), n)
        .into_iter()
        .map(|i| gt.points[i])
        .collect()
}

/// Chamfer and geometry regularizers of a deformed mesh.
fn shape_terms<'t>(
    tape: &'t Tape,
    mesh: &MeshVar<'t>,
    shape: &ShapeRecord,
    config: &TrainConfig,
    seed: u64,
) -> Result<LossTerms<'t>> {
    let plain = mesh.to_mesh()?;
    let samples = sample_barycentric(&plain, config.cd_samples_pred, derive_seed(seed, 10))?;
    let pts = mesh.sample_points(&samples)?;
    let gt = tape.constant(Tensor::from_points(&gt_subset(
        &shape.gt,
        config.cd_samples_gt,
        derive_seed(seed, 11),
    )));
    let cloud = mesh.sample_cloud(&samples, &pts);
    let smooth = match smoothness_loss(mesh) {
        Ok(v) => Some(v),
        Err(Error::NoInteriorEdges) => None,
        Err(e) => return Err(e),
    };
    Ok(LossTerms {
        cd: Some(chamfer(&pts, &gt)?),
        normal: Some(normal_loss(mesh, &cloud, &shape.gt)?),
        smooth,
        edge: Some(edge_loss(mesh)?),
        ..Default::default()
    })
}

fn error_term<'t>(
    mesh: &MeshVar<'t>,
    feature: &Value<'t>,
    net: &BoundMlp<'t>,
    gt_tree: &KdTree,
    n: usize,
    seed: u64,
) -> Result<Value<'t>> {
    let plain = mesh.to_mesh()?;
    let samples = sample_barycentric(&plain, n, seed)?;
    // error targets come from the current geometry; no gradient through them
    let pts = mesh.sample_points(&samples)?.detach();
    let target: Vec<f64> = crate::spatial::nearest_all_with(gt_tree, &pts.value().to_points())
        .iter()
        .map(|nb| nb.dist2.sqrt())
        .collect();
    error_regression_loss(&error_var(&pts, feature, net)?, &target)
}

struct ItemOutput {
    losses: LossValues,
    grads: Vec<MlpParams>,
}

fn stage_item(
    stage: StageId,
    model: &Model,
    cache: &ShapeCache,
    shape: &ShapeRecord,
    gt_tree: &KdTree,
    config: &TrainConfig,
    seed: u64,
) -> Result<Option<ItemOutput>> {
    let Some(input) = &cache.input else { return Ok(None) };
    let tape = Tape::new();
    let weights = match stage {
        StageId::Deform1 | StageId::Error1 => model.stages[0].weights.unwrap_or(config.weights),
        _ => model.stages[1].weights.unwrap_or(config.weights),
    };
    let nets: Vec<_> = Model::stage_nets(stage)
        .iter()
        .map(|&k| model.nets()[k].bind(&tape, true))
        .collect();
    let feature = tape.constant(cache.feature.to_tensor());
    let terms = match stage {
        StageId::Deform1 => {
            let pts = tape.constant(Tensor::from_points(&shape.encoder.points));
            let f = encode_var(&pts, &nets[0])?;
            let m = deform_var(&MeshVar::constant(&tape, input), &f, &nets[1])?;
            shape_terms(&tape, &m, shape, config, seed)?
        }
        StageId::Deform2 => {
            let m = deform_var(&MeshVar::constant(&tape, input), &feature, &nets[0])?;
            shape_terms(&tape, &m, shape, config, seed)?
        }
        StageId::Error1 | StageId::Error2 => {
            let m = MeshVar::constant(&tape, input);
            LossTerms {
                error: Some(error_term(
                    &m,
                    &feature,
                    &nets[0],
                    gt_tree,
                    config.error_samples,
                    derive_seed(seed, 12),
                )?),
                ..Default::default()
            }
        }
        StageId::Refine => {
            let loops = extract_boundary_loops(input);
            if loops.loops.is_empty() {
                return Ok(None);
            }
            let (out, _) = refine_var(&MeshVar::constant(&tape, input), &loops, &feature, &nets[0])?;
            let (bound, _) = boundary_energy(&out.positions, &loops)?;
            let plain = out.to_mesh()?;
            let samples = sample_barycentric(&plain, config.cd_samples_pred, derive_seed(seed, 10))?;
            let pts = out.sample_points(&samples)?;
            let gt = tape.constant(Tensor::from_points(&gt_subset(
                &shape.gt,
                config.cd_samples_gt,
                derive_seed(seed, 11),
            )));
            LossTerms {
                cd: Some(chamfer(&pts, &gt)?),
                bound: Some(bound),
                ..Default::default()
            }
        }
    };
    let total = total_loss(&tape, &terms, &weights)?;
    let losses = terms.values(&total);
    let g = tape.backward(total)?;
    Ok(Some(ItemOutput {
        losses,
        grads: nets.iter().map(|n| n.grads(&g)).collect(),
    }))
}

fn stage_tag(stage: StageId) -> u64 {
    0x57A6E + StageId::ALL.iter().position(|s| *s == stage).expect("known stage") as u64
}

fn item_seed(config: &TrainConfig, tag: u64, epoch: usize, shape: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(config.seed, tag), epoch as u64), shape as u64)
}

/// Shuffled batches, accumulated gradients averaged per batch, one Adam step
/// per batch. `item` returns `None` for shapes that contribute nothing.
#[allow(clippy::too_many_arguments)]
fn run_epochs<F>(
    model: &mut Model,
    nets: &[usize],
    shape_count: usize,
    epochs: usize,
    lr: &dyn Fn(usize) -> f64,
    config: &TrainConfig,
    label: &'static str,
    tag: u64,
    item: F,
) -> Result<Vec<EpochLog>>
where
    F: Fn(&Model, usize, u64) -> Result<Option<ItemOutput>> + Sync,
{
    let mut optims: Vec<OptimState> = nets
        .iter()
        .map(|&k| OptimState::new(NETS[k], model.nets()[k], lr(0)))
        .collect();
    let mut logs = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 0..epochs {
        for o in &mut optims {
            o.lr = lr(epoch);
        }
        let mut order: Vec<usize> = (0..shape_count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            derive_seed(config.seed, tag),
            1 << 40 | epoch as u64,
        )));
        let mut sum = LossValues::default();
        let mut counted = 0usize;
        for batch in order.chunks(config.batch_size) {
            let frozen: &Model = model;
            let outputs: Vec<Option<ItemOutput>> = batch
                .par_iter()
                .map(|&i| item(frozen, i, item_seed(config, tag, epoch, i)))
                .collect::<Result<_>>()?;
            let mut acc: Option<Vec<MlpParams>> = None;
            let mut n = 0usize;
            for out in outputs.into_iter().flatten() {
                if !out.losses.total.is_finite() {
                    return Err(Error::NonFiniteLoss { stage: label, step });
                }
                sum.add_assign(&out.losses);
                n += 1;
                match &mut acc {
                    None => acc = Some(out.grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&out.grads) {
                            x.add_assign(g);
                        }
                    }
                }
            }
            step += 1;
            let Some(mut grads) = acc else { continue };
            counted += n;
            for ((g, o), &k) in grads.iter_mut().zip(&mut optims).zip(nets) {
                g.scale_in_place(1.0 / n as f64);
                o.step(model.net_mut(k), g)?;
            }
        }
        let mean = if counted > 0 {
            sum.scaled(1.0 / counted as f64)
        } else {
            sum
        };
        info!(
            "{label} epoch {epoch}: total {:.6} cd {:.6} error {:.6} bound {:.6} ({counted} shapes)",
            mean.total, mean.cd, mean.error, mean.bound
        );
        logs.push(EpochLog {
            epoch,
            stage: label.to_string(),
            losses: mean,
        });
    }
    Ok(logs)
}

fn shape_seed(config: &TrainConfig, i: usize) -> u64 {
    derive_seed(derive_seed(config.seed, 0xCAC4E), i as u64)
}

/// Trains one stage with every other network frozen.
pub fn train_stage(
    stage: StageId,
    model: &mut Model,
    shapes: &[&ShapeRecord],
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    check_shapes(shapes)?;
    ensure_order(model, stage)?;
    let template = model.template()?;
    let trees: Vec<KdTree> = shapes.par_iter().map(|s| KdTree::new(&s.gt.points)).collect();
    let caches: Vec<ShapeCache> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let feature = model.encode(&s.encoder)?;
            let input = frozen_input(model, stage, &template, &feature, shape_seed(config, i))?;
            if input.is_none() {
                warn!(
                    "{stage}: shape {} lost every face in an earlier stage and is skipped",
                    s.id
                );
            }
            Ok(ShapeCache { feature, input })
        })
        .collect::<Result<_>>()?;
    let schedule = config.lr;
    let logs = run_epochs(
        model,
        Model::stage_nets(stage),
        shapes.len(),
        config.epochs_per_stage,
        &|e| schedule.at(e),
        config,
        stage.name(),
        stage_tag(stage),
        |m, i, seed| stage_item(stage, m, &caches[i], shapes[i], &trees[i], config, seed),
    )?;
    let order = model.variant.stages();
    let pos = order.iter().position(|s| *s == stage).expect("checked");
    model
        .trained
        .retain(|s| order.iter().position(|x| x == s).is_some_and(|p| p < pos));
    model.trained.push(stage);
    Ok(logs)
}

fn finetune_item(
    model: &Model,
    shape: &ShapeRecord,
    template: &Mesh,
    gt_tree: &KdTree,
    config: &TrainConfig,
    seed: u64,
) -> Result<Option<ItemOutput>> {
    let tape = Tape::new();
    let ks = model.variant_nets();
    let bound: Vec<_> = ks.iter().map(|&k| model.nets()[k].bind(&tape, true)).collect();
    let net = |k: usize| &bound[ks.iter().position(|&x| x == k).expect("variant net")];
    let pts = tape.constant(Tensor::from_points(&shape.encoder.points));
    let feature = encode_var(&pts, net(0))?;
    let plain_feature = ShapeFeature::new(feature.value().data().to_vec())?;
    let m1 = deform_var(&MeshVar::constant(&tape, template), &feature, net(1))?;
    let mut terms = LossTerms::default();
    let out = if model.variant == Variant::DeformOnly {
        deform_var(&m1, &feature, net(3))?
    } else {
        let [s1, s2] = model.stages;
        let mut error_sum = error_term(
            &m1,
            &feature,
            net(2),
            gt_tree,
            config.error_samples,
            derive_seed(seed, 21),
        )?;
        let m1_plain = m1.to_mesh()?;
        let e1 = estimate_errors(
            &m1_plain,
            &plain_feature,
            &model.error1,
            s1.samples_per_face,
            derive_seed(seed, 1),
        )?;
        let mask1: Vec<bool> = e1.values().iter().map(|&e| e > s1.tau).collect();
        if mask1.iter().all(|&r| r) {
            warn!("finetune: shape {} lost every face at stage 1 and is skipped", shape.id);
            return Ok(None);
        }
        let (m1p, _) = m1.prune(&mask1)?;
        let m2 = deform_var(&m1p, &feature, net(3))?;
        error_sum = error_sum.add(&error_term(
            &m2,
            &feature,
            net(4),
            gt_tree,
            config.error_samples,
            derive_seed(seed, 22),
        )?)?;
        let e2 = estimate_errors(
            &m2.to_mesh()?,
            &plain_feature,
            &model.error2,
            s2.samples_per_face,
            derive_seed(seed, 2),
        )?;
        let mask2: Vec<bool> = e2.values().iter().map(|&e| e > s2.tau).collect();
        if mask2.iter().all(|&r| r) {
            warn!("finetune: shape {} lost every face at stage 2 and is skipped", shape.id);
            return Ok(None);
        }
        let (m2p, _) = m2.prune(&mask2)?;
        let loops = extract_boundary_loops(&m2p.to_mesh()?);
        let (out, _) = refine_var(&m2p, &loops, &feature, net(5))?;
        if !loops.loops.is_empty() {
            terms.bound = Some(boundary_energy(&out.positions, &loops)?.0);
        }
        terms.error = Some(error_sum);
        out
    };
    let shape_t = shape_terms(&tape, &out, shape, config, seed)?;
    terms.cd = shape_t.cd;
    terms.normal = shape_t.normal;
    terms.smooth = shape_t.smooth;
    terms.edge = shape_t.edge;
    let total = total_loss(&tape, &terms, &config.weights)?;
    let losses = terms.values(&total);
    let g = tape.backward(total)?;
    Ok(Some(ItemOutput {
        losses,
        grads: bound.iter().map(|b| b.grads(&g)).collect(),
    }))
}

/// End-to-end update of every network in the variant with the full objective.
/// Pruning masks are recomputed each step and treated as constants.
pub fn finetune(model: &mut Model, shapes: &[&ShapeRecord], config: &TrainConfig) -> Result<Vec<EpochLog>> {
    config.validate()?;
    check_shapes(shapes)?;
    for s in model.variant.stages() {
        if !model.trained.contains(s) {
            return Err(Error::StageOrder {
                requested: "finetune",
                stage: s.name(),
            });
        }
    }
    let template = model.template()?;
    let trees: Vec<KdTree> = shapes.par_iter().map(|s| KdTree::new(&s.gt.points)).collect();
    let nets = model.variant_nets();
    let lr = config.finetune_lr;
    run_epochs(
        model,
        &nets,
        shapes.len(),
        config.finetune_epochs,
        &|_| lr,
        config,
        "finetune",
        0xF1E7,
        |m, i, seed| finetune_item(m, shapes[i], &template, &trees[i], config, seed),
    )
}

/// Every stage of the configured variant in order, then the fine-tuning.
pub fn train(model: &mut Model, shapes: &[&ShapeRecord], config: &TrainConfig) -> Result<Vec<EpochLog>> {
    let mut logs = Vec::new();
    for &stage in model.variant.stages() {
        logs.extend(train_stage(stage, model, shapes, config)?);
    }
    logs.extend(finetune(model, shapes, config)?);
    Ok(logs)
}

/// Mean loss of the full objective over `shapes` without updating anything.
pub fn evaluate_objective(
    model: &Model,
    shapes: &[&ShapeRecord],
    config: &TrainConfig,
    seed: u64,
) -> Result<LossValues> {
    check_shapes(shapes)?;
    let template = model.template()?;
    let outs: Vec<Option<ItemOutput>> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            finetune_item(
                model,
                s,
                &template,
                &KdTree::new(&s.gt.points),
                config,
                derive_seed(seed, i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let mut sum = LossValues::default();
    let mut n = 0;
    for o in outs.into_iter().flatten() {
        sum.add_assign(&o.losses);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("evaluated shapes"));
    }
    Ok(sum.scaled(1.0 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSweepRow {
    pub tau: f64,
    /// Mean squared distance from output samples to the ground truth.
    pub pred_to_gt: f64,
    /// Mean squared distance from ground-truth points to the output.
    pub gt_to_pred: f64,
    pub cd: f64,
    /// Shapes where a pruning stage removed every face.
    pub failures: usize,
}

/// Reconstructs `shapes` for each `tau` (second stage at `tau / 2`) and
/// averages both directional distances. A failing stage falls back to its
/// last valid mesh.
pub fn tau_sweep(
    model: &Model,
    shapes: &[&ShapeRecord],
    taus: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<TauSweepRow>> {
    if shapes.is_empty() {
        return Err(Error::Empty("shape set"));
    }
    let template = model.template()?;
    taus.iter()
        .map(|&tau| {
            let mut m = model.clone();
            m.stages[0].tau = tau;
            m.stages[1].tau = tau / 2.0;
            m.stages[0].validate()?;
            let per_shape: Vec<(f64, f64, bool)> = shapes
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let (mesh, failed) = match reconstruct(
                        ModelInput::Cloud(&s.encoder),
                        &m,
                        &template,
                        derive_seed(seed, i as u64),
                    ) {
                        Ok(r) => (r.output, false),
                        Err(Error::StageFailure { last_valid, .. }) => (*last_valid, true),
                        Err(e) => return Err(e),
                    };
                    let pts = sample_surface(&mesh, samples, derive_seed(seed, 1 << 32 | i as u64))?.points;
                    let (a, b) = directional_distances(&pts, &s.gt.points)?;
                    Ok((a, b, failed))
                })
                .collect::<Result<_>>()?;
            let n = per_shape.len() as f64;
            let pred_to_gt = per_shape.iter().map(|r| r.0).sum::<f64>() / n;
            let gt_to_pred = per_shape.iter().map(|r| r.1).sum::<f64>() / n;
            Ok(TauSweepRow {
                tau,
                pred_to_gt,
                gt_to_pred,
                cd: pred_to_gt + gt_to_pred,
                failures: per_shape.iter().filter(|r| r.2).count(),
            })
        })
        .collect()
}

pub fn write_tau_csv(rows: &[TauSweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
