use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topomesh::autodiff::Tape;
use topomesh::data::{make_dataset, Dataset, DatasetOptions, ShapeKind, ShapeRecord, ShapeSpec};
use topomesh::eval::cd_metric;
use topomesh::losses::MeshVar;
use topomesh::mesh::{make_icosphere, sample_barycentric, sample_surface, PointCloud};
use topomesh::networks::{error_var, Architecture};
use topomesh::pipeline::{
    evaluate_objective, finetune, ground_truth_errors, reconstruct, train_stage, write_loss_csv, Model, ModelInput,
    StageId, TrainConfig, Variant,
};
use topomesh::Error;

fn tiny_arch() -> Architecture {
    Architecture {
        feature_dim: 8,
        encoder_hidden: vec![16],
        deform_hidden: vec![24, 16],
        error_hidden: vec![24, 16],
        refine_hidden: vec![16],
    }
}

fn tiny_config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig {
        epochs_per_stage: epochs,
        finetune_epochs: 1,
        batch_size: 2,
        cd_samples_pred: 300,
        cd_samples_gt: 300,
        error_samples: 200,
        template_level: 2,
        architecture: tiny_arch(),
        seed: 5,
        ..Default::default()
    };
    c.lr.drop_epoch = epochs;
    for s in &mut c.stages {
        s.samples_per_face = 3;
    }
    c
}

fn tiny_dataset(count: usize, seed: u64) -> Dataset {
    let options = DatasetOptions {
        gt_points: 800,
        encoder_points: 200,
        resolution: 2,
        ..Default::default()
    };
    make_dataset(count, &options, seed).unwrap()
}

fn refs(d: &Dataset) -> Vec<&ShapeRecord> {
    d.shapes.iter().collect()
}

#[test]
fn zero_heads_give_bit_exact_identity() {
    let mut model = Model::from_config(&tiny_config(1)).unwrap();
    model.zero_heads();
    let template = make_icosphere(3).unwrap();
    let d = tiny_dataset(1, 1);
    let r = reconstruct(ModelInput::Cloud(&d.shapes[0].encoder), &model, &template, 9).unwrap();
    let bits = |m: &topomesh::Mesh| {
        m.vertices()
            .iter()
            .flat_map(|p| p.map(f64::to_bits))
            .collect::<Vec<_>>()
    };
    for (_, m) in r.stages().into_iter().chain([("output", &r.output)]) {
        assert_eq!(bits(m), bits(&template));
        assert_eq!(m.faces(), template.faces());
    }
    assert!(r.errors1.unwrap().values().iter().all(|&e| e == 0.0));
}

#[test]
fn constant_error_above_tau_fails_stage_one() {
    let mut model = Model::from_config(&tiny_config(1)).unwrap();
    model.zero_heads();
    model.error1.layers.last_mut().unwrap().bias.set(0, 0, 0.2);
    let template = make_icosphere(2).unwrap();
    let f = topomesh::ShapeFeature::new(vec![0.5; 8]).unwrap();
    match reconstruct(ModelInput::Feature(&f), &model, &template, 0) {
        Err(Error::StageFailure { stage, last_valid }) => {
            assert_eq!(stage, 1);
            assert_eq!(last_valid.vertices(), template.vertices());
        }
        other => panic!("expected a stage failure, got {other:?}"),
    }
}

#[test]
fn face_counts_never_grow_across_stages() {
    let d = tiny_dataset(3, 2);
    let template = make_icosphere(2).unwrap();
    for seed in 0..6 {
        let mut config = tiny_config(1);
        config.seed = seed;
        let mut model = Model::from_config(&config).unwrap();
        // spread the untrained error estimates around the thresholds
        model.error1.layers.last_mut().unwrap().bias.set(0, 0, 0.1);
        model.error2.layers.last_mut().unwrap().bias.set(0, 0, 0.05);
        for s in &d.shapes {
            let Ok(r) = reconstruct(ModelInput::Cloud(&s.encoder), &model, &template, seed) else {
                continue;
            };
            let counts = [
                r.m1.face_count(),
                r.m1_pruned.face_count(),
                r.m2.face_count(),
                r.m2_pruned.face_count(),
                r.output.face_count(),
            ];
            assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        }
    }
}

#[test]
fn deform_only_variant_keeps_topology() {
    let mut config = tiny_config(1);
    config.variant = Variant::DeformOnly;
    let model = Model::from_config(&config).unwrap();
    let template = make_icosphere(2).unwrap();
    let d = tiny_dataset(1, 3);
    let r = reconstruct(ModelInput::Cloud(&d.shapes[0].encoder), &model, &template, 0).unwrap();
    assert_eq!(r.output.faces(), template.faces());
    assert!(r.errors1.is_none());
}

#[test]
fn ground_truth_error_examples() {
    let gt = PointCloud::from_points(vec![[0.0; 3]]);
    let s = PointCloud::from_points(vec![[3.0, 4.0, 0.0]]);
    assert_eq!(ground_truth_errors(&s, &gt).unwrap(), vec![5.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts: Vec<[f64; 3]> = (0..300).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let gt = PointCloud::from_points(pts.clone());
    let subset = PointCloud::from_points(pts[..50].to_vec());
    assert!(ground_truth_errors(&subset, &gt).unwrap().iter().all(|&e| e == 0.0));

    let q: Vec<[f64; 3]> = (0..100).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let got = ground_truth_errors(&PointCloud::from_points(q.clone()), &gt).unwrap();
    for (x, e) in q.iter().zip(got) {
        let brute = pts
            .iter()
            .map(|p| ((p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2) + (p[2] - x[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!((brute - e).abs() < 1e-15);
    }
    assert!(ground_truth_errors(&PointCloud::default(), &gt).is_err());
}

#[test]
fn stages_must_follow_the_order() {
    let d = tiny_dataset(2, 1);
    let config = tiny_config(0);
    let mut model = Model::from_config(&config).unwrap();
    match train_stage(StageId::Error1, &mut model, &refs(&d), &config) {
        Err(Error::StageOrder { requested, stage }) => {
            assert_eq!(requested, "error1");
            assert_eq!(stage, "deform1");
        }
        other => panic!("expected an ordering error, got {other:?}"),
    }
    assert!(finetune(&mut model, &refs(&d), &config).is_err());
    let mut ablation = model.clone();
    ablation.variant = Variant::DeformOnly;
    assert!(matches!(
        train_stage(StageId::Refine, &mut ablation, &refs(&d), &config),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let d = tiny_dataset(2, 1);
    let config = tiny_config(0);
    let mut model = Model::from_config(&config).unwrap();
    let before = model.checksums();
    let logs = train_stage(StageId::Deform1, &mut model, &refs(&d), &config).unwrap();
    assert!(logs.is_empty());
    assert_eq!(model.checksums(), before);
    assert_eq!(model.trained, vec![StageId::Deform1]);
}

#[test]
fn training_a_stage_touches_only_its_networks() {
    let d = tiny_dataset(4, 2);
    let config = tiny_config(2);
    let mut model = Model::from_config(&config).unwrap();
    let order = StageId::ALL;
    // encoder, deform1, error1, deform2, error2, refine
    let owned: [&[usize]; 5] = [&[0, 1], &[2], &[3], &[4], &[5]];
    for (stage, own) in order.into_iter().zip(owned) {
        let before = model.checksums();
        train_stage(stage, &mut model, &refs(&d), &config).unwrap();
        let after = model.checksums();
        for k in 0..6 {
            if own.contains(&k) {
                if stage != StageId::Refine {
                    assert_ne!(before[k], after[k], "{stage} did not update network {k}");
                }
            } else {
                assert_eq!(before[k], after[k], "{stage} changed frozen network {k}");
            }
        }
    }
}

fn train_all(config: &TrainConfig, d: &Dataset) -> Model {
    let mut model = Model::from_config(config).unwrap();
    for s in StageId::ALL {
        train_stage(s, &mut model, &refs(d), config).unwrap();
    }
    model
}

#[test]
fn training_is_deterministic() {
    let d = tiny_dataset(4, 3);
    let config = tiny_config(2);
    let mut a = train_all(&config, &d);
    let mut b = train_all(&config, &d);
    finetune(&mut a, &refs(&d), &config).unwrap();
    finetune(&mut b, &refs(&d), &config).unwrap();
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
    let mut other = config.clone();
    other.seed += 1;
    let c = train_all(&other, &d);
    assert_ne!(a.checksums(), c.checksums());
}

#[test]
fn checkpoint_round_trip() {
    let d = tiny_dataset(2, 4);
    let mut config = tiny_config(1);
    config.stages[1].weights = Some(topomesh::LossWeights {
        lambda2: 0.25,
        ..Default::default()
    });
    let model = train_all(&config, &d);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.architecture, tiny_arch());
}

#[test]
fn finetune_zero_epochs_and_descent() {
    let d = tiny_dataset(4, 6);
    let mut config = tiny_config(3);
    let model = train_all(&config, &d);

    config.finetune_epochs = 0;
    let mut same = model.clone();
    finetune(&mut same, &refs(&d), &config).unwrap();
    assert_eq!(same.checksums(), model.checksums());

    config.finetune_epochs = 1;
    let before = evaluate_objective(&model, &refs(&d), &config, 17).unwrap();
    let mut tuned = model.clone();
    let logs = finetune(&mut tuned, &refs(&d), &config).unwrap();
    assert_eq!(logs.len(), 1);
    let after = evaluate_objective(&tuned, &refs(&d), &config, 17).unwrap();
    assert!(
        after.total <= 1.05 * before.total,
        "{} -> {}",
        before.total,
        after.total
    );
}

fn ellipsoid_record() -> ShapeRecord {
    let spec = ShapeSpec {
        kind: ShapeKind::Ellipsoid { radii: [1.0, 0.6, 0.4] },
        seed: 0,
    };
    let mesh = topomesh::data::generate_shape(&spec, 3).unwrap();
    let gt = sample_surface(&mesh, 2000, 1).unwrap();
    let gt = PointCloud {
        source_face: None,
        ..gt
    };
    ShapeRecord {
        id: "ellipsoid".into(),
        spec,
        split: topomesh::data::Split::Train,
        encoder: gt.select(&(0..500).collect::<Vec<_>>()),
        gt,
        mesh,
    }
}

#[test]
fn deform_stage_improves_on_the_template() {
    let shape = ellipsoid_record();
    let mut config = tiny_config(200);
    config.lr.drop_epoch = 150;
    let mut model = Model::from_config(&config).unwrap();
    let template = model.template().unwrap();
    let before = cd_metric(&template, &shape.gt, 2000, 3).unwrap();
    let logs = train_stage(StageId::Deform1, &mut model, &[&shape], &config).unwrap();
    assert!(logs.last().unwrap().losses.cd < logs[0].losses.cd);
    let after = cd_metric(&reconstruct_m1(&model, &shape), &shape.gt, 2000, 3).unwrap();
    assert!(after < before, "{before} -> {after}");
}

fn reconstruct_m1(model: &Model, shape: &ShapeRecord) -> topomesh::Mesh {
    let template = model.template().unwrap();
    let mut m = model.clone();
    m.variant = Variant::DeformOnly;
    m.deform2.zero_output_layer();
    reconstruct(ModelInput::Cloud(&shape.encoder), &m, &template, 0)
        .unwrap()
        .m1
}

#[test]
fn error_stage_beats_the_best_constant() {
    let mut shape = ellipsoid_record();
    // sphere template against an ellipsoid target: errors vary smoothly over the sphere
    shape.id = "target".into();
    let mut config = tiny_config(800);
    config.lr.initial = 3e-3;
    config.lr.drop_epoch = 600;
    config.batch_size = 1;
    config.error_samples = 400;
    let mut model = Model::from_config(&config).unwrap();
    model.zero_heads();
    model.trained = vec![StageId::Deform1];
    train_stage(StageId::Error1, &mut model, &[&shape], &config).unwrap();

    let m1 = reconstruct_m1(&model, &shape);
    let feature = model.encode(&shape.encoder).unwrap();
    let held_out = sample_barycentric(&m1, 500, 12345).unwrap();
    let tape = Tape::new();
    let pts = MeshVar::constant(&tape, &m1).sample_points(&held_out).unwrap();
    let pred = error_var(
        &pts,
        &tape.constant(feature.to_tensor()),
        &model.error1.bind(&tape, false),
    )
    .unwrap();
    let truth = ground_truth_errors(&PointCloud::from_points(pts.value().to_points()), &shape.gt).unwrap();
    let mae = |p: &dyn Fn(usize) -> f64| {
        truth.iter().enumerate().map(|(i, t)| (p(i) - t).abs()).sum::<f64>() / truth.len() as f64
    };
    let predicted: Vec<f64> = pred.value().data().to_vec();
    let learned = mae(&|i| predicted[i]);
    let mut sorted = truth.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let baseline = mae(&|_| median);
    assert!(learned < 0.5 * baseline, "learned {learned}, constant {baseline}");
}

#[test]
fn config_json_round_trip_and_validation() {
    let c = tiny_config(10);
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), c);
    let partial = TrainConfig::from_json(r#"{"epochs_per_stage": 80, "seed": 3}"#).unwrap();
    assert_eq!(partial.epochs_per_stage, 80);
    assert_eq!(partial.batch_size, 8);
    assert_eq!(partial.stages[0].tau, 0.1);
    assert_eq!(partial.stages[1].tau, 0.05);
    assert!(
        TrainConfig::from_json(r#"{"epochs_per_stage": 10}"#).is_err(),
        "drop epoch beyond range"
    );
    assert!(TrainConfig::from_json(
        r#"{"stages": [{"tau": 0.0, "samples_per_face": 4}, {"tau": 0.05, "samples_per_face": 4}]}"#
    )
    .is_err());
    assert!(TrainConfig::from_json(r#"{"batch_sise": 4}"#).is_err());
}

#[test]
fn loss_csv_layout() {
    let d = tiny_dataset(2, 8);
    let config = tiny_config(2);
    let mut model = Model::from_config(&config).unwrap();
    let logs = train_stage(StageId::Deform1, &mut model, &refs(&d), &config).unwrap();
    let mut buf = Vec::new();
    write_loss_csv(&logs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,stage,cd,error,bound,normal,smooth,edge,total"
    );
    assert!(lines.next().unwrap().starts_with("0,deform1,"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn documented_defaults_parse_to_the_default_config() {
    let json = r#"{
  "epochs_per_stage": 100,
  "finetune_epochs": 50,
  "finetune_lr": 0.0001,
  "batch_size": 8,
  "lr": {"initial": 0.001, "drop_to": 0.0001, "drop_epoch": 60},
  "seed": 0,
  "cd_samples_pred": 2500,
  "cd_samples_gt": 2500,
  "error_samples": 2000,
  "weights": {"lambda1": 1.0, "lambda2": 0.5, "lambda3": 0.01, "lambda4": 2e-7, "lambda5": 0.1},
  "stages": [
    {"tau": 0.1, "samples_per_face": 10, "weights": null},
    {"tau": 0.05, "samples_per_face": 10, "weights": null}
  ],
  "template_level": 4,
  "architecture": {
    "feature_dim": 1024,
    "encoder_hidden": [64, 128],
    "deform_hidden": [1024, 512, 256, 128],
    "error_hidden": [1024, 512, 256, 128],
    "refine_hidden": [1024, 512, 256, 128]
  },
  "variant": "full"
}"#;
    assert_eq!(TrainConfig::from_json(json).unwrap(), TrainConfig::default());
}
