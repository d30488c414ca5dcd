use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use topomesh::data::{load_dataset, make_dataset, save_dataset, DatasetOptions, Split};
use topomesh::eval::{evaluate_model, EvalOptions};
use topomesh::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use topomesh::mesh::io::{load_points_bin, save_obj, save_ply};
use topomesh::mesh::sample_surface;
use topomesh::pipeline::{reconstruct, tau_sweep, train, write_loss_csv, write_tau_csv, ModelInput};
use topomesh::{Error, Model, PointCloud, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "topomesh",
    version,
    about = "Topology-adaptive mesh reconstruction from point clouds"
)]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice; `train` falls back to the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train every stage and fine-tune.
    Train(TrainArgs),
    /// Reconstruct a mesh from a point cloud file.
    Reconstruct(ReconstructArgs),
    /// Evaluate a model on one split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Sweep the pruning threshold.
    TauSweep(TauSweepArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 10_000)]
    gt_points: usize,
    #[arg(long, default_value_t = 2_500)]
    encoder_points: usize,
    #[arg(long, default_value_t = 4)]
    resolution: u32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON training configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch losses; defaults to the checkpoint path with `.losses.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    /// Point cloud in the binary cloud format.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write every intermediate mesh next to the output.
    #[arg(long)]
    dump_stages: bool,
    /// Oriented samples of the output as ascii PLY.
    #[arg(long)]
    ply: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    ply_points: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    report: PathBuf,
    /// Rigidly align each output to its ground truth first.
    #[arg(long)]
    icp: bool,
    #[arg(long, default_value_t = 10_000)]
    points: usize,
    #[arg(long, default_value_t = topomesh::eval::EMD_MAX_POINTS)]
    emd_points: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    /// JSON report of every case.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TauSweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.4")]
    taus: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Problems with the invocation itself, reported before any work starts.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} `{}` is not a readable file", path.display())).into());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_dir() {
        return Err(UsageError(format!("{what} `{}` is not a directory", path.display())).into());
    }
    Ok(())
}

fn require_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(UsageError(format!("output directory `{}` does not exist", p.display())).into())
        }
        _ => Ok(()),
    }
}

fn validate(cli: &Cli) -> anyhow::Result<()> {
    if cli.threads == Some(0) {
        return Err(UsageError("--threads must be at least 1".into()).into());
    }
    match &cli.command {
        Command::GenData(a) => {
            if a.count == 0 || a.gt_points == 0 || a.encoder_points == 0 || a.resolution == 0 {
                return Err(UsageError("counts and resolution must be positive".into()).into());
            }
            if a.encoder_points > a.gt_points {
                return Err(UsageError("--encoder-points cannot exceed --gt-points".into()).into());
            }
            require_parent(&a.out)
        }
        Command::Train(a) => {
            require_dir(&a.data, "dataset")?;
            if let Some(c) = &a.config {
                require_file(c, "config")?;
            }
            require_parent(&a.out)?;
            a.loss_csv.as_deref().map_or(Ok(()), require_parent)
        }
        Command::Reconstruct(a) => {
            require_file(&a.model, "model")?;
            require_file(&a.input, "input cloud")?;
            require_parent(&a.out)?;
            a.ply.as_deref().map_or(Ok(()), require_parent)
        }
        Command::Eval(a) => {
            require_file(&a.model, "model")?;
            require_dir(&a.data, "dataset")?;
            if a.points == 0 || a.emd_points == 0 {
                return Err(UsageError("--points and --emd-points must be positive".into()).into());
            }
            require_parent(&a.report)
        }
        Command::Gradcheck(a) => {
            if a.instances == 0 {
                return Err(UsageError("--instances must be positive".into()).into());
            }
            a.report.as_deref().map_or(Ok(()), require_parent)
        }
        Command::TauSweep(a) => {
            require_file(&a.model, "model")?;
            require_dir(&a.data, "dataset")?;
            if a.taus.is_empty() || a.taus.iter().any(|t| t.is_nan() || *t <= 0.0) {
                return Err(UsageError("--taus must be positive numbers".into()).into());
            }
            require_parent(&a.out)
        }
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn gen_data(a: &GenDataArgs, seed: u64) -> anyhow::Result<()> {
    let options = DatasetOptions {
        gt_points: a.gt_points,
        encoder_points: a.encoder_points,
        resolution: a.resolution,
        ..Default::default()
    };
    let dataset = make_dataset(a.count, &options, seed)?;
    save_dataset(&dataset, &a.out)?;
    info!("wrote {} shapes to {}", dataset.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let dataset = load_dataset(&a.data)?;
    let shapes = dataset.split(Split::Train);
    if shapes.is_empty() {
        bail!("dataset has no training shapes");
    }
    info!("training on {} shapes", shapes.len());
    let mut model = Model::from_config(&config)?;
    let logs = train(&mut model, &shapes, &config)?;
    model.save(&a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("losses.csv"));
    write_loss_csv(&logs, create(&csv)?)?;
    info!("wrote {} and {}", a.out.display(), csv.display());
    Ok(())
}

fn stage_path(out: &Path, stage: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    let ext = out.extension().map_or("obj".into(), |e| e.to_string_lossy());
    out.with_file_name(format!("{stem}.{stage}.{ext}"))
}

fn run_reconstruct(a: &ReconstructArgs, seed: u64) -> anyhow::Result<()> {
    let model = Model::load(&a.model)?;
    let cloud = PointCloud::from_points(load_points_bin(&a.input)?);
    let template = model.template()?;
    let rec = match reconstruct(ModelInput::Cloud(&cloud), &model, &template, seed) {
        Err(Error::StageFailure { stage, last_valid }) => {
            if a.dump_stages {
                save_obj(&last_valid, stage_path(&a.out, "last_valid"))?;
            }
            bail!("pruning stage {stage} removed every face; lower-error input or a larger threshold is needed");
        }
        r => r?,
    };
    if a.dump_stages {
        for (name, mesh) in rec.stages() {
            save_obj(mesh, stage_path(&a.out, name))?;
        }
    }
    let (output, _) = rec.output.without_degenerate_faces(1e-12)?;
    save_obj(&output, &a.out)?;
    if let Some(ply) = &a.ply {
        save_ply(&sample_surface(&output, a.ply_points, seed)?, ply)?;
    }
    info!(
        "output: {} vertices, {} faces, {} refined-plane fallbacks",
        output.vertex_count(),
        output.face_count(),
        rec.refine.degenerate_plane.len()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs, seed: u64) -> anyhow::Result<()> {
    let model = Model::load(&a.model)?;
    let dataset = load_dataset(&a.data)?;
    let shapes = dataset.split(a.split);
    if shapes.is_empty() {
        bail!("split `{:?}` is empty", a.split);
    }
    let options = EvalOptions {
        points: a.points,
        emd_points: a.emd_points,
        icp: a.icp,
        seed,
    };
    let report = evaluate_model(&model, &shapes, &options)?;
    report.write_csv(create(&a.report)?)?;
    for line in report.table().lines() {
        info!("{line}");
    }
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs, seed: u64) -> anyhow::Result<()> {
    let report = run_gradient_suite(a.instances, seed)?;
    for c in &report.cases {
        info!(
            "{:<24} {} instances, {} coordinates, max rel error {:.3e}{}",
            c.name,
            c.instances,
            c.checked,
            c.max_rel_error,
            if c.passes() { "" } else { "  FAILED" }
        );
    }
    if let Some(p) = &a.report {
        serde_json::to_writer_pretty(create(p)?, &report)?;
    }
    if !report.passes() {
        bail!("gradient suite exceeded relative error {GRAD_TOLERANCE:e}");
    }
    Ok(())
}

fn run_tau_sweep(a: &TauSweepArgs, seed: u64) -> anyhow::Result<()> {
    let model = Model::load(&a.model)?;
    let dataset = load_dataset(&a.data)?;
    let shapes = dataset.split(a.split);
    let rows = tau_sweep(&model, &shapes, &a.taus, a.points, seed)?;
    for r in &rows {
        if r.failures > 0 {
            warn!("tau {}: {} shapes lost every face in a stage", r.tau, r.failures);
        }
    }
    write_tau_csv(&rows, create(&a.out)?)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    validate(&cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Reconstruct(a) => run_reconstruct(a, seed),
        Command::Eval(a) => run_eval(a, seed),
        Command::Gradcheck(a) => run_gradcheck(a, seed),
        Command::TauSweep(a) => run_tau_sweep(a, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
