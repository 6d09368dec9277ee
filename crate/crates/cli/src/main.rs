use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use normalforge::config::Config;
use normalforge::denoise::point_update;
use normalforge::filtering::multi_scale_filter;
use normalforge::io;
use normalforge::metrics::evaluate;
use normalforge::mfps::{mfps_estimate, pca_estimate, simple_mfps_estimate};
use normalforge::refine::{make_samples, refine_field, train, RefineModel};
use normalforge::synth::{synth_generate, ShapeKind};
use normalforge::{NormalField, PointCloud, SpatialIndex};

/// Point-cloud normal estimation, refinement and evaluation.
#[derive(Parser)]
#[command(name = "normalforge", version)]
struct Cli {
    /// JSON configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as JSON.
    Config,
    /// Sample a synthetic shape; writes points with ground-truth normals.
    Synth(SynthArgs),
    /// Estimate initial normals.
    Estimate(EstimateArgs),
    /// Write the multi-scale filtered normals (3 columns per branch).
    Filter(PairArgs),
    /// Train a refinement model on clouds with ground-truth normals.
    Train(TrainArgs),
    /// Refine an initial normal field with a trained model.
    Refine(RefineArgs),
    /// Move points under the guidance of their normals.
    Denoise(PairArgs),
    /// Compare normals with ground truth; prints a JSON report.
    Eval(EvalArgs),
    /// Write an ASCII PLY colored by angular error.
    ExportHeatmap(HeatmapArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// plane, sphere, cube, cylinder or dihedral:<degrees>.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    /// Noise deviation as a fraction of the bounding-box diagonal.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Pca,
    Mfps,
    SimpleMfps,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "mfps")]
    method: Method,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    normals: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Clouds with ground-truth normals (6 columns); repeatable.
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    /// Initial normals, one file per input; estimated with `--method` if absent.
    #[arg(long)]
    normals: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "mfps")]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch losses as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Initial normals from any estimator.
    #[arg(long)]
    normals: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    normals: PathBuf,
    /// Ground-truth normals (3 columns) or a points file with normals.
    #[arg(long)]
    gt: PathBuf,
    /// PGP thresholds in degrees, e.g. `5,10`.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Writes the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-point errors in degrees.
    #[arg(long)]
    errors: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    normals: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_shape(s: &str) -> Result<ShapeKind> {
    Ok(match s {
        "plane" => ShapeKind::Plane,
        "sphere" => ShapeKind::Sphere,
        "cube" => ShapeKind::Cube,
        "cylinder" => ShapeKind::Cylinder,
        other => match other.strip_prefix("dihedral:") {
            Some(angle) => ShapeKind::Dihedral { angle_deg: angle.parse().with_context(|| format!("bad dihedral angle `{angle}`"))? },
            None => bail!("unknown shape `{other}`"),
        },
    })
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    io::read_cloud(path).with_context(|| format!("reading points from {}", path.display()))
}

fn read_field(path: &Path, expected: usize) -> Result<NormalField> {
    let field = NormalField(io::read_normals(path).with_context(|| format!("reading normals from {}", path.display()))?);
    if field.len() != expected {
        return Err(normalforge::Error::LengthMismatch { left: expected, right: field.len() }).with_context(|| format!("{} has the wrong number of rows", path.display()));
    }
    Ok(field)
}

fn estimate(cloud: &PointCloud, method: Method, config: &Config) -> Result<NormalField> {
    Ok(match method {
        Method::Pca => pca_estimate(cloud, &SpatialIndex::build(cloud.points()), config.pca_k)?,
        Method::Mfps => mfps_estimate(cloud, &config.mfps, config.seed)?,
        Method::SimpleMfps => simple_mfps_estimate(cloud, &config.mfps, config.seed)?,
    })
}

fn write_field(path: &Path, field: &NormalField) -> Result<()> {
    io::write_vectors(path, &field.0).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    info!("seed {}", config.seed);
    info!("config {}", serde_json::to_string(&config)?);
    match cli.command {
        Command::Config => println!("{}", config.to_json()),
        Command::Synth(a) => {
            let mut spec = config.synth.clone();
            spec.seed = config.seed;
            if let Some(s) = &a.shape {
                spec.kind = parse_shape(s)?;
            }
            if let Some(n) = a.samples {
                spec.samples = n;
            }
            if let Some(noise) = a.noise {
                spec.noise_frac = noise;
            }
            let cloud = synth_generate(&spec)?;
            io::write_cloud(&a.out, &cloud)?;
            info!("wrote {} points to {}", cloud.len(), a.out.display());
        }
        Command::Estimate(a) => {
            let cloud = read_cloud(&a.input)?;
            write_field(&a.out, &estimate(&cloud, a.method, &config)?)?;
        }
        Command::Filter(a) => {
            let cloud = read_cloud(&a.input)?;
            let initial = read_field(&a.normals, cloud.len())?;
            let sets = multi_scale_filter(&cloud, &SpatialIndex::build(cloud.points()), &initial, &config.filter)?;
            fs::write(&a.out, io::format_normal_sets(&sets))?;
        }
        Command::Train(a) => {
            if !a.normals.is_empty() && a.normals.len() != a.inputs.len() {
                bail!("got {} normals files for {} inputs", a.normals.len(), a.inputs.len());
            }
            let mut samples = Vec::new();
            for (k, path) in a.inputs.iter().enumerate() {
                let cloud = read_cloud(path)?;
                if cloud.gt_normals().is_none() {
                    bail!("{} has no ground-truth normals; training needs 6 columns", path.display());
                }
                let initial = match a.normals.get(k) {
                    Some(n) => read_field(n, cloud.len())?,
                    None => estimate(&cloud, a.method, &config)?,
                };
                samples.extend(make_samples(&cloud, &initial, &config.filter, &config.features, config.seed)?);
            }
            let (model, log) = train(&samples, &config.filter, &config.features, &config.train, config.seed)?;
            info!("loss {:.6} -> {:.6} over {} samples", log.history[0], log.history[log.history.len() - 1], samples.len());
            model.save(&a.out).with_context(|| format!("writing model {}", a.out.display()))?;
            if let Some(path) = &a.log {
                fs::write(path, serde_json::to_string_pretty(&log)?)?;
            }
        }
        Command::Refine(a) => {
            let cloud = read_cloud(&a.input)?;
            let initial = read_field(&a.normals, cloud.len())?;
            let model = RefineModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
            write_field(&a.out, &refine_field(&cloud, &initial, &model)?)?;
        }
        Command::Denoise(a) => {
            let cloud = read_cloud(&a.input)?;
            let normals = read_field(&a.normals, cloud.len())?;
            io::write_points(&a.out, &point_update(&cloud, &normals, &config.denoise)?)?;
        }
        Command::Eval(a) => {
            let pred = NormalField(io::read_normals(&a.normals).with_context(|| format!("reading {}", a.normals.display()))?);
            let gt = NormalField(io::read_normals(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?);
            let alphas = a.alphas.unwrap_or_else(|| config.alphas.clone());
            let mut report = evaluate(&pred, &gt, &alphas)?;
            if let Some(path) = &a.errors {
                io::write_scalars(path, report.per_point_errors_deg.as_deref().unwrap_or_default())?;
            }
            report.per_point_errors_deg = None;
            let json = serde_json::to_string_pretty(&report)?;
            match &a.out {
                Some(path) => fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
        }
        Command::ExportHeatmap(a) => {
            let cloud = read_cloud(&a.input)?;
            let pred = read_field(&a.normals, cloud.len())?;
            let gt = read_field(&a.gt, cloud.len())?;
            let errors = evaluate(&pred, &gt, &[])?.per_point_errors_deg.unwrap_or_default();
            fs::write(&a.out, io::format_heatmap_ply(cloud.points(), &pred.0, &errors)?)?;
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NORMALFORGE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("NORMALFORGE_THREADS=`{v}` is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
