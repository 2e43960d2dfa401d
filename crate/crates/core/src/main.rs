use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jointalign::bench::warp_bench;
use jointalign::error::{Error, Result};
use jointalign::eval::evaluate;
use jointalign::graph::{build_graph, BuildConfig};
use jointalign::io::{self, GroundTruthFile, Manifest, RunConfig};
use jointalign::optim::{align_collection_logged, AdamConfig, TrainConfig};
use jointalign::render::render_colormaps;
use jointalign::sage::{Arch, NetworkConfig};
use jointalign::sl3::GaugeMode;
use jointalign::synth::{gen_collection, SynthSpec};

#[derive(Parser)]
#[command(name = "jointalign", version, about = "Joint homography alignment of image collections from sparse keypoint matches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic collection with known warps.
    Synth(SynthArgs),
    /// Align a collection described by a manifest.
    Align(AlignArgs),
    /// Score an alignment against ground-truth keypoints.
    Eval(EvalArgs),
    /// Write one colormap PPM per aligned image.
    Render(RenderArgs),
    /// Time sparse and interpolated warping.
    Bench(BenchArgs),
    /// Print the keypoint graph built from a manifest.
    GraphStats(GraphStatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output manifest path.
    #[arg(long)]
    manifest: PathBuf,
    /// Output ground-truth sidecar path.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 20)]
    n_images: usize,
    #[arg(long, default_value_t = 15)]
    n_kps: usize,
    #[arg(long, default_value_t = 0.3)]
    warp_magnitude: f64,
    #[arg(long, default_value_t = 0.005)]
    noise_std: f64,
    #[arg(long, default_value_t = 0.1)]
    outlier_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    flip_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pair_density: f64,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct BuildArgs {
    /// NMS window side in pixels.
    #[arg(long, default_value_t = 30.0)]
    nms_window: f64,
    /// Matches kept per image pair.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// DP-Means penalty in squared pixels (default: (0.05·diagonal)²).
    #[arg(long)]
    dp_penalty: Option<f64>,
    /// Drop the edges between keypoints of the same image.
    #[arg(long)]
    no_intra_edges: bool,
}

impl BuildArgs {
    fn config(&self) -> Result<BuildConfig> {
        if !(self.nms_window >= 0.0 && self.nms_window.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid NMS window {}", self.nms_window)));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top-k must be at least 1".into()));
        }
        if let Some(p) = self.dp_penalty {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidArgument(format!("invalid DP-Means penalty {p}")));
            }
        }
        Ok(BuildConfig {
            nms_window: self.nms_window,
            top_k: self.top_k,
            dp_penalty: self.dp_penalty,
            intra_edges: !self.no_intra_edges,
            ..Default::default()
        })
    }
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output alignment file.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss log (epoch, loss, flips changed).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also save the trained network weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    build: BuildArgs,
    #[arg(long, default_value_t = 600)]
    epochs: usize,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs between flip checks.
    #[arg(long, default_value_t = 100)]
    flip_every: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 5)]
    layers: usize,
    /// sage, mlp, linear or direct.
    #[arg(long, default_value_t = Arch::Sage)]
    arch: Arch,
    #[arg(long)]
    no_bias: bool,
    /// Geman–McClure residuals (default).
    #[arg(long, overrides_with = "l2")]
    robust: bool,
    /// Plain squared residuals.
    #[arg(long, overrides_with = "robust")]
    l2: bool,
    /// karcher, first or none.
    #[arg(long, default_value_t = GaugeMode::Karcher)]
    gauge: GaugeMode,
    /// Divide the loss by the number of residuals.
    #[arg(long)]
    normalize: bool,
    /// Sequential, reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    alignment: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Output metric report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for reproducible pipelines; evaluation is always sequential.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    alignment: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [16, 1024, 70_756])]
    points: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 25])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Also write the timings as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GraphStatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    build: BuildArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Align(a) => align(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Bench(a) => bench(a),
        Command::GraphStats(a) => graph_stats(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_images: a.n_images,
        n_canonical_kps: a.n_kps,
        warp_magnitude: a.warp_magnitude,
        noise_std: a.noise_std,
        outlier_rate: a.outlier_rate,
        flip_rate: a.flip_rate,
        pair_density: a.pair_density,
        width: a.width,
        height: a.height,
        seed: a.seed,
    };
    let c = gen_collection(&spec)?;
    io::save_manifest(
        &Manifest {
            images: c.images,
            matches: c.matches,
        },
        &a.manifest,
    )?;
    io::save_ground_truth(
        &GroundTruthFile {
            spec,
            truth: c.truth,
        },
        &a.gt,
    )
}

fn align(a: AlignArgs) -> Result<()> {
    let build = a.build.config()?;
    let train = TrainConfig {
        epochs: a.epochs,
        sigma: a.sigma,
        flip_every: a.flip_every,
        adam: AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
        seed: a.seed,
        network: NetworkConfig {
            arch: a.arch,
            hidden_dim: a.hidden_dim,
            layers: a.layers,
            bias: !a.no_bias,
        },
        robust: !a.l2,
        gauge: a.gauge,
        normalize: a.normalize,
        deterministic: a.deterministic,
    };
    train.validate()?;
    let manifest = io::load_manifest(&a.manifest)?;
    let graph = build_graph(&manifest.images, &manifest.matches, &build)?;

    let mut log = match &a.log {
        Some(p) => Some((
            std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
            p.clone(),
        )),
        None => None,
    };
    let mut log_error = None;
    let outcome = align_collection_logged(&graph, &train, &mut |e| {
        if let Some((w, p)) = log.as_mut() {
            if log_error.is_none() {
                if let Err(err) = writeln!(w, "{}\t{}\t{}", e.epoch, e.loss, e.flips_changed) {
                    log_error = Some(Error::io(p.as_path(), err));
                }
            }
        }
    });
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    if let Some(e) = log_error {
        return Err(e);
    }
    let result = outcome?;
    io::save_alignment(&result, Some(&RunConfig { train, build }), &a.out)?;
    if let Some(path) = &a.checkpoint {
        match &result.weights {
            Some(w) => io::save_weights(w, path)?,
            None => log::warn!("--arch direct has no network weights to checkpoint"),
        }
    }
    println!(
        "aligned {} images: loss {} -> {} over {} epochs; {} flipped; gauge {}",
        result.images.len(),
        result.convergence.initial_loss,
        result.final_loss,
        result.convergence.epochs_run,
        result.flips.count(),
        result.gauge
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (result, _) = io::load_alignment(&a.alignment)?;
    let gt = io::load_ground_truth(&a.gt)?;
    let report = evaluate(&result, &gt.truth.annotations, a.alpha)?;
    if let Some(out) = &a.out {
        io::save_metrics(&report, out)?;
    }
    println!(
        "PCK@{}: {:.4} ({} / {} transfers, {} failed); mean transfer error {:.6}",
        report.alpha,
        report.pck,
        report.correct,
        report.evaluated,
        report.failed,
        report.mean_transfer_error
    );
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let (result, _) = io::load_alignment(&a.alignment)?;
    let paths = render_colormaps(&result, &a.out_dir)?;
    println!("wrote {} colormaps to {}", paths.len(), a.out_dir.display());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut rows = Vec::new();
    println!("{:>8} {:>4} {:>12} {:>14}", "points", "dim", "interpolate", "s/epoch");
    for &n in &a.points {
        for &d in &a.dims {
            for interp in [false, true] {
                let t = warp_bench(n, d, a.repeats, interp)?;
                println!("{:>8} {:>4} {:>12} {:>14.6e}", n, d, interp, t.seconds_per_epoch);
                rows.push(t);
            }
        }
    }
    if let Some(out) = &a.out {
        write_text(out, &(serde_json::to_string_pretty(&rows).expect("timings serialize") + "\n"))?;
    }
    Ok(())
}

fn graph_stats(a: GraphStatsArgs) -> Result<()> {
    let manifest = io::load_manifest(&a.manifest)?;
    let graph = build_graph(&manifest.images, &manifest.matches, &a.build.config()?)?;
    println!(
        "{} images, {} nodes, {} intra edges, {} inter edges, {} matches",
        graph.n_images(),
        graph.n_nodes(),
        graph.intra_edges().len(),
        graph.inter_edges().len(),
        graph.matches().len()
    );
    for (k, img) in graph.images().iter().enumerate() {
        println!("image {}: {} nodes", img.id, graph.image_nodes(k).len());
    }
    let orphans = graph.orphan_images();
    if !orphans.is_empty() {
        println!("images without inter-image edges: {orphans:?}");
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
