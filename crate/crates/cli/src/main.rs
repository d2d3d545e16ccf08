use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fcnad::eval::Level;
use fcnad::net::{load_weights, save_weights, NetworkSpec, ReferenceDepth};
use fcnad::pipeline::io::{write_json, PIXEL_THRESHOLDS};
use fcnad::pipeline::{
    bench, detect_stream, evaluate, load_videos, make_fixture, train_pipeline, DetectionWriter, FixtureSpec,
    FrameSource, ModelBundle, RunConfig,
};
use fcnad::preproc::{parse_size, RawFrameReader};
use fcnad::rfgeom::geometry_table;

#[derive(Parser)]
#[command(name = "anomaly", version, about = "Fully-convolutional video anomaly detection")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the cascade on normal videos and write a model bundle.
    Train(TrainArgs),
    /// Score a video and write per-frame masks, heat maps and scores.
    Detect(DetectArgs),
    /// Compute ROC, AUC and EER from detections and ground truth.
    Eval(EvalArgs),
    /// Time the detection stages on a video.
    Bench(BenchArgs),
    /// Print receptive-field size, jump and start per layer.
    Rfgeom(RfgeomArgs),
    /// Generate the synthetic walking-squares dataset.
    Fixture(FixtureArgs),
    /// Write seeded reference weights in FCNW format.
    Weights(WeightsArgs),
}

#[derive(Args)]
struct Input {
    /// Directory of PGM frames, or a raw byte file with --raw.
    #[arg(long)]
    data: PathBuf,
    /// Read --data as concatenated 8-bit frames of this size.
    #[arg(long, value_name = "WxH")]
    raw: Option<String>,
}

impl Input {
    fn open(&self) -> Result<FrameSource> {
        let raw = self.raw.as_deref().map(parse_size).transpose()?;
        Ok(FrameSource::open(&self.data, raw)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frozen network weights (FCNW).
    #[arg(long)]
    weights: PathBuf,
    /// Normal training frames: a frame directory or a directory of video directories.
    /// Overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Treat --data as one raw video of this size.
    #[arg(long, value_name = "WxH")]
    raw: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the training summary here as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    out_dir: PathBuf,
    /// Abort on the first undecodable frame instead of skipping it.
    #[arg(long)]
    strict: bool,
    /// Skip writing per-frame mask and heat-map images.
    #[arg(long)]
    no_images: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Frame,
    Pixel,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of `detect`.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Ground-truth masks (nonzero = anomalous), one per frame in sorted order.
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long, value_enum, default_value = "frame")]
    level: LevelArg,
    /// JSON report; the curve is also written next to it as CSV.
    #[arg(long)]
    out: PathBuf,
    /// Upper bound on thresholds in the pixel-level sweep.
    #[arg(long, default_value_t = PIXEL_THRESHOLDS)]
    max_thresholds: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    input: Input,
    /// Stop after this many frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Write the report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RfgeomArgs {
    /// Network weights (FCNW). Without it the seeded reference network is used.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// TOML overrides for the fixture spec.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthArg {
    C2,
    C3,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "c2")]
    depth: DepthArg,
}

fn set_workers(n: usize) -> Result<()> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn train(args: TrainArgs, workers: Option<usize>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.data {
        cfg.data = Some(d);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    set_workers(workers.unwrap_or(cfg.workers))?;
    let data = cfg.data.clone().context("no training data: pass --data or set `data` in the config")?;
    let net = load_weights(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    let videos = match &args.raw {
        Some(size) => {
            let (w, h) = parse_size(size)?;
            let f = fs::File::open(&data).with_context(|| format!("opening {}", data.display()))?;
            let frames = RawFrameReader::new(std::io::BufReader::new(f), h, w, &data).collect::<fcnad::Result<Vec<_>>>()?;
            vec![frames]
        }
        None => load_videos(&data)?,
    };
    log::info!(
        "training on {} video(s), {} frames",
        videos.len(),
        videos.iter().map(Vec::len).sum::<usize>()
    );
    let (bundle, report) = train_pipeline(&cfg, &net, videos)?;
    bundle.save(&args.out)?;
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    println!(
        "wrote {}: alpha {:.4} beta {:.4} phi {:.4}, {} vectors of length {}",
        args.out.display(),
        report.alpha,
        report.beta,
        report.phi,
        report.vectors,
        report.feature_dim
    );
    Ok(())
}

fn detect(args: DetectArgs, workers: Option<usize>) -> Result<()> {
    set_workers(workers.unwrap_or(0))?;
    let bundle = ModelBundle::load(&args.bundle).with_context(|| format!("loading {}", args.bundle.display()))?;
    let mut writer = DetectionWriter::new(&args.out_dir, !args.no_images)?;
    let summary = detect_stream(&bundle, args.input.open()?, args.strict, |r| writer.write(&r))?;
    writer.finish(&bundle, &summary)?;
    println!(
        "{} frames ({} warmup, {} skipped), max score {:.3}; results in {}",
        summary.frames,
        summary.warmup,
        summary.skipped.len(),
        summary.max_score,
        args.out_dir.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let level = match args.level {
        LevelArg::Frame => Level::Frame,
        LevelArg::Pixel => Level::Pixel,
    };
    let report = evaluate(&args.pred_dir, &args.gt_dir, level, args.max_thresholds)?;
    write_json(&args.out, &report)?;
    let csv = args.out.with_extension("csv");
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_bench(args: BenchArgs, workers: Option<usize>) -> Result<()> {
    set_workers(workers.unwrap_or(0))?;
    let bundle = ModelBundle::load(&args.bundle).with_context(|| format!("loading {}", args.bundle.display()))?;
    let source = args.input.open()?;
    let report = match args.frames {
        Some(n) => bench(&bundle, source.take(n))?,
        None => bench(&bundle, source)?,
    };
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn rfgeom(args: RfgeomArgs) -> Result<()> {
    let net = match &args.weights {
        Some(p) => load_weights(p).with_context(|| format!("loading {}", p.display()))?,
        None => NetworkSpec::reference(ReferenceDepth::C3, 0),
    };
    let table = geometry_table(&net);
    if args.json {
        let rows: Vec<serde_json::Value> = table
            .iter()
            .map(|(name, g)| serde_json::json!({ "layer": name, "rows": g.rows, "cols": g.cols }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("{:<8}{:>10}{:>8}{:>12}", "layer", "size", "jump", "start");
    for (name, g) in &table {
        let pair = |a: String, b: String| if a == b { a } else { format!("{a}x{b}") };
        println!(
            "{:<8}{:>10}{:>8}{:>12}",
            name,
            format!("{}x{}", g.rows.size, g.cols.size),
            pair(g.rows.jump.to_string(), g.cols.jump.to_string()),
            pair(g.rows.start.to_string(), g.cols.start.to_string())
        );
    }
    Ok(())
}

fn fixture(args: FixtureArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => FixtureSpec::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => FixtureSpec::default(),
    };
    let fx = make_fixture(args.seed, &spec)?;
    fx.write(&args.out)?;
    println!(
        "wrote {} train, {} held-out and {} test videos to {}",
        fx.train.len(),
        fx.heldout.len(),
        fx.test.len(),
        args.out.display()
    );
    Ok(())
}

fn weights(args: WeightsArgs) -> Result<()> {
    let depth = match args.depth {
        DepthArg::C2 => ReferenceDepth::C2,
        DepthArg::C3 => ReferenceDepth::C3,
    };
    if args.out.extension().is_some_and(|e| e == "fab") {
        bail!("refusing to write weights over a bundle path: {}", args.out.display());
    }
    save_weights(&NetworkSpec::reference(depth, args.seed), &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a, cli.workers),
        Command::Detect(a) => detect(a, cli.workers),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => run_bench(a, cli.workers),
        Command::Rfgeom(a) => rfgeom(a),
        Command::Fixture(a) => fixture(a),
        Command::Weights(a) => weights(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err
                .chain()
                .find_map(|e| e.downcast_ref::<fcnad::Error>())
                .and_then(|e| e.format_error())
                .map(|f| f.code());
            match code {
                Some(c) => eprintln!("error [{c}]: {err:#}"),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
