use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use hquic::checkpoint;
use hquic::codec::{decode, encode, CompressOptions};
use hquic::config::Config;
use hquic::evaluation::{
    bd_rate, channel_stats_dir, evaluate_model, list_checkpoints, load_dataset, psnr, read_rd_csv, write_image_csv,
    write_json, write_rd_csv, Metric,
};
use hquic::files::write_atomic;
use hquic::image::{load_image, save_image};
use hquic::plot;
use hquic::tone::LAMBDA_GRID;
use hquic::training::{rd_sweep, train_model, Dataset, RunPaths};
use hquic::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_INCOMPATIBLE: u8 = 3;
const EXIT_DATA: u8 = 4;

/// Underwater learned image codec: training, coding and evaluation.
#[derive(Parser)]
#[command(name = "hquic", version)]
struct Cli {
    /// TOML config file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.lambda=0.025`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, or one per λ with --sweep.
    Train(TrainArgs),
    /// Encode images into .hquc bitstreams.
    Compress(CompressArgs),
    /// Decode .hquc bitstreams into images.
    Decompress(DecompressArgs),
    /// Rate–distortion evaluation through real bitstreams.
    Eval(EvalArgs),
    /// Per-channel intensity statistics of one or more datasets.
    Stats(StatsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training images (png, jpg, bmp).
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints, metrics logs and the resolved config.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Rate–distortion trade-off λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight β of the tone-adjustment loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Seed for initialization, crops and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Images per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Square crop size in pixels.
    #[arg(long)]
    crop: Option<usize>,
    /// Drop ALTC (no illumination/transmission side info).
    #[arg(long)]
    no_altc: bool,
    /// Drop the FBWT blocks from both transforms.
    #[arg(long)]
    no_fbwt: bool,
    /// Train one model per λ (the standard five-point grid unless --lambdas).
    #[arg(long, conflicts_with_all = ["lambda", "resume"])]
    sweep: bool,
    /// Comma-separated λ values for --sweep.
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    lambdas: Option<Vec<f64>>,
    /// Continue from a checkpoint up to the configured total step count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// File stem for the checkpoint and metrics log.
    #[arg(long, default_value = "model")]
    name: String,
}

#[derive(Args)]
struct CompressArgs {
    /// Trained checkpoint (.hqck).
    #[arg(long)]
    ckpt: PathBuf,
    /// Images to encode.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory; defaults to each input's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Skip ALTC for this call even if the model has it.
    #[arg(long)]
    no_altc: bool,
}

#[derive(Args)]
struct DecompressArgs {
    /// Checkpoint the bitstreams were produced with.
    #[arg(long)]
    ckpt: PathBuf,
    /// Bitstreams (.hquc) to decode.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory; defaults to each input's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Output image extension.
    #[arg(long, default_value = "png")]
    format: String,
    /// Original image (single input only) to report PSNR against.
    #[arg(long)]
    original: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate. Repeatable.
    #[arg(long, conflicts_with = "ckpt_dir")]
    ckpt: Vec<PathBuf>,
    /// Evaluate every .hqck in this directory.
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    /// Directory of test images.
    #[arg(long)]
    data: PathBuf,
    /// Directory for CSV, JSON and SVG reports.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Anchor RD curve (CSV with bpp,psnr[,ms_ssim]) for BD-rate.
    #[arg(long)]
    anchor: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct StatsArgs {
    /// Image directory. Repeatable; each becomes one dataset.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Display names, in the order of --data.
    #[arg(long)]
    label: Vec<String>,
    /// Directory for stats.json and channels.svg.
    #[arg(long, default_value = "stats")]
    out: PathBuf,
}

/// Command-line misuse detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Incompatible(_) => EXIT_INCOMPATIBLE,
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let base = || Config::layered(cli.config.as_deref(), &cli.sets);
    match cli.cmd {
        Command::Train(a) => cmd_train(base()?, a),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
    }
}

fn cmd_train(mut cfg: Config, a: TrainArgs) -> anyhow::Result<()> {
    if let Some(v) = a.lambda {
        cfg.loss.lambda = v;
    }
    if let Some(v) = a.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.crop {
        cfg.train.crop = v;
    }
    if a.no_altc {
        cfg.altc.enabled = false;
    }
    if a.no_fbwt {
        cfg.fbwt.enabled = false;
    }
    cfg.validate()?;
    if !a.data.is_dir() {
        return Err(Error::NotFound(a.data.clone()).into());
    }
    let data = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    data.check(&cfg)?;
    if a.sweep && a.lambdas.as_ref().is_some_and(|l| l.len() < 2) {
        return Err(usage("--lambdas needs at least two values"));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_atomic(&a.out.join("config.toml"), cfg.to_toml_string().as_bytes())?;

    let reports = if a.sweep {
        let lambdas = a.lambdas.unwrap_or_else(|| LAMBDA_GRID.to_vec());
        if lambdas.len() < 2 {
            return Err(usage("--lambdas needs at least two values"));
        }
        rd_sweep(&data, &lambdas, &cfg, &a.out)?
    } else {
        let paths = RunPaths::in_dir(&a.out, &a.name);
        vec![train_model(&data, &cfg, &paths, a.resume.as_deref())?]
    };
    for r in &reports {
        let last = r.history.last();
        println!(
            "{}  step {}  {}",
            r.paths.checkpoint.display(),
            r.final_step,
            last.map(|c| format!(
                "rate {:.4} mse255 {:.2} lta {:.4} total {:.4}",
                c.rate, c.mse255, c.lta, c.total
            ))
            .unwrap_or_default()
        );
    }
    Ok(())
}

fn output_path(input: &Path, out_dir: Option<&Path>, ext: &str) -> PathBuf {
    let name = input.with_extension(ext);
    match out_dir {
        Some(d) => d.join(name.file_name().unwrap_or_default()),
        None => name,
    }
}

fn cmd_compress(a: CompressArgs) -> anyhow::Result<()> {
    let model = checkpoint::load(&a.ckpt)?.model;
    if let Some(d) = &a.out_dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let opts = CompressOptions { altc: !a.no_altc };
    for input in &a.inputs {
        let img = load_image(input)?;
        let enc = encode(&model, &img, opts)?;
        let bytes = enc.to_bytes();
        let out = output_path(input, a.out_dir.as_deref(), "hquc");
        write_atomic(&out, &bytes)?;
        println!(
            "{}  {} bytes  {:.4} bpp  side {} bytes",
            out.display(),
            bytes.len(),
            8.0 * bytes.len() as f64 / img.num_pixels() as f64,
            enc.bitstream.side_info.len()
        );
    }
    Ok(())
}

fn cmd_decompress(a: DecompressArgs) -> anyhow::Result<()> {
    if a.original.is_some() && a.inputs.len() != 1 {
        return Err(usage("--original needs exactly one input"));
    }
    let model = checkpoint::load(&a.ckpt)?.model;
    if let Some(d) = &a.out_dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    for input in &a.inputs {
        let bytes = std::fs::read(input).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(input.clone()),
            _ => Error::Io {
                path: input.clone(),
                source: e,
            },
        })?;
        let decoded = decode(&model, &bytes).with_context(|| format!("decoding {}", input.display()))?;
        let out = output_path(input, a.out_dir.as_deref(), &a.format);
        save_image(&decoded.image, &out)?;
        let bpp = 8.0 * bytes.len() as f64 / decoded.image.num_pixels() as f64;
        match &a.original {
            Some(orig) => {
                let reference = load_image(orig)?;
                let db = psnr(&reference, &decoded.image)?;
                println!("{}  {:.4} bpp  {db:.3} dB", out.display(), bpp);
            }
            None => println!("{}  {:.4} bpp", out.display(), bpp),
        }
    }
    Ok(())
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        v.into()
    } else if v.is_nan() {
        serde_json::Value::Null
    } else {
        "inf".into()
    }
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpts = match &a.ckpt_dir {
        Some(d) => list_checkpoints(d)?,
        None => a.ckpt.clone(),
    };
    if ckpts.is_empty() {
        return Err(usage("no checkpoints given (use --ckpt or --ckpt-dir)"));
    }
    let anchor = match &a.anchor {
        Some(p) => Some(read_rd_csv(p).map_err(|e| match e {
            Error::Format { .. } => usage(format!("malformed anchor CSV: {e}")),
            other => other.into(),
        })?),
        None => None,
    };
    let images = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut models = Vec::new();
    let mut curve = Vec::new();
    for path in &ckpts {
        let model = checkpoint::load(path)
            .with_context(|| format!("loading {}", path.display()))?
            .model;
        let report = evaluate_model(&model, &images, a.jobs)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        write_image_csv(&report, &a.out.join(format!("{stem}_images.csv")))?;
        println!(
            "{}  {:.4} bpp  {:.3} dB  MS-SSIM {:.5}",
            path.display(),
            report.mean.bpp,
            report.mean.psnr,
            report.mean.ms_ssim
        );
        curve.push(report.mean);
        models.push(serde_json::json!({
            "checkpoint": path.display().to_string(),
            "report": report,
        }));
    }
    curve.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    write_rd_csv(&curve, &a.out.join("rd.csv"))?;

    let mut series = vec![("hquic".to_string(), curve.clone())];
    let mut summary = serde_json::json!({
        "crate_version": env!("CARGO_PKG_VERSION"),
        "data": a.data.display().to_string(),
        "models": models,
        "rd_curve": curve,
    });
    if let Some(anchor) = anchor {
        for (metric, key) in [(Metric::Psnr, "bd_rate_psnr"), (Metric::MsSsim, "bd_rate_ms_ssim")] {
            match bd_rate(&anchor, &curve, metric) {
                Ok(v) => {
                    println!("{key}: {v:+.2}%");
                    summary[key] = finite_or_null(v);
                }
                Err(e) => {
                    eprintln!("{key}: not computed: {e}");
                    summary[key] = serde_json::Value::Null;
                    summary[format!("{key}_error")] = e.to_string().into();
                }
            }
        }
        series.push(("anchor".to_string(), anchor));
    }
    write_json(&summary, &a.out.join("summary.json"))?;
    for (metric, file) in [(Metric::Psnr, "rd_psnr.svg"), (Metric::MsSsim, "rd_ms_ssim.svg")] {
        write_atomic(&a.out.join(file), plot::rd_curves(&series, metric).as_bytes())?;
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> anyhow::Result<()> {
    if !a.label.is_empty() && a.label.len() != a.data.len() {
        return Err(usage("--label must be given once per --data or not at all"));
    }
    let mut sets = Vec::new();
    for (i, dir) in a.data.iter().enumerate() {
        let label = a.label.get(i).cloned().unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string())
        });
        let stats = channel_stats_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
        let [r, g, b] = &stats.channels;
        println!(
            "{label}: mean R {:.4} G {:.4} B {:.4}  ({} images)",
            r.mean, g.mean, b.mean, stats.images
        );
        sets.push((label, stats));
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report: Vec<_> = sets
        .iter()
        .map(|(label, s)| serde_json::json!({ "label": label, "stats": s }))
        .collect();
    write_json(&report, &a.out.join("stats.json"))?;
    write_atomic(
        &a.out.join("channels.svg"),
        plot::channel_distributions(&sets).as_bytes(),
    )?;
    Ok(())
}
