//! `rcbev`: generate synthetic scenes, run the pipeline, evaluate detection
//! files, reproduce the published aggregate tables and benchmark pooling.
//!
//! Exit codes: 0 on success, 1 when an input or result fails validation,
//! 2 when a file cannot be read or written.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rcbev::io;
use rcbev::metrics::{self, DetectionFile};
use rcbev::pipeline::{run_pipeline, Modality, PipelineConfig, RunOptions};
use rcbev::scene::{generate_scene, read_scene, write_scene, SceneSpec};
use rcbev::tables::check_tables;
use rcbev::voxelpool::{bench_pooling, BenchRow, BevGridConfig, PoolMethod};
use rcbev::{exec, Error};

#[derive(Parser, Debug)]
#[command(name = "rcbev", version, about = "Radar-camera BEV perception pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic scene bundle.
    Gen(GenArgs),
    /// Run the pipeline on a scene bundle.
    Run(RunArgs),
    /// Score a predictions file against ground truth.
    Eval(EvalArgs),
    /// Recompute the published aggregate cells from their row inputs.
    CheckTables,
    /// Time every pooling implementation on synthetic points, as CSV.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory for the bundle.
    #[arg(long)]
    out: PathBuf,
    /// Scene spec JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scene bundle directory.
    #[arg(long)]
    scene: PathBuf,
    /// Directory for `predictions.json` and `report.json`.
    #[arg(long)]
    out: PathBuf,
    /// Pipeline config JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the parameter seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pooling: Option<PoolMethod>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    modality: Option<Modality>,
    /// Single-threaded, one pooling worker, bit-reproducible.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Where to save the summary JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated point counts.
    #[arg(long, value_delimiter = ',', default_value = "10000,100000,1000000")]
    points: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 128)]
    nx: usize,
    #[arg(long, default_value_t = 128)]
    ny: usize,
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> rcbev::Result<ExitCode> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::CheckTables => {
            let report = check_tables();
            print!("{}", report.render_text());
            if report.all_pass() {
                println!("all {} derivable cells within tolerance", report.derivable().count());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{} cells out of tolerance", report.failures().len());
                Ok(ExitCode::from(1))
            }
        }
        Command::Bench(a) => {
            if a.sequential {
                exec::sequential(|| bench(a))
            } else {
                bench(a)
            }
        }
    }
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> rcbev::Result<T> {
    match path {
        Some(p) => io::read_json(p),
        None => Ok(T::default()),
    }
}

fn gen(a: GenArgs) -> rcbev::Result<ExitCode> {
    let mut spec: SceneSpec = load_or_default(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec)?;
    write_scene(&scene, &a.out)?;
    println!(
        "{}: {} objects, {} lidar points, {} radar points -> {}",
        scene.manifest.token,
        scene.manifest.objects.len(),
        scene.lidar.len(),
        scene.radar.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run(a: RunArgs) -> rcbev::Result<ExitCode> {
    let mut cfg: PipelineConfig = load_or_default(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.params_seed = seed;
    }
    let scene = read_scene(&a.scene)?;
    let opts = RunOptions {
        pooling: a.pooling,
        workers: a.workers,
        modality: a.modality,
        sequential: a.sequential,
    };
    let out = run_pipeline(&scene, &cfg, opts)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    io::write_json(&a.out.join("predictions.json"), &out.predictions)?;
    io::write_json(&a.out.join("report.json"), &out.report)?;
    let r = &out.report;
    println!(
        "{} [{} | {} x{}] detections {} | depth BCE {:.6} over {} px | radar matches {}",
        r.token,
        r.modality.name(),
        r.pooling.name(),
        r.workers,
        r.detections,
        r.losses.depth_bce,
        r.losses.depth_supervised_pixels,
        r.radar.as_ref().map_or(0, |s| s.matches.len()),
    );
    print!("{}", r.summary.render_text());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> rcbev::Result<ExitCode> {
    let preds: DetectionFile = io::read_json(&a.pred)?;
    let gts: DetectionFile = io::read_json(&a.gt)?;
    let summary = metrics::evaluate(&preds, &gts)?;
    print!("{}", summary.render_text());
    if let Some(out) = a.out {
        io::write_json(&out, &summary)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(a: BenchArgs) -> rcbev::Result<ExitCode> {
    let cfg = BevGridConfig {
        x_range: (-51.2, 51.2),
        y_range: (-51.2, 51.2),
        nx: a.nx,
        ny: a.ny,
    };
    cfg.validate()?;
    let mut csv = format!("{}\n", BenchRow::CSV_HEADER);
    for &m in &a.points {
        for row in bench_pooling(m, a.channels, &cfg, a.workers, a.reps.max(1), a.seed)? {
            csv.push_str(&row.csv());
            csv.push('\n');
        }
    }
    print!("{csv}");
    if let Some(out) = a.out {
        std::fs::write(&out, csv).map_err(|e| Error::Io { path: out, source: e })?;
    }
    Ok(ExitCode::SUCCESS)
}
