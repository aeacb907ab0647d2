//! svdx: sparse voxel diffusion toolkit CLI.
//!
//! Subcommands: synth (seeded datasets), train, enhance, eval (metric CSV),
//! schedule-report (timestep redundancy probe). Exit codes: 0 success,
//! 2 usage error, 3 data/format error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use svdx_core::checkpoint::Checkpoint;
use svdx_core::error::{Error, Result};
use svdx_core::model::CondSession;
use svdx_core::pipeline::{enhance_volume, schedule_report, EnhanceOptions};
use svdx_core::schedule::NoiseSchedule;
use svdx_core::train::{run_training, TrainConfig};
use svdx_core::volume::{read_vvol, write_vvol, Window};

#[derive(Parser)]
#[command(
    name = "svdx",
    version,
    about = "Sparse-timestep voxel-space diffusion for 3D volume enhancement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset of (clean, degraded) volume pairs.
    Synth(SynthArgs),
    /// Train a model from a JSON config file.
    Train(TrainArgs),
    /// Enhance a degraded volume with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Evaluate enhanced volumes against references; writes a metric CSV.
    Eval(EvalArgs),
    /// Report prediction similarity across timesteps and echo sparse subsets.
    ScheduleReport(ScheduleReportArgs),
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    let one = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad dimension '{p}': {e}"))
    };
    match parts.as_slice() {
        [a] => {
            let v = one(a)?;
            Ok((v, v, v))
        }
        [a, b, c] => Ok((one(a)?, one(b)?, one(c)?)),
        _ => Err("expected D or D,H,W".into()),
    }
}

#[derive(Args)]
struct SynthArgs {
    /// denoise | superres
    #[arg(long)]
    task: String,
    /// Number of volume pairs.
    #[arg(long)]
    n: usize,
    /// Volume dims as D or D,H,W.
    #[arg(long, value_parser = parse_dims, default_value = "32")]
    dims: (usize, usize, usize),
    /// Noise level for the denoise task.
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// Downsampling factor for the superres task.
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config; fields match TrainConfig exactly.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input degraded volume (VVOL, values in [-1, 1]).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the inference patch size (defaults to the training patch).
    #[arg(long, value_parser = parse_dims)]
    patch: Option<(usize, usize, usize)>,
    /// Override the inference stride (defaults to the training stride).
    #[arg(long, value_parser = parse_dims)]
    stride: Option<(usize, usize, usize)>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of reference volumes.
    #[arg(long)]
    ref_dir: PathBuf,
    /// Directory of predicted volumes (matched by file name).
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Args)]
struct ScheduleReportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dense schedule length to probe.
    #[arg(long = "T")]
    t: usize,
    /// Comma-separated subset sizes, e.g. 3,5,10.
    #[arg(long = "K", value_delimiter = ',', required = true)]
    k: Vec<usize>,
    /// Probe volume; its leading patch drives the report.
    #[arg(long)]
    probe: PathBuf,
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    println!(
        "config: {}",
        serde_json::json!({
            "command": "synth", "task": a.task, "n": a.n, "dims": a.dims,
            "sigma": a.sigma, "factor": a.factor, "seed": a.seed, "out": a.out,
        })
    );
    let manifest = svdx_core::synth::generate_dataset(
        &a.task, a.n, a.dims, a.sigma, a.factor, a.seed, &a.out,
    )?;
    println!(
        "wrote {} pairs and manifest.json to {}",
        manifest.pairs.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::read(&a.config)?;
    println!(
        "config: {}",
        serde_json::to_string(&cfg).map_err(|e| Error::Format(e.to_string()))?
    );
    println!("seed: {}", cfg.seed);
    let rows = run_training(&cfg)?;
    if let Some(last) = rows.last() {
        println!(
            "finished step {} in {:.1} s, final loss {:.6}{}",
            last.step,
            last.wall_clock_s,
            last.loss,
            last.eval_psnr
                .map(|p| format!(", val psnr {p:.2} dB"))
                .unwrap_or_default()
        );
    }
    println!("checkpoint: {}", cfg.checkpoint_out);
    println!("log: {}", cfg.log_csv);
    Ok(())
}

fn run_enhance(a: &EnhanceArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let cfg = &ckpt.config;
    let patch = a.patch.unwrap_or(cfg.patch);
    let stride = a.stride.unwrap_or(cfg.stride);
    println!(
        "config: {}",
        serde_json::json!({
            "command": "enhance", "ckpt": a.ckpt, "in": a.input, "out": a.out,
            "seed": a.seed, "patch": patch, "stride": stride,
            "K": cfg.k_sparse, "T": cfg.t_total,
            "schedule_mode": format!("{:?}", cfg.schedule_mode).to_lowercase(),
            "stm": cfg.stm,
        })
    );
    let model = ckpt.build_model()?;
    let sched = cfg.schedule()?;
    let sampling = cfg.sampling_schedule()?;
    let input = read_vvol(&a.input)?;
    let opts = EnhanceOptions {
        patch,
        stride,
        window: Window::Hann,
        seed: a.seed,
    };
    let out = enhance_volume(
        &model,
        &sched,
        &sampling,
        cfg.prediction_target,
        &input,
        &opts,
    )?;
    write_vvol(&out, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    println!(
        "config: {}",
        serde_json::json!({
            "command": "eval", "ref_dir": a.ref_dir, "pred_dir": a.pred_dir, "out_csv": a.out_csv,
        })
    );
    let mut names: Vec<String> = std::fs::read_dir(&a.ref_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".vvol") && a.pred_dir.join(n).exists())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArg(
            "no matching .vvol pairs between the two directories".into(),
        ));
    }
    let mut reports = Vec::with_capacity(names.len());
    for name in &names {
        let reference = read_vvol(a.ref_dir.join(name))?;
        let pred = read_vvol(a.pred_dir.join(name))?;
        reports.push(svdx_core::metrics::evaluate_pair(name, &reference, &pred)?);
    }
    svdx_core::metrics::write_csv(&reports, &a.out_csv)?;
    println!(
        "wrote {} rows (+mean) to {}",
        reports.len(),
        a.out_csv.display()
    );
    Ok(())
}

fn run_schedule_report(a: &ScheduleReportArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    println!(
        "config: {}",
        serde_json::json!({
            "command": "schedule-report", "ckpt": a.ckpt, "T": a.t, "K": a.k, "probe": a.probe,
            "seed": ckpt.config.seed,
        })
    );
    let model = ckpt.build_model()?;
    let (bmin, bmax) = (ckpt.config.beta_min, ckpt.config.beta_max);
    let sched = NoiseSchedule::build(ckpt.config.schedule_form, a.t, bmin, bmax)?;
    let probe_vol = read_vvol(&a.probe)?;
    let patch = ckpt.config.patch;
    let (d, h, w) = probe_vol.dims();
    if patch.0 > d || patch.1 > h || patch.2 > w {
        return Err(Error::InvalidArg(format!(
            "probe volume {:?} smaller than the model patch {:?}",
            probe_vol.dims(),
            patch
        )));
    }
    let (_, patches) = svdx_core::volume::extract_patches(&probe_vol, patch, patch)?;
    let y = svdx_core::pipeline::patch_to_tensor(&patches[0]);
    let session = CondSession::with_target(&model, &y, ckpt.config.prediction_target, &sched)?;
    let report = schedule_report(&session, &y, &sched, &a.k, ckpt.config.seed)?;
    for k in &report.per_k {
        let idx = k
            .indices
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        println!(
            "K={}: S = {{{idx}}}, mean consecutive cosine {:.6}",
            k.k, k.mean_consecutive_cos
        );
    }
    println!(
        "dense consecutive cosine: mean {:.6} over T-1 = {} pairs",
        report.mean_dense_cos(),
        report.dense_consecutive.len()
    );
    print!("{}", report.to_csv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Enhance(a) => run_enhance(a),
        Command::Eval(a) => run_eval(a),
        Command::ScheduleReport(a) => run_schedule_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
