//! Command-line front end: run experiments, evaluate checkpoints, emit
//! reconstruction/sample grids, and run diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use featalign::align::{stability_csv, stability_scan};
use featalign::config::{DatasetConfig, ExperimentConfig};
use featalign::error::{Error, Result};
use featalign::imgio::{emit_image_grid, pair_interleave};
use featalign::runner::{
    encoder_fd, load_dataset, load_trained, per_pixel_mse, reconstruct, run, untrained_model,
    TrainedModel,
};
use featalign::tensor::op_sweep;
use featalign::vfa::generate;

#[derive(Parser)]
#[command(name = "featalign", about = "Feature-alignment training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (mnist-desk | mnist-full) instead of --config.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset root for presets and relative dataset paths; FEATALIGN_DATA
    /// is the fallback.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the configuration, writing all artifacts to its output
    /// directory.
    Run(ConfigArgs),
    /// Recompute held-out metrics from a finished run's checkpoints.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint epoch (default: the final one).
        #[arg(long)]
        epoch: Option<usize>,
    },
    /// Write a (reconstruction, original) pair grid from a finished run.
    Reconstruct {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        epoch: Option<usize>,
        /// Number of held-out examples to reconstruct.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Grid file to write (.pgm/.ppm).
        #[arg(long = "grid", default_value = "recon_grid.pgm")]
        grid: PathBuf,
    },
    /// Sample the latent prior of a variational run and write a grid.
    Generate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        epoch: Option<usize>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Class to condition on, when a class head exists.
        #[arg(long)]
        class: Option<usize>,
        /// Logit scale for class conditioning.
        #[arg(long, default_value_t = 5.0)]
        scale: f64,
        #[arg(long = "grid", default_value = "samples.pgm")]
        grid: PathBuf,
    },
    /// Scan extraction convergence over a weight grid and write a CSV.
    StabilityScan {
        #[arg(long, default_value_t = -2.0)]
        w_min: f64,
        #[arg(long, default_value_t = 2.0)]
        w_max: f64,
        #[arg(long, default_value_t = 81)]
        points: usize,
        /// Iterations per weight.
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every differentiable op against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Make relative dataset paths absolute against --data or FEATALIGN_DATA.
fn data_root(explicit: &Option<PathBuf>) -> Option<PathBuf> {
    explicit
        .clone()
        .or_else(|| std::env::var_os("FEATALIGN_DATA").map(PathBuf::from))
}

fn rebase(path: &Path, root: &Option<PathBuf>) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = root {
            return root.join(path);
        }
    }
    path.to_path_buf()
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let root = data_root(&args.data);
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => ExperimentConfig::from_path(path)?,
        (None, Some(name)) => {
            let root = root.clone().ok_or_else(|| {
                Error::config("data", "presets need --data or FEATALIGN_DATA")
            })?;
            let out = args
                .out
                .clone()
                .ok_or_else(|| Error::config("out", "presets need --out"))?;
            ExperimentConfig::preset(name, &root, &out)?
        }
        _ => {
            return Err(Error::config(
                "config",
                "pass exactly one of --config or --preset",
            ))
        }
    };
    if let DatasetConfig::Mnist { images, labels, .. } = &mut cfg.dataset {
        *images = rebase(images, &root);
        *labels = rebase(labels, &root);
    }
    if let DatasetConfig::ImageFolder { path } = &mut cfg.dataset {
        *path = rebase(path, &root);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let summary = run(&cfg)?;
    for row in &summary.epochs {
        println!("epoch {}: recon_loss {}", row.epoch, row.recon_loss);
    }
    if let Some(eval) = summary.evals.last() {
        println!(
            "held-out mse {} encoder-FD {}",
            eval.heldout_mse,
            eval.encoder_fd.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into())
        );
    }
    println!("artifacts in {}", summary.out_dir.display());
    Ok(())
}

fn load_for(args: &ConfigArgs, epoch: Option<usize>) -> Result<(ExperimentConfig, TrainedModel, usize)> {
    let cfg = resolve_config(args)?;
    let epoch = epoch.unwrap_or(cfg.epochs);
    let model = load_trained(&cfg, epoch)?;
    Ok((cfg, model, epoch))
}

fn cmd_eval(args: &ConfigArgs, epoch: Option<usize>) -> Result<()> {
    let (cfg, model, epoch) = load_for(args, epoch)?;
    let (_, held) = load_dataset(&cfg)?;
    let x = held.batch(0, held.len())?;
    let recon = reconstruct(&model, &cfg, &x, 0x4556_4131 + ((epoch as u64) << 20))?;
    let mse = per_pixel_mse(&x, &recon)?;
    let reference = untrained_model(&cfg, held.labels.is_some())?;
    let fd = encoder_fd(&reference, &x, &recon);
    println!("epoch {}: held-out per-pixel mse {}", epoch, mse);
    println!(
        "encoder-FD {}",
        fd.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn cmd_reconstruct(args: &ConfigArgs, epoch: Option<usize>, count: usize, grid: &Path) -> Result<()> {
    let (cfg, model, epoch) = load_for(args, epoch)?;
    let (_, held) = load_dataset(&cfg)?;
    if held.cell_shape.len() < 2 {
        return Err(Error::InvalidArg(
            "grids need image-shaped examples ([H,W] or [C,H,W])".into(),
        ));
    }
    let n = count.min(held.len()).max(1);
    let x = held.batch(0, n)?;
    let recon = reconstruct(&model, &cfg, &x, 0x5243_0000 + ((epoch as u64) << 20))?;
    let pairs = pair_interleave(&recon, &x)?;
    emit_image_grid(&pairs, &held.cell_shape, n, 2, grid)?;
    println!("wrote {} reconstruction pairs to {}", n, grid.display());
    Ok(())
}

fn cmd_generate(
    args: &ConfigArgs,
    epoch: Option<usize>,
    count: usize,
    class: Option<usize>,
    scale: f64,
    grid: &Path,
) -> Result<()> {
    let (cfg, model, _) = load_for(args, epoch)?;
    let vmodel = match &model {
        TrainedModel::Vfa(m) | TrainedModel::VfaGan { model: m, .. } => m,
        _ => {
            return Err(Error::InvalidArg(
                "generate needs a variational run (mode vfa or vfa-gan)".into(),
            ))
        }
    };
    let (_, held) = load_dataset(&cfg)?;
    if held.cell_shape.len() < 2 {
        return Err(Error::InvalidArg(
            "grids need image-shaped examples ([H,W] or [C,H,W])".into(),
        ));
    }
    let samples = generate(
        vmodel,
        count,
        cfg.seed ^ 0x7361_6d70,
        class,
        scale,
        &cfg.inference_feature(),
    )?;
    let cols = 4.min(count.max(1));
    let rows = count.div_ceil(cols);
    emit_image_grid(&samples, &held.cell_shape, rows, cols, grid)?;
    println!("wrote {} samples to {}", count, grid.display());
    Ok(())
}

fn cmd_stability(w_min: f64, w_max: f64, points: usize, steps: usize, out: &Path) -> Result<()> {
    if points < 2 || !(w_max > w_min) {
        return Err(Error::InvalidArg(
            "stability scan needs points >= 2 and w_max > w_min".into(),
        ));
    }
    let grid: Vec<f64> = (0..points)
        .map(|i| w_min + (w_max - w_min) * i as f64 / (points - 1) as f64)
        .collect();
    let rows = stability_scan(&grid, steps);
    std::fs::write(out, stability_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_grad_check(instances: usize, seed: u64) -> Result<()> {
    let results = op_sweep(instances, 1e-5, seed)?;
    let mut failed = false;
    for (name, err) in &results {
        let ok = *err < 1e-5;
        failed |= !ok;
        println!("{:24} {:>12.3e}  {}", name, err, if ok { "ok" } else { "FAIL" });
    }
    if failed {
        return Err(Error::Other("gradient check failed".into()));
    }
    println!("{} ops verified over {} instances each", results.len(), instances);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval { common, epoch } => cmd_eval(common, *epoch),
        Command::Reconstruct { common, epoch, count, grid } => {
            cmd_reconstruct(common, *epoch, *count, grid)
        }
        Command::Generate { common, epoch, count, class, scale, grid } => {
            cmd_generate(common, *epoch, *count, *class, *scale, grid)
        }
        Command::StabilityScan { w_min, w_max, points, steps, out } => {
            cmd_stability(*w_min, *w_max, *points, *steps, out)
        }
        Command::GradCheck { instances, seed } => cmd_grad_check(*instances, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
