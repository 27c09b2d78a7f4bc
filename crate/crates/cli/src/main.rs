use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lkadepth_core::config::RunConfig;
use lkadepth_core::dataset::Sequence;
use lkadepth_core::eval::{evaluate_predictions, evaluate_sequence, infer};
use lkadepth_core::image_io::{read_ppm, write_ppm};
use lkadepth_core::metrics::compare_to_published;
use lkadepth_core::model::Model;
use lkadepth_core::suite::{self, Scope};
use lkadepth_core::synth::{make_sequence, SceneSpec};
use lkadepth_core::train::{fit_resolution, train};
use lkadepth_core::{checkpoint, lkdt};

#[derive(Parser)]
#[command(name = "lkadepth", version, about = "Self-supervised monocular depth with a large-kernel-attention decoder")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set use_lka=false`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train depth and pose nets on a sequence directory
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against ground-truth depth
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory; omit with --untrained or --oracle
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialised network
        #[arg(long, conflicts_with_all = ["checkpoint", "oracle"])]
        untrained: bool,
        /// Use ground truth as the prediction, bypassing the network
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// Write the metrics CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict depth for one PPM image
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Depth tensor output (default: <image>.depth.lkdt)
        #[arg(long)]
        depth_out: Option<PathBuf>,
        /// Inverse-depth visualisation (default: <image>.depth.ppm)
        #[arg(long)]
        vis_out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// ops, lka, upsampler, geometry, full; all when omitted
        scopes: Vec<Scope>,
    },
    /// Render a synthetic sequence with analytic depth and poses
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        frames: usize,
    },
    /// Print parameter and MAC counts for the configured network
    Params,
}

fn load_config(g: &GlobalOpts, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&g.sets)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_params(cfg: &RunConfig) -> Result<()> {
    let model = Model::new(cfg)?;
    let r = model.depth.param_report();
    println!(
        "depth net params: {} (encoder {}, decoder {}, fusion {}, upsampler {})",
        r.total(),
        r.encoder,
        r.decoder,
        r.fusion,
        r.upsampler
    );
    println!("pose net params: {}", model.pose.param_count());
    println!(
        "depth net MACs at {}x{}: {}",
        cfg.width,
        cfg.height,
        model.depth.macs(cfg.height, cfg.width)
    );
    Ok(())
}

fn cmd_train(g: &GlobalOpts, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(g, None)?;
    let seq = Sequence::load(data)?;
    print_params(&cfg)?;
    let summary = train(&cfg, &seq, out)?;
    let last = summary.history.last().context("no optimizer steps were run")?;
    println!("steps: {}", summary.steps);
    println!("final loss: {:.6} (photometric {:.6})", last.total, last.photometric);
    println!("loss csv: {}", summary.loss_csv.display());
    if let Some(ck) = summary.checkpoints.last() {
        println!("checkpoint: {}", ck.display());
    }
    Ok(())
}

fn cmd_eval(
    g: &GlobalOpts,
    data: &Path,
    ck_dir: Option<&Path>,
    untrained: bool,
    oracle: bool,
    out: Option<&Path>,
) -> Result<()> {
    let ck = ck_dir.map(checkpoint::load).transpose()?;
    let cfg = load_config(g, ck.as_ref().map(|c| c.config.clone()))?;
    let seq = fit_resolution(&Sequence::load(data)?, &cfg)?;
    let cap = (cfg.eval_min_depth, cfg.eval_max_depth);
    let report = if oracle {
        let gts = seq.depths.clone().context("dataset has no ground-truth depth")?;
        let names: Vec<String> = (0..gts.len()).map(|k| format!("frame_{k:04}")).collect();
        evaluate_predictions(&names, &gts, &gts, cfg.median_scaling, cap)?
    } else {
        let model = match &ck {
            Some(ck) => Model::from_checkpoint(ck, &cfg)?,
            None if untrained => Model::new(&cfg)?,
            None => bail!("eval needs --checkpoint, --untrained or --oracle"),
        };
        evaluate_sequence(&model, &seq, cfg.median_scaling, cap)?
    };
    let csv = report.to_csv();
    match out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    println!("{}", compare_to_published(&report.aggregate));
    Ok(())
}

fn cmd_infer(g: &GlobalOpts, ck_dir: &Path, image: &Path, depth_out: Option<PathBuf>, vis_out: Option<PathBuf>) -> Result<()> {
    let ck = checkpoint::load(ck_dir)?;
    let cfg = load_config(g, Some(ck.config.clone()))?;
    let model = Model::from_checkpoint(&ck, &cfg)?;
    let img = read_ppm(image)?;
    let res = infer(&model, &img)?;
    let depth_out = depth_out.unwrap_or_else(|| image.with_extension("depth.lkdt"));
    let vis_out = vis_out.unwrap_or_else(|| image.with_extension("depth.ppm"));
    lkdt::write_file(&depth_out, &res.depth)?;
    write_ppm(&vis_out, &res.visual)?;
    println!("depth: {}", depth_out.display());
    println!("visualisation: {}", vis_out.display());
    Ok(())
}

fn cmd_gradcheck(scopes: &[Scope]) -> Result<bool> {
    let scopes = if scopes.is_empty() { &Scope::ALL[..] } else { scopes };
    let mut ok = true;
    println!("{:<10} {:<44} {:>12} {:>10}  result", "scope", "check", "max rel err", "threshold");
    for &scope in scopes {
        for r in suite::run(scope)? {
            let pass = r.passed();
            ok &= pass;
            println!(
                "{:<10} {:<44} {:>12.3e} {:>10.0e}  {}",
                scope.to_string(),
                r.name,
                r.error,
                r.threshold,
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(ok)
}

fn cmd_synth(g: &GlobalOpts, out: &Path, frames: usize) -> Result<()> {
    let cfg = load_config(g, None)?;
    let spec = SceneSpec::default_scene(cfg.width, cfg.height, frames, cfg.seed)?;
    make_sequence(&spec, out)?;
    println!("wrote {frames} frames ({}x{}) to {}", cfg.width, cfg.height, out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LKADEPTH_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LKADEPTH_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    let g = &cli.global;
    match cli.command {
        Command::Train { data, out } => cmd_train(g, &data, &out)?,
        Command::Eval {
            data,
            checkpoint,
            untrained,
            oracle,
            out,
        } => cmd_eval(g, &data, checkpoint.as_deref(), untrained, oracle, out.as_deref())?,
        Command::Infer {
            checkpoint,
            image,
            depth_out,
            vis_out,
        } => cmd_infer(g, &checkpoint, &image, depth_out, vis_out)?,
        Command::Gradcheck { scopes } => return cmd_gradcheck(&scopes),
        Command::Synth { out, frames } => cmd_synth(g, &out, frames)?,
        Command::Params => print_params(&load_config(g, None)?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
