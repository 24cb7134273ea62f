use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metatrack::simworld::{export_video_set, import_video_set, VideoSet};
use metatrack_cli::checkpoint::{Checkpoint, CheckpointKind};
use metatrack_cli::commands::*;
use metatrack_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "metatrack", version, about = "Meta-learned tracker training, pruning and evaluation on simulated videos")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set meta.gamma=0.0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (defaults to the config's, then $METATRACK_OUT, then ./metatrack-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Threads used for tracking evaluations; results do not depend on it.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the initialization and learning rates.
    MetaTrain {
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the channel-mask predictor on a frozen meta-trained model.
    PruneTrain {
        #[arg(long)]
        meta: PathBuf,
    },
    /// Track every held-out video once and write per-frame results.
    Track(ModelArgs),
    /// Seed-averaged success and precision on the held-out videos.
    Eval(ModelArgs),
    /// Train and compare ablation variants.
    Ablate {
        /// Variants to run (default: all).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        variants: Option<Vec<String>>,
    },
    /// Train one pruner per λ and report prune rate, AUC and FLOPs.
    SweepLambda {
        #[arg(long)]
        meta: PathBuf,
        /// λ values (default: the config's lambda_grid).
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Write the simulated video sets as PNG frames plus an index.
    ExportVideos,
}

#[derive(Args)]
struct ModelArgs {
    /// Meta-parameter checkpoint, or a pruner checkpoint (which embeds one).
    #[arg(long)]
    meta: PathBuf,
    /// Prune with this pruner checkpoint.
    #[arg(long)]
    pruner: Option<PathBuf>,
    /// Track videos previously written by export-videos instead of the simulated held-out set.
    #[arg(long)]
    videos: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
    eprintln!("{line}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(cli: Cli) -> CliResult<()> {
    let base = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&cli.common.overrides)?;
    let root = cfg.output_root(cli.common.out.as_deref());
    let workers = cli.common.workers;
    log::info!("config {} seed {} -> {}", cfg.hash_hex(), cfg.seed, root.display());
    match cli.command {
        Command::MetaTrain { resume } => {
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let data = Data::generate(&cfg)?;
            let ckpt_path = root.join("meta.ckpt");
            let out = train_meta(&cfg, &data, resume.as_ref(), |ck| ck.save(&ckpt_path))?;
            out.checkpoint.save(&ckpt_path)?;
            write_losses(create_file(&root.join("meta_loss.csv"))?, &cfg, &out.losses)?;
            write_evals(create_file(&root.join("meta_eval.csv"))?, &cfg, &out.evals)?;
        }
        Command::PruneTrain { meta } => {
            let meta = load_meta(&meta)?;
            let data = Data::generate(&cfg)?;
            let out = train_pruner_cmd(&cfg, &meta, &data)?;
            log::info!("held-out pruning loss {:.5} -> {:.5}", out.heldout_before, out.heldout_after);
            out.checkpoint.save(&root.join("pruner.ckpt"))?;
            write_pruner_losses(create_file(&root.join("pruner_loss.csv"))?, &cfg, &out.losses)?;
            let mut r = Report::new(create_file(&root.join("pruner_eval.csv"))?, &cfg, &["when", "heldout_loss"])?;
            r.row(&["before".into(), out.heldout_before.to_string()])?;
            r.row(&["after".into(), out.heldout_after.to_string()])?;
            r.finish()?;
        }
        Command::Track(args) => {
            let (set, eval) = evaluate_model(&cfg, &args, 1, workers)?;
            write_frames(create_file(&root.join("track_frames.csv"))?, &cfg, 0, &eval.runs[0])?;
            write_run_summaries(create_file(&root.join("track_summary.csv"))?, &cfg, &eval)?;
            for run in &eval.runs[0] {
                println!("{}", metatrack::tracker::run_summary(run));
            }
            if args.pruner.is_some() {
                write_prune_report(create_file(&root.join("prune_report.csv"))?, &cfg, &eval)?;
            }
            log::info!("tracked {} videos", set.videos.len());
        }
        Command::Eval(args) => {
            let (_, eval) = evaluate_model(&cfg, &args, cfg.eval_seeds, workers)?;
            write_eval_summary(create_file(&root.join("eval.csv"))?, &cfg, &eval)?;
            write_success_curves(create_file(&root.join("success_curve.csv"))?, &cfg, &eval)?;
            if args.pruner.is_some() {
                write_prune_report(create_file(&root.join("prune_report.csv"))?, &cfg, &eval)?;
            }
            println!("success_auc={:.4} precision={:.4} flop_ratio={:.4}", eval.auc, eval.precision, eval.flop_ratio);
        }
        Command::Ablate { variants } => {
            let requested = variants.unwrap_or_else(|| REGISTRY.iter().map(|s| s.to_string()).collect());
            let variants = resolve_variants(&requested)?;
            let rows = if variants.is_empty() {
                Vec::new()
            } else {
                ablate(&cfg, &Data::generate(&cfg)?, &variants, workers)?
            };
            write_ablation(create_file(&root.join("ablate.csv"))?, &cfg, &rows)?;
        }
        Command::SweepLambda { meta, lambdas } => {
            let meta = load_meta(&meta)?;
            let grid = lambdas.unwrap_or_else(|| cfg.lambda_grid.clone());
            let rows = sweep_lambda(&cfg, &meta, &Data::generate(&cfg)?, &grid, workers)?;
            write_sweep(create_file(&root.join("sweep_lambda.csv"))?, &cfg, &rows)?;
        }
        Command::ExportVideos => {
            let data = Data::generate(&cfg)?;
            for (name, set) in [("train", &data.train), ("validation", &data.validation), ("heldout", &data.heldout)] {
                export_video_set(set, &root.join("videos").join(name))?;
            }
        }
    }
    Ok(())
}

fn load_meta(path: &Path) -> CliResult<metatrack::metalearn::MetaParams> {
    Checkpoint::load(path)?.meta_params()
}

fn evaluate_model(cfg: &RunConfig, args: &ModelArgs, seeds: usize, workers: usize) -> CliResult<(VideoSet, TrackerEval)> {
    let meta = load_meta(&args.meta)?;
    let phi = match &args.pruner {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.kind != CheckpointKind::Pruner {
                return Err(CliError::Checkpoint(format!("{} is not a pruner checkpoint", p.display())));
            }
            Some(ck.pruner_params()?)
        }
        None => None,
    };
    let set = match &args.videos {
        Some(dir) => import_video_set(dir)?,
        None => Data::generate(cfg)?.heldout,
    };
    let pruning = phi.as_ref().map(|phi| Pruning { phi, policy: cfg.threshold });
    let eval = evaluate_tracker(&meta, pruning, &set, cfg, seeds, workers)?;
    Ok((set, eval))
}
