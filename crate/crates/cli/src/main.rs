//! `awmfuse`: build degraded datasets, train, fuse and score.

use std::path::PathBuf;
use std::process::ExitCode;

use awmfuse::commands::{
    cache_dir_from_env, cmd_degrade, cmd_evaluate, cmd_fuse, cmd_scenes, cmd_train, exit_code, DegradeArgs,
    EvaluateArgs, FuseArgs, TrainArgs, TrainOverrides,
};
use awmfuse::model::DetailSource;
use awmfuse::trainer::TextQuality;
use clap::{Parser, Subcommand};

/// Exit status for malformed command lines.
const USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "awmfuse", version, about = "Text-guided infrared and visible image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic clean visible/infrared pairs with descriptions.
    Scenes {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Degrade clean pairs with rain, haze and snow and write a manifest.
    Degrade {
        #[arg(long)]
        clean_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        per_type: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also reduce infrared contrast by this factor in (0, 1].
        #[arg(long)]
        ir_contrast: Option<f64>,
    },
    /// Train a model; writes a checkpoint and a per-epoch loss CSV.
    Train(TrainCmd),
    /// Fuse one visible/infrared pair.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        /// Text sidecar with caption and detail lines.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Score fused images against their sources.
    Evaluate {
        #[arg(long)]
        fused_dir: PathBuf,
        #[arg(long)]
        vi_dir: PathBuf,
        #[arg(long)]
        ir_dir: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct TrainCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Defaults to the checkpoint path with extension `loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    no_gtpm: bool,
    #[arg(long)]
    no_ltpm: bool,
    #[arg(long)]
    no_vlm_loss: bool,
    /// `detail` or `caption`.
    #[arg(long, value_parser = parse_from_str::<DetailSource>)]
    detail_text: Option<DetailSource>,
    /// `clean`, `noisy`, `reduced` or `augmented`.
    #[arg(long, value_parser = parse_from_str::<TextQuality>)]
    text_mode: Option<TextQuality>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

fn parse_from_str<T: std::str::FromStr<Err = awmfuse::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: awmfuse::Error| e.to_string())
}

fn run(cmd: Command) -> awmfuse::Result<()> {
    match cmd {
        Command::Scenes { out_dir, count, size, seed } => {
            let ids = cmd_scenes(&out_dir, count, size, seed)?;
            println!("wrote {} scenes to {}", ids.len(), out_dir.display());
        }
        Command::Degrade { clean_dir, out_dir, per_type, seed, ir_contrast } => {
            let m = cmd_degrade(&DegradeArgs { clean_dir, out_dir: out_dir.clone(), per_type, seed, ir_contrast })?;
            println!("wrote {} pairs and {}", m.entries.len(), out_dir.join("manifest.json").display());
        }
        Command::Train(t) => {
            let args = TrainArgs {
                manifest: t.manifest,
                config: t.config,
                out_checkpoint: t.out_checkpoint,
                loss_csv: t.loss_csv,
                overrides: TrainOverrides {
                    no_gtpm: t.no_gtpm,
                    no_ltpm: t.no_ltpm,
                    no_vlm_loss: t.no_vlm_loss,
                    detail_text: t.detail_text,
                    text_mode: t.text_mode,
                    epochs: t.epochs,
                    max_steps: t.max_steps,
                    seed: t.seed,
                    crop: t.crop,
                    batch: t.batch,
                    lr: t.lr,
                },
                cache_dir: cache_dir_from_env(t.cache_dir),
            };
            let s = cmd_train(&args)?;
            println!("tokens: caption {:.2}, detail {:.2}", s.tokens.caption, s.tokens.detail);
            println!("steps {} over {} epochs at crop {}", s.steps, s.epochs, s.crop);
            if let (Some(a), Some(b)) = (s.first_total, s.last_total) {
                println!("loss {a:.4} -> {b:.4}");
            }
            println!("wrote {} and {}", args.out_checkpoint.display(), args.loss_csv_path().display());
        }
        Command::Fuse { checkpoint, vi, ir, sidecar, out, cache_dir } => {
            cmd_fuse(&FuseArgs { checkpoint, vi, ir, sidecar, out: out.clone(), cache_dir: cache_dir_from_env(cache_dir) })?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate { fused_dir, vi_dir, ir_dir, out_csv } => {
            let table = cmd_evaluate(&EvaluateArgs { fused_dir, vi_dir, ir_dir, out_csv: out_csv.clone() })?;
            println!("scored {} images into {}", table.rows.len(), out_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
