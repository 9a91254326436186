use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genflow_cli::commands::{self, EvalInputs, MaskSource};
use genflow_cli::{Checkpoint, CliError, CliResult, RunConfig};

/// Train, fine-tune, sample and evaluate diffusion, flow-matching and
/// one-step generative models.
#[derive(Parser, Debug)]
#[command(name = "genflow", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from scratch or resume a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "resume")]
        seed: Option<u64>,
        /// Output directory (overrides `run.out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint; the step count carries on.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fine-tune a flow-matching checkpoint for inpainting.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Draw samples into a PNG grid (images) or CSV (2D points).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(short, long, default_value_t = 64)]
        n: usize,
        /// Condition on this class; unconditional otherwise.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Inpaint held-out images; writes an Original → Masked → Base →
    /// Fine-tuned panel, the mask, and scores.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        finetuned: Option<PathBuf>,
        /// center, random_bbox, irregular, half, or a grayscale mask file
        /// (0 = hole, 255 = known).
        #[arg(long)]
        mask: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compute generation and inpainting metrics into a CSV report.
    Eval {
        /// Generation models to score; repeatable.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Base model for the inpainting table (with --finetuned).
        #[arg(long, requires = "finetuned")]
        inpaint_base: Option<PathBuf>,
        #[arg(long, requires = "inpaint_base")]
        finetuned: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also measure images per second (wall-clock, not reproducible).
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// A grid with one row per class, from a checkpoint or from the data.
    Grid {
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn with_out(mut cfg: RunConfig, out: Option<PathBuf>) -> RunConfig {
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    cfg
}

fn load_with(path: &Path, o: &Overrides, seed: Option<u64>) -> CliResult<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = commands::reconfigure(&ck.config, &o.sets, seed)?;
    Ok((ck, cfg))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
            overrides,
        } => {
            let (cfg, ck) = match resume {
                Some(path) => {
                    if config.is_some() {
                        return Err(CliError::Usage("--resume takes its config from the checkpoint".into()));
                    }
                    let (ck, cfg) = load_with(&path, &overrides, seed)?;
                    (cfg, Some(ck))
                }
                None => (commands::resolve(config.as_deref(), &overrides.sets, seed)?, None),
            };
            let cfg = with_out(cfg, out);
            for p in commands::train(&cfg, ck)? {
                println!("{}", p.display());
            }
        }
        Command::Finetune {
            base,
            seed,
            out,
            overrides,
        } => {
            let (ck, cfg) = load_with(&base, &overrides, seed)?;
            let cfg = with_out(cfg, out);
            for p in commands::finetune(ck, &cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Sample {
            checkpoint,
            seed,
            n,
            class,
            out,
            overrides,
        } => {
            let (ck, cfg) = load_with(&checkpoint, &overrides, Some(seed))?;
            let d = commands::sample_to(&ck, &cfg, n, class, &out)?;
            println!(
                "{} nfe_steps={} model_evals={}",
                out.display(),
                d.nfe_steps,
                d.model_evals
            );
        }
        Command::Inpaint {
            checkpoint,
            finetuned,
            mask,
            seed,
            n,
            out,
            overrides,
        } => {
            let mask: MaskSource = mask.parse()?;
            let (base, cfg) = load_with(&checkpoint, &overrides, seed)?;
            let ft = finetuned.as_deref().map(Checkpoint::load).transpose()?;
            let s = commands::inpaint_to(&base, ft.as_ref(), &cfg, &mask, n, &out)?;
            println!("{} base psnr {:?}", out.display(), s.base.psnr);
            if let Some(f) = s.finetuned {
                println!("{} finetuned psnr {:?}", out.display(), f.psnr);
            }
        }
        Command::Eval {
            models,
            inpaint_base,
            finetuned,
            seed,
            timing,
            out,
            overrides,
        } => {
            if models.is_empty() && inpaint_base.is_none() {
                return Err(CliError::Usage(
                    "nothing to evaluate: pass --model or --inpaint-base/--finetuned".into(),
                ));
            }
            let mut loaded = Vec::new();
            for path in &models {
                loaded.push(load_with(path, &overrides, seed)?);
            }
            let pair = match (inpaint_base, finetuned) {
                (Some(b), Some(f)) => {
                    let (base, cfg) = load_with(&b, &overrides, seed)?;
                    Some((base, Checkpoint::load(&f)?, cfg))
                }
                _ => None,
            };
            let mut names: Vec<String> = Vec::new();
            let mut inputs = EvalInputs {
                models: Vec::new(),
                inpaint: pair.as_ref().map(|(b, f, c)| (b, f, c.clone())),
                timing,
            };
            for (ck, cfg) in &loaded {
                let name = commands::model_name(ck, &names);
                names.push(name.clone());
                inputs.models.push((name, ck, cfg.clone()));
            }
            let report = commands::evaluate(&inputs)?;
            genflow_cli::images::ensure_parent(&out)?;
            std::fs::write(&out, report.to_csv()).map_err(CliError::io(&out))?;
            print!("{}", report.to_table());
        }
        Command::Grid {
            checkpoint,
            config,
            per_class,
            seed,
            out,
            overrides,
        } => match checkpoint {
            Some(path) => {
                let (ck, cfg) = load_with(&path, &overrides, seed)?;
                commands::grid_to(Some(&ck.params), &cfg, per_class, &out)?;
            }
            None => {
                let seed = Some(seed.unwrap_or(0));
                let cfg = commands::resolve(config.as_deref(), &overrides.sets, seed)?;
                commands::grid_to(None, &cfg, per_class, &out)?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
