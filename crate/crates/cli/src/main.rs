//! Command-line driver: dataset generation, actor pretraining, cVIB
//! training, evaluation sweeps, bound verification, bit accounting, and
//! image dumps.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hitoc_core::bounds;
use hitoc_core::config::Config;
use hitoc_core::harness::{self, bits, images, sweep, HarnessError, Scheme};
use hitoc_core::models::ModelParams;
use hitoc_core::world;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "hitoc",
    about = "Hierarchical task-oriented communication: train and evaluate a subtask-conditioned JSCC pipeline",
    version
)]
struct Cli {
    /// TOML configuration file (defaults apply when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory (command-dependent default)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    Gen {
        /// Sample count (default: train.n_samples from the config)
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain the actor on clean data and freeze it
    PretrainActor {
        /// Dataset file from `gen`
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the conditioned pipeline with the cVIB objective
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding the pretrained actor
        #[arg(long)]
        actor: PathBuf,
        /// Scheme: full | no-tilt | no-condition
        #[arg(long, default_value = "full")]
        scheme: String,
    },
    /// Success rate at a single SNR point (one CSV row)
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// SNR override (default: channel.snr_db)
        #[arg(long)]
        snr_db: Option<f64>,
        /// Trials override (default: channel.trials)
        #[arg(long)]
        trials: Option<usize>,
        /// Scheme override; defaults to the checkpoint's recorded scheme
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Success-rate sweep over the configured SNR grid
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Sweep all schemes on shared per-trial streams
    Ablate {
        /// Checkpoint of the full scheme
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        no_tilt: Option<PathBuf>,
        #[arg(long)]
        no_condition: Option<PathBuf>,
    },
    /// Verify the variational bounds on random discrete systems
    BoundsCheck {
        #[arg(long, default_value_t = 100)]
        systems: usize,
    },
    /// Bits-per-image accounting
    Bits {
        #[arg(long)]
        task_reals: Option<u64>,
        #[arg(long)]
        subtask_reals: Option<u64>,
        #[arg(long)]
        bits_per_value: Option<u64>,
        #[arg(long)]
        jpeg2000_bits: Option<u64>,
        /// Derive the real-value counts from the configured architecture
        #[arg(long)]
        from_arch: bool,
    },
    /// Dump task-specific reconstructions of paired-subtask scenes as PPM
    DumpImages {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        snr_db: Option<f64>,
        /// Additional model evaluated as the no-condition scheme
        #[arg(long)]
        no_condition: Option<PathBuf>,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

fn harness_err(e: HarnessError) -> CliError {
    match e {
        HarnessError::NumericAbort { .. } => CliError {
            code: EXIT_NUMERIC,
            message: e.to_string(),
        },
        HarnessError::Invalid(_) => CliError::config(e.to_string()),
        other => CliError::data(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path).map_err(|e| CliError::config(e.to_string()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_scheme(s: &str) -> Result<Scheme, CliError> {
    Scheme::parse(s).ok_or_else(|| {
        CliError::config(format!(
            "unknown scheme {s:?} (expected full, no-tilt, no-condition, or upper-bound)"
        ))
    })
}

/// Load a checkpoint; scheme comes from the flag, else the checkpoint
/// header, else `full`.
fn load_model(path: &Path, flag: Option<&str>) -> Result<(ModelParams, Scheme), CliError> {
    let (params, meta) = ModelParams::load_with_meta(path).map_err(|e| CliError::data(e.to_string()))?;
    let scheme = match flag {
        Some(s) => parse_scheme(s)?,
        None => meta
            .iter()
            .find(|(k, _)| k == "meta.scheme")
            .and_then(|(_, v)| Scheme::parse(v))
            .unwrap_or(Scheme::Full),
    };
    Ok((params, scheme))
}

fn load_dataset(path: &Path) -> Result<world::Dataset, CliError> {
    world::load_dataset(path).map_err(|e| CliError::data(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Gen { n } => {
            let n = n.unwrap_or(cfg.train.n_samples);
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("dataset.htoc"));
            world::generate_dataset(&out, n, cfg.seed, &cfg.world)
                .map_err(|e| match e {
                    world::WorldError::Empty => CliError::config(e.to_string()),
                    other => CliError::data(other.to_string()),
                })?;
            println!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Command::PretrainActor { data } => {
            let dataset = load_dataset(data)?;
            let (params, heldout) = harness::pretrain_actor(&dataset, &cfg).map_err(harness_err)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("actor.htc"));
            params
                .save_with_meta(&out, &[("meta.stage".into(), "actor-pretrain".into())])
                .map_err(|e| CliError::data(e.to_string()))?;
            println!("held-out accuracy: {heldout:.4}");
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Train { data, actor, scheme } => {
            let dataset = load_dataset(data)?;
            let scheme = parse_scheme(scheme)?;
            if scheme == Scheme::UpperBound {
                return Err(CliError::config("the upper-bound scheme is not trained"));
            }
            let (actor_params, _) = load_model(actor, None)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            let (_, log) = harness::train(&dataset, &actor_params.psi_actor, &cfg, scheme, Some(&out))
                .map_err(harness_err)?;
            let last = log.last().expect("at least one step");
            println!(
                "trained {} for {} epochs; final-step total {:.6}",
                scheme.label(),
                cfg.train.epochs,
                last.loss.total
            );
            println!("wrote {}", out.join("model.htc").display());
            Ok(())
        }
        Command::Eval {
            model,
            snr_db,
            trials,
            scheme,
        } => {
            let (params, scheme) = load_model(model, scheme.as_deref())?;
            let snr = snr_db.unwrap_or(cfg.channel.snr_db);
            let trials = trials.unwrap_or(cfg.channel.trials);
            let rows = sweep::run_sweep(
                &[(scheme, &params)],
                &[snr],
                cfg.channel.kind,
                trials,
                &cfg.world,
                cfg.channel.equalize,
                cfg.seed,
            )
            .map_err(harness_err)?;
            let text = sweep::sweep_csv_string(&rows);
            match &cli.out {
                Some(path) => std::fs::write(path, &text).map_err(|e| CliError::data(e.to_string()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Sweep { model, scheme } => {
            let (params, scheme) = load_model(model, scheme.as_deref())?;
            let rows = sweep::run_sweep(
                &[(scheme, &params)],
                &cfg.channel.sweep_snr_db,
                cfg.channel.kind,
                cfg.channel.trials,
                &cfg.world,
                cfg.channel.equalize,
                cfg.seed,
            )
            .map_err(harness_err)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));
            sweep::write_sweep_csv(&out, &rows).map_err(|e| CliError::data(e.to_string()))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Ablate {
            full,
            no_tilt,
            no_condition,
        } => {
            let (full_params, _) = load_model(full, None)?;
            let mut models: Vec<(Scheme, ModelParams)> = vec![(Scheme::Full, full_params)];
            if let Some(path) = no_tilt {
                models.push((Scheme::NoTilt, load_model(path, None)?.0));
            }
            if let Some(path) = no_condition {
                models.push((Scheme::NoCondition, load_model(path, None)?.0));
            }
            // the upper bound reuses the frozen actor of the full model
            models.push((Scheme::UpperBound, models[0].1.clone()));
            let schemes: Vec<(Scheme, &ModelParams)> =
                models.iter().map(|(s, p)| (*s, p)).collect();
            let rows = sweep::run_sweep(
                &schemes,
                &cfg.channel.sweep_snr_db,
                cfg.channel.kind,
                cfg.channel.trials,
                &cfg.world,
                cfg.channel.equalize,
                cfg.seed,
            )
            .map_err(harness_err)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("ablate.csv"));
            sweep::write_sweep_csv(&out, &rows).map_err(|e| CliError::data(e.to_string()))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::BoundsCheck { systems } => {
            let rows = bounds::sweep_random_systems(*systems, cfg.seed)
                .map_err(|e| CliError::data(e.to_string()))?;
            let worst = rows
                .iter()
                .map(|r| r.min_gap)
                .fold(f64::INFINITY, f64::min);
            let text = bounds::bounds_csv(&rows);
            match &cli.out {
                Some(path) => {
                    std::fs::write(path, &text).map_err(|e| CliError::data(e.to_string()))?;
                    println!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
            if worst < -bounds::GAP_TOL {
                return Err(CliError {
                    code: EXIT_NUMERIC,
                    message: format!("bound violated: min gap {worst:.3e}"),
                });
            }
            println!("all gaps ≥ -{:.0e} over {systems} systems per bound", bounds::GAP_TOL);
            Ok(())
        }
        Command::Bits {
            task_reals,
            subtask_reals,
            bits_per_value,
            jpeg2000_bits,
            from_arch,
        } => {
            let mut bc = if *from_arch {
                bits::BitsConfig::from_arch(&cfg.arch)
            } else {
                bits::BitsConfig::default()
            };
            if let Some(v) = task_reals {
                bc.task_reals = *v;
            }
            if let Some(v) = subtask_reals {
                bc.subtask_reals = *v;
            }
            if let Some(v) = bits_per_value {
                bc.bits_per_value = *v;
            }
            if let Some(v) = jpeg2000_bits {
                bc.jpeg2000_bits = *v;
            }
            let r = bits::bits_accounting(&bc);
            println!("scheme,bits_per_image");
            println!("with-subtask,{}", r.with_subtask);
            println!("task-only,{}", r.without_subtask);
            println!("jpeg2000,{}", r.jpeg2000);
            println!(
                "subtask overhead vs task-only: {} ({:.4})",
                r.overhead_report(),
                r.overhead_ratio
            );
            println!(
                "reduction vs jpeg2000: {} ({:.4})",
                r.reduction_report(),
                r.reduction_ratio
            );
            Ok(())
        }
        Command::DumpImages {
            model,
            count,
            snr_db,
            no_condition,
        } => {
            let (params, scheme) = load_model(model, None)?;
            let mut models: Vec<(Scheme, ModelParams)> = vec![(scheme, params)];
            if let Some(path) = no_condition {
                models.push((Scheme::NoCondition, load_model(path, None)?.0));
            }
            models.push((Scheme::UpperBound, models[0].1.clone()));
            let schemes: Vec<(Scheme, &ModelParams)> =
                models.iter().map(|(s, p)| (*s, p)).collect();
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("images"));
            let files = images::dump_taskspecific_images(
                &schemes,
                &cfg.world,
                cfg.channel.kind,
                snr_db.unwrap_or(cfg.channel.snr_db),
                cfg.channel.equalize,
                *count,
                cfg.seed,
                &out,
            )
            .map_err(harness_err)?;
            println!("wrote {} images to {}", files.len(), out.display());
            Ok(())
        }
    }
}
