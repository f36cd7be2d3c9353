use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cgmmsep::cli::{self, Config, InitMode};
use cgmmsep::{Error, Result};

#[derive(Parser)]
#[command(name = "cgmmsep", version, about = "Direction-tied cGMM source separation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the simulation and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenes processed concurrently by manifest-driven commands.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Directional,
    Network,
}

#[derive(Args)]
struct Input {
    /// A single multichannel WAV.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    input: Option<PathBuf>,
    /// A manifest; scene `id` is written to `OUT/id`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic scenes and a manifest.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_scenes: Option<usize>,
    },
    /// Multichannel EM separation.
    Separate {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Init::Directional)]
        init: Init,
        /// Network checkpoint for `--init network`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sources: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Monaural separation with the mask network alone.
    InferMono {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mask network on the mixtures of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        lr: Option<f64>,
        /// Step log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score separated scenes against the manifest references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck,
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.simulate.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run_scenes(
    input: &Input,
    out: &Path,
    jobs: usize,
    f: impl Fn(&Path, &Path) -> Result<()> + Sync,
) -> Result<()> {
    match (&input.input, &input.manifest) {
        (Some(wav), _) => f(wav, out),
        (None, Some(manifest)) => {
            let outcomes = cli::for_each_scene(manifest, out, jobs, f)?;
            let failed: Vec<_> = outcomes.into_iter().filter_map(|o| o.result.err()).collect();
            match failed.into_iter().next() {
                Some(first) => Err(first),
                None => Ok(()),
            }
        }
        (None, None) => Err(Error::InvalidConfig("give --input or --manifest".into())),
    }
}

fn run(args: Cli) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let jobs = args.common.jobs;
    match args.command {
        Command::Simulate { out, n_scenes } => {
            if let Some(n) = n_scenes {
                cfg.simulate.n_scenes = n;
            }
            cfg.validate()?;
            let entries = cli::cmd_simulate(&cfg, &out)?;
            println!("wrote {} scenes to {}", entries.len(), out.display());
        }
        Command::Separate {
            input,
            out,
            init,
            checkpoint,
            sources,
            iters,
        } => {
            if let Some(k) = sources {
                cfg.em.n_sources = k;
                cfg.em.directional_classes = cfg.em.directional_classes.max(k);
            }
            if let Some(n) = iters {
                cfg.em.n_iters = n;
            }
            cfg.validate()?;
            let init = match (init, checkpoint) {
                (Init::Directional, _) => InitMode::Directional,
                (Init::Network, Some(p)) => InitMode::Network(p),
                (Init::Network, None) => {
                    return Err(Error::InvalidConfig("--init network needs --checkpoint".into()))
                }
            };
            run_scenes(&input, &out, jobs, |wav, dir| {
                cli::cmd_separate(&cfg, wav, dir, &init).map(|_| ())
            })?;
        }
        Command::InferMono {
            input,
            checkpoint,
            out,
        } => {
            run_scenes(&input, &out, jobs, |wav, dir| {
                cli::cmd_infer_mono(&cfg, &checkpoint, wav, dir).map(|_| ())
            })?;
        }
        Command::Train {
            manifest,
            out,
            resume,
            epochs,
            lr,
            log,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if log.is_some() {
                cfg.paths.training_log = log;
            }
            cfg.validate()?;
            let reports = cli::cmd_train(&cfg, &manifest, &out, resume.as_deref())?;
            if let Some(last) = reports.last() {
                println!(
                    "epoch {}: loss {:.6}, lr {:e}",
                    last.epoch, last.mean_loss, last.lr
                );
            }
        }
        Command::Evaluate { manifest, results } => {
            let rep = cli::cmd_evaluate(&manifest, &results)?;
            println!(
                "{} scenes, {} failed, mean SI-SDR {:.2} dB (std {:.2})",
                rep.scenes.len(),
                rep.failures(),
                rep.mean_si_sdr_db,
                rep.std_si_sdr_db
            );
            if rep.failures() > 0 {
                return Err(Error::Format {
                    path: results,
                    reason: format!("{} scenes could not be scored", rep.failures()),
                });
            }
        }
        Command::Gradcheck => {
            let reports = cli::cmd_gradcheck(&cfg)?;
            let mut failed = 0;
            for (name, rep) in &reports {
                let verdict = if rep.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {name}: max relative error {:.3e} at parameter {} of {}",
                    rep.max_rel_error, rep.worst_index, rep.n_params
                );
                failed += usize::from(!rep.passed());
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CGMMSEP_LOG", "warn")).init();
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
