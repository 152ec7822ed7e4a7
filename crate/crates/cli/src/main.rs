use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use deformreg::engine::{
    checkpoint_from_bytes, checkpoint_to_bytes, history_csv, optimize_field, register, train_from, DirectConfig,
};
use deformreg::eval::{evaluate_pair, reports_to_csv, Annotations};
use deformreg::io::{
    checkerboard, field_to_ppm, generate_synthetic, load_dataset, read_field, read_landmarks, read_mask, read_pgm,
    write_field, write_image, RunConfig, SynthSpec,
};
use deformreg::{Error, LossConfig, RegModel, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "deformreg", version, about = "Deformable 2D image registration")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth fields.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a registration network on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides `paths.dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write; overrides `paths.output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch loss CSV; overrides `paths.history`.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Checkpoint to resume from; overrides `paths.checkpoint`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Register a pair with a trained model.
    Register {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Register a pair by optimizing the field directly.
    Optimize {
        #[command(flatten)]
        pair: PairArgs,
        /// Run configuration supplying the loss weights and iteration counts.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pyramid scales when no configuration is given.
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long)]
        fixed_mask: Option<PathBuf>,
        #[arg(long)]
        moving_mask: Option<PathBuf>,
    },
    /// Score a field against masks and/or landmarks.
    Eval {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, requires = "moving_mask")]
        fixed_mask: Option<PathBuf>,
        #[arg(long, requires = "fixed_mask")]
        moving_mask: Option<PathBuf>,
        #[arg(long, requires = "moving_lm")]
        fixed_lm: Option<PathBuf>,
        #[arg(long, requires = "fixed_lm")]
        moving_lm: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "pair")]
        pair_id: String,
    },
    /// Render a field as a colour-coded PPM.
    Inspect {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_warped: PathBuf,
    /// Checkerboard of fixed and warped images.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn required(value: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Config {
        path: key.into(),
        reason: format!("no path given; pass {flag} or set {key}"),
    })
}

fn write_pair_outputs(pair: &PairArgs, fixed: &deformreg::Image2D, registration: &deformreg::engine::Registration, maxval: u16) -> Result<()> {
    write_field(&pair.out_field, &registration.field)?;
    write_image(&pair.out_warped, &registration.warped, maxval)?;
    if let Some(path) = &pair.overlay {
        let tile = (fixed.width().min(fixed.height()) / 8).max(1);
        write_image(path, &checkerboard(fixed, &registration.warped, tile)?, maxval)?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let dataset = generate_synthetic(&SynthSpec::from_json(&text)?, &out)?;
            log::info!("wrote {} pairs to {}", dataset.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            history,
            resume,
        } => {
            let run = RunConfig::load(&config)?;
            let data = required(data.or(run.paths.dataset.clone()), "--data", "paths.dataset")?;
            let out = required(out.or(run.paths.output.clone()), "--out", "paths.output")?;
            let history = history.or(run.paths.history.clone());
            let dataset = load_dataset(&data)?;
            let (mut model, adam) = match resume.or(run.paths.checkpoint.clone()) {
                Some(path) => {
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    let (model, adam) = checkpoint_from_bytes(&bytes)?;
                    if model.arch() != &run.arch {
                        return Err(Error::Config {
                            path: "arch".into(),
                            reason: format!("checkpoint {} was built for {:?}", path.display(), model.arch()),
                        });
                    }
                    (model, adam)
                }
                None => (RegModel::init(run.arch.clone(), run.model_seed)?, None),
            };
            let outcome = train_from(&mut model, &dataset, &run.train_config(), adam)?;
            write_bytes(&out, &checkpoint_to_bytes(&model, &outcome.adam))?;
            if let Some(path) = history {
                write_bytes(&path, history_csv(&outcome.history).as_bytes())?;
            }
            if let Some(last) = outcome.history.last() {
                log::info!("trained {} epochs, final loss {:.6}", last.epoch, last.total);
            }
        }
        Command::Register { model, pair } => {
            let bytes = std::fs::read(&model).map_err(|e| Error::io(&model, e))?;
            let (model, _) = checkpoint_from_bytes(&bytes)?;
            let fixed = read_pgm(&pair.fixed)?;
            let moving = read_pgm(&pair.moving)?;
            let start = Instant::now();
            let registration = register(&model, &fixed.image, &moving.image)?;
            log::info!("registered in {:.3} s", start.elapsed().as_secs_f64());
            write_pair_outputs(&pair, &fixed.image, &registration, moving.maxval)?;
        }
        Command::Optimize {
            pair,
            config,
            levels,
            fixed_mask,
            moving_mask,
        } => {
            let direct = match config {
                Some(path) => RunConfig::load(path)?.direct_config(),
                None => DirectConfig::new(LossConfig::defaults(levels)),
            };
            let fixed = read_pgm(&pair.fixed)?;
            let moving = read_pgm(&pair.moving)?;
            let masks = match (fixed_mask, moving_mask) {
                (Some(f), Some(m)) => Some((read_mask(f)?, read_mask(m)?)),
                (None, None) => None,
                _ => return Err(Error::InvalidArgument("--fixed-mask and --moving-mask go together".into())),
            };
            let start = Instant::now();
            let outcome = optimize_field(&fixed.image, &moving.image, masks.as_ref().map(|(f, m)| (f, m)), &direct)?;
            log::info!(
                "optimized in {:.3} s, final loss {:.6}",
                start.elapsed().as_secs_f64(),
                outcome.report.total
            );
            let registration = deformreg::engine::Registration {
                warped: deformreg::warp_image(&moving.image, &outcome.field)?,
                field: outcome.field,
            };
            write_pair_outputs(&pair, &fixed.image, &registration, moving.maxval)?;
        }
        Command::Eval {
            field,
            fixed_mask,
            moving_mask,
            fixed_lm,
            moving_lm,
            report,
            pair_id,
        } => {
            let field = read_field(&field)?;
            let (h, w) = field.dims();
            let masks = match (fixed_mask, moving_mask) {
                (Some(f), Some(m)) => Some((read_mask(f)?, read_mask(m)?)),
                _ => None,
            };
            let landmarks = match (fixed_lm, moving_lm) {
                (Some(f), Some(m)) => Some((read_landmarks(f, Some((w, h)))?, read_landmarks(m, Some((w, h)))?)),
                _ => None,
            };
            let annotations = Annotations {
                masks: masks.as_ref().map(|(f, m)| (f, m)),
                landmarks: landmarks.as_ref().map(|(f, m)| (f, m)),
            };
            let metrics = evaluate_pair(pair_id, &field, annotations, None)?;
            write_bytes(&report, reports_to_csv(&[metrics]).as_bytes())?;
        }
        Command::Inspect { field, out } => {
            write_bytes(&out, &field_to_ppm(&read_field(&field)?))?;
        }
    }
    Ok(())
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var("DEFORMREG_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DEFORMREG_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA })
        }
    }
}
