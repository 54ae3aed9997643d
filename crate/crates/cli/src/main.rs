use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use illumloc::pipeline::{Method, Pipeline};
use illumloc::{par, Error};

#[derive(Parser, Debug)]
#[command(name = "illumloc", version, about = "Camera localization under changing illumination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic database views and the pseudo-real test images.
    Render {
        #[command(flatten)]
        common: Common,
        /// Use the full lighting × camera grid.
        #[arg(long)]
        full_grid: bool,
        /// Only write the view metadata.
        #[arg(long)]
        dry_run: bool,
    },
    /// Extract and cluster synthetic features, extract real features.
    BuildDb {
        #[command(flatten)]
        common: Common,
    },
    /// Train the descriptor transforms and the forest for one or all folds.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Localize the test images of one or all folds.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: Option<usize>,
        /// naive, rest_no_whitening or rest_whitening; all when omitted.
        #[arg(long)]
        method: Option<String>,
    },
    /// Pool all folds into the report files.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Print the summary of the last evaluation.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn folds(p: &Pipeline, fold: Option<usize>) -> Result<Vec<usize>, Failure> {
    let n = p.config.cv_folds;
    match fold {
        Some(f) if f >= n => Err(Failure::Validation(format!("--fold {f} out of range 0..{n}"))),
        Some(f) => Ok(vec![f]),
        None => Ok((0..n).collect()),
    }
}

/// Runs one subcommand and returns what it prints.
fn run(cli: Cli) -> Result<String, Failure> {
    let mut out = String::new();
    match cli.command {
        Command::Render {
            common,
            full_grid,
            dry_run,
        } => {
            let p = Pipeline::load(&common.config)?;
            let plan = p.render(full_grid, dry_run)?;
            let _ = writeln!(
                out,
                "{} synthetic views ({} lighting conditions × {} poses), {} real views",
                plan.synthetic.len(),
                plan.lighting_conditions,
                plan.camera_poses,
                plan.real.len()
            );
        }
        Command::BuildDb { common } => {
            let p = Pipeline::load(&common.config)?;
            let s = p.build_db()?;
            let _ = writeln!(
                out,
                "{} synthetic features, {} classes ({} database features), {} real features",
                s.synthetic_features, s.classes, s.database_features, s.real_features
            );
        }
        Command::Train { common, fold } => {
            let p = Pipeline::load(&common.config)?;
            let folds = folds(&p, fold)?;
            if fold.is_none() {
                let _ = writeln!(out, "forest OOB accuracy {:.3}", p.train_forest()?);
            }
            let summaries = illumloc::par::try_map(&folds, |&f| p.train_fold(f))?;
            for s in summaries {
                let _ = writeln!(out, "fold {}: {} whitened pairs, {} raw pairs", s.fold, s.pairs_whitened, s.pairs_raw);
            }
        }
        Command::Localize { common, fold, method } => {
            let p = Pipeline::load(&common.config)?;
            let methods = match method {
                None => Method::ALL.to_vec(),
                Some(m) => vec![Method::parse(&m).ok_or_else(|| Failure::Validation(format!("unknown method `{m}`")))?],
            };
            for f in folds(&p, fold)? {
                for &m in &methods {
                    let res = p.localize(f, m)?;
                    let ok = res.images.iter().filter(|i| i.pose.is_some()).count();
                    let _ = writeln!(out, "fold {f} {}: {ok}/{} images localized", m.name(), res.images.len());
                }
            }
        }
        Command::Evaluate { common } => {
            let p = Pipeline::load(&common.config)?;
            out = p.evaluate()?.summary;
        }
        Command::Report { common } => {
            let p = Pipeline::load(&common.config)?;
            out = p.report_text()?;
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let threads = match std::env::var("ILLUMLOC_THREADS") {
        Err(_) => 0,
        Ok(v) => match v.parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: ILLUMLOC_THREADS must be a non-negative integer, got `{v}`");
                return ExitCode::from(1);
            }
        },
    };
    match par::with_threads(threads, || run(cli)) {
        Ok(text) => {
            // a closed pipe on the reader's side is not a failure of the run
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
