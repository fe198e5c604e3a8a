use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};
use synthlong::config::RunConfig;
use synthlong::sampling::NoiseLevelSet;
use synthlong::{dataio, pipeline, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_GATE: u8 = 3;

/// Synthetic image-to-longitudinal benchmark pipeline.
#[derive(Debug, Parser)]
#[command(name = "synthlong", version)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated noise levels, e.g. 0,1,9,18,49.
    #[arg(long, global = true, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Number of subjects.
    #[arg(long, global = true)]
    subjects: Option<usize>,
    /// Fail with exit code 3 when an acceptance gate does not hold.
    #[arg(long, global = true)]
    check: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render images and simulate longitudinal data.
    Generate,
    /// Rank latent dimensions by both influence methods.
    SelectDims,
    /// Empirical-Bayes estimates for every subject and level.
    FitEb,
    /// Train one predictor per noise level.
    Train,
    /// Predict random effects on the test split.
    Predict,
    /// Metrics, NLL table and bootstrap intervals.
    Evaluate,
    /// All stages in order.
    Pipeline,
    /// Check every file against the manifest.
    Verify,
    /// Print the effective configuration.
    ShowConfig,
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(l) = &cli.levels {
        cfg.levels = NoiseLevelSet::new(l.clone())?;
    }
    if let Some(n) = cli.subjects {
        cfg.n_subjects = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalFailure(_) | Error::UndefinedMetric(_) => EXIT_NUMERICAL,
        Error::GateFailed(_) => EXIT_GATE,
        _ => EXIT_USAGE,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = build_config(cli)?;
    info!("config digest {}", cfg.digest()?);
    match cli.command {
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::Generate => {
            let h = pipeline::cmd_generate(&cfg)?;
            let m = h.manifest();
            println!(
                "generated {} subjects (train {}, val {}, test {}) at levels {:?}; effects from dims {:?}",
                m.n_subjects, m.counts.train, m.counts.val, m.counts.test, m.levels, m.effect_indices
            );
        }
        Command::SelectDims => {
            let r = pipeline::cmd_select_dims(&cfg)?;
            println!("method 1 top-3: {:?}", r.method1.top3());
            println!("method 2 top-3: {:?}", r.method2.top3());
            println!("chosen: {:?}  agreement: {}", r.chosen, r.agreement);
            if cli.check && !r.agreement {
                return Err(Error::GateFailed("selection methods disagree on the top three dimensions".into()));
            }
        }
        Command::FitEb => {
            let s = pipeline::cmd_fit_eb(&cfg)?;
            for l in &s.levels {
                println!("sigma2 = {:>4}: {}/{} converged", l.sigma2, l.converged, l.n);
            }
            let f = s.fraction_converged();
            if f < cfg.gates.min_eb_converged {
                return Err(Error::NumericalFailure(format!(
                    "only {:.2}% of empirical-Bayes fits converged",
                    100.0 * f
                )));
            }
        }
        Command::Train => {
            for r in pipeline::cmd_train(&cfg)? {
                println!("sigma2 = {:>4}: lambda = {}", r.sigma2, r.lambda);
            }
        }
        Command::Predict => {
            pipeline::cmd_predict(&cfg)?;
            println!("predictions written to {}", cfg.out_dir.display());
        }
        Command::Evaluate => {
            let report = pipeline::cmd_evaluate(&cfg)?;
            print!("{}", report.to_text());
            if cli.check {
                pipeline::check_outputs(&cfg)?;
                println!("all gates pass");
            }
        }
        Command::Pipeline => {
            let report = pipeline::cmd_pipeline(&cfg)?;
            print!("{}", report.to_text());
            if cli.check {
                pipeline::check_outputs(&cfg)?;
                println!("all gates pass");
            }
        }
        Command::Verify => {
            let m = dataio::verify(&cfg.out_dir)?;
            println!("{} files verified against {}", m.files.len(), cfg.out_dir.join(dataio::MANIFEST_FILE).display());
            if m.config_digest != cfg.digest()? {
                warn!("dataset digest {} differs from the current config", m.config_digest);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
