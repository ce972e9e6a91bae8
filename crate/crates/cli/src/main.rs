//! `ffrmil` command-line entry point.
//!
//! Exit status: 0 on success, 1 on invalid configuration, arguments or
//! missing prerequisite stages, 2 on I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use ffrmil::config::{parse_precision, PipelineConfig};
use ffrmil::mil::Mode;
use ffrmil::{stages, selftest, Error};
use ffrmil_core::{CoreError, Precision};

#[derive(Debug, Parser)]
#[command(name = "ffrmil", version, about = "Stenosis significance classifier on synthetic CCTA phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "K")]
    folds: Option<usize>,
    #[arg(long, global = true, value_name = "combined|arteries|myo", value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, global = true, value_name = "f32|f64", value_parser = parse_precision)]
    precision: Option<Precision>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic cohort.
    Synth,
    /// Train the artery encoders on a separate pretraining cohort.
    PretrainArtery,
    /// Train the myocardium patch encoder on the pretraining cohort.
    PretrainMyo,
    /// Encode every patient's arteries and myocardium.
    Encode,
    /// Cross-validated classifier training for one mode.
    Train,
    /// Evaluate the last checkpoints of every fold for one mode.
    Eval,
    /// Three-way comparison table from the evaluated modes.
    Report,
    /// Gradient checks and invariant suite.
    Selftest,
}

enum Failure {
    Invalid(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format { .. } | Error::Core(CoreError::Io(_)) | Error::Core(CoreError::Format(_)) => {
                Failure::Io(e.to_string())
            }
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

fn resolve(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("cannot read --config {}: {e}", path.display())))?;
        cfg.apply_str(&text)?;
    }
    if let Some(s) = cli.seed {
        cfg.cohort.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(k) = cli.folds {
        cfg.folds = k;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    if let Some(k) = cli.folds.filter(|&k| k < 2) {
        return Err(Failure::Invalid(format!("--folds: must be at least 2, got {k}")));
    }
    cfg.validate()?;
    Ok(cfg)
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            Precision::F32 => stages::$f::<f32>($($arg),*),
            Precision::F64 => stages::$f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Selftest = cli.command {
        return run_selftest();
    }
    let cfg = resolve(&cli)?;
    let started = Instant::now();
    match cli.command {
        Command::Synth => {
            let s = stages::synth(&cfg)?;
            println!(
                "wrote {} patients ({} positive, {} arteries, mean min FFR {:.3}) to {}",
                s.patients,
                s.positives,
                s.arteries,
                s.mean_min_ffr,
                stages::dataset_dir(&cfg).display()
            );
        }
        Command::PretrainArtery => print!("{}", with_precision!(cfg, pretrain_artery(&cfg))?),
        Command::PretrainMyo => print!("{}", with_precision!(cfg, pretrain_myo(&cfg))?),
        Command::Encode => {
            let n = with_precision!(cfg, encode(&cfg))?;
            println!("encoded {n} patients");
        }
        Command::Train => {
            let losses = with_precision!(cfg, train(&cfg, cfg.mode))?;
            for (fold, l) in losses.iter().enumerate() {
                println!(
                    "{} fold {fold}: {} checkpoints, final interval BCE {:.4}",
                    cfg.mode,
                    l.len(),
                    l.last().copied().unwrap_or(f64::NAN)
                );
            }
        }
        Command::Eval => {
            let s = with_precision!(cfg, eval(&cfg, cfg.mode))?;
            println!(
                "{}: AUC {:.3} ± {:.3} (fold sd {:.3}), sensitivity {:.2}, specificity {:.2}",
                cfg.mode, s.auc_mean, s.auc_sd_checkpoints, s.auc_sd_folds, s.sensitivity, s.specificity
            );
        }
        Command::Report => print!("{}", stages::report(&cfg)?),
        Command::Selftest => unreachable!(),
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn run_selftest() -> Result<(), Failure> {
    let mut checks = selftest::gradient_suite()?;
    checks.extend(selftest::invariant_suite()?);
    let mut failed = 0;
    for c in &checks {
        println!("{} {}{}", if c.passed { "ok  " } else { "FAIL" }, c.name, if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) });
        failed += !c.passed as usize;
    }
    if failed > 0 {
        return Err(Failure::Invalid(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
