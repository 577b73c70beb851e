use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seglens::commands::{cmd_compare_masks, cmd_gen, cmd_knockout, cmd_sweep, RunContext};
use seglens::config::RunConfig;
use seglens::knockout::KnockoutMode;
use seglens::Error;

/// Layerwise segmentation probing of a toy multimodal decoder.
#[derive(Parser)]
#[command(name = "seglens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: scenes, labels, split manifest.
    Gen(Common),
    /// Train one probe per stage and report validation mIoU and pAcc.
    Sweep(Common),
    /// Run knockout conditions and report confusion persistence.
    Knockout {
        #[command(flatten)]
        common: Common,
        /// Target class (the class the confusion is measured against).
        #[arg(long = "class")]
        class: Option<u8>,
        /// Condition to run; all configured conditions when omitted.
        #[arg(long, value_parser = ["none", "incorrect", "correct"])]
        mode: Option<String>,
    },
    /// Compare per-position accuracy between two mask modes.
    CompareMasks {
        #[command(flatten)]
        common: Common,
        /// Number of leading image positions to report.
        #[arg(long)]
        positions: Option<usize>,
    },
}

fn threads() -> Result<usize, Error> {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("SEGLENS_THREADS") {
        Err(_) => Ok(avail),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("SEGLENS_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn load(common: &Common) -> Result<(RunConfig, RunContext), Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok((cfg, RunContext::new(&common.out, threads()?)))
}

fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Gen(common) => {
            let (cfg, ctx) = load(&common)?;
            let m = cmd_gen(&cfg, &ctx)?;
            Ok(format!(
                "wrote {} train and {} val images to {}",
                m.train.len(),
                m.val.len(),
                ctx.out.display()
            ))
        }
        Command::Sweep(common) => {
            let (cfg, ctx) = load(&common)?;
            let r = cmd_sweep(&cfg, &ctx)?;
            let mut s = String::new();
            for row in &r.rows {
                let mark = if row.stage == r.peak_stage { "  <- peak" } else { "" };
                s.push_str(&format!("{:<10} mIoU {:.4}  pAcc {:.4}{mark}\n", row.stage, row.miou, row.pacc));
            }
            for (k, v) in &r.stats {
                s.push_str(&format!("{k} {v}\n"));
            }
            Ok(s.trim_end().to_string())
        }
        Command::Knockout { common, class, mode } => {
            let (mut cfg, ctx) = load(&common)?;
            if let Some(c) = class {
                cfg.knockout_class = c;
            }
            if let Some(m) = mode {
                cfg.knockout_modes = vec![m.parse::<KnockoutMode>()?];
            }
            cfg.validate()?;
            let r = cmd_knockout(&cfg, &ctx)?;
            let mut s = String::new();
            for c in &r.conditions {
                let rates: Vec<String> = c.mean_rates.iter().map(|v| format!("{v:.3}")).collect();
                s.push_str(&format!(
                    "{:<9} class {} included {} skipped {}  rates [{}]\n",
                    c.mode,
                    c.target_class,
                    c.included,
                    c.skipped.len(),
                    rates.join(", ")
                ));
            }
            Ok(s.trim_end().to_string())
        }
        Command::CompareMasks { common, positions } => {
            let (mut cfg, ctx) = load(&common)?;
            if let Some(n) = positions {
                cfg.compare_positions = n;
            }
            cfg.validate()?;
            let r = cmd_compare_masks(&cfg, &ctx)?;
            Ok(format!(
                "{}: {} {} vs {} {}  gap {} ({})",
                r.stage, r.baseline_mode, r.baseline_mean, r.alternative_mode, r.alternative_mean, r.gap, r.pct_impr
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
