use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rrp::ablate::cmd_ablate;
use rrp::commands::{cmd_eval, cmd_label, cmd_synth, cmd_train};
use rrp::gradsuite::{run_suite, SuiteConfig, OPS};
use rrp::labelfile::LabelFileKind;
use rrp::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "rrp",
    version,
    about = "Count-map crowd counting with region relation modules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Count,
    Density,
    Class,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes and their annotations.
    Synth(Common),
    /// Write label grids for an annotated dataset.
    Label {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding annotations.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Label kinds to write (repeatable); defaults to all.
        #[arg(long, value_enum)]
        kind: Vec<Kind>,
    },
    /// Train a model and save a checkpoint, log and final metrics.
    Train(Common),
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the configured test set when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write prediction/ground-truth heatmaps.
        #[arg(long)]
        heatmap: bool,
    },
    /// Finite-difference check of every operator and a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Labeling, area-size and relation-depth sweeps.
    Ablate(Common),
}

fn load(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.resolve(common.seed, common.out.clone()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = load(&c)?;
            let files = cmd_synth(&cfg)?;
            println!(
                "wrote {} images to {}",
                files.len(),
                cfg.paths.out.display()
            );
        }
        Command::Label { common, data, kind } => {
            let cfg = load(&common)?;
            let kinds: Vec<LabelFileKind> = if kind.is_empty() {
                vec![
                    LabelFileKind::Count,
                    LabelFileKind::Density,
                    LabelFileKind::Class,
                ]
            } else {
                kind.iter()
                    .map(|k| match k {
                        Kind::Count => LabelFileKind::Count,
                        Kind::Density => LabelFileKind::Density,
                        Kind::Class => LabelFileKind::Class,
                    })
                    .collect()
            };
            let s = cmd_label(&cfg, &data, &kinds)?;
            println!("exact: {}/{}", s.exact, s.images);
            if kinds.contains(&LabelFileKind::Density) {
                println!(
                    "density max relative mass error: {:.3e}",
                    s.density_rel_error
                );
            }
            return Ok(s.exact == s.images);
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let s = cmd_train(&cfg)?;
            println!(
                "checkpoint {}; mae {:.4} mse {:.4} over {} images",
                s.checkpoint.display(),
                s.metrics.mae,
                s.metrics.mse,
                s.metrics.n
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            heatmap,
        } => {
            let cfg = load(&common)?;
            let m = cmd_eval(&cfg, &checkpoint, data.as_deref(), heatmap)?;
            println!("mae {:.4} mse {:.4} over {} images", m.mae, m.mse, m.n);
        }
        Command::Gradcheck {
            common,
            seeds,
            inject_fault,
        } => {
            load(&common)?.validate()?;
            let fault = match inject_fault {
                None => None,
                Some(name) => Some(
                    OPS.into_iter()
                        .find(|op| op.name() == name)
                        .ok_or_else(|| Error::Config(format!("unknown operator {name}")))?,
                ),
            };
            let results = run_suite(&SuiteConfig {
                seeds,
                fault,
                ..SuiteConfig::default()
            })?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{:<20} max_rel_error {:.3e} tol {:.0e} checked {:>5} skipped {:>3} {}",
                    r.name,
                    r.max_rel_error,
                    r.tol,
                    r.checked,
                    r.skipped,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            println!("{}", if ok { "all passed" } else { "FAILED" });
            return Ok(ok);
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            let (rows, text) = cmd_ablate(&cfg)?;
            println!(
                "{} rows written to {}",
                rows.len(),
                cfg.paths.out.join(rrp::ablate::CSV_FILE).display()
            );
            print!("{text}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
