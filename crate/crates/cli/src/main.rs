use std::path::PathBuf;
use std::process::ExitCode;

use capmin_cli::commands::{
    cmd_all, cmd_capminv, cmd_evaluate, cmd_pmap, cmd_profile, cmd_report, cmd_size, cmd_sweep_k, cmd_train,
};
use capmin_cli::{CliResult, Config, Context, Format};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Capacitor sizing and spike-time selection for analog BNN neurons")]
struct Cli {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seeds.master`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Format of result tables.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the BNN and save the model.
    Train,
    /// Clean test accuracy of the saved model.
    Evaluate,
    /// MAC-level histogram over the training set.
    Profile,
    /// Capacitor, latency and energy for the configured k.
    Size,
    /// Accuracy and capacitor size over the k range.
    SweepK,
    /// Mapping-probability matrix at the CapMin-V starting k.
    Pmap,
    /// Accuracy over merge counts at a fixed capacitor.
    Capminv,
    /// Consolidated JSON/CSV report and plots.
    Report,
    /// Every stage in order.
    All,
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let ctx = Context::new(cfg, cli.out, cli.seed, cli.format);
    match cli.command {
        Command::Train => {
            let rows = cmd_train(&ctx)?;
            if let Some(last) = rows.last() {
                println!("final loss {:.5}", last.loss);
            }
        }
        Command::Evaluate => {
            let row = cmd_evaluate(&ctx)?;
            println!("accuracy {:.4} on {} samples", row.accuracy, row.samples);
        }
        Command::Profile => {
            let hist = cmd_profile(&ctx)?;
            println!("{} sub-MACs, mode {}", hist.total(), hist.mode());
        }
        Command::Size => {
            let row = cmd_size(&ctx)?;
            println!(
                "k = {} [{}, {}]: C = {:.4e} F, GRT = {:.4e} s, energy = {:.4e} J",
                row.k, row.q_first, row.q_last, row.capacitance_f, row.grt_s, row.energy_j
            );
        }
        Command::SweepK => {
            let rows = cmd_sweep_k(&ctx)?;
            println!("{} k values swept", rows.len());
        }
        Command::Pmap => {
            let pm = cmd_pmap(&ctx)?;
            println!("min diagonal {:.4}", pm.min_diag());
        }
        Command::Capminv => {
            let rows = cmd_capminv(&ctx)?;
            println!("{} merge counts evaluated", rows.len());
        }
        Command::Report | Command::All => {
            let report = if matches!(cli.command, Command::All) {
                cmd_all(&ctx)?
            } else {
                cmd_report(&ctx)?
            };
            println!(
                "baseline {:.4}, k* = {} ({:.4e} F)",
                report.baseline_accuracy, report.k_star, report.capacitance_at_k_star_f
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
