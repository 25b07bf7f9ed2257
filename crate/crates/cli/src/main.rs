use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wobble_core::report::{parse_config, run_command, write_outputs, Command, Format, Overrides};
use wobble_core::Fault;

#[derive(Parser)]
#[command(name = "wobble", version, about = "Build, simulate and check oscillating Gaussian vector sequences")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML config file (or a JSON report whose embedded config is reused)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for the Monte Carlo stage
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recursion depth R
    #[arg(long, global = true)]
    depth: Option<usize>,
    /// Monte Carlo replicates
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
    /// Test hook: corrupt-cstar, wrong-normalization or drop-block
    #[arg(long, global = true)]
    inject_fault: Option<Fault>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Decompose the targets into building-block matrices
    Decompose,
    /// Run the level recursion and check the per-level bounds
    Construct,
    /// Construct, then check partial-sum covariances by Monte Carlo
    Simulate,
    /// Construct, then compute finite-window dependence estimates
    Mixing,
    /// Every stage
    Full,
}

#[derive(ValueEnum, Clone, Copy)]
enum FormatArg {
    Json,
    Csv,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        depth: cli.depth,
        replicates: cli.replicates,
        out: cli.out.clone(),
        format: cli.format.map(|f| match f {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
            FormatArg::Both => Format::Both,
        }),
    };
    let loaded = match parse_config(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let command = match cli.command {
        Cmd::Decompose => Command::Decompose,
        Cmd::Construct => Command::Construct,
        Cmd::Simulate => Command::Simulate,
        Cmd::Mixing => Command::Mixing,
        Cmd::Full => Command::Full,
    };
    let report = run_command(command, &loaded, cli.inject_fault);
    for c in &report.checks {
        println!("{} {} ({:.6e} vs {:.6e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.limit);
    }
    let out = &loaded.input.output;
    match write_outputs(&report, &out.dir, out.format) {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {}", f.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if report.passed {
        ExitCode::SUCCESS
    } else {
        for c in report.failed_checks() {
            eprintln!("failed: {}: {}", c.name, c.detail);
        }
        ExitCode::FAILURE
    }
}
