use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use loopdet_cli::record::KeyComparison;
use loopdet_cli::run::{resolve_output_root, run_config};
use loopdet_cli::{compare, CliError, ExperimentConfig, ResultRecord, EXIT_CERTIFICATE};

#[derive(Parser)]
#[command(name = "loopdet", version, about = "Loop-soup determinant experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its result record.
    Run { config: PathBuf },
    /// Compare the quantities of two result records.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Compare key A of the first record with key B of the second.
        #[arg(long = "pair", value_name = "A=B")]
        pairs: Vec<String>,
    },
    /// Run every `*.toml` config in a directory, in name order.
    Suite { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config } => run_one(&config),
        Command::Compare { a, b, pairs } => compare_records(&a, &b, &pairs),
        Command::Suite { dir } => suite(&dir),
    };
    ExitCode::from(code as u8)
}

fn fail(e: CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn run_one(path: &Path) -> i32 {
    let cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match run_config(&cfg, &resolve_output_root()) {
        Ok((record, out)) => {
            for c in &record.checks {
                println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} -> {}", record.name, out.display());
            if record.passed() {
                0
            } else {
                EXIT_CERTIFICATE
            }
        }
        Err(e) => fail(e),
    }
}

fn parse_pair(s: &str) -> Result<(String, String), CliError> {
    match s.split_once('=') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.into(), b.into())),
        _ => Err(CliError::Schema(format!("--pair expects A=B, got {s:?}"))),
    }
}

fn compare_records(a: &Path, b: &Path, pairs: &[String]) -> i32 {
    let result = (|| {
        let ra = ResultRecord::load(a)?;
        let rb = ResultRecord::load(b)?;
        let pairs = pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>, _>>()?;
        compare(&ra, &rb, &pairs)
    })();
    match result {
        Ok(rows) => {
            let out: Vec<&KeyComparison> = rows.iter().collect();
            println!("{}", serde_json::to_string_pretty(&out).expect("comparison serializes"));
            if rows.iter().all(|r| r.pass) {
                0
            } else {
                EXIT_CERTIFICATE
            }
        }
        Err(e) => fail(e),
    }
}

fn suite(dir: &Path) -> i32 {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => return fail(CliError::io(dir, e)),
    };
    let mut configs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return fail(CliError::Schema(format!("no *.toml configs in {}", dir.display())));
    }
    let mut worst = 0;
    for path in &configs {
        let code = run_one(path);
        println!("{}: exit {code}", path.display());
        worst = worst.max(code);
    }
    worst
}
