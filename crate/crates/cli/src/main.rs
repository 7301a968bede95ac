//! `genred bench` runs the Gaussian matvec sweep; `genred eval` evaluates a
//! reduction given on the command line over array files.
//!
//! Exit codes: 0 success, 2 usage or parse error, 3 data error, 4 the dense
//! strategy refused a problem larger than its cap.

mod bench;
mod eval;
mod io;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Guard(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Parse(_) => 2,
            CliError::Data(_) => 3,
            CliError::Guard(_) => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "genred", version, about = "Tiled generic reductions from the shell")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Gaussian matvec over growing N, tiled against dense, as CSV.
    Bench(bench::BenchArgs),
    /// Evaluate one reduction over array files.
    Eval(eval::EvalArgs),
}

fn bench(args: &bench::BenchArgs) -> Result<u8, CliError> {
    let rows = bench::run(args)?;
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            bench::write_csv(&rows, file)?;
            print!("{}", bench::summary(&rows));
        }
        None => bench::write_csv(&rows, std::io::stdout().lock())?,
    }
    let code = if rows.iter().any(|r| r.status == bench::Status::Error) {
        3
    } else if rows.iter().any(|r| r.status == bench::Status::OutOfMemGuard) {
        4
    } else {
        0
    };
    Ok(code)
}

fn eval(args: &eval::EvalArgs) -> Result<u8, CliError> {
    let report = eval::run(args)?;
    println!("shape: {:?}", report.shape);
    println!("checksum: {:e}", report.checksum);
    if let Some(c) = report.index_checksum {
        println!("index checksum: {c}");
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bench(a) => bench(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
