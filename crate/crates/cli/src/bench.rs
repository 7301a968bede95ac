//! The Gaussian matvec sweep: `a_i = Σ_j exp(-|x_i - y_j|²) b_j` for growing
//! N, run by the tiled engine and by the dense strategy.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use genred::engine::EngineError;
use genred::{Axis, DenseOracle, Engine, EvalOutput, EvalRequest, Formula, ReductionKind, ReductionSpec, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{CliError, Precision};

/// Entries the dense strategy may materialize by default. Enough for
/// N = M = 10^4, far below N = M = 10^6.
pub const DEFAULT_DENSE_CAP: u128 = 1 << 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Tiled,
    Dense,
}

impl Strategy {
    fn name(self) -> &'static str {
        match self {
            Strategy::Tiled => "tiled",
            Strategy::Dense => "dense",
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Numbers of points N, comma separated.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub sizes: Vec<usize>,
    /// Output rows M; defaults to N.
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "tiled,dense")]
    pub strategies: Vec<Strategy>,
    /// Tile edge of the tiled strategy.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Runs per row; the median time is reported.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination. Without it the CSV goes to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Largest table, in entries, the dense strategy will build.
    #[arg(long, default_value_t = DEFAULT_DENSE_CAP)]
    pub dense_cap: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    OutOfMemGuard,
    Error,
}

impl Status {
    fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::OutOfMemGuard => "out_of_mem_guard",
            Status::Error => "error",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub precision: Precision,
    pub time_ms: Option<f64>,
    pub peak_aux_bytes: Option<usize>,
    pub status: Status,
}

pub const CSV_HEADER: [&str; 8] = ["strategy", "N", "M", "D", "precision", "time_ms", "peak_aux_bytes", "status"];

impl BenchRow {
    fn record(&self) -> [String; 8] {
        [
            self.strategy.name().to_string(),
            self.n.to_string(),
            self.m.to_string(),
            self.d.to_string(),
            self.precision.name().to_string(),
            self.time_ms.map_or(String::new(), |t| format!("{t:.3}")),
            self.peak_aux_bytes.map_or(String::new(), |b| b.to_string()),
            self.status.name().to_string(),
        ]
    }
}

fn gaussian(d: usize) -> Formula {
    let x = Formula::vi(0, d).unwrap();
    let y = Formula::vj(0, d).unwrap();
    let b = Formula::vj(1, 1).unwrap();
    x.sqdist(&y).unwrap().neg().exp().scal(&b).unwrap()
}

/// Points uniform in the unit cube and standard normal weights, fixed by
/// `seed` and `n`.
fn inputs<T: Scalar>(seed: u64, m: usize, n: usize, d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32) ^ m as u64);
    let mut uniform = |len: usize| (0..len).map(|_| T::from_f64(r.random::<f64>())).collect::<Vec<T>>();
    let x = uniform(m * d);
    let y = uniform(n * d);
    let b = (0..n).map(|_| T::from_f64(r.sample::<f64, _>(StandardNormal))).collect();
    (x, y, b)
}

fn median(mut times: Vec<f64>) -> f64 {
    times.sort_by(f64::total_cmp);
    let k = times.len();
    if k % 2 == 1 {
        times[k / 2]
    } else {
        0.5 * (times[k / 2 - 1] + times[k / 2])
    }
}

fn run_size<T: Scalar>(args: &BenchArgs, engine: &Engine, n: usize) -> Vec<BenchRow> {
    let m = args.rows.unwrap_or(n);
    let (x, y, b) = inputs::<T>(args.seed, m, n, args.dim);
    let mut req = EvalRequest::new(gaussian(args.dim), ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
        .bind_i(0, &x)
        .bind_j(0, &y)
        .bind_j(1, &b);
    if let Some(t) = args.tile {
        req = req.with_tile(t);
    }
    let dense = DenseOracle::with_cap(args.dense_cap);
    let mut rows = Vec::new();
    for &strategy in &args.strategies {
        let mut times = Vec::new();
        let mut peak = 0;
        let mut status = Status::Ok;
        for _ in 0..args.repeat {
            let start = Instant::now();
            let out: Result<EvalOutput<T>, EngineError> = match strategy {
                Strategy::Tiled => engine.evaluate(&req),
                Strategy::Dense => dense.evaluate(&req),
            };
            let ms = start.elapsed().as_secs_f64() * 1e3;
            match out {
                Ok(out) => {
                    times.push(ms);
                    peak = peak.max(out.stats.peak_aux_bytes);
                }
                Err(EngineError::CapExceeded { required, cap }) => {
                    eprintln!("{} N={n}: needs {required} entries, cap is {cap}", strategy.name());
                    status = Status::OutOfMemGuard;
                    break;
                }
                Err(e) => {
                    eprintln!("{} N={n}: {e}", strategy.name());
                    status = Status::Error;
                    break;
                }
            }
        }
        let ok = status == Status::Ok;
        rows.push(BenchRow {
            strategy,
            n,
            m,
            d: args.dim,
            precision: args.precision,
            time_ms: ok.then(|| median(times)),
            peak_aux_bytes: ok.then_some(peak),
            status,
        });
    }
    rows
}

pub fn run(args: &BenchArgs) -> Result<Vec<BenchRow>, CliError> {
    if args.sizes.contains(&0) || args.rows == Some(0) {
        return Err(CliError::Usage("sizes and --rows must be positive".into()));
    }
    if args.dim == 0 || args.repeat == 0 || args.tile == Some(0) || args.threads == Some(0) {
        return Err(CliError::Usage("--dim, --repeat, --tile and --threads must be positive".into()));
    }
    let engine = match args.threads {
        Some(t) => Engine::with_workers(t).map_err(|e| CliError::Data(e.to_string()))?,
        None => Engine::new(),
    };
    let mut rows = Vec::new();
    for &n in &args.sizes {
        rows.extend(match args.precision {
            Precision::F32 => run_size::<f32>(args, &engine, n),
            Precision::F64 => run_size::<f64>(args, &engine, n),
        });
    }
    Ok(rows)
}

pub fn write_csv<W: std::io::Write>(rows: &[BenchRow], w: W) -> Result<(), CliError> {
    let mut csv = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::Data(e.to_string());
    csv.write_record(CSV_HEADER).map_err(io)?;
    for row in rows {
        csv.write_record(row.record()).map_err(io)?;
    }
    csv.flush().map_err(|e| CliError::Data(e.to_string()))
}

/// A human-readable table, with the tiled/dense memory ratio where both ran.
pub fn summary(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>9} {:>9} {:>12} {:>16}  status", "strategy", "N", "M", "time (ms)", "peak aux (B)");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>9} {:>9} {:>12} {:>16}  {}",
            r.strategy.name(),
            r.n,
            r.m,
            r.time_ms.map_or("-".into(), |t| format!("{t:.1}")),
            r.peak_aux_bytes.map_or("-".into(), |b| b.to_string()),
            r.status.name()
        );
    }
    for r in rows.iter().filter(|r| r.strategy == Strategy::Tiled) {
        let dense = rows
            .iter()
            .find(|d| d.strategy == Strategy::Dense && d.n == r.n && d.m == r.m);
        if let (Some(t), Some(d)) = (r.peak_aux_bytes, dense.and_then(|d| d.peak_aux_bytes)) {
            let _ = writeln!(s, "N={}: dense uses {:.0}x the working memory of tiled", r.n, d as f64 / t.max(1) as f64);
        }
    }
    s
}
