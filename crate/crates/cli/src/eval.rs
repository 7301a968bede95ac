//! Parse a formula and a reduction, bind array files and write the output.

use std::path::{Path, PathBuf};

use clap::Args;
use genred::engine::{Binding, EngineError};
use genred::{
    parse_formula, parse_reduction, Axis, Category, DenseOracle, Engine, EvalOutput, EvalRequest, Formula,
    RangeSpec, ReductionKind, ReductionSpec, Scalar, VarSpec,
};

use crate::io::{read_array, write_array, Array, Data};
use crate::{CliError, Precision};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// The formula, e.g. "Exp(-SqDist(Vi(0,3),Vj(0,3)))". Not needed when
    /// --reduction carries its own formula.
    #[arg(long)]
    pub formula: Option<String>,
    /// Either a reduction name (Sum, LogSumExp, Max, Min, ArgMax, ArgMin,
    /// ArgKMin) applied to --formula, or a whole reduction such as
    /// "ArgKMin(SqDist(Vi(0,3),Vj(0,3)),0,4)".
    #[arg(long)]
    pub reduction: String,
    /// Reduced axis when --reduction is a bare name: 0 reduces over j.
    #[arg(long, default_value_t = 0)]
    pub axis: usize,
    /// K for a bare ArgKMin.
    #[arg(long)]
    pub k: Option<usize>,
    /// Array bound to a variable, as `Vi0=x.csv`, `Vj1=b.bin` or `Pm0=s.csv`.
    #[arg(long = "data", value_name = "VAR=PATH")]
    pub data: Vec<String>,
    /// Block-sparsity clusters, one per line: `i_start,i_end,j_start,j_end[,j_start,j_end...]`.
    #[arg(long)]
    pub ranges: Option<PathBuf>,
    /// Number of i rows, needed only when no i variable is bound.
    #[arg(long)]
    pub m: Option<usize>,
    /// Number of j rows, needed only when no j variable is bound.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Evaluate by materializing every pair instead of tiling.
    #[arg(long)]
    pub oracle: bool,
    /// Largest table, in entries, --oracle will build.
    #[arg(long, default_value_t = DenseOracle::default().cap)]
    pub dense_cap: u128,
    /// Where to write the reduced values.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the indices of Max, Min and the Arg reductions.
    #[arg(long)]
    pub indices: Option<PathBuf>,
}

/// Shape and checksums of an evaluation, for printing.
#[derive(Debug)]
pub struct Report {
    pub shape: Vec<usize>,
    pub checksum: f64,
    pub index_checksum: Option<i64>,
}

fn parse_var(key: &str) -> Result<(Category, usize), CliError> {
    let bad = || CliError::Usage(format!("--data expects VAR=PATH with VAR like Vi0, Vj1 or Pm0, got {key:?}"));
    let (cat, slot) = key.split_at_checked(2).ok_or_else(bad)?;
    let cat = match cat {
        "Vi" => Category::I,
        "Vj" => Category::J,
        "Pm" => Category::P,
        _ => return Err(bad()),
    };
    Ok((cat, slot.parse().map_err(|_| bad())?))
}

/// `v` as written in formulas, e.g. `Vj(0,3)`.
fn var_name(v: &VarSpec) -> String {
    format!("{}({},{})", v.category.constructor(), v.slot, v.dim)
}

fn parse_spec(args: &EvalArgs) -> Result<(ReductionSpec, Formula, String), CliError> {
    let text = args.reduction.trim();
    if text.contains('(') {
        if args.formula.is_some() {
            return Err(CliError::Usage(
                "--reduction already contains a formula; drop --formula".into(),
            ));
        }
        let (spec, f) = parse_reduction(text).map_err(|e| CliError::Parse(e.render(text)))?;
        return Ok((spec, f, text.to_string()));
    }
    let ftext = args
        .formula
        .as_deref()
        .ok_or_else(|| CliError::Usage("--formula is required with a bare reduction name".into()))?;
    let f = parse_formula(ftext).map_err(|e| CliError::Parse(e.render(ftext)))?;
    let kind = ReductionKind::from_name(text).ok_or_else(|| CliError::Usage(format!("unknown reduction {text:?}")))?;
    let axis = Axis::from_index(args.axis).ok_or_else(|| CliError::Usage("--axis must be 0 or 1".into()))?;
    let spec = match (kind, args.k) {
        (ReductionKind::ArgKMin, Some(k)) => ReductionSpec::arg_k_min(axis, k),
        (ReductionKind::ArgKMin, None) => return Err(CliError::Usage("ArgKMin needs --k".into())),
        (_, Some(_)) => return Err(CliError::Usage("--k only applies to ArgKMin".into())),
        (_, None) => ReductionSpec::new(kind, axis),
    };
    Ok((spec, f, ftext.to_string()))
}

fn read_ranges(path: &Path) -> Result<RangeSpec, CliError> {
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut spec = RangeSpec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let nums = rec
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("line {}: expected non-negative integers", line + 1)))?;
        if nums.len() < 2 || nums.len() % 2 != 0 {
            return Err(bad(format!("line {}: expected i_start,i_end followed by j pairs", line + 1)));
        }
        let reduced = nums[2..].chunks(2).map(|p| p[0]..p[1]).collect();
        spec = spec.cluster(nums[0]..nums[1], reduced);
    }
    Ok(spec)
}

/// Right-aligned broadcast of batch shapes.
fn broadcast(shapes: &[Vec<usize>]) -> Result<Vec<usize>, CliError> {
    let rank = shapes.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = vec![1; rank];
    for s in shapes {
        for (k, &d) in s.iter().enumerate() {
            let at = &mut out[rank - s.len() + k];
            if *at == 1 {
                *at = d;
            } else if d != 1 && d != *at {
                return Err(CliError::Data(format!("batch shapes {shapes:?} do not broadcast")));
            }
        }
    }
    Ok(out)
}

struct Bound {
    var: (Category, usize),
    path: String,
    array: Array,
}

fn load(args: &EvalArgs, formula: &Formula) -> Result<Vec<Bound>, CliError> {
    let mut bound = Vec::new();
    for entry in &args.data {
        let (key, path) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--data expects VAR=PATH, got {entry:?}")))?;
        let var = parse_var(key)?;
        let array = read_array(Path::new(path))?;
        if let Some(v) = formula.find_var(var.0, var.1) {
            // Parameters are a single row; anything else has rows before the
            // coordinates.
            let min_rank = if v.category == Category::P { 1 } else { 2 };
            let last = array.dims.last().copied().unwrap_or(0);
            if array.dims.len() < min_rank || last != v.dim {
                return Err(CliError::Data(format!(
                    "{path} has shape {:?} but {} needs rows of {} values",
                    array.dims,
                    var_name(&v),
                    v.dim
                )));
            }
        }
        bound.push(Bound {
            var,
            path: path.to_string(),
            array,
        });
    }
    Ok(bound)
}

fn batch_dims(b: &Bound) -> Vec<usize> {
    let keep = match b.var.0 {
        // A CSV parameter is one row: [1, D].
        Category::P if b.array.dims.len() == 2 && b.array.dims[0] == 1 => 0,
        Category::P => b.array.dims.len() - 1,
        _ => b.array.dims.len() - 2,
    };
    b.array.dims[..keep].to_vec()
}

fn evaluate<T: Scalar>(
    args: &EvalArgs,
    spec: ReductionSpec,
    formula: Formula,
    bound: &[Bound],
) -> Result<(EvalOutput<T>, Array, Option<Array>), CliError> {
    let converted: Vec<Vec<T>> = bound
        .iter()
        .map(|b| b.array.data.to_f64().into_iter().map(T::from_f64).collect())
        .collect();
    let batches: Vec<Vec<usize>> = bound.iter().map(batch_dims).collect();
    let batch = broadcast(&batches)?;
    let mut req = EvalRequest::new(formula, spec).with_batch(&batch);
    for ((b, data), own) in bound.iter().zip(&converted).zip(&batches) {
        req = req.bind(Binding::batched(b.var.0, b.var.1, data, own));
    }
    if args.m.is_some() || args.n.is_some() {
        let rows = |cat| bound.iter().find(|b| b.var.0 == cat).map(|b| b.array.dims[b.array.dims.len() - 2]);
        let m = args.m.or_else(|| rows(Category::I)).unwrap_or(0);
        let n = args.n.or_else(|| rows(Category::J)).unwrap_or(0);
        req = req.with_sizes(m, n);
    }
    if let Some(t) = args.tile {
        req = req.with_tile(t);
    }
    if let Some(p) = &args.ranges {
        req = req.with_ranges(read_ranges(p)?);
    }
    let out = if args.oracle {
        DenseOracle::with_cap(args.dense_cap).evaluate(&req)
    } else {
        let engine = match args.threads {
            Some(t) => Engine::with_workers(t).map_err(|e| CliError::Data(e.to_string()))?,
            None => Engine::new(),
        };
        engine.evaluate(&req)
    }
    .map_err(|e| match e {
        EngineError::CapExceeded { .. } => CliError::Guard(e.to_string()),
        EngineError::Formula(_) | EngineError::Reduction(_) | EngineError::KTooLarge { .. } | EngineError::InvalidTile => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    })?;
    let values = Array {
        dims: out.shape.clone(),
        data: to_data(&out.values),
    };
    let indices = out.indices.as_ref().map(|ix| {
        let mut dims = out.shape.clone();
        *dims.last_mut().unwrap() = out.index_width;
        Array {
            dims,
            data: Data::I64(ix.clone()),
        }
    });
    Ok((out, values, indices))
}

fn to_data<T: Scalar>(values: &[T]) -> Data {
    if std::mem::size_of::<T>() == 4 {
        Data::F32(values.iter().map(|v| v.as_f64() as f32).collect())
    } else {
        Data::F64(values.iter().map(|v| v.as_f64()).collect())
    }
}

pub fn run(args: &EvalArgs) -> Result<Report, CliError> {
    let (spec, formula, _) = parse_spec(args)?;
    let bound = load(args, &formula)?;
    for v in formula.collect_vars() {
        if !bound.iter().any(|b| b.var == (v.category, v.slot)) {
            return Err(CliError::Data(format!("no --data for {}", var_name(v))));
        }
    }
    if let Some(extra) = bound.iter().find(|b| formula.find_var(b.var.0, b.var.1).is_none()) {
        return Err(CliError::Usage(format!("{} is bound but the formula does not use it", extra.path)));
    }
    let (values, indices) = match args.precision {
        Precision::F32 => {
            let (_, v, i) = evaluate::<f32>(args, spec, formula, &bound)?;
            (v, i)
        }
        Precision::F64 => {
            let (_, v, i) = evaluate::<f64>(args, spec, formula, &bound)?;
            (v, i)
        }
    };
    if let Some(p) = &args.out {
        write_array(p, &values)?;
    }
    match (&args.indices, &indices) {
        (Some(p), Some(ix)) => write_array(p, ix)?,
        (Some(_), None) => {
            return Err(CliError::Usage(format!("{} reductions have no indices", spec.kind.name())));
        }
        _ => {}
    }
    Ok(Report {
        shape: values.dims.clone(),
        checksum: values.data.to_f64().iter().sum(),
        index_checksum: indices.map(|ix| match ix.data {
            Data::I64(v) => v.iter().sum(),
            _ => unreachable!(),
        }),
    })
}
