//! Array files.
//!
//! Two formats, picked by extension. `.bin` is raw little-endian:
//!
//! ```text
//! b"GRDA" | dtype: u8 (0 = f32, 1 = f64, 2 = i64) | rank: u8 | rank × u64 dims | data
//! ```
//!
//! Anything else is read as CSV without a header, one row per line, `#`
//! starting a comment. CSV arrays are always two-dimensional; a batched
//! array has to come as `.bin`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::CliError;

pub const MAGIC: &[u8; 4] = b"GRDA";

#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl Data {
    fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::I64(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
            Data::I64(_) => 2,
        }
    }

    /// Values as f64; exact for f32 and for integers below 2^53.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Data::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Data::F64(v) => v.clone(),
            Data::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Data,
}

fn is_bin(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

pub fn read_array(path: &Path) -> Result<Array, CliError> {
    if is_bin(path) {
        read_bin(path)
    } else {
        read_csv(path)
    }
}

fn read_csv(path: &Path) -> Result<Array, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, e))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        if width.is_some_and(|w| w != rec.len()) {
            return Err(data_err(path, format!("row {} has {} columns, expected {}", line + 1, rec.len(), width.unwrap())));
        }
        width = Some(rec.len());
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| data_err(path, format!("row {}: {field:?} is not a number", line + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| data_err(path, "file is empty"))?;
    Ok(Array {
        dims: vec![rows, width],
        data: Data::F64(values),
    })
}

fn read_bin(path: &Path) -> Result<Array, CliError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| data_err(path, e))?;
    let short = || data_err(path, "truncated file");
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(data_err(path, "not a genred array file"));
    }
    let (code, rank) = (bytes[4], bytes[5] as usize);
    let mut at = 6;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes.get(at..at + 8).ok_or_else(short)?;
        dims.push(u64::from_le_bytes(raw.try_into().unwrap()) as usize);
        at += 8;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| data_err(path, "dimensions overflow"))?;
    let width = match code {
        0 => 4,
        1 | 2 => 8,
        c => return Err(data_err(path, format!("unknown dtype code {c}"))),
    };
    let body = &bytes[at..];
    if body.len() != count * width {
        return Err(data_err(path, format!("expected {} data bytes, found {}", count * width, body.len())));
    }
    let data = match code {
        0 => Data::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        1 => Data::F64(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        _ => Data::I64(body.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(Array { dims, data })
}

/// Writes `array`. CSV output folds every leading dimension into rows.
pub fn write_array(path: &Path, array: &Array) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| data_err(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| data_err(path, e);
    if is_bin(path) {
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&[array.data.code(), array.dims.len() as u8]).map_err(io)?;
        for &d in &array.dims {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        match &array.data {
            Data::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            Data::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            Data::I64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
        }
        .map_err(io)?;
    } else {
        let width = array.dims.last().copied().unwrap_or(1).max(1);
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        let n = array.data.len();
        for start in (0..n).step_by(width) {
            let end = start + width;
            // Display prints the shortest string that reads back to the
            // same bits.
            let row: Vec<String> = match &array.data {
                Data::F32(v) => v[start..end].iter().map(f32::to_string).collect(),
                Data::F64(v) => v[start..end].iter().map(f64::to_string).collect(),
                Data::I64(v) => v[start..end].iter().map(i64::to_string).collect(),
            };
            csv.write_record(&row).map_err(|e| data_err(path, e))?;
        }
        csv.flush().map_err(io)?;
        return Ok(());
    }
    w.flush().map_err(io)
}
