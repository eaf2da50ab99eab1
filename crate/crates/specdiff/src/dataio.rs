//! Dataset ingestion and synthetic series generation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// One (history, target) instance in original scale. `start` is the raw index
/// of the first history row in the source series; it anchors leakage scans
/// and forecast/truth alignment.
#[derive(Debug, Clone)]
pub struct SeriesWindow {
    pub history: Tensor,
    pub target: Tensor,
    pub start: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub delimiter: char,
    pub has_header: bool,
    /// Column validated strictly increasing, then dropped from the channels.
    pub timestamp_column: Option<String>,
}

impl DatasetSpec {
    pub fn csv(path: impl Into<PathBuf>) -> Self {
        DatasetSpec { path: path.into(), delimiter: ',', has_header: true, timestamp_column: None }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub values: Tensor,
    pub channel_names: Vec<String>,
}

pub fn load_csv(spec: &DatasetSpec) -> Result<Dataset> {
    let text = fs::read_to_string(&spec.path)
        .map_err(|e| Error::io(spec.path.display().to_string(), e))?;
    parse_delimited(&text, spec)
}

fn parse_delimited(text: &str, spec: &DatasetSpec) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut names: Vec<String> = Vec::new();
    let first_data_line;
    if spec.has_header {
        let header = lines
            .next()
            .ok_or_else(|| Error::contract("empty dataset file"))?;
        names = header.split(spec.delimiter).map(|s| s.trim().to_string()).collect();
        first_data_line = None;
    } else {
        first_data_line = lines.next();
        if let Some(line) = first_data_line {
            let n = line.split(spec.delimiter).count();
            names = (0..n).map(|i| format!("col{}", i)).collect();
        }
    }
    let ts_index = match &spec.timestamp_column {
        Some(name) => Some(
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::contract(format!("timestamp column '{}' not found", name)))?,
        ),
        None => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut timestamps: Vec<String> = Vec::new();
    let ncols = names.len();
    let all_lines = first_data_line.into_iter().chain(lines);
    for (line_no, line) in all_lines.enumerate() {
        let cells: Vec<&str> = line.split(spec.delimiter).map(str::trim).collect();
        if cells.len() != ncols {
            return Err(Error::Parse {
                location: format!("row {}", line_no + 1),
                detail: format!("expected {} cells, got {}", ncols, cells.len()),
            });
        }
        let mut row = Vec::with_capacity(ncols - ts_index.map_or(0, |_| 1));
        for (ci, cell) in cells.iter().enumerate() {
            if Some(ci) == ts_index {
                timestamps.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                location: format!("row {}, column {} ({})", line_no + 1, ci + 1, names[ci]),
                detail: format!("cannot parse '{}' as a number", cell),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    location: format!("row {}, column {}", line_no + 1, ci + 1),
                    detail: "non-finite value".into(),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    if ts_index.is_some() {
        validate_increasing(&timestamps)?;
    }
    let d = ncols - ts_index.map_or(0, |_| 1);
    let n = rows.len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let channel_names: Vec<String> = names
        .into_iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != ts_index)
        .map(|(_, n)| n)
        .collect();
    Ok(Dataset { values: Tensor::matrix(n, d, data)?, channel_names })
}

fn validate_increasing(stamps: &[String]) -> Result<()> {
    let numeric: Option<Vec<f64>> = stamps.iter().map(|s| s.parse().ok()).collect();
    let increasing = match numeric {
        Some(nums) => nums.windows(2).all(|w| w[0] < w[1]),
        None => stamps.windows(2).all(|w| w[0] < w[1]),
    };
    if increasing {
        Ok(())
    } else {
        Err(Error::contract("timestamp column is not strictly increasing"))
    }
}

pub fn write_csv(path: &Path, values: &Tensor, channel_names: &[String]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&channel_names.join(","));
    out.push('\n');
    let (n, d) = (values.rows(), values.cols());
    for i in 0..n {
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.16e}", values.at(i, j)));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub const SYNTHETIC_GENERATORS: &[&str] = &["sin2", "arma"];

/// Dominant period of the `sin2` generator (used by its autocorrelation test
/// and the acceptance harness).
pub const SIN2_PERIOD: f64 = 24.0;

pub fn generate_synthetic(name: &str, n: usize, d: usize, seed: u64) -> Result<Tensor> {
    match name {
        "sin2" => Ok(sin2(n, d, seed, 0.1)),
        "arma" => Ok(arma(n, d, seed)),
        other => Err(Error::contract(format!(
            "unknown synthetic generator '{}'; available: {}",
            other,
            SYNTHETIC_GENERATORS.join(", ")
        ))),
    }
}

/// Sum of two incommensurate sinusoids (periods 24 and 24*sqrt(2)) plus
/// Gaussian noise, with per-channel phase offsets.
pub fn sin2(n: usize, d: usize, seed: u64, noise_sigma: f64) -> Tensor {
    let mut rng = RandomSource::new(seed).fork(0x51_6e32);
    let p1 = SIN2_PERIOD;
    let p2 = SIN2_PERIOD * std::f64::consts::SQRT_2;
    let mut data = vec![0.0; n * d];
    for t in 0..n {
        for j in 0..d {
            let phase = j as f64 * std::f64::consts::FRAC_PI_4;
            let main = (std::f64::consts::TAU * t as f64 / p1 + phase).sin();
            let minor = 0.15 * (std::f64::consts::TAU * t as f64 / p2 + 0.5 * phase).sin();
            data[t * d + j] = main + minor + noise_sigma * rng.next_normal();
        }
    }
    Tensor::matrix(n, d, data).expect("consistent")
}

/// AR(2) noise: x_t = 0.6 x_{t-1} - 0.2 x_{t-2} + eps.
pub fn arma(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = RandomSource::new(seed).fork(0xa7_6d61);
    let mut data = vec![0.0; n * d];
    for j in 0..d {
        let (mut prev1, mut prev2) = (0.0, 0.0);
        for t in 0..n {
            let x = 0.6 * prev1 - 0.2 * prev2 + rng.next_normal();
            data[t * d + j] = x;
            prev2 = prev1;
            prev1 = x;
        }
    }
    Tensor::matrix(n, d, data).expect("consistent")
}
