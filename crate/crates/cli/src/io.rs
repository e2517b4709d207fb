//! File I/O for the CLI: JSON bundles, CSV ingestion with standardization,
//! trace/chain dumps, and the error-to-exit-code mapping.

use std::fmt;
use std::path::Path;

use covclust::candidates::CandidateSet;
use covclust::map::TraceRow;
use covclust::model::SampleStats;
use covclust::synth::SynthSpec;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Clap(clap::Error),
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn usage(e: impl fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn data(e: impl fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn numerical(e: impl fmt::Display) -> Self {
        CliError::Numerical(e.to_string())
    }

    pub fn io(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Clap(_) | CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Clap(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numerical(m) => write!(f, "numerical: {m}"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub labels: Vec<usize>,
    pub eta: f64,
    pub seed: u64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::data)?;
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io)
}

pub fn read_stats(path: &Path) -> Result<SampleStats, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io)?;
    serde_json::from_str(&text).map_err(CliError::data)
}

pub fn read_truth(path: &Path) -> Result<TruthFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io)?;
    serde_json::from_str(&text).map_err(CliError::data)
}

pub fn read_candidates(path: &Path) -> Result<CandidateSet, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io)?;
    let set: CandidateSet = serde_json::from_str(&text).map_err(CliError::data)?;
    if set.is_empty() {
        return Err(CliError::Data(format!(
            "{}: empty candidate set",
            path.display()
        )));
    }
    Ok(set)
}

/// Regenerate the sample stream of a synthetic spec and write it as CSV,
/// one sample per row. Streams through the same generator, so the file
/// matches the stats bundle byte for byte.
pub fn write_samples_csv(path: &Path, spec: &SynthSpec) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(CliError::data)?;
    let mut row_error = None;
    covclust::synth::generate_dataset_with(spec, |x| {
        if row_error.is_some() {
            return;
        }
        let row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
        if let Err(e) = writer.write_record(&row) {
            row_error = Some(CliError::data(e));
        }
    })
    .map_err(CliError::numerical)?;
    if let Some(e) = row_error {
        return Err(e);
    }
    writer.flush().map_err(CliError::io)?;
    Ok(())
}

/// Read a rectangular numeric CSV (one sample per row), standardize every
/// column to mean 0 and variance 1, and return the sample covariance
/// (which is then the correlation matrix of the raw data).
pub fn ingest_csv(path: &Path, has_header: bool) -> Result<SampleStats, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(CliError::data)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record.map_err(CliError::data)?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (ci, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Data(format!(
                    "row {}, column {}: non-numeric cell '{field}'",
                    ri + 1,
                    ci + 1
                ))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(CliError::Data(format!(
                    "row {} has {} columns, expected {}",
                    ri + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    let n = rows.len();
    let p = rows[0].len();

    // standardize to mean 0, variance 1 (ML normalization)
    let mut means = vec![0.0; p];
    for row in &rows {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut vars = vec![0.0; p];
    for row in &rows {
        for c in 0..p {
            vars[c] += (row[c] - means[c]).powi(2);
        }
    }
    for (c, v) in vars.iter_mut().enumerate() {
        *v /= n as f64;
        if *v <= 0.0 {
            return Err(CliError::Data(format!(
                "column {} is constant (zero variance)",
                c + 1
            )));
        }
    }

    let mut s = DMatrix::<f64>::zeros(p, p);
    for row in &rows {
        for c in 0..p {
            let zc = (row[c] - means[c]) / vars[c].sqrt();
            for r in c..p {
                let zr = (row[r] - means[r]) / vars[r].sqrt();
                s[(r, c)] += zr * zc;
            }
        }
    }
    for c in 0..p {
        for r in c..p {
            let v = s[(r, c)] / n as f64;
            s[(r, c)] = v;
            s[(c, r)] = v;
        }
    }
    SampleStats::new(n, s).map_err(CliError::data)
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(CliError::data)?;
    writer
        .write_record(["iter", "objective", "primal_residual", "dual_residual", "rho"])
        .map_err(CliError::data)?;
    for row in trace {
        writer
            .write_record([
                row.iter.to_string(),
                format!("{}", row.objective),
                format!("{}", row.primal_residual),
                format!("{}", row.dual_residual),
                format!("{}", row.rho),
            ])
            .map_err(CliError::data)?;
    }
    writer.flush().map_err(CliError::io)?;
    Ok(())
}

pub fn write_chain_csv(path: &Path, rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(CliError::data)?;
    for row in rows {
        let rec: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writer.write_record(&rec).map_err(CliError::data)?;
    }
    writer.flush().map_err(CliError::io)?;
    Ok(())
}
