//! Series tables on disk: comma separated, header row required, first column
//! the time index, one row per time point.
//!
//! Parse errors report 1-based file line and column numbers, so the header
//! is line 1 and the first data row line 2.

use std::io::{Read, Write};
use std::path::Path;

use crate::embedding::SeriesMatrix;
use crate::error::{DefmError, Result};

/// A parsed table: values plus the time index of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub series: SeriesMatrix,
    pub times: Vec<f64>,
}

fn parse_cell(text: &str, row: usize, column: usize) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| DefmError::Parse {
        row,
        column,
        message: format!("'{text}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(DefmError::Parse {
            row,
            column,
            message: format!("'{text}' is not finite"),
        });
    }
    Ok(v)
}

pub fn read_series<R: Read>(input: R) -> Result<SeriesTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(DefmError::Parse {
            row: 1,
            column: header.len().max(1),
            message: "need a time column and at least one variable".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let mut times = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let row = k + 2;
        if record.len() != n + 1 {
            return Err(DefmError::Parse {
                row,
                column: record.len().min(n + 1) + 1,
                message: format!("expected {} fields, found {}", n + 1, record.len()),
            });
        }
        times.push(parse_cell(&record[0], row, 1)?);
        for (j, col) in columns.iter_mut().enumerate() {
            col.push(parse_cell(&record[j + 1], row, j + 2)?);
        }
    }
    if times.len() < 2 {
        return Err(DefmError::TooShort(format!("{} data rows; need at least 2", times.len())));
    }
    let dt = times[1] - times[0];
    let dt = if dt > 0.0 { dt } else { 1.0 };
    let series = SeriesMatrix::new(n, times.len(), columns.concat(), dt)?.with_names(names)?;
    Ok(SeriesTable { series, times })
}

pub fn read_series_file(path: &Path) -> Result<SeriesTable> {
    read_series(std::fs::File::open(path)?)
}

/// Writes `series` with time index `t0 + k * dt` in the first column.
pub fn write_series<W: Write>(out: W, series: &SeriesMatrix, t0: f64) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    header.extend(series.names.iter().cloned());
    writer.write_record(&header)?;
    let mut record = Vec::with_capacity(series.n() + 1);
    for t in 0..series.m() {
        record.clear();
        record.push((t0 + t as f64 * series.dt).to_string());
        record.extend((0..series.n()).map(|j| series.get(j, t).to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_series_file(path: &Path, series: &SeriesMatrix, t0: f64) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_series(file, series, t0)
}
