//! Matrix CSV format: a `# n=<rows> p=<cols>` header line followed by
//! row-major comma-separated values. Values use the shortest representation
//! that round-trips exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, RvmError};

pub fn write_matrix_csv<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    writeln!(w, "# n={} p={}", m.nrows(), m.ncols())?;
    let mut line = String::new();
    for i in 0..m.nrows() {
        line.clear();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{}", m[(i, j)]));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_matrix_csv(&mut w, m)?;
    w.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| RvmError::InvalidInput("matrix CSV must start with '# n=<n> p=<p>'".into()))?;
    let mut n = None;
    let mut p = None;
    for tok in body.split_whitespace() {
        if let Some(v) = tok.strip_prefix("n=") {
            n = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("p=") {
            p = v.parse().ok();
        }
    }
    match (n, p) {
        (Some(n), Some(p)) => Ok((n, p)),
        _ => Err(RvmError::InvalidInput(format!("malformed matrix CSV header: {line:?}"))),
    }
}

pub fn read_matrix_csv<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let mut reader = BufReader::new(r);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let (n, p) = parse_header(header.trim())?;
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::with_capacity(n * p);
    let mut rows = 0;
    for rec in csv.records() {
        let rec = rec?;
        if rec.len() != p {
            return Err(RvmError::InvalidInput(format!(
                "row {rows} has {} fields, header says p={p}",
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| RvmError::InvalidInput(format!("row {rows}: cannot parse {field:?}")))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(RvmError::InvalidInput(format!("found {rows} rows, header says n={n}")));
    }
    Ok(DMatrix::from_row_slice(n, p, &data))
}

pub fn load_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    read_matrix_csv(File::open(path)?)
}
