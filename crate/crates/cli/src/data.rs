use std::path::Path;

use nalgebra::{DMatrix, DVector};
use weakiv::{Dataset, Error, Result};

/// Read a dataset from CSV with header `y,x1..xd,z1..zk` in that order.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Config(format!("cannot read {}: {e}", path.display())),
        _ => Error::Csv(e),
    })?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let (d, k) = parse_header(&header)?;
    let width = 1 + d + k;
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Config(format!("row {}: {e}", row + 2)))?;
        if record.len() != width {
            return Err(Error::Config(format!("row {} has {} fields, expected {width}", row + 2, record.len())));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Config(format!("row {}, column '{}': not a number: {field:?}", row + 2, header[col])))?;
            values.push(v);
        }
    }
    let n = values.len() / width;
    if n == 0 {
        return Err(Error::Config("data file has no rows".into()));
    }
    let table = DMatrix::from_row_slice(n, width, &values);
    let y = DVector::from_iterator(n, table.column(0).iter().copied());
    let x = table.columns(1, d).into_owned();
    let z = table.columns(1 + d, k).into_owned();
    Dataset::new(y, x, z)
}

fn parse_header(header: &[String]) -> Result<(usize, usize)> {
    let bad = || {
        Error::Config(format!(
            "header must be y,x1..xd,z1..zk, got {}",
            header.join(",")
        ))
    };
    if header.first().map(String::as_str) != Some("y") {
        return Err(bad());
    }
    let d = header[1..].iter().take_while(|h| h.starts_with('x')).count();
    let k = header.len() - 1 - d;
    if d == 0 || k == 0 {
        return Err(bad());
    }
    for j in 0..d {
        if header[1 + j] != format!("x{}", j + 1) {
            return Err(bad());
        }
    }
    for j in 0..k {
        if header[1 + d + j] != format!("z{}", j + 1) {
            return Err(bad());
        }
    }
    Ok((d, k))
}
