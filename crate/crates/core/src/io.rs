//! Matrix Market readers and writers.
//!
//! Supports `coordinate real {general, symmetric}` and `array real general`.
//! Values are written with Rust's shortest-roundtrip float formatting, so a
//! write/read cycle reproduces every entry bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{CooMatrix, SysMatrix};

fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        file: path.display().to_string(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a dense matrix in `array real general` format.
pub fn write_dense(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut s = String::new();
    s.push_str("%%MatrixMarket matrix array real general\n");
    let _ = writeln!(s, "{} {}", m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let _ = writeln!(s, "{}", m[(i, j)]);
        }
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

/// Writes a system matrix: dense storage as `array`, sparse as `coordinate`.
pub fn write_sys(path: &Path, m: &SysMatrix) -> Result<()> {
    match m {
        SysMatrix::Dense(d) => write_dense(path, d),
        SysMatrix::Sparse(c) => {
            let mut sorted = c.clone();
            sorted.consolidate();
            let mut s = String::new();
            s.push_str("%%MatrixMarket matrix coordinate real general\n");
            let _ = writeln!(s, "{} {} {}", c.nrows, c.ncols, sorted.entries.len());
            for (i, j, v) in &sorted.entries {
                let _ = writeln!(s, "{} {} {}", i + 1, j + 1, v);
            }
            fs::write(path, s).map_err(|e| io_err(path, e))
        }
    }
}

struct Header {
    coordinate: bool,
    symmetric: bool,
}

fn parse_header(path: &Path, line: &str) -> Result<Header> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "%%MatrixMarket" || fields[1] != "matrix" {
        return Err(ingest_err(path, "malformed Matrix Market header"));
    }
    let coordinate = match fields[2] {
        "coordinate" => true,
        "array" => false,
        other => return Err(ingest_err(path, format!("unsupported format '{other}'"))),
    };
    if fields[3] != "real" && fields[3] != "integer" {
        return Err(ingest_err(
            path,
            format!("unsupported field type '{}'", fields[3]),
        ));
    }
    let symmetric = match fields[4] {
        "general" => false,
        "symmetric" => true,
        other => return Err(ingest_err(path, format!("unsupported symmetry '{other}'"))),
    };
    Ok(Header {
        coordinate,
        symmetric,
    })
}

/// Reads any supported Matrix Market file.
///
/// Coordinate files load as sparse, array files as dense; symmetric
/// coordinate files have their mirrored entries materialized.
pub fn read_matrix(path: &Path) -> Result<SysMatrix> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header_line = match lines.next() {
        Some(line) => line.map_err(|e| io_err(path, e))?,
        None => return Err(ingest_err(path, "empty file")),
    };
    let header = parse_header(path, &header_line)?;

    let mut data_lines = lines.filter_map(|l| match l {
        Ok(s) => {
            let t = s.trim().to_string();
            if t.is_empty() || t.starts_with('%') {
                None
            } else {
                Some(Ok(t))
            }
        }
        Err(e) => Some(Err(e)),
    });

    let size_line = match data_lines.next() {
        Some(line) => line.map_err(|e| io_err(path, e))?,
        None => return Err(ingest_err(path, "missing size line")),
    };
    let sizes: Vec<&str> = size_line.split_whitespace().collect();

    if header.coordinate {
        if sizes.len() != 3 {
            return Err(ingest_err(path, "coordinate size line needs 3 fields"));
        }
        let nrows: usize = sizes[0]
            .parse()
            .map_err(|_| ingest_err(path, "bad row count"))?;
        let ncols: usize = sizes[1]
            .parse()
            .map_err(|_| ingest_err(path, "bad column count"))?;
        let nnz: usize = sizes[2]
            .parse()
            .map_err(|_| ingest_err(path, "bad nonzero count"))?;
        let mut entries = Vec::with_capacity(nnz);
        for (count, line) in data_lines.enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 3 {
                return Err(ingest_err(path, format!("bad entry line {}", count + 1)));
            }
            let i: usize = f[0]
                .parse()
                .map_err(|_| ingest_err(path, format!("bad row index on line {}", count + 1)))?;
            let j: usize = f[1].parse().map_err(|_| {
                ingest_err(path, format!("bad column index on line {}", count + 1))
            })?;
            let v: f64 = f[2]
                .parse()
                .map_err(|_| ingest_err(path, format!("bad value on line {}", count + 1)))?;
            if i == 0 || j == 0 || i > nrows || j > ncols {
                return Err(ingest_err(
                    path,
                    format!("index ({i}, {j}) outside {nrows}x{ncols}"),
                ));
            }
            entries.push((i - 1, j - 1, v));
            if header.symmetric && i != j {
                entries.push((j - 1, i - 1, v));
            }
        }
        let listed = if header.symmetric {
            entries.len()
        } else {
            entries.len()
        };
        // For symmetric files the entry count covers the stored triangle only.
        let stored = entries
            .iter()
            .filter(|e| !header.symmetric || e.0 >= e.1)
            .count();
        if (header.symmetric && stored != nnz) || (!header.symmetric && listed != nnz) {
            return Err(ingest_err(
                path,
                format!("expected {nnz} entries, found a different count"),
            ));
        }
        Ok(SysMatrix::Sparse(CooMatrix::new(nrows, ncols, entries)?))
    } else {
        if sizes.len() != 2 {
            return Err(ingest_err(path, "array size line needs 2 fields"));
        }
        let nrows: usize = sizes[0]
            .parse()
            .map_err(|_| ingest_err(path, "bad row count"))?;
        let ncols: usize = sizes[1]
            .parse()
            .map_err(|_| ingest_err(path, "bad column count"))?;
        if header.symmetric {
            return Err(ingest_err(path, "symmetric array format not supported"));
        }
        let mut values = Vec::with_capacity(nrows * ncols);
        for line in data_lines {
            let line = line.map_err(|e| io_err(path, e))?;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| ingest_err(path, format!("bad value '{tok}'")))?;
                values.push(v);
            }
        }
        if values.len() != nrows * ncols {
            return Err(ingest_err(
                path,
                format!(
                    "expected {} values, found {}",
                    nrows * ncols,
                    values.len()
                ),
            ));
        }
        // Array format is column-major.
        Ok(SysMatrix::Dense(DMatrix::from_vec(nrows, ncols, values)))
    }
}

/// Reads a file that must produce a dense matrix (factors, inputs, outputs).
pub fn read_dense(path: &Path) -> Result<DMatrix<f64>> {
    Ok(read_matrix(path)?.to_dense())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("parabt_io_test_dense");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.mtx");
        let m = DMatrix::from_fn(5, 3, |i, j| ((i * 31 + j * 17) as f64).sin() * 1e-7);
        write_dense(&path, &m).unwrap();
        let back = read_dense(&path).unwrap();
        assert_eq!(m.nrows(), back.nrows());
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn coordinate_roundtrip_and_symmetric_read() {
        let dir = std::env::temp_dir().join("parabt_io_test_coo");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.mtx");
        let coo = CooMatrix::new(4, 4, vec![(0, 0, 1.5), (2, 1, -0.25), (3, 3, 2.0)]).unwrap();
        write_sys(&path, &SysMatrix::Sparse(coo.clone())).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.to_dense(), SysMatrix::Sparse(coo).to_dense());

        let sym = dir.join("sym.mtx");
        fs::write(
            &sym,
            "%%MatrixMarket matrix coordinate real symmetric\n3 3 2\n1 1 2.0\n3 1 -1.0\n",
        )
        .unwrap();
        let m = read_matrix(&sym).unwrap().to_dense();
        assert_eq!(m[(0, 2)], -1.0);
        assert_eq!(m[(2, 0)], -1.0);
        assert_eq!(m[(0, 0)], 2.0);
    }

    #[test]
    fn malformed_header_names_file() {
        let dir = std::env::temp_dir().join("parabt_io_test_bad");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.mtx");
        fs::write(&path, "%%NotMatrixMarket\n1 1\n0\n").unwrap();
        let err = read_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("bad.mtx"));
    }
}
