//! Matrix Market readers and writers (dense `array` and `coordinate`
//! formats, `general` and `symmetric` qualifiers).
//!
//! Values are written with 17 significant digits so a write/read round trip
//! is lossless for f64.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{RectMatrix, SymMatrix};

/// Symmetry qualifier carried by a Matrix Market file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmKind {
    General,
    Symmetric,
}

/// Writes a dense matrix in `array` format. Symmetric matrices store the
/// lower triangle with the `symmetric` qualifier.
pub fn write_matrix<W: Write>(out: &mut W, mat: &DMatrix<f64>, kind: MmKind) -> Result<()> {
    let (m, n) = (mat.nrows(), mat.ncols());
    match kind {
        MmKind::General => {
            writeln!(out, "%%MatrixMarket matrix array real general")?;
            writeln!(out, "{} {}", m, n)?;
            // array format is column-major
            for j in 0..n {
                for i in 0..m {
                    writeln!(out, "{:.16e}", mat[(i, j)])?;
                }
            }
        }
        MmKind::Symmetric => {
            if m != n {
                return Err(Error::ShapeMismatch {
                    expected: "square".into(),
                    got: format!("{}x{}", m, n),
                });
            }
            writeln!(out, "%%MatrixMarket matrix array real symmetric")?;
            writeln!(out, "{} {}", m, n)?;
            for j in 0..n {
                for i in j..m {
                    writeln!(out, "{:.16e}", mat[(i, j)])?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_matrix_file(path: &Path, mat: &DMatrix<f64>, kind: MmKind) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_matrix(&mut out, mat, kind)?;
    out.flush()?;
    Ok(())
}

pub fn write_rect_file(path: &Path, x: &RectMatrix) -> Result<()> {
    write_matrix_file(path, x.matrix(), MmKind::General)
}

pub fn write_sym_file(path: &Path, x: &SymMatrix) -> Result<()> {
    write_matrix_file(path, x.matrix(), MmKind::Symmetric)
}

/// Reads either `array` or `coordinate` format, `general` or `symmetric`.
pub fn read_matrix<R: BufRead>(reader: R) -> Result<(DMatrix<f64>, MmKind)> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty Matrix Market file".into()))??;
    let tokens: Vec<String> = header.split_whitespace().map(|t| t.to_lowercase()).collect();
    if tokens.len() < 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(Error::Parse(format!("bad Matrix Market header: {header}")));
    }
    let coordinate = match tokens[2].as_str() {
        "array" => false,
        "coordinate" => true,
        other => return Err(Error::Parse(format!("unsupported format `{other}`"))),
    };
    if tokens[3] != "real" && tokens[3] != "integer" {
        return Err(Error::Parse(format!("unsupported field `{}`", tokens[3])));
    }
    let kind = match tokens[4].as_str() {
        "general" => MmKind::General,
        "symmetric" => MmKind::Symmetric,
        other => return Err(Error::Parse(format!("unsupported symmetry `{other}`"))),
    };

    let mut data_lines = lines
        .map_while(|l| l.ok())
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('%'));
    let size_line = data_lines
        .next()
        .ok_or_else(|| Error::Parse("missing size line".into()))?;
    let dims: Vec<usize> = size_line
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
        .collect::<Result<_>>()?;

    if coordinate {
        if dims.len() != 3 {
            return Err(Error::Parse("coordinate size line needs `rows cols nnz`".into()));
        }
        let (m, n, nnz) = (dims[0], dims[1], dims[2]);
        let mut mat = DMatrix::zeros(m, n);
        let mut seen = 0;
        for line in data_lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(Error::Parse(format!("bad coordinate entry: {line}")));
            }
            let i: usize = toks[0].parse().map_err(|_| Error::Parse(line.clone()))?;
            let j: usize = toks[1].parse().map_err(|_| Error::Parse(line.clone()))?;
            let v: f64 = toks[2].parse().map_err(|_| Error::Parse(line.clone()))?;
            if i == 0 || j == 0 || i > m || j > n {
                return Err(Error::Parse(format!("index out of range: {line}")));
            }
            mat[(i - 1, j - 1)] = v;
            if kind == MmKind::Symmetric && i != j {
                mat[(j - 1, i - 1)] = v;
            }
            seen += 1;
        }
        if seen != nnz {
            return Err(Error::Parse(format!("expected {nnz} entries, found {seen}")));
        }
        Ok((mat, kind))
    } else {
        if dims.len() != 2 {
            return Err(Error::Parse("array size line needs `rows cols`".into()));
        }
        let (m, n) = (dims[0], dims[1]);
        let values: Vec<f64> = data_lines
            .flat_map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                    .collect::<Vec<_>>()
            })
            .collect::<Result<_>>()?;
        let mut mat = DMatrix::zeros(m, n);
        match kind {
            MmKind::General => {
                if values.len() != m * n {
                    return Err(Error::Parse(format!(
                        "expected {} values, found {}",
                        m * n,
                        values.len()
                    )));
                }
                let mut it = values.into_iter();
                for j in 0..n {
                    for i in 0..m {
                        mat[(i, j)] = it.next().unwrap();
                    }
                }
            }
            MmKind::Symmetric => {
                if m != n {
                    return Err(Error::Parse("symmetric array must be square".into()));
                }
                let expect = m * (m + 1) / 2;
                if values.len() != expect {
                    return Err(Error::Parse(format!(
                        "expected {} values, found {}",
                        expect,
                        values.len()
                    )));
                }
                let mut it = values.into_iter();
                for j in 0..n {
                    for i in j..m {
                        let v = it.next().unwrap();
                        mat[(i, j)] = v;
                        mat[(j, i)] = v;
                    }
                }
            }
        }
        Ok((mat, kind))
    }
}

pub fn read_matrix_file(path: &Path) -> Result<(DMatrix<f64>, MmKind)> {
    let reader = BufReader::new(File::open(path)?);
    read_matrix(reader)
}

/// Reads a rectangular matrix; errors when the file holds more rows than
/// columns (callers wanting the transpose convention should use
/// [`RectMatrix::from_any`] on [`read_matrix_file`] output).
pub fn read_rect_file(path: &Path) -> Result<RectMatrix> {
    let (mat, _) = read_matrix_file(path)?;
    RectMatrix::new(mat)
}

/// Reads a symmetric matrix. Accepts the `symmetric` qualifier or a square
/// `general` file whose content is symmetric to 1e-12 relative.
pub fn read_sym_file(path: &Path) -> Result<SymMatrix> {
    let (mat, kind) = read_matrix_file(path)?;
    if kind == MmKind::General {
        let scale = mat.amax().max(1.0);
        let defect = (&mat - mat.transpose()).amax();
        if mat.nrows() != mat.ncols() || defect > 1e-12 * scale {
            return Err(Error::Parse(
                "general file is not symmetric; expected `symmetric` qualifier".into(),
            ));
        }
    }
    SymMatrix::new(mat)
}
