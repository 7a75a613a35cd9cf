//! Matrix Market coordinate-format reader and writer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, DenseBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
    SkewSymmetric,
}

pub fn read_matrix_market(path: impl AsRef<Path>) -> Result<CsrMatrix> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_matrix_market(BufReader::new(file), path)
}

/// Parses a coordinate-format stream. `path` is only used in error messages.
pub fn parse_matrix_market(reader: impl BufRead, path: &Path) -> Result<CsrMatrix> {
    let malformed = |line: usize, msg: String| Error::MalformedInput {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty file".into()))?;
    let header = header?;
    let tokens: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
    if tokens.len() < 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(malformed(1, format!("bad header `{header}`")));
    }
    if tokens[2] != "coordinate" {
        return Err(malformed(1, format!("unsupported format `{}`", tokens[2])));
    }
    match tokens[3].as_str() {
        "real" | "integer" => {}
        other => {
            return Err(Error::UnsupportedField {
                path: path.to_path_buf(),
                field: other.to_string(),
            })
        }
    }
    let symmetry = match tokens[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        "skew-symmetric" => Symmetry::SkewSymmetric,
        other => return Err(malformed(1, format!("unsupported symmetry `{other}`"))),
    };

    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let mut next_usize = |what: &str| -> Result<usize> {
            fields
                .next()
                .ok_or_else(|| malformed(lineno, format!("missing {what}")))?
                .parse::<usize>()
                .map_err(|e| malformed(lineno, format!("bad {what}: {e}")))
        };
        match size {
            None => {
                let r = next_usize("row count")?;
                let c = next_usize("column count")?;
                let nnz = next_usize("entry count")?;
                if symmetry != Symmetry::General && r != c {
                    return Err(malformed(
                        lineno,
                        "symmetric storage of a non-square matrix".into(),
                    ));
                }
                size = Some((r, c, nnz));
                triplets.reserve(if symmetry == Symmetry::General {
                    nnz
                } else {
                    2 * nnz
                });
            }
            Some((n_rows, n_cols, _)) => {
                let i = next_usize("row index")?;
                let j = next_usize("column index")?;
                let v: f64 = fields
                    .next()
                    .ok_or_else(|| malformed(lineno, "missing value".into()))?
                    .parse()
                    .map_err(|e| malformed(lineno, format!("bad value: {e}")))?;
                if i == 0 || j == 0 || i > n_rows || j > n_cols {
                    return Err(malformed(lineno, format!("index ({i}, {j}) out of range")));
                }
                let (i, j) = (i - 1, j - 1);
                triplets.push((i, j, v));
                if i != j {
                    match symmetry {
                        Symmetry::General => {}
                        Symmetry::Symmetric => triplets.push((j, i, v)),
                        Symmetry::SkewSymmetric => triplets.push((j, i, -v)),
                    }
                }
            }
        }
    }
    let (n_rows, n_cols, nnz) = size.ok_or_else(|| malformed(1, "missing size line".into()))?;
    let stored = match symmetry {
        Symmetry::General => triplets.len(),
        _ => triplets.iter().filter(|t| t.0 >= t.1).count(),
    };
    if stored != nnz {
        return Err(malformed(
            0,
            format!("size line declares {nnz} entries, found {stored}"),
        ));
    }
    CsrMatrix::from_triplets(n_rows, n_cols, &triplets)
}

/// Writes `a` as `coordinate real general` with round-trip exact values.
pub fn write_matrix_market(path: impl AsRef<Path>, a: &CsrMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix_market_to(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn write_matrix_market_to(w: &mut impl Write, a: &CsrMatrix) -> Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", a.n_rows(), a.n_cols(), a.nnz())?;
    for (i, j, v) in a.triplets() {
        writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

/// Reads a dense right-hand side stored either as a Matrix Market `array`
/// file or as a coordinate file (missing entries are zero).
pub fn read_dense_matrix_market(path: impl AsRef<Path>) -> Result<DenseBlock> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default().to_lowercase();
    if header.contains("coordinate") {
        return Ok(read_matrix_market(path)?.to_dense());
    }
    if !header.starts_with("%%matrixmarket matrix array") {
        return Err(Error::MalformedInput {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("bad header `{header}`"),
        });
    }
    let mut dims: Option<(usize, usize)> = None;
    let mut vals = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let bad = |msg: String| Error::MalformedInput {
            path: path.to_path_buf(),
            line: idx + 2,
            msg,
        };
        if dims.is_none() {
            let f: Vec<usize> = t
                .split_whitespace()
                .map(|s| s.parse().map_err(|e| bad(format!("bad size: {e}"))))
                .collect::<Result<_>>()?;
            if f.len() != 2 {
                return Err(bad("expected `rows cols`".into()));
            }
            dims = Some((f[0], f[1]));
        } else {
            vals.push(
                t.parse::<f64>()
                    .map_err(|e| bad(format!("bad value: {e}")))?,
            );
        }
    }
    let (r, c) = dims.ok_or_else(|| Error::MalformedInput {
        path: path.to_path_buf(),
        line: 1,
        msg: "missing size line".into(),
    })?;
    if vals.len() != r * c {
        return Err(Error::MalformedInput {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("expected {} values, found {}", r * c, vals.len()),
        });
    }
    Ok(DenseBlock::from_vec(r, c, vals))
}

pub fn write_dense_matrix_market(path: impl AsRef<Path>, m: &DenseBlock) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "%%MatrixMarket matrix array real general")?;
    writeln!(w, "{} {}", m.nrows(), m.ncols())?;
    for v in m.iter() {
        writeln!(w, "{v:e}")?;
    }
    w.flush()?;
    Ok(())
}
