use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {} has {} columns, expected {}",
                    i,
                    row.len(),
                    cols
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty-column matrix has no meaningful rows anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reads the text matrix format: a `rows cols` header followed by one
    /// whitespace-separated row per line.
    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (rows, cols) = loop {
            match lines.next() {
                None => return Err(Error::parse(1, "missing `rows cols` header")),
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break parse_header(&line, i + 1)?;
                }
            }
        };
        let mut data = Vec::with_capacity(rows * cols);
        let mut seen = 0usize;
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if seen == rows {
                return Err(Error::parse(
                    lineno,
                    format!("more rows than the declared {}", rows),
                ));
            }
            let before = data.len();
            for field in line.split_ascii_whitespace() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("non-numeric value `{}`", field)))?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("line {}: `{}`", lineno, field)));
                }
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(Error::parse(
                    lineno,
                    format!("expected {} values, found {}", cols, data.len() - before),
                ));
            }
            seen += 1;
        }
        if seen != rows {
            return Err(Error::Shape(format!(
                "header declares {} rows but {} were found",
                rows, seen
            )));
        }
        Matrix::from_vec(rows, cols, data)
    }

    pub fn write_text<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{} {}", self.rows, self.cols)?;
        for row in self.iter_rows() {
            let mut first = true;
            for v in row {
                if !first {
                    out.write_all(b" ")?;
                }
                first = false;
                write!(out, "{}", v)?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub(crate) fn parse_header(line: &str, lineno: usize) -> Result<(usize, usize)> {
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    if fields.len() != 2 {
        return Err(Error::parse(lineno, "header must hold exactly two integers"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(lineno, format!("invalid dimension `{}`", s)))
    };
    Ok((parse(fields[0])?, parse(fields[1])?))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_bit_exact() {
        let m = Matrix::from_vec(2, 3, vec![0.1, -2.5e-300, 3.0, 1.0 / 3.0, 7e22, -0.0]).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = Matrix::read_text(&buf[..]).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_ragged_rows() {
        let err = Matrix::read_text("2 2\n1 2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }
}
