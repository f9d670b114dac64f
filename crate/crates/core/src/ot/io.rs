//! Coupling files.
//!
//! Binary `BFPI`: `"BFPI" | version u8 | rows u32 | cols u32 | values f64 |
//! a f64×rows | b f64×cols | report_len u32 | report JSON`, little-endian.
//! CSV holds the matrix only, after a `rows,cols` header and metadata line.

use std::path::Path;

use super::{Coupling, SolverReport};
use crate::costs::io::{csv_err, is_csv, numbered_lines};
use crate::error::{Error, Result};
use crate::fsutil::{self, put_f64s, put_u32, Reader};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"BFPI";
pub const VERSION: u8 = 1;

pub fn encode(pi: &Coupling) -> Vec<u8> {
    let (n, m) = pi.shape();
    let report = serde_json::to_vec(&pi.report).expect("report serializes");
    let mut out = Vec::with_capacity(17 + 8 * (n * m + n + m) + report.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, n);
    put_u32(&mut out, m);
    put_f64s(&mut out, pi.values().as_slice());
    put_f64s(&mut out, pi.source_marginal());
    put_f64s(&mut out, pi.target_marginal());
    put_u32(&mut out, report.len());
    out.extend_from_slice(&report);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Coupling> {
    let mut r = Reader::new("coupling", bytes);
    r.magic(MAGIC)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported coupling version {version}")));
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let values = r.f64s(n * m)?;
    let a = r.f64s(n)?;
    let b = r.f64s(m)?;
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    let report: SolverReport =
        serde_json::from_slice(json).map_err(|e| r.err(format!("invalid solver report: {e}")))?;
    r.finish()?;
    Coupling::new(Matrix::from_vec(n, m, values)?, a, b, report)
}

pub fn to_csv(pi: &Coupling) -> String {
    let (n, m) = pi.shape();
    let mut s = format!("rows,cols\n{n},{m}\n");
    for row in pi.values().row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Marginals are taken to be the achieved row and column sums.
pub fn from_csv(text: &str) -> Result<Coupling> {
    let err = |ln, off, msg: String| csv_err("coupling csv", ln, off, msg);
    let mut lines = numbered_lines(text);
    match lines.next() {
        Some((_, _, h)) if h.trim() == "rows,cols" => {}
        _ => return Err(err(0, 0, "expected header rows,cols".into())),
    }
    let (ln, off, meta) = lines
        .next()
        .ok_or_else(|| err(1, text.len(), "missing shape line".into()))?;
    let dims: Vec<usize> = meta
        .trim()
        .split(',')
        .map(|v| v.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(ln, off, "invalid shape".into()))?;
    let [n, m] = dims[..] else {
        return Err(err(ln, off, "shape line needs two values".into()));
    };
    let mut data = Vec::with_capacity(n * m);
    let mut rows = 0;
    for (ln, off, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.trim().split(',').collect();
        if vals.len() != m {
            return Err(err(
                ln,
                off,
                format!("expected {m} values, found {}", vals.len()),
            ));
        }
        for v in vals {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| err(ln, off, format!("invalid number {v:?}")))?,
            );
        }
        rows += 1;
    }
    if rows != n {
        return Err(err(
            text.lines().count(),
            text.len(),
            format!("expected {n} rows, found {rows}"),
        ));
    }
    let values = Matrix::from_vec(n, m, data)?;
    let (a, b) = (values.row_sums(), values.col_sums());
    Coupling::new(values, a, b, SolverReport::default())
}

pub fn save(path: &Path, pi: &Coupling) -> Result<()> {
    if is_csv(path) {
        fsutil::write_atomic(path, to_csv(pi).as_bytes())
    } else {
        fsutil::write_atomic(path, &encode(pi))
    }
}

pub fn load(path: &Path) -> Result<Coupling> {
    let res = if is_csv(path) {
        from_csv(&fsutil::read_string(path)?)
    } else {
        decode(&fsutil::read(path)?)
    };
    res.map_err(|e| match e {
        Error::Parse {
            what,
            offset,
            message,
        } => Error::Parse {
            what: format!("{what} {}", path.display()),
            offset,
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_keeps_report() {
        let v = Matrix::from_rows(&[[0.25, 0.25], [0.1, 0.4]]).unwrap();
        let report = SolverReport {
            iterations: 12,
            converged: true,
            warnings: vec!["w".into()],
            ..Default::default()
        };
        let pi = Coupling::new(v, vec![0.5, 0.5], vec![0.35, 0.65], report).unwrap();
        assert_eq!(decode(&encode(&pi)).unwrap(), pi);
        let back = from_csv(&to_csv(&pi)).unwrap();
        assert_eq!(back.values(), pi.values());
    }
}
