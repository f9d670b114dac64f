//! Cost matrix files.
//!
//! Binary `BFCM`: `"BFCM" | version u8 | rows u32 | cols u32 | kind u8 |
//! normalized u8 | rows*cols f64`, little-endian.
//!
//! CSV: a `rows,cols,kind,normalized` header line, one metadata line, then
//! one line per row.

use std::path::Path;

use super::{CostKind, CostMatrix};
use crate::error::{Error, Result};
use crate::fsutil::{self, put_f64s, put_u32, Reader};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"BFCM";
pub const VERSION: u8 = 1;

pub fn encode(c: &CostMatrix) -> Vec<u8> {
    let (r, k) = c.shape();
    let mut out = Vec::with_capacity(16 + 8 * r * k);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, r);
    put_u32(&mut out, k);
    out.push(c.kind().code());
    out.push(c.is_normalized() as u8);
    put_f64s(&mut out, c.values().as_slice());
    out
}

pub fn decode(bytes: &[u8]) -> Result<CostMatrix> {
    let mut r = Reader::new("cost matrix", bytes);
    r.magic(MAGIC)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported cost matrix version {version}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let code = r.u8()?;
    let kind =
        CostKind::from_code(code).ok_or_else(|| r.err(format!("unknown cost kind code {code}")))?;
    let normalized = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(r.err(format!("invalid normalized flag {v}"))),
    };
    let data = r.f64s(rows * cols)?;
    r.finish()?;
    CostMatrix::new(Matrix::from_vec(rows, cols, data)?, kind, normalized)
}

pub fn to_csv(c: &CostMatrix) -> String {
    let (r, k) = c.shape();
    let mut s = format!(
        "rows,cols,kind,normalized\n{r},{k},{},{}\n",
        c.kind().as_str(),
        c.is_normalized()
    );
    for row in c.values().row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Lines with their 0-based number and starting byte offset.
pub(crate) fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, usize, &str)> {
    text.split_inclusive('\n')
        .scan(0usize, |off, raw| {
            let start = *off;
            *off += raw.len();
            Some((start, raw.trim_end_matches(['\n', '\r'])))
        })
        .enumerate()
        .map(|(n, (o, l))| (n, o, l))
}

pub(crate) fn csv_err(what: &str, line: usize, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        what: what.into(),
        offset,
        message: format!("line {}: {}", line + 1, message.into()),
    }
}

pub fn from_csv(text: &str) -> Result<CostMatrix> {
    let err = |ln, off, msg: String| csv_err("cost csv", ln, off, msg);
    let mut lines = numbered_lines(text);
    let (_, _, header) = lines.next().ok_or_else(|| err(0, 0, "empty file".into()))?;
    let header: Vec<&str> = header.trim().split(',').collect();
    if header != ["rows", "cols", "kind", "normalized"] && header != ["rows", "cols", "kind"] {
        return Err(err(
            0,
            0,
            "expected header rows,cols,kind[,normalized]".into(),
        ));
    }
    let (ln, off, meta) = lines
        .next()
        .ok_or_else(|| err(1, text.len(), "missing metadata line".into()))?;
    let meta: Vec<&str> = meta.trim().split(',').collect();
    if meta.len() != header.len() {
        return Err(err(ln, off, "metadata does not match header".into()));
    }
    let rows: usize = meta[0]
        .parse()
        .map_err(|_| err(ln, off, "invalid row count".into()))?;
    let cols: usize = meta[1]
        .parse()
        .map_err(|_| err(ln, off, "invalid column count".into()))?;
    let kind: CostKind = meta[2]
        .parse()
        .map_err(|e: Error| err(ln, off, e.to_string()))?;
    let normalized = match meta.get(3) {
        None | Some(&"false") => false,
        Some(&"true") => true,
        Some(v) => return Err(err(ln, off, format!("invalid normalized flag {v:?}"))),
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (ln, off, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.trim().split(',').collect();
        if vals.len() != cols {
            return Err(err(
                ln,
                off,
                format!("expected {cols} values, found {}", vals.len()),
            ));
        }
        for v in vals {
            data.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| err(ln, off, format!("invalid number {v:?}")))?,
            );
        }
        seen += 1;
    }
    if seen != rows {
        return Err(err(
            text.lines().count(),
            text.len(),
            format!("expected {rows} rows, found {seen}"),
        ));
    }
    CostMatrix::new(Matrix::from_vec(rows, cols, data)?, kind, normalized)
}

/// Chooses the format from the extension: `.csv` is text, anything else binary.
pub fn save(path: &Path, c: &CostMatrix) -> Result<()> {
    if is_csv(path) {
        fsutil::write_atomic(path, to_csv(c).as_bytes())
    } else {
        fsutil::write_atomic(path, &encode(c))
    }
}

pub fn load(path: &Path) -> Result<CostMatrix> {
    let with_path = |e: Error| match e {
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
    };
    if is_csv(path) {
        from_csv(&fsutil::read_string(path)?).map_err(with_path)
    } else {
        decode(&fsutil::read(path)?).map_err(with_path)
    }
}

pub(crate) fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_and_csv_round_trips(
            vals in prop::collection::vec(0.0f64..1e6, 1..30),
            cols in 1usize..4,
            normalized in any::<bool>(),
        ) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let c = CostMatrix::new(m, CostKind::Knn, normalized).unwrap();
            prop_assert_eq!(&decode(&encode(&c)).unwrap(), &c);
            prop_assert_eq!(&from_csv(&to_csv(&c)).unwrap(), &c);
        }
    }

    #[test]
    fn csv_row_errors_name_the_line() {
        let err = from_csv("rows,cols,kind\n2,2,bridge\n0,1\n1\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn rejects_trailing_bytes() {
        let c = CostMatrix::new(Matrix::zeros(1, 1), CostKind::Cosine, false).unwrap();
        let mut b = encode(&c);
        b.push(7);
        assert!(matches!(decode(&b), Err(Error::Parse { .. })));
    }
}
