//! Feature and pair files.
//!
//! Binary `BRGF`: `"BRGF" | version u8 | rows u32 | cols u32 | rows*cols f64 |
//! has_labels u8 | [rows i64]`, little-endian.
//!
//! Feature CSV has a `dim0,...,dimK[,label]` header and one point per line.
//! Pair CSV has a `source,target` header and one pair per line.

use std::path::Path;

use crate::costs::io::{csv_err, is_csv, numbered_lines};
use crate::dataset::{FeatureMatrix, PairedSet};
use crate::error::Result;
use crate::fsutil::{self, in_file, put_f64s, put_i64, put_u32, Reader};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"BRGF";
pub const VERSION: u8 = 1;

pub fn encode_features(x: &FeatureMatrix) -> Vec<u8> {
    let (n, d) = x.points().shape();
    let mut out = Vec::with_capacity(15 + 8 * n * (d + 1));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, n);
    put_u32(&mut out, d);
    put_f64s(&mut out, x.points().as_slice());
    match x.labels() {
        Some(l) => {
            out.push(1);
            for &v in l {
                put_i64(&mut out, v);
            }
        }
        None => out.push(0),
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new("feature file", bytes);
    r.magic(MAGIC)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported feature file version {version}")));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let values = r.f64s(n.checked_mul(d).ok_or_else(|| r.err("size overflow"))?)?;
    let labels = match r.u8()? {
        0 => None,
        1 => Some((0..n).map(|_| r.i64()).collect::<Result<Vec<_>>>()?),
        other => return Err(r.err(format!("invalid label flag {other}"))),
    };
    r.finish()?;
    FeatureMatrix::new(Matrix::from_vec(n, d, values)?, labels)
}

pub fn features_to_csv(x: &FeatureMatrix) -> String {
    let d = x.dim();
    let mut header: Vec<String> = (0..d).map(|k| format!("dim{k}")).collect();
    if x.labels().is_some() {
        header.push("label".into());
    }
    let mut s = header.join(",");
    s.push('\n');
    for i in 0..x.len() {
        let mut line: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = x.labels() {
            line.push(l[i].to_string());
        }
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn features_from_csv(text: &str) -> Result<FeatureMatrix> {
    let err = |ln, off, msg: String| csv_err("feature csv", ln, off, msg);
    let mut lines = numbered_lines(text);
    let (_, _, header) = lines.next().ok_or_else(|| err(0, 0, "empty file".into()))?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let labelled = cols.last() == Some(&"label");
    let d = cols.len() - usize::from(labelled);
    if d == 0 {
        return Err(err(0, 0, "header has no dim columns".into()));
    }
    for (k, c) in cols[..d].iter().enumerate() {
        if *c != format!("dim{k}") {
            return Err(err(0, 0, format!("expected column dim{k}, found {c:?}")));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (ln, off, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if vals.len() != cols.len() {
            return Err(err(
                ln,
                off,
                format!(
                    "row {rows} has {} columns, expected {}",
                    vals.len(),
                    cols.len()
                ),
            ));
        }
        for v in &vals[..d] {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| err(ln, off, format!("row {rows}: invalid number {v:?}")))?,
            );
        }
        if labelled {
            let v = vals[d];
            labels.push(
                v.parse::<i64>()
                    .map_err(|_| err(ln, off, format!("row {rows}: invalid label {v:?}")))?,
            );
        }
        rows += 1;
    }
    FeatureMatrix::new(Matrix::from_vec(rows, d, data)?, labelled.then_some(labels))
}

pub fn pairs_to_csv(p: &PairedSet) -> String {
    let mut s = String::from("source,target\n");
    for &(i, j) in p.pairs() {
        s.push_str(&format!("{i},{j}\n"));
    }
    s
}

/// Parses pairs and validates them against an `n × m` problem.
pub fn pairs_from_csv(text: &str, n: usize, m: usize) -> Result<PairedSet> {
    let err = |ln, off, msg: String| csv_err("pairs csv", ln, off, msg);
    let mut lines = numbered_lines(text);
    match lines.next() {
        Some((_, _, h)) if h.trim().replace(' ', "") == "source,target" => {}
        _ => return Err(err(0, 0, "expected header source,target".into())),
    }
    let mut pairs = Vec::new();
    for (ln, off, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        let [a, b] = vals[..] else {
            return Err(err(
                ln,
                off,
                format!("expected 2 columns, found {}", vals.len()),
            ));
        };
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| err(ln, off, format!("invalid index {v:?}")))
        };
        pairs.push((parse(a)?, parse(b)?));
    }
    PairedSet::new(pairs, n, m)
}

/// `.csv` is text, anything else binary.
pub fn save_features(path: &Path, x: &FeatureMatrix) -> Result<()> {
    if is_csv(path) {
        fsutil::write_atomic(path, features_to_csv(x).as_bytes())
    } else {
        fsutil::write_atomic(path, &encode_features(x))
    }
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    if is_csv(path) {
        features_from_csv(&fsutil::read_string(path)?).map_err(in_file(path))
    } else {
        decode_features(&fsutil::read(path)?).map_err(in_file(path))
    }
}

pub fn save_pairs(path: &Path, p: &PairedSet) -> Result<()> {
    fsutil::write_atomic(path, pairs_to_csv(p).as_bytes())
}

pub fn load_pairs(path: &Path, n: usize, m: usize) -> Result<PairedSet> {
    pairs_from_csv(&fsutil::read_string(path)?, n, m).map_err(in_file(path))
}
