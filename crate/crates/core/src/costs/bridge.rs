use rayon::prelude::*;

use super::{CostKind, CostMatrix};
use crate::dataset::PairedSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Routes every cross pair through its cheapest anchor; paired cells are zero.
pub fn bridge_cost(cxx: &CostMatrix, cyy: &CostMatrix, pairs: &PairedSet) -> Result<CostMatrix> {
    let (n, n2) = cxx.shape();
    let (m, m2) = cyy.shape();
    if n != n2 {
        return Err(Error::shape("bridge_cost C_XX columns", n, n2));
    }
    if m != m2 {
        return Err(Error::shape("bridge_cost C_YY columns", m, m2));
    }
    if pairs.is_empty() {
        return Err(Error::Input(
            "bridge cost needs at least one paired point".into(),
        ));
    }
    let all_x: Vec<usize> = (0..n).collect();
    let all_y: Vec<usize> = (0..m).collect();
    let src_to_anchor = cxx.values().select(&all_x, &pairs.sources());
    let anchor_to_tgt = cyy.values().select(&pairs.targets(), &all_y);
    let values = bridge_from_anchor_costs(&src_to_anchor, &anchor_to_tgt, pairs.pairs())?;
    CostMatrix::new(values, CostKind::Bridge, false)
}

/// `out[i][j] = min_p s[i][p] + t[p][j]`, then zero at `zero_cells`.
///
/// `s` is source-to-anchor (`n × l`) and `t` anchor-to-target (`l × m`), so a
/// minibatch can be routed through anchors that lie outside the batch.
pub fn bridge_from_anchor_costs(
    s: &Matrix,
    t: &Matrix,
    zero_cells: &[(usize, usize)],
) -> Result<Matrix> {
    if s.cols() != t.rows() {
        return Err(Error::shape("bridge anchor count", s.cols(), t.rows()));
    }
    if s.cols() == 0 {
        return Err(Error::Input("bridge cost needs at least one anchor".into()));
    }
    let (n, l, m) = (s.rows(), s.cols(), t.cols());
    let mut out = Matrix::filled(n, m, f64::INFINITY);
    out.as_mut_slice()
        .par_chunks_mut(m.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let si = s.row(i);
            for p in 0..l {
                let a = si[p];
                for (o, &b) in row.iter_mut().zip(t.row(p)) {
                    let v = a + b;
                    if v < *o {
                        *o = v;
                    }
                }
            }
        });
    for &(i, j) in zero_cells {
        if i >= n || j >= m {
            return Err(Error::Input(format!(
                "zero cell ({i}, {j}) outside a {n}x{m} bridge cost"
            )));
        }
        out[(i, j)] = 0.0;
    }
    Ok(out)
}
