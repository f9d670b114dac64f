use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CostKind, CostMatrix};
use crate::dataset::{FeatureMatrix, PairedSet};
use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    /// Weight of each paired cross edge.
    pub cross_edge_weight: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 10,
            cross_edge_weight: 0.0,
        }
    }
}

/// Undirected weighted graph as adjacency lists.
#[derive(Debug, Clone)]
pub(crate) struct Graph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
        }
    }

    fn add_edge(&mut self, a: usize, b: usize, w: f64) {
        self.adj[a].push((b, w));
        self.adj[b].push((a, w));
    }

    /// Drops duplicate edges, keeping the lightest, so adjacency order is canonical.
    fn canonicalize(&mut self) {
        for list in &mut self.adj {
            list.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)));
            list.dedup_by_key(|e| e.0);
        }
    }

    fn dijkstra(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.adj.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(State(0.0, source));
        while let Some(State(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(State(nd, v));
                }
            }
        }
        dist
    }

    fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.adj.len()];
        let mut next = 0;
        for start in 0..self.adj.len() {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = next;
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

/// Min-heap entry ordered by distance, then node index.
#[derive(PartialEq)]
struct State(f64, usize);

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn add_knn_edges(g: &mut Graph, points: &Matrix, offset: usize, k: usize) {
    let n = points.rows();
    let lists: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, sq_dist(points.row(i), points.row(j)).sqrt()))
                .collect();
            d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            d.truncate(k);
            d
        })
        .collect();
    for (i, list) in lists.into_iter().enumerate() {
        for (j, w) in list {
            g.add_edge(offset + i, offset + j, w);
        }
    }
}

/// Source nodes are `0..n`, target nodes `n..n+m`.
pub(crate) fn fused_graph(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    pairs: &PairedSet,
    cfg: &KnnConfig,
) -> Result<Graph> {
    let (n, m) = (x.len(), y.len());
    if cfg.k == 0 || cfg.k >= n || cfg.k >= m {
        return Err(Error::Config(format!(
            "knn k = {} must satisfy 1 <= k < n = {n} and k < m = {m}",
            cfg.k
        )));
    }
    if !(cfg.cross_edge_weight >= 0.0 && cfg.cross_edge_weight.is_finite()) {
        return Err(Error::Config(format!(
            "cross edge weight must be finite and non-negative, got {}",
            cfg.cross_edge_weight
        )));
    }
    for &(i, j) in pairs.pairs() {
        if i >= n || j >= m {
            return Err(Error::Input(format!("pair ({i}, {j}) out of range")));
        }
    }
    let mut g = Graph::new(n + m);
    add_knn_edges(&mut g, x.points(), 0, cfg.k);
    add_knn_edges(&mut g, y.points(), n, cfg.k);
    for &(i, j) in pairs.pairs() {
        g.add_edge(i, n + j, cfg.cross_edge_weight);
    }
    g.canonicalize();
    Ok(g)
}

fn connectivity_error(g: &Graph, n: usize) -> Error {
    let comp = g.components();
    let count = comp.iter().max().map_or(0, |c| c + 1);
    let mut parts = Vec::new();
    for c in 0..count {
        let src: Vec<usize> = (0..n).filter(|&v| comp[v] == c).collect();
        let tgt: Vec<usize> = (n..comp.len())
            .filter(|&v| comp[v] == c)
            .map(|v| v - n)
            .collect();
        let show = |v: &[usize]| {
            let head: Vec<String> = v.iter().take(5).map(|i| i.to_string()).collect();
            let more = if v.len() > 5 { ", ..." } else { "" };
            format!("{} [{}{more}]", v.len(), head.join(", "))
        };
        parts.push(format!(
            "component {c}: sources {}, targets {}",
            show(&src),
            show(&tgt)
        ));
    }
    Error::Connectivity(format!(
        "fused kNN graph has {count} components; {}",
        parts.join("; ")
    ))
}

/// Shortest-path distances from every source node to every target node.
pub fn knn_fused_cost(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    pairs: &PairedSet,
    cfg: &KnnConfig,
) -> Result<CostMatrix> {
    let g = fused_graph(x, y, pairs, cfg)?;
    let (n, m) = (x.len(), y.len());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| g.dijkstra(i)[n..].to_vec())
        .collect();
    if rows.iter().any(|r| r.iter().any(|v| v.is_infinite())) {
        return Err(connectivity_error(&g, n));
    }
    let values = Matrix::from_vec(n, m, rows.concat())?;
    CostMatrix::new(values, CostKind::Knn, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> FeatureMatrix {
        let rows: Vec<[f64; 1]> = xs.iter().map(|&v| [v]).collect();
        FeatureMatrix::unlabelled(Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn path_graph_distances_are_hand_sums() {
        // x0 - x1 (1.0), y0 - y1 (2.0), bridge x1 ~ y0.
        let x = line(&[0.0, 1.0]);
        let y = line(&[10.0, 12.0]);
        let p = PairedSet::new(vec![(1, 0)], 2, 2).unwrap();
        let c = knn_fused_cost(
            &x,
            &y,
            &p,
            &KnnConfig {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(c.values().as_slice(), &[1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn unit_cross_weight_is_configurable() {
        let x = line(&[0.0, 1.0]);
        let y = line(&[10.0, 12.0]);
        let p = PairedSet::new(vec![(1, 0)], 2, 2).unwrap();
        let cfg = KnnConfig {
            k: 1,
            cross_edge_weight: 1.0,
        };
        let c = knn_fused_cost(&x, &y, &p, &cfg).unwrap();
        assert_eq!(c.values().as_slice(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn disconnected_graph_lists_components() {
        let x = line(&[0.0, 1.0, 50.0, 51.0]);
        let y = line(&[0.0, 1.0, 2.0]);
        let p = PairedSet::new(vec![(0, 0)], 4, 3).unwrap();
        let err = knn_fused_cost(
            &x,
            &y,
            &p,
            &KnnConfig {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap_err();
        match err {
            Error::Connectivity(msg) => {
                assert!(msg.contains("2 components"), "{msg}");
                assert!(msg.contains("sources 2 [2, 3]"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn k_bounds_checked() {
        let x = line(&[0.0, 1.0]);
        let p = PairedSet::identity(2);
        assert!(knn_fused_cost(
            &x,
            &x,
            &p,
            &KnnConfig {
                k: 2,
                ..Default::default()
            }
        )
        .is_err());
        assert!(knn_fused_cost(
            &x,
            &x,
            &p,
            &KnnConfig {
                k: 0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
