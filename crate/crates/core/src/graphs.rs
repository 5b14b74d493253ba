//! Correlation graphs between series: construction, kNN sparsification,
//! edge masking with row normalization, and the edge-list file format.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TimePanel;
use crate::error::{Error, Result};

/// Dense N×N non-negative adjacency. The diagonal is always 0; self-loops are
/// added by the GAT, not stored here.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationGraph {
    pub node_ids: Vec<String>,
    /// Row-major `weights[i * n + j] = a_ij`.
    pub weights: Vec<f64>,
    pub directed: bool,
}

impl CorrelationGraph {
    pub fn new(node_ids: Vec<String>, weights: Vec<f64>, directed: bool) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::invalid("graph needs at least one node"));
        }
        if weights.len() != n * n {
            return Err(Error::invalid(format!(
                "graph of {n} nodes needs {} weights, got {}",
                n * n,
                weights.len()
            )));
        }
        check_unique(&node_ids)?;
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::invalid(format!("edge weight {w} is negative or not finite")));
        }
        if (0..n).any(|i| weights[i * n + i] != 0.0) {
            return Err(Error::invalid("graph diagonal must be zero"));
        }
        if !directed && !is_symmetric(&weights, n) {
            return Err(Error::invalid("undirected graph has asymmetric weights"));
        }
        Ok(CorrelationGraph {
            node_ids,
            weights,
            directed,
        })
    }

    /// Graph with no edges.
    pub fn empty(node_ids: Vec<String>) -> Result<Self> {
        let n = node_ids.len();
        Self::new(node_ids, vec![0.0; n * n], false)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n_nodes() + j]
    }

    /// Number of nonzero entries (an undirected edge counts twice).
    pub fn nnz(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// Restriction to `nodes`, in the given order.
    pub fn restrict(&self, nodes: &[usize]) -> CorrelationGraph {
        let n = self.n_nodes();
        let mut weights = Vec::with_capacity(nodes.len() * nodes.len());
        for &i in nodes {
            for &j in nodes {
                weights.push(self.weights[i * n + j]);
            }
        }
        CorrelationGraph {
            node_ids: nodes.iter().map(|&i| self.node_ids[i].clone()).collect(),
            weights,
            directed: self.directed,
        }
    }

    /// Reorders the graph so that node `nodes[k]` of `self` becomes node `k`.
    pub fn aligned_to(&self, node_ids: &[String]) -> Result<CorrelationGraph> {
        let pos: BTreeMap<&str, usize> = self
            .node_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let idx = node_ids
            .iter()
            .map(|id| {
                pos.get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("node {id} is not in the graph")))
            })
            .collect::<Result<Vec<_>>>()?;
        if idx.len() != self.n_nodes() {
            return Err(Error::invalid(format!(
                "graph has {} nodes but {} were requested",
                self.n_nodes(),
                idx.len()
            )));
        }
        Ok(self.restrict(&idx))
    }

    /// Writes the `tcgpn-graph v1` edge-list format. Undirected graphs list
    /// each edge once with `src < dst` in node order.
    pub fn to_edge_list(&self) -> String {
        let n = self.n_nodes();
        let mut out = format!("tcgpn-graph v1 directed={} n={n}\n", u8::from(self.directed));
        for i in 0..n {
            for j in 0..n {
                let w = self.weights[i * n + j];
                if w != 0.0 && (self.directed || i < j) {
                    let _ = writeln!(out, "{},{},{w}", self.node_ids[i], self.node_ids[j]);
                }
            }
        }
        out
    }

    /// Parses the edge-list format against the expected node set.
    pub fn from_edge_list(text: &str, node_ids: &[String], origin: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "empty graph file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (directed, n) = match fields.as_slice() {
            ["tcgpn-graph", "v1", d, n] => {
                let directed = match *d {
                    "directed=0" => false,
                    "directed=1" => true,
                    other => return Err(perr(1, format!("bad directed flag {other}"))),
                };
                let n = n
                    .strip_prefix("n=")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| perr(1, format!("bad node count {n}")))?;
                (directed, n)
            }
            _ => return Err(perr(1, format!("unrecognised header {header:?}"))),
        };
        if n != node_ids.len() {
            return Err(perr(1, format!("graph has n={n} but the panel has {} nodes", node_ids.len())));
        }
        let pos: BTreeMap<&str, usize> = node_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut weights = vec![0.0; n * n];
        for (k, line) in lines {
            let lineno = k + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(perr(lineno, format!("expected src,dst,weight, got {line:?}")));
            }
            let node = |s: &str| {
                pos.get(s.trim())
                    .copied()
                    .ok_or_else(|| perr(lineno, format!("unknown node {s:?}")))
            };
            let (i, j) = (node(parts[0])?, node(parts[1])?);
            let w: f64 = parts[2]
                .trim()
                .parse()
                .map_err(|_| perr(lineno, format!("bad weight {:?}", parts[2])))?;
            if i == j {
                return Err(perr(lineno, "self-loop in graph file".into()));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(perr(lineno, format!("weight {w} is negative or not finite")));
            }
            weights[i * n + j] = w;
            if !directed {
                weights[j * n + i] = w;
            }
        }
        Self::new(node_ids.to_vec(), weights, directed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, node_ids: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_edge_list(&text, node_ids, &path.display().to_string())
    }
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate node id {id}")));
        }
    }
    Ok(())
}

fn is_symmetric(w: &[f64], n: usize) -> bool {
    (0..n).all(|i| (i + 1..n).all(|j| w[i * n + j] == w[j * n + i]))
}

/// One listed company for the industry graph.
#[derive(Clone, Debug)]
pub struct IndustryNode {
    pub id: String,
    pub industry: String,
    pub registered_capital: f64,
    pub turnover: f64,
}

/// Directed industry-leadership graph: within an industry
/// `a_ij = R_j/R_i + Tv_j/Tv_i`, zero across industries.
pub fn build_industry_graph(nodes: &[IndustryNode]) -> Result<CorrelationGraph> {
    for n in nodes {
        if !(n.registered_capital > 0.0 && n.turnover > 0.0) {
            return Err(Error::invalid(format!(
                "node {}: registered capital and turnover must be positive",
                n.id
            )));
        }
    }
    let ids: Vec<String> = nodes.iter().map(|n| n.id.clone()).collect();
    check_unique(&ids)?;
    let n = nodes.len();
    let mut weights = vec![0.0; n * n];
    for (i, a) in nodes.iter().enumerate() {
        for (j, b) in nodes.iter().enumerate() {
            if i != j && a.industry == b.industry {
                weights[i * n + j] = b.registered_capital / a.registered_capital + b.turnover / a.turnover;
            }
        }
    }
    CorrelationGraph::new(ids, weights, true)
}

/// Pairwise Euclidean distances between flattened node series.
pub fn distance_matrix(series: &[Vec<f64>]) -> Vec<f64> {
    let n = series.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = series[i]
                .iter()
                .zip(&series[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = s.sqrt();
            d[j * n + i] = s.sqrt();
        }
    }
    d
}

/// Keeps, for every node, its `k` nearest other nodes (ties broken by index),
/// taking the union over both endpoints so the result stays symmetric.
pub fn knn_sparsify(dist: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut keep = vec![false; n * n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            keep[i * n + j] = true;
            keep[j * n + i] = true;
        }
    }
    dist.iter()
        .zip(&keep)
        .map(|(&d, &k)| if k { d } else { 0.0 })
        .collect()
}

/// Symmetric distance graph over the whole panel history, sparsified to the
/// `k_neighbors` most similar series per node. Identical series have
/// distance 0 and therefore no edge.
pub fn build_distance_graph(panel: &TimePanel, k_neighbors: usize) -> Result<CorrelationGraph> {
    let n = panel.n_nodes();
    if n < 2 {
        return Err(Error::invalid("distance graph needs at least 2 nodes"));
    }
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(Error::invalid(format!("k_neighbors must be in 1..{n}, got {k_neighbors}")));
    }
    let series: Vec<Vec<f64>> = (0..n).map(|i| panel.node_series(i).to_vec()).collect();
    let dist = distance_matrix(&series);
    CorrelationGraph::new(panel.node_ids.clone(), knn_sparsify(&dist, n, k_neighbors), false)
}

/// Granularity of the graph random mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Mask individual nonzero entries.
    Edge,
    /// Mask every outgoing entry of whole rows.
    Node,
}

impl MaskMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "edge" => Some(MaskMode::Edge),
            "node" => Some(MaskMode::Node),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Edge => "edge",
            MaskMode::Node => "node",
        }
    }
}

/// A graph after random masking and row normalization.
#[derive(Clone, Debug)]
pub struct MaskedGraph {
    pub base: CorrelationGraph,
    /// Ã: masked copy with surviving rows normalized to sum 1.
    pub input_weights: Vec<f64>,
    /// True where the entry is supervised: everywhere except masked edges
    /// and the diagonal.
    pub mask_kept: Vec<bool>,
    pub mask_rate: f64,
}

impl MaskedGraph {
    pub fn n_nodes(&self) -> usize {
        self.base.n_nodes()
    }

    /// Connectivity seen by the GAT: surviving edges plus self-loops.
    pub fn connectivity(&self) -> Vec<bool> {
        let n = self.n_nodes();
        (0..n * n)
            .map(|k| k / n == k % n || self.input_weights[k] != 0.0)
            .collect()
    }

    /// Number of originally nonzero entries that were masked.
    pub fn masked_edges(&self) -> usize {
        self.base
            .weights
            .iter()
            .zip(&self.mask_kept)
            .filter(|(&w, &k)| w != 0.0 && !k)
            .count()
    }
}

/// Zeroes the listed entries, row-normalizes what survives and records the
/// supervision mask.
pub fn apply_mask(graph: &CorrelationGraph, masked: &[(usize, usize)], r_g: f64) -> MaskedGraph {
    let n = graph.n_nodes();
    let mut input = graph.weights.clone();
    let mut kept = vec![true; n * n];
    for i in 0..n {
        kept[i * n + i] = false;
    }
    for &(i, j) in masked {
        input[i * n + j] = 0.0;
        kept[i * n + j] = false;
    }
    for row in input.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    MaskedGraph {
        base: graph.clone(),
        input_weights: input,
        mask_kept: kept,
        mask_rate: r_g,
    }
}

/// Samples `⌊r_g · nnz⌋` nonzero entries (or `⌊r_g · N⌋` rows in node mode)
/// uniformly without replacement, masks them and normalizes.
pub fn mask_and_normalize(graph: &CorrelationGraph, r_g: f64, mode: MaskMode, seed: u64) -> Result<MaskedGraph> {
    if !(0.0..1.0).contains(&r_g) {
        return Err(Error::invalid(format!("graph mask rate must be in [0, 1), got {r_g}")));
    }
    let n = graph.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nonzero: Vec<(usize, usize)> = (0..n * n)
        .filter(|&k| graph.weights[k] != 0.0)
        .map(|k| (k / n, k % n))
        .collect();
    let masked: Vec<(usize, usize)> = match mode {
        MaskMode::Edge => {
            let count = (r_g * nonzero.len() as f64).floor() as usize;
            index::sample(&mut rng, nonzero.len(), count)
                .into_iter()
                .map(|k| nonzero[k])
                .collect()
        }
        MaskMode::Node => {
            let count = (r_g * n as f64).floor() as usize;
            let rows: HashSet<usize> = index::sample(&mut rng, n, count).into_iter().collect();
            nonzero.into_iter().filter(|(i, _)| rows.contains(i)).collect()
        }
    };
    Ok(apply_mask(graph, &masked, r_g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    fn node(id: &str, ind: &str, r: f64, tv: f64) -> IndustryNode {
        IndustryNode {
            id: id.into(),
            industry: ind.into(),
            registered_capital: r,
            turnover: tv,
        }
    }

    #[test]
    fn industry_equal_sizes_give_weight_two() {
        let g = build_industry_graph(&[node("a", "x", 1.0, 1.0), node("b", "x", 1.0, 1.0)]).unwrap();
        assert_eq!(g.weight(0, 1), 2.0);
        assert_eq!(g.weight(1, 0), 2.0);
        assert!(g.directed);
    }

    #[test]
    fn industry_ratios_are_asymmetric() {
        let g = build_industry_graph(&[node("a", "x", 2.0, 4.0), node("b", "x", 1.0, 2.0)]).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
        assert_eq!(g.weight(1, 0), 4.0);
    }

    #[test]
    fn industry_cross_sector_is_zero() {
        let g = build_industry_graph(&[
            node("a", "x", 2.0, 4.0),
            node("b", "y", 1.0, 2.0),
            node("c", "x", 3.0, 1.0),
        ])
        .unwrap();
        assert_eq!(g.weight(0, 1), 0.0);
        assert_eq!(g.weight(1, 2), 0.0);
        assert!(g.weight(0, 2) > 0.0);
    }

    #[test]
    fn industry_rejects_bad_inputs() {
        assert!(build_industry_graph(&[node("a", "x", 0.0, 1.0)]).is_err());
        assert!(build_industry_graph(&[node("a", "x", 1.0, -1.0)]).is_err());
        assert!(build_industry_graph(&[node("a", "x", 1.0, 1.0), node("a", "y", 1.0, 1.0)]).is_err());
    }

    #[test]
    fn distance_of_simple_pair() {
        let d = distance_matrix(&[vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!((d[1] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d[2], 0.0);
    }

    /// Independent kNN: for every unordered pair, keep it if either endpoint
    /// ranks the other among its k nearest.
    fn brute_knn(dist: &[f64], n: usize, k: usize) -> Vec<bool> {
        let rank = |i: usize, j: usize| {
            (0..n)
                .filter(|&m| m != i && m != j)
                .filter(|&m| dist[i * n + m] < dist[i * n + j] || (dist[i * n + m] == dist[i * n + j] && m < j))
                .count()
        };
        let mut keep = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && (rank(i, j) < k || rank(j, i) < k) {
                    keep[i * n + j] = true;
                }
            }
        }
        keep
    }

    #[test]
    fn five_node_knn_matches_brute_force() {
        let series: Vec<Vec<f64>> = [0.0, 0.3, 1.1, 2.5, 2.6].iter().map(|&v| vec![v, v * v]).collect();
        let dist = distance_matrix(&series);
        let w = knn_sparsify(&dist, 5, 2);
        let keep = brute_knn(&dist, 5, 2);
        for k in 0..25 {
            assert_eq!(w[k] != 0.0, keep[k], "entry {k}");
        }
        for i in 0..5 {
            let deg = (0..5).filter(|&j| w[i * 5 + j] != 0.0).count();
            assert!((2..=4).contains(&deg));
            for j in 0..5 {
                assert_eq!(w[i * 5 + j], w[j * 5 + i]);
            }
        }
    }

    #[test]
    fn normalizes_rows_without_masking() {
        let g = CorrelationGraph::new(ids(3), vec![0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 2.0, 0.0, 0.0], false).unwrap();
        let m = mask_and_normalize(&g, 0.0, MaskMode::Edge, 1).unwrap();
        assert_eq!(&m.input_weights[0..3], &[0.0, 0.5, 0.5]);
        assert_eq!(m.masked_edges(), 0);
        for k in 0..9 {
            assert_eq!(m.mask_kept[k], k % 4 != 0);
        }
    }

    fn ring_graph(n: usize, extra: usize) -> CorrelationGraph {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for d in 1..=extra {
                let j = (i + d) % n;
                w[i * n + j] = 1.0 + d as f64;
                w[j * n + i] = 1.0 + d as f64;
            }
        }
        CorrelationGraph::new(ids(n), w, false).unwrap()
    }

    #[test]
    fn forty_edges_at_thirty_percent_masks_twelve() {
        let g = ring_graph(10, 2);
        assert_eq!(g.nnz(), 40);
        let m = mask_and_normalize(&g, 0.3, MaskMode::Edge, 9).unwrap();
        assert_eq!(m.masked_edges(), 12);
        assert_eq!(g, m.base);
    }

    #[test]
    fn node_mode_masks_whole_rows() {
        let g = ring_graph(10, 2);
        let m = mask_and_normalize(&g, 0.2, MaskMode::Node, 3).unwrap();
        let n = 10;
        let masked_rows: Vec<usize> = (0..n)
            .filter(|&i| (0..n).any(|j| g.weight(i, j) != 0.0 && !m.mask_kept[i * n + j]))
            .collect();
        assert_eq!(masked_rows.len(), 2);
        for &i in &masked_rows {
            assert!((0..n).all(|j| m.input_weights[i * n + j] == 0.0));
        }
    }

    #[test]
    fn rejects_bad_rate() {
        let g = ring_graph(4, 1);
        assert!(mask_and_normalize(&g, 1.0, MaskMode::Edge, 0).is_err());
        assert!(mask_and_normalize(&g, -0.1, MaskMode::Edge, 0).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let g = ring_graph(6, 2);
        let back = CorrelationGraph::from_edge_list(&g.to_edge_list(), &ids(6), "mem").unwrap();
        assert_eq!(g, back);
        let d = build_industry_graph(&[node("n0", "x", 2.0, 4.0), node("n1", "x", 1.0, 2.0)]).unwrap();
        let back = CorrelationGraph::from_edge_list(&d.to_edge_list(), &ids(2), "mem").unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn edge_list_errors_carry_line_numbers() {
        let text = "tcgpn-graph v1 directed=0 n=2\nn0,n1,1\nn0,zz,2\n";
        match CorrelationGraph::from_edge_list(text, &ids(2), "g.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(CorrelationGraph::from_edge_list("tcgpn-graph v1 directed=0 n=3\n", &ids(2), "g").is_err());
    }

    fn random_graph(n: usize, seed: u64, directed: bool) -> CorrelationGraph {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && (directed || i < j) && rng.random_bool(0.4) {
                    let v = rng.random_range(0.1..3.0);
                    w[i * n + j] = v;
                    if !directed {
                        w[j * n + i] = v;
                    }
                }
            }
        }
        CorrelationGraph::new(ids(n), w, directed).unwrap()
    }

    proptest! {
        #[test]
        fn masked_graph_invariants(n in 2usize..12, seed in any::<u64>(), r in 0.0f64..0.95, directed in any::<bool>()) {
            let g = random_graph(n, seed, directed);
            let m = mask_and_normalize(&g, r, MaskMode::Edge, seed ^ 7).unwrap();
            let expected = (r * g.nnz() as f64).floor() as usize;
            prop_assert_eq!(m.masked_edges(), expected);
            for i in 0..n {
                let row = &m.input_weights[i * n..(i + 1) * n];
                for j in 0..n {
                    if !m.mask_kept[i * n + j] || g.weight(i, j) == 0.0 {
                        prop_assert_eq!(row[j], 0.0);
                    }
                }
                let s: f64 = row.iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn masking_commutes_with_permutation(n in 2usize..10, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let g = random_graph(n, seed, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let m = mask_and_normalize(&g, 0.3, MaskMode::Edge, seed).unwrap();
            let masked: Vec<(usize, usize)> = (0..n * n)
                .filter(|&k| g.weights[k] != 0.0 && !m.mask_kept[k])
                .map(|k| (k / n, k % n))
                .collect();
            // Relabel: new node p holds old node perm[p].
            let mut inv = vec![0; n];
            for (p, &o) in perm.iter().enumerate() {
                inv[o] = p;
            }
            let pg = g.restrict(&perm);
            let pmasked: Vec<(usize, usize)> = masked.iter().map(|&(i, j)| (inv[i], inv[j])).collect();
            let pm = apply_mask(&pg, &pmasked, 0.3);
            for a in 0..n {
                for b in 0..n {
                    prop_assert!((pm.input_weights[a * n + b] - m.input_weights[perm[a] * n + perm[b]]).abs() < 1e-12);
                    prop_assert_eq!(pm.mask_kept[a * n + b], m.mask_kept[perm[a] * n + perm[b]]);
                }
            }
        }

        #[test]
        fn distance_graph_symmetric_zero_diagonal(n in 2usize..9, len in 1usize..12, seed in any::<u64>(), k in 1usize..8) {
            use rand::Rng;
            let k = k.min(n - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let series: Vec<Vec<f64>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let w = knn_sparsify(&distance_matrix(&series), n, k);
            for i in 0..n {
                prop_assert_eq!(w[i * n + i], 0.0);
                for j in 0..n {
                    prop_assert_eq!(w[i * n + j], w[j * n + i]);
                }
            }
        }

        #[test]
        fn industry_blocks_are_exactly_zero(sizes in proptest::collection::vec((0u8..3, 0.1f64..10.0, 0.1f64..10.0), 1..10)) {
            let nodes: Vec<IndustryNode> = sizes
                .iter()
                .enumerate()
                .map(|(i, &(ind, r, tv))| node(&format!("s{i}"), &format!("ind{ind}"), r, tv))
                .collect();
            let g = build_industry_graph(&nodes).unwrap();
            for (i, a) in nodes.iter().enumerate() {
                for (j, b) in nodes.iter().enumerate() {
                    if a.industry != b.industry || i == j {
                        prop_assert_eq!(g.weight(i, j), 0.0);
                    } else {
                        prop_assert!(g.weight(i, j) > 0.0);
                    }
                }
            }
        }
    }
}
